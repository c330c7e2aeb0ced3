import json

import numpy as np
import pytest
from PIL import Image

import src.config as config
from src.geometry import CameraIntrinsics
from src.models.models import FLAG_REMOVED
from src.scene_io import (
    depth_from_meters,
    export_ply,
    load_cloud,
    load_depth,
    load_image,
    load_manifest,
    load_scene_bundle,
    save_cloud,
    save_depth,
    save_manifest,
    save_scene_bundle,
)
from src.utils.exceptions import (
    BadMagic,
    DimensionMismatch,
    FormatError,
    ParseError,
    TruncatedFile,
    UnsupportedVersion,
    ValidationError,
)
from tests.conftest import make_cloud, make_scene


def test_load_generated_manifest(synth_scene):
    _, manifest, root = synth_scene
    loaded = load_manifest(root / "manifest.json")
    assert loaded.rig == ("cam0",)
    assert len(loaded.frames) == 4
    assert [f.index for f in loaded.frames] == [0, 1, 2, 3]
    assert loaded.frames[1].cameras[0].intrinsics == manifest.frames[1].cameras[0].intrinsics
    assert len(loaded.frames[0].dynamic_boxes) == 1


def test_missing_depth_file_names_path(synth_scene):
    _, manifest, root = synth_scene
    missing = root / manifest.frames[2].cameras[0].depth_path
    missing.unlink()
    with pytest.raises(ValidationError, match="00002_cam0"):
        load_manifest(root / "manifest.json")


def test_bad_json_is_parse_error(tmp_path):
    path = tmp_path / "manifest.json"
    path.write_text("{not json")
    with pytest.raises(ParseError):
        load_manifest(path)


def test_non_increasing_timestamps_rejected(synth_scene):
    _, _, root = synth_scene
    data = json.loads((root / "manifest.json").read_text())
    data["frames"][2]["timestamp"] = data["frames"][1]["timestamp"]
    (root / "manifest.json").write_text(json.dumps(data))
    with pytest.raises(ValidationError, match="timestamp"):
        load_manifest(root / "manifest.json")


def test_missing_rig_camera_rejected(synth_scene):
    _, _, root = synth_scene
    data = json.loads((root / "manifest.json").read_text())
    data["rig"] = ["cam0", "cam1"]
    (root / "manifest.json").write_text(json.dumps(data))
    with pytest.raises(ValidationError, match="frame 0"):
        load_manifest(root / "manifest.json")


def test_unknown_keys_are_ignored(synth_scene):
    _, _, root = synth_scene
    data = json.loads((root / "manifest.json").read_text())
    data["vendor_extension"] = {"anything": 1}
    data["frames"][0]["lidar"] = "ignored"
    (root / "manifest.json").write_text(json.dumps(data))
    assert len(load_manifest(root / "manifest.json").frames) == 4


def test_depth_round_trip(tmp_path):
    values = np.array([[0, 1, 65535], [1234, 2000, 0]], dtype=np.uint16)
    save_depth(values, tmp_path / "d.png")
    k = CameraIntrinsics(fx=1.0, fy=1.0, cx=1.0, cy=1.0, width=3, height=2)
    depth = load_depth(tmp_path / "d.png", k)
    np.testing.assert_array_equal(depth.values, values)
    np.testing.assert_array_equal(depth.valid_mask, values > 0)
    assert depth.meters()[1, 1] == 2.0


def test_eight_bit_depth_is_format_error(tmp_path):
    Image.fromarray(np.zeros((2, 2), dtype=np.uint8)).save(tmp_path / "d.png")
    with pytest.raises(FormatError):
        load_depth(tmp_path / "d.png")


def test_depth_size_mismatch(tmp_path):
    save_depth(np.zeros((2, 3), dtype=np.uint16), tmp_path / "d.png")
    k = CameraIntrinsics(fx=1.0, fy=1.0, cx=1.0, cy=1.0, width=4, height=2)
    with pytest.raises(DimensionMismatch):
        load_depth(tmp_path / "d.png", k)


def test_rgba_image_loads_as_rgb(tmp_path):
    Image.fromarray(np.full((3, 4, 4), 7, dtype=np.uint8)).save(tmp_path / "c.png")
    assert load_image(tmp_path / "c.png").values.shape == (3, 4, 3)


def test_depth_from_meters_quantizes_and_caps():
    out = depth_from_meters(np.array([1.2344, 65.535, 70.0, 0.0, -1.0, np.inf]))
    assert out.tolist() == [1234, 65535, 0, 0, 0, 0]


def cloud_fixture():
    a = make_cloud([[0.5, 1.0, -2.25], [3.0, 4.0, 5.0]], colors=[[1, 2, 3], [4, 5, 6]], frame_index=0)
    b = make_cloud([[7.5, 8.0, 9.0]], colors=[[9, 9, 9]], frame_index=1, flags=[FLAG_REMOVED])
    return [a, b]


def test_cloud_container_layout(tmp_path):
    path = tmp_path / "cloud.stg4"
    save_cloud(cloud_fixture(), path)
    raw = path.read_bytes()
    assert raw[:4] == b"STG4"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:16], "little") == 3
    assert len(raw) == 16 + 3 * 24
    # second record: frame u16 at offset 16, camera at 18, flags at 19
    rec = raw[16 + 24:16 + 48]
    assert rec[12:15] == bytes([4, 5, 6])
    assert int.from_bytes(rec[16:18], "little") == 0
    assert rec[20:24] == b"\x00" * 4


def test_cloud_fields_survive_save_and_load(tmp_path):
    path = tmp_path / "cloud.stg4"
    clouds = cloud_fixture()
    save_cloud(clouds, path)
    loaded = load_cloud(path)
    assert [c.frame_index for c in loaded] == [0, 1]
    for before, after in zip(clouds, loaded):
        np.testing.assert_array_equal(after.positions, before.positions)
        np.testing.assert_array_equal(after.colors, before.colors)
        np.testing.assert_array_equal(after.flags, before.flags)
        assert after.frame_tag == "world"


def test_empty_cloud_file(tmp_path):
    save_cloud([], tmp_path / "empty.stg4")
    assert (tmp_path / "empty.stg4").stat().st_size == 16
    assert load_cloud(tmp_path / "empty.stg4") == []


def test_cloud_bad_magic(tmp_path):
    path = tmp_path / "cloud.stg4"
    save_cloud(cloud_fixture(), path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(BadMagic):
        load_cloud(path)


def test_cloud_unsupported_version(tmp_path):
    path = tmp_path / "cloud.stg4"
    save_cloud(cloud_fixture(), path)
    raw = bytearray(path.read_bytes())
    raw[4:8] = (2).to_bytes(4, "little")
    path.write_bytes(bytes(raw))
    with pytest.raises(UnsupportedVersion):
        load_cloud(path)


def test_cloud_truncated(tmp_path):
    path = tmp_path / "cloud.stg4"
    save_cloud(cloud_fixture(), path)
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(TruncatedFile):
        load_cloud(path)


def test_cloud_truncated_header(tmp_path):
    path = tmp_path / "cloud.stg4"
    path.write_bytes(b"STG4\x01")
    with pytest.raises(TruncatedFile):
        load_cloud(path)


def test_export_ply_skips_removed(tmp_path):
    export_ply(cloud_fixture(), tmp_path / "scene.ply")
    lines = (tmp_path / "scene.ply").read_text().splitlines()
    assert "element vertex 2" in lines
    assert lines[-1] == "3.000000 4.000000 5.000000 4 5 6"


def test_scene_bundle_round_trip(tmp_path, synth_scene):
    _, manifest, _ = synth_scene
    clouds = [make_cloud([[float(i), 0.0, 1.0]] * (i + 1), frame_index=i) for i in range(3)]
    clouds.append(make_cloud(np.zeros((0, 3)), frame_index=3))
    scene = make_scene(clouds)
    paths = save_scene_bundle(scene, manifest, tmp_path / "bundle")
    assert paths["cloud"].name == config.CLOUD_FILENAME

    loaded, loaded_manifest = load_scene_bundle(tmp_path / "bundle")
    assert len(loaded) == 4
    assert [len(c) for c in loaded.frames] == [1, 2, 3, 0]
    assert [c.timestamp for c in loaded.frames] == [0.0, 1.0, 2.0, 3.0]
    assert loaded_manifest.rig == manifest.rig
    # asset paths are absolute, so the bundle loads from anywhere
    assert loaded_manifest.resolve(loaded_manifest.frames[0].cameras[0].image_path).exists()


def test_one_based_manifest_maps_to_storage_indices(synth_scene):
    _, _, root = synth_scene
    data = json.loads((root / "manifest.json").read_text())
    data["frame_numbering"] = "one_based"
    for position, frame in enumerate(data["frames"]):
        frame["index"] = position + 1
    (root / "one_based.json").write_text(json.dumps(data))

    loaded = load_manifest(root / "one_based.json")
    assert [f.index for f in loaded.frames] == [0, 1, 2, 3]
    assert loaded.index_offset == 1

    save_manifest(loaded, root / "copy.json")
    written = json.loads((root / "copy.json").read_text())
    assert [f["index"] for f in written["frames"]] == [1, 2, 3, 4]
    assert [f.index for f in load_manifest(root / "copy.json").frames] == [0, 1, 2, 3]


def test_one_based_manifest_rejects_zero_based_indices(synth_scene):
    _, _, root = synth_scene
    data = json.loads((root / "manifest.json").read_text())
    data["frame_numbering"] = "one_based"
    (root / "manifest.json").write_text(json.dumps(data))
    with pytest.raises(ValidationError, match="index 0"):
        load_manifest(root / "manifest.json")
