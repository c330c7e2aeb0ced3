import json
from dataclasses import replace

import numpy as np
import pytest

from src.alignment import AlignmentConfig, build_scene4d
from src.geometry import CameraIntrinsics, RigidTransform, box_contains
from src.models.models import FLAG_REMOVED
from src.reconstruction import SceneReconstructor
from src.rendering import (
    RemovalBox,
    RenderControl,
    camera_pose,
    export_training_pairs,
    rasterize,
    remove_objects,
    render_frozen_space,
    render_frozen_time,
    render_keyframe,
    render_many,
    render_surround,
    sample_clip_starts,
    save_render,
    write_pairs,
)
from src.scene_io import load_depth, load_image, load_mask
from src.synth_oracle import SynthObject, analytic_pixel, frame_time, generate, object_center_at
from src.utils.exceptions import EmptySelection, TooFewFrames, ValidationError
from tests.conftest import make_cloud, make_scene, synth_spec

K100 = CameraIntrinsics(fx=100.0, fy=100.0, cx=50.0, cy=50.0, width=100, height=100)
RED, BLUE = (255, 0, 0), (0, 0, 255)


def test_rasterize_single_point_by_hand():
    render = rasterize(np.array([[0.0, 0.0, 10.0]]), np.array([RED], dtype=np.uint8), K100)
    assert render.occupancy.sum() == 1
    assert render.occupancy[50, 50]
    assert render.color[50, 50].tolist() == list(RED)
    assert render.depth[50, 50] == pytest.approx(10.0)
    assert render.depth.dtype == np.float32
    assert render.color[~render.occupancy].max() == 0


def test_rasterize_nearest_point_wins():
    points = np.array([[0.0, 0.0, 10.0], [0.0, 0.0, 5.0]])
    render = rasterize(points, np.array([RED, BLUE], dtype=np.uint8), K100)
    assert render.color[50, 50].tolist() == list(BLUE)
    assert render.depth[50, 50] == pytest.approx(5.0)


def test_rasterize_equal_depth_keeps_lowest_index():
    points = np.array([[0.0, 0.0, 10.0], [0.001, 0.001, 10.0]])
    render = rasterize(points, np.array([RED, BLUE], dtype=np.uint8), K100)
    assert render.color[50, 50].tolist() == list(RED)


def test_rasterize_drops_points_near_or_behind_camera():
    points = np.array([[0.0, 0.0, 0.01], [0.0, 0.0, -3.0], [0.0, 0.0, 0.05]])
    render = rasterize(points, np.zeros((3, 3), dtype=np.uint8), K100)
    assert not render.occupancy.any()


def test_rasterize_empty_input():
    render = rasterize(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.uint8), K100)
    assert render.color.shape == (100, 100, 3)
    assert not render.occupancy.any()


def test_splat_radius_covers_square_and_clips_at_border():
    center = rasterize(np.array([[0.0, 0.0, 10.0]]), np.array([RED], dtype=np.uint8), K100, splat_radius=1)
    assert center.occupancy.sum() == 9
    assert center.occupancy[49:52, 49:52].all()
    # projects to pixel (0, 0): only the in-image quarter of the square survives
    corner = np.array([[-50.0 * 10 / 100 + 0.01, -50.0 * 10 / 100 + 0.01, 10.0]])
    clipped = rasterize(corner, np.array([RED], dtype=np.uint8), K100, splat_radius=1)
    assert clipped.occupancy.sum() == 4


def test_render_control_validation():
    with pytest.raises(ValidationError):
        RenderControl(RigidTransform.identity(), (0,), K100, splat_radius=4)
    control = RenderControl(RigidTransform.identity(), (3, 1, 3), K100)
    assert control.time_selector == (1, 3)


def line_scene():
    """Frame i holds one point at x = i, 10 m in front of an identity camera."""
    return make_scene([
        make_cloud([[float(i), 0.0, 10.0]], colors=[[10 * (i + 1), 0, 0]]) for i in range(4)
    ])


def test_render_keyframe_selection_errors():
    scene = line_scene()
    with pytest.raises(EmptySelection):
        render_keyframe(scene, RenderControl(RigidTransform.identity(), (), K100))
    with pytest.raises(ValidationError):
        render_keyframe(scene, RenderControl(RigidTransform.identity(), (7,), K100))


def test_render_keyframe_union_of_selected_frames():
    render = render_keyframe(line_scene(), RenderControl(RigidTransform.identity(), (0, 2), K100))
    assert np.flatnonzero(render.occupancy[50]).tolist() == [50, 70]


def test_frozen_space_replays_each_frame():
    renders = render_frozen_space(line_scene(), RigidTransform.identity(), [0, 1, 2], K100, threads=1)
    cols = [np.flatnonzero(r.occupancy[50]).tolist() for r in renders]
    assert cols == [[50], [60], [70]]


def test_frozen_time_shows_parallax():
    scene = make_scene([make_cloud([[0.0, 0.0, 20.0]])])
    poses = [RigidTransform.identity(), RigidTransform.from_translation((-2.0, 0.0, 0.0))]
    base, moved = render_frozen_time(scene, 0, poses, K100, threads=1)
    assert np.flatnonzero(base.occupancy[50]).tolist() == [50]
    assert np.flatnonzero(moved.occupancy[50]).tolist() == [60]


def test_render_many_is_ordered_and_thread_independent():
    scene = line_scene()
    controls = [RenderControl(RigidTransform.from_translation((0.1 * i, 0.0, 0.0)), (i % 4,), K100, 1)
                for i in range(8)]
    serial = render_many(scene, controls, threads=1)
    parallel = render_many(scene, controls, threads=4)
    for a, b in zip(serial, parallel):
        np.testing.assert_array_equal(a.color, b.color)
        np.testing.assert_array_equal(a.depth, b.depth)


def test_remove_objects_flags_and_hides_points():
    scene = line_scene()
    box = RemovalBox(center=(2.0, 0.0, 10.0), half_extents=(0.5, 0.5, 0.5))
    cleaned = remove_objects(scene, [box])
    assert [len(c) for c in cleaned.frames] == [1, 1, 1, 1]
    assert cleaned.frames[2].has_flag(FLAG_REMOVED).tolist() == [True]
    assert not cleaned.frames[1].has_flag(FLAG_REMOVED).any()
    render = render_keyframe(cleaned, RenderControl(RigidTransform.identity(), (1, 2), K100))
    assert np.flatnonzero(render.occupancy[50]).tolist() == [60]
    assert remove_objects(scene, []) is scene


def test_removal_box_frame_range():
    scene = make_scene([make_cloud([[0.0, 0.0, 10.0]]) for _ in range(3)])
    box = RemovalBox(center=(0.0, 0.0, 10.0), half_extents=(1.0, 1.0, 1.0), frame_range=(1, 1))
    cleaned = remove_objects(scene, [box])
    assert [bool(c.has_flag(FLAG_REMOVED)[0]) for c in cleaned.frames] == [False, True, False]


def test_removal_box_from_dict():
    box = RemovalBox.from_dict({"center": [1, 2, 3], "half_extents": [1, 1, 1], "frame_range": [2, 5]})
    assert box.covers(2) and box.covers(5) and not box.covers(6)
    with pytest.raises(ValidationError):
        RemovalBox.from_dict({"center": [1, 2, 3]})


def test_removed_cluster_never_reaches_the_render():
    rng = np.random.default_rng(5)
    cluster = rng.uniform(-0.3, 0.3, size=(100, 3)) + (1.0, 0.0, 12.0)
    background = rng.uniform((-8.0, -8.0, 5.0), (8.0, 8.0, 30.0), size=(400, 3))
    positions = np.concatenate([cluster, background])
    colors = np.concatenate([np.full((100, 3), (255, 0, 255)), np.full((400, 3), (20, 200, 20))])
    scene = make_scene([make_cloud(positions, colors)])
    box = RemovalBox(center=(1.0, 0.0, 12.0), half_extents=(0.5, 0.5, 0.5), yaw=0.3)
    cleaned = remove_objects(scene, [box])
    expected = box_contains(positions, box.center, box.half_extents, box.yaw)
    assert expected[:100].all()
    np.testing.assert_array_equal(cleaned.frames[0].has_flag(FLAG_REMOVED), expected)
    render = render_keyframe(cleaned, RenderControl(RigidTransform.identity(), (0,), K100, 1))
    assert not np.all(render.color == (255, 0, 255), axis=-1).any()


def synth_world(manifest):
    clouds = SceneReconstructor(threads=1).process_frames(manifest)
    return make_scene(clouds, [f.ego_pose for f in manifest.frames])


def test_render_from_source_camera_reproduces_input(synth_scene):
    _, manifest, root = synth_scene
    scene = synth_world(manifest)
    cam = manifest.frames[0].cameras[0]
    control = RenderControl(camera_pose(scene, manifest, 0, "cam0"), (0,), cam.intrinsics)
    render = render_keyframe(scene, control)

    depth = load_depth(root / cam.depth_path).values
    image = load_image(root / cam.image_path).values
    np.testing.assert_array_equal(render.occupancy, depth > 0)
    np.testing.assert_array_equal(render.color[render.occupancy], image[depth > 0])
    np.testing.assert_array_equal(render.depth_map().values, depth)


def test_export_pairs_parity(synth_scene):
    _, manifest, root = synth_scene
    scene = synth_world(manifest)
    pairs = export_training_pairs(scene, manifest, threads=1)
    assert [p.stem for p in pairs] == ["00000_cam0", "00002_cam0"]
    assert [(p.odd_frame, p.even_frame) for p in pairs] == [(0, 1), (2, 3)]
    assert pairs[0].labels == (2, 1)
    target = load_image(root / manifest.frames[0].cameras[0].image_path)
    np.testing.assert_array_equal(pairs[0].target.values, target.values)

    # each condition is the even frame seen from the odd frame camera
    intrinsics = manifest.frames[2].cameras[0].intrinsics
    direct = render_keyframe(scene, RenderControl(camera_pose(scene, manifest, 2, 0), (3,), intrinsics))
    np.testing.assert_array_equal(pairs[1].condition.color, direct.color)
    np.testing.assert_array_equal(pairs[1].condition.depth, direct.depth)

    window = export_training_pairs(scene, manifest, clip_start=1, clip_length=2, threads=1)
    assert [(p.odd_frame, p.even_frame) for p in window] == [(1, 2)]
    assert window[0].labels == (2, 1)


def test_export_pairs_report_manifest_frame_numbers(synth_scene):
    _, manifest, _ = synth_scene
    scene = synth_world(manifest)
    one_based = replace(manifest, frame_numbering="one_based")
    pairs = export_training_pairs(scene, one_based, threads=1)
    assert [p.manifest_frames for p in pairs] == [(2, 1), (4, 3)]
    window = export_training_pairs(scene, one_based, clip_start=1, clip_length=2, threads=1)
    assert (window[0].labels, window[0].manifest_frames) == ((2, 1), (3, 2))
    assert export_training_pairs(scene, manifest, threads=1)[0].manifest_frames == (1, 0)


def test_export_pairs_window_errors(synth_scene):
    _, manifest, _ = synth_scene
    scene = synth_world(manifest)
    with pytest.raises(ValidationError):
        export_training_pairs(scene, manifest, clip_start=2, clip_length=4)
    with pytest.raises(TooFewFrames):
        export_training_pairs(scene, manifest, clip_start=3)


def test_write_pairs_layout(synth_scene, tmp_path):
    _, manifest, _ = synth_scene
    pairs = export_training_pairs(synth_world(manifest), manifest, threads=1)
    index = write_pairs(pairs, tmp_path / "pairs")
    data = json.loads(index.read_text())
    assert [e["stem"] for e in data["pairs"]] == ["00000_cam0", "00002_cam0"]
    for name in ("cond/00002_cam0_color.png", "cond/00002_cam0_depth.png", "cond/00002_cam0_occ.png",
                 "gt/00002_cam0.png"):
        assert (tmp_path / "pairs" / name).exists()


def test_sample_clip_starts():
    starts = sample_clip_starts(20, 8, count=5, seed=3)
    assert starts == sample_clip_starts(20, 8, count=5, seed=3)
    assert all(0 <= s <= 12 for s in starts)
    with pytest.raises(TooFewFrames):
        sample_clip_starts(5, 8)


def test_render_surround_order(tmp_path, small_intrinsics):
    manifest = generate(synth_spec(small_intrinsics, frame_count=2, cameras=2), tmp_path / "rig", threads=1)
    scene = synth_world(manifest)
    views = render_surround(scene, manifest, 0, RigidTransform.identity(), [0, 1], threads=1)
    assert [(v.frame, v.camera) for v in views] == [(0, "cam0"), (0, "cam1"), (1, "cam0"), (1, "cam1")]
    assert all(v.render.occupancy.any() for v in views)


def test_save_render_files(tmp_path):
    render = rasterize(np.array([[0.0, 0.0, 1.25]]), np.array([RED], dtype=np.uint8), K100)
    paths = save_render(render, tmp_path, "00000")
    assert load_depth(paths["depth"]).values[50, 50] == 1250
    assert load_mask(paths["occ"]).sum() == 1
    assert load_image(paths["color"]).values[50, 50].tolist() == list(RED)


def test_render_ignores_unselected_frames():
    scene = line_scene()
    clouds = list(scene.frames)
    # nearer points on every column the other frames use
    clouds[2] = make_cloud([[float(i), 0.0, 5.0] for i in range(4)], colors=[[0, 255, 0]] * 4)
    edited = make_scene(clouds)
    for t in (0, 1, 3):
        control = RenderControl(RigidTransform.identity(), (t,), K100)
        before, after = render_keyframe(scene, control), render_keyframe(edited, control)
        np.testing.assert_array_equal(before.color, after.color)
        np.testing.assert_array_equal(before.depth, after.depth)
        np.testing.assert_array_equal(before.occupancy, after.occupancy)
    control = RenderControl(RigidTransform.identity(), (2,), K100)
    assert not np.array_equal(render_keyframe(scene, control).depth, render_keyframe(edited, control).depth)


K80 = CameraIntrinsics(fx=80.0, fy=80.0, cx=64.0, cy=48.0, width=128, height=96)
SLAB_COLOR = (40, 200, 60)


def coarse_world(spec, tmp_path):
    manifest = generate(spec, tmp_path / "scene", threads=1)
    clouds = SceneReconstructor(threads=1).process_frames(manifest)
    poses = [f.ego_pose for f in manifest.frames]
    return manifest, build_scene4d(clouds, poses, AlignmentConfig(enable_fine=False), workers=1)


def color_centroid(render, color):
    rows, cols = np.nonzero(render.occupancy & np.all(render.color == color, axis=-1))
    assert len(rows) > 20
    return np.array([cols.mean() + 0.5, rows.mean() + 0.5])


def test_frozen_space_moving_object_follows_oracle(tmp_path):
    # thin in depth, so the visible face sits at the center's depth
    slab = SynthObject(center=(8.0, -1.0, 0.5), half_extents=(0.1, 0.5, 0.5), color=SLAB_COLOR,
                       velocity=(0.0, 0.6, 0.0), dynamic=True)
    spec = synth_spec(K80, frame_count=4, objects=(slab,), speed=0.5)
    manifest, scene = coarse_world(spec, tmp_path)
    pose = camera_pose(scene, manifest, 0, "cam0")
    renders = render_frozen_space(scene, pose, range(4), K80, threads=1)

    start = color_centroid(renders[0], SLAB_COLOR)
    origin = np.array(analytic_pixel(spec, 0, "cam0", object_center_at(slab, frame_time(spec, 0)))[:2])
    for t in range(1, 4):
        expected = np.array(analytic_pixel(spec, 0, "cam0", object_center_at(slab, frame_time(spec, t)))[:2])
        shift = color_centroid(renders[t], SLAB_COLOR) - start
        assert np.linalg.norm(expected - origin) > 4.0
        np.testing.assert_allclose(shift, expected - origin, atol=1.0)


def test_frozen_time_parallax_follows_oracle(tmp_path):
    slab = SynthObject(center=(2.0, 8.0, 0.5), half_extents=(0.5, 0.1, 0.5), color=SLAB_COLOR)
    # cam1 looks left, so forward driving sweeps it sideways past the slab
    spec = synth_spec(K80, frame_count=4, cameras=4, objects=(slab,), speed=0.6)
    manifest, scene = coarse_world(spec, tmp_path)
    poses = [camera_pose(scene, manifest, f, "cam1") for f in range(4)]
    renders = render_frozen_time(scene, 0, poses, K80, threads=1)

    start = color_centroid(renders[0], SLAB_COLOR)
    origin = np.array(analytic_pixel(spec, 0, "cam1", slab.center)[:2])
    for f in range(1, 4):
        expected = np.array(analytic_pixel(spec, f, "cam1", slab.center)[:2])
        shift = color_centroid(renders[f], SLAB_COLOR) - start
        assert np.linalg.norm(expected - origin) > 4.0
        np.testing.assert_allclose(shift, expected - origin, atol=1.0)
