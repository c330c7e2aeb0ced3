"""
On-disk formats: scene manifests (JSON), 16-bit depth PNGs, RGB PNGs,
the binary STG4 point-cloud container, ASCII PLY export and scene bundles.
"""
import json
import os
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

import src.config as config
from src.geometry import CameraIntrinsics, RigidTransform
from src.models.models import (
    FLAG_REMOVED,
    FRAME_NUMBERINGS,
    AlignmentReport,
    CameraRecord,
    ColorImage,
    DepthMap,
    DynamicBox,
    FramePointCloud,
    FrameRecord,
    Scene4D,
    SceneManifest,
)
from src.utils.exceptions import (
    BadMagic,
    DimensionMismatch,
    Drive4DError,
    FormatError,
    IoError,
    ParseError,
    TruncatedFile,
    UnsupportedVersion,
    ValidationError,
)
from src.utils.helper_functions import HelperFunctions
from src.utils.logger import AppLogger

logger = AppLogger(name="scene_io")

PathLike = Union[str, Path]

MANIFEST_KEYS = {"scene_id", "rig", "frames", "frame_numbering"}
FRAME_KEYS = {"index", "timestamp", "ego_pose", "cameras", "dynamic_boxes"}
CAMERA_KEYS = {"name", "intrinsics", "extrinsic", "image_path", "depth_path"}
DEPTH_MODES = {"I;16", "I;16L", "I;16B", "I;16N", "I"}  # "I" is how some Pillow versions open 16-bit PNGs

# Little-endian STG4 layout: 16-byte header, then fixed 24-byte records.
CLOUD_HEADER = np.dtype([("magic", "S4"), ("version", "<u4"), ("count", "<u8")])
CLOUD_RECORD = np.dtype({
    "names": ["position", "color", "frame", "camera", "flags"],
    "formats": [("<f4", (3,)), ("u1", (3,)), "<u2", "u1", "u1"],
    "offsets": [0, 12, 16, 18, 19],
    "itemsize": 24,
})


# --- Manifest ---

def _warn_unknown(data: Dict, known: set, where: str):
    for key in sorted(set(data) - known):
        logger.warning(f"Ignoring unknown field '{key}' in {where}")


def _require(data: Dict, key: str, where: str):
    if not isinstance(data, dict) or key not in data:
        raise ValidationError(f"{where}: missing required field '{key}'")
    return data[key]


def _image_size(path: Path, where: str) -> Tuple[int, int]:
    if not path.is_file():
        raise ValidationError(f"{where}: referenced file does not exist: {path}")
    try:
        with Image.open(path) as img:
            return img.size
    except (UnidentifiedImageError, OSError) as e:
        raise ValidationError(f"{where}: cannot read image header of {path}: {e}") from e


def _parse_camera(data: Dict, base_dir: Path, where: str) -> CameraRecord:
    _warn_unknown(data, CAMERA_KEYS, where)
    try:
        intrinsics = CameraIntrinsics.from_dict(_require(data, "intrinsics", where))
        extrinsic = RigidTransform.from_dict(_require(data, "extrinsic", where))
    except ValidationError as e:
        raise ValidationError(f"{where}: {e}") from e
    except (KeyError, TypeError, ValueError) as e:
        raise ValidationError(f"{where}: malformed intrinsics/extrinsic ({e})") from e

    record = CameraRecord(
        name=str(_require(data, "name", where)),
        intrinsics=intrinsics,
        extrinsic=extrinsic,
        image_path=str(_require(data, "image_path", where)),
        depth_path=str(_require(data, "depth_path", where)),
    )
    expected = (intrinsics.width, intrinsics.height)
    for kind, rel in (("image", record.image_path), ("depth", record.depth_path)):
        size = _image_size(base_dir / rel, where)
        if size != expected:
            raise ValidationError(f"{where}: {kind} {rel} is {size[0]}x{size[1]}, intrinsics say {expected[0]}x{expected[1]}")
    return record


def _parse_frame(data: Dict, position: int, rig: Tuple[str, ...], base_dir: Path, offset: int = 0) -> FrameRecord:
    """Parse one frame entry; the stored index is always the 0-based position."""
    where = f"frame {position + offset}"
    if not isinstance(data, dict):
        raise ValidationError(f"{where}: frame entry must be an object")
    _warn_unknown(data, FRAME_KEYS, where)
    index = _require(data, "index", where)
    if index != position + offset:
        raise ValidationError(f"{where}: index {index} does not match its position {position + offset}")
    try:
        timestamp = float(_require(data, "timestamp", where))
        ego_pose = RigidTransform.from_dict(_require(data, "ego_pose", where))
        boxes = tuple(DynamicBox.from_dict(b) for b in data.get("dynamic_boxes", []))
    except ValidationError as e:
        raise ValidationError(f"{where}: {e}") from e
    except (KeyError, TypeError, ValueError) as e:
        raise ValidationError(f"{where}: malformed field ({e})") from e

    cameras_data = _require(data, "cameras", where)
    if not isinstance(cameras_data, list):
        raise ValidationError(f"{where}: cameras must be a list")
    names = [c.get("name") if isinstance(c, dict) else None for c in cameras_data]
    missing = [name for name in rig if name not in names]
    if missing:
        raise ValidationError(f"{where}: missing camera(s) {missing}")
    if tuple(names) != rig:
        raise ValidationError(f"{where}: cameras {names} do not match rig order {list(rig)}")

    cameras = tuple(
        _parse_camera(c, base_dir, f"{where}, camera '{c['name']}'") for c in cameras_data
    )
    return FrameRecord(index=position, timestamp=timestamp, ego_pose=ego_pose, cameras=cameras, dynamic_boxes=boxes)


def load_manifest(path: PathLike) -> SceneManifest:
    """Read and fully validate a scene manifest; nothing is returned partially loaded."""
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: not valid JSON ({e})") from e
    except OSError as e:
        raise ParseError(f"{path}: cannot read manifest ({e})") from e
    if not isinstance(data, dict):
        raise ParseError(f"{path}: manifest must be a JSON object")

    _warn_unknown(data, MANIFEST_KEYS, "manifest")
    rig = _require(data, "rig", "manifest")
    if not isinstance(rig, list) or len(rig) < 1 or len(set(rig)) != len(rig):
        raise ValidationError("manifest: rig must be a non-empty list of unique camera names")
    rig = tuple(str(name) for name in rig)
    numbering = data.get("frame_numbering", "zero_based")
    if numbering not in FRAME_NUMBERINGS:
        raise ValidationError(f"manifest: unknown frame_numbering '{numbering}'")
    offset = FRAME_NUMBERINGS[numbering]

    base_dir = path.parent.resolve()
    frames_data = _require(data, "frames", "manifest")
    if not isinstance(frames_data, list):
        raise ValidationError("manifest: frames must be a list")
    frames = []
    for position, frame_data in enumerate(frames_data):
        frame = _parse_frame(frame_data, position, rig, base_dir, offset)
        if frames and frame.timestamp <= frames[-1].timestamp:
            raise ValidationError(
                f"frame {position + offset}: timestamp {frame.timestamp} is not after frame "
                f"{position + offset - 1} ({frames[-1].timestamp})"
            )
        frames.append(frame)

    manifest = SceneManifest(
        scene_id=str(_require(data, "scene_id", "manifest")),
        rig=rig,
        frames=tuple(frames),
        base_dir=base_dir,
        frame_numbering=numbering,
    )
    logger.debug(f"Loaded manifest '{manifest.scene_id}': {len(frames)} frames, {len(rig)} cameras")
    return manifest


def manifest_to_dict(manifest: SceneManifest, absolute_paths: bool = False) -> Dict:
    def asset(rel: str) -> str:
        return str(manifest.resolve(rel)) if absolute_paths else rel

    return {
        "scene_id": manifest.scene_id,
        "frame_numbering": manifest.frame_numbering,
        "rig": list(manifest.rig),
        "frames": [
            {
                "index": frame.index + manifest.index_offset,
                "timestamp": frame.timestamp,
                "ego_pose": frame.ego_pose.to_dict(),
                "cameras": [
                    {
                        "name": cam.name,
                        "intrinsics": cam.intrinsics.to_dict(),
                        "extrinsic": cam.extrinsic.to_dict(),
                        "image_path": asset(cam.image_path),
                        "depth_path": asset(cam.depth_path),
                    }
                    for cam in frame.cameras
                ],
                "dynamic_boxes": [box.to_dict() for box in frame.dynamic_boxes],
            }
            for frame in manifest.frames
        ],
    }


def save_manifest(manifest: SceneManifest, path: PathLike, absolute_paths: bool = False):
    HelperFunctions.write_json(path, manifest_to_dict(manifest, absolute_paths))


# --- Depth and color images ---

def _open_png(path: PathLike) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
        return img
    except FileNotFoundError as e:
        raise ValidationError(f"Missing image file: {path}") from e
    except (UnidentifiedImageError, OSError) as e:
        raise FormatError(f"Error reading image {path}: {e}") from e


def _check_size(values: np.ndarray, intrinsics: CameraIntrinsics, path: PathLike):
    if intrinsics is None:
        return
    h, w = values.shape[:2]
    if (w, h) != (intrinsics.width, intrinsics.height):
        raise DimensionMismatch(f"{path} is {w}x{h}, camera expects {intrinsics.width}x{intrinsics.height}")


def load_depth(path: PathLike, intrinsics: CameraIntrinsics = None) -> DepthMap:
    """16-bit single-channel PNG, value n = n millimeters, 0 = invalid."""
    img = _open_png(path)
    if img.mode not in DEPTH_MODES:
        raise FormatError(f"{path}: depth must be a 16-bit single-channel PNG, got mode {img.mode}")
    values = np.array(img, dtype=np.uint16)
    _check_size(values, intrinsics, path)
    return DepthMap(values)


def save_depth(depth: Union[DepthMap, np.ndarray], path: PathLike):
    values = depth.values if isinstance(depth, DepthMap) else depth
    Image.fromarray(np.ascontiguousarray(values, dtype=np.uint16)).save(path, format="PNG")


def depth_from_meters(meters: np.ndarray) -> np.ndarray:
    """Quantize metric depth to millimeters; non-finite, non-positive or out-of-range depth becomes 0."""
    m = np.asarray(meters, dtype=np.float64)
    with np.errstate(invalid="ignore", over="ignore"):
        mm = np.rint(m * config.DEPTH_SCALE)
    valid = np.isfinite(mm) & (mm > 0) & (mm <= config.MAX_DEPTH_MM)
    out = np.zeros(m.shape, dtype=np.uint16)
    out[valid] = mm[valid].astype(np.uint16)
    return out


def load_image(path: PathLike, intrinsics: CameraIntrinsics = None) -> ColorImage:
    img = _open_png(path)
    if img.mode == "RGBA":
        img = img.convert("RGB")
    if img.mode != "RGB":
        raise FormatError(f"{path}: expected an 8-bit RGB PNG, got mode {img.mode}")
    values = np.array(img, dtype=np.uint8)
    _check_size(values, intrinsics, path)
    return ColorImage(values)


def save_image(image: Union[ColorImage, np.ndarray], path: PathLike):
    values = image.values if isinstance(image, ColorImage) else image
    Image.fromarray(np.ascontiguousarray(values, dtype=np.uint8)).save(path, format="PNG")


def load_mask(path: PathLike) -> np.ndarray:
    img = _open_png(path).convert("L")
    return np.array(img, dtype=np.uint8) > 0


def save_mask(mask: np.ndarray, path: PathLike):
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(path, format="PNG")


# --- STG4 cloud container ---

def save_cloud(clouds: Sequence[FramePointCloud], path: PathLike):
    """Write clouds in the given order; positions are stored as float32 meters."""
    total = sum(len(c) for c in clouds)
    records = np.zeros(total, dtype=CLOUD_RECORD)
    start = 0
    for cloud in clouds:
        end = start + len(cloud)
        records["position"][start:end] = cloud.positions
        records["color"][start:end] = cloud.colors
        records["frame"][start:end] = cloud.frame_index
        records["camera"][start:end] = cloud.camera_index
        records["flags"][start:end] = cloud.flags
        start = end

    header = np.array([(config.CLOUD_MAGIC, config.CLOUD_VERSION, total)], dtype=CLOUD_HEADER)
    try:
        with open(path, "wb") as f:
            f.write(header.tobytes())
            f.write(records.tobytes())
    except OSError as e:
        raise IoError(f"Cannot write cloud file {path}: {e}") from e


def load_cloud(path: PathLike, frame_tag: str = "world") -> List[FramePointCloud]:
    """Read an STG4 file; consecutive records of one frame become one FramePointCloud."""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise IoError(f"Cannot read cloud file {path}: {e}") from e
    if len(raw) < CLOUD_HEADER.itemsize:
        if not raw.startswith(config.CLOUD_MAGIC[:len(raw)]):
            raise BadMagic(f"{path}: not an STG4 file")
        raise TruncatedFile(f"{path}: file ends inside the header")
    header = np.frombuffer(raw, dtype=CLOUD_HEADER, count=1)[0]
    if header["magic"] != config.CLOUD_MAGIC:
        raise BadMagic(f"{path}: bad magic {header['magic']!r}")
    if int(header["version"]) != config.CLOUD_VERSION:
        raise UnsupportedVersion(f"{path}: container version {int(header['version'])} is not supported")
    count = int(header["count"])
    expected = CLOUD_HEADER.itemsize + count * CLOUD_RECORD.itemsize
    if len(raw) < expected:
        raise TruncatedFile(f"{path}: expected {count} records ({expected} bytes), file has {len(raw)} bytes")
    if len(raw) > expected:
        raise FormatError(f"{path}: {len(raw) - expected} trailing bytes after {count} records")

    records = np.frombuffer(raw, dtype=CLOUD_RECORD, count=count, offset=CLOUD_HEADER.itemsize)
    clouds = []
    if count == 0:
        return clouds
    frames = records["frame"].astype(np.int64)
    run_starts = np.flatnonzero(np.diff(frames, prepend=-1) != 0)
    run_ends = np.append(run_starts[1:], count)
    for s, e in zip(run_starts, run_ends):
        chunk = records[s:e]
        clouds.append(FramePointCloud(
            frame_index=int(frames[s]),
            timestamp=0.0,
            positions=chunk["position"].astype(np.float64),
            colors=chunk["color"].copy(),
            camera_index=chunk["camera"].copy(),
            flags=chunk["flags"].copy(),
            frame_tag=frame_tag,
        ))
    return clouds


def export_ply(clouds: Iterable[FramePointCloud], path: PathLike, include_removed: bool = False):
    """ASCII PLY with positions and colors, for third-party viewers."""
    positions, colors = [], []
    for cloud in clouds:
        keep = np.ones(len(cloud), dtype=bool) if include_removed else ~cloud.has_flag(FLAG_REMOVED)
        positions.append(cloud.positions[keep])
        colors.append(cloud.colors[keep])
    xyz = np.concatenate(positions) if positions else np.zeros((0, 3))
    rgb = np.concatenate(colors) if colors else np.zeros((0, 3), dtype=np.uint8)
    header = "\n".join([
        "ply",
        "format ascii 1.0",
        f"element vertex {len(xyz)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ])
    with open(path, "w", encoding="ascii") as f:
        f.write(header + "\n")
        for p, c in zip(xyz, rgb):
            f.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {int(c[0])} {int(c[1])} {int(c[2])}\n")


# --- Scene bundle (cloud + poses + manifest copy + diagnostics) ---

def save_scene_bundle(scene: Scene4D, manifest: SceneManifest, out_dir: PathLike) -> Dict[str, Path]:
    out_dir = Path(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "cloud": out_dir / config.CLOUD_FILENAME,
        "scene": out_dir / config.SCENE_FILENAME,
        "manifest": out_dir / config.MANIFEST_FILENAME,
        "alignment": out_dir / config.ALIGNMENT_FILENAME,
    }
    save_cloud(scene.frames, paths["cloud"])
    HelperFunctions.write_json(paths["scene"], {
        "scene_id": manifest.scene_id,
        "frames": [
            {
                "index": cloud.frame_index,
                "timestamp": cloud.timestamp,
                "ego_pose": frame.ego_pose.to_dict(),
                "refined_pose": pose.to_dict(),
                "point_count": len(cloud),
            }
            for cloud, frame, pose in zip(scene.frames, manifest.frames, scene.refined_poses)
        ],
    })
    save_manifest(manifest, paths["manifest"], absolute_paths=True)
    HelperFunctions.write_json(paths["alignment"], {
        "scene_id": manifest.scene_id,
        "reports": [dict(frame=i, **r.to_dict()) for i, r in enumerate(scene.reports)],
    })
    return paths


def load_scene_bundle(bundle_dir: PathLike) -> Tuple[Scene4D, SceneManifest]:
    bundle_dir = Path(bundle_dir)
    manifest = load_manifest(bundle_dir / config.MANIFEST_FILENAME)
    try:
        scene_info = HelperFunctions.read_json(bundle_dir / config.SCENE_FILENAME)
        alignment = HelperFunctions.read_json(bundle_dir / config.ALIGNMENT_FILENAME)
        frames_info = scene_info["frames"]
        poses = tuple(RigidTransform.from_dict(f["refined_pose"]) for f in frames_info)
        reports = tuple(AlignmentReport.from_dict(r) for r in alignment["reports"])
    except Drive4DError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(f"{bundle_dir}: malformed scene bundle ({e})") from e

    by_index = {c.frame_index: c for c in load_cloud(bundle_dir / config.CLOUD_FILENAME)}
    frames = []
    for info in frames_info:
        idx, ts = int(info["index"]), float(info["timestamp"])
        cloud = by_index.get(idx)
        if cloud is None:
            frames.append(FramePointCloud.empty(idx, ts, frame_tag="world"))
        else:
            if len(cloud) != int(info["point_count"]):
                raise ParseError(f"{bundle_dir}: frame {idx} has {len(cloud)} points, scene.json says {info['point_count']}")
            frames.append(FramePointCloud(idx, ts, cloud.positions, cloud.colors, cloud.camera_index, cloud.flags, "world"))
    scene = Scene4D(frames=tuple(frames), refined_poses=poses, reports=reports)
    return scene, manifest
