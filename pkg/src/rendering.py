"""
Rendering module: projects the aligned 4D scene into sparse keyframe images
under decoupled camera/time controls, soft-removes objects and exports
condition/target training pairs.
"""
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

import src.config as config
from src.geometry import CameraIntrinsics, RigidTransform, box_contains, project
from src.models.models import FLAG_REMOVED, ColorImage, DepthMap, Scene4D, SceneManifest
from src.scene_io import depth_from_meters, load_image, save_depth, save_image, save_mask
from src.utils.exceptions import EmptySelection, TooFewFrames, ValidationError
from src.utils.helper_functions import HelperFunctions
from src.utils.logger import AppLogger

logger = AppLogger(name="rendering")

CameraRef = Union[int, str]


@dataclass(frozen=True)
class RenderControl:
    """Camera pose (camera -> world) plus the set of frames whose points are drawn."""

    camera_pose: RigidTransform
    time_selector: Tuple[int, ...]
    intrinsics: CameraIntrinsics
    splat_radius: int = config.SPLAT_RADIUS

    def __post_init__(self):
        if not 0 <= self.splat_radius <= config.MAX_SPLAT_RADIUS:
            raise ValidationError(f"splat_radius must be in [0, {config.MAX_SPLAT_RADIUS}], got {self.splat_radius}")
        object.__setattr__(self, "time_selector", tuple(sorted({int(t) for t in self.time_selector})))

    def to_dict(self) -> Dict:
        return {
            "camera_pose": self.camera_pose.to_dict(),
            "time_selector": list(self.time_selector),
            "intrinsics": self.intrinsics.to_dict(),
            "splat_radius": self.splat_radius,
        }


@dataclass(frozen=True)
class KeyframeRender:
    color: np.ndarray  # (H, W, 3) uint8, black where unoccupied
    depth: np.ndarray  # (H, W) float32 meters, 0 where unoccupied
    occupancy: np.ndarray  # (H, W) bool

    def depth_map(self) -> DepthMap:
        return DepthMap(depth_from_meters(self.depth))

    def color_image(self) -> ColorImage:
        return ColorImage(self.color)


@dataclass(frozen=True)
class RemovalBox:
    """World-frame box; points inside it in frames ``frame_range`` (inclusive) are flagged removed."""

    center: Tuple[float, float, float]
    half_extents: Tuple[float, float, float]
    yaw: float = 0.0
    frame_range: Tuple[int, int] = (0, 2 ** 31 - 1)

    def __post_init__(self):
        if len(self.center) != 3 or len(self.half_extents) != 3:
            raise ValidationError("Removal box needs a 3-element center and half_extents")
        if min(self.half_extents) <= 0:
            raise ValidationError(f"Removal box half_extents must be positive, got {self.half_extents}")
        if self.frame_range[0] > self.frame_range[1]:
            raise ValidationError(f"Removal box frame_range {self.frame_range} is empty")

    @classmethod
    def from_dict(cls, data: Dict) -> "RemovalBox":
        try:
            frame_range = data.get("frame_range")
            return cls(
                center=tuple(float(c) for c in data["center"]),
                half_extents=tuple(float(h) for h in data["half_extents"]),
                yaw=float(data.get("yaw", 0.0)),
                frame_range=(int(frame_range[0]), int(frame_range[1])) if frame_range else cls.frame_range,
            )
        except (KeyError, TypeError, ValueError, IndexError) as e:
            raise ValidationError(f"Malformed removal box {data!r} ({e})") from e

    def covers(self, frame_index: int) -> bool:
        return self.frame_range[0] <= frame_index <= self.frame_range[1]


@dataclass(frozen=True)
class TrainingPair:
    """
    A condition render and its ground-truth target.

    Frames of a clip are labelled from 1 at ``clip_start`` for parity: the
    cloud of even label 2n+2 is drawn from the camera of odd label 2n+1.
    ``even_frame`` and ``odd_frame`` hold the 0-based storage indices of those
    frames, so even_frame = odd_frame + 1. ``index_offset`` converts them back to
    the frame numbers of the manifest file.
    """

    condition: KeyframeRender
    target: ColorImage
    even_frame: int
    odd_frame: int
    camera: str
    clip_start: int = 0
    index_offset: int = 0

    @property
    def stem(self) -> str:
        return f"{self.odd_frame:05d}_{self.camera}"

    @property
    def labels(self) -> Tuple[int, int]:
        return self.even_frame - self.clip_start + 1, self.odd_frame - self.clip_start + 1

    @property
    def manifest_frames(self) -> Tuple[int, int]:
        return self.even_frame + self.index_offset, self.odd_frame + self.index_offset


@dataclass(frozen=True)
class SurroundView:
    frame: int
    camera: str
    render: KeyframeRender


# --- Rasterization ---

def _splat_offsets(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    dy, dx = np.meshgrid(r, r, indexing="ij")
    return np.stack([dx.ravel(), dy.ravel()], axis=1)


def rasterize(positions_cam: np.ndarray, colors: np.ndarray, k: CameraIntrinsics,
              splat_radius: int = 0) -> KeyframeRender:
    """
    Z-buffer splat of camera-frame points.

    Points with z <= ZNEAR are dropped. Each remaining point covers the square
    of side 2r+1 around pixel (floor(u), floor(v)); per pixel the smallest depth
    wins, and among equal depths the lowest point index.
    """
    h, w = k.height, k.width
    color = np.zeros((h, w, 3), dtype=np.uint8)
    depth = np.zeros((h, w), dtype=np.float32)
    occupancy = np.zeros((h, w), dtype=bool)

    front = np.flatnonzero(positions_cam[:, 2] > config.ZNEAR)
    if len(front) == 0:
        return KeyframeRender(color, depth, occupancy)

    u, v, z = project(k, positions_cam[front])
    px = np.floor(u).astype(np.int64)
    py = np.floor(v).astype(np.int64)

    offsets = _splat_offsets(splat_radius)
    cand_x = (px[None, :] + offsets[:, 0:1]).ravel()
    cand_y = (py[None, :] + offsets[:, 1:2]).ravel()
    cand_point = np.tile(np.arange(len(front)), len(offsets))
    inside = (cand_x >= 0) & (cand_x < w) & (cand_y >= 0) & (cand_y < h)
    if not np.any(inside):
        return KeyframeRender(color, depth, occupancy)
    cand_x, cand_y, cand_point = cand_x[inside], cand_y[inside], cand_point[inside]

    linear = cand_y * w + cand_x
    order = np.lexsort((cand_point, z[cand_point], linear))
    linear_sorted = linear[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = linear_sorted[1:] != linear_sorted[:-1]
    winners = order[first]

    pix = linear[winners]
    pts = cand_point[winners]
    rows, cols = pix // w, pix % w
    color[rows, cols] = colors[front[pts]]
    depth[rows, cols] = z[pts].astype(np.float32)
    occupancy[rows, cols] = True
    return KeyframeRender(color, depth, occupancy)


def render_keyframe(scene: Scene4D, control: RenderControl) -> KeyframeRender:
    """Render the non-removed points of the selected frames through the control camera."""
    if not control.time_selector:
        raise EmptySelection("Render control selects no frames")
    for t in control.time_selector:
        scene.frame(t)

    positions, colors = [], []
    for t in control.time_selector:
        cloud = scene.frames[t]
        keep = ~cloud.has_flag(FLAG_REMOVED)
        positions.append(cloud.positions[keep])
        colors.append(cloud.colors[keep])

    world_to_cam = control.camera_pose.inverse()
    positions_cam = world_to_cam.apply(np.concatenate(positions))
    return rasterize(positions_cam.reshape(-1, 3), np.concatenate(colors), control.intrinsics, control.splat_radius)


def render_many(scene: Scene4D, controls: Sequence[RenderControl],
                threads: Optional[int] = None) -> List[KeyframeRender]:
    """Render controls concurrently; the output keeps the order of ``controls``."""
    workers = HelperFunctions.resolve_workers(threads)
    if workers > 1 and len(controls) > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            return list(executor.map(lambda c: render_keyframe(scene, c), controls))
    return [render_keyframe(scene, c) for c in controls]


def render_frozen_time(scene: Scene4D, t_k: int, camera_poses: Sequence[RigidTransform],
                       intrinsics: CameraIntrinsics, splat_radius: int = config.SPLAT_RADIUS,
                       threads: Optional[int] = None) -> List[KeyframeRender]:
    """One frame's cloud seen from each pose in turn."""
    scene.frame(t_k)
    controls = [RenderControl(pose, (t_k,), intrinsics, splat_radius) for pose in camera_poses]
    return render_many(scene, controls, threads)


def render_frozen_space(scene: Scene4D, camera_pose: RigidTransform, times: Sequence[int],
                        intrinsics: CameraIntrinsics, splat_radius: int = config.SPLAT_RADIUS,
                        threads: Optional[int] = None) -> List[KeyframeRender]:
    """One fixed camera replaying each frame in turn."""
    for t in times:
        scene.frame(t)
    controls = [RenderControl(camera_pose, (t,), intrinsics, splat_radius) for t in times]
    return render_many(scene, controls, threads)


# --- Camera helpers ---

def _camera_index(manifest: SceneManifest, camera: CameraRef) -> int:
    if isinstance(camera, str):
        return manifest.camera_index(camera)
    if not 0 <= camera < len(manifest.rig):
        raise ValidationError(f"Camera index {camera} outside rig of {len(manifest.rig)} cameras")
    return int(camera)


def camera_pose(scene: Scene4D, manifest: SceneManifest, frame: int, camera: CameraRef) -> RigidTransform:
    """Refined camera -> world pose of one rig camera at one frame."""
    scene.frame(frame)
    c = _camera_index(manifest, camera)
    return scene.refined_poses[frame].compose(manifest.frames[frame].cameras[c].extrinsic)


def render_surround(scene: Scene4D, manifest: SceneManifest, base_frame: int, ego_delta: RigidTransform,
                    times: Sequence[int], splat_radius: int = config.SPLAT_RADIUS,
                    threads: Optional[int] = None) -> List[SurroundView]:
    """
    Synchronized rig rendering: the whole vehicle is moved by ``ego_delta``
    (ego frame of ``base_frame``) and every camera renders each time in ``times``.
    """
    scene.frame(base_frame)
    base = scene.refined_poses[base_frame].compose(ego_delta)
    cameras = manifest.frames[base_frame].cameras
    keys, controls = [], []
    for t in times:
        for cam in cameras:
            keys.append((t, cam.name))
            controls.append(RenderControl(base.compose(cam.extrinsic), (t,), cam.intrinsics, splat_radius))
    renders = render_many(scene, controls, threads)
    return [SurroundView(t, name, r) for (t, name), r in zip(keys, renders)]


# --- Object removal ---

def remove_objects(scene: Scene4D, boxes: Sequence[RemovalBox]) -> Scene4D:
    """Soft-delete points inside the boxes by setting the removed flag; counts are unchanged."""
    if not boxes:
        return scene
    frames = []
    total = 0
    for cloud in scene.frames:
        active = [b for b in boxes if b.covers(cloud.frame_index)]
        if not active or len(cloud) == 0:
            frames.append(cloud)
            continue
        inside = np.zeros(len(cloud), dtype=bool)
        for box in active:
            inside |= box_contains(cloud.positions, box.center, box.half_extents, box.yaw)
        flags = cloud.flags.copy()
        newly = inside & ((flags & FLAG_REMOVED) == 0)
        flags[inside] |= FLAG_REMOVED
        total += int(newly.sum())
        frames.append(cloud.with_flags(flags))
    logger.info(f"Flagged {total} points as removed across {len(boxes)} boxes")
    return scene.with_frames(frames)


# --- Training pairs ---

def sample_clip_starts(frame_count: int, clip_length: int = config.CLIP_LENGTH,
                       count: int = 1, seed: int = 0) -> List[int]:
    """Seeded random start indices of windows of ``clip_length`` consecutive frames."""
    if clip_length < 2 or frame_count < clip_length:
        raise TooFewFrames(f"Cannot cut {clip_length}-frame clips from {frame_count} frames")
    rng = np.random.default_rng(seed)
    return [int(s) for s in rng.integers(0, frame_count - clip_length + 1, size=count)]


def export_training_pairs(scene: Scene4D, manifest: SceneManifest,
                          cameras: Optional[Sequence[CameraRef]] = None,
                          clip_start: Optional[int] = None, clip_length: Optional[int] = None,
                          splat_radius: int = config.SPLAT_RADIUS,
                          threads: Optional[int] = None) -> List[TrainingPair]:
    """
    Project each even-labelled frame's cloud with the preceding odd-labelled
    frame's refined camera and pair it with that odd frame's image.

    Parity is counted from ``clip_start`` (default: the first frame). Pairs are
    ordered by (pair index, camera in rig order).
    """
    start = clip_start or 0
    length = clip_length if clip_length is not None else len(scene) - start
    if start < 0 or start + length > len(scene):
        raise ValidationError(f"Clip [{start}, {start + length}) exceeds the {len(scene)}-frame scene")
    if length < 2:
        raise TooFewFrames(f"Training pairs need at least 2 frames, got {length}")

    camera_ids = [_camera_index(manifest, c) for c in cameras] if cameras is not None else list(range(len(manifest.rig)))
    specs, controls = [], []
    for n in range(length // 2):
        odd = start + 2 * n
        even = odd + 1
        for c in camera_ids:
            cam = manifest.frames[odd].cameras[c]
            specs.append((even, odd, c))
            controls.append(RenderControl(camera_pose(scene, manifest, odd, c), (even,), cam.intrinsics, splat_radius))

    renders = render_many(scene, controls, threads)
    pairs = []
    for (even, odd, c), render in zip(specs, renders):
        cam = manifest.frames[odd].cameras[c]
        target = load_image(manifest.resolve(cam.image_path), cam.intrinsics)
        pairs.append(TrainingPair(render, target, even, odd, cam.name, start, manifest.index_offset))
    logger.info(f"Exported {len(pairs)} training pairs from {length} frames")
    return pairs


# --- Export ---

def save_render(render: KeyframeRender, out_dir, stem: str) -> Dict[str, Path]:
    """Write ``{stem}_color.png`` (RGB), ``{stem}_depth.png`` (16-bit mm) and ``{stem}_occ.png`` (0/255)."""
    out_dir = Path(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "color": out_dir / f"{stem}_color.png",
        "depth": out_dir / f"{stem}_depth.png",
        "occ": out_dir / f"{stem}_occ.png",
    }
    save_image(render.color, paths["color"])
    save_depth(render.depth_map(), paths["depth"])
    save_mask(render.occupancy, paths["occ"])
    return paths


@dataclass
class RenderIndex:
    """Per-sequence listing of the controls used, written next to the images."""

    entries: List[Dict] = field(default_factory=list)

    def add(self, stem: str, control: RenderControl, paths: Dict[str, Path], **extra):
        self.entries.append({"stem": stem, **extra, "control": control.to_dict(),
                             "files": {k: p.name for k, p in paths.items()}})

    def write(self, path):
        HelperFunctions.write_json(path, {"renders": self.entries})


def write_pairs(pairs: Sequence[TrainingPair], out_dir) -> Path:
    """Write ``cond/{stem}_*.png``, ``gt/{stem}.png`` and the ``pairs.json`` index; returns the index path."""
    out_dir = Path(out_dir)
    cond_dir, gt_dir = out_dir / "cond", out_dir / "gt"
    os.makedirs(gt_dir, exist_ok=True)
    entries = []
    for pair in pairs:
        paths = save_render(pair.condition, cond_dir, pair.stem)
        gt_path = gt_dir / f"{pair.stem}.png"
        save_image(pair.target, gt_path)
        entries.append({
            "stem": pair.stem,
            "even_frame": pair.even_frame,
            "odd_frame": pair.odd_frame,
            "labels": list(pair.labels),
            "manifest_frames": list(pair.manifest_frames),
            "camera": pair.camera,
            "condition": {k: f"cond/{p.name}" for k, p in paths.items()},
            "target": f"gt/{gt_path.name}",
        })
    index_path = out_dir / "pairs.json"
    HelperFunctions.write_json(index_path, {"pairs": entries})
    return index_path
