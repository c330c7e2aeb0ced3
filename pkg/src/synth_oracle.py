"""
Synthetic scene oracle: analytic ground plane + box worlds seen by a
multi-camera rig on a closed-form trajectory. Writes the same manifest and
PNG formats as real data, plus a ground-truth sidecar for harnesses.
"""
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.transform import Rotation

from src.geometry import CameraIntrinsics, RigidTransform, project
from src.models.models import CameraRecord, DynamicBox, FrameRecord, SceneManifest
from src.scene_io import depth_from_meters, load_manifest, save_depth, save_image, save_manifest
from src.utils.exceptions import IoError, ValidationError
from src.utils.helper_functions import HelperFunctions
from src.utils.logger import AppLogger

logger = AppLogger(name="synth_oracle")

# Camera axes (x right, y down, z forward) expressed in the ego frame (x forward, y left, z up)
CAMERA_BASE = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
DYNAMIC_BOX_MARGIN = 0.05  # meters added to annotation boxes around moving objects
GROUND_TRUTH_FILENAME = "ground_truth.json"
PERTURBED_MANIFEST_FILENAME = "manifest_perturbed.json"

Color = Tuple[int, int, int]


@dataclass(frozen=True)
class CameraMount:
    name: str
    intrinsics: CameraIntrinsics
    extrinsic: RigidTransform  # camera -> ego


def camera_mount(name: str, intrinsics: CameraIntrinsics, yaw_deg: float = 0.0, pitch_deg: float = 0.0,
                 position: Sequence[float] = (0.0, 0.0, 1.5)) -> CameraMount:
    """
    Mount a camera on the vehicle. yaw turns the view left about ego +z,
    positive pitch tilts it down (90 looks straight at the ground).
    """
    turn = Rotation.from_euler("ZY", [yaw_deg, pitch_deg], degrees=True).as_matrix()
    return CameraMount(name, intrinsics, RigidTransform.from_matrix(turn @ CAMERA_BASE, position))


def surround_rig(intrinsics: CameraIntrinsics, count: int = 6, height: float = 1.5) -> List[CameraMount]:
    """Evenly spaced horizontal cameras covering 360 degrees, front camera first."""
    return [
        camera_mount(f"cam{i}", intrinsics, yaw_deg=360.0 * i / count, position=(0.0, 0.0, height))
        for i in range(count)
    ]


@dataclass(frozen=True)
class SynthObject:
    center: Tuple[float, float, float]  # world position at t = 0
    half_extents: Tuple[float, float, float]
    color: Color = (200, 40, 40)
    velocity: Tuple[float, float, float] = (0.0, 0.0, 0.0)  # m/s
    dynamic: bool = False

    def __post_init__(self):
        if len(self.center) != 3 or len(self.half_extents) != 3 or len(self.velocity) != 3:
            raise ValidationError("Synthetic objects need 3-element center, half_extents and velocity")
        if min(self.half_extents) <= 0:
            raise ValidationError(f"Object extents must be positive, got {self.half_extents}")

    @classmethod
    def from_dict(cls, data: Dict) -> "SynthObject":
        return cls(
            center=tuple(float(c) for c in data["center"]),
            half_extents=tuple(float(h) for h in data["half_extents"]),
            color=tuple(int(c) for c in data.get("color", (200, 40, 40))),
            velocity=tuple(float(c) for c in data.get("velocity", (0.0, 0.0, 0.0))),
            dynamic=bool(data.get("dynamic", False)),
        )


@dataclass(frozen=True)
class Perturbation:
    rot_deg: float = 0.0
    trans_m: float = 0.0
    seed: int = 0


@dataclass(frozen=True)
class SynthSpec:
    rig: Tuple[CameraMount, ...]
    frame_count: int = 1
    frame_dt: float = 0.1  # seconds
    speed: float = 0.0  # m/s along ego +x
    yaw_rate: float = 0.0  # rad/s
    objects: Tuple[SynthObject, ...] = ()
    ground: bool = True
    checker_size: float = 1.0  # meters
    checker_colors: Tuple[Color, Color] = ((90, 90, 90), (160, 160, 160))
    seed: int = 0
    scene_id: str = "synthetic"
    perturbation: Optional[Perturbation] = None

    def __post_init__(self):
        if self.frame_count < 1:
            raise ValidationError(f"frame_count must be >= 1, got {self.frame_count}")
        if self.frame_dt <= 0:
            raise ValidationError(f"frame_dt must be positive, got {self.frame_dt}")
        if not self.rig:
            raise ValidationError("Synthetic rig needs at least one camera")
        if self.checker_size <= 0:
            raise ValidationError(f"checker_size must be positive, got {self.checker_size}")
        names = [m.name for m in self.rig]
        if len(set(names)) != len(names):
            raise ValidationError(f"Camera names must be unique, got {names}")
        object.__setattr__(self, "rig", tuple(self.rig))
        object.__setattr__(self, "objects", tuple(self.objects))

    def mount(self, camera: Union[int, str]) -> CameraMount:
        if isinstance(camera, str):
            for m in self.rig:
                if m.name == camera:
                    return m
            raise ValidationError(f"Camera '{camera}' is not part of the synthetic rig")
        return self.rig[camera]


def load_synth_spec(path) -> SynthSpec:
    """Read a synthetic scene description (JSON)."""
    data = HelperFunctions.read_json(path)
    if not isinstance(data, dict):
        raise ValidationError(f"{path}: synthetic scene config must be a JSON object")
    known = {f.name for f in fields(SynthSpec)}
    unknown = sorted(set(data) - known)
    if unknown:
        logger.warning(f"{path}: ignoring unknown keys {unknown}")

    try:
        rig = tuple(
            camera_mount(
                str(c["name"]), CameraIntrinsics.from_dict(c["intrinsics"]),
                yaw_deg=float(c.get("yaw_deg", 0.0)), pitch_deg=float(c.get("pitch_deg", 0.0)),
                position=tuple(float(p) for p in c.get("position", (0.0, 0.0, 1.5))),
            )
            for c in data.get("rig", [])
        )
        kwargs = {k: data[k] for k in ("frame_count", "frame_dt", "speed", "yaw_rate", "ground",
                                       "checker_size", "seed", "scene_id") if k in data}
        if "checker_colors" in data:
            kwargs["checker_colors"] = tuple(tuple(int(v) for v in c) for c in data["checker_colors"])
        objects = tuple(SynthObject.from_dict(o) for o in data.get("objects", []))
        perturbation = Perturbation(**data["perturbation"]) if data.get("perturbation") else None
    except ValidationError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise ValidationError(f"{path}: malformed synthetic scene config ({e})") from e
    return SynthSpec(rig=rig, objects=objects, perturbation=perturbation, **kwargs)


# --- Closed-form motion ---

def ego_pose_at(spec: SynthSpec, t: float) -> RigidTransform:
    """Ego -> world pose at time t: constant speed with constant yaw rate, starting at the origin."""
    yaw = spec.yaw_rate * t
    if abs(spec.yaw_rate) < 1e-12:
        x, y = spec.speed * t, 0.0
    else:
        radius = spec.speed / spec.yaw_rate
        x, y = radius * np.sin(yaw), radius * (1.0 - np.cos(yaw))
    return RigidTransform.from_yaw(yaw, (x, y, 0.0))


def object_center_at(obj: SynthObject, t: float) -> np.ndarray:
    return np.asarray(obj.center, dtype=np.float64) + t * np.asarray(obj.velocity, dtype=np.float64)


def frame_time(spec: SynthSpec, frame: int) -> float:
    return frame * spec.frame_dt


def analytic_pixel(spec: SynthSpec, frame: int, camera: Union[int, str], world_point) -> Tuple[float, float, float]:
    """Exact continuous (u, v, depth) of a world point in one camera at one frame."""
    mount = spec.mount(camera)
    cam_pose = ego_pose_at(spec, frame_time(spec, frame)).compose(mount.extrinsic)
    return project(mount.intrinsics, cam_pose.inverse().apply(np.asarray(world_point, dtype=np.float64)))


# --- Ray casting ---

def _ray_box(origin: np.ndarray, dirs: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Ray parameter of the first box entry per ray (inf when missed or starting inside)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - origin) / dirs
        t2 = (hi - origin) / dirs
    near = np.minimum(t1, t2)
    far = np.maximum(t1, t2)
    # Rays parallel to a slab: inside it the slab never clips, outside it never hits
    parallel = dirs == 0
    inside_slab = (origin >= lo) & (origin <= hi)
    near = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), near)
    far = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), far)
    t_near = near.max(axis=1)
    t_far = far.min(axis=1)
    hit = (t_near <= t_far) & (t_near > 0)
    return np.where(hit, t_near, np.inf)


def render_view(spec: SynthSpec, frame: int, camera: Union[int, str]) -> Tuple[np.ndarray, np.ndarray]:
    """
    Ray-cast one camera at one frame through every pixel center.

    Returns:
        (depth_m, color): float64 z-depth (inf where nothing is hit) and uint8 RGB
    """
    mount = spec.mount(camera)
    k = mount.intrinsics
    t = frame_time(spec, frame)
    cam_pose = ego_pose_at(spec, t).compose(mount.extrinsic)

    v, u = np.mgrid[0:k.height, 0:k.width]
    dirs_cam = np.stack([(u + 0.5 - k.cx) / k.fx, (v + 0.5 - k.cy) / k.fy, np.ones(u.shape)], axis=-1).reshape(-1, 3)
    # Ray parameter s along these directions is the camera z-depth
    dirs = dirs_cam @ cam_pose.rotation_matrix.T
    origin = cam_pose.translation_vector

    depth = np.full(len(dirs), np.inf)
    color = np.zeros((len(dirs), 3), dtype=np.uint8)

    if spec.ground:
        with np.errstate(divide="ignore", invalid="ignore"):
            s = -origin[2] / dirs[:, 2]
        hit = np.isfinite(s) & (s > 0)
        depth[hit] = s[hit]
        points = origin + s[hit, None] * dirs[hit]
        parity = (np.floor(points[:, 0] / spec.checker_size) + np.floor(points[:, 1] / spec.checker_size)) % 2
        palette = np.asarray(spec.checker_colors, dtype=np.uint8)
        color[hit] = palette[parity.astype(np.int64)]

    for obj in spec.objects:
        center = object_center_at(obj, t)
        half = np.asarray(obj.half_extents)
        s = _ray_box(origin, dirs, center - half, center + half)
        closer = s < depth
        depth[closer] = s[closer]
        color[closer] = np.asarray(obj.color, dtype=np.uint8)

    return depth.reshape(k.height, k.width), color.reshape(k.height, k.width, 3)


def dynamic_boxes_at(spec: SynthSpec, frame: int) -> Tuple[DynamicBox, ...]:
    """Ego-frame annotation boxes of the dynamic objects, slightly inflated."""
    t = frame_time(spec, frame)
    world_to_ego = ego_pose_at(spec, t).inverse()
    yaw = -spec.yaw_rate * t
    return tuple(
        DynamicBox(
            center=tuple(float(c) for c in world_to_ego.apply(object_center_at(obj, t))),
            half_extents=tuple(h + DYNAMIC_BOX_MARGIN for h in obj.half_extents),
            yaw=float(yaw),
        )
        for obj in spec.objects if obj.dynamic
    )


# --- Scene generation ---

def generate(spec: SynthSpec, out_dir, threads: Optional[int] = None) -> SceneManifest:
    """
    Write color/depth PNGs, ``manifest.json`` and ``ground_truth.json`` under
    ``out_dir``; with a perturbation section also ``manifest_perturbed.json``.

    Returns the exact-pose manifest, loaded back through scene_io.
    """
    out_dir = Path(out_dir)
    try:
        os.makedirs(out_dir / "images", exist_ok=True)
        os.makedirs(out_dir / "depth", exist_ok=True)
    except OSError as e:
        raise IoError(f"Cannot create output directory {out_dir}: {e}") from e

    jobs = [(f, c) for f in range(spec.frame_count) for c in range(len(spec.rig))]

    def write_view(job) -> Tuple[str, str]:
        frame, c = job
        depth_m, color = render_view(spec, frame, c)
        stem = f"{frame:05d}_{spec.rig[c].name}"
        image_rel, depth_rel = f"images/{stem}.png", f"depth/{stem}.png"
        try:
            save_image(color, out_dir / image_rel)
            save_depth(depth_from_meters(depth_m), out_dir / depth_rel)
        except OSError as e:
            raise IoError(f"Cannot write view {stem}: {e}") from e
        return image_rel, depth_rel

    workers = HelperFunctions.resolve_workers(threads)
    if workers > 1 and len(jobs) > 1:
        logger.info(f"Ray-casting {len(jobs)} views using {workers} workers...")
        with ThreadPoolExecutor(max_workers=workers) as executor:
            written = list(executor.map(write_view, jobs))
    else:
        written = [write_view(job) for job in jobs]

    frames = []
    for f in range(spec.frame_count):
        cameras = []
        for c, mount in enumerate(spec.rig):
            image_rel, depth_rel = written[f * len(spec.rig) + c]
            cameras.append(CameraRecord(mount.name, mount.intrinsics, mount.extrinsic, image_rel, depth_rel))
        frames.append(FrameRecord(
            index=f,
            timestamp=frame_time(spec, f),
            ego_pose=ego_pose_at(spec, frame_time(spec, f)),
            cameras=tuple(cameras),
            dynamic_boxes=dynamic_boxes_at(spec, f),
        ))
    exact = SceneManifest(
        scene_id=spec.scene_id,
        rig=tuple(m.name for m in spec.rig),
        frames=tuple(frames),
        base_dir=out_dir.resolve(),
    )
    manifest_path = out_dir / "manifest.json"
    save_manifest(exact, manifest_path)

    perturbations = None
    if spec.perturbation is not None:
        p = spec.perturbation
        result = perturb_poses(exact, p.rot_deg, p.trans_m, p.seed)
        save_manifest(result.manifest, out_dir / PERTURBED_MANIFEST_FILENAME)
        perturbations = [q.to_dict() for q in result.perturbations]

    HelperFunctions.write_json(out_dir / GROUND_TRUTH_FILENAME, {
        "scene_id": spec.scene_id,
        "frame_dt": spec.frame_dt,
        "ego_poses": [f.ego_pose.to_dict() for f in frames],
        "objects": [
            {
                "dynamic": obj.dynamic,
                "half_extents": list(obj.half_extents),
                "track": [object_center_at(obj, frame_time(spec, f)).tolist() for f in range(spec.frame_count)],
            }
            for obj in spec.objects
        ],
        "perturbations": perturbations,
    })
    logger.info(f"Generated synthetic scene '{spec.scene_id}': {spec.frame_count} frames x {len(spec.rig)} cameras")
    return load_manifest(manifest_path)


# --- Pose perturbation ---

@dataclass(frozen=True)
class PerturbedManifest:
    manifest: SceneManifest
    perturbations: Tuple[RigidTransform, ...] = field(default_factory=tuple)  # one per frame, identity for frame 0


def perturb_poses(manifest: SceneManifest, rot_deg: float, trans_m: float, seed: int = 0) -> PerturbedManifest:
    """
    Inject seeded ego-pose errors: a rotation about a random axis by at most
    ``rot_deg`` and a translation uniform in the ball of radius ``trans_m``.

    The perturbation is applied in the world frame, perturbed = compose(delta, pose).
    Frame 0 defines the world and is left exact.
    """
    if rot_deg < 0 or trans_m < 0:
        raise ValidationError(f"Perturbation bounds must not be negative, got {rot_deg} deg / {trans_m} m")
    count = len(manifest.frames)
    if rot_deg == 0 and trans_m == 0:
        return PerturbedManifest(manifest, tuple(RigidTransform.identity() for _ in range(count)))

    rng = np.random.default_rng(seed)
    deltas = [RigidTransform.identity()]
    for _ in range(1, count):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = np.deg2rad(rot_deg) * rng.random()
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        offset = direction * trans_m * rng.random() ** (1.0 / 3.0)
        deltas.append(RigidTransform.from_rotvec(axis * angle, offset))

    poses = [d.compose(f.ego_pose) for d, f in zip(deltas, manifest.frames)]
    return PerturbedManifest(manifest.with_ego_poses(poses), tuple(deltas))


def recovery_residuals(corrections: Sequence[RigidTransform],
                       perturbations: Sequence[RigidTransform]) -> List[Tuple[float, float]]:
    """Per frame (rotation rad, translation m) left over after compose(correction, perturbation)."""
    out = []
    for correction, delta in zip(corrections, perturbations):
        residual = correction.compose(delta)
        out.append((residual.rotation_angle(), float(np.linalg.norm(residual.translation_vector))))
    return out
