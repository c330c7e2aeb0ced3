"""
Data records shared across the engine: scene manifests, image grids,
per-frame point clouds and the aligned 4D scene.
"""
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

import src.config as config
from src.geometry import CameraIntrinsics, RigidTransform
from src.utils.exceptions import ValidationError, WrongFrameTag

FLAG_DYNAMIC = 0b01
FLAG_REMOVED = 0b10

FRAME_TAGS = ("ego", "world")
FRAME_NUMBERINGS = {"zero_based": 0, "one_based": 1}  # file frame number minus storage index


# --- Manifest records ---

@dataclass(frozen=True)
class DynamicBox:
    """Ego-frame box annotation marking points of a moving agent."""

    center: Tuple[float, float, float]
    half_extents: Tuple[float, float, float]
    yaw: float = 0.0

    @classmethod
    def from_dict(cls, data: Dict) -> "DynamicBox":
        return cls(tuple(map(float, data["center"])), tuple(map(float, data["half_extents"])), float(data.get("yaw", 0.0)))

    def to_dict(self) -> Dict:
        return {"center": list(self.center), "half_extents": list(self.half_extents), "yaw": self.yaw}


@dataclass(frozen=True)
class CameraRecord:
    name: str
    intrinsics: CameraIntrinsics
    extrinsic: RigidTransform  # camera -> ego
    image_path: str
    depth_path: str


@dataclass(frozen=True)
class FrameRecord:
    index: int
    timestamp: float
    ego_pose: RigidTransform  # ego -> world
    cameras: Tuple[CameraRecord, ...]
    dynamic_boxes: Tuple[DynamicBox, ...] = ()


@dataclass(frozen=True)
class SceneManifest:
    scene_id: str
    rig: Tuple[str, ...]
    frames: Tuple[FrameRecord, ...]
    base_dir: Path = Path(".")
    frame_numbering: str = "zero_based"

    @property
    def index_offset(self) -> int:
        """Difference between the manifest file's frame numbers and 0-based storage indices."""
        return FRAME_NUMBERINGS[self.frame_numbering]

    def resolve(self, relative: str) -> Path:
        """Asset paths are relative to the manifest file."""
        return (self.base_dir / relative).resolve()

    def camera_index(self, name: str) -> int:
        try:
            return self.rig.index(name)
        except ValueError:
            raise ValidationError(f"Camera '{name}' is not part of rig {list(self.rig)}")

    def with_ego_poses(self, poses: List[RigidTransform]) -> "SceneManifest":
        frames = tuple(replace(f, ego_pose=p) for f, p in zip(self.frames, poses))
        return replace(self, frames=frames)


# --- Image grids ---

@dataclass(frozen=True)
class DepthMap:
    """16-bit depth grid in millimeters; 0 marks invalid pixels."""

    values: np.ndarray  # (H, W) uint16

    @property
    def width(self) -> int:
        return int(self.values.shape[1])

    @property
    def height(self) -> int:
        return int(self.values.shape[0])

    @property
    def valid_mask(self) -> np.ndarray:
        return self.values > 0

    def meters(self) -> np.ndarray:
        return self.values.astype(np.float64) / config.DEPTH_SCALE


@dataclass(frozen=True)
class ColorImage:
    values: np.ndarray  # (H, W, 3) uint8

    @property
    def width(self) -> int:
        return int(self.values.shape[1])

    @property
    def height(self) -> int:
        return int(self.values.shape[0])


# --- Point clouds ---

@dataclass(frozen=True)
class FramePointCloud:
    """Colored points of one frame, tagged with the frame they are expressed in."""

    frame_index: int
    timestamp: float
    positions: np.ndarray  # (N, 3) float64, meters
    colors: np.ndarray  # (N, 3) uint8
    camera_index: np.ndarray  # (N,) uint8
    flags: np.ndarray  # (N,) uint8, bit0 dynamic, bit1 removed
    frame_tag: str = "ego"

    def __post_init__(self):
        n = len(self.positions)
        if self.frame_tag not in FRAME_TAGS:
            raise WrongFrameTag(f"Unknown frame tag '{self.frame_tag}'")
        if self.positions.shape != (n, 3) or self.colors.shape != (n, 3) \
                or self.camera_index.shape != (n,) or self.flags.shape != (n,):
            raise ValidationError(f"Frame {self.frame_index}: point field lengths disagree")
        if not np.all(np.isfinite(self.positions)):
            raise ValidationError(f"Frame {self.frame_index}: non-finite point positions")

    @classmethod
    def empty(cls, frame_index: int, timestamp: float = 0.0, frame_tag: str = "ego") -> "FramePointCloud":
        return cls(
            frame_index=frame_index,
            timestamp=timestamp,
            positions=np.zeros((0, 3), dtype=np.float64),
            colors=np.zeros((0, 3), dtype=np.uint8),
            camera_index=np.zeros(0, dtype=np.uint8),
            flags=np.zeros(0, dtype=np.uint8),
            frame_tag=frame_tag,
        )

    def __len__(self) -> int:
        return len(self.positions)

    def require_tag(self, tag: str) -> "FramePointCloud":
        if self.frame_tag != tag:
            raise WrongFrameTag(f"Frame {self.frame_index} is in the '{self.frame_tag}' frame, expected '{tag}'")
        return self

    def with_positions(self, positions: np.ndarray, frame_tag: Optional[str] = None) -> "FramePointCloud":
        return replace(self, positions=positions, frame_tag=frame_tag or self.frame_tag)

    def with_flags(self, flags: np.ndarray) -> "FramePointCloud":
        return replace(self, flags=flags)

    def subset(self, mask_or_index: np.ndarray) -> "FramePointCloud":
        return replace(
            self,
            positions=self.positions[mask_or_index],
            colors=self.colors[mask_or_index],
            camera_index=self.camera_index[mask_or_index],
            flags=self.flags[mask_or_index],
        )

    def has_flag(self, flag: int) -> np.ndarray:
        return (self.flags & flag) != 0


# --- Alignment results ---

@dataclass
class AlignmentReport:
    errors: List[float] = field(default_factory=list)  # mean squared correspondence error per iteration, m^2
    correspondence_count: List[int] = field(default_factory=list)
    converged: bool = True
    fallback: bool = False  # True when the frame kept its coarse alignment only
    message: str = ""

    @property
    def iterations(self) -> int:
        return len(self.errors)

    def to_dict(self) -> Dict:
        return {
            "iterations": self.iterations,
            "errors": list(self.errors),
            "correspondence_count": list(self.correspondence_count),
            "converged": self.converged,
            "fallback": self.fallback,
            "message": self.message,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "AlignmentReport":
        return cls(
            errors=[float(e) for e in data.get("errors", [])],
            correspondence_count=[int(c) for c in data.get("correspondence_count", [])],
            converged=bool(data.get("converged", True)),
            fallback=bool(data.get("fallback", False)),
            message=data.get("message", ""),
        )


@dataclass(frozen=True)
class Scene4D:
    """World-frame clouds of every frame plus the poses that put them there."""

    frames: Tuple[FramePointCloud, ...]
    refined_poses: Tuple[RigidTransform, ...]
    reports: Tuple[AlignmentReport, ...]

    def __post_init__(self):
        for position, cloud in enumerate(self.frames):
            if cloud.frame_index != position:
                raise ValidationError(f"Scene frames must be contiguous from 0; found index {cloud.frame_index} at {position}")
            cloud.require_tag("world")
        if not (len(self.frames) == len(self.refined_poses) == len(self.reports)):
            raise ValidationError("Scene frames, poses and reports must have equal lengths")

    def __len__(self) -> int:
        return len(self.frames)

    def frame(self, index: int) -> FramePointCloud:
        if not 0 <= index < len(self.frames):
            raise ValidationError(f"Frame index {index} outside scene of {len(self.frames)} frames")
        return self.frames[index]

    def with_frames(self, frames: List[FramePointCloud]) -> "Scene4D":
        return replace(self, frames=tuple(frames))
