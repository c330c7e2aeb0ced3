"""
SE(3) and pinhole-camera math shared by every other module.

Conventions: right-handed frames. Camera frame +z forward, +x right, +y down.
Ego frame +x forward, +y left, +z up. World frame = ego frame of frame 0.
Extrinsics map camera -> ego, ego poses map ego -> world.
"""
from dataclasses import dataclass
from functools import cached_property
from typing import Dict, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.transform import Rotation

from src.utils.exceptions import BehindCamera, NonPositiveDepth, ValidationError

# A Point3 is a length-3 float array (x, y, z) in meters; batches are (N, 3) arrays.
Point3 = np.ndarray
ArrayLike = Union[Sequence[float], np.ndarray]

QUATERNION_NORM_TOLERANCE = 1e-6


def as_points(points: ArrayLike) -> np.ndarray:
    """Return points as a float64 array of shape (3,) or (N, 3), rejecting non-finite input."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.shape[-1] != 3 or arr.ndim > 2:
        raise ValueError(f"Expected (3,) or (N, 3) coordinates, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("Point coordinates must be finite")
    return arr


@dataclass(frozen=True)
class RigidTransform:
    """Rotation (unit quaternion w, x, y, z) followed by translation in meters."""

    rotation: Tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)
    translation: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if q.shape != (4,) or t.shape != (3,):
            raise ValidationError("RigidTransform needs a 4-element quaternion and a 3-element translation")
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(t))):
            raise ValidationError("RigidTransform components must be finite")
        norm = float(np.linalg.norm(q))
        if abs(norm - 1.0) > QUATERNION_NORM_TOLERANCE:
            raise ValidationError(f"Quaternion norm {norm:.9f} deviates from 1 by more than {QUATERNION_NORM_TOLERANCE}")
        object.__setattr__(self, "rotation", tuple(float(c) for c in q / norm))
        object.__setattr__(self, "translation", tuple(float(c) for c in t))

    # --- Constructors ---

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_rotation(cls, rotation: Rotation, translation: ArrayLike = (0.0, 0.0, 0.0)) -> "RigidTransform":
        x, y, z, w = rotation.as_quat()
        return cls((w, x, y, z), tuple(np.asarray(translation, dtype=np.float64)))

    @classmethod
    def from_matrix(cls, rotation_matrix: np.ndarray, translation: ArrayLike = (0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls.from_rotation(Rotation.from_matrix(rotation_matrix), translation)

    @classmethod
    def from_rotvec(cls, rotvec: ArrayLike, translation: ArrayLike = (0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls.from_rotation(Rotation.from_rotvec(np.asarray(rotvec, dtype=np.float64)), translation)

    @classmethod
    def from_yaw(cls, yaw: float, translation: ArrayLike = (0.0, 0.0, 0.0)) -> "RigidTransform":
        """Rotation of ``yaw`` radians about +z."""
        return cls.from_rotvec((0.0, 0.0, yaw), translation)

    @classmethod
    def from_translation(cls, translation: ArrayLike) -> "RigidTransform":
        return cls(translation=tuple(np.asarray(translation, dtype=np.float64)))

    @classmethod
    def from_dict(cls, data: Dict) -> "RigidTransform":
        return cls(tuple(data["rotation"]), tuple(data["translation"]))

    # --- Views ---

    @cached_property
    def _rotation(self) -> Rotation:
        w, x, y, z = self.rotation
        return Rotation.from_quat([x, y, z, w])

    @cached_property
    def rotation_matrix(self) -> np.ndarray:
        return self._rotation.as_matrix()

    @cached_property
    def translation_vector(self) -> np.ndarray:
        return np.asarray(self.translation, dtype=np.float64)

    def matrix(self) -> np.ndarray:
        """Homogeneous 4x4 form."""
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix
        m[:3, 3] = self.translation_vector
        return m

    def rotation_angle(self) -> float:
        """Rotation magnitude in radians, in [0, pi]."""
        return float(self._rotation.magnitude())

    def to_dict(self) -> Dict:
        return {"rotation": list(self.rotation), "translation": list(self.translation)}

    # --- Group operations ---

    def apply(self, points: ArrayLike) -> np.ndarray:
        """R * p + T for one point (3,) or a batch (N, 3)."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation_matrix.T + self.translation_vector

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: apply(compose(a, b), p) == a.apply(b.apply(p))."""
        rotation = self._rotation * other._rotation
        translation = self.rotation_matrix @ other.translation_vector + self.translation_vector
        return RigidTransform.from_rotation(rotation, translation)

    def inverse(self) -> "RigidTransform":
        inv = self._rotation.inv()
        return RigidTransform.from_rotation(inv, -(self.rotation_matrix.T @ self.translation_vector))


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole parameters in pixels; no distortion."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0 or int(self.width) != self.width or int(self.height) != self.height:
            raise ValidationError(f"Image size must be positive integers, got {self.width}x{self.height}")
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError(f"Focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValidationError(f"Principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @classmethod
    def from_dict(cls, data: Dict) -> "CameraIntrinsics":
        return cls(
            fx=float(data["fx"]), fy=float(data["fy"]),
            cx=float(data["cx"]), cy=float(data["cy"]),
            width=data["width"], height=data["height"],
        )

    def to_dict(self) -> Dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


# --- Functional API ---

def apply(t: RigidTransform, p: ArrayLike) -> np.ndarray:
    return t.apply(as_points(p))


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """b applied first, then a."""
    return a.compose(b)


def invert(t: RigidTransform) -> RigidTransform:
    return t.inverse()


def project(k: CameraIntrinsics, p_cam: ArrayLike):
    """Continuous pinhole projection of camera-frame points.

    Returns ``(u, v, depth)``: floats for a single point, arrays for a batch.
    Origin is the top-left image corner, u rightward, v downward.
    """
    p = as_points(p_cam)
    z = p[..., 2]
    if np.any(z <= 0):
        raise BehindCamera(f"Point(s) with z <= 0 cannot be projected (min z = {float(np.min(z))})")
    u = k.fx * p[..., 0] / z + k.cx
    v = k.fy * p[..., 1] / z + k.cy
    if p.ndim == 1:
        return float(u), float(v), float(z)
    return u, v, z.copy()


def lift(k: CameraIntrinsics, u, v, depth) -> np.ndarray:
    """Back-project pixel coordinates at a given z-depth; exact inverse of ``project``."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    d = np.asarray(depth, dtype=np.float64)
    if np.any(d <= 0):
        raise NonPositiveDepth("Depth must be positive to lift a pixel")
    x = (u - k.cx) * d / k.fx
    y = (v - k.cy) * d / k.fy
    return np.stack(np.broadcast_arrays(x, y, d), axis=-1)


def box_contains(points: np.ndarray, center: ArrayLike, half_extents: ArrayLike, yaw: float) -> np.ndarray:
    """Mask of points inside a box rotated by ``yaw`` about +z (boundary inclusive)."""
    c, s = np.cos(yaw), np.sin(yaw)
    rel = np.asarray(points, dtype=np.float64) - np.asarray(center, dtype=np.float64)
    local_x = c * rel[:, 0] + s * rel[:, 1]
    local_y = -s * rel[:, 0] + c * rel[:, 1]
    h = np.asarray(half_extents, dtype=np.float64)
    return (np.abs(local_x) <= h[0]) & (np.abs(local_y) <= h[1]) & (np.abs(rel[:, 2]) <= h[2])


def angle_between(a: RigidTransform, b: RigidTransform) -> float:
    """Rotation angle (radians) of a^-1 * b."""
    return a.inverse().compose(b).rotation_angle()


def translation_distance(a: RigidTransform, b: RigidTransform) -> float:
    return float(np.linalg.norm(a.translation_vector - b.translation_vector))
