"""
Alignment module: coarse alignment of per-frame clouds by ego pose, then
iterative closest point refinement (point-to-plane by default, point-to-point
on request) against the already aligned frames.
"""
from dataclasses import asdict, dataclass, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

import src.config as config
from src.geometry import RigidTransform
from src.models.models import FLAG_DYNAMIC, AlignmentReport, FramePointCloud, Scene4D
from src.reconstruction import voxel_downsample
from src.utils.exceptions import (
    DegenerateConfiguration,
    InsufficientCorrespondences,
    ValidationError,
)
from src.utils.helper_functions import HelperFunctions
from src.utils.logger import AppLogger

logger = AppLogger(name="alignment")

# Relative size of the second singular value below which the source set counts as collinear
COLLINEAR_TOLERANCE = 1e-9

METRICS = ("point_to_plane", "point_to_point")


@dataclass
class AlignmentConfig:
    max_iterations: int = config.ALIGN_MAX_ITERATIONS
    rel_tolerance: float = config.ALIGN_REL_TOLERANCE
    max_correspondence_distance: float = config.ALIGN_MAX_CORRESPONDENCE_DISTANCE
    min_correspondences: int = config.ALIGN_MIN_CORRESPONDENCES
    exclude_dynamic: bool = config.ALIGN_EXCLUDE_DYNAMIC
    voxel_size: float = config.VOXEL_SIZE  # 0 disables downsampling
    enable_fine: bool = True
    metric: str = config.ALIGN_METRIC

    def __post_init__(self):
        if self.max_iterations <= 0:
            raise ValidationError(f"max_iterations must be positive, got {self.max_iterations}")
        if not 0.0 < self.rel_tolerance < 1.0:
            raise ValidationError(f"rel_tolerance must be in (0, 1), got {self.rel_tolerance}")
        if self.max_correspondence_distance <= 0:
            raise ValidationError(f"max_correspondence_distance must be positive, got {self.max_correspondence_distance}")
        if self.min_correspondences <= 0:
            raise ValidationError(f"min_correspondences must be positive, got {self.min_correspondences}")
        if self.voxel_size < 0:
            raise ValidationError(f"voxel_size must not be negative, got {self.voxel_size}")
        if self.metric not in METRICS:
            raise ValidationError(f"metric must be one of {METRICS}, got {self.metric!r}")

    @classmethod
    def from_dict(cls, data: Dict) -> "AlignmentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            logger.warning(f"Ignoring unknown alignment settings: {unknown}")
        return cls(**{k: v for k, v in data.items() if k in known})

    def to_dict(self) -> Dict:
        return asdict(self)


def coarse_align(cloud: FramePointCloud, ego_pose: RigidTransform) -> FramePointCloud:
    """Map an ego-frame cloud into the world frame by its ego pose."""
    cloud.require_tag("ego")
    return cloud.with_positions(ego_pose.apply(cloud.positions), frame_tag="world")


def solve_arrays(source: np.ndarray, target: np.ndarray) -> RigidTransform:
    """Least-squares rigid transform taking ``source`` rows onto ``target`` rows."""
    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if source.shape != target.shape or source.ndim != 2 or source.shape[1] != 3:
        raise ValueError(f"Expected matching (N, 3) arrays, got {source.shape} and {target.shape}")
    if len(source) < 3:
        raise DegenerateConfiguration(f"Rigid solve needs at least 3 correspondences, got {len(source)}")

    mu_s = source.mean(axis=0)
    mu_t = target.mean(axis=0)
    src_c = source - mu_s
    tgt_c = target - mu_t

    spread = np.linalg.svd(src_c, compute_uv=False)
    if spread[0] == 0.0 or spread[1] <= COLLINEAR_TOLERANCE * spread[0]:
        raise DegenerateConfiguration("Source points are collinear; rotation about their line is unobservable")

    cov = tgt_c.T @ src_c
    u, _, vt = np.linalg.svd(cov)
    s = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s[2, 2] = -1.0
    r = u @ s @ vt
    return RigidTransform.from_matrix(r, mu_t - r @ mu_s)


def rigid_solve(correspondences: Sequence[Tuple[np.ndarray, np.ndarray]]) -> RigidTransform:
    """
    Closed-form rigid transform minimizing the summed squared distance of
    ``apply(T, source)`` to ``target`` over (source, target) pairs.

    Raises:
        DegenerateConfiguration: fewer than 3 pairs or collinear sources
    """
    pairs = np.asarray(correspondences, dtype=np.float64)
    if pairs.size == 0:
        raise DegenerateConfiguration("Rigid solve needs at least 3 correspondences, got 0")
    if pairs.ndim != 3 or pairs.shape[1:] != (2, 3):
        raise ValueError(f"Expected a list of (source, target) point pairs, got shape {pairs.shape}")
    return solve_arrays(pairs[:, 0], pairs[:, 1])


def estimate_normals(points: np.ndarray, neighbors: int = config.ALIGN_NORMAL_NEIGHBORS,
                     workers: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    """
    PCA normals over the ``neighbors`` nearest points of every point.

    Returns:
        (normals, curvature): unit normals (sign arbitrary) and the smallest
        eigenvalue's share of the neighborhood variance, 0 on a plane. With
        fewer than 3 points available every normal is zero and curvature 1.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    k = min(neighbors, len(points))
    if k < 3:
        return np.zeros_like(points), np.ones(len(points))
    _, idx = cKDTree(points).query(points, k=k, workers=workers)
    hood = points[idx]
    hood = hood - hood.mean(axis=1, keepdims=True)
    values, vectors = np.linalg.eigh(np.einsum("nki,nkj->nij", hood, hood) / k)
    values = np.clip(values, 0.0, None)
    total = values.sum(axis=1)
    curvature = np.divide(values[:, 0], total, out=np.ones_like(total), where=total > 0)
    return vectors[:, :, 0], curvature


def _alignment_points(cloud: FramePointCloud, exclude_dynamic: bool) -> np.ndarray:
    if exclude_dynamic:
        return cloud.positions[~cloud.has_flag(FLAG_DYNAMIC)]
    return cloud.positions


@dataclass
class _Matches:
    moved: np.ndarray  # source points under the evaluated correction
    ref_idx: np.ndarray  # chosen reference point per source point
    pairs: np.ndarray  # source indices that take part in the solve
    error: float

    @property
    def count(self) -> int:
        return len(self.pairs)


class _Registration:
    """
    Correspondence search, error and update step of one fine_align run.

    The error of a correction is the mean over the source points of the
    squared residual to their matched reference point, capped at the squared
    correspondence distance. Point-to-point measures the Euclidean distance to
    the nearest reference point. Point-to-plane keeps only points whose
    neighborhood is planar, matches each one to the nearest of its candidate
    reference points with a compatible normal, and measures the distance to
    that point's tangent plane. Only pairs within the correspondence distance
    enter the solve.
    """

    def __init__(self, src_pts: np.ndarray, ref_pts: np.ndarray, cfg: AlignmentConfig, workers: int):
        self.cfg = cfg
        self.workers = workers
        self.cap = cfg.max_correspondence_distance ** 2
        self.point_to_plane = cfg.metric == "point_to_plane"
        if self.point_to_plane:
            src_normals, src_curvature = estimate_normals(src_pts, workers=workers)
            ref_normals, ref_curvature = estimate_normals(ref_pts, workers=workers)
            src_planar = src_curvature < config.ALIGN_MAX_CURVATURE
            ref_planar = ref_curvature < config.ALIGN_MAX_CURVATURE
            src_pts, self.src_normals = src_pts[src_planar], src_normals[src_planar]
            ref_pts, self.ref_normals = ref_pts[ref_planar], ref_normals[ref_planar]
            self.min_cos = np.cos(np.deg2rad(config.ALIGN_NORMAL_MAX_ANGLE_DEG))
        self.src = src_pts
        self.ref = ref_pts
        self.tree = cKDTree(ref_pts) if len(ref_pts) else None

    @property
    def empty(self) -> bool:
        return len(self.src) == 0 or self.tree is None

    def match(self, correction: RigidTransform) -> _Matches:
        moved = correction.apply(self.src)
        if not self.point_to_plane:
            dist, ref_idx = self.tree.query(moved, k=1, workers=self.workers)
            error = float(np.mean(np.minimum(dist ** 2, self.cap)))
            pairs = np.flatnonzero(dist <= self.cfg.max_correspondence_distance)
            return _Matches(moved, ref_idx, pairs, error)

        k = min(config.ALIGN_NORMAL_NEIGHBORS, len(self.ref))
        dist, idx = self.tree.query(moved, k=k, workers=self.workers)
        if k == 1:
            dist, idx = dist[:, None], idx[:, None]
        normals = self.src_normals @ correction.rotation_matrix.T
        compatible = np.abs(np.einsum("nj,nkj->nk", normals, self.ref_normals[idx])) >= self.min_cos
        # Candidates come sorted by distance, so argmax picks the nearest compatible one
        pick = compatible.argmax(axis=1)
        rows = np.arange(len(moved))
        matched = compatible[rows, pick]
        ref_idx = idx[rows, pick]
        residual = np.einsum("nj,nj->n", moved - self.ref[ref_idx], self.ref_normals[ref_idx])
        error = float(np.mean(np.where(matched, np.minimum(residual ** 2, self.cap), self.cap)))
        pairs = np.flatnonzero(matched & (dist[rows, pick] <= self.cfg.max_correspondence_distance))
        return _Matches(moved, ref_idx, pairs, error)

    def step(self, matches: _Matches) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        Update for the current pairs as (rotation vector, shift, center): the
        step turns points about ``center`` and then shifts them.
        """
        p = matches.moved[matches.pairs]
        q = self.ref[matches.ref_idx[matches.pairs]]
        center = p.mean(axis=0)
        if not self.point_to_plane:
            solved = solve_arrays(p, q)
            rotvec = Rotation.from_matrix(solved.rotation_matrix).as_rotvec()
            return rotvec, solved.apply(center) - center, center

        # Linearized about the current pose: r + w . ((p - c) x n) + t . n = 0
        n = self.ref_normals[matches.ref_idx[matches.pairs]]
        system = np.hstack([np.cross(p - center, n), n])
        rhs = -np.einsum("nj,nj->n", p - q, n)
        # lstsq gives the minimum-norm answer, so directions the pairs cannot see stay put
        solution = np.linalg.lstsq(system, rhs, rcond=None)[0]
        return solution[:3], solution[3:], center


def _partial_step(rotvec: np.ndarray, shift: np.ndarray, center: np.ndarray, alpha: float) -> RigidTransform:
    turn = RigidTransform.from_rotvec(alpha * rotvec)
    return RigidTransform.from_rotvec(alpha * rotvec, center - turn.apply(center) + alpha * shift)


def fine_align(source: FramePointCloud, reference: FramePointCloud,
               cfg: Optional[AlignmentConfig] = None,
               workers: Optional[int] = None) -> Tuple[RigidTransform, AlignmentReport]:
    """
    Iterative closest point refinement of a world-frame cloud against a reference.

    E_k is the capped mean squared residual (see ``_Registration``) under the
    correction in effect at iteration k. Each iteration solves for an update
    on the pairs within the correspondence distance and takes it only if E
    does not rise, halving it up to ALIGN_BACKTRACK_STEPS times, so the
    recorded errors never increase. When no update is taken from the coarse
    pose the frame keeps it and is reported as a fallback, not converged.

    Returns:
        (correction, report) where correction maps the source toward the reference
    """
    cfg = cfg or AlignmentConfig()
    source.require_tag("world")
    reference.require_tag("world")

    src_pts = _alignment_points(source, cfg.exclude_dynamic)
    ref_pts = _alignment_points(reference, cfg.exclude_dynamic)
    if len(src_pts) == 0 or len(ref_pts) == 0:
        raise InsufficientCorrespondences(
            f"Frame {source.frame_index}: no static points to align ({len(src_pts)} source, {len(ref_pts)} reference)"
        )

    workers = HelperFunctions.resolve_workers(workers)
    registration = _Registration(src_pts, ref_pts, cfg, workers)
    if registration.empty:
        raise InsufficientCorrespondences(f"Frame {source.frame_index}: no planar points to align")

    report = AlignmentReport(converged=False)
    correction = RigidTransform.identity()
    current = registration.match(correction)
    taken = 0

    for iteration in range(cfg.max_iterations):
        if current.count < cfg.min_correspondences:
            raise InsufficientCorrespondences(
                f"Frame {source.frame_index}: {current.count} correspondences within "
                f"{cfg.max_correspondence_distance} m, need {cfg.min_correspondences}"
            )
        report.errors.append(current.error)
        report.correspondence_count.append(current.count)
        if current.error < config.ALIGN_ABS_TOLERANCE:
            report.converged = True
            break
        if iteration and (report.errors[-2] - current.error) / report.errors[-2] < cfg.rel_tolerance:
            report.converged = True
            break

        rotvec, shift, center = registration.step(current)
        if max(np.linalg.norm(rotvec), np.linalg.norm(shift)) < config.ALIGN_STEP_TOLERANCE:
            report.converged = True
            break

        alpha = 1.0
        accepted = None
        for _ in range(config.ALIGN_BACKTRACK_STEPS + 1):
            trial = _partial_step(rotvec, shift, center, alpha).compose(correction)
            matches = registration.match(trial)
            if matches.count >= cfg.min_correspondences and matches.error <= current.error + config.ALIGN_ABS_TOLERANCE:
                accepted = (trial, matches)
                break
            alpha *= 0.5
        if accepted is None:
            logger.debug(f"Frame {source.frame_index}: no update lowers E = {current.error:.3e}")
            report.converged = taken > 0
            report.fallback = taken == 0
            report.message = "no further descent" if taken else "no descent from coarse alignment"
            break
        correction, current = accepted
        taken += 1
    else:
        report.message = f"stopped after {cfg.max_iterations} iterations"

    logger.debug(
        f"Frame {source.frame_index}: {report.iterations} iterations, "
        f"E = {report.errors[-1]:.3e} m^2, converged={report.converged}"
    )
    return correction, report


def _reference_cloud(aligned: List[FramePointCloud], cfg: AlignmentConfig) -> FramePointCloud:
    union = FramePointCloud(
        frame_index=aligned[-1].frame_index,
        timestamp=aligned[-1].timestamp,
        positions=np.concatenate([c.positions for c in aligned]),
        colors=np.concatenate([c.colors for c in aligned]),
        camera_index=np.concatenate([c.camera_index for c in aligned]),
        flags=np.concatenate([c.flags for c in aligned]),
        frame_tag="world",
    )
    if cfg.exclude_dynamic:
        union = union.subset(~union.has_flag(FLAG_DYNAMIC))
    return _downsample(union, cfg)


def _downsample(cloud: FramePointCloud, cfg: AlignmentConfig) -> FramePointCloud:
    return voxel_downsample(cloud, cfg.voxel_size) if cfg.voxel_size > 0 else cloud


def build_scene4d(frames: Sequence[FramePointCloud], ego_poses: Sequence[RigidTransform],
                  cfg: Optional[AlignmentConfig] = None, workers: Optional[int] = None) -> Scene4D:
    """
    Align a frame sequence into one world frame.

    Frame 0 is coarse-aligned only and seeds the reference. Every later frame
    is coarse-aligned, refined against the union of the frames before it, and
    stored with the corrected positions. A frame whose refinement fails keeps
    its coarse alignment and is reported with fallback=True.
    """
    cfg = cfg or AlignmentConfig()
    if len(frames) != len(ego_poses):
        raise ValidationError(f"{len(frames)} frames but {len(ego_poses)} ego poses")
    if not frames:
        raise ValidationError("Cannot build a scene from zero frames")

    world: List[FramePointCloud] = []
    refined: List[RigidTransform] = []
    reports: List[AlignmentReport] = []

    for position, (cloud, ego_pose) in enumerate(zip(frames, ego_poses)):
        coarse = coarse_align(cloud, ego_pose)
        correction = RigidTransform.identity()

        if position == 0:
            report = AlignmentReport(converged=True, message="reference frame")
        elif not cfg.enable_fine:
            report = AlignmentReport(converged=True, message="fine alignment disabled")
        else:
            try:
                correction, report = fine_align(
                    _downsample(coarse, cfg), _reference_cloud(world, cfg), cfg, workers
                )
            except (InsufficientCorrespondences, DegenerateConfiguration) as e:
                logger.warning(f"Frame {cloud.frame_index}: keeping coarse alignment ({e})")
                report = AlignmentReport(converged=False, fallback=True, message=str(e))

        world.append(coarse.with_positions(correction.apply(coarse.positions)))
        refined.append(correction.compose(ego_pose))
        reports.append(report)

    fallbacks = sum(r.fallback for r in reports)
    logger.info(f"Aligned {len(world)} frames ({fallbacks} coarse-only fallbacks)")
    return Scene4D(frames=tuple(world), refined_poses=tuple(refined), reports=tuple(reports))
