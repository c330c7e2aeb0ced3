"""
Reconstruction module: lifts per-view depth maps into ego-frame point clouds
and fuses the surround views of each frame.
"""
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Sequence

import numpy as np

import src.config as config
from src.geometry import CameraIntrinsics, RigidTransform, box_contains, lift
from src.models.models import (
    FLAG_DYNAMIC,
    ColorImage,
    DepthMap,
    DynamicBox,
    FramePointCloud,
    FrameRecord,
    SceneManifest,
)
from src.scene_io import load_depth, load_image
from src.utils.exceptions import DimensionMismatch, MixedFrames
from src.utils.helper_functions import HelperFunctions
from src.utils.logger import AppLogger

logger = AppLogger(name="reconstruction")


def lift_view(
    depth: DepthMap,
    image: ColorImage,
    k: CameraIntrinsics,
    cam_to_ego: RigidTransform,
    stride: int = 1,
    camera_index: int = 0,
    frame_index: int = 0,
    timestamp: float = 0.0,
) -> FramePointCloud:
    """One ego-frame point per valid depth pixel on the stride grid, lifted through the pixel center."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    shape = (k.height, k.width)
    if depth.values.shape != shape or image.values.shape[:2] != shape:
        raise DimensionMismatch(
            f"Camera {camera_index}: depth {depth.values.shape} / image {image.values.shape[:2]} "
            f"do not match intrinsics {shape}"
        )

    sub = depth.values[::stride, ::stride]
    rows, cols = np.nonzero(sub)  # row-major order
    if len(rows) == 0:
        return FramePointCloud.empty(frame_index, timestamp)

    v = rows * stride
    u = cols * stride
    d = sub[rows, cols].astype(np.float64) / config.DEPTH_SCALE
    points_cam = lift(k, u + 0.5, v + 0.5, d)
    n = len(d)
    return FramePointCloud(
        frame_index=frame_index,
        timestamp=timestamp,
        positions=cam_to_ego.apply(points_cam),
        colors=image.values[v, u].astype(np.uint8),
        camera_index=np.full(n, camera_index, dtype=np.uint8),
        flags=np.zeros(n, dtype=np.uint8),
        frame_tag="ego",
    )


def fuse_frame(views: Sequence[FramePointCloud], frame: FrameRecord) -> FramePointCloud:
    """Union of the views of one frame, in the order given (rig order), no deduplication."""
    indices = {v.frame_index for v in views}
    if len(indices) > 1 or (indices and indices != {frame.index}):
        raise MixedFrames(f"Cannot fuse views from frames {sorted(indices)} into frame {frame.index}")
    for v in views:
        v.require_tag("ego")
    if not views:
        return FramePointCloud.empty(frame.index, frame.timestamp)

    return FramePointCloud(
        frame_index=frame.index,
        timestamp=frame.timestamp,
        positions=np.concatenate([v.positions for v in views]),
        colors=np.concatenate([v.colors for v in views]),
        camera_index=np.concatenate([v.camera_index for v in views]),
        flags=np.concatenate([v.flags for v in views]),
        frame_tag="ego",
    )


def voxel_downsample(cloud: FramePointCloud, voxel: float) -> FramePointCloud:
    """Keep, per occupied voxel, the point nearest the voxel's centroid (lowest index on ties)."""
    if voxel <= 0:
        raise ValueError(f"voxel size must be positive, got {voxel}")
    n = len(cloud)
    if n == 0:
        return cloud

    keys = np.floor(cloud.positions / voxel).astype(np.int64)
    _, group = np.unique(keys, axis=0, return_inverse=True)
    group = group.reshape(-1)
    counts = np.bincount(group)
    centroids = np.stack(
        [np.bincount(group, weights=cloud.positions[:, axis]) for axis in range(3)], axis=1
    ) / counts[:, None]
    dist2 = np.sum((cloud.positions - centroids[group]) ** 2, axis=1)

    order = np.lexsort((np.arange(n), dist2, group))
    first = np.ones(n, dtype=bool)
    first[1:] = group[order][1:] != group[order][:-1]
    keep = np.sort(order[first])
    return cloud.subset(keep)


def mark_dynamic(cloud: FramePointCloud, boxes: Sequence[DynamicBox]) -> FramePointCloud:
    """Set the dynamic bit on ego-frame points inside any annotation box."""
    cloud.require_tag("ego")
    if not boxes or len(cloud) == 0:
        return cloud
    inside = np.zeros(len(cloud), dtype=bool)
    for box in boxes:
        inside |= box_contains(cloud.positions, box.center, box.half_extents, box.yaw)
    flags = cloud.flags.copy()
    flags[inside] |= FLAG_DYNAMIC
    return cloud.with_flags(flags)


def thin_cloud(cloud: FramePointCloud, keep_ratio: float, seed: int = 0) -> FramePointCloud:
    """Seeded random sparsification, order preserving (point-density ablations)."""
    if not 0.0 < keep_ratio <= 1.0:
        raise ValueError(f"keep_ratio must be in (0, 1], got {keep_ratio}")
    rng = np.random.default_rng(seed)
    return cloud.subset(rng.random(len(cloud)) < keep_ratio)


class SceneReconstructor:
    """Lift and fuse every frame of a manifest into ego-frame clouds."""

    def __init__(self, stride: Optional[int] = None, threads: Optional[int] = None,
                 keep_ratio: Optional[float] = None, seed: int = 0):
        """
        Initialize the reconstructor.

        Args:
            stride: Pixel stride for lifting (default from config)
            threads: Worker threads; 0/None follows THREAD_COUNT
            keep_ratio: Fraction of each fused frame kept by seeded thinning (1.0 keeps all)
            seed: Thinning seed; frame t uses seed + t
        """
        self.stride = stride or config.LIFT_STRIDE
        self.keep_ratio = config.KEEP_RATIO if keep_ratio is None else keep_ratio
        if not 0.0 < self.keep_ratio <= 1.0:
            raise ValueError(f"keep_ratio must be in (0, 1], got {self.keep_ratio}")
        self.seed = seed
        self.max_workers = HelperFunctions.resolve_workers(threads)

    def lift_camera(self, manifest: SceneManifest, frame: FrameRecord, camera_index: int) -> FramePointCloud:
        camera = frame.cameras[camera_index]
        depth = load_depth(manifest.resolve(camera.depth_path), camera.intrinsics)
        image = load_image(manifest.resolve(camera.image_path), camera.intrinsics)
        return lift_view(
            depth, image, camera.intrinsics, camera.extrinsic, self.stride,
            camera_index=camera_index, frame_index=frame.index, timestamp=frame.timestamp,
        )

    def process_frame(self, manifest: SceneManifest, frame: FrameRecord) -> FramePointCloud:
        jobs = range(len(frame.cameras))
        if self.max_workers > 1 and len(frame.cameras) > 1:
            with ThreadPoolExecutor(max_workers=self.max_workers) as executor:
                views = list(executor.map(lambda c: self.lift_camera(manifest, frame, c), jobs))
        else:
            views = [self.lift_camera(manifest, frame, c) for c in jobs]
        return self._finish(fuse_frame(views, frame), frame)

    def _finish(self, cloud: FramePointCloud, frame: FrameRecord) -> FramePointCloud:
        if self.keep_ratio < 1.0:
            cloud = thin_cloud(cloud, self.keep_ratio, self.seed + frame.index)
        return mark_dynamic(cloud, frame.dynamic_boxes)

    def process_frames(self, manifest: SceneManifest) -> List[FramePointCloud]:
        """
        Reconstruct all frames, lifting views in parallel.

        Results are gathered in submission order, so the output does not
        depend on the worker count.
        """
        jobs = [(frame, c) for frame in manifest.frames for c in range(len(frame.cameras))]
        if self.max_workers > 1 and len(jobs) > 1:
            logger.info(f"Lifting {len(jobs)} views using {self.max_workers} workers...")
            with ThreadPoolExecutor(max_workers=self.max_workers) as executor:
                views = list(executor.map(lambda job: self.lift_camera(manifest, *job), jobs))
        else:
            views = [self.lift_camera(manifest, *job) for job in jobs]

        clouds = []
        cursor = 0
        for frame in manifest.frames:
            frame_views = views[cursor:cursor + len(frame.cameras)]
            cursor += len(frame.cameras)
            cloud = self._finish(fuse_frame(frame_views, frame), frame)
            logger.debug(f"Frame {frame.index}: {len(cloud)} points ({int(cloud.has_flag(FLAG_DYNAMIC).sum())} dynamic)")
            clouds.append(cloud)
        return clouds


def reconstruct_frame(manifest: SceneManifest, frame: FrameRecord, stride: Optional[int] = None,
                      threads: Optional[int] = None) -> FramePointCloud:
    """Load one frame's assets, lift every view, fuse them and flag dynamic points."""
    return SceneReconstructor(stride=stride, threads=threads).process_frame(manifest, frame)
