import json

import numpy as np
import pytest

from src.geometry import CameraIntrinsics, RigidTransform
from src.models.models import AlignmentReport, FramePointCloud, Scene4D
from src.synth_oracle import SynthObject, SynthSpec, camera_mount, generate


def make_cloud(positions, colors=None, frame_index=0, frame_tag="world", flags=None, timestamp=0.0):
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    n = len(positions)
    if colors is None:
        colors = np.full((n, 3), 255, dtype=np.uint8)
    return FramePointCloud(
        frame_index=frame_index,
        timestamp=timestamp,
        positions=positions,
        colors=np.asarray(colors, dtype=np.uint8).reshape(-1, 3),
        camera_index=np.zeros(n, dtype=np.uint8),
        flags=np.zeros(n, dtype=np.uint8) if flags is None else np.asarray(flags, dtype=np.uint8),
        frame_tag=frame_tag,
    )


def make_scene(clouds, poses=None):
    clouds = [
        FramePointCloud(i, float(i), c.positions, c.colors, c.camera_index, c.flags, "world")
        for i, c in enumerate(clouds)
    ]
    poses = poses or [RigidTransform.identity()] * len(clouds)
    return Scene4D(tuple(clouds), tuple(poses), tuple(AlignmentReport() for _ in clouds))


@pytest.fixture
def cloud_factory():
    return make_cloud


@pytest.fixture
def scene_factory():
    return make_scene


@pytest.fixture
def grid_points():
    """Jittered 8x8x3 grid, 1.5 m spacing, centered on the origin (192 points)."""
    rng = np.random.default_rng(3)
    axis_xy = (np.arange(8) - 3.5) * 1.5
    axis_z = (np.arange(3) - 1.0) * 1.5
    grid = np.stack(np.meshgrid(axis_xy, axis_xy, axis_z, indexing="ij"), axis=-1).reshape(-1, 3)
    return grid + rng.uniform(-0.2, 0.2, size=grid.shape)


@pytest.fixture
def small_intrinsics():
    return CameraIntrinsics(fx=20.0, fy=20.0, cx=16.0, cy=12.0, width=32, height=24)


def synth_spec(intrinsics, frame_count=4, cameras=1, objects=(), speed=0.0, **kwargs):
    rig = [
        camera_mount(f"cam{i}", intrinsics, yaw_deg=360.0 * i / cameras, pitch_deg=20.0, position=(0.0, 0.0, 1.5))
        for i in range(cameras)
    ]
    return SynthSpec(rig=tuple(rig), frame_count=frame_count, frame_dt=1.0, speed=speed, objects=tuple(objects), **kwargs)


@pytest.fixture
def synth_scene(tmp_path, small_intrinsics):
    """Stationary 4-frame, 1-camera scene: ground plus one static and one moving box."""
    spec = synth_spec(
        small_intrinsics,
        objects=(
            SynthObject(center=(6.0, 1.5, 0.7), half_extents=(0.5, 0.5, 0.5), color=(200, 40, 40)),
            SynthObject(center=(5.0, -1.5, 0.7), half_extents=(0.4, 0.4, 0.5), color=(40, 40, 220),
                        velocity=(0.5, 0.0, 0.0), dynamic=True),
        ),
    )
    manifest = generate(spec, tmp_path / "synth", threads=1)
    return spec, manifest, tmp_path / "synth"


@pytest.fixture
def write_json(tmp_path):
    def _write(name, payload):
        path = tmp_path / name
        path.write_text(json.dumps(payload))
        return path
    return _write
