"""
Command-line front end: build scenes, render trajectories, export training
pairs, remove objects, evaluate renders and generate synthetic fixtures.

Logs go to stderr; every command prints a one-line JSON summary on stdout.
Exit codes: 0 success, 2 input/validation error, 3 processing error.
"""
import functools
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import click

import src.config as config
from src.alignment import AlignmentConfig, build_scene4d
from src.geometry import CameraIntrinsics, RigidTransform
from src.reconstruction import SceneReconstructor
from src.rendering import (
    RemovalBox,
    RenderControl,
    RenderIndex,
    camera_pose,
    export_training_pairs,
    remove_objects,
    render_frozen_space,
    render_frozen_time,
    render_many,
    render_surround,
    save_render,
    write_pairs,
)
from src.evaluation import evaluate_sequence
from src.models.models import FLAG_REMOVED
from src.scene_io import load_manifest, load_scene_bundle, save_scene_bundle
from src.synth_oracle import generate, load_synth_spec
from src.utils.exceptions import AlignmentFailed, Drive4DError, InputError, InvalidTrajectory, IoError
from src.utils.helper_functions import HelperFunctions
from src.utils.logger import AppLogger

logger = AppLogger(name="simcli")

TRAJECTORY_MODES = ("frozen_time", "frozen_space", "free")


# --- Trajectories ---

@dataclass(frozen=True)
class TrajectoryStep:
    time: Optional[int] = None
    pose_delta: Optional[RigidTransform] = None


@dataclass(frozen=True)
class TrajectorySpec:
    """
    Render request relative to the base frame's recorded camera pose.

    frozen_time steps carry pose deltas only, frozen_space steps carry times
    only, free steps carry a time and optionally a pose delta. With
    ``surround`` the delta moves the whole rig in the ego frame.
    """

    mode: str
    base_frame: int
    steps: Tuple[TrajectoryStep, ...]
    camera: Optional[str] = None
    intrinsics: Optional[CameraIntrinsics] = None
    splat_radius: int = config.SPLAT_RADIUS
    surround: bool = False

    def __post_init__(self):
        if self.mode not in TRAJECTORY_MODES:
            raise InvalidTrajectory(f"Unknown trajectory mode '{self.mode}', expected one of {TRAJECTORY_MODES}")
        if not self.steps:
            raise InvalidTrajectory("Trajectory needs at least one step")
        for i, step in enumerate(self.steps):
            if self.mode == "frozen_time" and (step.time is not None or step.pose_delta is None):
                raise InvalidTrajectory(f"Step {i}: frozen_time steps carry a pose_delta and no time")
            if self.mode == "frozen_space" and (step.time is None or step.pose_delta is not None):
                raise InvalidTrajectory(f"Step {i}: frozen_space steps carry a time and no pose_delta")
            if self.mode == "free" and step.time is None:
                raise InvalidTrajectory(f"Step {i}: free steps need a time")
        if self.camera is None and not self.surround:
            raise InvalidTrajectory("Trajectory must name a camera unless it renders the surround rig")

    @classmethod
    def from_dict(cls, data: Dict) -> "TrajectorySpec":
        try:
            steps = []
            for raw in data["steps"]:
                delta = raw.get("pose_delta")
                steps.append(TrajectoryStep(
                    time=int(raw["time"]) if raw.get("time") is not None else None,
                    pose_delta=RigidTransform.from_dict(delta) if delta is not None else None,
                ))
            intrinsics = data.get("intrinsics")
            return cls(
                mode=data["mode"],
                base_frame=int(data.get("base_frame", 0)),
                steps=tuple(steps),
                camera=data.get("camera"),
                intrinsics=CameraIntrinsics.from_dict(intrinsics) if intrinsics else None,
                splat_radius=int(data.get("splat_radius", config.SPLAT_RADIUS)),
                surround=bool(data.get("surround", False)),
            )
        except InvalidTrajectory:
            raise
        except (Drive4DError, KeyError, TypeError, ValueError, AttributeError) as e:
            raise InvalidTrajectory(f"Malformed trajectory ({e})") from e


def load_trajectory(path) -> TrajectorySpec:
    data = HelperFunctions.read_json(path)
    if not isinstance(data, dict):
        raise InvalidTrajectory(f"{path}: trajectory must be a JSON object")
    return TrajectorySpec.from_dict(data)


# --- Job configuration ---

@dataclass
class JobConfig:
    manifest: Optional[Path] = None
    alignment: AlignmentConfig = field(default_factory=AlignmentConfig)
    lift_stride: int = config.LIFT_STRIDE
    keep_ratio: float = config.KEEP_RATIO  # < 1 thins every frame (point-density ablation)
    thin_seed: int = 0
    output_dir: Optional[Path] = None
    removal_boxes: Optional[Path] = None
    strict_alignment: bool = False  # a coarse-only fallback fails the build
    threads: Optional[int] = None

    def __post_init__(self):
        if self.lift_stride < 1:
            raise InputError(f"lift_stride must be >= 1, got {self.lift_stride}")
        if not 0.0 < self.keep_ratio <= 1.0:
            raise InputError(f"keep_ratio must be in (0, 1], got {self.keep_ratio}")
        if self.threads is not None and self.threads < 0:
            raise InputError(f"threads must not be negative, got {self.threads}")

    @property
    def voxel_size(self) -> float:
        return self.alignment.voxel_size


def load_job_config(path) -> JobConfig:
    """JSON job file; relative paths are resolved against the file's directory."""
    path = Path(path)
    data = HelperFunctions.read_json(path)
    if not isinstance(data, dict):
        raise InputError(f"{path}: job config must be a JSON object")
    known = {f.name for f in fields(JobConfig)} | {"voxel_size"}
    unknown = sorted(set(data) - known)
    if unknown:
        logger.warning(f"{path}: ignoring unknown keys {unknown}")

    def resolve(key: str) -> Optional[Path]:
        value = data.get(key)
        return (path.parent / value).resolve() if value else None

    try:
        alignment = AlignmentConfig.from_dict(data.get("alignment", {}))
        if "voxel_size" in data:
            alignment = replace(alignment, voxel_size=float(data["voxel_size"]))
        return JobConfig(
            manifest=resolve("manifest"),
            alignment=alignment,
            lift_stride=int(data.get("lift_stride", config.LIFT_STRIDE)),
            keep_ratio=float(data.get("keep_ratio", config.KEEP_RATIO)),
            thin_seed=int(data.get("thin_seed", 0)),
            output_dir=resolve("output_dir"),
            removal_boxes=resolve("removal_boxes"),
            strict_alignment=bool(data.get("strict_alignment", False)),
            threads=data.get("threads"),
        )
    except (TypeError, ValueError) as e:
        raise InputError(f"{path}: malformed job config ({e})") from e


def load_removal_boxes(path) -> List[RemovalBox]:
    data = HelperFunctions.read_json(path)
    boxes = data.get("boxes") if isinstance(data, dict) else data
    if not isinstance(boxes, list):
        raise InputError(f"{path}: expected a list of boxes or an object with a 'boxes' list")
    return [RemovalBox.from_dict(b) for b in boxes]


# --- Command plumbing ---

def _handle_errors(func):
    """Turn engine errors into exit codes 2 (input) / 3 (processing)."""
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except Drive4DError as e:
            logger.error(f"{type(e).__name__}: {e}")
            sys.exit(e.exit_code)
        except OSError as e:
            logger.error(f"IoError: {e}")
            sys.exit(IoError.exit_code)
    return wrapper


def _job(ctx: click.Context, config_path: Optional[str]) -> JobConfig:
    job = load_job_config(config_path) if config_path else JobConfig()
    if ctx.obj.get("threads") is not None:
        job.threads = ctx.obj["threads"]
    return job


def _summary(command: str, artifacts: Dict[str, Path], **extra):
    payload = {
        "command": command,
        **extra,
        "artifacts": {k: str(p) for k, p in artifacts.items()},
        "sha256": {k: HelperFunctions.file_digest(p) for k, p in artifacts.items()},
    }
    click.echo(json.dumps(payload, sort_keys=True))


@click.group()
@click.option("--threads", type=click.IntRange(min=0), default=None,
              help="Worker threads (0 = all CPU threads). Defaults to THREAD_COUNT.")
@click.option("--verbose", is_flag=True, help="Debug logging on stderr.")
@click.pass_context
def cli(ctx: click.Context, threads: Optional[int], verbose: bool):
    """4D driving-scene engine: reconstruction, alignment, keyframe rendering and evaluation."""
    ctx.ensure_object(dict)
    ctx.obj["threads"] = threads
    if verbose:
        AppLogger.set_level(logging.DEBUG)


@cli.command()
@click.argument("manifest", required=False, type=click.Path(dir_okay=False))
@click.argument("out_dir", required=False, type=click.Path(file_okay=False))
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="JSON job config.")
@click.pass_context
@_handle_errors
def build(ctx, manifest, out_dir, config_path):
    """Reconstruct and align a scene into OUT_DIR."""
    job = _job(ctx, config_path)
    manifest_path = manifest or job.manifest
    out_dir = out_dir or job.output_dir
    if manifest_path is None or out_dir is None:
        raise InputError("build needs a manifest and an output directory (arguments or config)")

    scene_manifest = load_manifest(manifest_path)
    clouds = SceneReconstructor(
        stride=job.lift_stride, threads=job.threads, keep_ratio=job.keep_ratio, seed=job.thin_seed,
    ).process_frames(scene_manifest)
    scene = build_scene4d(clouds, [f.ego_pose for f in scene_manifest.frames], job.alignment, workers=job.threads)

    fallbacks = [i for i, r in enumerate(scene.reports) if r.fallback]
    if fallbacks and job.strict_alignment:
        raise AlignmentFailed(f"Frames {fallbacks} fell back to coarse alignment")
    if job.removal_boxes:
        scene = remove_objects(scene, load_removal_boxes(job.removal_boxes))

    artifacts = save_scene_bundle(scene, scene_manifest, out_dir)
    _summary(
        "build", artifacts,
        scene_id=scene_manifest.scene_id,
        frames=len(scene),
        points=sum(len(c) for c in scene.frames),
        converged=sum(r.converged for r in scene.reports),
        fallbacks=fallbacks,
    )


def _render_trajectory(scene, manifest, spec: TrajectorySpec, threads):
    """Render every step; returns (stem, render, index extras) in trajectory order."""
    if spec.surround:
        outputs = []
        for seq, step in enumerate(spec.steps):
            delta = step.pose_delta or RigidTransform.identity()
            time = step.time if step.time is not None else spec.base_frame
            for view in render_surround(scene, manifest, spec.base_frame, delta, [time], spec.splat_radius, threads):
                outputs.append((f"{seq:05d}_{view.camera}", view.render, {"frame": view.frame, "camera": view.camera}))
        return outputs

    base = camera_pose(scene, manifest, spec.base_frame, spec.camera)
    c = manifest.camera_index(spec.camera)
    intrinsics = spec.intrinsics or manifest.frames[spec.base_frame].cameras[c].intrinsics
    poses = [base.compose(s.pose_delta) if s.pose_delta is not None else base for s in spec.steps]
    times = [s.time if s.time is not None else spec.base_frame for s in spec.steps]
    controls = [RenderControl(p, (t,), intrinsics, spec.splat_radius) for p, t in zip(poses, times)]

    if spec.mode == "frozen_time":
        renders = render_frozen_time(scene, spec.base_frame, poses, intrinsics, spec.splat_radius, threads)
    elif spec.mode == "frozen_space":
        renders = render_frozen_space(scene, base, times, intrinsics, spec.splat_radius, threads)
    else:
        renders = render_many(scene, controls, threads)
    return [(f"{seq:05d}", r, {"control": ctl}) for seq, (ctl, r) in enumerate(zip(controls, renders))]


@cli.command()
@click.argument("scene_dir", type=click.Path(file_okay=False))
@click.argument("trajectory", type=click.Path(dir_okay=False))
@click.argument("out_dir", type=click.Path(file_okay=False))
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="JSON job config.")
@click.pass_context
@_handle_errors
def render(ctx, scene_dir, trajectory, out_dir, config_path):
    """Render a camera/time trajectory through a built scene."""
    job = _job(ctx, config_path)
    spec = load_trajectory(trajectory)
    scene, manifest = load_scene_bundle(scene_dir)

    index = RenderIndex()
    out_dir = Path(out_dir)
    for stem, rendered, extra in _render_trajectory(scene, manifest, spec, job.threads):
        paths = save_render(rendered, out_dir, stem)
        control = extra.pop("control", None)
        if control is not None:
            index.add(stem, control, paths, mode=spec.mode)
        else:
            index.entries.append({"stem": stem, "mode": spec.mode, **extra,
                                  "files": {k: p.name for k, p in paths.items()}})
    os.makedirs(out_dir, exist_ok=True)
    index_path = out_dir / "renders.json"
    index.write(index_path)
    _summary("render", {"index": index_path}, mode=spec.mode, renders=len(index.entries))


@cli.command("export-pairs")
@click.argument("scene_dir", type=click.Path(file_okay=False))
@click.argument("out_dir", type=click.Path(file_okay=False))
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="JSON job config.")
@click.option("--camera", "cameras", multiple=True, help="Restrict to these rig cameras (repeatable).")
@click.option("--clip-start", type=int, default=None, help="First frame of the clip window.")
@click.option("--clip-length", type=int, default=None, help="Frames in the clip window.")
@click.option("--splat-radius", type=click.IntRange(0, config.MAX_SPLAT_RADIUS), default=config.SPLAT_RADIUS)
@click.pass_context
@_handle_errors
def export_pairs(ctx, scene_dir, out_dir, config_path, cameras, clip_start, clip_length, splat_radius):
    """Export condition renders and ground-truth images for training."""
    job = _job(ctx, config_path)
    scene, manifest = load_scene_bundle(scene_dir)
    pairs = export_training_pairs(
        scene, manifest, cameras=list(cameras) or None, clip_start=clip_start,
        clip_length=clip_length, splat_radius=splat_radius, threads=job.threads,
    )
    index_path = write_pairs(pairs, out_dir)
    _summary("export-pairs", {"index": index_path}, pairs=len(pairs))


@cli.command()
@click.argument("scene_dir", type=click.Path(file_okay=False))
@click.argument("boxes", type=click.Path(dir_okay=False))
@click.argument("out_dir", type=click.Path(file_okay=False))
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="JSON job config.")
@click.pass_context
@_handle_errors
def remove(ctx, scene_dir, boxes, out_dir, config_path):
    """Soft-delete points inside removal boxes and save a new scene."""
    _job(ctx, config_path)
    scene, manifest = load_scene_bundle(scene_dir)
    edited = remove_objects(scene, load_removal_boxes(boxes))
    removed = [int(c.has_flag(FLAG_REMOVED).sum()) for c in edited.frames]
    logger.info(f"Removed points per frame: {removed}")
    artifacts = save_scene_bundle(edited, manifest, out_dir)
    _summary("remove", artifacts, removed=removed)


@cli.command("eval")
@click.argument("render_dir", type=click.Path(file_okay=False))
@click.argument("gt_dir", type=click.Path(file_okay=False))
@click.argument("out_dir", type=click.Path(file_okay=False))
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="JSON job config.")
@click.option("--masked", is_flag=True, help="Restrict PSNR to occupied render pixels.")
@click.pass_context
@_handle_errors
def evaluate(ctx, render_dir, gt_dir, out_dir, config_path, masked):
    """Compare renders with ground-truth images (PSNR, SSIM)."""
    job = _job(ctx, config_path)
    report = evaluate_sequence(render_dir, gt_dir, masked=masked, threads=job.threads)
    out_dir = Path(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    artifacts = {"json": out_dir / "metrics.json", "csv": out_dir / "metrics.csv"}
    report.to_json(artifacts["json"])
    report.to_csv(artifacts["csv"])
    _summary("eval", artifacts, images=len(report.per_image), aggregate=report.aggregate)


@cli.command()
@click.argument("out_dir", type=click.Path(file_okay=False))
@click.option("--config", "config_path", type=click.Path(dir_okay=False), required=True,
              help="JSON synthetic scene description.")
@click.pass_context
@_handle_errors
def synth(ctx, out_dir, config_path):
    """Generate a synthetic oracle scene into OUT_DIR."""
    spec = load_synth_spec(config_path)
    manifest = generate(spec, out_dir, threads=ctx.obj.get("threads"))
    artifacts = {"manifest": Path(out_dir) / config.MANIFEST_FILENAME}
    _summary("synth", artifacts, scene_id=manifest.scene_id, frames=len(manifest.frames), cameras=len(manifest.rig))


if __name__ == "__main__":
    cli()
