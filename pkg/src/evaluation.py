"""
Evaluation module: PSNR / SSIM between renders and ground-truth images.
"""
import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
from skimage.metrics import structural_similarity

import src.config as config
from src.models.models import ColorImage
from src.scene_io import load_image, load_mask
from src.utils.exceptions import DimensionMismatch, EmptyMask, EmptySelection, IoError, MissingCounterpart, TooSmall
from src.utils.helper_functions import HelperFunctions
from src.utils.logger import AppLogger

logger = AppLogger(name="evaluation")

ImageLike = Union[ColorImage, np.ndarray]

# Render outputs that are not color images
AUXILIARY_SUFFIXES = ("_depth", "_occ")
COLOR_SUFFIX = "_color"


def _pixels(image: ImageLike) -> np.ndarray:
    return image.values if isinstance(image, ColorImage) else np.asarray(image)


def _check_pair(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise DimensionMismatch(f"Images differ in size: {a.shape} vs {b.shape}")


def psnr(a: ImageLike, b: ImageLike, mask: Optional[np.ndarray] = None) -> float:
    """
    Peak signal-to-noise ratio in dB for 8-bit images.

    With a mask, only the set pixels count. Identical inputs give PSNR_CAP_DB.
    """
    pa, pb = _pixels(a), _pixels(b)
    _check_pair(pa, pb)
    diff2 = (pa.astype(np.float64) - pb.astype(np.float64)) ** 2
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != pa.shape[:2]:
            raise DimensionMismatch(f"Mask {mask.shape} does not match image {pa.shape[:2]}")
        if not mask.any():
            raise EmptyMask("PSNR mask selects no pixels")
        diff2 = diff2[mask]
    mse = float(np.mean(diff2))
    if mse == 0.0:
        return config.PSNR_CAP_DB
    return min(config.PSNR_CAP_DB, float(10.0 * np.log10(255.0 ** 2 / mse)))


def ssim(a: ImageLike, b: ImageLike) -> float:
    """Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), channels averaged."""
    pa, pb = _pixels(a), _pixels(b)
    _check_pair(pa, pb)
    if min(pa.shape[:2]) < config.SSIM_MIN_SIDE:
        raise TooSmall(f"SSIM needs images of at least {config.SSIM_MIN_SIDE} px per side, got {pa.shape[:2]}")
    return float(structural_similarity(
        pa.astype(np.float64), pb.astype(np.float64),
        gaussian_weights=True, sigma=config.SSIM_SIGMA, use_sample_covariance=False,
        data_range=255, channel_axis=2 if pa.ndim == 3 else None,
    ))


@dataclass
class ImageMetrics:
    name: str
    psnr: float
    ssim: float
    psnr_masked: Optional[float] = None

    def to_dict(self) -> Dict:
        entry = {"name": self.name, "psnr": self.psnr, "ssim": self.ssim}
        if self.psnr_masked is not None:
            entry["psnr_masked"] = self.psnr_masked
        return entry


@dataclass
class MetricReport:
    per_image: List[ImageMetrics] = field(default_factory=list)
    masked: bool = False

    @property
    def aggregate(self) -> Dict[str, Optional[float]]:
        def mean(values):
            return float(np.mean(values)) if values else None

        return {
            "psnr": mean([m.psnr for m in self.per_image]),
            "ssim": mean([m.ssim for m in self.per_image]),
            "psnr_masked": mean([m.psnr_masked for m in self.per_image]) if self.masked else None,
            # Perceptual metrics come from external tools and are merged in later
            "lpips": None,
            "fid": None,
            "fvd": None,
        }

    def to_dict(self) -> Dict:
        return {
            "masked": self.masked,
            "count": len(self.per_image),
            "aggregate": self.aggregate,
            "per_image": [m.to_dict() for m in self.per_image],
        }

    def to_json(self, path):
        HelperFunctions.write_json(path, self.to_dict())

    def to_csv(self, path):
        """Flat table; ``psnr_db`` is the masked value when the report is masked."""
        try:
            with open(path, "w", newline="", encoding="utf-8") as f:
                writer = csv.writer(f, lineterminator="\n")
                writer.writerow(["name", "psnr_db", "ssim"])
                for m in self.per_image:
                    writer.writerow([m.name, m.psnr_masked if self.masked else m.psnr, m.ssim])
        except OSError as e:
            raise IoError(f"Cannot write {path}: {e}") from e


def _color_stems(directory: Path) -> Dict[str, Path]:
    stems = {}
    for path in sorted(directory.glob("*.png")):
        name = path.stem
        if name.endswith(AUXILIARY_SUFFIXES):
            continue
        if name.endswith(COLOR_SUFFIX):
            name = name[: -len(COLOR_SUFFIX)]
        stems[name] = path
    return stems


def evaluate_sequence(render_dir, gt_dir, masked: bool = False, threads: Optional[int] = None) -> MetricReport:
    """
    Compare every render in ``render_dir`` with the same-stem image in ``gt_dir``.

    Stems drop a trailing ``_color``; ``_depth`` and ``_occ`` files are skipped.
    In masked mode the render's ``{stem}_occ.png`` restricts the masked PSNR.
    """
    render_dir, gt_dir = Path(render_dir), Path(gt_dir)
    renders = _color_stems(render_dir)
    truths = _color_stems(gt_dir)
    for stem in sorted(set(renders) ^ set(truths)):
        side = "ground truth" if stem in renders else "render"
        raise MissingCounterpart(f"Image '{stem}' has no {side} counterpart")
    if not renders:
        raise EmptySelection(f"No images to evaluate in {render_dir}")

    def score(stem: str) -> ImageMetrics:
        rendered = load_image(renders[stem])
        truth = load_image(truths[stem])
        metrics = ImageMetrics(stem, psnr(rendered, truth), ssim(rendered, truth))
        if masked:
            occ_path = render_dir / f"{stem}_occ.png"
            if not occ_path.exists():
                raise MissingCounterpart(f"Image '{stem}' has no occupancy mask {occ_path.name}")
            metrics.psnr_masked = psnr(rendered, truth, load_mask(occ_path))
        return metrics

    stems = sorted(renders)
    workers = HelperFunctions.resolve_workers(threads)
    if workers > 1 and len(stems) > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            per_image = list(executor.map(score, stems))
    else:
        per_image = [score(s) for s in stems]

    report = MetricReport(per_image=per_image, masked=masked)
    agg = report.aggregate
    logger.info(f"Evaluated {len(per_image)} images: PSNR {agg['psnr']:.2f} dB, SSIM {agg['ssim']:.4f}")
    return report
