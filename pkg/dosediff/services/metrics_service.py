from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np
import structlog
from skimage.metrics import structural_similarity

from dosediff.core.errors import ArgumentError, EvaluationError
from dosediff.models.domain import Volume3D
from dosediff.models.schemas.reports import MetricsReport, MetricsRow

logger = structlog.get_logger(__name__)

PSNR_CAP_DB = 300.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def _grid(vol: Union[Volume3D, np.ndarray]) -> np.ndarray:
    return vol.data if isinstance(vol, Volume3D) else np.asarray(vol, dtype=np.float64)


def _check(ref: np.ndarray, test: np.ndarray, mask: np.ndarray) -> None:
    if ref.shape != test.shape or ref.shape != mask.shape:
        raise ArgumentError(f"shape mismatch: ref {ref.shape}, test {test.shape}, mask {mask.shape}")
    if not mask.any():
        raise EvaluationError("mask is empty")


def mask_black(ref: Union[Volume3D, np.ndarray], threshold: float = 0.0) -> np.ndarray:
    """Voxels of the reference strictly above `threshold`."""
    mask = _grid(ref) > threshold
    if not mask.any():
        raise EvaluationError("reference volume is entirely black")
    return mask


def psnr(ref, test, mask: np.ndarray) -> float:
    ref, test = _grid(ref), _grid(test)
    _check(ref, test, mask)
    peak = float(ref[mask].max())
    mse = float(np.mean((test[mask] - ref[mask]) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    if peak <= 0.0:
        raise EvaluationError("masked reference peak is not positive")
    return min(PSNR_CAP_DB, 10.0 * math.log10(peak ** 2 / mse))


def nrmse(ref, test, mask: np.ndarray) -> float:
    ref, test = _grid(ref), _grid(test)
    _check(ref, test, mask)
    norm = float(np.linalg.norm(ref[mask]))
    if norm == 0.0:
        raise EvaluationError("reference has zero norm over the mask")
    return float(np.linalg.norm(test[mask] - ref[mask])) / norm


def _window_size(width: int, height: int) -> int:
    size = min(SSIM_WINDOW, width, height)
    return size if size % 2 else size - 1


def ssim(ref, test, mask: np.ndarray) -> float:
    """Slice-wise 2D SSIM averaged over window centres inside the mask."""
    ref, test = _grid(ref), _grid(test)
    _check(ref, test, mask)
    data_range = float(ref[mask].max())
    if data_range <= 0.0:
        raise EvaluationError("masked reference peak is not positive")
    win = _window_size(ref.shape[2], ref.shape[1])
    if win < 3:
        raise EvaluationError(f"slices of {ref.shape[1:]} are too small for SSIM")

    total, count = 0.0, 0
    for s in range(ref.shape[0]):
        if not mask[s].any():
            continue
        _, smap = structural_similarity(
            ref[s],
            test[s],
            win_size=win,
            gaussian_weights=True,
            sigma=SSIM_SIGMA,
            use_sample_covariance=False,
            data_range=data_range,
            K1=0.01,
            K2=0.03,
            full=True,
        )
        total += float(smap[mask[s]].sum())
        count += int(mask[s].sum())
    return total / count


def z_consistency(vol) -> float:
    """Mean over adjacent slice pairs of the mean absolute voxel difference."""
    data = _grid(vol)
    if data.shape[0] < 2:
        raise ArgumentError("inter-slice variation needs at least two slices")
    return float(np.mean(np.abs(np.diff(data, axis=0))))


def activity_error(ref, test) -> float:
    ref, test = _grid(ref), _grid(test)
    if ref.shape != test.shape:
        raise ArgumentError(f"shape mismatch: ref {ref.shape}, test {test.shape}")
    total = float(ref.sum())
    if total == 0.0:
        raise EvaluationError("reference total activity is zero")
    return (float(test.sum()) - total) / total


def evaluate(ref: Volume3D, test: Volume3D, mask: Optional[np.ndarray] = None) -> MetricsReport:
    mask = mask_black(ref) if mask is None else mask
    report = MetricsReport(
        psnr=psnr(ref, test, mask),
        nrmse=nrmse(ref, test, mask),
        ssim=ssim(ref, test, mask),
        mask_voxels=int(mask.sum()),
        z_tv=z_consistency(test) if test.slices >= 2 else 0.0,
        activity_ratio=float(test.data.sum() / ref.data.sum()),
    )
    logger.info("volume_evaluated", psnr=report.psnr, nrmse=report.nrmse, ssim=report.ssim, z_tv=report.z_tv)
    return report


def write_metrics_csv(path: Union[str, Path], rows: Iterable[MetricsRow]) -> Path:
    """Metrics table with the metric conventions echoed as a leading comment line."""
    rows = list(rows)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    conventions = rows[0].report.conventions if rows else MetricsReport.model_fields["conventions"].get_default(
        call_default_factory=True
    )
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write("# " + "; ".join(f"{k}={v}" for k, v in conventions.items()) + "\n")
        writer = csv.writer(f)
        writer.writerow(MetricsRow.CSV_FIELDS)
        for row in rows:
            writer.writerow(row.as_csv_row())
    return path


def read_metrics_csv(path: Union[str, Path]) -> list:
    with open(path, newline="", encoding="utf-8") as f:
        lines = [line for line in f if not line.startswith("#")]
    return list(csv.DictReader(lines))
