"""Per-slice PSNR/SSIM evaluation with mean/std aggregation per method and b-value."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

from .core import DwiCase


class ShapeError(ValueError):
    pass


def psnr(pred: np.ndarray, gt: np.ndarray, data_range: float = 1.0) -> float:
    """10 log10(range^2 / MSE) in dB; +inf when the slices are identical."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if data_range <= 0:
        raise ValueError(f"data_range must be positive, got {data_range}")
    mse = float(np.mean((pred - gt) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    """Normalized 1D Gaussian taps for the SSIM window."""
    half = (size - 1) / 2.0
    x = np.arange(size, dtype=np.float64) - half
    w = np.exp(-(x**2) / (2 * sigma**2))
    return w / w.sum()


def _valid_filter(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Separable Gaussian correlation restricted to fully-overlapping windows."""
    k = len(taps) // 2
    out = correlate1d(img, taps, axis=0, mode="constant")
    out = correlate1d(out, taps, axis=1, mode="constant")
    return out[k:-k, k:-k]


def ssim(pred: np.ndarray, gt: np.ndarray, data_range: float = 1.0,
         k1: float = 0.01, k2: float = 0.03, window: int = 11, sigma: float = 1.5) -> float:
    """Gaussian-weighted SSIM averaged over the valid (full-overlap) region."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if min(pred.shape) < window:
        raise ShapeError(f"slice {pred.shape} smaller than the {window}x{window} window")
    taps = gaussian_window(window, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu1 = _valid_filter(pred, taps)
    mu2 = _valid_filter(gt, taps)
    s11 = _valid_filter(pred * pred, taps) - mu1 * mu1
    s22 = _valid_filter(gt * gt, taps) - mu2 * mu2
    s12 = _valid_filter(pred * gt, taps) - mu1 * mu2
    num = (2 * mu1 * mu2 + c1) * (2 * s12 + c2)
    den = (mu1**2 + mu2**2 + c1) * (s11 + s22 + c2)
    return float(np.mean(num / den))


def ssim_reference(pred: np.ndarray, gt: np.ndarray, data_range: float = 1.0,
                   k1: float = 0.01, k2: float = 0.03, window: int = 11,
                   sigma: float = 1.5) -> float:
    """Brute-force per-window SSIM oracle (explicit loops, no separability)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    taps = gaussian_window(window, sigma)
    w2d = np.outer(taps, taps)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    h, w = pred.shape
    vals = []
    for i in range(h - window + 1):
        for j in range(w - window + 1):
            a = pred[i : i + window, j : j + window]
            b = gt[i : i + window, j : j + window]
            mu1 = np.sum(w2d * a)
            mu2 = np.sum(w2d * b)
            s11 = np.sum(w2d * a * a) - mu1 * mu1
            s22 = np.sum(w2d * b * b) - mu2 * mu2
            s12 = np.sum(w2d * a * b) - mu1 * mu2
            vals.append(
                ((2 * mu1 * mu2 + c1) * (2 * s12 + c2))
                / ((mu1**2 + mu2**2 + c1) * (s11 + s22 + c2))
            )
    return float(np.mean(vals))


@dataclass(frozen=True)
class SliceMetrics:
    case_id: str
    slice_index: int
    dwi_index: int
    b_value: float
    method: str
    psnr_db: float
    ssim: float


@dataclass
class MetricsReport:
    rows: list

    CSV_HEADER = "case_id,slice_index,dwi_index,b_value,method,psnr_db,ssim"

    def aggregate(self) -> dict:
        """Mean and population std of PSNR/SSIM per (method, b_value)."""
        groups: dict[tuple[str, float], list[SliceMetrics]] = {}
        for r in self.rows:
            groups.setdefault((r.method, r.b_value), []).append(r)
        out = {}
        for (method, b), rows in sorted(groups.items()):
            psnrs = np.array([r.psnr_db for r in rows])
            finite = np.isfinite(psnrs)
            if not np.all(finite):
                warnings.warn(
                    f"{method} b={b}: excluding {int((~finite).sum())} infinite-PSNR slices"
                )
            psnrs = psnrs[finite]
            ssims = np.array([r.ssim for r in rows])
            out[(method, b)] = {
                "n": len(rows),
                "psnr_mean": float(psnrs.mean()) if psnrs.size else math.inf,
                "psnr_std": float(psnrs.std()) if psnrs.size else 0.0,
                "ssim_mean": float(ssims.mean()),
                "ssim_std": float(ssims.std()),
            }
        return out

    def to_csv(self, path) -> None:
        lines = [self.CSV_HEADER]
        for r in self.rows:
            lines.append(
                f"{r.case_id},{r.slice_index},{r.dwi_index},{r.b_value:g},"
                f"{r.method},{r.psnr_db:.6f},{r.ssim:.8f}"
            )
        Path(path).write_text("\n".join(lines) + "\n")

    def summary_dict(self) -> dict:
        return {
            f"{method}|b={b:g}": stats for (method, b), stats in self.aggregate().items()
        }

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary_dict(), sort_keys=True, indent=1) + "\n")


def score_case(pred_case: DwiCase, hr_case: DwiCase, method: str,
               data_range: float = 1.0, mask=None) -> list[SliceMetrics]:
    """Per-slice metrics for every DWI of a case against the HR ground truth.

    `mask` optionally restricts scoring to a boolean (z, y, x) region (off by
    default; whole-slice metrics are the reported protocol).
    """
    if pred_case.case_id != hr_case.case_id:
        raise ValueError(f"case mismatch: {pred_case.case_id} vs {hr_case.case_id}")
    rows = []
    for k, (p, h) in enumerate(zip(pred_case.dwis, hr_case.dwis)):
        if p.b_value != h.b_value or p.direction != h.direction:
            raise ValueError(f"case {hr_case.case_id}: DWI ordering mismatch at index {k}")
        for z in range(h.volume.dims[0]):
            ps = p.volume.data[z].astype(np.float64)
            hs = h.volume.data[z].astype(np.float64)
            if mask is not None:
                m = mask[z]
                ps = np.where(m, ps, 0.0)
                hs = np.where(m, hs, 0.0)
            rows.append(
                SliceMetrics(hr_case.case_id, z, k, h.b_value, method,
                             psnr(ps, hs, data_range), ssim(ps, hs, data_range))
            )
    return rows


def evaluate(method_cases: dict, hr_cases: dict, data_range: float = 1.0) -> MetricsReport:
    """Score every method against HR ground truth.

    method_cases: {method_name: {case_id: DwiCase}}; hr_cases: {case_id: DwiCase}.
    """
    rows = []
    for method in sorted(method_cases):
        cases = method_cases[method]
        for case_id in sorted(cases):
            if case_id not in hr_cases:
                raise ValueError(f"method {method}: no HR ground truth for case {case_id}")
            rows.extend(score_case(cases[case_id], hr_cases[case_id], method, data_range))
    return MetricsReport(rows)
