"""Volumetric 4x degradation (slice averaging + bilinear undersampling) and the
bilinear baseline reconstruction."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .core import DwiCase, DwiImage, Volume


class ShapeError(ValueError):
    """Dims incompatible with the requested resampling factor."""


@dataclass(frozen=True)
class DegradeConfig:
    through_plane_factor: int = 4
    in_plane_factor: int = 4
    slice_mode: str = "block"      # "block" | "sliding"
    boundary: str = "truncate"     # "truncate" | "reflect" (sliding mode only)

    def __post_init__(self):
        if self.slice_mode not in ("block", "sliding"):
            raise ValueError(f"unknown slice_mode {self.slice_mode!r}")
        if self.boundary not in ("truncate", "reflect"):
            raise ValueError(f"unknown boundary {self.boundary!r}")
        if self.through_plane_factor < 1 or self.in_plane_factor < 1:
            raise ValueError("factors must be >= 1")


@dataclass
class DegradedCase:
    """Paired data for one case: HR ground truth, LR, and the bilinear baseline."""

    hr: DwiCase
    lr: DwiCase
    lr_on_hr_grid: DwiCase


def downsample_through_plane(vol: Volume, cfg: DegradeConfig) -> Volume:
    """Average groups of consecutive slices and decimate by the through-plane factor."""
    f = cfg.through_plane_factor
    z, y, x = vol.dims
    data = vol.data.astype(np.float64)
    if cfg.slice_mode == "block":
        if z % f != 0:
            raise ShapeError(f"z = {z} not divisible by through-plane factor {f}")
        out = data.reshape(z // f, f, y, x).mean(axis=1)
    else:
        # each slice averaged with its (f - 1) following neighbors, then decimated
        if cfg.boundary == "reflect":
            tail = data[z - 2 : z - f - 1 if z - f - 1 >= 0 else None : -1]
            pad = np.concatenate([data, tail], axis=0)
        else:
            pad = np.concatenate([data, np.repeat(data[-1:], f - 1, axis=0)], axis=0)
        csum = np.cumsum(np.concatenate([np.zeros((1, y, x)), pad], axis=0), axis=0)
        smoothed = (csum[f:] - csum[:-f]) / f  # mean of slices k .. k+f-1
        out = smoothed[::f]
    sz, sy, sx = vol.spacing_mm
    return Volume(out, (sz * f, sy, sx), vol.intensity_scale)


def _linear_sample_1d(data: np.ndarray, coords: np.ndarray, axis: int) -> np.ndarray:
    """Linear interpolation along one axis at continuous coordinates, edge-clamped."""
    n = data.shape[axis]
    c = np.clip(coords, 0.0, n - 1)
    lo = np.floor(c).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    w = c - lo
    lo_v = np.take(data, lo, axis=axis)
    hi_v = np.take(data, hi, axis=axis)
    shape = [1] * data.ndim
    shape[axis] = len(coords)
    w = w.reshape(shape)
    return lo_v * (1 - w) + hi_v * w


def _down_coords(n_out: int, factor: int) -> np.ndarray:
    # align-corners-false: LR pixel center j sits at HR coordinate (j+0.5)*f - 0.5
    return (np.arange(n_out) + 0.5) * factor - 0.5


def _up_coords(n_out: int, factor: int) -> np.ndarray:
    # inverse mapping of the above: HR pixel i samples LR coordinate (i+0.5)/f - 0.5
    return (np.arange(n_out) + 0.5) / factor - 0.5


def downsample_in_plane(vol: Volume, factor: int) -> Volume:
    """Bilinear undersampling of each slice under the align-corners-false convention."""
    z, y, x = vol.dims
    if y % factor or x % factor:
        raise ShapeError(f"in-plane dims {y}x{x} not divisible by factor {factor}")
    if factor == 1:
        return vol
    data = vol.data.astype(np.float64)
    data = _linear_sample_1d(data, _down_coords(y // factor, factor), axis=1)
    data = _linear_sample_1d(data, _down_coords(x // factor, factor), axis=2)
    sz, sy, sx = vol.spacing_mm
    return Volume(data, (sz, sy * factor, sx * factor), vol.intensity_scale)


def upsample_to_grid(vol: Volume, target_dims: tuple[int, int, int]) -> Volume:
    """Separable linear interpolation back to the HR grid (the bilinear baseline)."""
    factors = []
    for n_src, n_tgt in zip(vol.dims, target_dims):
        if n_tgt % n_src:
            raise ShapeError(f"target dims {target_dims} not integer multiples of {vol.dims}")
        factors.append(n_tgt // n_src)
    data = vol.data.astype(np.float64)
    for axis, (f, n_tgt) in enumerate(zip(factors, target_dims)):
        if f > 1:
            data = _linear_sample_1d(data, _up_coords(n_tgt, f), axis=axis)
    spacing = tuple(s / f for s, f in zip(vol.spacing_mm, factors))
    return Volume(data, spacing, vol.intensity_scale)


def degrade_volume(vol: Volume, cfg: DegradeConfig) -> tuple[Volume, Volume]:
    """Returns (lr, lr_on_hr_grid) for one volume."""
    lr = downsample_in_plane(downsample_through_plane(vol, cfg), cfg.in_plane_factor)
    return lr, upsample_to_grid(lr, vol.dims)


def degrade_case(case: DwiCase, cfg: DegradeConfig = DegradeConfig()) -> DegradedCase:
    """Degrade every DWI of a case; the b0 reference stays at HR (it is the guide)."""
    lr_dwis, baseline_dwis = [], []
    for d in case.dwis:
        lr, up = degrade_volume(d.volume, cfg)
        lr_dwis.append(dataclasses.replace(d, volume=lr))
        baseline_dwis.append(dataclasses.replace(d, volume=up))
    lr_case = DwiCase(case.case_id, case.b0, lr_dwis, geometry=case.geometry)
    baseline_case = DwiCase(case.case_id, case.b0, baseline_dwis, geometry=case.geometry)
    return DegradedCase(hr=case, lr=lr_case, lr_on_hr_grid=baseline_case)
