"""Diffusion tensor fitting and the MD / FA / HA parametric maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DwiCase, ValidationError, Volume

# index order of the unique tensor components in the stacked representation
COMPONENT_NAMES = ("Dxx", "Dyy", "Dzz", "Dxy", "Dxz", "Dyz")


class FitError(ValueError):
    """Tensor fit cannot proceed (rank-deficient design, too few directions)."""


@dataclass
class TensorField:
    """Per-voxel symmetric 3x3 diffusion tensor, stored as 6 component volumes.

    components: array (6, z, y, x) ordered Dxx, Dyy, Dzz, Dxy, Dxz, Dyz (mm^2/s).
    mask: boolean (z, y, x); True where the tensor is valid.
    """

    components: np.ndarray
    mask: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.components = np.asarray(self.components, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.components.ndim != 4 or self.components.shape[0] != 6:
            raise ValidationError(f"components must be (6, z, y, x), got {self.components.shape}")
        if self.mask.shape != self.components.shape[1:]:
            raise ValidationError("mask shape must match the component volumes")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.components.shape[1:])

    def as_matrices(self) -> np.ndarray:
        """Dense (z, y, x, 3, 3) symmetric matrices."""
        xx, yy, zz, xy, xz, yz = self.components
        m = np.empty(self.dims + (3, 3), dtype=np.float64)
        m[..., 0, 0] = xx
        m[..., 1, 1] = yy
        m[..., 2, 2] = zz
        m[..., 0, 1] = m[..., 1, 0] = xy
        m[..., 0, 2] = m[..., 2, 0] = xz
        m[..., 1, 2] = m[..., 2, 1] = yz
        return m

    @classmethod
    def from_matrices(cls, m: np.ndarray, mask: np.ndarray, spacing_mm=(1.0, 1.0, 1.0)):
        comps = np.stack(
            [m[..., 0, 0], m[..., 1, 1], m[..., 2, 2], m[..., 0, 1], m[..., 0, 2], m[..., 1, 2]]
        )
        return cls(comps, mask, spacing_mm)

    def eigensystem(self) -> tuple[np.ndarray, np.ndarray]:
        """Eigenvalues sorted descending and matching eigenvectors (columns)."""
        w, v = np.linalg.eigh(self.as_matrices())
        return w[..., ::-1], v[..., ::-1]


def design_matrix(b_values: np.ndarray, directions: np.ndarray) -> np.ndarray:
    """Rows of -b * [gx^2, gy^2, gz^2, 2 gx gy, 2 gx gz, 2 gy gz]."""
    g = np.asarray(directions, dtype=np.float64)
    b = np.asarray(b_values, dtype=np.float64)
    gx, gy, gz = g[:, 0], g[:, 1], g[:, 2]
    cols = np.stack([gx * gx, gy * gy, gz * gz, 2 * gx * gy, 2 * gx * gz, 2 * gy * gz], axis=1)
    return -b[:, None] * cols


def fit_tensor(case: DwiCase, mask: np.ndarray | None = None) -> TensorField:
    """Log-linear OLS tensor fit of ln(S_i/S0) = -b_i g_i^T D g_i per voxel.

    Voxels where any S_i <= 0 or S0 <= 0 are excluded from the output mask.
    """
    dwis = [d for d in case.dwis if d.b_value > 0]
    if len(dwis) < 6:
        raise FitError(f"need at least 6 DWIs with b > 0, got {len(dwis)}")
    b = np.array([d.b_value for d in dwis])
    g = np.array([d.direction for d in dwis])
    A = design_matrix(b, g)
    if np.linalg.matrix_rank(A) < 6:
        raise FitError(f"rank-deficient design matrix for direction set {g.tolist()}")

    s0 = case.b0.volume.data.astype(np.float64)
    signals = np.stack([d.volume.data.astype(np.float64) for d in dwis])  # (n, z, y, x)
    dims = s0.shape

    valid = (s0 > 0) & np.all(signals > 0, axis=0)
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)

    comps = np.zeros((6,) + dims, dtype=np.float64)
    if np.any(valid):
        y = np.log(signals[:, valid] / s0[valid])  # (n, nvox)
        sol, *_ = np.linalg.lstsq(A, y, rcond=None)  # (6, nvox)
        comps[:, valid] = sol
    return TensorField(comps, valid, case.dwis[0].volume.spacing_mm)


def md(field: TensorField) -> Volume:
    """Mean diffusivity trace(D)/3; zero outside the mask."""
    out = (field.components[0] + field.components[1] + field.components[2]) / 3.0
    return Volume(np.where(field.mask, out, 0.0), field.spacing_mm)


def fa(field: TensorField) -> Volume:
    """Fractional anisotropy in [0, 1]; negative eigenvalues are clamped to 0 first."""
    w, _ = field.eigensystem()
    w = np.clip(w, 0.0, None)
    # pairwise form of FA: exact zero for identical eigenvalues, unlike the
    # mean-subtraction form which picks up rounding from (3a)/3 != a
    l1, l2, l3 = w[..., 0], w[..., 1], w[..., 2]
    num = np.sqrt(0.5 * ((l1 - l2) ** 2 + (l2 - l3) ** 2 + (l3 - l1) ** 2))
    den = np.sqrt(np.sum(w**2, axis=-1))
    out = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    out = np.clip(out, 0.0, 1.0)
    return Volume(np.where(field.mask, out, 0.0), field.spacing_mm)


def local_frame(geom, dims: tuple[int, int, int]):
    """Radial, circumferential and long-axis unit vectors per voxel.

    Returns (r_hat, c_hat, z_hat) each (z, y, x, 3), plus the in-plane radius.
    Vector components are ordered (x, y, z).  The long axis is +z through
    geom.center_xy; voxels on the axis get radius 0 and undefined frames.
    """
    z, y, x = dims
    cy, cx = geom.center_xy[1], geom.center_xy[0]
    yy, xx = np.meshgrid(np.arange(y, dtype=np.float64), np.arange(x, dtype=np.float64), indexing="ij")
    dx = xx - cx
    dy = yy - cy
    r = np.sqrt(dx * dx + dy * dy)
    with np.errstate(invalid="ignore", divide="ignore"):
        ux = np.where(r > 0, dx / r, 0.0)
        uy = np.where(r > 0, dy / r, 0.0)
    r_hat = np.zeros((z, y, x, 3))
    c_hat = np.zeros((z, y, x, 3))
    z_hat = np.zeros((z, y, x, 3))
    r_hat[..., 0] = ux
    r_hat[..., 1] = uy
    # circumferential = z_hat x r_hat (counter-clockwise in the x-y plane)
    c_hat[..., 0] = -uy
    c_hat[..., 1] = ux
    z_hat[..., 2] = 1.0
    return r_hat, c_hat, z_hat, np.broadcast_to(r, (z, y, x)).copy()


def ha(field: TensorField, geom) -> Volume:
    """Helix angle of the primary eigenvector, degrees in (-90, 90].

    The eigenvector is projected onto the circumferential-longitudinal plane;
    its sign is fixed so the circumferential component is non-negative, and
    positive angles tilt toward +z.  On-axis voxels (r = 0) are masked out.
    """
    w, v = field.eigensystem()
    e1 = v[..., 0]  # (z, y, x, 3) ordered (x, y, z)
    _, c_hat, z_hat, r = local_frame(geom, field.dims)
    pc = np.sum(e1 * c_hat, axis=-1)
    pz = np.sum(e1 * z_hat, axis=-1)
    flip = pc < 0
    pc = np.where(flip, -pc, pc)
    pz = np.where(flip, -pz, pz)
    angle = np.degrees(np.arctan2(pz, pc))
    # pc >= 0 bounds atan2 to [-90, 90]; fold -90 onto +90
    angle = np.where(angle <= -90.0, angle + 180.0, angle)
    valid = field.mask & (r > 0)
    return Volume(np.where(valid, angle, 0.0), field.spacing_mm)


def circular_abs_diff_deg(a: np.ndarray, b: np.ndarray, period: float = 180.0) -> np.ndarray:
    """Absolute angular difference on a circle of the given period."""
    d = np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) % period
    return np.minimum(d, period - d)


def compare_maps(maps_a: dict, maps_b: dict, mask: np.ndarray) -> dict:
    """Masked MAE and 95th-percentile absolute error for MD/FA/HA map pairs.

    maps_* are dicts with keys among {"md", "fa", "ha"} holding Volumes on the
    same grid.  HA differences are computed on the circle (180 degree wrap).
    """
    mask = np.asarray(mask, dtype=bool)
    out = {}
    for name in maps_a:
        a = maps_a[name].data.astype(np.float64)[mask]
        b = maps_b[name].data.astype(np.float64)[mask]
        err = circular_abs_diff_deg(a, b) if name == "ha" else np.abs(a - b)
        out[name] = {
            "mae": float(err.mean()) if err.size else 0.0,
            "p95": float(np.percentile(err, 95)) if err.size else 0.0,
        }
    return out
