"""Synthetic left-ventricle DT-CMR phantom with a known ground-truth tensor field."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .core import DwiCase, DwiImage, ValidationError, Volume, read_volume, write_volume
from .dtfit import COMPONENT_NAMES, TensorField, local_frame


class GeometryError(ValueError):
    """Annulus does not fit the volume bounds."""


class ConfigError(ValueError):
    """Invalid phantom configuration."""


@dataclass
class PhantomGeometry:
    """Annular left-ventricle cross-section extruded along +z.

    center_xy is (x, y) in voxel coordinates; radii are per-slice, in voxels.
    """

    center_xy: tuple[float, float]
    inner_radius: np.ndarray
    outer_radius: np.ndarray
    long_axis: tuple[float, float, float] = (0.0, 0.0, 1.0)

    def __post_init__(self):
        self.inner_radius = np.atleast_1d(np.asarray(self.inner_radius, dtype=np.float64))
        self.outer_radius = np.atleast_1d(np.asarray(self.outer_radius, dtype=np.float64))
        if self.inner_radius.shape != self.outer_radius.shape:
            raise GeometryError("inner and outer radius arrays must match per slice")
        if np.any(self.inner_radius <= 0) or np.any(self.outer_radius <= self.inner_radius):
            raise GeometryError("need 0 < inner_radius < outer_radius on every slice")

    def validate_bounds(self, dims: tuple[int, int, int]) -> None:
        z, y, x = dims
        if len(self.inner_radius) != z:
            raise GeometryError(f"radius arrays have {len(self.inner_radius)} slices, volume has {z}")
        cx, cy = self.center_xy
        rmax = float(self.outer_radius.max())
        if cx - rmax < 0 or cx + rmax > x - 1 or cy - rmax < 0 or cy + rmax > y - 1:
            raise GeometryError(
                f"annulus (center {self.center_xy}, outer radius {rmax}) exceeds {y}x{x} bounds"
            )

    def to_dict(self) -> dict:
        return {
            "center_xy": list(self.center_xy),
            "inner_radius": self.inner_radius.tolist(),
            "outer_radius": self.outer_radius.tolist(),
            "long_axis": list(self.long_axis),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomGeometry":
        return cls(
            tuple(d["center_xy"]),
            np.asarray(d["inner_radius"]),
            np.asarray(d["outer_radius"]),
            tuple(d.get("long_axis", (0.0, 0.0, 1.0))),
        )

    def wall_mask(self, dims: tuple[int, int, int]) -> np.ndarray:
        """Strict annulus membership per voxel."""
        r = _radius_map(self, dims)
        inner = self.inner_radius[:, None, None]
        outer = self.outer_radius[:, None, None]
        return (r >= inner) & (r <= outer)


@dataclass
class PhantomConfig:
    dims: tuple[int, int, int] = (32, 64, 64)
    spacing_mm: tuple[float, float, float] = (1.5, 1.5, 1.5)
    ha_endo_deg: float = 60.0
    ha_epi_deg: float = -60.0
    eigenvalues_mm2_per_s: tuple[float, float, float] = (1.5e-3, 0.9e-3, 0.6e-3)
    s0_mean: float = 1.0
    noise_sigma: float = 0.0
    n_directions: int = 12
    b_values: tuple[float, ...] = (500.0, 1000.0)
    seed: int = 0
    # shaping knobs beyond the core physics
    texture_amplitude: float = 0.3
    texture_smoothness_vox: float = 1.5
    edge_softness_vox: float = 0.5

    def validate(self) -> None:
        l1, l2, l3 = self.eigenvalues_mm2_per_s
        if not (l1 >= l2 >= l3 > 0):
            raise ConfigError(f"eigenvalues must satisfy l1 >= l2 >= l3 > 0, got {self.eigenvalues_mm2_per_s}")
        if self.n_directions < 6:
            raise ConfigError(f"tensor fitting needs at least 6 directions, got {self.n_directions}")
        if self.s0_mean <= 0 or self.noise_sigma < 0:
            raise ConfigError("s0_mean must be positive and noise_sigma non-negative")
        if any(b < 0 for b in self.b_values) or not self.b_values:
            raise ConfigError(f"b_values must be non-empty and non-negative, got {self.b_values}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("dims", "spacing_mm", "eigenvalues_mm2_per_s", "b_values"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        d = dict(d)
        for k in ("dims", "spacing_mm", "eigenvalues_mm2_per_s", "b_values"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.uint64(seed), counter=[0, 0, 0, np.uint64(stream)]))


def make_direction_set(n: int, seed: int = 0, rotate: bool = True) -> np.ndarray:
    """Spherical-Fibonacci set of n unit gradient directions.

    The lattice is deterministic in n; the seed only picks a global rotation
    that decorrelates the set from the volume axes.
    """
    if n < 6:
        raise ConfigError(f"need at least 6 directions, got {n}")
    i = np.arange(n, dtype=np.float64)
    golden = (1 + np.sqrt(5.0)) / 2
    z = 1 - (2 * i + 1) / n
    phi = 2 * np.pi * i / golden
    r = np.sqrt(np.maximum(0.0, 1 - z * z))
    dirs = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    if rotate:
        # uniform random rotation from a seeded QR decomposition
        m = _rng(seed, 1).standard_normal((3, 3))
        q, rr = np.linalg.qr(m)
        q *= np.sign(np.diag(rr))
        if np.linalg.det(q) < 0:
            q[:, 0] = -q[:, 0]
        dirs = dirs @ q.T
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def _radius_map(geom: PhantomGeometry, dims) -> np.ndarray:
    z, y, x = dims
    cx, cy = geom.center_xy
    yy, xx = np.meshgrid(np.arange(y, dtype=np.float64), np.arange(x, dtype=np.float64), indexing="ij")
    r2d = np.hypot(xx - cx, yy - cy)
    return np.broadcast_to(r2d, (z, y, x)).copy()


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def make_geometry(cfg: PhantomConfig) -> PhantomGeometry:
    """Seed-jittered annulus geometry that always fits the volume."""
    z, y, x = cfg.dims
    rng = _rng(cfg.seed, 2)
    half = min(y, x) / 2.0
    outer = half * rng.uniform(0.62, 0.74)
    inner = outer * rng.uniform(0.42, 0.55)
    cx = (x - 1) / 2.0 + rng.uniform(-0.05, 0.05) * x
    cy = (y - 1) / 2.0 + rng.uniform(-0.05, 0.05) * y
    # gentle taper along z, keeping well inside bounds
    taper = 1.0 - 0.1 * np.linspace(0.0, 1.0, z)
    geom = PhantomGeometry((cx, cy), inner * taper, outer * taper)
    geom.validate_bounds(cfg.dims)
    return geom


def _ground_truth_tensors(cfg: PhantomConfig, geom: PhantomGeometry) -> TensorField:
    """Helix-angle-ramped tensor field on the annulus.

    The primary eigenvector at transmural depth d (0 = endocardium) is
    cos(HA) c_hat + sin(HA) z_hat with HA linear in d; the secondary is radial.
    """
    dims = cfg.dims
    r_hat, c_hat, z_hat, r = local_frame(geom, dims)
    inner = geom.inner_radius[:, None, None]
    outer = geom.outer_radius[:, None, None]
    soft = cfg.edge_softness_vox
    if soft > 0:
        weight = _sigmoid((r - inner) / soft) * _sigmoid((outer - r) / soft)
        mask = weight > 0.05
    else:
        mask = (r >= inner) & (r <= outer)

    d = np.clip((r - inner) / (outer - inner), 0.0, 1.0)
    ha_deg = cfg.ha_endo_deg + (cfg.ha_epi_deg - cfg.ha_endo_deg) * d
    ha_rad = np.radians(ha_deg)

    e1 = np.cos(ha_rad)[..., None] * c_hat + np.sin(ha_rad)[..., None] * z_hat
    e2 = r_hat
    e3 = np.cross(e1, e2)

    l1, l2, l3 = cfg.eigenvalues_mm2_per_s
    m = (
        l1 * e1[..., :, None] * e1[..., None, :]
        + l2 * e2[..., :, None] * e2[..., None, :]
        + l3 * e3[..., :, None] * e3[..., None, :]
    )
    m[~mask] = 0.0
    return TensorField.from_matrices(m, mask, cfg.spacing_mm)


def _s0_volume(cfg: PhantomConfig, geom: PhantomGeometry) -> Volume:
    """Smoothly textured S0, soft-edged annulus, near-zero in the suspension medium."""
    dims = cfg.dims
    r = _radius_map(geom, dims)
    inner = geom.inner_radius[:, None, None]
    outer = geom.outer_radius[:, None, None]
    soft = cfg.edge_softness_vox
    if soft > 0:
        weight = _sigmoid((r - inner) / soft) * _sigmoid((outer - r) / soft)
        weight = np.where(weight < 0.01, 0.0, weight)
    else:
        weight = ((r >= inner) & (r <= outer)).astype(np.float64)

    white = _rng(cfg.seed, 3).standard_normal(dims)
    smooth = gaussian_filter(white, sigma=cfg.texture_smoothness_vox, mode="wrap")
    peak = np.max(np.abs(smooth))
    texture = 1.0 + cfg.texture_amplitude * (smooth / peak if peak > 0 else smooth)
    return Volume(cfg.s0_mean * texture * weight, cfg.spacing_mm)


def synthesize_dwi(tensors: TensorField, s0: Volume, b: float, g) -> DwiImage:
    """Monoexponential diffusion signal S = S0 * exp(-b g^T D g); zero off-tissue."""
    if b < 0:
        raise ConfigError(f"b must be non-negative, got {b}")
    if tensors.dims != s0.dims:
        raise ValidationError(f"tensor field {tensors.dims} and S0 {s0.dims} grids differ")
    if b == 0:
        return DwiImage(s0, 0.0, (0.0, 0.0, 0.0))
    g = np.asarray(g, dtype=np.float64)
    g = g / np.linalg.norm(g)
    xx, yy, zz, xy, xz, yz = tensors.components
    q = (
        g[0] * g[0] * xx + g[1] * g[1] * yy + g[2] * g[2] * zz
        + 2 * (g[0] * g[1] * xy + g[0] * g[2] * xz + g[1] * g[2] * yz)
    )
    data = s0.data.astype(np.float64) * np.exp(-b * q)
    data[~tensors.mask] = 0.0
    return DwiImage(Volume(data, s0.spacing_mm, s0.intensity_scale), b, tuple(g))


def add_rician_noise(img: DwiImage, sigma: float, seed: int) -> DwiImage:
    """Magnitude-MRI noise: sqrt((v + n1)^2 + n2^2), n1, n2 ~ N(0, sigma).

    Counter-based generator keyed on the seed, so output is deterministic and
    independent of any surrounding parallelism.
    """
    if sigma < 0:
        raise ConfigError(f"sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return img
    noise = _rng(seed, 4).standard_normal((2,) + img.volume.dims) * sigma
    v = img.volume.data.astype(np.float64)
    noisy = np.hypot(v + noise[0], noise[1])
    return dataclasses.replace(img, volume=img.volume.with_data(noisy))


def make_phantom_case(cfg: PhantomConfig, case_id: str = "case") -> tuple[DwiCase, TensorField]:
    """Noiseless DWI case plus its ground-truth tensor field.

    Pure function of the config: identical config gives a bit-identical case.
    Noise is applied separately (add_rician_noise / make_noisy_case).
    """
    cfg.validate()
    geom = make_geometry(cfg)
    tensors = _ground_truth_tensors(cfg, geom)
    s0 = _s0_volume(cfg, geom)
    dirs = make_direction_set(cfg.n_directions, cfg.seed)
    b0 = DwiImage(s0, 0.0, (0.0, 0.0, 0.0))
    dwis = [
        synthesize_dwi(tensors, s0, b, g)
        for b in cfg.b_values
        for g in dirs
    ]
    return DwiCase(case_id, b0, dwis, geometry=geom), tensors


def make_noisy_case(cfg: PhantomConfig, case_id: str = "case") -> tuple[DwiCase, TensorField]:
    """Phantom case with Rician noise on every image (including the b0)."""
    case, tensors = make_phantom_case(cfg, case_id)
    if cfg.noise_sigma == 0:
        return case, tensors
    sigma = cfg.noise_sigma * cfg.s0_mean
    b0 = add_rician_noise(case.b0, sigma, cfg.seed * 1000003)
    dwis = [
        add_rician_noise(d, sigma, cfg.seed * 1000003 + 1 + i)
        for i, d in enumerate(case.dwis)
    ]
    return DwiCase(case_id, b0, dwis, geometry=case.geometry), tensors


# --- case directory layout -------------------------------------------------

def save_case(case: DwiCase, out_dir, tensors: TensorField | None = None,
              cfg: PhantomConfig | None = None) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_volume(case.b0.volume, out_dir / "b0.rvol")
    meta = {"case_id": case.case_id, "dwis": []}
    for i, d in enumerate(case.dwis):
        name = f"dwi_{i:03d}"
        write_volume(d.volume, out_dir / f"{name}.rvol")
        meta["dwis"].append({"file": f"{name}.rvol", "b_value": d.b_value, "direction": list(d.direction)})
    if case.geometry is not None:
        meta["geometry"] = case.geometry.to_dict()
    if cfg is not None:
        meta["config"] = cfg.to_dict()
    if tensors is not None:
        for comp, name in enumerate(COMPONENT_NAMES):
            write_volume(Volume(tensors.components[comp], tensors.spacing_mm), out_dir / f"gt_{name}.rvol")
        write_volume(Volume(tensors.mask.astype(np.float32), tensors.spacing_mm), out_dir / "gt_mask.rvol")
    (out_dir / "case.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")


def load_case(case_dir) -> tuple[DwiCase, TensorField | None]:
    case_dir = Path(case_dir)
    meta = json.loads((case_dir / "case.json").read_text())
    b0 = DwiImage(read_volume(case_dir / "b0.rvol"), 0.0, (0.0, 0.0, 0.0))
    dwis = [
        DwiImage(read_volume(case_dir / d["file"]), d["b_value"], tuple(d["direction"]))
        for d in meta["dwis"]
    ]
    geom = PhantomGeometry.from_dict(meta["geometry"]) if "geometry" in meta else None
    case = DwiCase(meta["case_id"], b0, dwis, geometry=geom)
    tensors = None
    if (case_dir / "gt_mask.rvol").exists():
        comps = np.stack([read_volume(case_dir / f"gt_{n}.rvol").data for n in COMPONENT_NAMES])
        mask = read_volume(case_dir / "gt_mask.rvol").data > 0.5
        tensors = TensorField(comps, mask, b0.volume.spacing_mm)
    return case, tensors
