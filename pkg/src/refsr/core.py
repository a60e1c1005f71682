"""Volume data model, the RVOL binary format and case-level intensity normalization."""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"RVOL1\x00"
_HEADER = struct.Struct("<6s2sIIIffff")  # magic, reserved, dims z/y/x, spacing z/y/x, scale


class FormatError(ValueError):
    """Malformed RVOL file."""


class ValidationError(ValueError):
    """Data violates a model invariant."""


class DegenerateInputError(ValueError):
    """Input is structurally valid but numerically unusable (e.g. all-zero b0)."""


@dataclass(frozen=True)
class Volume:
    """A 3D scalar field indexed (z, y, x).

    `intensity_scale` is the factor that maps stored values back to raw units;
    it starts at 1.0 and accumulates normalization divisors.
    """

    data: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    intensity_scale: float = 1.0

    def __post_init__(self):
        # float32 and float64 are kept as-is (the file format stores float32;
        # in-memory pipelines may carry float64 for fitting accuracy)
        dtype = self.data.dtype if getattr(self.data, "dtype", None) in (np.float32, np.float64) else np.float64
        data = np.ascontiguousarray(self.data, dtype=dtype)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing_mm", tuple(float(s) for s in self.spacing_mm))
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValidationError(f"volume must be 3D with all dims >= 1, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValidationError("volume contains non-finite values")
        if len(self.spacing_mm) != 3 or any(s <= 0 for s in self.spacing_mm):
            raise ValidationError(f"spacing must be three positive reals, got {self.spacing_mm}")
        if not (self.intensity_scale > 0 and np.isfinite(self.intensity_scale)):
            raise ValidationError(f"intensity_scale must be positive, got {self.intensity_scale}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    def with_data(self, data: np.ndarray, spacing_mm=None, intensity_scale=None) -> "Volume":
        return Volume(
            data,
            spacing_mm if spacing_mm is not None else self.spacing_mm,
            intensity_scale if intensity_scale is not None else self.intensity_scale,
        )

    def allclose(self, other: "Volume", rtol=1e-6, atol=1e-8) -> bool:
        return self.dims == other.dims and np.allclose(self.data, other.data, rtol=rtol, atol=atol)


@dataclass(frozen=True)
class DwiImage:
    """One diffusion-weighted volume tagged with b-value and gradient direction."""

    volume: Volume
    b_value: float = 0.0
    direction: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "b_value", float(self.b_value))
        object.__setattr__(self, "direction", tuple(float(c) for c in self.direction))
        if self.b_value < 0:
            raise ValidationError(f"b_value must be non-negative, got {self.b_value}")
        if self.b_value > 0:
            norm = float(np.linalg.norm(self.direction))
            if abs(norm - 1.0) > 1e-9:
                raise ValidationError(f"direction must be unit length for b > 0, |g| = {norm}")


@dataclass
class DwiCase:
    """One heart: an unweighted b0 reference plus a set of diffusion-weighted volumes.

    All DWIs share dims and spacing.  The b0 is normally on the same grid, but a
    degraded case keeps its b0 at high resolution (the b0 is the guide image and is
    never downsampled), so the b0 grid is allowed to differ from the DWI grid.
    """

    case_id: str
    b0: DwiImage
    dwis: list[DwiImage]
    geometry: object | None = None  # PhantomGeometry for synthetic cases

    def __post_init__(self):
        if self.b0.b_value != 0.0:
            raise ValidationError("b0 image must have b_value 0")
        if not self.dwis:
            raise ValidationError("case must contain at least one DWI")
        dims = self.dwis[0].volume.dims
        spacing = self.dwis[0].volume.spacing_mm
        for d in self.dwis:
            if d.volume.dims != dims or d.volume.spacing_mm != spacing:
                raise ValidationError(
                    f"case {self.case_id}: DWIs disagree on grid "
                    f"({d.volume.dims} vs {dims})"
                )

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.dwis[0].volume.dims

    def dwis_at(self, b_value: float) -> list[DwiImage]:
        return [d for d in self.dwis if d.b_value == b_value]

    @property
    def b_values(self) -> list[float]:
        return sorted({d.b_value for d in self.dwis})


def write_volume(vol: Volume, path) -> None:
    """Write a Volume in the RVOL format.  Byte-deterministic for equal inputs."""
    path = Path(path)
    z, y, x = vol.dims
    sz, sy, sx = vol.spacing_mm
    header = _HEADER.pack(MAGIC, b"\x00\x00", z, y, x, sz, sy, sx, vol.intensity_scale)
    payload = np.ascontiguousarray(vol.data, dtype="<f4").tobytes()
    try:
        with open(path, "wb") as f:
            f.write(header)
            f.write(payload)
    except OSError as e:
        raise OSError(f"failed writing volume to {path}: {e}") from e


def read_volume(path) -> Volume:
    """Read an RVOL file; round-trips bit-exactly with write_volume."""
    path = Path(path)
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, _reserved, z, y, x, sz, sy, sx, scale = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic at byte 0: {magic!r}")
    n = z * y * x
    expected = _HEADER.size + 4 * n
    if len(raw) != expected:
        raise FormatError(
            f"{path}: payload length mismatch at byte {_HEADER.size} "
            f"(expected {expected} total bytes, got {len(raw)})"
        )
    data = np.frombuffer(raw, dtype="<f4", count=n, offset=_HEADER.size).reshape(z, y, x)
    if not np.all(np.isfinite(data)):
        raise ValidationError(f"{path}: payload contains non-finite values")
    return Volume(data.copy(), (sz, sy, sx), scale)


def write_sidecar(img: DwiImage, case_id: str, path) -> None:
    """Write the JSON sidecar carrying case id, b-value and direction (x, y, z)."""
    gx, gy, gz = img.direction
    payload = {"case_id": case_id, "b_value": img.b_value, "direction": [gx, gy, gz]}
    Path(path).write_text(json.dumps(payload, sort_keys=True) + "\n")


def read_sidecar(path) -> dict:
    return json.loads(Path(path).read_text())


def normalize_case(case: DwiCase, percentile: float = 99.5, per_slice: bool = False) -> DwiCase:
    """Scale a case so intensities land mostly within [0, 1].

    Every volume is divided by the `percentile`-th percentile of the b0, so the
    DWI/b0 ratios that tensor fitting relies on are untouched.  `per_slice=True`
    scales each z-slice by its own b0 percentile instead (provided for fidelity
    experiments; it breaks inter-slice comparability).
    """
    if not (0 < percentile <= 100):
        raise ValidationError(f"percentile must be in (0, 100], got {percentile}")
    b0_data = case.b0.volume.data
    if not np.any(b0_data > 0):
        raise DegenerateInputError(f"case {case.case_id}: b0 has no positive values")

    if per_slice:
        s = np.percentile(b0_data, percentile, axis=(1, 2), keepdims=True)
        s = np.where(s > 0, s, 1.0).astype(np.float64)

        def scale_volume(vol: Volume) -> Volume:
            if vol.dims[0] != b0_data.shape[0]:
                raise ValidationError("per-slice normalization needs matching slice counts")
            return vol.with_data(
                vol.data / s, intensity_scale=vol.intensity_scale * float(np.mean(s))
            )
    else:
        s = float(np.percentile(b0_data, percentile))
        if s <= 0:
            raise DegenerateInputError(f"case {case.case_id}: b0 percentile {percentile} is <= 0")

        def scale_volume(vol: Volume) -> Volume:
            return vol.with_data(vol.data / s, intensity_scale=vol.intensity_scale * s)

    def scale_image(img: DwiImage) -> DwiImage:
        return dataclasses.replace(img, volume=scale_volume(img.volume))

    return DwiCase(
        case_id=case.case_id,
        b0=scale_image(case.b0),
        dwis=[scale_image(d) for d in case.dwis],
        geometry=case.geometry,
    )
