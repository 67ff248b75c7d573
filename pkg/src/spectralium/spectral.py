"""Wavelength-sampled spectra, complex refractive indices and Fresnel optics.

All spectral quantities in one computation live on a single shared
wavelength grid; the default covers the visible band 380-780 nm at 5 nm
(81 samples). Fresnel reflectance is evaluated from the exact
complex-amplitude equations, so dielectrics (k = 0) and conductors
(k > 0) go through the same code path.
"""

from __future__ import annotations

import cmath
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "WavelengthGrid",
    "Spectrum",
    "ComplexIOR",
    "TransmittanceMap",
    "SpdParseError",
    "SpdFormatError",
    "UnsupportedTransmissionError",
    "default_grid",
    "load_spd",
    "load_ior",
    "load_transmittance_map",
    "read_columns",
    "fresnel_reflectance",
    "fresnel_transmittance",
    "fresnel_reflectance_spectrum",
    "sample_transmittance_map",
]


class SpdParseError(ValueError):
    """A line of a spectral data file could not be parsed."""

    def __init__(self, path, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


class SpdFormatError(ValueError):
    """A spectral data file violates the format contract (ordering, emptiness)."""


class UnsupportedTransmissionError(ValueError):
    """Fresnel transmission requested through an absorbing medium."""


@dataclass(frozen=True)
class WavelengthGrid:
    """Uniform wavelength sampling: start_nm + i * step_nm for i in [0, count)."""

    start_nm: float
    step_nm: float
    count: int

    def __post_init__(self):
        if self.step_nm <= 0.0:
            raise ValueError(f"step_nm must be positive, got {self.step_nm}")
        if self.count < 2:
            raise ValueError(f"count must be >= 2, got {self.count}")

    @property
    def wavelengths(self) -> np.ndarray:
        return self.start_nm + self.step_nm * np.arange(self.count)

    def index_of(self, wavelength_nm: float) -> int:
        """Index of the nearest grid sample."""
        i = round((wavelength_nm - self.start_nm) / self.step_nm)
        return min(max(i, 0), self.count - 1)


_DEFAULT_GRID = WavelengthGrid(start_nm=380.0, step_nm=5.0, count=81)


def default_grid() -> WavelengthGrid:
    """The session grid: 380-780 nm at 5 nm, 81 samples."""
    return _DEFAULT_GRID


def _freeze(values: np.ndarray) -> np.ndarray:
    values = np.ascontiguousarray(values, dtype=np.float64)
    values.setflags(write=False)
    return values


@dataclass(frozen=True)
class Spectrum:
    """Values sampled on a wavelength grid.

    The unit depends on the role: radiance for emission, dimensionless
    in [0, 1] for reflectance and transmittance.
    """

    grid: WavelengthGrid
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _freeze(self.values))
        if self.values.shape != (self.grid.count,):
            raise ValueError(
                f"expected {self.grid.count} samples, got {self.values.shape}"
            )
        if not np.isfinite(self.values).all():
            raise ValueError("spectrum contains non-finite samples")
        if (self.values < 0.0).any():
            raise ValueError("spectrum contains negative samples")

    @classmethod
    def constant(cls, value: float, grid: WavelengthGrid | None = None) -> Spectrum:
        grid = grid or default_grid()
        return cls(grid, np.full(grid.count, float(value)))

    def require_unit_interval(self, what: str = "spectrum") -> Spectrum:
        if (self.values > 1.0 + 1e-12).any():
            raise ValueError(f"{what} exceeds 1 at some wavelength")
        return self

    def scaled(self, factor: float) -> Spectrum:
        return Spectrum(self.grid, self.values * factor)

    def value_at(self, wavelength_nm: float) -> float:
        return float(self.values[self.grid.index_of(wavelength_nm)])


@dataclass(frozen=True)
class ComplexIOR:
    """Per-wavelength complex index of refraction n + i*k."""

    grid: WavelengthGrid
    n: np.ndarray
    k: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "n", _freeze(self.n))
        object.__setattr__(self, "k", _freeze(self.k))
        if self.n.shape != (self.grid.count,) or self.k.shape != (self.grid.count,):
            raise ValueError("n and k must both match the grid length")
        if (self.n <= 0.0).any():
            raise ValueError("optical index n must be positive everywhere")
        if (self.k < 0.0).any():
            raise ValueError("absorption index k must be non-negative")

    @classmethod
    def constant(
        cls, n: float, k: float = 0.0, grid: WavelengthGrid | None = None
    ) -> ComplexIOR:
        grid = grid or default_grid()
        return cls(grid, np.full(grid.count, float(n)), np.full(grid.count, float(k)))

    @property
    def kappa(self) -> np.ndarray:
        """Ratio k/n (finite since n > 0 is enforced)."""
        return self.k / self.n

    @property
    def is_dielectric(self) -> bool:
        return bool((self.k == 0.0).all())


@dataclass(frozen=True)
class TransmittanceMap:
    """Texture of per-texel transmittance spectra, addressed by (u, v)."""

    width: int
    height: int
    texels: np.ndarray  # (height, width, grid.count), values in [0, 1]
    grid: WavelengthGrid = field(default_factory=default_grid)

    def __post_init__(self):
        object.__setattr__(self, "texels", _freeze(self.texels))
        if self.width < 1 or self.height < 1:
            raise ValueError("map dimensions must be positive")
        if self.texels.shape != (self.height, self.width, self.grid.count):
            raise ValueError(
                f"texel array shape {self.texels.shape} does not match "
                f"{self.height}x{self.width} map on a {self.grid.count}-sample grid"
            )
        if (self.texels < 0.0).any() or (self.texels > 1.0 + 1e-12).any():
            raise ValueError("transmittance texels must lie in [0, 1]")

    @classmethod
    def uniform(
        cls, spectrum: Spectrum, width: int = 1, height: int = 1
    ) -> TransmittanceMap:
        texels = np.broadcast_to(
            spectrum.values, (height, width, spectrum.grid.count)
        ).copy()
        return cls(width, height, texels, spectrum.grid)


def read_columns(path, n_value_columns: int) -> list[tuple[float, ...]]:
    """Read a `wavelength_nm, v1[, v2, ...]` text table.

    Blank lines and `#` comments are ignored. Raises SpdParseError for a
    malformed line, SpdFormatError for an empty table or non-ascending
    wavelengths.
    """
    path = Path(path)
    rows: list[tuple[float, ...]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = [p.strip() for p in line.replace(",", " ").split()]
            if len(parts) != n_value_columns + 1:
                raise SpdParseError(
                    path,
                    line_no,
                    f"expected wavelength plus {n_value_columns} value(s), "
                    f"got {len(parts)} field(s)",
                )
            try:
                row = tuple(float(p) for p in parts)
            except ValueError:
                raise SpdParseError(path, line_no, f"non-numeric field in {line!r}")
            rows.append(row)
    if not rows:
        raise SpdFormatError(f"{path}: no data lines")
    wavelengths = [r[0] for r in rows]
    for a, b in zip(wavelengths, wavelengths[1:]):
        if b <= a:
            raise SpdFormatError(
                f"{path}: wavelengths must be strictly ascending ({a} then {b})"
            )
    return rows


def _resample(
    rows: list[tuple[float, ...]], column: int, grid: WavelengthGrid
) -> np.ndarray:
    xs = np.array([r[0] for r in rows])
    ys = np.array([r[column] for r in rows])
    # np.interp clamps to the endpoint values outside the file's range.
    return np.interp(grid.wavelengths, xs, ys)


def load_spd(path, grid: WavelengthGrid | None = None) -> Spectrum:
    """Load a one-value-column SPD file onto the session grid."""
    grid = grid or default_grid()
    rows = read_columns(path, 1)
    return Spectrum(grid, _resample(rows, 1, grid))


def load_ior(path, grid: WavelengthGrid | None = None) -> ComplexIOR:
    """Load a `wavelength, n, k` file onto the session grid."""
    grid = grid or default_grid()
    rows = read_columns(path, 2)
    return ComplexIOR(grid, _resample(rows, 1, grid), _resample(rows, 2, grid))


def load_transmittance_map(path, grid: WavelengthGrid | None = None) -> TransmittanceMap:
    """Load a transmittance map file.

    Format: a header line `width height`, then width*height SPD blocks in
    row-major order, separated by blank lines.
    """
    grid = grid or default_grid()
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.readlines()

    header_no = None
    for line_no, raw in enumerate(lines, start=1):
        if raw.split("#", 1)[0].strip():
            header_no = line_no
            break
    if header_no is None:
        raise SpdFormatError(f"{path}: empty map file")
    header = lines[header_no - 1].split("#", 1)[0].split()
    if len(header) != 2:
        raise SpdParseError(path, header_no, "header must be `width height`")
    try:
        width, height = int(header[0]), int(header[1])
    except ValueError:
        raise SpdParseError(path, header_no, "non-integer map dimensions")
    if width < 1 or height < 1:
        raise SpdParseError(path, header_no, "map dimensions must be positive")

    # Split the remainder into blank-line-separated blocks of (line_no, text).
    blocks: list[list[tuple[int, str]]] = []
    current: list[tuple[int, str]] = []
    for line_no in range(header_no + 1, len(lines) + 1):
        text = lines[line_no - 1].split("#", 1)[0].strip()
        if not text:
            if current:
                blocks.append(current)
                current = []
            continue
        current.append((line_no, text))
    if current:
        blocks.append(current)
    if len(blocks) != width * height:
        raise SpdFormatError(
            f"{path}: expected {width * height} texel blocks, found {len(blocks)}"
        )

    texels = np.empty((height, width, grid.count))
    for i, block in enumerate(blocks):
        rows = []
        for line_no, text in block:
            parts = [p.strip() for p in text.replace(",", " ").split()]
            if len(parts) != 2:
                raise SpdParseError(path, line_no, "texel lines are `wavelength, value`")
            try:
                rows.append((float(parts[0]), float(parts[1])))
            except ValueError:
                raise SpdParseError(path, line_no, f"non-numeric field in {text!r}")
        for a, b in zip(rows, rows[1:]):
            if b[0] <= a[0]:
                raise SpdFormatError(f"{path}: texel {i} wavelengths not ascending")
        texels[i // width, i % width] = _resample(rows, 1, grid)
    if (texels < 0.0).any() or (texels > 1.0).any():
        raise SpdFormatError(f"{path}: transmittance values must lie in [0, 1]")
    return TransmittanceMap(width, height, texels, grid)


def _amplitude_coefficients(
    n1: float, n2: complex, cos_i: float
) -> tuple[complex, complex]:
    """Complex amplitude reflection coefficients r_s, r_p at an interface.

    The incident side has real index n1; the far side may be absorbing.
    The principal square root puts total internal reflection on the
    |r| = 1 branch automatically.
    """
    sin_i_sq = 1.0 - cos_i * cos_i
    ratio = n1 / n2
    cos_t = cmath.sqrt(1.0 - ratio * ratio * sin_i_sq)
    r_s = (n1 * cos_i - n2 * cos_t) / (n1 * cos_i + n2 * cos_t)
    r_p = (n2 * cos_i - n1 * cos_t) / (n2 * cos_i + n1 * cos_t)
    return r_s, r_p


def fresnel_reflectance(
    ior_outside: ComplexIOR,
    ior_inside: ComplexIOR,
    cos_theta_i: float,
    wavelength_index: int,
) -> float:
    """Unpolarized power reflectance (R_s + R_p) / 2 at one wavelength.

    The outside (incident) medium must be non-absorbing. cos_theta_i is
    the cosine of the incidence angle measured from the surface normal,
    strictly positive.
    """
    if not 0.0 < cos_theta_i <= 1.0:
        raise ValueError(f"cos_theta_i must lie in (0, 1], got {cos_theta_i}")
    if wavelength_index >= ior_outside.grid.count or wavelength_index < 0:
        raise ValueError(f"wavelength_index {wavelength_index} out of range")
    if ior_outside.k[wavelength_index] != 0.0:
        raise ValueError("incident medium must be non-absorbing (k = 0)")
    n1 = float(ior_outside.n[wavelength_index])
    n2 = complex(
        float(ior_inside.n[wavelength_index]), float(ior_inside.k[wavelength_index])
    )
    r_s, r_p = _amplitude_coefficients(n1, n2, cos_theta_i)
    r = 0.5 * (abs(r_s) ** 2 + abs(r_p) ** 2)
    return min(r, 1.0)


def fresnel_transmittance(
    ior_outside: ComplexIOR,
    ior_inside: ComplexIOR,
    cos_theta_i: float,
    wavelength_index: int,
) -> float:
    """Power transmittance 1 - R for a dielectric interior.

    Absorbing interiors (k > 0) do not transmit through this path; their
    bulk absorption is carried by a transmittance map instead.
    """
    if ior_inside.k[wavelength_index] != 0.0:
        raise UnsupportedTransmissionError(
            "transmission through an absorbing medium is not defined; "
            "use a transmittance map for bulk absorption"
        )
    return 1.0 - fresnel_reflectance(
        ior_outside, ior_inside, cos_theta_i, wavelength_index
    )


def fresnel_reflectance_spectrum(
    ior_outside: ComplexIOR, ior_inside: ComplexIOR, cos_theta_i: float
) -> np.ndarray:
    """Vectorized unpolarized reflectance over the whole grid."""
    if not 0.0 < cos_theta_i <= 1.0:
        raise ValueError(f"cos_theta_i must lie in (0, 1], got {cos_theta_i}")
    if (ior_outside.k != 0.0).any():
        raise ValueError("incident medium must be non-absorbing (k = 0)")
    n1 = ior_outside.n
    n2 = ior_inside.n + 1j * ior_inside.k
    sin_i_sq = 1.0 - cos_theta_i * cos_theta_i
    ratio = n1 / n2
    cos_t = np.sqrt((1.0 - ratio * ratio * sin_i_sq).astype(np.complex128))
    r_s = (n1 * cos_theta_i - n2 * cos_t) / (n1 * cos_theta_i + n2 * cos_t)
    r_p = (n2 * cos_theta_i - n1 * cos_t) / (n2 * cos_theta_i + n1 * cos_t)
    r = 0.5 * (np.abs(r_s) ** 2 + np.abs(r_p) ** 2)
    return np.minimum(r, 1.0)


def sample_transmittance_map(tmap: TransmittanceMap, u: float, v: float) -> Spectrum:
    """Bilinear sample at texture coordinates (u, v) with repeat wrapping."""
    values = sample_transmittance_values(tmap, u, v)
    return Spectrum(tmap.grid, np.minimum(values, 1.0))


def sample_transmittance_values(tmap: TransmittanceMap, u: float, v: float) -> np.ndarray:
    u = u % 1.0
    v = v % 1.0
    x = u * tmap.width - 0.5
    y = v * tmap.height - 0.5
    x0 = int(np.floor(x))
    y0 = int(np.floor(y))
    fx = x - x0
    fy = y - y0
    x1 = (x0 + 1) % tmap.width
    y1 = (y0 + 1) % tmap.height
    x0 %= tmap.width
    y0 %= tmap.height
    t = tmap.texels
    return (
        t[y0, x0] * ((1 - fx) * (1 - fy))
        + t[y0, x1] * (fx * (1 - fy))
        + t[y1, x0] * ((1 - fx) * fy)
        + t[y1, x1] * (fx * fy)
    )
