"""Spectral radiance to CIE XYZ and display sRGB.

Uses the CIE 1931 2-degree standard observer tabulated at 5 nm, shipped
as a repository data file so it matches the session wavelength grid with
no resampling.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources

import numpy as np

from .spectral import Spectrum, WavelengthGrid, default_grid, read_columns

__all__ = [
    "ObserverCMF",
    "XYZ",
    "load_cmf",
    "load_illuminant",
    "standard_observer",
    "d65_illuminant",
    "spectrum_to_xyz",
    "xyz_to_srgb",
    "chromaticity",
    "SRGB_FROM_XYZ",
]

# Linear sRGB from XYZ, D65 white (IEC 61966-2-1).
SRGB_FROM_XYZ = np.array(
    [
        [3.2404542, -1.5371385, -0.4985314],
        [-0.9692660, 1.8760108, 0.0415560],
        [0.0556434, -0.2040259, 1.0572252],
    ]
)


@dataclass(frozen=True)
class ObserverCMF:
    """Color-matching functions xbar, ybar, zbar on the session grid."""

    grid: WavelengthGrid
    xbar: np.ndarray
    ybar: np.ndarray
    zbar: np.ndarray

    def __post_init__(self):
        for arr in (self.xbar, self.ybar, self.zbar):
            if arr.shape != (self.grid.count,):
                raise ValueError("CMF arrays must match the grid length")
            if (arr < 0.0).any():
                raise ValueError("CMF values must be non-negative")


@dataclass(frozen=True)
class XYZ:
    X: float
    Y: float
    Z: float

    def __post_init__(self):
        if not all(np.isfinite([self.X, self.Y, self.Z])):
            raise ValueError("XYZ components must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.X, self.Y, self.Z])


def load_cmf(path, grid: WavelengthGrid | None = None) -> ObserverCMF:
    """Load a three-value-column CMF table (same format as SPD files)."""
    grid = grid or default_grid()
    rows = read_columns(path, 3)
    xs = np.array([r[0] for r in rows])
    out = []
    for col in (1, 2, 3):
        ys = np.array([r[col] for r in rows])
        out.append(np.interp(grid.wavelengths, xs, ys))
    return ObserverCMF(grid, out[0], out[1], out[2])


def load_illuminant(path, grid: WavelengthGrid | None = None) -> Spectrum:
    from .spectral import load_spd

    return load_spd(path, grid)


def _data_path(name: str):
    return resources.files("spectralium.data").joinpath(name)


_observer_cache: dict[int, ObserverCMF] = {}


def standard_observer(grid: WavelengthGrid | None = None) -> ObserverCMF:
    """CIE 1931 2-degree observer from the shipped data file."""
    grid = grid or default_grid()
    key = id(grid) if grid is not default_grid() else 0
    if key not in _observer_cache:
        with resources.as_file(_data_path("cie_1931_2deg_5nm.csv")) as p:
            _observer_cache[key] = load_cmf(p, grid)
    return _observer_cache[key]


def d65_illuminant(grid: WavelengthGrid | None = None) -> Spectrum:
    """CIE D65 relative spectral power from the shipped data file."""
    with resources.as_file(_data_path("d65_5nm.csv")) as p:
        return load_illuminant(p, grid)


def spectrum_to_xyz(radiance: Spectrum, cmf: ObserverCMF | None = None) -> XYZ:
    """Rectangle-rule tristimulus integration, no normalization."""
    cmf = cmf or standard_observer(radiance.grid)
    if radiance.grid != cmf.grid:
        raise ValueError("radiance and CMF must share one wavelength grid")
    x, y, z = xyz_from_values(radiance.values, cmf)
    return XYZ(x, y, z)


def xyz_from_values(values: np.ndarray, cmf: ObserverCMF) -> tuple[float, float, float]:
    """Tristimulus integration on a raw sample array (renderer hot path)."""
    dl = cmf.grid.step_nm
    return (
        float(values @ cmf.xbar) * dl,
        float(values @ cmf.ybar) * dl,
        float(values @ cmf.zbar) * dl,
    )


def _transfer(c: np.ndarray) -> np.ndarray:
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * np.power(c, 1.0 / 2.4) - 0.055)


def xyz_to_srgb(xyz: XYZ, white_luminance: float) -> tuple[float, float, float]:
    """Map XYZ to display sRGB in [0, 1].

    Normalizes by white_luminance (the Y of the scene's reference white),
    applies the D65 linear matrix, clamps each channel to the gamut, then
    encodes with the standard sRGB transfer curve.
    """
    if white_luminance <= 0.0:
        raise ValueError("white_luminance must be positive")
    linear = SRGB_FROM_XYZ @ (xyz.as_array() / white_luminance)
    clamped = np.clip(linear, 0.0, 1.0)
    r, g, b = _transfer(clamped)
    return float(r), float(g), float(b)


def chromaticity(xyz: XYZ) -> tuple[float, float]:
    """CIE (x, y) chromaticity coordinates."""
    total = xyz.X + xyz.Y + xyz.Z
    if total <= 0.0:
        raise ValueError("chromaticity undefined for X + Y + Z <= 0")
    return xyz.X / total, xyz.Y / total
