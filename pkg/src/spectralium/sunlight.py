"""Directional solar source: Planck emission attenuated by Rayleigh scattering.

The sun is treated as an ideal plane-wave source. Atmospheric extinction
follows the lambda^-4 Rayleigh law, anchored by the optical depth at
550 nm and scaled by a plane-parallel airmass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .spectral import Spectrum, WavelengthGrid, default_grid

__all__ = [
    "SunLight",
    "BelowHorizonError",
    "blackbody_spectrum",
    "rayleigh_transmission",
    "airmass",
    "solar_spectrum",
    "direction_from_angles",
]

PLANCK_H = 6.62607015e-34
SPEED_OF_LIGHT = 2.99792458e8
BOLTZMANN_K = 1.380649e-23

AIRMASS_CAP = 40.0


class BelowHorizonError(ValueError):
    """Sun elevation at or below the horizon."""


@dataclass(frozen=True)
class SunLight:
    """Ideal directional source; direction points from the sun toward the scene."""

    direction: np.ndarray
    emission: Spectrum

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        norm = float(np.linalg.norm(d))
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"direction must be unit length, |d| = {norm}")
        d = d.copy()
        d.setflags(write=False)
        object.__setattr__(self, "direction", d)


def blackbody_spectrum(
    temperature_K: float, grid: WavelengthGrid | None = None
) -> Spectrum:
    """Planck spectral radiance on the grid, normalized to a peak of 1."""
    if temperature_K <= 0.0:
        raise ValueError(f"temperature must be positive, got {temperature_K}")
    grid = grid or default_grid()
    lam = grid.wavelengths * 1e-9
    hc_over_lkt = PLANCK_H * SPEED_OF_LIGHT / (lam * BOLTZMANN_K * temperature_K)
    radiance = (2.0 * PLANCK_H * SPEED_OF_LIGHT**2 / lam**5) / np.expm1(hc_over_lkt)
    return Spectrum(grid, radiance / radiance.max())


def rayleigh_transmission(wavelength_nm: float, airmass: float, tau_550: float) -> float:
    """exp(-tau_550 * (550/lambda)^4 * airmass), the Rayleigh extinction law."""
    if wavelength_nm <= 0.0:
        raise ValueError("wavelength must be positive")
    return math.exp(-tau_550 * (550.0 / wavelength_nm) ** 4 * airmass)


def airmass(sun_elevation_deg: float) -> float:
    """Plane-parallel relative path length 1/sin(elevation), capped at 40."""
    if sun_elevation_deg <= 0.0:
        raise BelowHorizonError(
            f"sun elevation must be above the horizon, got {sun_elevation_deg} deg"
        )
    return min(1.0 / math.sin(math.radians(sun_elevation_deg)), AIRMASS_CAP)


def solar_spectrum(
    temperature_K: float,
    sun_elevation_deg: float,
    tau_550: float,
    power_scale: float,
    grid: WavelengthGrid | None = None,
) -> Spectrum:
    """Attenuated solar emission: power * Planck(T) * Rayleigh transmission."""
    grid = grid or default_grid()
    base = blackbody_spectrum(temperature_K, grid)
    m = airmass(sun_elevation_deg)
    transmission = np.exp(-tau_550 * (550.0 / grid.wavelengths) ** 4 * m)
    return Spectrum(grid, power_scale * base.values * transmission)


def direction_from_angles(elevation_deg: float, azimuth_deg: float) -> np.ndarray:
    """Unit vector from the sun toward the scene.

    Azimuth is measured in the horizontal (x, y) plane from +y toward +x;
    +z is up. The returned vector points downward for a sun above the
    horizon.
    """
    el = math.radians(elevation_deg)
    az = math.radians(azimuth_deg)
    to_sun = np.array(
        [math.cos(el) * math.sin(az), math.cos(el) * math.cos(az), math.sin(el)]
    )
    d = -to_sun
    return d / np.linalg.norm(d)
