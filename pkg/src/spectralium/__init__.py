"""Spectralium: a multi-spectral physically-based renderer.

Wavelength-sampled materials (complex refractive indices, spectral
transmittance maps), a Rayleigh-attenuated directional sun, two-pass
photon mapping, CIE colorimetry output, and a domain-decomposition
parallel scheduler that migrates rays across sub-domain interfaces while
overlapping sub-model loading with computation.
"""

from .spectral import (
    ComplexIOR,
    Spectrum,
    TransmittanceMap,
    WavelengthGrid,
    default_grid,
    fresnel_reflectance,
    fresnel_transmittance,
    load_spd,
    sample_transmittance_map,
)
from .colorimetry import XYZ, chromaticity, spectrum_to_xyz, xyz_to_srgb
from .sunlight import SunLight, airmass, blackbody_spectrum, rayleigh_transmission, solar_spectrum
from .scene import Scene, build_index, generate_ray, intersect, parse_scene
from .render import (
    ImageAccumulator,
    PhotonMap,
    RenderSettings,
    direct_illumination,
    estimate_radiance,
    render_image,
    shade,
    trace_photons,
)
from .ddm import RayMessage, ScheduleMetrics, SubDomain, advance_ray, partition, run_ddm

__version__ = "0.1.0"
