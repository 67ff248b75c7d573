"""Counter-based deterministic random streams.

Every random decision in the renderer is a pure function of
(seed, stream tag, integer coordinates), so a ray or photon path can be
replayed bit-identically on any worker, in any processing order.
"""

from __future__ import annotations

import math

_MASK = (1 << 64) - 1

# Stream tags keep unrelated decision sequences statistically independent.
STREAM_PIXEL_JITTER = 0x9E3779B97F4A7C15
STREAM_PHOTON_EMIT = 0xC2B2AE3D27D4EB4F
STREAM_PHOTON_ROULETTE = 0x165667B19E3779F9
STREAM_PHOTON_BOUNCE = 0x27D4EB2F165667C5
STREAM_PHOTON_FRESNEL = 0x85EBCA77C2B2AE63


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def hash_u64(*words: int) -> int:
    """Mix any number of integer words into one 64-bit hash."""
    h = 0x51_7C_C1_B7_27_22_0A_95
    for w in words:
        h = _splitmix64((h ^ (w & _MASK)) & _MASK)
    return h


def uniform(*words: int) -> float:
    """Deterministic uniform in [0, 1) keyed by the given words."""
    return hash_u64(*words) / 18446744073709551616.0  # 2**64


def uniform2(*words: int) -> tuple[float, float]:
    return uniform(*words, 0), uniform(*words, 1)


def cosine_hemisphere(u1: float, u2: float) -> tuple[float, float, float]:
    """Cosine-weighted direction in the local frame with +z up."""
    r = math.sqrt(u1)
    phi = 2.0 * math.pi * u2
    x = r * math.cos(phi)
    y = r * math.sin(phi)
    z = math.sqrt(max(0.0, 1.0 - u1))
    return x, y, z
