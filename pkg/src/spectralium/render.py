"""Two-pass spectral renderer: photon maps plus per-pixel inverse ray tracing.

Pass one throws photons from the directional lights and fills two maps,
one for indirect diffuse light and one for caustics (paths that were
purely specular since emission). Pass two walks the image scanline by
scanline: direct light via shadow rays against each sun, specular
reflection/refraction by recursion, and the photon maps supplying the
caustic and indirect diffuse terms at every diffuse hit.

Determinism contract: every stochastic choice is a hash of
(seed, stream, photon or pixel id, bounce), never of shared mutable RNG
state, so results are bit-identical for a fixed seed across runs and
worker counts, and a path can be resumed anywhere (the domain
decomposition scheduler relies on this).
"""

from __future__ import annotations

import contextlib
import math
import sys
import threading
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import rng
from .colorimetry import ObserverCMF, standard_observer, xyz_from_values
from .scene import Hit, Scene, SpatialIndex, FresnelDielectric, FresnelConductor, Lambertian, build_index, generate_ray
from .spectral import Spectrum, default_grid, fresnel_reflectance_spectrum, sample_transmittance_values
from .sunlight import SunLight

__all__ = [
    "Ray",
    "Photon",
    "PhotonMap",
    "PhotonMaps",
    "ImageAccumulator",
    "RenderSettings",
    "RenderContext",
    "KIND_CAMERA",
    "KIND_SPECULAR",
    "KIND_SHADOW",
    "KIND_PHOTON",
    "direct_illumination",
    "direct_terms",
    "trace_photons",
    "estimate_radiance",
    "shade",
    "specular_children",
    "render_image",
]

KIND_CAMERA = 0
KIND_SPECULAR = 1
KIND_SHADOW = 2
KIND_PHOTON = 3

SURFACE_OFFSET = 1e-6  # meters; spawn offset for secondary rays
RAY_EPS = 1e-9

_AIR_N: np.ndarray | None = None


def _air_ior():
    from .spectral import ComplexIOR

    global _AIR_N
    if _AIR_N is None:
        _AIR_N = ComplexIOR.constant(1.0, 0.0)
    return _AIR_N


@dataclass
class Ray:
    """Importance-carrying ray; throughput is dimensionless per wavelength."""

    origin: np.ndarray
    direction: np.ndarray
    throughput: np.ndarray
    depth: int = 0
    pixel_id: int = 0
    kind: int = KIND_CAMERA


@dataclass(frozen=True)
class Photon:
    position: np.ndarray
    incident_direction: np.ndarray
    flux: np.ndarray  # W * nm^-1 carried by this stored photon


class PhotonMap:
    """Balanced spatial index over stored photons."""

    def __init__(self, photons: list[Photon], emitted_count: int):
        self.emitted_count = emitted_count
        self.size = len(photons)
        if photons:
            self.positions = np.array([p.position for p in photons])
            self.directions = np.array([p.incident_direction for p in photons])
            self.flux = np.array([p.flux for p in photons])
            self._tree = cKDTree(self.positions)
        else:
            self.positions = np.zeros((0, 3))
            self.directions = np.zeros((0, 3))
            self.flux = np.zeros((0, default_grid().count))
            self._tree = None

    def k_nearest(self, point: np.ndarray, k: int, r_max: float):
        """Indices and distances of the k nearest photons within r_max,
        sorted by distance; returns min(k, matches) entries."""
        if self._tree is None or k < 1:
            return np.zeros(0, dtype=int), np.zeros(0)
        k_eff = min(k, self.size)
        dists, idx = self._tree.query(point, k=k_eff, distance_upper_bound=r_max)
        dists = np.atleast_1d(dists)
        idx = np.atleast_1d(idx)
        good = np.isfinite(dists)
        return idx[good], dists[good]


@dataclass
class PhotonMaps:
    global_map: PhotonMap
    caustic_map: PhotonMap


@dataclass
class RenderSettings:
    width: int = 64
    height: int = 64
    samples_per_pixel: int = 1
    n_photons: int = 0
    max_depth: int = 8
    seed: int = 0
    workers: int = 1
    gather_k: int = 100
    gather_radius: float | None = None  # defaults to scene diagonal / 20
    rr_start_depth: int = 3
    throughput_cutoff: float = 1e-4

    def __post_init__(self):
        if self.width < 1 or self.height < 1 or self.samples_per_pixel < 1:
            raise ValueError("image dimensions and samples_per_pixel must be >= 1")
        if self.max_depth < 1 or self.workers < 1:
            raise ValueError("max_depth and workers must be >= 1")


class ImageAccumulator:
    """Per-pixel XYZ accumulator with per-cell mutual exclusion.

    Two accumulation styles share the contract: whole-pixel deposits
    (deterministic single-writer per pixel) and out-of-order term streams
    (the DDM path), which are reduced in a canonical sorted order at
    finalize time so the result is independent of arrival order.
    """

    def __init__(self, width: int, height: int):
        self.width = width
        self.height = height
        n = width * height
        self.xyz = np.zeros((n, 3))
        self.counts = np.zeros(n, dtype=np.int64)
        self.locks = [threading.Lock() for _ in range(n)]
        self.terms: list[list[tuple[float, float, float]]] | None = None

    def enable_term_mode(self):
        self.terms = [[] for _ in range(self.width * self.height)]

    def deposit(self, pixel_id: int, xyz: tuple[float, float, float], n_samples: int):
        with self.locks[pixel_id]:
            self.xyz[pixel_id, 0] += xyz[0]
            self.xyz[pixel_id, 1] += xyz[1]
            self.xyz[pixel_id, 2] += xyz[2]
            self.counts[pixel_id] += n_samples
    def add_term(self, pixel_id: int, xyz: tuple[float, float, float]):
        with self.locks[pixel_id]:
            self.terms[pixel_id].append(xyz)

    def set_counts(self, n_samples: int):
        self.counts[:] = n_samples

    def finalize(self) -> np.ndarray:
        """Mean XYZ per pixel as a (height, width, 3) array."""
        if self.terms is not None:
            for pid, terms in enumerate(self.terms):
                acc = [0.0, 0.0, 0.0]
                for t in sorted(terms):
                    acc[0] += t[0]
                    acc[1] += t[1]
                    acc[2] += t[2]
                self.xyz[pid] += acc
        out = np.zeros((self.width * self.height, 3))
        nz = self.counts > 0
        out[nz] = self.xyz[nz] / self.counts[nz, None]
        return out.reshape(self.height, self.width, 3)


@dataclass
class RenderContext:
    """Everything the shading core needs, built once per render."""

    scene: Scene
    index: SpatialIndex
    lights: list[SunLight]
    settings: RenderSettings
    maps: PhotonMaps | None = None
    cmf: ObserverCMF = field(default_factory=standard_observer)

    @property
    def gather_radius(self) -> float:
        if self.settings.gather_radius is not None:
            return self.settings.gather_radius
        return self.scene.diagonal / 20.0


# ---------------------------------------------------------------------------
# Local illumination


def direct_terms(scene: Scene, hit: Hit, lights: list[SunLight]):
    """Per-light direct contributions pending visibility.

    Returns [(light_index, shadow_origin, dir_to_light, term_values)] with
    term = F_r * L_s * (n . w_s) per wavelength; lights below the tangent
    plane are dropped (clamped cosine). Only diffuse surfaces respond to
    ideal directional sources (a specular response to a delta light has
    zero measure along any other outgoing direction).
    """
    mat = scene.materials[hit.material_id]
    if not isinstance(mat, Lambertian):
        return []
    rho_over_pi = mat.reflectance.values / math.pi
    n = hit.shading_normal
    out = []
    shadow_origin = hit.point + SURFACE_OFFSET * hit.normal
    for li, light in enumerate(lights):
        ws = -light.direction
        cos_s = float(n @ ws)
        if cos_s <= 0.0:
            continue
        term = rho_over_pi * light.emission.values * cos_s
        out.append((li, shadow_origin, ws, term))
    return out


def direct_illumination(
    hit: Hit, outgoing_dir: np.ndarray, lights: list[SunLight], scene: Scene,
    index: SpatialIndex,
) -> Spectrum:
    """Shadow-rayed sum over the directional sources at a surface point."""
    total = np.zeros(default_grid().count)
    for _, origin, ws, term in direct_terms(scene, hit, lights):
        if not index.occluded(
            origin[0], origin[1], origin[2], ws[0], ws[1], ws[2], RAY_EPS, math.inf
        ):
            total = total + term
    return Spectrum(default_grid(), np.maximum(total, 0.0))


def _direct_values(ctx: RenderContext, hit: Hit) -> np.ndarray:
    total = None
    for _, origin, ws, term in direct_terms(ctx.scene, hit, ctx.lights):
        if not ctx.index.occluded(
            origin[0], origin[1], origin[2], ws[0], ws[1], ws[2], RAY_EPS, math.inf
        ):
            total = term if total is None else total + term
    if total is None:
        return np.zeros(default_grid().count)
    return total


# ---------------------------------------------------------------------------
# Photon tracing


def _basis(n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic orthonormal tangent frame for unit n."""
    sign = math.copysign(1.0, n[2])
    a = -1.0 / (sign + n[2])
    b = n[0] * n[1] * a
    t1 = np.array([1.0 + sign * n[0] * n[0] * a, sign * b, -sign * n[0]])
    t2 = np.array([b, sign + n[1] * n[1] * a, -n[1]])
    return t1, t2


def emit_photon(
    scene: Scene, light: SunLight, light_index: int, photon_id: int,
    n_photons: int, seed: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Photon start (origin, direction, flux), sampled on the scene's
    bounding disk perpendicular to the light direction."""
    center = (scene.bounds_lo + scene.bounds_hi) / 2.0
    radius = scene.diagonal / 2.0
    if radius == 0.0:
        radius = 1.0
    u1 = rng.uniform(seed, rng.STREAM_PHOTON_EMIT, light_index, photon_id, 0)
    u2 = rng.uniform(seed, rng.STREAM_PHOTON_EMIT, light_index, photon_id, 1)
    r = radius * math.sqrt(u1)
    phi = 2.0 * math.pi * u2
    d = light.direction
    t1, t2 = _basis(d)
    origin = (
        center
        - d * (radius * 1.5)
        + t1 * (r * math.cos(phi))
        + t2 * (r * math.sin(phi))
    )
    flux = light.emission.values * (math.pi * radius * radius / n_photons)
    return origin, d.copy(), flux


def photon_interaction(
    scene: Scene,
    hit: Hit,
    direction: np.ndarray,
    flux: np.ndarray,
    light_index: int,
    photon_id: int,
    bounce: int,
    specular_only: bool,
    seed: int,
    settings: RenderSettings,
):
    """One photon-surface interaction.

    Returns (store_target, continuation) where store_target is None,
    "global" or "caustic", and continuation is None or
    (origin, direction, flux, specular_only) for the next segment. The
    stochastic choices depend only on (seed, light, photon, bounce), so a
    path replays identically wherever it is processed.
    """
    mat = scene.materials[hit.material_id]
    store = None
    continuation = None

    if isinstance(mat, Lambertian):
        if bounce >= 1:
            store = "caustic" if specular_only else "global"
        if bounce + 1 < settings.max_depth:
            rho = mat.reflectance.values
            if bounce < settings.rr_start_depth:
                p = 1.0
            else:
                p = float(rho.mean())
            if p > 0.0:
                survive = (
                    p >= 1.0
                    or rng.uniform(
                        seed, rng.STREAM_PHOTON_ROULETTE, light_index, photon_id, bounce
                    )
                    < p
                )
                if survive:
                    u1 = rng.uniform(
                        seed, rng.STREAM_PHOTON_BOUNCE, light_index, photon_id, bounce, 0
                    )
                    u2 = rng.uniform(
                        seed, rng.STREAM_PHOTON_BOUNCE, light_index, photon_id, bounce, 1
                    )
                    lx, ly, lz = rng.cosine_hemisphere(u1, u2)
                    t1, t2 = _basis(hit.shading_normal)
                    new_dir = t1 * lx + t2 * ly + hit.shading_normal * lz
                    new_dir = new_dir / np.linalg.norm(new_dir)
                    origin = hit.point + SURFACE_OFFSET * hit.normal
                    continuation = (origin, new_dir, flux * (rho / p), False)
    elif isinstance(mat, FresnelDielectric):
        if bounce + 1 < settings.max_depth:
            cos_i = max(float(-(direction @ hit.shading_normal)), 1e-9)
            refl = fresnel_reflectance_spectrum(_air_ior(), mat.ior, min(cos_i, 1.0))
            q = min(max(float(refl.mean()), 1e-9), 1.0 - 1e-9)
            u = rng.uniform(
                seed, rng.STREAM_PHOTON_FRESNEL, light_index, photon_id, bounce
            )
            if u < q:
                new_dir = direction + 2.0 * cos_i * hit.shading_normal
                new_dir = new_dir / np.linalg.norm(new_dir)
                origin = hit.point + SURFACE_OFFSET * hit.normal
                continuation = (origin, new_dir, flux * (refl / q), specular_only)
            else:
                t_bulk = sample_transmittance_values(mat.bulk, hit.uv[0], hit.uv[1])
                weight = (1.0 - refl) * t_bulk / (1.0 - q)
                origin = hit.point - SURFACE_OFFSET * hit.normal
                continuation = (origin, direction.copy(), flux * weight, specular_only)
    elif isinstance(mat, FresnelConductor):
        if bounce + 1 < settings.max_depth:
            cos_i = max(float(-(direction @ hit.shading_normal)), 1e-9)
            refl = fresnel_reflectance_spectrum(_air_ior(), mat.ior, min(cos_i, 1.0))
            p = min(max(float(refl.mean()), 0.0), 1.0)
            if p > 0.0:
                u = rng.uniform(
                    seed, rng.STREAM_PHOTON_FRESNEL, light_index, photon_id, bounce
                )
                if u < p:
                    new_dir = direction + 2.0 * cos_i * hit.shading_normal
                    new_dir = new_dir / np.linalg.norm(new_dir)
                    origin = hit.point + SURFACE_OFFSET * hit.normal
                    continuation = (origin, new_dir, flux * (refl / p), specular_only)
    return store, continuation


def trace_photons(
    scene: Scene,
    lights: list[SunLight],
    n_photons: int,
    rng_seed: int,
    settings: RenderSettings | None = None,
    index: SpatialIndex | None = None,
) -> tuple[PhotonMap, PhotonMap]:
    """Fill the global and caustic maps with n_photons paths per light.

    Direct hits (bounce 0) are never stored: the scanline pass already
    accounts for direct light, so storing them would double-count it.
    """
    if n_photons <= 0:
        raise ValueError("n_photons must be positive")
    settings = settings or RenderSettings()
    index = index or build_index(scene)
    global_store: list[Photon] = []
    caustic_store: list[Photon] = []
    for li, light in enumerate(lights):
        for pid in range(n_photons):
            origin, direction, flux = emit_photon(
                scene, light, li, pid, n_photons, rng_seed
            )
            specular_only = True
            for bounce in range(settings.max_depth):
                found = index.nearest(
                    origin[0], origin[1], origin[2],
                    direction[0], direction[1], direction[2],
                    RAY_EPS, math.inf,
                )
                if found is None:
                    break
                hit = index.make_hit(origin, direction, found)
                store, continuation = photon_interaction(
                    scene, hit, direction, flux, li, pid, bounce,
                    specular_only, rng_seed, settings,
                )
                if store is not None:
                    photon = Photon(hit.point.copy(), direction.copy(), flux.copy())
                    (caustic_store if store == "caustic" else global_store).append(photon)
                if continuation is None:
                    break
                origin, direction, flux, specular_only = continuation
    emitted = n_photons * max(len(lights), 1)
    return PhotonMap(global_store, emitted), PhotonMap(caustic_store, emitted)


# ---------------------------------------------------------------------------
# Radiance estimation and shading


def estimate_radiance(
    pmap: PhotonMap, hit: Hit, outgoing_dir: np.ndarray, k: int, r_max: float,
    scene: Scene,
) -> Spectrum:
    """Density estimate over the k nearest photons within r_max."""
    if k < 1:
        raise ValueError("k must be >= 1")
    vals = _estimate_values(pmap, hit, k, r_max, scene)
    return Spectrum(default_grid(), np.maximum(vals, 0.0))


def _estimate_values(
    pmap: PhotonMap, hit: Hit, k: int, r_max: float, scene: Scene
) -> np.ndarray:
    grid_n = default_grid().count
    if pmap.size == 0:
        return np.zeros(grid_n)
    mat = scene.materials[hit.material_id]
    if not isinstance(mat, Lambertian):
        return np.zeros(grid_n)
    idx, dists = pmap.k_nearest(hit.point, k, r_max)
    if len(idx) == 0:
        return np.zeros(grid_n)
    r = float(dists[-1])
    if r <= 0.0:
        r = 1e-12
    f_r = mat.reflectance.values / math.pi
    gathered = pmap.flux[idx].sum(axis=0)
    return f_r * gathered / (math.pi * r * r)


def specular_children(scene: Scene, settings: RenderSettings, hit: Hit,
                      direction: np.ndarray, throughput: np.ndarray, depth: int):
    """Continuation rays spawned at a specular hit.

    Returns [(origin, direction, weight, child_throughput)]; children whose
    carried importance falls below the cutoff are culled (deterministic,
    replaces camera-side roulette).
    """
    mat = scene.materials[hit.material_id]
    if depth + 1 > settings.max_depth:
        return []
    cos_i = max(float(-(direction @ hit.shading_normal)), 1e-9)
    refl = fresnel_reflectance_spectrum(_air_ior(), mat.ior, min(cos_i, 1.0))
    children = []
    cutoff = settings.throughput_cutoff
    refl_tp = throughput * refl
    if float(refl_tp.max()) >= cutoff:
        new_dir = direction + 2.0 * cos_i * hit.shading_normal
        new_dir = new_dir / np.linalg.norm(new_dir)
        origin = hit.point + SURFACE_OFFSET * hit.normal
        children.append((origin, new_dir, refl, refl_tp))
    if isinstance(mat, FresnelDielectric):
        # Thin sheet: the transmitted ray keeps the incident direction and
        # is attenuated by the interface split and the bulk map.
        t_bulk = sample_transmittance_values(mat.bulk, hit.uv[0], hit.uv[1])
        weight = (1.0 - refl) * t_bulk
        pass_tp = throughput * weight
        if float(pass_tp.max()) >= cutoff:
            origin = hit.point - SURFACE_OFFSET * hit.normal
            children.append((origin, direction.copy(), weight, pass_tp))
    return children


def _radiance(ctx: RenderContext, origin: np.ndarray, direction: np.ndarray,
              depth: int, throughput: np.ndarray) -> np.ndarray:
    found = ctx.index.nearest(
        origin[0], origin[1], origin[2],
        direction[0], direction[1], direction[2],
        RAY_EPS, math.inf,
    )
    if found is None:
        return np.zeros(default_grid().count)  # black environment
    hit = ctx.index.make_hit(origin, direction, found)
    mat = ctx.scene.materials[hit.material_id]
    if isinstance(mat, Lambertian):
        vals = _direct_values(ctx, hit)
        if ctx.maps is not None:
            k = ctx.settings.gather_k
            r_max = ctx.gather_radius
            vals = vals + _estimate_values(ctx.maps.caustic_map, hit, k, r_max, ctx.scene)
            vals = vals + _estimate_values(ctx.maps.global_map, hit, k, r_max, ctx.scene)
        return vals
    out = np.zeros(default_grid().count)
    for child_origin, child_dir, weight, child_tp in specular_children(
        ctx.scene, ctx.settings, hit, direction, throughput, depth
    ):
        out = out + weight * _radiance(ctx, child_origin, child_dir, depth + 1, child_tp)
    return out


def shade(
    ray: Ray,
    scene: Scene,
    maps: PhotonMaps | None,
    lights: list[SunLight],
    depth: int = 0,
    index: SpatialIndex | None = None,
    settings: RenderSettings | None = None,
) -> Spectrum:
    """Spectral radiance arriving along the ray (zero when it escapes)."""
    settings = settings or RenderSettings()
    ctx = RenderContext(
        scene=scene,
        index=index or build_index(scene),
        lights=lights,
        settings=settings,
        maps=maps,
    )
    vals = _radiance(ctx, ray.origin, ray.direction, depth, ray.throughput)
    return Spectrum(default_grid(), np.maximum(vals, 0.0))


# ---------------------------------------------------------------------------
# Image rendering


def _pixel_jitter(seed: int, pixel_id: int, sample: int, spp: int) -> tuple[float, float]:
    """Stratified jitter: a k x k grid when spp is a perfect square."""
    u1 = rng.uniform(seed, rng.STREAM_PIXEL_JITTER, pixel_id, sample, 0)
    u2 = rng.uniform(seed, rng.STREAM_PIXEL_JITTER, pixel_id, sample, 1)
    k = int(math.isqrt(spp))
    if k * k == spp and k > 1:
        sx = sample % k
        sy = sample // k
        return (sx + u1) / k, (sy + u2) / k
    return u1, u2


def render_pixel(ctx: RenderContext, camera, px: int, py: int) -> tuple[float, float, float]:
    """Mean pixel spectrum over the stratified samples, converted to XYZ."""
    spp = ctx.settings.samples_per_pixel
    seed = ctx.settings.seed
    pixel_id = py * camera.width + px
    acc = np.zeros(default_grid().count)
    ones = np.ones(default_grid().count)
    for s in range(spp):
        jitter = _pixel_jitter(seed, pixel_id, s, spp)
        origin, direction = generate_ray(camera, px, py, jitter)
        acc = acc + _radiance(ctx, origin, direction, 0, ones)
    return xyz_from_values(acc / spp, ctx.cmf)


@contextlib.contextmanager
def coarse_thread_switching():
    """Longer interpreter switch interval while compute threads run.

    Fine-grained GIL handoffs between CPU-bound workers cause convoying
    on multicore hosts; a coarser interval keeps wall time stable.
    """
    previous = sys.getswitchinterval()
    sys.setswitchinterval(0.05)
    try:
        yield
    finally:
        sys.setswitchinterval(previous)


def run_pixel_pool(ctx: RenderContext, camera, accumulator: ImageAccumulator,
                   n_workers: int):
    """Scanline worker pool; each pixel is computed whole by one worker."""
    height, width = camera.height, camera.width
    spp = ctx.settings.samples_per_pixel
    next_row = [0]
    row_lock = threading.Lock()

    def worker():
        while True:
            with row_lock:
                row = next_row[0]
                next_row[0] += 1
            if row >= height:
                return
            for px in range(width):
                xyz = render_pixel(ctx, camera, px, row)
                pid = row * width + px
                accumulator.deposit(pid, (xyz[0] * spp, xyz[1] * spp, xyz[2] * spp), spp)

    if n_workers == 1:
        worker()
        return
    threads = [threading.Thread(target=worker, name=f"render-{i}") for i in range(n_workers)]
    with coarse_thread_switching():
        for t in threads:
            t.start()
        for t in threads:
            t.join()


def render_image(scene: Scene, settings: RenderSettings) -> ImageAccumulator:
    """Render the scene; deterministic for a fixed seed at any worker count."""
    index = build_index(scene)
    maps = None
    if settings.n_photons > 0 and scene.lights:
        gmap, cmap = trace_photons(
            scene, scene.lights, settings.n_photons, settings.seed, settings, index
        )
        maps = PhotonMaps(gmap, cmap)
    ctx = RenderContext(
        scene=scene, index=index, lights=scene.lights, settings=settings, maps=maps
    )
    camera = scene.camera.with_resolution(settings.width, settings.height)
    accumulator = ImageAccumulator(settings.width, settings.height)
    run_pixel_pool(ctx, camera, accumulator, settings.workers)
    return accumulator
