"""Scene model: meshes, spectral materials, camera, parser and BVH index.

The scene file is a line-oriented text format (directives `camera`, `sun`,
`texture`, `material`, `mesh`) with an OBJ-like v/vn/vt/f sub-syntax for
embedded meshes; see docs/scene-format.md. All file references resolve
relative to the scene file's directory.

The spatial index is a median-split BVH over the flattened triangle soup
with at most four triangles per leaf. The traversal inner loop works on
plain Python floats: for the scene sizes this renderer targets that is
faster than per-ray numpy dispatch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .spectral import (
    ComplexIOR,
    Spectrum,
    TransmittanceMap,
    default_grid,
    load_ior,
    load_spd,
    load_transmittance_map,
)
from .sunlight import SunLight, direction_from_angles, solar_spectrum

__all__ = [
    "SceneError",
    "Mesh",
    "Lambertian",
    "FresnelDielectric",
    "FresnelConductor",
    "Camera",
    "Hit",
    "TriangleSet",
    "SpatialIndex",
    "Scene",
    "parse_scene",
    "build_index",
    "intersect",
    "generate_ray",
    "serialize_scene",
    "scenes_equal",
]

MIN_TRIANGLE_AREA = 1e-12
RAY_EPS = 1e-9


class SceneError(ValueError):
    """Scene file problem, reported with the offending line number(s)."""

    def __init__(self, path, message: str, line_no: int | None = None):
        loc = f"{path}:{line_no}" if line_no is not None else str(path)
        super().__init__(f"{loc}: {message}")
        self.path = path
        self.line_no = line_no


@dataclass(frozen=True)
class Lambertian:
    reflectance: Spectrum
    kind = "lambertian"

    def __post_init__(self):
        self.reflectance.require_unit_interval("lambertian reflectance")


@dataclass(frozen=True)
class FresnelDielectric:
    ior: ComplexIOR
    bulk: TransmittanceMap
    kind = "fresnel_dielectric"

    def __post_init__(self):
        if not self.ior.is_dielectric:
            raise ValueError("dielectric material requires k = 0 at every sample")


@dataclass(frozen=True)
class FresnelConductor:
    ior: ComplexIOR
    kind = "fresnel_conductor"


Material = Lambertian | FresnelDielectric | FresnelConductor


@dataclass
class Mesh:
    """Indexed triangle mesh as read from the scene file."""

    vertices: np.ndarray  # (nv, 3)
    normals: np.ndarray  # (nn, 3), unit
    uvs: np.ndarray  # (nt, 2)
    triangles: list[tuple[tuple[int, int, int], tuple[int, int, int], tuple[int, int, int]]]
    material_id: int


@dataclass(frozen=True)
class Camera:
    position: np.ndarray
    look_at: np.ndarray
    up: np.ndarray
    vertical_fov: float
    width: int
    height: int

    def __post_init__(self):
        if not 0.0 < self.vertical_fov < 180.0:
            raise ValueError("vertical_fov must lie in (0, 180) degrees")
        fwd = self.look_at - self.position
        if np.linalg.norm(fwd) == 0.0:
            raise ValueError("look_at must differ from position")
        fwd = fwd / np.linalg.norm(fwd)
        upn = self.up / np.linalg.norm(self.up)
        if abs(float(fwd @ upn)) > 1.0 - 1e-9:
            raise ValueError("up vector must not be parallel to the view direction")

    @cached_property
    def _frame(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        fwd = self.look_at - self.position
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, self.up)
        right = right / np.linalg.norm(right)
        up = np.cross(right, fwd)
        return fwd, right, up

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self._frame

    def with_resolution(self, width: int, height: int) -> Camera:
        return Camera(self.position, self.look_at, self.up, self.vertical_fov, width, height)


@dataclass(frozen=True)
class Hit:
    """Nearest intersection along a ray.

    `normal` is the geometric normal flipped toward the ray origin side;
    `shading_normal` is barycentric-interpolated and flipped onto the same
    hemisphere.
    """

    t: float
    point: np.ndarray
    normal: np.ndarray
    shading_normal: np.ndarray
    uv: tuple[float, float]
    material_id: int
    tri_id: int


class TriangleSet:
    """Flattened triangle soup with per-triangle hot-path data."""

    def __init__(self, raw: list[tuple]):
        # raw rows: (v0, v1, v2, n0, n1, n2, uv0, uv1, uv2, material_id)
        self.count = len(raw)
        self.v0: list[tuple[float, float, float]] = []
        self.e1: list[tuple[float, float, float]] = []
        self.e2: list[tuple[float, float, float]] = []
        self.n0: list[tuple[float, float, float]] = []
        self.n1: list[tuple[float, float, float]] = []
        self.n2: list[tuple[float, float, float]] = []
        self.uv0: list[tuple[float, float]] = []
        self.uv1: list[tuple[float, float]] = []
        self.uv2: list[tuple[float, float]] = []
        self.geom_normal: list[tuple[float, float, float]] = []
        self.material_id: list[int] = []
        self.vertices_array = np.zeros((self.count, 3, 3))
        for i, row in enumerate(raw):
            v0, v1, v2, n0, n1, n2, uv0, uv1, uv2, mat = row
            v0 = tuple(float(c) for c in v0)
            v1 = tuple(float(c) for c in v1)
            v2 = tuple(float(c) for c in v2)
            e1 = (v1[0] - v0[0], v1[1] - v0[1], v1[2] - v0[2])
            e2 = (v2[0] - v0[0], v2[1] - v0[1], v2[2] - v0[2])
            gn = _cross(e1, e2)
            area = 0.5 * math.sqrt(gn[0] ** 2 + gn[1] ** 2 + gn[2] ** 2)
            if area <= MIN_TRIANGLE_AREA:
                raise ValueError(f"degenerate triangle with area {area}")
            inv = 1.0 / (2.0 * area)
            self.v0.append(v0)
            self.e1.append(e1)
            self.e2.append(e2)
            self.n0.append(tuple(float(c) for c in n0))
            self.n1.append(tuple(float(c) for c in n1))
            self.n2.append(tuple(float(c) for c in n2))
            self.uv0.append(tuple(float(c) for c in uv0))
            self.uv1.append(tuple(float(c) for c in uv1))
            self.uv2.append(tuple(float(c) for c in uv2))
            self.geom_normal.append((gn[0] * inv, gn[1] * inv, gn[2] * inv))
            self.material_id.append(int(mat))
            self.vertices_array[i, 0] = v0
            self.vertices_array[i, 1] = v1
            self.vertices_array[i, 2] = v2

    @classmethod
    def from_meshes(cls, meshes: list[Mesh]) -> TriangleSet:
        raw = []
        for mesh in meshes:
            for (vi, ni, ti) in mesh.triangles:
                v = [mesh.vertices[j] for j in vi]
                if ni is None:
                    e1 = v[1] - v[0]
                    e2 = v[2] - v[0]
                    gn = np.cross(e1, e2)
                    norm = np.linalg.norm(gn)
                    gn = gn / norm if norm > 0 else np.array([0.0, 0.0, 1.0])
                    n = [gn, gn, gn]
                else:
                    n = [mesh.normals[j] for j in ni]
                if ti is None:
                    uv = [(0.0, 0.0)] * 3
                else:
                    uv = [mesh.uvs[j] for j in ti]
                raw.append((v[0], v[1], v[2], n[0], n[1], n[2], uv[0], uv[1], uv[2], mesh.material_id))
        return cls(raw)

    def tie_key(self, i: int) -> tuple:
        """Content key used to break exact-t intersection ties deterministically."""
        return (self.v0[i], self.e1[i], self.e2[i], self.material_id[i])

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if self.count == 0:
            return np.zeros(3), np.ones(3)
        return (
            self.vertices_array.min(axis=(0, 1)).copy(),
            self.vertices_array.max(axis=(0, 1)).copy(),
        )


def _cross(a, b):
    return (
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    )


_LEAF_SIZE = 4


class SpatialIndex:
    """Median-split BVH; leaves hold at most four triangles."""

    def __init__(self, triangles: TriangleSet):
        self.triangles = triangles
        self.node_bounds: list[tuple[float, float, float, float, float, float]] = []
        self.node_children: list[tuple[int, int]] = []  # (-start-1, count) for leaves
        self.leaf_tris: list[int] = []
        if triangles.count:
            tri_lo = triangles.vertices_array.min(axis=1)
            tri_hi = triangles.vertices_array.max(axis=1)
            centroids = triangles.vertices_array.mean(axis=1)
            self._build(np.arange(triangles.count), tri_lo, tri_hi, centroids)

    def _build(self, idx: np.ndarray, tri_lo, tri_hi, centroids) -> int:
        lo = tri_lo[idx].min(axis=0)
        hi = tri_hi[idx].max(axis=0)
        node = len(self.node_bounds)
        self.node_bounds.append((lo[0], lo[1], lo[2], hi[0], hi[1], hi[2]))
        self.node_children.append((0, 0))  # patched below
        if len(idx) <= _LEAF_SIZE:
            start = len(self.leaf_tris)
            self.leaf_tris.extend(int(i) for i in idx)
            self.node_children[node] = (-start - 1, len(idx))
            return node
        axis = int(np.argmax(hi - lo))
        order = idx[np.argsort(centroids[idx, axis], kind="stable")]
        half = len(order) // 2
        left = self._build(order[:half], tri_lo, tri_hi, centroids)
        right = self._build(order[half:], tri_lo, tri_hi, centroids)
        self.node_children[node] = (left, right)
        return node

    @property
    def node_count(self) -> int:
        return len(self.node_bounds)

    def nearest(
        self,
        ox: float,
        oy: float,
        oz: float,
        dx: float,
        dy: float,
        dz: float,
        t_min: float,
        t_max: float,
        accept=None,
    ):
        """Nearest accepted hit as (t, u, v, tri_id), or None.

        `accept(tri_id, t) -> bool` filters candidate hits (used for
        sub-domain hit ownership). Exact-t ties resolve by triangle
        content key so the winner is independent of traversal order.
        """
        if not self.node_bounds:
            return None
        inv_x = 1.0 / dx if dx != 0.0 else (1e300 if dx >= 0 else -1e300)
        inv_y = 1.0 / dy if dy != 0.0 else (1e300 if dy >= 0 else -1e300)
        inv_z = 1.0 / dz if dz != 0.0 else (1e300 if dz >= 0 else -1e300)
        tris = self.triangles
        v0s, e1s, e2s = tris.v0, tris.e1, tris.e2
        best = None
        best_t = t_max
        stack = [0]
        bounds = self.node_bounds
        children = self.node_children
        leaf = self.leaf_tris
        while stack:
            node = stack.pop()
            bx0, by0, bz0, bx1, by1, bz1 = bounds[node]
            t1 = (bx0 - ox) * inv_x
            t2 = (bx1 - ox) * inv_x
            if t1 > t2:
                t1, t2 = t2, t1
            near, far = t1, t2
            t1 = (by0 - oy) * inv_y
            t2 = (by1 - oy) * inv_y
            if t1 > t2:
                t1, t2 = t2, t1
            if t1 > near:
                near = t1
            if t2 < far:
                far = t2
            t1 = (bz0 - oz) * inv_z
            t2 = (bz1 - oz) * inv_z
            if t1 > t2:
                t1, t2 = t2, t1
            if t1 > near:
                near = t1
            if t2 < far:
                far = t2
            if near > far or far < t_min or near > best_t:
                continue
            a, b = children[node]
            if a < 0:
                start = -a - 1
                for j in range(start, start + b):
                    i = leaf[j]
                    v0 = v0s[i]
                    e1 = e1s[i]
                    e2 = e2s[i]
                    px = dy * e2[2] - dz * e2[1]
                    py = dz * e2[0] - dx * e2[2]
                    pz = dx * e2[1] - dy * e2[0]
                    det = e1[0] * px + e1[1] * py + e1[2] * pz
                    if -1e-14 < det < 1e-14:
                        continue
                    inv_det = 1.0 / det
                    sx = ox - v0[0]
                    sy = oy - v0[1]
                    sz = oz - v0[2]
                    u = (sx * px + sy * py + sz * pz) * inv_det
                    if u < 0.0 or u > 1.0:
                        continue
                    qx = sy * e1[2] - sz * e1[1]
                    qy = sz * e1[0] - sx * e1[2]
                    qz = sx * e1[1] - sy * e1[0]
                    v = (dx * qx + dy * qy + dz * qz) * inv_det
                    if v < 0.0 or u + v > 1.0:
                        continue
                    t = (e2[0] * qx + e2[1] * qy + e2[2] * qz) * inv_det
                    if t <= t_min:
                        continue
                    if best is None:
                        if t >= t_max:
                            continue
                    elif t > best_t or (
                        t == best_t and tris.tie_key(i) >= tris.tie_key(best[3])
                    ):
                        continue
                    if accept is not None and not accept(i, t):
                        continue
                    best = (t, u, v, i)
                    best_t = t
            else:
                stack.append(a)
                stack.append(b)
        return best

    def occluded(
        self,
        ox: float,
        oy: float,
        oz: float,
        dx: float,
        dy: float,
        dz: float,
        t_min: float,
        t_max: float,
    ) -> bool:
        """Any-hit query for shadow rays."""
        if not self.node_bounds:
            return False
        inv_x = 1.0 / dx if dx != 0.0 else (1e300 if dx >= 0 else -1e300)
        inv_y = 1.0 / dy if dy != 0.0 else (1e300 if dy >= 0 else -1e300)
        inv_z = 1.0 / dz if dz != 0.0 else (1e300 if dz >= 0 else -1e300)
        tris = self.triangles
        v0s, e1s, e2s = tris.v0, tris.e1, tris.e2
        stack = [0]
        bounds = self.node_bounds
        children = self.node_children
        leaf = self.leaf_tris
        while stack:
            node = stack.pop()
            bx0, by0, bz0, bx1, by1, bz1 = bounds[node]
            t1 = (bx0 - ox) * inv_x
            t2 = (bx1 - ox) * inv_x
            if t1 > t2:
                t1, t2 = t2, t1
            near, far = t1, t2
            t1 = (by0 - oy) * inv_y
            t2 = (by1 - oy) * inv_y
            if t1 > t2:
                t1, t2 = t2, t1
            if t1 > near:
                near = t1
            if t2 < far:
                far = t2
            t1 = (bz0 - oz) * inv_z
            t2 = (bz1 - oz) * inv_z
            if t1 > t2:
                t1, t2 = t2, t1
            if t1 > near:
                near = t1
            if t2 < far:
                far = t2
            if near > far or far < t_min or near > t_max:
                continue
            a, b = children[node]
            if a < 0:
                start = -a - 1
                for j in range(start, start + b):
                    i = leaf[j]
                    v0 = v0s[i]
                    e1 = e1s[i]
                    e2 = e2s[i]
                    px = dy * e2[2] - dz * e2[1]
                    py = dz * e2[0] - dx * e2[2]
                    pz = dx * e2[1] - dy * e2[0]
                    det = e1[0] * px + e1[1] * py + e1[2] * pz
                    if -1e-14 < det < 1e-14:
                        continue
                    inv_det = 1.0 / det
                    sx = ox - v0[0]
                    sy = oy - v0[1]
                    sz = oz - v0[2]
                    u = (sx * px + sy * py + sz * pz) * inv_det
                    if u < 0.0 or u > 1.0:
                        continue
                    qx = sy * e1[2] - sz * e1[1]
                    qy = sz * e1[0] - sx * e1[2]
                    qz = sx * e1[1] - sy * e1[0]
                    v = (dx * qx + dy * qy + dz * qz) * inv_det
                    if v < 0.0 or u + v > 1.0:
                        continue
                    t = (e2[0] * qx + e2[1] * qy + e2[2] * qz) * inv_det
                    if t_min < t < t_max:
                        return True
            else:
                stack.append(a)
                stack.append(b)
        return False

    def make_hit(self, origin: np.ndarray, direction: np.ndarray, found) -> Hit:
        t, u, v, i = found
        tris = self.triangles
        point = origin + t * direction
        gn = np.array(tris.geom_normal[i])
        dxn = float(direction @ gn)
        if dxn > 0.0:
            gn = -gn
        w = 1.0 - u - v
        n0, n1, n2 = tris.n0[i], tris.n1[i], tris.n2[i]
        sn = np.array(
            [
                w * n0[0] + u * n1[0] + v * n2[0],
                w * n0[1] + u * n1[1] + v * n2[1],
                w * n0[2] + u * n1[2] + v * n2[2],
            ]
        )
        norm = float(np.linalg.norm(sn))
        sn = sn / norm if norm > 1e-12 else gn.copy()
        if float(sn @ gn) < 0.0:
            sn = -sn
        uv0, uv1, uv2 = tris.uv0[i], tris.uv1[i], tris.uv2[i]
        uv = (
            w * uv0[0] + u * uv1[0] + v * uv2[0],
            w * uv0[1] + u * uv1[1] + v * uv2[1],
        )
        return Hit(t, point, gn, sn, uv, tris.material_id[i], i)


@dataclass
class Scene:
    """Parsed scene plus the flattened triangle soup used by the tracer."""

    path: Path | None
    camera: Camera
    lights: list[SunLight]
    light_specs: list[tuple[float, float, float, float, float]]
    materials: list[Material]
    material_names: list[str]
    meshes: list[Mesh]
    textures: dict[str, tuple[TransmittanceMap, str]]
    material_sources: list[tuple]
    triangles: TriangleSet = field(default=None)
    bounds_lo: np.ndarray = field(default=None)
    bounds_hi: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.triangles is None:
            self.triangles = TriangleSet.from_meshes(self.meshes)
        if self.bounds_lo is None:
            self.bounds_lo, self.bounds_hi = self.triangles.bounds()

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.bounds_hi - self.bounds_lo))

    def material_index(self, name: str) -> int:
        return self.material_names.index(name)


def build_index(scene_or_triangles) -> SpatialIndex:
    """Build the BVH for a scene (or directly for a TriangleSet)."""
    if isinstance(scene_or_triangles, TriangleSet):
        return SpatialIndex(scene_or_triangles)
    if isinstance(scene_or_triangles, Scene):
        return SpatialIndex(scene_or_triangles.triangles)
    return SpatialIndex(TriangleSet.from_meshes(list(scene_or_triangles)))


def intersect(ray, index: SpatialIndex, t_min: float = RAY_EPS, t_max: float = math.inf):
    """Nearest hit with t in (t_min, t_max), or None.

    `ray` is anything with unit `.direction` and `.origin` ndarrays.
    """
    origin = np.asarray(ray.origin, dtype=np.float64)
    direction = np.asarray(ray.direction, dtype=np.float64)
    found = index.nearest(
        origin[0], origin[1], origin[2],
        direction[0], direction[1], direction[2],
        t_min, t_max,
    )
    if found is None:
        return None
    return index.make_hit(origin, direction, found)


def generate_ray(
    camera: Camera, pixel_x: int, pixel_y: int, jitter: tuple[float, float]
) -> tuple[np.ndarray, np.ndarray]:
    """Pinhole camera ray through the pixel footprint at the given jitter.

    Returns (origin, unit direction); pixel (0, 0) is the top-left corner.
    """
    if not (0 <= pixel_x < camera.width and 0 <= pixel_y < camera.height):
        raise ValueError(f"pixel ({pixel_x}, {pixel_y}) outside the image")
    fwd, right, up = camera.basis()
    half_h = math.tan(math.radians(camera.vertical_fov) / 2.0)
    half_w = half_h * camera.width / camera.height
    sx = (pixel_x + jitter[0]) / camera.width * 2.0 - 1.0
    sy = 1.0 - (pixel_y + jitter[1]) / camera.height * 2.0
    direction = fwd + right * (sx * half_w) + up * (sy * half_h)
    direction = direction / np.linalg.norm(direction)
    return camera.position.copy(), direction


# ---------------------------------------------------------------------------
# Scene file parsing


def _floats(parts, n, path, line_no, what):
    if len(parts) != n:
        raise SceneError(path, f"{what} expects {n} numbers, got {len(parts)}", line_no)
    try:
        return [float(p) for p in parts]
    except ValueError:
        raise SceneError(path, f"non-numeric value in {what}", line_no)


def _resolve(base_dir: Path, ref: str, path, line_no) -> Path:
    p = base_dir / ref
    if not p.exists():
        raise SceneError(path, f"referenced file not found: {p}", line_no)
    return p


def parse_scene(path) -> Scene:
    """Parse a scene file; raises SceneError with line numbers on problems."""
    path = Path(path)
    if not path.exists():
        raise SceneError(path, "scene file not found")
    base_dir = path.parent
    grid = default_grid()

    camera = None
    lights: list[SunLight] = []
    light_specs: list[tuple[float, float, float, float, float]] = []
    materials: list[Material] = []
    material_names: list[str] = []
    material_lines: dict[str, int] = {}
    material_sources: list[tuple] = []
    textures: dict[str, tuple[TransmittanceMap, str]] = {}
    meshes: list[Mesh] = []

    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.readlines()

    mesh_state = None  # (material_id, verts, normals, uvs, faces, start_line)
    for line_no, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        directive = parts[0]

        if mesh_state is not None:
            mat_id, verts, normals, uvs, faces, start_line = mesh_state
            if directive == "v":
                verts.append(_floats(parts[1:], 3, path, line_no, "v"))
            elif directive == "vn":
                n = np.array(_floats(parts[1:], 3, path, line_no, "vn"))
                norm = np.linalg.norm(n)
                if norm == 0.0:
                    raise SceneError(path, "zero-length vn", line_no)
                normals.append(n / norm)
            elif directive == "vt":
                uvs.append(_floats(parts[1:], 2, path, line_no, "vt"))
            elif directive == "f":
                faces.append((parts[1:], line_no))
            elif directive == "endmesh":
                meshes.append(
                    _finish_mesh(path, mat_id, verts, normals, uvs, faces, start_line)
                )
                mesh_state = None
            else:
                raise SceneError(
                    path, f"unknown directive {directive!r} inside mesh block", line_no
                )
            continue

        if directive == "camera":
            vals = _floats(parts[1:], 12, path, line_no, "camera")
            camera = Camera(
                position=np.array(vals[0:3]),
                look_at=np.array(vals[3:6]),
                up=np.array(vals[6:9]) / np.linalg.norm(vals[6:9]),
                vertical_fov=vals[9],
                width=int(vals[10]),
                height=int(vals[11]),
            )
        elif directive == "sun":
            vals = _floats(parts[1:], 5, path, line_no, "sun")
            elevation, azimuth, temperature, tau_550, power = vals
            emission = solar_spectrum(temperature, elevation, tau_550, power, grid)
            lights.append(
                SunLight(direction_from_angles(elevation, azimuth), emission)
            )
            light_specs.append(tuple(vals))
        elif directive == "texture":
            if len(parts) != 3:
                raise SceneError(path, "texture expects: texture <name> <file>", line_no)
            name, ref = parts[1], parts[2]
            if name in textures:
                raise SceneError(path, f"duplicate texture name {name!r}", line_no)
            textures[name] = (
                load_transmittance_map(_resolve(base_dir, ref, path, line_no), grid),
                ref,
            )
        elif directive == "material":
            if len(parts) < 3:
                raise SceneError(path, "material expects: material <name> <kind> ...", line_no)
            name, kind = parts[1], parts[2]
            if name in material_lines:
                raise SceneError(
                    path,
                    f"duplicate material name {name!r} "
                    f"(first defined at line {material_lines[name]})",
                    line_no,
                )
            args = parts[3:]
            if kind == "lambertian":
                if len(args) == 2 and args[0] == "const":
                    refl = Spectrum.constant(float(args[1]), grid)
                    source = ("lambertian", "const", args[1])
                elif len(args) == 1:
                    refl = load_spd(_resolve(base_dir, args[0], path, line_no), grid)
                    source = ("lambertian", "file", args[0])
                else:
                    raise SceneError(
                        path, "lambertian expects <spd-file> or const <value>", line_no
                    )
                mat = Lambertian(refl.require_unit_interval("reflectance"))
            elif kind == "dielectric":
                if len(args) != 2:
                    raise SceneError(
                        path, "dielectric expects <ior-file> <texture-name>", line_no
                    )
                ior = load_ior(_resolve(base_dir, args[0], path, line_no), grid)
                if args[1] not in textures:
                    raise SceneError(
                        path, f"dielectric references unknown texture {args[1]!r}", line_no
                    )
                mat = FresnelDielectric(ior, textures[args[1]][0])
                source = ("dielectric", args[0], args[1])
            elif kind == "conductor":
                if len(args) != 1:
                    raise SceneError(path, "conductor expects <ior-file>", line_no)
                mat = FresnelConductor(
                    load_ior(_resolve(base_dir, args[0], path, line_no), grid)
                )
                source = ("conductor", args[0])
            else:
                raise SceneError(path, f"unknown material kind {kind!r}", line_no)
            material_lines[name] = line_no
            material_names.append(name)
            materials.append(mat)
            material_sources.append(source)
        elif directive == "mesh":
            if len(parts) != 2:
                raise SceneError(path, "mesh expects: mesh <material-name>", line_no)
            if parts[1] not in material_names:
                raise SceneError(
                    path, f"mesh references undefined material {parts[1]!r}", line_no
                )
            mesh_state = (material_names.index(parts[1]), [], [], [], [], line_no)
        else:
            raise SceneError(path, f"unknown directive {directive!r}", line_no)

    if mesh_state is not None:
        raise SceneError(path, "unterminated mesh block (missing endmesh)", mesh_state[5])
    if camera is None:
        raise SceneError(path, "scene has no camera directive")

    return Scene(
        path=path,
        camera=camera,
        lights=lights,
        light_specs=light_specs,
        materials=materials,
        material_names=material_names,
        meshes=meshes,
        textures=textures,
        material_sources=material_sources,
    )


def _parse_face_vertex(token: str, path, line_no):
    fields = token.split("/")
    if len(fields) > 3 or not fields[0]:
        raise SceneError(path, f"bad face vertex {token!r}", line_no)
    try:
        v = int(fields[0])
        vt = int(fields[1]) if len(fields) > 1 and fields[1] else None
        vn = int(fields[2]) if len(fields) > 2 and fields[2] else None
    except ValueError:
        raise SceneError(path, f"non-integer face index in {token!r}", line_no)
    return v, vt, vn


def _finish_mesh(path, mat_id, verts, normals, uvs, faces, start_line) -> Mesh:
    if not verts:
        raise SceneError(path, "mesh block has no vertices", start_line)
    vertices = np.array(verts)
    norm_arr = np.array(normals) if normals else np.zeros((0, 3))
    uv_arr = np.array(uvs) if uvs else np.zeros((0, 2))
    triangles = []
    for tokens, line_no in faces:
        if len(tokens) < 3:
            raise SceneError(path, "face needs at least 3 vertices", line_no)
        parsed = [_parse_face_vertex(tok, path, line_no) for tok in tokens]
        for v, vt, vn in parsed:
            if not 1 <= v <= len(verts):
                raise SceneError(path, f"vertex index {v} out of range", line_no)
            if vt is not None and not 1 <= vt <= len(uvs):
                raise SceneError(path, f"uv index {vt} out of range", line_no)
            if vn is not None and not 1 <= vn <= len(normals):
                raise SceneError(path, f"normal index {vn} out of range", line_no)
        for k in range(1, len(parsed) - 1):
            tri = (parsed[0], parsed[k], parsed[k + 1])
            vi = tuple(p[0] - 1 for p in tri)
            ti = tuple(p[1] - 1 for p in tri) if all(p[1] is not None for p in tri) else None
            ni = tuple(p[2] - 1 for p in tri) if all(p[2] is not None for p in tri) else None
            a, b, c = (vertices[j] for j in vi)
            area = 0.5 * np.linalg.norm(np.cross(b - a, c - a))
            if area <= MIN_TRIANGLE_AREA:
                raise SceneError(path, f"degenerate triangle (area {area:g})", line_no)
            triangles.append((vi, ni, ti))
    return Mesh(vertices, norm_arr, uv_arr, triangles, mat_id)


# ---------------------------------------------------------------------------
# Serialization (used by the parser round-trip check and partition files)


def _fmt(x: float) -> str:
    return repr(float(x))


def serialize_scene(scene: Scene) -> str:
    """Textual form that re-parses (relative to the original base directory)
    to an equal scene."""
    out = []
    c = scene.camera
    out.append(
        "camera "
        + " ".join(_fmt(v) for v in (*c.position, *c.look_at, *c.up))
        + f" {_fmt(c.vertical_fov)} {c.width} {c.height}"
    )
    for spec in scene.light_specs:
        out.append("sun " + " ".join(_fmt(v) for v in spec))
    for name, (_, ref) in scene.textures.items():
        out.append(f"texture {name} {ref}")
    for name, source in zip(scene.material_names, scene.material_sources):
        if source[0] == "lambertian":
            if source[1] == "const":
                out.append(f"material {name} lambertian const {source[2]}")
            else:
                out.append(f"material {name} lambertian {source[2]}")
        elif source[0] == "dielectric":
            out.append(f"material {name} dielectric {source[1]} {source[2]}")
        else:
            out.append(f"material {name} conductor {source[1]}")
    for mesh in scene.meshes:
        out.append(f"mesh {scene.material_names[mesh.material_id]}")
        out.extend(serialize_mesh_block(mesh))
        out.append("endmesh")
    return "\n".join(out) + "\n"


def serialize_mesh_block(mesh: Mesh) -> list[str]:
    lines = []
    for v in mesh.vertices:
        lines.append("v " + " ".join(_fmt(c) for c in v))
    for n in mesh.normals:
        lines.append("vn " + " ".join(_fmt(c) for c in n))
    for uv in mesh.uvs:
        lines.append("vt " + " ".join(_fmt(c) for c in uv))
    for (vi, ni, ti) in mesh.triangles:
        toks = []
        for k in range(3):
            tok = str(vi[k] + 1)
            if ti is not None or ni is not None:
                tok += "/" + (str(ti[k] + 1) if ti is not None else "")
                if ni is not None:
                    tok += "/" + str(ni[k] + 1)
            toks.append(tok)
        lines.append("f " + " ".join(toks))
    return lines


def scenes_equal(a: Scene, b: Scene) -> bool:
    """Structural equality of two parsed scenes (exact float comparison)."""
    if (
        a.material_names != b.material_names
        or a.light_specs != b.light_specs
        or len(a.meshes) != len(b.meshes)
    ):
        return False
    ca, cb = a.camera, b.camera
    if (
        not np.array_equal(ca.position, cb.position)
        or not np.array_equal(ca.look_at, cb.look_at)
        or not np.array_equal(ca.up, cb.up)
        or ca.vertical_fov != cb.vertical_fov
        or (ca.width, ca.height) != (cb.width, cb.height)
    ):
        return False
    for la, lb in zip(a.lights, b.lights):
        if not np.array_equal(la.direction, lb.direction):
            return False
        if not np.array_equal(la.emission.values, lb.emission.values):
            return False
    for ma, mb in zip(a.materials, b.materials):
        if type(ma) is not type(mb):
            return False
        if isinstance(ma, Lambertian):
            if not np.array_equal(ma.reflectance.values, mb.reflectance.values):
                return False
        elif isinstance(ma, FresnelDielectric):
            if not np.array_equal(ma.ior.n, mb.ior.n) or not np.array_equal(
                ma.ior.k, mb.ior.k
            ):
                return False
            if not np.array_equal(ma.bulk.texels, mb.bulk.texels):
                return False
        else:
            if not np.array_equal(ma.ior.n, mb.ior.n) or not np.array_equal(
                ma.ior.k, mb.ior.k
            ):
                return False
    for mesh_a, mesh_b in zip(a.meshes, b.meshes):
        if (
            not np.array_equal(mesh_a.vertices, mesh_b.vertices)
            or not np.array_equal(mesh_a.normals, mesh_b.normals)
            or not np.array_equal(mesh_a.uvs, mesh_b.uvs)
            or mesh_a.triangles != mesh_b.triangles
            or mesh_a.material_id != mesh_b.material_id
        ):
            return False
    return True
