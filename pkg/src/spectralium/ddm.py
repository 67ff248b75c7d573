"""Domain-decomposition scheduler for the renderer.

The scene box is split into 2^k axis-aligned sub-domains; each owns the
triangles intersecting its box (boundary triangles are replicated, with
hit ownership resolved by the sub-domain containing the hit point, ties
to the lower id). Rays are processed per sub-domain and handed to the
neighbor through the shared face when they leave; shadow rays travel as
occlusion probes whose verdict resolves a pending direct-light term.
Sub-domain geometry lives in per-sub-domain partition files and is
loaded on demand by a loader thread that overlaps I/O with ray
processing, holding at most max_resident sub-domains (plus the one being
swapped in).

Termination is detected by message counting: every enqueue increments
and every retirement decrements a global in-flight counter, children are
always counted before their parent retires, so the counter reaches zero
exactly when no work remains anywhere.
"""

from __future__ import annotations

import contextlib
import math
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .colorimetry import standard_observer, xyz_from_values
from .render import (
    KIND_CAMERA,
    KIND_PHOTON,
    KIND_SHADOW,
    KIND_SPECULAR,
    ImageAccumulator,
    Photon,
    PhotonMap,
    PhotonMaps,
    RenderContext,
    RenderSettings,
    RAY_EPS,
    _estimate_values,
    _pixel_jitter,
    coarse_thread_switching,
    direct_terms,
    emit_photon,
    photon_interaction,
    run_pixel_pool,
    specular_children,
    trace_photons,
)
from .scene import (
    Lambertian,
    Scene,
    SpatialIndex,
    TriangleSet,
    generate_ray,
)
from .spectral import default_grid

__all__ = [
    "DdmError",
    "ProtocolError",
    "DeadlockError",
    "RayMessage",
    "SubDomain",
    "DomainQueues",
    "MessageLedger",
    "ScheduleMetrics",
    "partition",
    "write_partition_files",
    "loader",
    "load_from_scene",
    "advance_ray",
    "run_ddm",
    "encode_message",
    "decode_message",
    "WIRE_SIZE",
]


class DdmError(RuntimeError):
    pass


class ProtocolError(DdmError):
    """A message arrived outside its destination sub-domain."""


class DeadlockError(DdmError):
    """No worker made progress while messages were still in flight."""


ENTRY_TOLERANCE = 1e-6  # meters
_BATCH = 64
_MAX_HOPS_FACTOR = 16

_UNIT_THROUGHPUT = np.ones(default_grid().count)
_UNIT_THROUGHPUT.setflags(write=False)


# ---------------------------------------------------------------------------
# Messages and the wire codec


@dataclass
class RayMessage:
    """A ray crossing between sub-domains.

    The wire layout carries (entry_point, direction, depth, pixel_id,
    kind, partial_t, throughput); the remaining fields are in-process
    bookkeeping. `origin` keeps the exact ray origin so geometry is
    re-evaluated bit-identically to a single-domain trace; a decoded wire
    message reconstructs it from entry_point - partial_t * direction.
    """

    entry_point: np.ndarray
    direction: np.ndarray
    throughput: np.ndarray
    depth: int
    pixel_id: int
    kind: int
    partial_t: float
    origin: np.ndarray | None = None
    term_id: int = 0
    light_index: int = 0
    photon_id: int = 0
    specular_only: bool = True
    hops: int = 0

    def ray_origin(self) -> np.ndarray:
        if self.origin is not None:
            return self.origin
        return self.entry_point - self.partial_t * self.direction


_WIRE = struct.Struct("<3d3dIQBd81f")
WIRE_SIZE = _WIRE.size  # 393 bytes


def encode_message(msg: RayMessage) -> bytes:
    """Fixed little-endian layout: entry_point (3xf64), direction (3xf64),
    depth (u32), pixel_id (u64), kind (u8), partial_t (f64),
    throughput (81xf32)."""
    throughput = np.asarray(msg.throughput, dtype=np.float32)
    if throughput.shape != (81,):
        raise ValueError("wire codec carries exactly 81 throughput samples")
    return _WIRE.pack(
        float(msg.entry_point[0]),
        float(msg.entry_point[1]),
        float(msg.entry_point[2]),
        float(msg.direction[0]),
        float(msg.direction[1]),
        float(msg.direction[2]),
        msg.depth,
        msg.pixel_id,
        msg.kind,
        float(msg.partial_t),
        *throughput.tolist(),
    )


def decode_message(data: bytes) -> RayMessage:
    if len(data) != _WIRE.size:
        raise ValueError(f"wire message must be {_WIRE.size} bytes, got {len(data)}")
    fields = _WIRE.unpack(data)
    return RayMessage(
        entry_point=np.array(fields[0:3]),
        direction=np.array(fields[3:6]),
        depth=fields[6],
        pixel_id=fields[7],
        kind=fields[8],
        partial_t=fields[9],
        throughput=np.array(fields[10:], dtype=np.float64),
    )


# ---------------------------------------------------------------------------
# Partitioning


@dataclass
class SubDomain:
    """Axis-aligned cell of the scene with its geometry subset."""

    id: int
    box_lo: np.ndarray
    box_hi: np.ndarray
    interfaces: list[tuple[int, int, float]]  # (neighbor_id, axis, plane)
    tri_ids: list[int]
    n_triangles: int
    owned_count: int = 0  # triangles whose centroid lies in this cell
    resident: bool = False
    triangles: TriangleSet | None = None
    index: SpatialIndex | None = None
    file_path: Path | None = None


@dataclass
class Partition:
    subs: list[SubDomain]
    tree: tuple  # nested ("node", axis, plane, left, right) / ("leaf", id)
    global_lo: np.ndarray
    global_hi: np.ndarray
    total_triangles: int

    def locate_point(self, x: float, y: float, z: float) -> int:
        node = self.tree
        p = (x, y, z)
        while node[0] == "node":
            _, axis, plane, left, right = node
            node = left if p[axis] <= plane else right
        return node[1]

    def locate_entering(self, point: np.ndarray, direction: np.ndarray) -> int:
        node = self.tree
        while node[0] == "node":
            _, axis, plane, left, right = node
            c = point[axis]
            if c < plane:
                node = left
            elif c > plane:
                node = right
            else:
                node = right if direction[axis] > 0.0 else left
        return node[1]


def _split_boxes(lo: np.ndarray, hi: np.ndarray, levels: int, counter: list[int]):
    if levels == 0:
        leaf_id = counter[0]
        counter[0] += 1
        return ("leaf", leaf_id), [(lo, hi)]
    axis = int(np.argmax(hi - lo))
    plane = 0.5 * (lo[axis] + hi[axis])
    mid_lo = lo.copy()
    mid_hi = hi.copy()
    mid_hi[axis] = plane
    left, lboxes = _split_boxes(lo, mid_hi, levels - 1, counter)
    lo2 = lo.copy()
    lo2[axis] = plane
    right, rboxes = _split_boxes(lo2, hi, levels - 1, counter)
    return ("node", axis, plane, left, right), lboxes + rboxes


def _tri_box_overlap(v0, v1, v2, lo, hi) -> bool:
    """Separating-axis triangle/AABB test, inclusive of touching contact."""
    cx = (lo[0] + hi[0]) * 0.5
    cy = (lo[1] + hi[1]) * 0.5
    cz = (lo[2] + hi[2]) * 0.5
    hx = (hi[0] - lo[0]) * 0.5
    hy = (hi[1] - lo[1]) * 0.5
    hz = (hi[2] - lo[2]) * 0.5
    p0 = (v0[0] - cx, v0[1] - cy, v0[2] - cz)
    p1 = (v1[0] - cx, v1[1] - cy, v1[2] - cz)
    p2 = (v2[0] - cx, v2[1] - cy, v2[2] - cz)
    # box axes
    for i, h in ((0, hx), (1, hy), (2, hz)):
        mn = min(p0[i], p1[i], p2[i])
        mx = max(p0[i], p1[i], p2[i])
        if mn > h or mx < -h:
            return False
    e0 = (p1[0] - p0[0], p1[1] - p0[1], p1[2] - p0[2])
    e1 = (p2[0] - p1[0], p2[1] - p1[1], p2[2] - p1[2])
    e2 = (p0[0] - p2[0], p0[1] - p2[1], p0[2] - p2[2])
    # triangle plane
    nx = e0[1] * e1[2] - e0[2] * e1[1]
    ny = e0[2] * e1[0] - e0[0] * e1[2]
    nz = e0[0] * e1[1] - e0[1] * e1[0]
    d = nx * p0[0] + ny * p0[1] + nz * p0[2]
    r = hx * abs(nx) + hy * abs(ny) + hz * abs(nz)
    if abs(d) > r:
        return False
    # nine edge cross axes
    for ex, ey, ez in (e0, e1, e2):
        for ax, ay, az in ((0.0, -ez, ey), (ez, 0.0, -ex), (-ey, ex, 0.0)):
            q0 = ax * p0[0] + ay * p0[1] + az * p0[2]
            q1 = ax * p1[0] + ay * p1[1] + az * p1[2]
            q2 = ax * p2[0] + ay * p2[1] + az * p2[2]
            r = hx * abs(ax) + hy * abs(ay) + hz * abs(az)
            if min(q0, q1, q2) > r or max(q0, q1, q2) < -r:
                return False
    return True


def partition(scene: Scene, n_subdomains: int) -> Partition:
    """Recursive midpoint split along the longest axis into 2^k cells.

    Every triangle is assigned to every cell its closure intersects, so
    boundary triangles are replicated; interfaces come from face
    adjacency of the cells.
    """
    if n_subdomains < 1 or (n_subdomains & (n_subdomains - 1)) != 0:
        raise ValueError("n_subdomains must be a power of two")
    levels = n_subdomains.bit_length() - 1
    lo, hi = scene.bounds_lo.copy(), scene.bounds_hi.copy()
    tree, boxes = _split_boxes(lo, hi, levels, [0])

    tris = scene.triangles
    part_probe = Partition([], tree, lo, hi, tris.count)
    assignments: list[list[int]] = [[] for _ in range(n_subdomains)]
    owned = [0] * n_subdomains
    for t in range(tris.count):
        va = tris.vertices_array[t]
        for s, (blo, bhi) in enumerate(boxes):
            if _tri_box_overlap(va[0], va[1], va[2], blo, bhi):
                assignments[s].append(t)
        centroid = va.mean(axis=0)
        owned[part_probe.locate_point(centroid[0], centroid[1], centroid[2])] += 1

    subs = []
    for s, (blo, bhi) in enumerate(boxes):
        interfaces = []
        for o, (olo, ohi) in enumerate(boxes):
            if o == s:
                continue
            face = _shared_face(blo, bhi, olo, ohi)
            if face is not None:
                interfaces.append((o, face[0], face[1]))
        subs.append(
            SubDomain(
                id=s,
                box_lo=blo,
                box_hi=bhi,
                interfaces=interfaces,
                tri_ids=assignments[s],
                n_triangles=len(assignments[s]),
                owned_count=owned[s],
            )
        )
    return Partition(subs, tree, lo, hi, tris.count)


def _shared_face(alo, ahi, blo, bhi):
    """(axis, plane) when two boxes touch over a positive-area face."""
    for axis in range(3):
        if ahi[axis] == blo[axis] or alo[axis] == bhi[axis]:
            plane = ahi[axis] if ahi[axis] == blo[axis] else alo[axis]
            area = 1.0
            for other in range(3):
                if other == axis:
                    continue
                overlap = min(ahi[other], bhi[other]) - max(alo[other], blo[other])
                if overlap <= 0.0:
                    area = 0.0
                    break
            if area > 0.0:
                return axis, float(plane)
    return None


# ---------------------------------------------------------------------------
# Partition files and the loader


def write_partition_files(scene: Scene, part: Partition, directory) -> None:
    """One file per sub-domain: a header line, then mesh blocks."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tris = scene.triangles
    for sub in part.subs:
        lines = [
            "subdomain "
            + str(sub.id)
            + " "
            + " ".join(repr(float(v)) for v in (*sub.box_lo, *sub.box_hi))
            + " interfaces "
            + " ".join(str(n) for n, _, _ in sub.interfaces)
        ]
        by_material: dict[int, list[int]] = {}
        for t in sorted(sub.tri_ids):
            by_material.setdefault(tris.material_id[t], []).append(t)
        for mat_id, ids in sorted(by_material.items()):
            lines.append(f"mesh {scene.material_names[mat_id]}")
            for t in ids:
                va = tris.vertices_array[t]
                for corner in range(3):
                    lines.append("v " + " ".join(repr(float(c)) for c in va[corner]))
                for n in (tris.n0[t], tris.n1[t], tris.n2[t]):
                    lines.append("vn " + " ".join(repr(float(c)) for c in n))
                for uv in (tris.uv0[t], tris.uv1[t], tris.uv2[t]):
                    lines.append("vt " + " ".join(repr(float(c)) for c in uv))
            for k in range(len(ids)):
                base = 3 * k
                lines.append(
                    "f "
                    + " ".join(
                        f"{base + c + 1}/{base + c + 1}/{base + c + 1}"
                        for c in range(3)
                    )
                )
        sub.file_path = directory / f"subdomain_{sub.id:03d}.part"
        sub.file_path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_partition_geometry(path: Path, scene: Scene) -> TriangleSet:
    raw_rows = []
    material_id = None
    verts: list[tuple] = []
    norms: list[tuple] = []
    uvs: list[tuple] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            tag = parts[0]
            if tag == "subdomain":
                continue
            if tag == "mesh":
                material_id = scene.material_names.index(parts[1])
                verts, norms, uvs = [], [], []
            elif tag == "v":
                verts.append(tuple(float(c) for c in parts[1:4]))
            elif tag == "vn":
                norms.append(tuple(float(c) for c in parts[1:4]))
            elif tag == "vt":
                uvs.append(tuple(float(c) for c in parts[1:3]))
            elif tag == "f":
                idx = [int(tok.split("/")[0]) - 1 for tok in parts[1:4]]
                raw_rows.append(
                    (
                        verts[idx[0]], verts[idx[1]], verts[idx[2]],
                        norms[idx[0]], norms[idx[1]], norms[idx[2]],
                        uvs[idx[0]], uvs[idx[1]], uvs[idx[2]],
                        material_id,
                    )
                )
    return TriangleSet(raw_rows)


def loader(
    sub: SubDomain,
    scene: Scene,
    load_cost_ms: float = 0.0,
    total_triangles: int | None = None,
) -> SubDomain:
    """Read the sub-domain's partition file and build its spatial index.

    The synthetic delay emulates large-model I/O: load_cost_ms is the
    cost of reading the whole model, and each sub-domain pays the share
    of it that it owns (triangles whose centroid lies in its cell, so the
    shares of a decomposition sum to the whole-model cost regardless of
    boundary replication).
    """
    if sub.resident:
        raise DdmError(f"sub-domain {sub.id} is already resident")
    if sub.file_path is None or not Path(sub.file_path).exists():
        raise DdmError(f"partition file missing for sub-domain {sub.id}")
    if load_cost_ms > 0.0:
        total = total_triangles if total_triangles else max(sub.owned_count, 1)
        frac = sub.owned_count / max(total, 1)
        time.sleep(load_cost_ms / 1000.0 * frac)
    sub.triangles = _read_partition_geometry(Path(sub.file_path), scene)
    sub.index = SpatialIndex(sub.triangles)
    sub.resident = True
    return sub


def load_from_scene(sub: SubDomain, scene: Scene) -> SubDomain:
    """Populate a sub-domain directly from the in-memory scene, in the
    same (material, id) order the partition file uses."""
    tris = scene.triangles
    raw = []
    for t in sorted(sub.tri_ids, key=lambda i: (tris.material_id[i], i)):
        va = tris.vertices_array[t]
        raw.append(
            (
                tuple(va[0]), tuple(va[1]), tuple(va[2]),
                tris.n0[t], tris.n1[t], tris.n2[t],
                tris.uv0[t], tris.uv1[t], tris.uv2[t],
                tris.material_id[t],
            )
        )
    sub.triangles = TriangleSet(raw)
    sub.index = SpatialIndex(sub.triangles)
    sub.resident = True
    return sub


def _unload(sub: SubDomain) -> None:
    sub.triangles = None
    sub.index = None
    sub.resident = False


# ---------------------------------------------------------------------------
# Ray advancement


def _box_exit(origin, direction, lo, hi):
    """(t_exit, axis, plane) where the ray leaves the box."""
    best_t = math.inf
    best_axis = 0
    best_plane = 0.0
    for axis in range(3):
        d = direction[axis]
        if d > 0.0:
            t = (hi[axis] - origin[axis]) / d
            plane = hi[axis]
        elif d < 0.0:
            t = (lo[axis] - origin[axis]) / d
            plane = lo[axis]
        else:
            continue
        if t < best_t:
            best_t = t
            best_axis = axis
            best_plane = plane
    return best_t, best_axis, best_plane


def advance_ray(msg: RayMessage, sub: SubDomain, part: Partition):
    """Advance a message through one sub-domain.

    Returns ("hit", Hit), ("exit", RayMessage) toward the neighbor, or
    ("escape", None) when the ray leaves the scene bounds. A hit is
    accepted only if its point lies in this sub-domain (ownership of
    replicated boundary triangles; plane ties go to the lower id).
    """
    if not sub.resident:
        raise DdmError(f"sub-domain {sub.id} is not resident")
    e = msg.entry_point
    if (
        e[0] < sub.box_lo[0] - ENTRY_TOLERANCE
        or e[1] < sub.box_lo[1] - ENTRY_TOLERANCE
        or e[2] < sub.box_lo[2] - ENTRY_TOLERANCE
        or e[0] > sub.box_hi[0] + ENTRY_TOLERANCE
        or e[1] > sub.box_hi[1] + ENTRY_TOLERANCE
        or e[2] > sub.box_hi[2] + ENTRY_TOLERANCE
    ):
        raise ProtocolError(
            f"message entry point {e} outside sub-domain {sub.id} box"
        )
    origin = msg.ray_origin()
    d = msg.direction
    ox, oy, oz = float(origin[0]), float(origin[1]), float(origin[2])
    dx, dy, dz = float(d[0]), float(d[1]), float(d[2])
    sub_id = sub.id
    locate = part.locate_point

    def owned(_i, t):
        return locate(ox + t * dx, oy + t * dy, oz + t * dz) == sub_id

    found = sub.index.nearest(ox, oy, oz, dx, dy, dz, RAY_EPS, math.inf, accept=owned)
    if found is not None:
        return "hit", sub.index.make_hit(origin, d, found)
    return _pass_through(msg, sub, part)


def _pass_through(msg: RayMessage, sub: SubDomain, part: Partition):
    """Geometric exit of a message that hits nothing in this sub-domain."""
    origin = msg.ray_origin()
    d = msg.direction
    t_exit, axis, plane = _box_exit(origin, d, sub.box_lo, sub.box_hi)
    if not math.isfinite(t_exit):
        return "escape", None
    if plane == part.global_lo[axis] or plane == part.global_hi[axis]:
        return "escape", None
    exit_point = origin + t_exit * d
    exit_point[axis] = plane  # snap exactly onto the interface plane
    if msg.hops + 1 > _MAX_HOPS_FACTOR * max(len(part.subs), 1):
        raise ProtocolError(
            f"message exceeded hop bound between sub-domains (pixel {msg.pixel_id})"
        )
    forwarded = RayMessage(
        entry_point=exit_point,
        direction=msg.direction,
        throughput=msg.throughput,
        depth=msg.depth,
        pixel_id=msg.pixel_id,
        kind=msg.kind,
        partial_t=float(t_exit),
        origin=msg.origin,
        term_id=msg.term_id,
        light_index=msg.light_index,
        photon_id=msg.photon_id,
        specular_only=msg.specular_only,
        hops=msg.hops + 1,
    )
    return "exit", forwarded


# ---------------------------------------------------------------------------
# Queues, ledger, metrics


class DomainQueues:
    """Per-sub-domain multi-producer message queues."""

    def __init__(self, n: int):
        self._queues = [deque() for _ in range(n)]
        self._locks = [threading.Lock() for _ in range(n)]
        self.historical_max = [0] * n

    def push(self, sub_id: int, msg: RayMessage) -> None:
        with self._locks[sub_id]:
            q = self._queues[sub_id]
            q.append(msg)
            if len(q) > self.historical_max[sub_id]:
                self.historical_max[sub_id] = len(q)

    def pop_batch(self, sub_id: int, k: int) -> list[RayMessage]:
        out = []
        with self._locks[sub_id]:
            q = self._queues[sub_id]
            for _ in range(min(k, len(q))):
                out.append(q.popleft())
        return out

    def size(self, sub_id: int) -> int:
        return len(self._queues[sub_id])

    def sizes(self) -> list[int]:
        return [len(q) for q in self._queues]

    def all_empty(self) -> bool:
        return all(not q for q in self._queues)


class MessageLedger:
    """Global enqueue/retire counting for termination detection."""

    def __init__(self):
        self._lock = threading.Lock()
        self.enqueued = 0
        self.retired = 0
        self.last_progress = time.perf_counter()

    def on_enqueue(self, n: int = 1) -> None:
        with self._lock:
            self.enqueued += n

    def on_retire(self, n: int = 1) -> None:
        with self._lock:
            self.retired += n
            self.last_progress = time.perf_counter()

    @property
    def in_flight(self) -> int:
        with self._lock:
            return self.enqueued - self.retired


@dataclass
class ScheduleMetrics:
    wall_time: float = 0.0
    worker_busy: list[float] = field(default_factory=list)
    worker_idle: list[float] = field(default_factory=list)
    load_events: list[tuple[int, float]] = field(default_factory=list)
    load_time_total: float = 0.0
    migrations: int = 0
    max_resident_observed: int = 0
    messages_enqueued: int = 0
    messages_retired: int = 0

    def summary(self) -> str:
        busy = sum(self.worker_busy)
        idle = sum(self.worker_idle)
        return (
            f"wall {self.wall_time:.3f}s | busy {busy:.3f}s | idle {idle:.3f}s | "
            f"load {self.load_time_total:.3f}s ({len(self.load_events)} events) | "
            f"migrations {self.migrations} | "
            f"max resident {self.max_resident_observed} | "
            f"messages {self.messages_enqueued} enqueued / "
            f"{self.messages_retired} retired"
        )


# ---------------------------------------------------------------------------
# Residency management


class _Residency:
    """Tracks which sub-domains are loaded; one loader thread swaps them."""

    def __init__(self, part: Partition, scene: Scene, max_resident: int,
                 load_cost_ms: float, metrics: ScheduleMetrics):
        self.part = part
        self.scene = scene
        self.max_resident = max_resident
        self.load_cost_ms = load_cost_ms
        self.metrics = metrics
        self.lock = threading.Lock()
        self.resident: set[int] = set()
        self.loading: set[int] = set()
        self.pins = [0] * len(part.subs)
        self.requests: deque[tuple[int, int | None]] = deque()
        self.stop = False
        self.queue_sizes = lambda: [0] * len(part.subs)
        self._wake = threading.Event()
        self.thread = threading.Thread(target=self._loader_loop, name="ddm-loader")
        self.thread.start()

    def pin(self, sub_id: int) -> bool:
        with self.lock:
            if sub_id not in self.resident:
                return False
            self.pins[sub_id] += 1
            return True

    def unpin(self, sub_id: int) -> None:
        with self.lock:
            self.pins[sub_id] -= 1

    def request_load(self, sub_id: int, victim: int | None) -> None:
        with self.lock:
            if sub_id in self.resident or sub_id in self.loading:
                return
            if len(self.resident) < self.max_resident:
                victim = None
            self.loading.add(sub_id)
            self.requests.append((sub_id, victim))
        self._wake.set()

    def loading_or_pending(self) -> bool:
        with self.lock:
            return bool(self.loading)

    def resident_ids(self) -> list[int]:
        with self.lock:
            return sorted(self.resident)

    def shutdown(self) -> None:
        self.stop = True
        self._wake.set()
        self.thread.join()

    def _loader_loop(self) -> None:
        while True:
            self._wake.wait(timeout=0.002)
            self._wake.clear()
            if self.stop:
                return
            while True:
                with self.lock:
                    if not self.requests:
                        break
                    sub_id, victim = self.requests.popleft()
                sub = self.part.subs[sub_id]
                t0 = time.perf_counter()
                loader(sub, self.scene, self.load_cost_ms, self.part.total_triangles)
                dt = time.perf_counter() - t0
                self.metrics.load_events.append((sub_id, dt))
                self.metrics.load_time_total += dt
                with self.lock:
                    self.loading.discard(sub_id)
                    self.resident.add(sub_id)
                    observed = len(self.resident)
                    if observed > self.metrics.max_resident_observed:
                        self.metrics.max_resident_observed = observed
                self._shrink_to_cap(preferred=victim, keep=sub_id)
                if self.stop:
                    return

    def _shrink_to_cap(self, preferred: int | None, keep: int) -> None:
        """Evict (drained queues first) until at most max_resident remain."""
        while not self.stop:
            with self.lock:
                if len(self.resident) <= self.max_resident:
                    return
                sizes = self.queue_sizes()
                candidates = sorted(
                    (s for s in self.resident if s != keep),
                    key=lambda s: (s != preferred, sizes[s], s),
                )
                evicted = False
                for victim in candidates:
                    if self.pins[victim] == 0:
                        self.resident.discard(victim)
                        _unload(self.part.subs[victim])
                        evicted = True
                        break
            if not evicted:
                time.sleep(0.0002)


# ---------------------------------------------------------------------------
# The scheduler


class _DdmState:
    def __init__(self, scene: Scene, part: Partition, settings: RenderSettings,
                 residency: _Residency, metrics: ScheduleMetrics):
        self.scene = scene
        self.part = part
        self.settings = settings
        self.residency = residency
        self.metrics = metrics
        self.queues = DomainQueues(len(part.subs))
        residency.queue_sizes = self.queues.sizes
        self.ledger = MessageLedger()
        self.cmf = standard_observer()
        self.stop = threading.Event()
        self.done = threading.Event()
        self.errors: list[BaseException] = []
        self.migration_lock = threading.Lock()
        self.term_lock = threading.Lock()
        self.term_counter = 0
        self.pending_terms: dict[tuple[int, int], tuple[float, float, float]] = {}
        self.accumulator: ImageAccumulator | None = None
        self.maps: PhotonMaps | None = None
        self.photon_store_lock = threading.Lock()
        self.photon_stores: list[tuple] = []  # (target, light, pid, bounce, photon)

    def next_term_id(self) -> int:
        with self.term_lock:
            self.term_counter += 1
            return self.term_counter

    def count_migration(self) -> None:
        with self.migration_lock:
            self.metrics.migrations += 1

    def emit(self, msg: RayMessage) -> None:
        """Route a fresh message to the sub-domain it enters, or resolve it
        immediately if it never enters the scene bounds."""
        origin = msg.ray_origin()
        d = msg.direction
        lo, hi = self.part.global_lo, self.part.global_hi
        inside = all(
            lo[a] - ENTRY_TOLERANCE <= origin[a] <= hi[a] + ENTRY_TOLERANCE
            for a in range(3)
        )
        if inside:
            entry = origin
            partial_t = 0.0
        else:
            t_enter = _box_enter(origin, d, lo, hi)
            if t_enter is None:
                self._resolve_escape(msg)
                return
            entry = origin + t_enter * d
            partial_t = float(t_enter)
        sub_id = self.part.locate_entering(entry, d)
        msg.entry_point = entry
        msg.partial_t = partial_t
        self.ledger.on_enqueue()
        self.queues.push(sub_id, msg)

    def _resolve_escape(self, msg: RayMessage) -> None:
        if msg.kind == KIND_SHADOW:
            self._commit_term(msg)
        # camera/specular/photon rays that leave the scene contribute nothing

    def _commit_term(self, msg: RayMessage) -> None:
        key = (msg.pixel_id, msg.term_id)
        with self.term_lock:
            xyz = self.pending_terms.pop(key)
        self.accumulator.add_term(msg.pixel_id, xyz)

    def _drop_term(self, msg: RayMessage) -> None:
        key = (msg.pixel_id, msg.term_id)
        with self.term_lock:
            self.pending_terms.pop(key)


def _box_enter(origin, direction, lo, hi):
    t_near = -math.inf
    t_far = math.inf
    for axis in range(3):
        d = direction[axis]
        if d == 0.0:
            if origin[axis] < lo[axis] or origin[axis] > hi[axis]:
                return None
            continue
        t1 = (lo[axis] - origin[axis]) / d
        t2 = (hi[axis] - origin[axis]) / d
        if t1 > t2:
            t1, t2 = t2, t1
        t_near = max(t_near, t1)
        t_far = min(t_far, t2)
    if t_near > t_far or t_far < 0.0:
        return None
    return max(t_near, 0.0)


def _process_camera_message(state: _DdmState, msg: RayMessage, sub: SubDomain) -> None:
    if msg.kind == KIND_SHADOW:
        origin = msg.ray_origin()
        d = msg.direction
        if sub.index.occluded(
            origin[0], origin[1], origin[2], d[0], d[1], d[2], RAY_EPS, math.inf
        ):
            state._drop_term(msg)
            state.ledger.on_retire()
            return
        outcome, payload = _pass_through(msg, sub, state.part)
        if outcome == "exit":
            state.count_migration()
            state.ledger.on_enqueue()
            state.queues.push(
                state.part.locate_entering(payload.entry_point, payload.direction),
                payload,
            )
        else:
            state._commit_term(msg)
        state.ledger.on_retire()
        return

    outcome, payload = advance_ray(msg, sub, state.part)
    if outcome == "exit":
        state.count_migration()
        state.ledger.on_enqueue()
        state.queues.push(
            state.part.locate_entering(payload.entry_point, payload.direction),
            payload,
        )
        state.ledger.on_retire()
        return
    if outcome == "escape":
        state.ledger.on_retire()
        return

    hit = payload
    scene = state.scene
    mat = scene.materials[hit.material_id]
    if isinstance(mat, Lambertian):
        for _, shadow_origin, ws, term in direct_terms(scene, hit, scene.lights):
            vals = msg.throughput * term
            xyz = xyz_from_values(vals, state.cmf)
            term_id = state.next_term_id()
            with state.term_lock:
                state.pending_terms[(msg.pixel_id, term_id)] = xyz
            probe = RayMessage(
                entry_point=shadow_origin,
                direction=ws,
                throughput=_UNIT_THROUGHPUT,
                depth=0,
                pixel_id=msg.pixel_id,
                kind=KIND_SHADOW,
                partial_t=0.0,
                origin=shadow_origin,
                term_id=term_id,
            )
            state.emit(probe)
        if state.maps is not None:
            k = state.settings.gather_k
            r_max = (
                state.settings.gather_radius
                if state.settings.gather_radius is not None
                else scene.diagonal / 20.0
            )
            for pmap in (state.maps.caustic_map, state.maps.global_map):
                est = _estimate_values(pmap, hit, k, r_max, scene)
                if est.any():
                    state.accumulator.add_term(
                        msg.pixel_id, xyz_from_values(msg.throughput * est, state.cmf)
                    )
    else:
        for child_origin, child_dir, _, child_tp in specular_children(
            scene, state.settings, hit, msg.direction, msg.throughput, msg.depth
        ):
            child = RayMessage(
                entry_point=child_origin,
                direction=child_dir,
                throughput=child_tp,
                depth=msg.depth + 1,
                pixel_id=msg.pixel_id,
                kind=KIND_SPECULAR,
                partial_t=0.0,
                origin=child_origin,
            )
            state.emit(child)
    state.ledger.on_retire()


def _process_photon_message(state: _DdmState, msg: RayMessage, sub: SubDomain) -> None:
    outcome, payload = advance_ray(msg, sub, state.part)
    if outcome == "exit":
        state.count_migration()
        state.ledger.on_enqueue()
        state.queues.push(
            state.part.locate_entering(payload.entry_point, payload.direction),
            payload,
        )
        state.ledger.on_retire()
        return
    if outcome == "escape":
        state.ledger.on_retire()
        return
    hit = payload
    store, continuation = photon_interaction(
        state.scene, hit, msg.direction, msg.throughput,
        msg.light_index, msg.photon_id, msg.depth, msg.specular_only,
        state.settings.seed, state.settings,
    )
    if store is not None:
        photon = Photon(hit.point.copy(), msg.direction.copy(), msg.throughput.copy())
        with state.photon_store_lock:
            state.photon_stores.append(
                (store, msg.light_index, msg.photon_id, msg.depth, photon)
            )
    if continuation is not None:
        origin, direction, flux, specular_only = continuation
        child = RayMessage(
            entry_point=origin,
            direction=direction,
            throughput=flux,
            depth=msg.depth + 1,
            pixel_id=msg.pixel_id,
            kind=KIND_PHOTON,
            partial_t=0.0,
            origin=origin,
            light_index=msg.light_index,
            photon_id=msg.photon_id,
            specular_only=specular_only,
        )
        state.emit(child)
    state.ledger.on_retire()


def _worker_loop(state: _DdmState, wid: int, process_fn, busy: list[float],
                 idle: list[float]) -> None:
    queues = state.queues
    residency = state.residency
    part = state.part
    max_res = residency.max_resident
    while not state.stop.is_set() and not state.done.is_set():
        sizes = queues.sizes()
        resident = residency.resident_ids()
        order = sorted(
            (s for s in resident if sizes[s] > 0), key=lambda s: (-sizes[s], s)
        )
        picked = None
        for s in order:
            if residency.pin(s):
                picked = s
                break
        if picked is None:
            # Nothing resident has work: bring in the biggest waiting queue.
            waiting = sorted(
                (s for s in range(len(sizes)) if sizes[s] > 0 and s not in resident),
                key=lambda s: (-sizes[s], s),
            )
            if waiting:
                victim = None
                if len(resident) >= max_res and resident:
                    victim = min(resident, key=lambda s: (sizes[s], s))
                residency.request_load(waiting[0], victim)
            if state.ledger.in_flight == 0:
                state.done.set()
                return
            t0 = time.perf_counter()
            time.sleep(0.002)
            idle[wid] += time.perf_counter() - t0
            continue
        # Drain the picked sub-domain: stay on it while it has work, so
        # workers do not thrash between queues.
        t0 = time.perf_counter()
        try:
            while not state.stop.is_set():
                msgs = queues.pop_batch(picked, _BATCH)
                if not msgs:
                    break
                for msg in msgs:
                    process_fn(state, msg, part.subs[picked])
        except BaseException as exc:  # propagate to the coordinator
            state.errors.append(exc)
            state.stop.set()
            return
        finally:
            busy[wid] += time.perf_counter() - t0
            residency.unpin(picked)
        # Hysteresis: near-drained queue and a bigger one waiting -> swap.
        qsize = queues.size(picked)
        theta = max(16, int(0.01 * queues.historical_max[picked]))
        if qsize < theta:
            sizes = queues.sizes()
            resident_now = set(residency.resident_ids())
            waiting = sorted(
                (
                    s
                    for s in range(len(sizes))
                    if sizes[s] > qsize and s not in resident_now
                ),
                key=lambda s: (-sizes[s], s),
            )
            if waiting:
                victim = picked if len(resident_now) >= max_res else None
                residency.request_load(waiting[0], victim)


def _run_phase(state: _DdmState, process_fn, n_workers: int,
               deadlock_timeout: float) -> None:
    if state.ledger.in_flight == 0:
        return
    state.done.clear()
    busy = state.metrics.worker_busy
    idle = state.metrics.worker_idle
    threads = [
        threading.Thread(
            target=_worker_loop,
            args=(state, w, process_fn, busy, idle),
            name=f"ddm-worker-{w}",
        )
        for w in range(n_workers)
    ]
    stack = contextlib.ExitStack()
    stack.enter_context(coarse_thread_switching())
    for t in threads:
        t.start()
    try:
        while any(t.is_alive() for t in threads):
            if state.errors:
                state.stop.set()
                break
            if state.ledger.in_flight == 0:
                state.done.set()
            stalled = time.perf_counter() - state.ledger.last_progress
            if state.ledger.in_flight > 0 and stalled > deadlock_timeout:
                state.stop.set()
                for t in threads:
                    t.join()
                raise DeadlockError(
                    "no progress for "
                    f"{stalled:.1f}s with {state.ledger.in_flight} messages in "
                    f"flight; queue sizes {state.queues.sizes()}; resident "
                    f"{state.residency.resident_ids()}"
                )
            time.sleep(0.002)
    finally:
        state.done.set()
        for t in threads:
            t.join()
        stack.close()
    if state.errors:
        raise state.errors[0]


def _seed_initial_loads(state: _DdmState) -> None:
    sizes = state.queues.sizes()
    order = sorted(range(len(sizes)), key=lambda s: (-sizes[s], s))
    wanted = [s for s in order[: state.residency.max_resident]]
    if not wanted:
        wanted = [0]
    for s in wanted:
        state.residency.request_load(s, None)


def run_ddm(
    scene: Scene,
    settings: RenderSettings,
    n_subdomains: int,
    n_workers: int,
    max_resident: int,
    load_cost_ms: float = 0.0,
    partition_dir=None,
    deadlock_timeout_s: float = 30.0,
) -> tuple[ImageAccumulator, ScheduleMetrics]:
    """Render through the domain-decomposition scheduler.

    The image agrees with single-domain rendering to accumulation
    tolerance (bit-identical for n_subdomains = 1); the ray ledger
    balances to zero at termination.
    """
    if n_subdomains < 1 or n_workers < 1 or max_resident < 1:
        raise ValueError("n_subdomains, n_workers and max_resident must be >= 1")
    max_resident = min(max_resident, n_subdomains)
    metrics = ScheduleMetrics()
    t_start = time.perf_counter()

    if scene.triangles.count == 0:
        # Nothing to trace: terminate immediately with a black image.
        accumulator = ImageAccumulator(settings.width, settings.height)
        accumulator.set_counts(settings.samples_per_pixel)
        metrics.worker_busy = [0.0] * n_workers
        metrics.worker_idle = [0.0] * n_workers
        metrics.wall_time = time.perf_counter() - t_start
        return accumulator, metrics

    part = partition(scene, n_subdomains)
    import tempfile

    tmp_ctx = None
    if partition_dir is None:
        tmp_ctx = tempfile.TemporaryDirectory(prefix="spectralium_ddm_")
        partition_dir = tmp_ctx.name
    try:
        write_partition_files(scene, part, partition_dir)

        if n_subdomains == 1:
            # Degenerate decomposition: load the single sub-domain through
            # the normal loader (paying its full synthetic cost), then run
            # the scanline pool against it; bit-identical to render_image.
            sub = part.subs[0]
            t0 = time.perf_counter()
            loader(sub, scene, load_cost_ms, part.total_triangles)
            dt = time.perf_counter() - t0
            metrics.load_events.append((0, dt))
            metrics.load_time_total += dt
            metrics.max_resident_observed = 1
            maps = None
            if settings.n_photons > 0 and scene.lights:
                gmap, cmap = trace_photons(
                    scene, scene.lights, settings.n_photons, settings.seed,
                    settings, sub.index,
                )
                maps = PhotonMaps(gmap, cmap)
            ctx = RenderContext(
                scene=scene, index=sub.index, lights=scene.lights,
                settings=settings, maps=maps,
            )
            camera = scene.camera.with_resolution(settings.width, settings.height)
            accumulator = ImageAccumulator(settings.width, settings.height)
            metrics.worker_busy = [0.0] * n_workers
            metrics.worker_idle = [0.0] * n_workers
            t0 = time.perf_counter()
            run_pixel_pool(ctx, camera, accumulator, n_workers)
            metrics.worker_busy[0] += time.perf_counter() - t0
            metrics.wall_time = time.perf_counter() - t_start
            metrics.messages_enqueued = settings.width * settings.height
            metrics.messages_retired = metrics.messages_enqueued
            return accumulator, metrics

        residency = _Residency(part, scene, max_resident, load_cost_ms, metrics)
        state = _DdmState(scene, part, settings, residency, metrics)
        metrics.worker_busy = [0.0] * n_workers
        metrics.worker_idle = [0.0] * n_workers
        try:
            # Phase 1: photon pass through the scheduler.
            if settings.n_photons > 0 and scene.lights:
                for li, light in enumerate(scene.lights):
                    for pid in range(settings.n_photons):
                        origin, direction, flux = emit_photon(
                            scene, light, li, pid, settings.n_photons, settings.seed
                        )
                        state.emit(
                            RayMessage(
                                entry_point=origin,
                                direction=direction,
                                throughput=flux,
                                depth=0,
                                pixel_id=pid,
                                kind=KIND_PHOTON,
                                partial_t=0.0,
                                origin=origin,
                                light_index=li,
                                photon_id=pid,
                            )
                        )
                _seed_initial_loads(state)
                _run_phase(state, _process_photon_message, n_workers, deadlock_timeout_s)
                stores = sorted(
                    state.photon_stores, key=lambda s: (s[1], s[2], s[3])
                )
                emitted = settings.n_photons * max(len(scene.lights), 1)
                state.maps = PhotonMaps(
                    PhotonMap([p for tgt, *_rest, p in stores if tgt == "global"], emitted),
                    PhotonMap([p for tgt, *_rest, p in stores if tgt == "caustic"], emitted),
                )

            # Phase 2: camera pass.
            camera = scene.camera.with_resolution(settings.width, settings.height)
            accumulator = ImageAccumulator(settings.width, settings.height)
            accumulator.enable_term_mode()
            accumulator.set_counts(settings.samples_per_pixel)
            state.accumulator = accumulator
            spp = settings.samples_per_pixel
            for py in range(camera.height):
                for px in range(camera.width):
                    pixel_id = py * camera.width + px
                    for s in range(spp):
                        jitter = _pixel_jitter(settings.seed, pixel_id, s, spp)
                        origin, direction = generate_ray(camera, px, py, jitter)
                        state.emit(
                            RayMessage(
                                entry_point=origin,
                                direction=direction,
                                throughput=_UNIT_THROUGHPUT,
                                depth=0,
                                pixel_id=pixel_id,
                                kind=KIND_CAMERA,
                                partial_t=0.0,
                                origin=origin,
                            )
                        )
            _seed_initial_loads(state)
            _run_phase(state, _process_camera_message, n_workers, deadlock_timeout_s)
            if state.pending_terms:
                raise DdmError(
                    f"{len(state.pending_terms)} pending shadow terms never resolved"
                )
        finally:
            residency.shutdown()
        metrics.wall_time = time.perf_counter() - t_start
        metrics.messages_enqueued = state.ledger.enqueued
        metrics.messages_retired = state.ledger.retired
        return accumulator, metrics
    finally:
        if tmp_ctx is not None:
            tmp_ctx.cleanup()
