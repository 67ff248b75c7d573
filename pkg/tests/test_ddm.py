import math

import numpy as np
import pytest

from conftest import constant_sun, default_camera, gray_lambertian, make_scene, quad_mesh, tri_mesh
from spectralium.ddm import (
    DdmError,
    DeadlockError,
    ProtocolError,
    RayMessage,
    WIRE_SIZE,
    advance_ray,
    decode_message,
    encode_message,
    load_from_scene,
    loader,
    partition,
    run_ddm,
    write_partition_files,
)
from spectralium.render import KIND_CAMERA, KIND_PHOTON, RenderSettings, render_image
from spectralium.scene import parse_scene
from spectralium.spectral import default_grid

GRID = default_grid()


def pin_bounds_scene(extra_meshes=(), lights=(), size=8.0):
    """Scene whose bounds are [0, size]^3, pinned by tiny corner triangles."""
    eps = 0.01
    corner_lo = tri_mesh([0, 0, 0], [eps, 0, 0], [0, eps, 0], 0)
    corner_hi = tri_mesh(
        [size, size, size], [size - eps, size, size], [size, size - eps, size], 0
    )
    return make_scene(
        [corner_lo, corner_hi, *extra_meshes],
        [gray_lambertian(0.5)],
        list(lights),
    )


def message(origin, direction, kind=KIND_CAMERA):
    origin = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    return RayMessage(
        entry_point=origin.copy(),
        direction=d,
        throughput=np.ones(GRID.count),
        depth=0,
        pixel_id=0,
        kind=kind,
        partial_t=0.0,
        origin=origin.copy(),
    )


# ---------------------------------------------------------------------------
# Partitioning


def test_partition_single_subdomain(cornell_scene):
    part = partition(cornell_scene, 1)
    assert len(part.subs) == 1
    sub = part.subs[0]
    assert np.allclose(sub.box_lo, cornell_scene.bounds_lo)
    assert np.allclose(sub.box_hi, cornell_scene.bounds_hi)
    assert sub.interfaces == []
    assert sorted(sub.tri_ids) == list(range(cornell_scene.triangles.count))


def test_partition_two_halves_unit_cube():
    scene = pin_bounds_scene(size=1.0)
    part = partition(scene, 2)
    assert len(part.subs) == 2
    for sub in part.subs:
        assert len(sub.interfaces) == 1
    a, b = part.subs
    assert a.interfaces[0][0] == 1
    assert b.interfaces[0][0] == 0
    # split along the longest axis at the box midpoint
    axis = a.interfaces[0][1]
    assert a.box_hi[axis] == pytest.approx(0.5)


def test_partition_eight_octants_three_interfaces_each():
    scene = pin_bounds_scene(size=8.0)
    part = partition(scene, 8)
    assert len(part.subs) == 8
    for sub in part.subs:
        assert len(sub.interfaces) == 3  # 2x2x2 grid: face adjacency only


def test_partition_requires_power_of_two(cornell_scene):
    with pytest.raises(ValueError):
        partition(cornell_scene, 3)


def test_partition_coverage(cornell_scene, nave_scene):
    for scene in (cornell_scene, nave_scene):
        for n in (2, 4, 8):
            part = partition(scene, n)
            covered = set()
            for sub in part.subs:
                covered.update(sub.tri_ids)
            assert covered == set(range(scene.triangles.count))


def test_partition_replicates_boundary_triangles():
    # A quad spanning the whole floor crosses every vertical split.
    floor = quad_mesh([0, 0, 0], [8, 0, 0], [8, 8, 0], [0, 8, 0], 0)
    scene = pin_bounds_scene([floor])
    part = partition(scene, 4)
    floor_tris = {2, 3, 4, 5}  # two corner pins come first
    for sub in part.subs:
        assert floor_tris & set(sub.tri_ids)


def test_locate_point_tie_goes_to_lower_id():
    scene = pin_bounds_scene(size=8.0)
    part = partition(scene, 2)
    axis = part.subs[0].interfaces[0][1]
    plane = part.subs[0].box_hi[axis]
    p = [1.0, 1.0, 1.0]
    p[axis] = plane
    assert part.locate_point(*p) == 0


# ---------------------------------------------------------------------------
# advance_ray


def test_advance_ray_exit_through_interface():
    scene = pin_bounds_scene(size=8.0)
    part = partition(scene, 2)
    for sub in part.subs:
        load_from_scene(sub, scene)
    msg = message([1.0, 4.0, 4.0], [1.0, 0.0, 0.0])
    outcome, payload = advance_ray(msg, part.subs[0], part)
    assert outcome == "exit"
    assert np.allclose(payload.entry_point, [4.0, 4.0, 4.0], atol=1e-9)
    assert payload.partial_t == pytest.approx(3.0)
    assert part.locate_entering(payload.entry_point, payload.direction) == 1


def test_advance_ray_hit_inside_box():
    blocker = tri_mesh([2.0, 3.0, 3.0], [2.0, 5.0, 3.0], [2.0, 4.0, 5.0], 0)
    scene = pin_bounds_scene([blocker])
    part = partition(scene, 2)
    for sub in part.subs:
        load_from_scene(sub, scene)
    msg = message([1.0, 4.0, 4.0], [1.0, 0.0, 0.0])
    outcome, payload = advance_ray(msg, part.subs[0], part)
    assert outcome == "hit"
    assert payload.t == pytest.approx(1.0, rel=1e-12)


def test_advance_ray_escape():
    scene = pin_bounds_scene(size=8.0)
    part = partition(scene, 2)
    for sub in part.subs:
        load_from_scene(sub, scene)
    msg = message([1.0, 4.0, 4.0], [-1.0, 0.0, 0.0])
    outcome, payload = advance_ray(msg, part.subs[0], part)
    assert outcome == "escape"


def test_advance_ray_protocol_error_outside_box():
    scene = pin_bounds_scene(size=8.0)
    part = partition(scene, 2)
    for sub in part.subs:
        load_from_scene(sub, scene)
    msg = message([7.0, 4.0, 4.0], [1.0, 0.0, 0.0])  # inside sub 1, not sub 0
    with pytest.raises(ProtocolError):
        advance_ray(msg, part.subs[0], part)


def test_advance_ray_requires_resident():
    scene = pin_bounds_scene(size=8.0)
    part = partition(scene, 2)
    msg = message([1.0, 4.0, 4.0], [1.0, 0.0, 0.0])
    with pytest.raises(DdmError):
        advance_ray(msg, part.subs[0], part)


def test_migration_geometry_property():
    # Every Exit lands on the shared face of adjacent boxes within 1e-6 m.
    rng = np.random.default_rng(40)
    raw_meshes = []
    for _ in range(12):
        base = rng.uniform(0.5, 7.5, 3)
        raw_meshes.append(
            tri_mesh(base, base + rng.uniform(0.1, 0.7, 3), base + rng.uniform(0.1, 0.7, 3), 0)
        )
    scene = pin_bounds_scene(raw_meshes)
    part = partition(scene, 8)
    for sub in part.subs:
        load_from_scene(sub, scene)
    exits = 0
    for _ in range(300):
        origin = rng.uniform(0.2, 7.8, 3)
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        msg = message(origin, d)
        sub_id = part.locate_entering(msg.entry_point, msg.direction)
        for _hop in range(64):
            outcome, payload = advance_ray(msg, part.subs[sub_id], part)
            if outcome != "exit":
                break
            exits += 1
            nxt = part.locate_entering(payload.entry_point, payload.direction)
            cur_sub, nxt_sub = part.subs[sub_id], part.subs[nxt]
            assert nxt != sub_id
            # entry point on both closed boxes (i.e. on the shared face)
            for s in (cur_sub, nxt_sub):
                assert (payload.entry_point >= s.box_lo - 1e-6).all()
                assert (payload.entry_point <= s.box_hi + 1e-6).all()
            msg, sub_id = payload, nxt
    assert exits > 100


# ---------------------------------------------------------------------------
# Partition files and loader


def test_loader_roundtrip_matches_in_memory(tmp_path, cornell_scene):
    part_mem = partition(cornell_scene, 4)
    part_disk = partition(cornell_scene, 4)
    write_partition_files(cornell_scene, part_disk, tmp_path)
    rng = np.random.default_rng(41)
    for sub_m, sub_d in zip(part_mem.subs, part_disk.subs):
        load_from_scene(sub_m, cornell_scene)
        loader(sub_d, cornell_scene)
        assert sub_d.triangles.count == sub_m.triangles.count
        assert np.array_equal(sub_d.triangles.vertices_array, sub_m.triangles.vertices_array)
        assert sub_d.triangles.material_id == sub_m.triangles.material_id
        # behavioral equality on random queries
        for _ in range(50):
            o = rng.uniform(-1.5, 2.5, 3)
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            a = sub_m.index.nearest(*o, *d, 1e-9, math.inf)
            b = sub_d.index.nearest(*o, *d, 1e-9, math.inf)
            assert a == b


def test_loader_missing_file(tmp_path, cornell_scene):
    part = partition(cornell_scene, 2)
    part.subs[0].file_path = tmp_path / "missing.part"
    with pytest.raises(DdmError, match="missing"):
        loader(part.subs[0], cornell_scene)


def test_loader_rejects_resident(tmp_path, cornell_scene):
    part = partition(cornell_scene, 2)
    write_partition_files(cornell_scene, part, tmp_path)
    loader(part.subs[0], cornell_scene)
    with pytest.raises(DdmError, match="resident"):
        loader(part.subs[0], cornell_scene)


def test_partition_file_header(tmp_path, cornell_scene):
    part = partition(cornell_scene, 2)
    write_partition_files(cornell_scene, part, tmp_path)
    text = part.subs[1].file_path.read_text(encoding="utf-8")
    first = text.splitlines()[0].split()
    assert first[0] == "subdomain"
    assert int(first[1]) == 1
    assert len([tok for tok in first[2:8]]) == 6
    assert "interfaces" in first


def test_load_cost_scales_with_share(tmp_path, cornell_scene):
    import time

    part = partition(cornell_scene, 1)
    write_partition_files(cornell_scene, part, tmp_path)
    t0 = time.perf_counter()
    loader(part.subs[0], cornell_scene, load_cost_ms=120.0, total_triangles=part.total_triangles)
    dt = time.perf_counter() - t0
    assert dt >= 0.115  # the whole model pays the full cost


# ---------------------------------------------------------------------------
# Wire codec


def random_wire_message(rng) -> RayMessage:
    return RayMessage(
        entry_point=rng.uniform(-50, 50, 3),
        direction=rng.normal(size=3),
        throughput=rng.uniform(0, 2, GRID.count).astype(np.float32).astype(np.float64),
        depth=int(rng.integers(0, 32)),
        pixel_id=int(rng.integers(0, 2**63)),
        kind=int(rng.integers(0, 4)),
        partial_t=float(rng.uniform(0, 100)),
    )


def test_wire_codec_roundtrip():
    rng = np.random.default_rng(42)
    for _ in range(1000):
        msg = random_wire_message(rng)
        blob = encode_message(msg)
        assert len(blob) == WIRE_SIZE == 393
        back = decode_message(blob)
        assert encode_message(back) == blob
        assert np.array_equal(back.entry_point, msg.entry_point)
        assert np.array_equal(back.direction, msg.direction)
        assert np.array_equal(back.throughput, msg.throughput)
        assert (back.depth, back.pixel_id, back.kind) == (msg.depth, msg.pixel_id, msg.kind)
        assert back.partial_t == msg.partial_t


def test_wire_codec_rejects_bad_length():
    with pytest.raises(ValueError):
        decode_message(b"\x00" * 100)


# ---------------------------------------------------------------------------
# run_ddm


def test_run_ddm_single_subdomain_bit_identical(cornell_scene):
    settings = RenderSettings(
        width=16, height=16, samples_per_pixel=2, n_photons=200, seed=5
    )
    ref = render_image(cornell_scene, settings).finalize()
    for workers in (1, 4):
        acc, metrics = run_ddm(cornell_scene, settings, 1, workers, 1)
        assert np.array_equal(acc.finalize(), ref)
        assert metrics.migrations == 0


def test_run_ddm_empty_scene_immediate():
    scene = make_scene([], [], [constant_sun([0, 0, -1.0])], camera=default_camera(4, 4))
    settings = RenderSettings(width=4, height=4, samples_per_pixel=1, n_photons=50)
    for n_sub, workers in ((1, 1), (4, 2), (8, 8)):
        acc, metrics = run_ddm(scene, settings, n_sub, workers, 2)
        assert np.allclose(acc.finalize(), 0.0)
        assert metrics.migrations == 0
        assert metrics.wall_time < 5.0


def test_run_ddm_equivalence_and_ledger(cornell_scene):
    settings = RenderSettings(
        width=16, height=16, samples_per_pixel=2, n_photons=250, seed=3
    )
    ref = render_image(cornell_scene, settings).finalize()
    acc, metrics = run_ddm(cornell_scene, settings, 4, 4, 2)
    img = acc.finalize()
    mask = np.abs(ref) > 1e-12
    assert np.allclose(img[mask], ref[mask], rtol=1e-6)
    assert np.abs(img[~mask]).max() if (~mask).any() else 0.0 <= 1e-12
    assert metrics.migrations > 0
    assert metrics.messages_enqueued == metrics.messages_retired > 0


def test_run_ddm_repeat_run_determinism(cornell_scene):
    settings = RenderSettings(
        width=12, height=12, samples_per_pixel=2, n_photons=150, seed=13
    )
    a, _ = run_ddm(cornell_scene, settings, 4, 3, 2)
    b, _ = run_ddm(cornell_scene, settings, 4, 3, 2)
    assert np.array_equal(a.finalize(), b.finalize())


def test_run_ddm_load_once_per_subdomain_when_all_resident(cornell_scene):
    settings = RenderSettings(width=8, height=8, samples_per_pixel=1, n_photons=50, seed=1)
    acc, metrics = run_ddm(
        cornell_scene, settings, 4, 2, max_resident=4, load_cost_ms=40.0
    )
    loaded = [sub_id for sub_id, _ in metrics.load_events]
    assert sorted(loaded) == [0, 1, 2, 3]
    assert metrics.load_time_total >= 0.04  # shares of the 40 ms full-model cost


def test_run_ddm_max_resident_respected(cornell_scene):
    settings = RenderSettings(width=8, height=8, samples_per_pixel=1, n_photons=80, seed=2)
    acc, metrics = run_ddm(cornell_scene, settings, 8, 2, max_resident=2)
    assert metrics.max_resident_observed <= 3  # cap plus the overlap slot
    ref = render_image(cornell_scene, settings).finalize()
    img = acc.finalize()
    mask = np.abs(ref) > 1e-12
    assert np.allclose(img[mask], ref[mask], rtol=1e-6)


def test_deadlock_detector_fires(cornell_scene):
    settings = RenderSettings(width=24, height=24, samples_per_pixel=2, n_photons=0, seed=1)
    with pytest.raises(DeadlockError):
        run_ddm(cornell_scene, settings, 4, 1, 2, deadlock_timeout_s=1e-9)


def test_no_lost_termination_randomized():
    # Randomized mini-scenes and configurations all terminate cleanly.
    rng = np.random.default_rng(77)
    for case in range(1000):
        meshes = []
        for _ in range(int(rng.integers(1, 5))):
            base = rng.uniform(0.5, 7.5, 3)
            meshes.append(
                tri_mesh(
                    base,
                    base + rng.uniform(0.15, 1.0, 3),
                    base + rng.uniform(0.15, 1.0, 3),
                    0,
                )
            )
        scene = pin_bounds_scene(meshes, lights=[constant_sun(rng.normal(size=3))])
        scene.camera = default_camera(2, 2)
        n_sub = int(rng.choice([1, 2, 4, 8]))
        workers = int(rng.choice([1, 2, 4]))
        max_res = int(rng.choice([1, 2]))
        photons = int(rng.choice([0, 4, 8]))
        settings = RenderSettings(
            width=2, height=2, samples_per_pixel=1, n_photons=photons,
            seed=case, max_depth=4,
        )
        acc, metrics = run_ddm(scene, settings, n_sub, workers, max_res,
                               deadlock_timeout_s=20.0)
        assert metrics.messages_enqueued == metrics.messages_retired
