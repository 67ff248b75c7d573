import math

import numpy as np
import pytest

from spectralium.spectral import (
    ComplexIOR,
    Spectrum,
    SpdFormatError,
    SpdParseError,
    TransmittanceMap,
    UnsupportedTransmissionError,
    default_grid,
    fresnel_reflectance,
    fresnel_reflectance_spectrum,
    fresnel_transmittance,
    load_spd,
    load_transmittance_map,
    sample_transmittance_map,
)

AIR = ComplexIOR.constant(1.0)


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


# ---------------------------------------------------------------------------
# SPD loading


def test_load_spd_constant(tmp_path):
    spd = load_spd(write(tmp_path, "c.spd", "380, 1.0\n780, 1.0\n"))
    assert np.allclose(spd.values, 1.0)
    assert spd.values.shape == (81,)


def test_load_spd_linear_midpoint(tmp_path):
    spd = load_spd(write(tmp_path, "l.spd", "380, 0.0\n780, 1.0\n"))
    assert spd.value_at(580.0) == pytest.approx(0.5)


def test_load_spd_endpoint_clamp(tmp_path):
    spd = load_spd(write(tmp_path, "e.spd", "400, 0.2\n700, 0.8\n"))
    assert spd.value_at(380.0) == pytest.approx(0.2)
    assert spd.value_at(780.0) == pytest.approx(0.8)


def test_load_spd_comments_and_blank_lines(tmp_path):
    spd = load_spd(write(tmp_path, "c.spd", "# hi\n\n380, 0.5  # inline\n780, 0.5\n"))
    assert np.allclose(spd.values, 0.5)


def test_load_spd_malformed_line_reports_number(tmp_path):
    with pytest.raises(SpdParseError, match=":2:"):
        load_spd(write(tmp_path, "bad.spd", "380, 1.0\n480, oops\n780, 1.0\n"))


def test_load_spd_non_ascending(tmp_path):
    with pytest.raises(SpdFormatError, match="ascending"):
        load_spd(write(tmp_path, "o.spd", "500, 1.0\n400, 1.0\n"))


def test_load_spd_empty_file(tmp_path):
    with pytest.raises(SpdFormatError):
        load_spd(write(tmp_path, "empty.spd", "# only a comment\n"))


def test_resampling_idempotence(tmp_path):
    # A file already on the session grid reproduces its values exactly.
    rng = np.random.default_rng(5)
    grid = default_grid()
    values = rng.uniform(0.0, 1.0, grid.count)
    text = "\n".join(f"{wl}, {float(v)!r}" for wl, v in zip(grid.wavelengths, values))
    spd = load_spd(write(tmp_path, "grid.spd", text + "\n"))
    assert np.array_equal(spd.values, values)


# ---------------------------------------------------------------------------
# Fresnel


def test_fresnel_normal_incidence_glass():
    glass = ComplexIOR.constant(1.5)
    oracle = ((1.5 - 1.0) ** 2) / ((1.5 + 1.0) ** 2)
    assert fresnel_reflectance(AIR, glass, 1.0, 0) == pytest.approx(oracle, abs=1e-9)
    assert oracle == pytest.approx(0.04, abs=1e-12)


def test_fresnel_index_matched():
    same = ComplexIOR.constant(1.0)
    for cos in (1.0, 0.7, 0.2, 0.01):
        assert fresnel_reflectance(AIR, same, cos, 40) == pytest.approx(0.0, abs=1e-12)


def test_fresnel_conductor_normal_incidence():
    n, k = 0.47, 2.9
    gold = ComplexIOR.constant(n, k)
    oracle = ((n - 1.0) ** 2 + k * k) / ((n + 1.0) ** 2 + k * k)
    assert fresnel_reflectance(AIR, gold, 1.0, 10) == pytest.approx(oracle, abs=1e-9)


def test_fresnel_domain_error():
    glass = ComplexIOR.constant(1.5)
    with pytest.raises(ValueError):
        fresnel_reflectance(AIR, glass, 0.0, 0)
    with pytest.raises(ValueError):
        fresnel_reflectance(AIR, glass, -0.3, 0)
    with pytest.raises(ValueError):
        fresnel_reflectance(AIR, glass, 0.5, 81)


def test_fresnel_total_internal_reflection():
    glass = ComplexIOR.constant(1.5)
    # tracing from inside glass toward air beyond the critical angle
    crit_cos = math.sqrt(1.0 - (1.0 / 1.5) ** 2)
    cos_beyond = crit_cos * 0.5
    assert fresnel_reflectance(glass, AIR, cos_beyond, 0) == pytest.approx(1.0, abs=1e-12)
    assert fresnel_transmittance(glass, AIR, cos_beyond, 0) == pytest.approx(0.0, abs=1e-12)


def test_fresnel_transmittance_dielectric():
    glass = ComplexIOR.constant(1.5)
    assert fresnel_transmittance(AIR, glass, 1.0, 0) == pytest.approx(0.96, abs=1e-9)
    same = ComplexIOR.constant(1.0)
    assert fresnel_transmittance(AIR, same, 0.8, 0) == pytest.approx(1.0, abs=1e-12)


def test_fresnel_transmittance_absorbing_unsupported():
    gold = ComplexIOR.constant(0.47, 2.9)
    with pytest.raises(UnsupportedTransmissionError):
        fresnel_transmittance(AIR, gold, 1.0, 0)


def test_energy_conservation_random_dielectrics():
    # R + T = 1 within 1e-9 for 1000 random dielectric/angle/wavelength triples.
    rng = np.random.default_rng(42)
    for _ in range(1000):
        n_out = rng.uniform(1.0, 1.8)
        n_in = rng.uniform(1.0, 2.5)
        cos_i = rng.uniform(1e-6, 1.0)
        idx = int(rng.integers(0, 81))
        outside = ComplexIOR.constant(n_out)
        inside = ComplexIOR.constant(n_in)
        r = fresnel_reflectance(outside, inside, cos_i, idx)
        t = fresnel_transmittance(outside, inside, cos_i, idx)
        assert abs(r + t - 1.0) < 1e-9


def test_fresnel_reciprocity():
    # Swapping media and using the Snell-refracted angle preserves R.
    rng = np.random.default_rng(3)
    for _ in range(200):
        n1 = rng.uniform(1.0, 1.6)
        n2 = rng.uniform(1.0, 2.4)
        cos_i = rng.uniform(0.05, 1.0)
        sin_t = n1 * math.sqrt(1.0 - cos_i**2) / n2
        if sin_t >= 1.0:
            continue
        cos_t = math.sqrt(1.0 - sin_t**2)
        a = ComplexIOR.constant(n1)
        b = ComplexIOR.constant(n2)
        r_fwd = fresnel_reflectance(a, b, cos_i, 0)
        r_bwd = fresnel_reflectance(b, a, cos_t, 0)
        assert abs(r_fwd - r_bwd) < 1e-9


def test_fresnel_grazing_limit():
    rng = np.random.default_rng(9)
    for _ in range(50):
        inside = ComplexIOR.constant(rng.uniform(1.1, 2.5), rng.uniform(0.0, 3.0))
        assert fresnel_reflectance(AIR, inside, 1e-9, 0) == pytest.approx(1.0, abs=1e-6)


def test_fresnel_spectrum_matches_scalar():
    glass = ComplexIOR.constant(1.5)
    spec = fresnel_reflectance_spectrum(AIR, glass, 0.73)
    for idx in (0, 17, 80):
        assert spec[idx] == pytest.approx(fresnel_reflectance(AIR, glass, 0.73, idx), abs=1e-15)


# ---------------------------------------------------------------------------
# Transmittance maps


def test_map_single_texel_everywhere():
    t = Spectrum.constant(0.37)
    tmap = TransmittanceMap.uniform(t)
    for uv in ((0.0, 0.0), (0.5, 0.5), (0.99, 0.2), (-3.7, 12.25)):
        assert np.allclose(sample_transmittance_map(tmap, *uv).values, 0.37)


def test_map_bilinear_midpoint():
    grid = default_grid()
    a = np.full(grid.count, 0.2)
    b = np.full(grid.count, 0.8)
    tmap = TransmittanceMap(2, 1, np.stack([np.stack([a, b])]), grid)
    mid = sample_transmittance_map(tmap, 0.5, 0.5)
    assert np.allclose(mid.values, 0.5)


def test_map_repeat_wrapping():
    grid = default_grid()
    a = np.full(grid.count, 0.1)
    b = np.full(grid.count, 0.9)
    tmap = TransmittanceMap(2, 1, np.stack([np.stack([a, b])]), grid)
    s1 = sample_transmittance_map(tmap, 0.25, 0.4)
    s2 = sample_transmittance_map(tmap, 1.25, 0.4)
    assert np.array_equal(s1.values, s2.values)


def test_map_file_roundtrip(tmp_path):
    text = "2 1\n\n380, 0.2\n780, 0.2\n\n380, 0.8\n780, 0.8\n"
    tmap = load_transmittance_map(write(tmp_path, "m.map", text))
    assert (tmap.width, tmap.height) == (2, 1)
    assert np.allclose(tmap.texels[0, 0], 0.2)
    assert np.allclose(tmap.texels[0, 1], 0.8)


def test_map_file_wrong_block_count(tmp_path):
    with pytest.raises(SpdFormatError, match="blocks"):
        load_transmittance_map(write(tmp_path, "m.map", "2 2\n\n380, 0.5\n780, 0.5\n"))


def test_map_values_out_of_range(tmp_path):
    with pytest.raises((SpdFormatError, ValueError)):
        load_transmittance_map(write(tmp_path, "m.map", "1 1\n\n380, 1.5\n780, 1.5\n"))


# ---------------------------------------------------------------------------
# Type invariants


def test_spectrum_validation():
    grid = default_grid()
    with pytest.raises(ValueError):
        Spectrum(grid, np.ones(3))
    with pytest.raises(ValueError):
        Spectrum(grid, np.full(grid.count, -0.1))
    with pytest.raises(ValueError):
        Spectrum.constant(1.2).require_unit_interval("reflectance")


def test_complex_ior_validation():
    grid = default_grid()
    with pytest.raises(ValueError):
        ComplexIOR(grid, np.zeros(grid.count), np.zeros(grid.count))
    with pytest.raises(ValueError):
        ComplexIOR(grid, np.ones(grid.count), np.full(grid.count, -1.0))
    ior = ComplexIOR.constant(2.0, 1.0)
    assert np.allclose(ior.kappa, 0.5)


def test_grid_validation():
    from spectralium.spectral import WavelengthGrid

    with pytest.raises(ValueError):
        WavelengthGrid(380.0, 0.0, 81)
    with pytest.raises(ValueError):
        WavelengthGrid(380.0, 5.0, 1)
    g = default_grid()
    assert g.wavelengths[0] == 380.0
    assert g.wavelengths[-1] == 780.0
    assert g.count == 81
