import csv
from pathlib import Path

import numpy as np
import pytest

from spectralium.colorimetry import (
    XYZ,
    chromaticity,
    d65_illuminant,
    load_cmf,
    spectrum_to_xyz,
    standard_observer,
    xyz_to_srgb,
)
from spectralium.spectral import Spectrum, default_grid

DATA_DIR = Path(__file__).resolve().parent.parent / "src" / "spectralium" / "data"


def read_table(name):
    rows = []
    with open(DATA_DIR / name, encoding="utf-8") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                rows.append([float(tok) for tok in line.split(",")])
    return rows


def independent_xyz(values):
    """Rectangle-rule integration straight off the shipped CMF table."""
    table = read_table("cie_1931_2deg_5nm.csv")
    assert len(table) == 81
    x = sum(v * row[1] for v, row in zip(values, table)) * 5.0
    y = sum(v * row[2] for v, row in zip(values, table)) * 5.0
    z = sum(v * row[3] for v, row in zip(values, table)) * 5.0
    return x, y, z


def test_zero_spectrum():
    xyz = spectrum_to_xyz(Spectrum.constant(0.0), standard_observer())
    assert (xyz.X, xyz.Y, xyz.Z) == (0.0, 0.0, 0.0)


def test_equal_energy_chromaticity():
    xyz = spectrum_to_xyz(Spectrum.constant(1.0), standard_observer())
    x, y = chromaticity(xyz)
    assert abs(x - 1.0 / 3.0) < 0.01
    assert abs(y - 1.0 / 3.0) < 0.01
    # against the independent integration of the shipped table
    ox, oy, oz = independent_xyz(np.ones(81))
    assert xyz.X == pytest.approx(ox, rel=1e-12)
    assert xyz.Y == pytest.approx(oy, rel=1e-12)
    assert xyz.Z == pytest.approx(oz, rel=1e-12)


def test_linearity_doubling():
    rng = np.random.default_rng(11)
    s = Spectrum(default_grid(), rng.uniform(0.0, 4.0, 81))
    one = spectrum_to_xyz(s, standard_observer())
    two = spectrum_to_xyz(s.scaled(2.0), standard_observer())
    assert two.X == pytest.approx(2.0 * one.X, rel=1e-12)
    assert two.Y == pytest.approx(2.0 * one.Y, rel=1e-12)
    assert two.Z == pytest.approx(2.0 * one.Z, rel=1e-12)


def test_linearity_combination():
    rng = np.random.default_rng(12)
    cmf = standard_observer()
    for _ in range(20):
        s1 = rng.uniform(0.0, 3.0, 81)
        s2 = rng.uniform(0.0, 3.0, 81)
        a, b = rng.uniform(0.1, 2.0, 2)
        lhs = spectrum_to_xyz(Spectrum(default_grid(), a * s1 + b * s2), cmf)
        x1 = spectrum_to_xyz(Spectrum(default_grid(), s1), cmf)
        x2 = spectrum_to_xyz(Spectrum(default_grid(), s2), cmf)
        assert lhs.X == pytest.approx(a * x1.X + b * x2.X, rel=1e-9)
        assert lhs.Y == pytest.approx(a * x1.Y + b * x2.Y, rel=1e-9)
        assert lhs.Z == pytest.approx(a * x1.Z + b * x2.Z, rel=1e-9)


def test_grid_mismatch_rejected():
    from spectralium.spectral import WavelengthGrid

    small = WavelengthGrid(380.0, 10.0, 41)
    s = Spectrum(small, np.ones(41))
    with pytest.raises(ValueError):
        spectrum_to_xyz(s, standard_observer())


def test_d65_white_maps_to_srgb_white():
    white = spectrum_to_xyz(d65_illuminant(), standard_observer())
    r, g, b = xyz_to_srgb(white, white.Y)
    for channel in (r, g, b):
        assert abs(channel - 1.0) < 1.0 / 255.0


def test_black_maps_to_black():
    assert xyz_to_srgb(XYZ(0.0, 0.0, 0.0), 1.0) == (0.0, 0.0, 0.0)


def test_monochromatic_700nm_clamps_g_and_b():
    values = np.zeros(81)
    values[default_grid().index_of(700.0)] = 1.0
    xyz = spectrum_to_xyz(Spectrum(default_grid(), values), standard_observer())
    r, g, b = xyz_to_srgb(xyz, xyz.Y * 5.0)
    assert r > 0.0
    assert g == 0.0
    assert b == 0.0


def test_chromaticity_basics():
    assert chromaticity(XYZ(1.0, 1.0, 1.0)) == pytest.approx((1 / 3, 1 / 3))
    assert chromaticity(XYZ(2.0, 2.0, 2.0)) == pytest.approx((1 / 3, 1 / 3))
    with pytest.raises(ValueError):
        chromaticity(XYZ(0.0, 0.0, 0.0))


def test_chromaticity_scale_invariance():
    rng = np.random.default_rng(13)
    for _ in range(50):
        xyz = XYZ(*rng.uniform(0.01, 5.0, 3))
        c = rng.uniform(0.01, 100.0)
        scaled = XYZ(c * xyz.X, c * xyz.Y, c * xyz.Z)
        assert chromaticity(scaled) == pytest.approx(chromaticity(xyz), rel=1e-12)


def test_y_monotone_in_spectrum():
    rng = np.random.default_rng(14)
    cmf = standard_observer()
    for _ in range(30):
        base = rng.uniform(0.0, 2.0, 81)
        bump = rng.uniform(0.0, 0.5, 81)
        y0 = spectrum_to_xyz(Spectrum(default_grid(), base), cmf).Y
        y1 = spectrum_to_xyz(Spectrum(default_grid(), base + bump), cmf).Y
        assert y1 >= y0


def test_load_cmf_file(tmp_path):
    p = tmp_path / "cmf.csv"
    p.write_text("380, 0.1, 0.2, 0.3\n780, 0.1, 0.2, 0.3\n", encoding="utf-8")
    cmf = load_cmf(p)
    assert np.allclose(cmf.xbar, 0.1)
    assert np.allclose(cmf.ybar, 0.2)
    assert np.allclose(cmf.zbar, 0.3)


def test_shipped_observer_peak_near_555():
    cmf = standard_observer()
    peak_wl = default_grid().wavelengths[int(np.argmax(cmf.ybar))]
    assert 550.0 <= peak_wl <= 560.0
