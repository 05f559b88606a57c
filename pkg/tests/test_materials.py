"""Material library tests.

The CIELAB conversion is checked against an independent scalar oracle
implemented directly from the CIE formulas (sRGB linearization, the D65
XYZ matrix, the cube-root lightness function); the oracle is deliberately
scalar per channel and shares no code with the vectorized implementation.
"""

import math

import numpy as np
import pytest

from matxfer.errors import SamplingError, ValidationError
from matxfer.materials import (
    CATEGORIES,
    DistanceMatrix,
    LibrarySpec,
    Material,
    build_distance_matrix,
    denormalize_lab,
    diversity_stats,
    generate_library,
    lab_distance,
    lab_to_rgb,
    load_distance_matrix,
    load_library,
    normalize_lab,
    rgb_to_lab,
    save_distance_matrix,
    save_library,
)


# ---------------------------------------------------------------------------
# Independent colorimetry oracle (scalar, CIE formulas).
# ---------------------------------------------------------------------------

def _oracle_rgb_to_lab(r, g, b):
    def lin(c):
        return ((c + 0.055) / 1.055) ** 2.4 if c > 0.04045 else c / 12.92

    rl, gl, bl = lin(r), lin(g), lin(b)
    x = (0.4124 * rl + 0.3576 * gl + 0.1805 * bl) * 100.0
    y = (0.2126 * rl + 0.7152 * gl + 0.0722 * bl) * 100.0
    z = (0.0193 * rl + 0.1192 * gl + 0.9505 * bl) * 100.0

    def f(t):
        return t ** (1.0 / 3.0) if t > 0.008856 else 7.787 * t + 16.0 / 116.0

    fx, fy, fz = f(x / 95.047), f(y / 100.0), f(z / 108.883)
    return 116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)


def test_rgb_to_lab_white():
    lab = rgb_to_lab(np.array([1.0, 1.0, 1.0]))
    assert abs(lab[0] - 100.0) < 1e-9
    assert abs(lab[1]) < 0.02 and abs(lab[2]) < 0.02


def test_rgb_to_lab_black():
    lab = rgb_to_lab(np.array([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(lab, [0.0, 0.0, 0.0], atol=1e-12)


def test_rgb_to_lab_mid_gray_matches_oracle():
    lab = rgb_to_lab(np.array([0.5, 0.5, 0.5]))
    want = _oracle_rgb_to_lab(0.5, 0.5, 0.5)
    np.testing.assert_allclose(lab, want, atol=1e-12)
    # Frozen oracle output, for drift detection.
    np.testing.assert_allclose(lab, [53.38896474111432, 0.0031467297079701417, -0.00622597542279113],
                               atol=1e-9)


def test_rgb_to_lab_random_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        r, g, b = rng.random(3)
        got = rgb_to_lab(np.array([r, g, b]))
        np.testing.assert_allclose(got, _oracle_rgb_to_lab(r, g, b), atol=1e-12)


def test_rgb_to_lab_rejects_out_of_range():
    with pytest.raises(ValidationError):
        rgb_to_lab(np.array([1.2, 0.0, 0.0]))
    with pytest.raises(ValidationError):
        rgb_to_lab(np.array([-0.1, 0.0, 0.0]))


def test_lab_rgb_roundtrip():
    rng = np.random.default_rng(1)
    rgb = rng.random((16, 3))
    back = lab_to_rgb(rgb_to_lab(rgb))
    np.testing.assert_allclose(back, rgb, atol=1e-9)


def test_normalize_denormalize_roundtrip():
    rng = np.random.default_rng(2)
    lab = np.stack([rng.uniform(0, 100, 10), rng.uniform(-90, 90, 10), rng.uniform(-90, 90, 10)], axis=-1)
    np.testing.assert_allclose(denormalize_lab(normalize_lab(lab)), lab, atol=1e-12)


# ---------------------------------------------------------------------------
# lab_distance
# ---------------------------------------------------------------------------

def test_lab_distance_identical_is_zero():
    p = np.random.default_rng(3).uniform(0, 50, (4, 4, 3))
    assert lab_distance(p, p) == 0.0


def test_lab_distance_symmetry():
    rng = np.random.default_rng(4)
    a, b = rng.uniform(0, 50, (5, 5, 3)), rng.uniform(0, 50, (5, 5, 3))
    assert lab_distance(a, b) == lab_distance(b, a)


def test_lab_distance_hand_value():
    a = np.array([[[50.0, 0.0, 0.0]]])
    b = np.array([[[53.0, 4.0, 0.0]]])
    assert lab_distance(a, b) == pytest.approx(5.0, abs=1e-12)  # sqrt(9 + 16)


def test_lab_distance_resolution_independent():
    # RMS convention: tiling the same colors leaves distance unchanged.
    a = np.array([[[50.0, 0.0, 0.0]]])
    b = np.array([[[53.0, 4.0, 0.0]]])
    a4 = np.tile(a, (2, 2, 1))
    b4 = np.tile(b, (2, 2, 1))
    assert lab_distance(a4, b4) == pytest.approx(5.0, abs=1e-12)


def test_lab_distance_permutation_invariant():
    rng = np.random.default_rng(5)
    a = rng.uniform(0, 60, (3, 4, 3))
    b = rng.uniform(0, 60, (3, 4, 3))
    base = lab_distance(a, b)
    flat_a = a.reshape(-1, 3)
    flat_b = b.reshape(-1, 3)
    for _ in range(10):
        perm = rng.permutation(flat_a.shape[0])
        pa = flat_a[perm].reshape(a.shape)
        pb = flat_b[perm].reshape(b.shape)
        assert lab_distance(pa, pb) == pytest.approx(base, abs=1e-12)


def test_lab_distance_shape_mismatch():
    with pytest.raises(ValidationError):
        lab_distance(np.zeros((2, 2, 3)), np.zeros((3, 3, 3)))


# ---------------------------------------------------------------------------
# Distance matrix
# ---------------------------------------------------------------------------

def _mat(i, cat, lab, size=1):
    patch = np.tile(np.asarray(lab, dtype=np.float64), (size, size, 1))
    return Material(id=i, label=f"{cat}_{i}", category=cat, patch=patch)


def test_distance_matrix_hand_values():
    mats = [
        _mat(0, "woods", [50.0, 0.0, 0.0]),
        _mat(1, "woods", [53.0, 4.0, 0.0]),
        _mat(2, "metals", [50.0, 0.0, 12.0]),
    ]
    dm = build_distance_matrix(mats)
    dm.validate()
    for i in range(3):
        for j in range(3):
            want = lab_distance(mats[i].patch, mats[j].patch)
            assert dm.D[i, j] == pytest.approx(want, abs=1e-12)
    assert dm.D[0, 1] == pytest.approx(5.0, abs=1e-12)
    assert dm.D[0, 2] == pytest.approx(12.0, abs=1e-12)


def test_distance_matrix_duplicate_material():
    mats = [
        _mat(0, "woods", [40.0, 10.0, 10.0]),
        _mat(1, "metals", [40.0, 10.0, 10.0]),
        _mat(2, "metals", [70.0, 0.0, 0.0]),
    ]
    dm = build_distance_matrix(mats)
    assert dm.D[0, 1] == 0.0


def test_distance_matrix_requires_uniform_patches():
    mats = [_mat(0, "woods", [50, 0, 0], size=1), _mat(1, "woods", [50, 0, 0], size=2)]
    with pytest.raises(ValidationError):
        build_distance_matrix(mats)


def test_distance_matrix_needs_two_materials():
    with pytest.raises(ValidationError):
        build_distance_matrix([_mat(0, "woods", [50, 0, 0])])


def test_metric_axioms_n32_exhaustive():
    spec = LibrarySpec(counts={c: 7 for c in CATEGORIES[:4]} | {CATEGORIES[4]: 4},
                       patch_size=4, seed=9)
    mats = generate_library(spec)
    assert len(mats) == 32
    dm = build_distance_matrix(mats)
    n = dm.n
    assert np.all(np.diag(dm.D) == 0.0)
    assert np.array_equal(dm.D, dm.D.T)
    assert dm.D.min() >= 0.0
    for i in range(n):
        for j in range(n):
            for k in range(n):
                assert dm.D[i, j] <= dm.D[i, k] + dm.D[k, j] + 1e-9


def test_distance_matrix_permutation_consistency():
    spec = LibrarySpec(counts={"woods": 3, "metals": 3}, patch_size=2, seed=1)
    mats = generate_library(spec)
    dm = build_distance_matrix(mats)
    perm = [3, 1, 4, 0, 5, 2]
    permuted = [Material(id=i, label=mats[p].label, category=mats[p].category, patch=mats[p].patch)
                for i, p in enumerate(perm)]
    dm2 = build_distance_matrix(permuted)
    for a, pa in enumerate(perm):
        for b, pb in enumerate(perm):
            assert dm2.D[a, b] == pytest.approx(dm.D[pa, pb], abs=1e-12)


# ---------------------------------------------------------------------------
# Diversity statistics
# ---------------------------------------------------------------------------

def test_diversity_all_identical():
    mats = [_mat(i, "woods" if i < 2 else "metals", [40, 5, 5]) for i in range(4)]
    dm = build_distance_matrix(mats)
    rep = diversity_stats(mats, dm)
    assert rep.intra["woods"] == 0.0 and rep.intra["metals"] == 0.0
    assert rep.inter == 0.0


def test_diversity_hand_enumeration():
    mats = [
        _mat(0, "woods", [40.0, 0.0, 0.0]),
        _mat(1, "woods", [46.0, 0.0, 0.0]),
        _mat(2, "metals", [40.0, 8.0, 0.0]),
        _mat(3, "metals", [40.0, 0.0, 6.0]),
    ]
    dm = build_distance_matrix(mats)
    rep = diversity_stats(mats, dm)
    # Hand enumeration: intra woods = d(0,1) = 6; intra metals = d(2,3) = sqrt(64+36) = 10.
    assert rep.intra["woods"] == pytest.approx(6.0, abs=1e-12)
    assert rep.intra["metals"] == pytest.approx(10.0, abs=1e-12)
    # Inter pairs: (0,2)=8, (0,3)=6, (1,2)=10, (1,3)=sqrt(36+36).
    want = (8.0 + 6.0 + 10.0 + math.sqrt(72.0)) / 4.0
    assert rep.inter == pytest.approx(want, abs=1e-12)


def test_diversity_single_category_no_inter():
    mats = [_mat(0, "woods", [40, 0, 0]), _mat(1, "woods", [50, 0, 0])]
    rep = diversity_stats(mats, build_distance_matrix(mats))
    assert rep.inter is None


def test_diversity_singleton_category_flagged():
    mats = [_mat(0, "woods", [40, 0, 0]), _mat(1, "woods", [50, 0, 0]), _mat(2, "metals", [70, 0, 0])]
    rep = diversity_stats(mats, build_distance_matrix(mats))
    assert rep.intra["metals"] is None
    assert rep.intra["woods"] == pytest.approx(10.0, abs=1e-12)


# ---------------------------------------------------------------------------
# Library generation and I/O
# ---------------------------------------------------------------------------

def test_generate_library_deterministic_and_valid():
    spec = LibrarySpec(counts={c: 4 for c in CATEGORIES}, patch_size=6, seed=42)
    a = generate_library(spec)
    b = generate_library(spec)
    assert len(a) == 20
    for ma, mb in zip(a, b):
        assert ma.label == mb.label and ma.category == mb.category
        np.testing.assert_array_equal(ma.patch, mb.patch)
        ma.validate()
    assert [m.id for m in a] == list(range(20))


def test_generate_library_min_pair_distance():
    spec = LibrarySpec(counts={c: 4 for c in CATEGORIES}, patch_size=4, seed=7,
                       min_pair_distance=10.0, noise_amplitude=0.5)
    mats = generate_library(spec)
    dm = build_distance_matrix(mats)
    off = dm.D + np.eye(dm.n) * 1e9
    assert off.min() >= 10.0


def test_generate_library_unsatisfiable_separation():
    spec = LibrarySpec(counts={"woods": 50}, patch_size=2, seed=0,
                       spread=1.0, min_pair_distance=30.0, max_tries=20)
    with pytest.raises(SamplingError):
        generate_library(spec)


def test_library_roundtrip(tmp_path):
    mats = generate_library(LibrarySpec(counts={"woods": 3, "fabrics": 2}, patch_size=4, seed=3))
    save_library(tmp_path / "lib", mats)
    back = load_library(tmp_path / "lib")
    assert len(back) == len(mats)
    for a, b in zip(mats, back):
        assert (a.id, a.label, a.category) == (b.id, b.label, b.category)
        np.testing.assert_array_equal(a.patch, b.patch)


def test_distance_matrix_export_format(tmp_path):
    mats = generate_library(LibrarySpec(counts={"woods": 3, "metals": 3}, patch_size=4, seed=5))
    dm = build_distance_matrix(mats)
    path = tmp_path / "distance.txt"
    save_distance_matrix(path, dm)
    lines = path.read_text().splitlines()
    assert lines[0] == "6"
    assert len(lines) == 7
    back = load_distance_matrix(path)
    assert back.n == 6
    np.testing.assert_allclose(back.D, dm.D, rtol=1e-8)
    back.validate(atol=1e-7)
