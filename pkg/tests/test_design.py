import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dmribench.design import (
    condition_number,
    dti_angular_design,
    dti_design_matrix,
    laplace_beltrami_penalty,
    parse_model,
    random_subset_baseline,
    select_subset,
    sh_coefficient_count,
    sh_degrees,
    sh_design_matrix,
    sh_order_from_count,
    subset_scheme,
)
from dmribench.errors import RankDeficient
from dmribench.sphere import (
    antipodal_classes,
    fibonacci_hemisphere,
    icosphere,
    make_hemisphere_362,
    min_pairwise_angle,
    random_rotation,
    random_rotations,
)
from dmribench.volume import GradientScheme

unit3 = st.tuples(*[st.floats(-1, 1)] * 3).filter(lambda v: np.linalg.norm(v) > 0.1).map(
    lambda v: np.asarray(v) / np.linalg.norm(v))


# --- sphere ------------------------------------------------------------------------

@pytest.mark.parametrize("n,count", [(0, 12), (1, 42), (2, 162), (3, 642)])
def test_icosphere_counts(n, count):
    v, f = icosphere(n)
    assert len(v) == count
    assert len(f) == 20 * 4 ** n
    np.testing.assert_allclose(np.linalg.norm(v, axis=1), 1.0, atol=1e-15)
    # the icosphere is centrally symmetric
    assert len(np.unique(antipodal_classes(v))) == count // 2


def test_hemisphere_362():
    h = make_hemisphere_362()
    assert h.shape == (362, 3)
    assert h[:, 2].min() >= 0
    np.testing.assert_allclose(np.linalg.norm(h, axis=1), 1.0, atol=1e-12)
    assert min_pairwise_angle(h) > 5.0
    assert np.array_equal(h, make_hemisphere_362())


def test_fibonacci_hemisphere():
    d = fibonacci_hemisphere(90)
    assert d.shape == (90, 3) and d[:, 2].min() > 0
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0)


def test_random_rotation_is_proper(rng):
    r = random_rotation(rng)
    np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(r) == pytest.approx(1.0)


def test_random_rotations_batch(rng):
    r = random_rotations(rng, 500)
    np.testing.assert_allclose(r @ r.transpose(0, 2, 1), np.broadcast_to(np.eye(3), r.shape),
                               atol=1e-12)
    np.testing.assert_allclose(np.linalg.det(r), 1.0)
    # uniform rotations send a fixed axis to a uniform direction: mean near zero
    assert np.abs((r @ np.array([0, 0, 1.0])).mean(0)).max() < 0.1


# --- DTI design ------------------------------------------------------------------------

def test_dti_rows():
    s = GradientScheme([1, 0, 1000], [[1, 0, 0], [0, 0, 0], [2 ** -0.5, 2 ** -0.5, 0]])
    d = dti_design_matrix(s)
    np.testing.assert_allclose(d[0], [-1, 0, 0, 0, 0, 0, 1])
    np.testing.assert_array_equal(d[1], [0, 0, 0, 0, 0, 0, 1])
    np.testing.assert_allclose(d[2], [-500, -500, 0, -1000, 0, 0, 1], atol=1e-12)


@given(unit3, st.floats(1, 5000))
def test_dti_row_reproduces_quadratic_form(g, b):
    # row . [Dxx, Dyy, Dzz, Dxy, Dxz, Dyz, ln S0] == -b g^T D g + ln S0
    d6 = np.array([1.7, 0.3, 0.4, 0.1, -0.2, 0.05]) * 1e-3
    D = np.array([[d6[0], d6[3], d6[4]], [d6[3], d6[1], d6[5]], [d6[4], d6[5], d6[2]]])
    row = dti_design_matrix(GradientScheme([b], [g]))[0]
    assert row @ np.r_[d6, 2.0] == pytest.approx(-b * g @ D @ g + 2.0, rel=1e-12, abs=1e-12)


# --- spherical harmonics ---------------------------------------------------------------

@pytest.mark.parametrize("order,cols", [(0, 1), (2, 6), (4, 15), (6, 28), (8, 45)])
def test_sh_column_counts(order, cols):
    assert sh_coefficient_count(order) == cols
    assert sh_design_matrix(fibonacci_hemisphere(50), order).shape == (50, cols)
    assert sh_order_from_count(cols) == order


def test_sh_order_zero_constant(rng):
    d = rng.normal(size=(20, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    np.testing.assert_allclose(sh_design_matrix(d, 0), 1 / np.sqrt(4 * np.pi), rtol=1e-14)


def test_sh_odd_order_rejected():
    with pytest.raises(ValueError):
        sh_design_matrix(fibonacci_hemisphere(10), 3)


def _quadrature(n_theta=20, n_phi=40):
    x, w = np.polynomial.legendre.leggauss(n_theta)
    theta = np.arccos(x)
    phi = 2 * np.pi * np.arange(n_phi) / n_phi
    tt, pp = np.meshgrid(theta, phi, indexing="ij")
    dirs = np.stack([np.sin(tt) * np.cos(pp), np.sin(tt) * np.sin(pp), np.cos(tt)], -1)
    weights = np.repeat(w[:, None], n_phi, axis=1) * (2 * np.pi / n_phi)
    return dirs.reshape(-1, 3), weights.ravel()


@pytest.mark.parametrize("order", [4, 6, 8])
def test_sh_orthonormal_on_sphere(order):
    # Gauss-Legendre in cos(theta) x uniform phi integrates these products exactly
    dirs, w = _quadrature()
    y = sh_design_matrix(dirs, order)
    np.testing.assert_allclose(y.T @ (w[:, None] * y), np.eye(y.shape[1]), atol=1e-12)


def test_sh_degree_two_closed_forms(rng):
    d = rng.normal(size=(30, 3))
    x, y, z = (d / np.linalg.norm(d, axis=1, keepdims=True)).T
    c = np.sqrt(15 / (4 * np.pi))
    expected = np.stack([
        c * x * y,                                   # m = -2
        -c * y * z,                                  # m = -1 (Condon-Shortley)
        np.sqrt(5 / (16 * np.pi)) * (3 * z * z - 1),  # m = 0
        -c * x * z,                                  # m = 1
        c / 2 * (x * x - y * y),                     # m = 2
    ], 1)
    got = sh_design_matrix(np.stack([x, y, z], 1), 2)[:, 1:]
    np.testing.assert_allclose(got, expected, atol=1e-12)


@given(unit3)
def test_sh_antipodal_symmetry(g):
    np.testing.assert_allclose(sh_design_matrix(g, 6), sh_design_matrix(-g, 6), atol=1e-12)


def test_laplace_beltrami_penalty():
    ls, ms = sh_degrees(4)
    assert ls.tolist() == [0] + [2] * 5 + [4] * 9
    assert ms.tolist()[:6] == [0, -2, -1, 0, 1, 2]
    np.testing.assert_array_equal(laplace_beltrami_penalty(4), [0] + [36] * 5 + [400] * 9)


# --- conditioning -------------------------------------------------------------------------

def test_condition_number_examples():
    assert condition_number(np.eye(6)) == 1.0
    five = fibonacci_hemisphere(5)
    with pytest.raises(RankDeficient):
        condition_number(dti_angular_design(np.vstack([five, five[:1]])))
    with pytest.raises(RankDeficient):
        condition_number(np.ones((3, 4)))
    # oracle: singular values of diag(3, 1, 0.5)
    assert condition_number(np.diag([3.0, 1.0, 0.5])) == pytest.approx(6.0)


@given(st.permutations(range(12)))
def test_condition_number_permutation_invariant(perm):
    d = dti_angular_design(fibonacci_hemisphere(12))
    assert condition_number(d[list(perm)]) == pytest.approx(condition_number(d), rel=1e-14)


def test_sh_condition_number_rotation_invariant(rng):
    d = fibonacci_hemisphere(40)
    base = condition_number(sh_design_matrix(d, 4))
    for _ in range(5):
        r = random_rotation(rng)
        assert condition_number(sh_design_matrix(d @ r.T, 4)) == pytest.approx(base, abs=1e-9)


# --- subset selection ---------------------------------------------------------------------

def test_parse_model():
    assert parse_model("dti").minimum == 6
    assert parse_model("sh4").minimum == 15
    assert parse_model("sh(6)").minimum == 28
    with pytest.raises(ValueError):
        parse_model("sh3")


def test_select_all_candidates_is_identity():
    c = fibonacci_hemisphere(8)
    sel = select_subset(c, 8, "dti", seed=0)
    assert sel.indices == tuple(range(8))
    assert sel.condition_number == pytest.approx(condition_number(dti_angular_design(c)))


def test_select_below_minimum():
    with pytest.raises(ValueError):
        select_subset(fibonacci_hemisphere(20), 5, "dti")
    with pytest.raises(ValueError):
        select_subset(fibonacci_hemisphere(20), 14, "sh4")


def test_select_needs_a_start():
    with pytest.raises(ValueError):
        select_subset(fibonacci_hemisphere(20), 6, "dti", n_random=0, restarts=0, relax_starts=0)


def test_select_brute_force_small_pool():
    # exhaustive oracle over all C(12, 6) subsets
    c = fibonacci_hemisphere(12)
    d = dti_angular_design(c)
    best = np.inf
    for comb in itertools.combinations(range(12), 6):
        try:
            best = min(best, condition_number(d[list(comb)]))
        except RankDeficient:
            pass
    sel = select_subset(c, 6, "dti", seed=3, restarts=5, relax_starts=0)
    assert sel.condition_number == pytest.approx(best, rel=1e-12)


def test_select_dti_from_90():
    sel = select_subset(fibonacci_hemisphere(90), 6, "dti", seed=0)
    assert len(set(sel.indices)) == 6
    assert sel.condition_number <= 2.0


def test_select_is_deterministic_and_thread_independent():
    c = fibonacci_hemisphere(60)
    a = select_subset(c, 6, "dti", seed=11, restarts=4, relax_starts=2)
    b = select_subset(c, 6, "dti", seed=11, restarts=4, relax_starts=2, threads=3)
    assert a.indices == b.indices and a.condition_number == b.condition_number


def test_antipodal_candidates_merged():
    c = fibonacci_hemisphere(20)
    both = np.vstack([c, -c])
    sel = select_subset(both, 6, "dti", seed=0, restarts=3, relax_starts=0)
    classes = antipodal_classes(both)
    assert len({classes[i] for i in sel.indices}) == 6


@pytest.mark.slow
def test_select_sh4_against_random_baseline():
    c = fibonacci_hemisphere(90)
    _, base = random_subset_baseline(c, 15, "sh4", seed=1, n=100_000)
    sel = select_subset(c, 15, "sh4", seed=0, restarts=5)
    assert np.isfinite(sel.condition_number)
    assert sel.condition_number <= 1.5 * base
    assert sel.condition_number <= base


def test_subset_never_worse_than_random_baseline():
    c = fibonacci_hemisphere(40)
    _, base = random_subset_baseline(c, 6, "dti", seed=5, n=200)
    sel = select_subset(c, 6, "dti", seed=5, restarts=0, n_random=200, relax_starts=0)
    assert sel.condition_number <= base + 1e-12


def test_dti_selection_quality_roughly_rotation_stable(rng):
    c = fibonacci_hemisphere(90)
    base = select_subset(c, 6, "dti", seed=0).condition_number
    for _ in range(1):
        rot = select_subset(c @ random_rotation(rng).T, 6, "dti", seed=0).condition_number
        assert abs(rot - base) / base < 0.02


@pytest.mark.xfail(strict=True, reason="the 6-column DTI design is not rotation-equivariant, "
                                        "so a discrete candidate set's optimum moves under rotation")
def test_dti_selection_quality_rotation_invariant_1e6(rng):
    c = fibonacci_hemisphere(90)
    base = select_subset(c, 6, "dti", seed=0).condition_number
    rot = select_subset(c @ random_rotation(rng).T, 6, "dti", seed=0).condition_number
    assert abs(rot - base) < 1e-6


def test_subset_scheme():
    s = GradientScheme([0, 1000, 1000, 0, 1000], [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 0],
                                                  [0, 0, 1]])
    assert subset_scheme(s, [1, 2, 4], [2, 0]) == [0, 4, 1]
    assert subset_scheme(s, [1, 2, 4], [1], n_b0=2) == [0, 3, 2]
