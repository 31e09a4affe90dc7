import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmribench.errors import (
    EmptyMask,
    GridMismatch,
    RegionMismatch,
    ZeroMeanPair,
    ZeroVarianceRegion,
)
from dmribench.reliability import (
    RegionStats,
    ScnMatrix,
    aggregate_cov,
    cov_within_subject,
    read_means_csv,
    read_scn_csv,
    region_means,
    scn_build,
    scn_mae,
    scn_repeatability,
    session_average,
    write_means_csv,
    write_scn_csv,
)


def pearson_oracle(x):
    # textbook covariance / (sigma sigma), one pair at a time
    n, r = x.shape
    out = np.empty((r, r))
    for i, j in itertools.product(range(r), repeat=2):
        a, b = x[:, i], x[:, j]
        cov = sum((a[k] - a.mean()) * (b[k] - b.mean()) for k in range(n)) / n
        out[i, j] = cov / (a.std() * b.std())
    return out


# --- regional means ----------------------------------------------------------------

def test_region_means_examples():
    lab = np.zeros((4, 4, 4), int)
    lab[:2] = 3
    lab[3, 3, 3] = 5
    x = np.full((4, 4, 4), 2.5)
    x[3, 3, 3] = 7.0
    stats = region_means(x, lab)
    assert stats.regions == (3, 5)
    assert stats.as_dict() == {3: 2.5, 5: 7.0}
    assert stats.count.tolist() == [32, 1]


def test_region_means_checkerboard():
    lab = np.zeros((4, 4, 2), int)
    lab[:2] = 1
    lab[2:] = 2
    lab[0, 0, 0] = 0
    x = (np.indices((4, 4, 2)).sum(0) % 2 + 1).astype(float)
    stats = region_means(x, lab)
    for r in (1, 2):
        vals = [x[i, j, k] for i, j, k in itertools.product(range(4), range(4), range(2))
                if lab[i, j, k] == r]
        assert stats.as_dict()[r] == pytest.approx(sum(vals) / len(vals), abs=1e-15)


def test_region_means_errors():
    lab = np.ones((3, 3, 3), int)
    with pytest.raises(GridMismatch):
        region_means(np.ones((3, 3, 4)), lab)
    with pytest.raises(EmptyMask):
        region_means(np.ones((3, 3, 3)), lab, regions=[2])
    sel = region_means(np.ones((3, 3, 3)), lab).select([1])
    assert sel.regions == (1,)
    with pytest.raises(RegionMismatch):
        sel.select([4])


# --- CoV ----------------------------------------------------------------------------

def test_cov_examples():
    assert cov_within_subject(1.0, 1.0) == 0.0
    assert cov_within_subject(1.0, 1.2) == pytest.approx(100 / 11, abs=1e-10)
    assert cov_within_subject(0.0, 2.0) == 100.0
    with pytest.raises(ZeroMeanPair):
        cov_within_subject(0.0, 0.0)


def test_cov_is_population_sd_over_mean(rng):
    a, b = rng.random(10) + 0.1, rng.random(10) + 0.1
    pair = np.stack([a, b])
    expected = 100 * pair.std(axis=0) / pair.mean(axis=0)
    np.testing.assert_allclose(cov_within_subject(a, b), expected, rtol=1e-13)


pos = st.floats(1e-3, 1e3)


@given(pos, pos, st.floats(1e-3, 1e3))
def test_cov_symmetric_and_scale_invariant(a, b, c):
    assert cov_within_subject(a, b) == cov_within_subject(b, a)
    assert cov_within_subject(c * a, c * b) == pytest.approx(cov_within_subject(a, b),
                                                             rel=1e-13, abs=1e-13)


@given(pos, pos, st.integers(-20, 20))
def test_cov_scale_invariant_bitwise_for_powers_of_two(a, b, e):
    c = 2.0 ** e
    assert cov_within_subject(c * a, c * b) == cov_within_subject(a, b)


def test_cov_region_mismatch():
    a = RegionStats((1, 2), np.ones(2), np.ones(2))
    b = RegionStats((1, 3), np.ones(2), np.ones(2))
    with pytest.raises(RegionMismatch):
        cov_within_subject(a, b)
    with pytest.raises(RegionMismatch):
        cov_within_subject(np.ones(2), np.ones(3))


def test_aggregate_cov_enumeration(rng):
    s1 = rng.random((3, 4)) + 0.5
    s2 = rng.random((3, 4)) + 0.5
    per_subject = []
    for i in range(3):
        vals = [100 * abs(s1[i, j] - s2[i, j]) / (s1[i, j] + s2[i, j]) for j in range(4)]
        per_subject.append(sum(vals) / 4)
    assert aggregate_cov(s1, s2) == pytest.approx(sum(per_subject) / 3, abs=1e-12)
    stats1 = [RegionStats((1, 2, 3, 4), row, np.ones(4)) for row in s1]
    stats2 = [RegionStats((1, 2, 3, 4), row, np.ones(4)) for row in s2]
    assert aggregate_cov(stats1, stats2) == aggregate_cov(s1, s2)


# --- SCN ------------------------------------------------------------------------------

def test_scn_matches_oracle(rng):
    x = rng.random((5, 6))
    scn = scn_build(x)
    np.testing.assert_allclose(scn.corr, pearson_oracle(x), atol=1e-12)
    np.testing.assert_allclose(scn.corr, np.corrcoef(x.T), atol=1e-12)
    assert np.array_equal(scn.corr, scn.corr.T)
    assert np.all(np.diag(scn.corr) == 1.0)
    assert scn.n_subjects == 5 and scn.regions == tuple(range(1, 7))


def test_scn_duplicate_and_negated(rng):
    a = rng.random(6)
    scn = scn_build(np.stack([a, a, -a, rng.random(6)], 1))
    assert scn.corr[0, 1] == 1.0
    assert scn.corr[0, 2] == pytest.approx(-1.0, abs=1e-15)


def test_scn_errors(rng):
    x = rng.random((4, 3))
    x[:, 1] = 2.0
    with pytest.raises(ZeroVarianceRegion) as exc:
        scn_build(x, ["wm", "gm", "csf"])
    assert "gm" in str(exc.value)
    with pytest.raises(ValueError):
        scn_build(rng.random((2, 3)))
    with pytest.raises(RegionMismatch):
        scn_build(rng.random((4, 3)), ["a", "b"])


@settings(max_examples=25)
@given(st.lists(st.tuples(st.floats(0.1, 10), st.floats(-5, 5)), min_size=4, max_size=4))
def test_scn_affine_invariance(params):
    x = np.random.default_rng(0).random((6, 4))
    slope = np.array([p[0] for p in params])
    shift = np.array([p[1] for p in params])
    np.testing.assert_allclose(scn_build(x * slope + shift).corr, scn_build(x).corr, atol=1e-12)


def test_scn_mae_examples():
    a = np.array([[1.0, 0.5], [0.5, 1.0]])
    b = np.array([[1.0, 0.1], [0.1, 1.0]])
    assert scn_mae(a, a) == 0.0
    assert scn_mae(a, b) == pytest.approx(0.4)
    c = np.array([[1.0, 0.3], [0.3, 1.0]])
    assert scn_repeatability(c, -c + 2 * np.eye(2)) == pytest.approx(0.6)
    with pytest.raises(RegionMismatch):
        scn_mae(a, np.eye(3))
    with pytest.raises(RegionMismatch):
        scn_mae(ScnMatrix(a, (1, 2), 3), ScnMatrix(b, (1, 3), 3))


def test_scn_repeatability_hand_enumeration(rng):
    s1 = scn_build(rng.random((8, 3)))
    s2 = scn_build(rng.random((8, 3)))
    pairs = [(0, 1), (0, 2), (1, 2)]
    hand = sum(abs(s1.corr[i, j] - s2.corr[i, j]) for i, j in pairs) / 3
    assert scn_repeatability(s1, s2) == pytest.approx(hand, abs=1e-15)


def test_scn_mae_pseudometric(rng):
    violations = 0
    for _ in range(300):
        a, b, c = (scn_build(rng.random((6, 5))) for _ in range(3))
        assert scn_mae(a, b) == scn_mae(b, a)
        violations += scn_mae(a, c) > scn_mae(a, b) + scn_mae(b, c) + 1e-15
    assert violations == 0


def test_session_average(rng):
    a, b = rng.random((3, 2)), rng.random((3, 2))
    np.testing.assert_allclose(session_average([a, b]), (a + b) / 2)


# --- CSV ------------------------------------------------------------------------------

def test_means_csv_round_trip(tmp_path, rng):
    t = rng.random((3, 4))
    p = tmp_path / "means.csv"
    write_means_csv(p, ["s1", "s2", "s3"], ["1", "2", "3", "4"], t)
    assert p.read_text(encoding="utf-8").splitlines()[0] == "subject,1,2,3,4"
    subjects, regions, back = read_means_csv(p)
    assert subjects == ["s1", "s2", "s3"] and regions == ["1", "2", "3", "4"]
    np.testing.assert_array_equal(back, t)
    p.write_text("name,a\nx,1\n", encoding="utf-8")
    with pytest.raises(ValueError):
        read_means_csv(p)
    p.write_text("subject,a\nx,abc\n", encoding="utf-8")
    with pytest.raises(ValueError):
        read_means_csv(p)


def test_scn_csv_round_trip(tmp_path, rng):
    scn = scn_build(rng.random((5, 3)), ["a", "b", "c"])
    p = tmp_path / "scn.csv"
    write_scn_csv(p, scn)
    back = read_scn_csv(p)
    assert back.regions == ("a", "b", "c")
    np.testing.assert_array_equal(back.corr, scn.corr)


@settings(max_examples=50)
@given(st.integers(0, 10_000), st.floats(-5, 5))
def test_scn_duplicate_exactly_one(seed, log_scale):
    r = np.random.default_rng(seed)
    x = r.random((int(r.integers(3, 20)), 4)) * 10.0 ** log_scale
    corr = scn_build(np.c_[x, x[:, 2], -x[:, 2]]).corr
    assert corr[2, 4] == 1.0 and corr[4, 5] == -1.0
