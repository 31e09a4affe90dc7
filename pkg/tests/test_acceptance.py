"""Acceptance criteria 1-11, each reporting PASS/FAIL at its stated tolerance."""
import csv
import itertools
import json
import time

import numpy as np
import pytest

from dmribench.design import select_subset, sh_coefficient_count, sh_design_matrix
from dmribench.dti import fit_dti, tensor_from_eig, tensor_scalars
from dmribench.mppca import denoise_mppca, mp_threshold, residual_moments
from dmribench.phantom import (
    PhantomSpec,
    Region,
    add_rician,
    kspace_downsample,
    make_phantom,
    multishell_scheme,
    two_region_spec,
)
from dmribench.pipeline import PipelineConfig, run_pipeline
from dmribench.reliability import (
    aggregate_cov,
    cov_within_subject,
    scn_build,
    scn_mae,
    scn_repeatability,
)
from dmribench.shm import fit_sh, jsd, project_sh
from dmribench.sphere import fibonacci_hemisphere, icosphere
from dmribench.volume import GradientScheme, Volume4D, shell_partition

WM_EVALS = (1.7e-3, 0.3e-3, 0.3e-3)


def closed_form_fa(lam):
    lam = np.asarray(lam)
    return np.sqrt(1.5) * np.linalg.norm(lam - lam.mean()) / np.linalg.norm(lam)


def test_criterion_01_exact_recovery(criterion):
    t0 = time.perf_counter()
    cand = fibonacci_hemisphere(90)
    sel = select_subset(cand, 6, "dti", seed=0)
    scheme = GradientScheme(np.r_[0.0, np.full(6, 1000.0)],
                            np.vstack([np.zeros(3), cand[list(sel.indices)]]))
    D = tensor_from_eig(WM_EVALS, [1.0, 0.0, 0.0])
    region = Region(1, "box", {"lo": [0, 0, 0], "hi": [8, 8, 8]}, D)
    vol, scheme, truth, labels = make_phantom(PhantomSpec((8, 8, 8), scheme, [region]))
    fit = fit_dti(vol, scheme, labels > 0)
    comp_err = np.abs(fit.tensor - truth.tensor).max()
    fa_err = np.abs(tensor_scalars(fit)["FA"] - closed_form_fa(WM_EVALS)).max()
    elapsed = time.perf_counter() - t0
    ok = comp_err <= 1e-9 and fa_err <= 1e-9 and elapsed < 5.0
    criterion(1, ok, f"tensor err {comp_err:.1e}, FA err {fa_err:.1e} "
                     f"(FA {closed_form_fa(WM_EVALS):.5f}), {elapsed:.1f} s")
    assert ok


def test_criterion_02_design_quality(criterion):
    cand, _ = icosphere(3)
    t0 = time.perf_counter()
    a = select_subset(cand, 6, "dti", seed=0)
    b = select_subset(cand, 6, "dti", seed=0)
    elapsed = time.perf_counter() - t0
    ok = (len(cand) == 642 and a.condition_number <= 1.40 and a.indices == b.indices
          and a.condition_number == b.condition_number and elapsed < 30.0)
    criterion(2, ok, f"cond {a.condition_number:.4f} <= 1.40 on 642 points, repeat identical "
                     f"{a.indices == b.indices}, {elapsed:.1f} s for two runs")
    assert ok


def test_criterion_03_sh_counts_and_exactness(criterion, rng):
    counts = (sh_coefficient_count(4), sh_coefficient_count(6))
    shapes = (sh_design_matrix(fibonacci_hemisphere(40), 4).shape[1],
              sh_design_matrix(fibonacci_hemisphere(40), 6).shape[1])
    worst = 0.0
    for order, n in ((4, 15), (6, 28)):
        dirs = fibonacci_hemisphere(n)
        sig = rng.normal(size=(10, n))
        worst = max(worst, np.abs(project_sh(fit_sh(sig, dirs, order), dirs) - sig).max())
    ok = counts == (15, 28) and shapes == (15, 28) and worst < 1e-8
    criterion(3, ok, f"columns {shapes}, interpolation residual {worst:.1e}")
    assert ok


def test_criterion_04_jsd_properties(criterion):
    r = np.random.default_rng(4)
    p = r.random(362)
    identity = jsd(p, p)
    disjoint = jsd(np.r_[np.ones(181), np.zeros(181)], np.r_[np.zeros(181), np.ones(181)])
    violations = 0
    for _ in range(1000):
        a, b, c = r.random((3, 362)) ** 4  # peaked, ODF-like
        violations += jsd(a, c) > jsd(a, b) + jsd(b, c) + 1e-12
    ok = identity == 0.0 and abs(disjoint - 1.0) <= 1e-9 and violations == 0
    criterion(4, ok, f"identity {identity}, disjoint {disjoint:.12f}, "
                     f"triangle violations {violations}/1000")
    assert ok


def _spectrum(x):
    x = x - x.mean(axis=1, keepdims=True)
    return np.linalg.eigvalsh(x @ x.T / x.shape[1])[::-1], x.shape[1]


def test_criterion_05_mppca_statistics(criterion):
    t0 = time.perf_counter()
    r = np.random.default_rng(5)
    sigma_ok = rank_ok = 0
    for _ in range(100):
        p, s2 = mp_threshold(*_spectrum(r.normal(0, 2.0, size=(30, 125))))
        sigma_ok += abs(np.sqrt(s2) - 2.0) <= 0.2
        signal = r.normal(size=(30, 3)) @ r.normal(size=(3, 125)) * 3.0
        rank_ok += mp_threshold(*_spectrum(signal + r.normal(size=(30, 125))))[0] == 3
    noisy = 100.0 + r.normal(size=(12, 12, 12, 30))
    den, _ = denoise_mppca(Volume4D(noisy))
    reduction = 1.0 - den.data.var() / noisy.var()
    elapsed = time.perf_counter() - t0
    ok = sigma_ok >= 95 and rank_ok >= 95 and reduction >= 0.75 and elapsed < 120
    criterion(5, ok, f"sigma within 10% {sigma_ok}/100, rank 3 {rank_ok}/100, "
                     f"variance reduction {100 * reduction:.1f}%, {elapsed:.1f} s")
    assert ok


def _benchmark_config(tmp_path, seed, out="out"):
    return PipelineConfig.from_dict({
        "output": out, "seed": seed,
        "inputs": {"phantom": {"preset": "two-region", "n": 16, "scheme": {
            "multishell": {"shells": [1000], "n_dirs": 90, "n_b0": 6}}}},
        "noise": {"model": "rician", "snr": 20},
        "denoisers": ["none", "mppca"],
        "subsets": [6],
        "metrics": ["FA", "MD", "AD", "RD", "V1"],
    }, tmp_path)


def test_criterion_06_denoised_beats_raw(criterion, tmp_path):
    t0 = time.perf_counter()
    out = run_pipeline(_benchmark_config(tmp_path, seed=0))
    elapsed = time.perf_counter() - t0
    with open(out / "report.csv", encoding="utf-8") as fh:
        v = {(m, metric, reg): float(x) for m, _, metric, reg, x in list(csv.reader(fh))[1:]}
    metrics = ("FA", "MD", "AD", "RD", "V1")
    assert all(("RAW", m, "all") in v and ("MPPCA", m, "all") in v for m in metrics)
    ok = (v["MPPCA", "FA", "all"] < v["RAW", "FA", "all"]
          and v["MPPCA", "V1", "all"] < v["RAW", "V1", "all"] and elapsed < 120)
    criterion(6, ok, "FA MAE RAW {:.4f} vs MPPCA {:.4f}; V1 RAW {:.2f} vs MPPCA {:.2f} deg; "
                     "{:.1f} s".format(v["RAW", "FA", "all"], v["MPPCA", "FA", "all"],
                                       v["RAW", "V1", "all"], v["MPPCA", "V1", "all"], elapsed))
    assert ok


def test_criterion_07_noise_moments(criterion):
    clean, scheme, _, labels = make_phantom(two_region_spec(16, multishell_scheme(),
                                                            ventricle=True))
    b2000 = [list(s.indices) for s in shell_partition(scheme) if s.bval == 2000.0][0]
    csf = labels == 3
    noisy = add_rician(clean, 1000.0 / 20, seed=7)
    den, _ = denoise_mppca(noisy)
    raw = residual_moments(noisy.take(b2000), mask=csf, pool="raw")
    out = residual_moments(noisy.take(b2000), den.take(b2000), mask=csf, pool="denoised")
    ok = raw.skewness >= 0.3 and out.variance < raw.variance and out.skewness < raw.skewness
    criterion(7, ok, f"ventricle b=2000 pool: raw var {raw.variance:.1f} skew {raw.skewness:.3f}; "
                     f"MPPCA var {out.variance:.1f} skew {out.skewness:.3f}")
    assert ok


def test_criterion_08_cov(criterion):
    closed = cov_within_subject(1.0, 1.2)
    r = np.random.default_rng(8)
    x1, x2 = r.random(20) + 0.1, r.random(20) + 0.1
    # powers of two scale without rounding; other factors agree to the last bits
    exact = all(np.array_equal(cov_within_subject(c * x1, c * x2), cov_within_subject(x1, x2))
                for c in (0.25, 2.0, 1024.0))
    close = all(np.allclose(cov_within_subject(c * x1, c * x2), cov_within_subject(x1, x2),
                            rtol=1e-13, atol=0) for c in (0.3, 7.0, 1e3))
    s1, s2 = r.random((3, 5)) + 0.5, r.random((3, 5)) + 0.5
    oracle = np.mean([np.mean([100 * abs(s1[i, j] - s2[i, j]) / (s1[i, j] + s2[i, j])
                               for j in range(5)]) for i in range(3)])
    agg = aggregate_cov(s1, s2)
    ok = abs(closed - 100 / 11) <= 1e-10 and exact and close and abs(agg - oracle) <= 1e-12
    criterion(8, ok, f"CoV(1.0, 1.2) = {closed:.10f}%, scale invariant {exact and close}, "
                     f"aggregate {agg:.6f} vs oracle {oracle:.6f}")
    assert ok


def test_criterion_09_scn(criterion):
    r = np.random.default_rng(9)
    x = r.random((5, 6))
    scn = scn_build(x)
    oracle = np.empty((6, 6))
    for i, j in itertools.product(range(6), repeat=2):
        a, b = x[:, i], x[:, j]
        oracle[i, j] = np.mean((a - a.mean()) * (b - b.mean())) / (a.std() * b.std())
    pearson_err = np.abs(scn.corr - oracle).max()
    other = scn_build(r.random((5, 6)))
    iu = [(i, j) for i in range(6) for j in range(i + 1, 6)]
    hand = sum(abs(scn.corr[i, j] - other.corr[i, j]) for i, j in iu) / len(iu)
    mae_err = abs(scn_mae(scn, other) - hand)
    rep_err = abs(scn_repeatability(scn, other) - hand)
    dup = scn_build(np.c_[x, x[:, 0]]).corr[0, 6]
    ok = pearson_err <= 1e-12 and mae_err <= 1e-12 and rep_err <= 1e-12 and dup == 1.0
    criterion(9, ok, f"Pearson err {pearson_err:.1e}, MAE err {mae_err:.1e}, "
                     f"repeatability err {rep_err:.1e}, duplicate corr {float(dup)!r}")
    assert ok


def test_criterion_10_kspace(criterion):
    r = np.random.default_rng(10)
    vol = Volume4D(r.random((12, 12, 12, 2)), (1.25,) * 3)
    ident = np.abs(kspace_downsample(vol, 1.25).data - vol.data).max()
    n = 32
    i = np.arange(n)
    wave = (np.cos(2 * np.pi * 3 * i / n)[:, None, None] * np.sin(2 * np.pi * 2 * i / n)[None, :, None]
            + np.cos(2 * np.pi * 5 * i / n)[None, None, :])
    band = np.abs(kspace_downsample(Volume4D(wave[..., None], (1.0,) * 3), 2.0).data[..., 0]
                  - wave).max()
    noise = Volume4D(r.normal(size=(64, 64, 64, 1)), (1.0,) * 3)
    ratio = kspace_downsample(noise, 2.0).data.var() / noise.data.var()
    ok = ident <= 1e-9 and band <= 1e-6 and abs(ratio - 1 / 8) <= 0.2 / 8
    criterion(10, ok, f"identity err {ident:.1e}, band-limited err {band:.1e}, "
                      f"variance ratio {ratio:.4f} (1/8 = 0.125)")
    assert ok


def test_criterion_11_determinism(criterion, tmp_path):
    cfg = PipelineConfig.from_dict({
        "output": "out", "seed": 11,
        "inputs": {"phantom": {"preset": "two-region", "n": 12, "scheme": {
            "multishell": {"shells": [1000, 2000], "n_dirs": 30, "n_b0": 3}}}},
        "noise": {"model": "rician", "snr": 15},
        "augment": {"probability": 1.0},
        "denoisers": ["none", "mppca"],
        "subsets": [6, 12],
        "sh": {"bval": 2000, "order": 4, "k": 15},
    }, tmp_path)
    out = run_pipeline(cfg)
    first = ((out / "report.csv").read_bytes(), (out / "manifest.json").read_bytes())
    out = run_pipeline(cfg)
    second = ((out / "report.csv").read_bytes(), (out / "manifest.json").read_bytes())
    manifest = json.loads(second[1])
    ok = first == second and manifest["outputs"]["report.csv"] == json.loads(first[1])[
        "outputs"]["report.csv"]
    n_rows = len(first[0].splitlines()) - 1
    criterion(11, ok, f"report.csv identical {first[0] == second[0]}, manifest identical "
                      f"{first[1] == second[1]}, {n_rows} report rows")
    assert ok

