"""Regional statistics for test-retest and population analyses: CoV and structural covariance networks."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyMask, RegionMismatch, ZeroMeanPair, ZeroVarianceRegion
from .volume import Volume4D, as_labels, check_grid


@dataclass(frozen=True, eq=False)
class RegionStats:
    """Mean and voxel count of one scalar map per label (labels absent from the map are omitted)."""

    regions: tuple
    mean: np.ndarray
    count: np.ndarray

    def as_dict(self):
        return {r: float(m) for r, m in zip(self.regions, self.mean)}

    def select(self, regions):
        pos = {r: i for i, r in enumerate(self.regions)}
        missing = [r for r in regions if r not in pos]
        if missing:
            raise RegionMismatch(f"regions {missing} not present")
        idx = [pos[r] for r in regions]
        return RegionStats(tuple(regions), self.mean[idx], self.count[idx])


def region_means(scalar_map, labels, regions=None):
    """Arithmetic mean of ``scalar_map`` within every label > 0.

    ``regions`` restricts (and orders) the output; requesting a label that
    has no voxels raises `EmptyMask`.
    """
    x = scalar_map.data[..., 0] if isinstance(scalar_map, Volume4D) else scalar_map
    x = np.asarray(x, dtype=np.float64)
    lab = as_labels(labels, x.shape[:3])
    check_grid(x, lab, "scalar map and labels")
    present = np.unique(lab[lab > 0])
    if regions is None:
        regions = [int(r) for r in present]
    sums = np.bincount(lab.ravel(), weights=x.ravel())
    counts = np.bincount(lab.ravel())
    means, ns = [], []
    for r in regions:
        if r <= 0 or r >= len(counts) or counts[r] == 0:
            raise EmptyMask(f"label {r} has no voxels")
        means.append(sums[r] / counts[r])
        ns.append(counts[r])
    return RegionStats(tuple(int(r) for r in regions), np.array(means), np.array(ns))


def _values(x):
    return x.mean if isinstance(x, RegionStats) else np.asarray(x, dtype=np.float64)


def cov_within_subject(x1, x2):
    """Per-region coefficient of variation (%) of two sessions: ``100 |x1 - x2| / (x1 + x2)``.

    This is the population (divide-by-two) standard deviation over the mean.
    """
    if isinstance(x1, RegionStats) and isinstance(x2, RegionStats) and x1.regions != x2.regions:
        raise RegionMismatch("sessions cover different regions")
    a, b = _values(x1), _values(x2)
    if a.shape != b.shape:
        raise RegionMismatch(f"session shapes differ: {a.shape} vs {b.shape}")
    total = a + b
    if np.any(total == 0):
        raise ZeroMeanPair("x1 + x2 == 0 for at least one region")
    out = 100.0 * np.abs(a - b) / total
    return float(out) if out.ndim == 0 else out


def aggregate_cov(session1, session2):
    """Average CoV: mean over regions per subject, then mean over subjects.

    ``session1``/``session2`` are ``(subjects, regions)`` arrays or lists of
    `RegionStats`.  Regions are weighted equally regardless of size.
    """
    s1 = np.array([_values(x) for x in session1], dtype=np.float64)
    s2 = np.array([_values(x) for x in session2], dtype=np.float64)
    if s1.shape != s2.shape:
        raise RegionMismatch(f"session tables differ: {s1.shape} vs {s2.shape}")
    per_subject = cov_within_subject(s1, s2).reshape(s1.shape).mean(axis=-1)
    return float(np.mean(per_subject))


@dataclass(frozen=True, eq=False)
class ScnMatrix:
    """Pearson correlation across subjects between regional means."""

    corr: np.ndarray
    regions: tuple
    n_subjects: int


def scn_build(table, regions=None):
    """Structural covariance network from a ``(subjects, regions)`` table.

    The diagonal is exactly 1 and the matrix exactly symmetric.
    """
    x = np.asarray(table, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("table must be subjects x regions")
    n, r = x.shape
    regions = tuple(range(1, r + 1)) if regions is None else tuple(regions)
    if len(regions) != r:
        raise RegionMismatch(f"{len(regions)} region names for {r} columns")
    if n < 3:
        raise ValueError(f"need at least 3 subjects, got {n}")
    dev = x - x.mean(axis=0)
    ss = np.sqrt((dev ** 2).sum(axis=0))
    scale = np.maximum(np.abs(x).max(axis=0), 1e-300)
    for j in range(r):
        if ss[j] <= 1e-14 * scale[j] * np.sqrt(n):
            raise ZeroVarianceRegion(regions[j])
    z = dev / ss
    g = z.T @ z
    diag = np.diag(g)
    # sqrt(a * a) == a in IEEE arithmetic, so duplicated regions correlate to exactly 1
    corr = np.clip(g / np.sqrt(np.outer(diag, diag)), -1.0, 1.0)
    corr = 0.5 * (corr + corr.T)
    np.fill_diagonal(corr, 1.0)
    return ScnMatrix(corr, regions, n)


def _upper(a, b):
    ca = a.corr if isinstance(a, ScnMatrix) else np.asarray(a, dtype=np.float64)
    cb = b.corr if isinstance(b, ScnMatrix) else np.asarray(b, dtype=np.float64)
    if isinstance(a, ScnMatrix) and isinstance(b, ScnMatrix) and a.regions != b.regions:
        raise RegionMismatch("SCNs cover different regions")
    if ca.shape != cb.shape:
        raise RegionMismatch(f"SCN shapes differ: {ca.shape} vs {cb.shape}")
    if ca.shape[0] < 2:
        raise ValueError("SCN needs at least 2 regions")
    iu = np.triu_indices(ca.shape[0], k=1)
    return ca[iu], cb[iu]


def scn_mae(a, b):
    """Mean absolute difference over the strict upper triangle."""
    u, v = _upper(a, b)
    return float(np.mean(np.abs(u - v)))


def scn_repeatability(session1, session2):
    """Mean absolute difference between the SCNs of two sessions."""
    return scn_mae(session1, session2)


def session_average(tables):
    """Element-wise mean of several ``(subjects, regions)`` tables."""
    return np.mean([np.asarray(t, dtype=np.float64) for t in tables], axis=0)


# --- CSV tables ---------------------------------------------------------------

def write_means_csv(path, subjects, regions, table):
    """Write a wide table: ``subject`` column then one column per region."""
    table = np.asarray(table, dtype=np.float64)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["subject"] + [str(r) for r in regions])
        for s, row in zip(subjects, table):
            w.writerow([s] + [repr(float(v)) for v in row])


def read_means_csv(path):
    """Read a wide means table; returns ``(subjects, regions, table)``."""
    with open(Path(path), newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "subject":
        raise ValueError(f"{path}: header must start with 'subject'")
    regions = rows[0][1:]
    subjects, table = [], []
    for i, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(regions) + 1:
            raise ValueError(f"{path}:{i}: expected {len(regions) + 1} fields, got {len(row)}")
        subjects.append(row[0])
        try:
            table.append([float(v) for v in row[1:]])
        except ValueError:
            raise ValueError(f"{path}:{i}: non-numeric value") from None
    return subjects, regions, np.array(table)


def write_scn_csv(path, scn):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["region"] + [str(r) for r in scn.regions])
        for r, row in zip(scn.regions, scn.corr):
            w.writerow([r] + [repr(float(v)) for v in row])


def read_scn_csv(path):
    with open(Path(path), newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows or rows[0][0] != "region":
        raise ValueError(f"{path}: header must start with 'region'")
    regions = tuple(rows[0][1:])
    corr = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    if corr.shape != (len(regions), len(regions)):
        raise ValueError(f"{path}: SCN is not square")
    return ScnMatrix(corr, regions, 0)
