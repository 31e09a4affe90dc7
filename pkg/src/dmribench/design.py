"""Design matrices for DTI and even-order spherical harmonics, and
condition-number-driven selection of minimal gradient subsets.
"""
from __future__ import annotations

import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import special

from .errors import RankDeficient
from .sphere import antipodal_classes

RANK_TOL = 1e-12


def dti_design_matrix(scheme):
    """Log-linear tensor design, one row per volume.

    Row layout for (b, g): ``[-b gx^2, -b gy^2, -b gz^2, -2b gx gy, -2b gx gz,
    -2b gy gz, 1]``; the last column multiplies ln S0.
    """
    b = np.asarray(scheme.bvals, dtype=np.float64)
    g = np.asarray(scheme.bvecs, dtype=np.float64)
    out = np.empty((len(b), 7))
    out[:, :6] = -b[:, None] * _quadratic_terms(g)
    out[:, 6] = 1.0
    return out


def _quadratic_terms(g):
    gx, gy, gz = g[..., 0], g[..., 1], g[..., 2]
    return np.stack([gx * gx, gy * gy, gz * gz, 2 * gx * gy, 2 * gx * gz, 2 * gy * gz], axis=-1)


def dti_angular_design(dirs):
    """The six diffusion columns of the DTI design at b = 1 (no S0 column)."""
    return -_quadratic_terms(np.asarray(dirs, dtype=np.float64))


# --- spherical harmonics ---------------------------------------------------

def sh_coefficient_count(order):
    return (order + 1) * (order + 2) // 2


def sh_order_from_count(count):
    for order in range(0, 30, 2):
        if sh_coefficient_count(order) == count:
            return order
    raise ValueError(f"{count} is not an even-order SH coefficient count")


def sh_degrees(order):
    """Degree l and order m of every column, in basis order."""
    ls, ms = [], []
    for l in range(0, order + 1, 2):
        for m in range(-l, l + 1):
            ls.append(l)
            ms.append(m)
    return np.array(ls), np.array(ms)


def _complex_sh(m, l, polar, azimuth):
    if hasattr(special, "sph_harm_y"):
        return special.sph_harm_y(l, m, polar, azimuth)
    return special.sph_harm(m, l, azimuth, polar)


def cart_to_sphere(dirs):
    dirs = np.asarray(dirs, dtype=np.float64)
    r = np.linalg.norm(dirs, axis=-1)
    polar = np.arccos(np.clip(dirs[..., 2] / np.where(r > 0, r, 1.0), -1.0, 1.0))
    azimuth = np.arctan2(dirs[..., 1], dirs[..., 0])
    return polar, azimuth


def sh_design_matrix(dirs, order):
    """Real symmetric SH basis evaluated at unit directions, shape (N, (L+1)(L+2)/2).

    Column for (l, m): ``sqrt(2) Im Y_l^|m|`` when m < 0, ``Y_l^0`` when m = 0,
    ``sqrt(2) Re Y_l^m`` when m > 0, for even l up to ``order``; the complex
    Y_l^m carry the Condon-Shortley phase.
    """
    if order < 0 or order % 2:
        raise ValueError(f"SH order must be a non-negative even integer, got {order}")
    polar, azimuth = cart_to_sphere(np.atleast_2d(dirs))
    ls, ms = sh_degrees(order)
    out = np.empty((len(polar), len(ls)))
    for j, (l, m) in enumerate(zip(ls, ms)):
        y = _complex_sh(abs(m), l, polar, azimuth)
        if m < 0:
            out[:, j] = np.sqrt(2.0) * y.imag
        elif m == 0:
            out[:, j] = y.real
        else:
            out[:, j] = np.sqrt(2.0) * y.real
    return out


def laplace_beltrami_penalty(order):
    """Diagonal of the squared Laplace-Beltrami operator, l^2 (l+1)^2 per column."""
    ls, _ = sh_degrees(order)
    return (ls * (ls + 1.0)) ** 2


# --- conditioning ------------------------------------------------------------

def condition_number(m):
    """Ratio of extreme singular values.

    Raises `RankDeficient` when the smallest singular value is below
    ``1e-12`` times the largest (including when rows < cols).
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < m.shape[1]:
        raise RankDeficient(f"design of shape {m.shape} cannot have full column rank")
    s = np.linalg.svd(m, compute_uv=False)
    if s[-1] < RANK_TOL * s[0] or s[0] == 0:
        raise RankDeficient(f"smallest singular value {s[-1]:.3e} vs largest {s[0]:.3e}")
    return float(s[0] / s[-1])


def _batched_cond(stack):
    # search-time score via Gram eigenvalues; near-singular designs score +inf
    gram = np.einsum("...ij,...ik->...jk", stack, stack)
    w = np.linalg.eigvalsh(gram)
    with np.errstate(divide="ignore", invalid="ignore"):
        c = np.sqrt(w[..., -1] / w[..., 0])
    c[~(w[..., 0] > 1e-14 * w[..., -1])] = np.inf
    return c


# --- subset selection -----------------------------------------------------------

@dataclass(frozen=True)
class Model:
    kind: str  # "dti" or "sh"
    order: int = 0

    @property
    def minimum(self):
        return 6 if self.kind == "dti" else sh_coefficient_count(self.order)

    def design(self, dirs):
        if self.kind == "dti":
            return dti_angular_design(dirs)
        return sh_design_matrix(dirs, self.order)

    def __str__(self):
        return "dti" if self.kind == "dti" else f"sh{self.order}"


def parse_model(model):
    """Accept ``"dti"``, ``"sh4"``, ``"sh(6)"``, ``("sh", 4)`` or a `Model`."""
    if isinstance(model, Model):
        return model
    if isinstance(model, tuple):
        return Model(model[0], int(model[1]) if len(model) > 1 else 0)
    text = str(model).strip().lower()
    if text == "dti":
        return Model("dti")
    match = re.fullmatch(r"sh\(?(\d+)\)?", text)
    if match:
        order = int(match.group(1))
        if order % 2:
            raise ValueError(f"SH order must be even, got {order}")
        return Model("sh", order)
    raise ValueError(f"unknown model {model!r}; use 'dti' or 'shL' with even L")


@dataclass(frozen=True)
class SubsetSelection:
    indices: tuple
    condition_number: float
    seed: int
    iterations: int
    restarts: int = 1


def _stream_seeds(seed, restarts):
    # child 0: random-subset baseline; child r+1: restart r; last child: relaxation
    return np.random.SeedSequence(seed).spawn(restarts + 1)


def _random_subsets(rng, pool, k, n):
    keys = rng.random((n, len(pool)))
    return pool[np.argsort(keys, axis=1)[:, :k]]


def random_subset_baseline(candidates, k, model, seed, n=1000):
    """Best of ``n`` random k-subsets drawn from the same seed stream `select_subset` uses.

    Returns ``(indices, condition_number)``.
    """
    model = parse_model(model)
    dirs = np.asarray(candidates, dtype=np.float64)
    pool = np.unique(antipodal_classes(dirs))
    rng = np.random.default_rng(_stream_seeds(seed, 1)[0])
    return _baseline(model.design(dirs), pool, k, rng, n)


def _baseline(design, pool, k, rng, n, chunk=20000):
    best_idx, best = None, np.inf
    done = 0
    while done < n:
        m = min(chunk, n - done)
        subsets = _random_subsets(rng, pool, k, m)
        conds = _batched_cond(design[subsets])
        i = int(np.argmin(conds))
        if conds[i] < best:
            best, best_idx = float(conds[i]), np.sort(subsets[i])
        done += m
    return best_idx, best


def _exchange(design, pool, start, iters):
    chosen = np.array(start)
    current = _batched_cond(design[chosen][None])[0]
    k = len(chosen)
    for it in range(iters):
        outside = np.setdiff1d(pool, chosen)
        if len(outside) == 0:
            break
        # every single swap (position, outside candidate), scored in one batch
        trials = np.repeat(chosen[None], k * len(outside), axis=0)
        trials[np.arange(len(trials)), np.repeat(np.arange(k), len(outside))] = np.tile(outside, k)
        conds = _batched_cond(design[trials])
        best = int(np.argmin(conds))
        if not conds[best] < current:
            break
        chosen, current = trials[best], conds[best]
    return np.sort(chosen), float(current)


def _angles_to_dirs(x, k):
    polar, azimuth = x[:k], x[k:]
    return np.stack([np.sin(polar) * np.cos(azimuth), np.sin(polar) * np.sin(azimuth),
                     np.cos(polar)], axis=1)


@lru_cache(maxsize=16)
def _continuous_optima(kind, order, k, n_starts, maxiter=2000):
    """Best few continuous k-direction configurations, sorted by condition number.

    They depend only on the model and k, so they are computed once per
    process from a fixed internal seed.
    """
    from scipy.optimize import minimize

    model = Model(kind, order)
    rng = np.random.default_rng(k)

    def cost(x):
        return _batched_cond(model.design(_angles_to_dirs(x, k))[None])[0]

    found = []
    for _ in range(n_starts):
        x0 = np.concatenate([np.arccos(rng.uniform(-1, 1, k)), rng.uniform(0, 2 * np.pi, k)])
        for _ in range(2):  # a restarted simplex escapes early collapse
            res = minimize(cost, x0, method="Nelder-Mead",
                           options=dict(maxiter=maxiter, xatol=1e-8, fatol=1e-10))
            x0 = res.x
        found.append((float(res.fun), res.x))
    found.sort(key=lambda t: t[0])
    return tuple(_angles_to_dirs(x, k) for _, x in found[:3])


def _relaxation_starts(model, dirs, pool, k, rng, n_starts, n_rotations=20000, keep=15):
    """Subsets seeded from a continuous optimum.

    Optimises k free directions (Nelder-Mead on spherical angles), then rotates
    the best configurations through random rotations, snaps each rotated
    direction to its nearest candidate and keeps the best distinct snaps.
    """
    from .sphere import random_rotations

    design = model.design(dirs)
    cand = dirs[pool]
    starts = []
    for config in _continuous_optima(model.kind, model.order, k, n_starts):
        rots = random_rotations(rng, n_rotations)
        rotated = np.einsum("rij,kj->rki", rots, config)
        subsets = np.empty((n_rotations, k), dtype=pool.dtype)
        for lo in range(0, n_rotations, 2000):
            near = np.argmax(np.abs(rotated[lo:lo + 2000] @ cand.T), axis=2)
            subsets[lo:lo + 2000] = pool[near]
        distinct = np.array([len(np.unique(row)) == k for row in subsets])
        conds = _batched_cond(design[subsets])
        conds[~distinct] = np.inf
        for i in np.argsort(conds, kind="stable")[:keep]:
            if np.isfinite(conds[i]):
                starts.append(subsets[i])
    return starts


def select_subset(candidates, k, model="dti", seed=0, iters=2000, restarts=20,
                  n_random=1000, relax_starts=None, threads=1):
    """Choose ``k`` of ``candidates`` minimising the design condition number.

    Random-restart exchange search: each iteration scores every swap of one
    chosen direction for one unchosen direction and applies the best swap if it
    lowers the condition number; a restart ends at a local optimum or after
    ``iters`` swaps.  Starting points are the best of ``n_random`` random
    subsets (so the result is never worse than that baseline), ``restarts``
    random subsets, and, when ``relax_starts > 0``, subsets snapped from
    continuous optima (default: 4 for DTI, 0 for SH).  Directions g and -g
    count as the same candidate.  DTI designs use the six diffusion columns at
    b = 1.

    Deterministic for a given seed and settings; running restarts on several
    threads gives the same answer as running them in turn.
    """
    model = parse_model(model)
    dirs = np.asarray(candidates, dtype=np.float64).reshape(-1, 3)
    if k < model.minimum:
        raise ValueError(f"k={k} is below the {model} minimum of {model.minimum}")
    pool = np.unique(antipodal_classes(dirs))
    if k > len(pool):
        raise ValueError(f"k={k} exceeds the {len(pool)} distinct candidate directions")
    design = model.design(dirs)
    if k == len(pool):
        return SubsetSelection(tuple(int(i) for i in pool), condition_number(design[pool]),
                               seed, 0, 0)
    if relax_starts is None:
        relax_starts = 4 if model.kind == "dti" else 0

    seeds = _stream_seeds(seed, restarts + 1)
    starts = []
    if n_random > 0:
        starts.append(_baseline(design, pool, k, np.random.default_rng(seeds[0]), n_random)[0])
    if relax_starts > 0:
        starts += _relaxation_starts(model, dirs, pool, k, np.random.default_rng(seeds[-1]),
                                     relax_starts)
    for r in range(restarts):
        starts.append(_random_subsets(np.random.default_rng(seeds[r + 1]), pool, k, 1)[0])

    if not starts:
        raise ValueError("no starting subsets: n_random, restarts and relax_starts are all 0")

    def run(start):
        return _exchange(design, pool, start, iters)

    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(run, starts))
    else:
        results = [run(st) for st in starts]
    # lowest condition number wins; ties go to the earliest start
    best_idx, _ = min(results, key=lambda t: t[1])
    exact = condition_number(design[best_idx])
    return SubsetSelection(tuple(int(i) for i in best_idx), exact, seed, iters, restarts)


def subset_scheme(scheme, shell_indices, chosen, n_b0=1):
    """Gradient-table indices for a subsampled acquisition.

    ``chosen`` indexes into ``shell_indices``; the first ``n_b0`` b0 volumes
    are kept in front.
    """
    b0 = list(scheme.b0_indices[:n_b0])
    return b0 + [int(shell_indices[i]) for i in chosen]
