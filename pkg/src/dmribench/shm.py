"""Per-shell spherical-harmonic fits, projection onto the evaluation hemisphere, and JSD."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .design import (
    laplace_beltrami_penalty,
    sh_coefficient_count,
    sh_design_matrix,
    sh_order_from_count,
)
from .errors import EmptyDistribution, NoB0Volumes, UnderdeterminedWithoutRegularization
from .sphere import make_hemisphere_362
from .volume import SHELL_ROUNDING, as_mask, shell_partition

BASIS = "real-sym-modified"
JSD_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class ShCoeffMap:
    coeffs: np.ndarray  # (..., n_coeffs)
    order: int
    bval: float = None
    basis: str = BASIS

    def __post_init__(self):
        if self.coeffs.shape[-1] != sh_coefficient_count(self.order):
            raise ValueError(f"order {self.order} needs {sh_coefficient_count(self.order)} "
                             f"coefficients, got {self.coeffs.shape[-1]}")


def sh_fit_matrix(directions, order, lambda_lb=0.0):
    """Matrix mapping signals sampled at ``directions`` to SH coefficients."""
    basis = sh_design_matrix(directions, order)
    n, c = basis.shape
    if lambda_lb == 0 and n < c:
        raise UnderdeterminedWithoutRegularization(
            f"{n} directions cannot determine {c} order-{order} coefficients without regularisation")
    if lambda_lb == 0:
        return np.linalg.pinv(basis)
    gram = basis.T @ basis + lambda_lb * np.diag(laplace_beltrami_penalty(order))
    return np.linalg.solve(gram, basis.T)


def fit_sh(signals, directions, order, lambda_lb=0.0, s0=None, bval=None):
    """Least-squares SH coefficients for signals ``(..., N)`` sampled at ``directions``.

    With ``s0`` given, signals are divided by it first (voxels with s0 <= 0
    are left at zero).  ``lambda_lb`` adds a Laplace-Beltrami penalty.
    """
    y = np.asarray(signals, dtype=np.float64)
    if s0 is not None:
        s0 = np.asarray(s0, dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            y = np.where(s0[..., None] > 0, y / s0[..., None], 0.0)
    fit = sh_fit_matrix(directions, order, lambda_lb)
    return ShCoeffMap(y @ fit.T, order, bval)


def project_sh(coeffs, directions=None):
    """Amplitudes ``basis(direction) . coeffs``; defaults to the 362-point hemisphere."""
    if directions is None:
        directions = make_hemisphere_362()
    c = coeffs.coeffs if isinstance(coeffs, ShCoeffMap) else np.asarray(coeffs)
    order = coeffs.order if isinstance(coeffs, ShCoeffMap) else sh_order_from_count(c.shape[-1])
    return c @ sh_design_matrix(directions, order).T


def fit_shell(vol, scheme, bval, order, mask=None, lambda_lb=0.0, round_to=SHELL_ROUNDING,
              indices=None):
    """Fit one shell of a 4D volume, normalising by the mean b0.

    ``indices`` restricts the fit to a subset of that shell's volumes (e.g.
    a 15- or 28-direction subsample).  Returns an `ShCoeffMap` on the volume
    grid, zero outside ``mask``.
    """
    shells = {s.bval: s.indices for s in shell_partition(scheme, round_to)}
    key = float(np.round(bval / round_to) * round_to)
    if key not in shells or key == 0.0:
        raise ValueError(f"no shell at b={bval}")
    if 0.0 not in shells:
        raise NoB0Volumes("SH fits normalise by mean b0")
    idx = list(shells[key]) if indices is None else list(indices)
    m = as_mask(mask, vol.grid)
    s0 = vol.data[m][:, list(shells[0.0])].mean(axis=1)
    fit = fit_sh(vol.data[m][:, idx], scheme.bvecs[idx], order, lambda_lb, s0=s0)
    coeffs = np.zeros(vol.grid + (fit.coeffs.shape[-1],))
    coeffs[m] = fit.coeffs
    return ShCoeffMap(coeffs, order, key)


def sh_smoothed_targets(vol, scheme, order=6, mask=None, round_to=SHELL_ROUNDING):
    """Replace every diffusion-weighted volume by its order-``order`` SH fit.

    Each shell is fitted separately on its raw intensities and the fit is
    evaluated back at the acquired directions; b0 volumes are copied through.
    """
    m = as_mask(mask, vol.grid)
    block = np.array(vol.data[m])
    for shell in shell_partition(scheme, round_to):
        if shell.bval == 0.0:
            continue
        idx = list(shell.indices)
        dirs = scheme.bvecs[idx]
        hat = sh_design_matrix(dirs, order) @ sh_fit_matrix(dirs, order)
        block[:, idx] = block[:, idx] @ hat.T
    out = np.array(vol.data)
    out[m] = block
    return vol.with_data(out)


def _normalise(p):
    p = np.maximum(np.asarray(p, dtype=np.float64), 0.0)
    if np.any(p.sum(axis=-1) == 0):
        raise EmptyDistribution("distribution is all zero after clamping negatives")
    p = p + JSD_EPS
    return p / p.sum(axis=-1, keepdims=True)


def jsd(p, q):
    """Jensen-Shannon distance (base 2) between amplitude vectors along the last axis.

    Negatives are clamped to 0, a 1e-12 floor is added and each vector is
    normalised to sum 1.  The result lies in [0, 1].
    """
    p, q = _normalise(p), _normalise(q)
    m = 0.5 * (p + q)
    div = 0.5 * (p * np.log2(p / m)).sum(axis=-1) + 0.5 * (q * np.log2(q / m)).sum(axis=-1)
    out = np.sqrt(np.clip(div, 0.0, 1.0))
    return float(out) if out.ndim == 0 else out


def jsd_map(a, b, mask=None, directions=None):
    """Voxelwise JSD between two coefficient maps projected onto the hemisphere.

    Voxels where either projection is all non-positive are skipped (NaN).
    """
    ca = a.coeffs if isinstance(a, ShCoeffMap) else np.asarray(a)
    cb = b.coeffs if isinstance(b, ShCoeffMap) else np.asarray(b)
    m = as_mask(mask, ca.shape[:3])
    pa, pb = project_sh(ca[m], directions), project_sh(cb[m], directions)
    ok = (np.maximum(pa, 0).sum(-1) > 0) & (np.maximum(pb, 0).sum(-1) > 0)
    vals = np.full(len(pa), np.nan)
    if ok.any():
        vals[ok] = jsd(pa[ok], pb[ok])
    out = np.full(ca.shape[:3], np.nan)
    out[m] = vals
    return out
