"""Diffusion tensor estimation (log-linear OLS / one-step WLS), scalar maps and error metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .design import dti_design_matrix
from .errors import EmptyMask, InsufficientDirections, SingularDesign
from .volume import as_mask, check_grid

SIGNAL_FLOOR = 1e-6
# diffusivities are compared in um^2/ms (= 1e-3 mm^2/s)
DIFFUSIVITY_SCALE = 1e3
DIFFUSIVITY_METRICS = ("MD", "AD", "RD")


@dataclass(frozen=True, eq=False)
class TensorMap:
    """Per-voxel tensors ``(X, Y, Z, 6)`` ordered Dxx, Dyy, Dzz, Dxy, Dxz, Dyz (mm^2/s)."""

    tensor: np.ndarray
    log_s0: np.ndarray
    mask: np.ndarray

    @property
    def grid(self):
        return self.tensor.shape[:3]

    def matrices(self):
        return tensor_matrix(self.tensor)

    def eig(self):
        """Eigenvalues (descending) and matching eigenvectors (columns)."""
        w, v = np.linalg.eigh(self.matrices())
        return w[..., ::-1], v[..., ::-1]


def tensor_matrix(d6):
    d6 = np.asarray(d6, dtype=np.float64)
    xx, yy, zz, xy, xz, yz = np.moveaxis(d6, -1, 0)
    return np.stack([
        np.stack([xx, xy, xz], -1),
        np.stack([xy, yy, yz], -1),
        np.stack([xz, yz, zz], -1),
    ], -2)


def tensor_from_matrix(m):
    m = np.asarray(m, dtype=np.float64)
    return np.stack([m[..., 0, 0], m[..., 1, 1], m[..., 2, 2],
                     m[..., 0, 1], m[..., 0, 2], m[..., 1, 2]], -1)


def tensor_from_eig(evals, v1, v2=None):
    """Symmetric tensor (6-vector) with eigenvalues ``evals`` and principal axis ``v1``."""
    v1 = np.asarray(v1, dtype=np.float64)
    v1 = v1 / np.linalg.norm(v1)
    if v2 is None:
        helper = np.eye(3)[np.argmin(np.abs(v1))]
        v2 = np.cross(v1, helper)
    v2 = np.asarray(v2, dtype=np.float64)
    v2 = v2 - v1 * (v1 @ v2)
    v2 /= np.linalg.norm(v2)
    v3 = np.cross(v1, v2)
    frame = np.stack([v1, v2, v3], axis=1)
    return tensor_from_matrix(frame @ np.diag(evals) @ frame.T)


def _check_scheme(scheme):
    b0 = scheme.b0_mask
    if not b0.any():
        raise InsufficientDirections("tensor fit needs at least one b0 volume")
    directed = np.asarray(scheme.bvecs)[~b0]
    # antipodal / repeated directions do not add rank
    uniq = []
    for g in directed:
        if not any(abs(g @ u) > 1 - 1e-9 for u in uniq):
            uniq.append(g)
    if len(uniq) < 6:
        raise InsufficientDirections(f"tensor fit needs 6 distinct directions, got {len(uniq)}")


def fit_dti(vol, scheme, mask=None, method="wls"):
    """Fit a diffusion tensor in every masked voxel.

    Signals are floored at ``1e-6 * S0`` (S0 = mean b0) before the log.
    ``"wls"`` runs an OLS pass, then one reweighted pass with weights equal
    to the squared OLS-predicted signals.  Voxels outside ``mask`` stay zero.
    """
    if method not in ("ols", "wls"):
        raise ValueError(f"method must be 'ols' or 'wls', got {method!r}")
    if len(scheme) != vol.nvols:
        raise ValueError(f"scheme has {len(scheme)} entries, volume has {vol.nvols}")
    _check_scheme(scheme)
    design = dti_design_matrix(scheme)
    if np.linalg.matrix_rank(design) < 7:
        raise SingularDesign("gradient table does not determine a tensor")

    m = as_mask(mask, vol.grid)
    sig = vol.data[m]  # (n, V)
    s0 = sig[:, scheme.b0_mask].mean(axis=1)
    ref = np.where(s0 > 0, s0, sig.max(axis=1))
    live = ref > 0
    floor = SIGNAL_FLOOR * np.where(live, ref, 1.0)
    y = np.log(np.maximum(sig, floor[:, None]))

    pinv = np.linalg.pinv(design)
    x = y @ pinv.T
    if method == "wls":
        w = np.exp(2.0 * (x @ design.T))  # squared predicted signal
        w /= w.max(axis=1, keepdims=True)
        lhs = np.einsum("vi,nv,vj->nij", design, w, design)
        rhs = np.einsum("vi,nv,nv->ni", design, w, y)
        x = np.linalg.solve(lhs, rhs[..., None])[..., 0]
    x[~live] = 0.0

    tensor = np.zeros(vol.grid + (6,))
    log_s0 = np.zeros(vol.grid)
    tensor[m] = x[:, :6]
    log_s0[m] = x[:, 6]
    return TensorMap(tensor, log_s0, m)


def _fix_sign(v):
    idx = np.argmax(np.abs(v), axis=-1)
    sign = np.sign(np.take_along_axis(v, idx[..., None], axis=-1))
    sign[sign == 0] = 1.0
    return v * sign


def eigen_scalars(evals):
    """FA, MD, AD, RD from eigenvalues sorted descending (clamped at 0 first)."""
    lam = np.maximum(np.asarray(evals, dtype=np.float64), 0.0)
    md = lam.mean(axis=-1)
    norm = np.sqrt((lam ** 2).sum(axis=-1))
    dev = np.sqrt(((lam - md[..., None]) ** 2).sum(axis=-1))
    with np.errstate(divide="ignore", invalid="ignore"):
        fa = np.where(norm > 0, np.sqrt(1.5) * dev / norm, 0.0)
    return {
        "FA": np.clip(fa, 0.0, 1.0),
        "MD": md,
        "AD": lam[..., 0],
        "RD": 0.5 * (lam[..., 1] + lam[..., 2]),
    }


def tensor_scalars(t):
    """Scalar maps FA/MD/AD/RD and the unit principal eigenvector V1 (background 0).

    V1 is sign-fixed so its largest-magnitude component is non-negative.
    """
    evals, evecs = t.eig()
    out = eigen_scalars(evals)
    v1 = _fix_sign(evecs[..., :, 0])
    for key in out:
        out[key] = np.where(t.mask, out[key], 0.0)
    out["V1"] = np.where(t.mask[..., None], v1, 0.0)
    return out


def _masked(a, b, mask):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    check_grid(a, b, "maps")
    m = as_mask(mask, a.shape[:3])
    if not m.any():
        raise EmptyMask("mask selects no voxels")
    return a[m], b[m]


def mae_scalar(a, b, mask=None, scale=1.0):
    """Mean absolute difference over ``mask``; ``scale`` multiplies both maps first."""
    a, b = _masked(a, b, mask)
    return float(np.mean(np.abs(a - b)) * scale)


def mae_metric(name, a, b, mask=None):
    """`mae_scalar` with the unit convention for ``name`` (diffusivities in um^2/ms)."""
    scale = DIFFUSIVITY_SCALE if name.upper() in DIFFUSIVITY_METRICS else 1.0
    return mae_scalar(a, b, mask, scale)


def v1_angular_error(a, b, mask=None):
    """Mean angle in degrees between principal eigenvectors, ignoring sign.

    ``a`` and ``b`` are `TensorMap` objects or ``(X, Y, Z, 3)`` V1 arrays.
    """
    va = tensor_scalars(a)["V1"] if isinstance(a, TensorMap) else a
    vb = tensor_scalars(b)["V1"] if isinstance(b, TensorMap) else b
    va, vb = _masked(va, vb, mask)
    na = np.linalg.norm(va, axis=-1)
    nb = np.linalg.norm(vb, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        cos = np.abs(np.einsum("ij,ij->i", va, vb)) / (na * nb)
    cos = np.where((na > 0) & (nb > 0), cos, 1.0)
    return float(np.degrees(np.arccos(np.minimum(1.0, cos))).mean())
