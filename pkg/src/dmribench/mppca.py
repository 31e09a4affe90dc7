"""Local-patch PCA denoising with Marchenko-Pastur noise classification, and pooled noise moments."""
from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import PatchLargerThanVolume, TooFewSamples
from .volume import Volume4D, as_mask, check_grid


@dataclass(frozen=True)
class PatchConfig:
    radius: int = 2
    stride: int = 1
    aggregation: str = "overlap"  # "overlap" (average) or "center"

    def __post_init__(self):
        if self.radius < 1:
            raise ValueError("patch radius must be >= 1")
        if not 1 <= self.stride <= self.diameter:
            raise ValueError(f"stride must lie in [1, {self.diameter}]")
        if self.aggregation not in ("overlap", "center"):
            raise ValueError("aggregation must be 'overlap' or 'center'")

    @property
    def diameter(self):
        return 2 * self.radius + 1

    @property
    def size(self):
        return self.diameter ** 3


@dataclass(frozen=True, eq=False)
class DenoiseReport:
    sigma: np.ndarray  # per-voxel noise standard deviation
    npars: np.ndarray  # per-voxel retained signal components


def mp_threshold(eigenvalues, n_columns, dof_correction=True):
    """Number of signal components and noise variance from a descending spectrum.

    ``eigenvalues`` are those of the M x M matrix ``X X^T / N`` (N =
    ``n_columns``), sorted descending; a leading batch axis is allowed.  For
    each candidate p the noise variance is estimated from the trailing
    M - p eigenvalues, and the smallest p whose trailing range fits the
    Marchenko-Pastur bulk, ``lam[p] - lam[M-1] <= 4 sqrt(gamma) * sigma2``, is
    returned together with that variance.

    With ``dof_correction`` (default) the bulk is treated as an
    (M - p) x (N - p) noise matrix: ``gamma = (M - p) / (N - p)`` and
    ``sigma2 = sum(tail) * N / ((M - p) (N - p))``.  Without it,
    ``gamma = (M - p) / N`` and ``sigma2 = mean(tail)``.
    """
    lam = np.asarray(eigenvalues, dtype=np.float64)
    if lam.shape[-1] == 0:
        raise ValueError("empty eigenvalue list")
    single = lam.ndim == 1
    lam = np.atleast_2d(lam)
    m = lam.shape[-1]
    n = float(n_columns)
    p_all = np.arange(m)
    counts = m - p_all
    tails = np.cumsum(lam[:, ::-1], axis=1)[:, ::-1]
    if dof_correction:
        cols = np.maximum(n - p_all, 1.0)
        gamma = counts / cols
        sigma2 = tails * n / (counts * cols)
    else:
        gamma = counts / n
        sigma2 = tails / counts
    spread = lam - lam[:, -1:]
    ok = spread <= 4.0 * np.sqrt(gamma) * sigma2
    ok[:, -1] = True
    p = np.argmax(ok, axis=1)
    s2 = np.maximum(sigma2[np.arange(len(p)), p], 0.0)
    if single:
        return int(p[0]), float(s2[0])
    return p, s2


def _centers(n, radius, stride):
    last = n - 1 - radius
    c = list(range(radius, last + 1, stride))
    if c[-1] != last:
        c.append(last)
    return np.array(c)


def _nearest_center(n, centers):
    # ties resolve to the lower center
    return np.argmin(np.abs(np.arange(n)[:, None] - centers[None, :]), axis=1)


def _denoise_patches(patches):
    """Denoise a batch of Casorati matrices ``(B, M, V)``."""
    b, m_vox, v = patches.shape
    mean = patches.mean(axis=2, keepdims=True)
    x = patches - mean
    # row-centering removes one degree of freedom along the volume axis
    m_eff = min(m_vox, v - 1)
    n_eff = max(m_vox, v - 1)
    voxel_side = m_vox <= v
    gram = x @ x.transpose(0, 2, 1) if voxel_side else x.transpose(0, 2, 1) @ x
    w, u = np.linalg.eigh(gram)
    w, u = w[:, ::-1], u[:, :, ::-1]
    lam = np.maximum(w[:, :m_eff], 0.0) / n_eff
    p, sigma2 = mp_threshold(lam, n_eff)
    keep = (np.arange(u.shape[2])[None, :] < p[:, None]).astype(np.float64)
    proj = (u * keep[:, None, :]) @ u.transpose(0, 2, 1)
    out = proj @ x if voxel_side else x @ proj
    return out + mean, np.sqrt(sigma2), p


def denoise_mppca(vol, cfg=None, mask=None, threads=1, chunk=256):
    """MPPCA-denoise a 4D volume.

    Every patch's Casorati matrix (patch voxels x volumes) is centred per
    voxel, eigen-decomposed on its smaller side, and truncated to the
    components above the Marchenko-Pastur bulk.  Patch estimates are averaged
    over overlapping patches (``aggregation="overlap"``) or taken from the
    patch whose centre is nearest (``"center"``).  Voxels outside ``mask``
    (if given) are returned unchanged.

    Returns ``(denoised Volume4D, DenoiseReport)``.  Output is deterministic
    and independent of ``threads``.
    """
    cfg = cfg or PatchConfig()
    data = vol.data
    grid, nv = vol.grid, vol.nvols
    d, r = cfg.diameter, cfg.radius
    if min(grid) < d:
        raise PatchLargerThanVolume(f"patch diameter {d} exceeds volume grid {grid}")
    if nv < 10:
        warnings.warn(f"MPPCA on {nv} volumes; at least 10 are recommended", stacklevel=2)

    centers = [_centers(n, r, cfg.stride) for n in grid]
    windows = sliding_window_view(data, (d, d, d), axis=(0, 1, 2))  # (.., V, d, d, d)
    cx, cy, cz = np.meshgrid(*centers, indexing="ij")
    todo = np.stack([cx.ravel(), cy.ravel(), cz.ravel()], axis=1)

    def work(block):
        pts = todo[block]
        pat = windows[pts[:, 0] - r, pts[:, 1] - r, pts[:, 2] - r]  # (B, V, d, d, d)
        pat = pat.reshape(len(pts), nv, -1).transpose(0, 2, 1)
        return _denoise_patches(pat)

    blocks = [slice(i, i + chunk) for i in range(0, len(todo), chunk)]
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(work, blocks))
    else:
        results = [work(bl) for bl in blocks]

    acc = np.zeros(grid + (nv,))
    sig = np.zeros(grid)
    npar = np.zeros(grid)
    cnt = np.zeros(grid)
    offs = np.arange(-r, r + 1)
    if cfg.aggregation == "center":
        owner = [centers[a][_nearest_center(grid[a], centers[a])] for a in range(3)]
    for bl, (den, s, p) in zip(blocks, results):
        den = den.transpose(0, 2, 1).reshape(len(den), nv, d, d, d)
        for i, (x0, y0, z0) in enumerate(todo[bl]):
            sl = (slice(x0 - r, x0 + r + 1), slice(y0 - r, y0 + r + 1), slice(z0 - r, z0 + r + 1))
            est = np.moveaxis(den[i], 0, -1)
            if cfg.aggregation == "overlap":
                acc[sl] += est
                sig[sl] += s[i]
                npar[sl] += p[i]
                cnt[sl] += 1
            else:
                sel = [owner[0][x0 + offs] == x0, owner[1][y0 + offs] == y0,
                       owner[2][z0 + offs] == z0]
                ix = np.ix_(x0 + offs[sel[0]], y0 + offs[sel[1]], z0 + offs[sel[2]])
                acc[ix] = est[np.ix_(sel[0], sel[1], sel[2])]
                sig[ix] = s[i]
                npar[ix] = p[i]
                cnt[ix] = 1
    out = acc / cnt[..., None]
    sig /= cnt
    npar /= cnt
    if mask is not None:
        m = as_mask(mask, grid)
        out[~m] = data[~m]
        sig[~m] = 0.0
        npar[~m] = 0.0
    return vol.with_data(out), DenoiseReport(sig, npar)


# --- noise-distribution moments --------------------------------------------------

@dataclass(frozen=True)
class Moments:
    mean: float
    variance: float
    skewness: float
    excess_kurtosis: float
    count: int


def pool_moments(values):
    """Population moments of a sample; a constant pool has zero variance, skew and kurtosis."""
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size < 4:
        raise TooFewSamples(f"need at least 4 samples, got {x.size}")
    mu = x.mean()
    dev = x - mu
    var = float(np.mean(dev ** 2))
    if var <= 1e-300 * max(1.0, mu * mu):
        return Moments(float(mu), 0.0, 0.0, 0.0, x.size)
    z = dev / np.sqrt(var)  # standardising first avoids underflow of var ** 1.5
    skew = float(np.mean(z ** 3))
    kurt = float(np.mean(z ** 4) - 3.0)
    return Moments(float(mu), var, skew, kurt, x.size)


def residual_moments(raw, denoised=None, mask=None, pool="residual"):
    """Moments of masked intensities pooled over voxels and volumes.

    ``pool`` selects ``"residual"`` (raw - denoised), ``"raw"`` or
    ``"denoised"``.
    """
    a = raw.data if isinstance(raw, Volume4D) else np.asarray(raw)
    if pool == "raw":
        src = a
    else:
        if denoised is None:
            raise ValueError(f"pool={pool!r} needs a denoised volume")
        b = denoised.data if isinstance(denoised, Volume4D) else np.asarray(denoised)
        check_grid(a, b)
        if a.shape != b.shape:
            raise ValueError("raw and denoised differ in volume count")
        src = a - b if pool == "residual" else b
    if src.ndim == 3:
        src = src[..., None]
    m = as_mask(mask, src.shape[:3])
    return pool_moments(src[m])
