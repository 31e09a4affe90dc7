"""Synthetic ground truth: two-compartment tensor phantoms, Rician/Gaussian noise, k-space downsampling."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dti import TensorMap, tensor_from_eig, tensor_matrix
from .errors import PhantomSpecError, RegionConflict
from .sphere import fibonacci_hemisphere
from .volume import GradientScheme, Volume4D, read_gradients

D_ISO = 3.0e-3  # free water, mm^2/s


def simulate_signal(D, s0, f_iso, d_iso, bvals, bvecs):
    """``S0 (f_iso exp(-b d_iso) + (1 - f_iso) exp(-b g^T D g))`` per volume.

    ``D`` is a 3x3 tensor or a 6-vector (Dxx, Dyy, Dzz, Dxy, Dxz, Dyz).
    """
    D = np.asarray(D, dtype=np.float64)
    if D.shape == (6,):
        D = tensor_matrix(D)
    b = np.asarray(bvals, dtype=np.float64)
    g = np.asarray(bvecs, dtype=np.float64).reshape(-1, 3)
    adc = np.einsum("ni,ij,nj->n", g, D, g)
    return s0 * (f_iso * np.exp(-b * d_iso) + (1.0 - f_iso) * np.exp(-b * adc))


def _volume_streams(seed, nvols):
    # one independent stream per volume index
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(nvols)]


def add_rician(vol, sigma, seed):
    """Magnitude of the signal plus complex Gaussian noise of std ``sigma`` per channel."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return vol.with_data(vol.data)
    out = np.empty(vol.dims)
    for v, rng in enumerate(_volume_streams(seed, vol.nvols)):
        n = rng.normal(0.0, sigma, size=(2,) + vol.grid)
        out[..., v] = np.hypot(vol.data[..., v] + n[0], n[1])
    return vol.with_data(out)


def add_gaussian(vol, sigma, seed):
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return vol.with_data(vol.data)
    out = np.empty(vol.dims)
    for v, rng in enumerate(_volume_streams(seed, vol.nvols)):
        out[..., v] = vol.data[..., v] + rng.normal(0.0, sigma, size=vol.grid)
    return vol.with_data(out)


def add_noise(vol, model, sigma, seed):
    if model == "rician":
        return add_rician(vol, sigma, seed)
    if model == "gaussian":
        return add_gaussian(vol, sigma, seed)
    raise ValueError(f"unknown noise model {model!r}")


# --- k-space resolution reduction ---------------------------------------------

def _keep_mask(n, factor):
    """Boolean mask over ``np.fft.fftfreq`` bins kept by a factor-``factor`` low-pass."""
    n_keep = int(round(n / factor))
    if n_keep >= n:
        return np.ones(n, dtype=bool), n
    k = np.fft.fftfreq(n) * n  # integer bin index, negative half included
    # symmetric band; for even n_keep the unmatched negative Nyquist bin is dropped
    half = (n_keep - 1) // 2 if n_keep % 2 == 0 else n_keep // 2
    return np.abs(k) <= half, n_keep


def kspace_downsample(vol, target_spacing, reconstruct="zerofill"):
    """Reduce resolution to ``target_spacing`` (mm, per axis) by k-space truncation.

    Each volume is transformed with a unitary 3D FFT and frequencies outside
    the target Nyquist band are removed.

    ``reconstruct="zerofill"`` inverts at the native matrix size (the image
    stays on the native grid; the real part is kept).  ``"linear"`` inverts
    on the reduced matrix, rescaled to preserve intensity, and returns to the
    native grid by periodic trilinear interpolation.
    """
    target = np.broadcast_to(np.asarray(target_spacing, dtype=np.float64), (3,))
    native = np.asarray(vol.spacing)
    if np.any(target <= 0):
        raise ValueError("target spacing must be positive")
    if np.any(target < native - 1e-9):
        raise ValueError(f"target spacing {tuple(target)} is finer than native {tuple(native)}")
    if reconstruct not in ("zerofill", "linear"):
        raise ValueError("reconstruct must be 'zerofill' or 'linear'")
    grid = vol.grid
    factors = target / native
    keeps = [_keep_mask(n, f) for n, f in zip(grid, factors)]
    if all(nk == n for (_, nk), n in zip(keeps, grid)):
        return vol.with_data(vol.data)
    band = keeps[0][0][:, None, None] & keeps[1][0][None, :, None] & keeps[2][0][None, None, :]

    out = np.empty(vol.dims)
    for v in range(vol.nvols):
        k = np.fft.fftn(vol.data[..., v], norm="ortho")
        k = np.where(band, k, 0.0)
        if reconstruct == "zerofill":
            out[..., v] = np.fft.ifftn(k, norm="ortho").real
        else:
            out[..., v] = _linear_reconstruct(k, grid, [nk for _, nk in keeps])
    return vol.with_data(out)


def _linear_reconstruct(k, grid, small):
    # crop the centred band to the reduced matrix, invert, rescale, interpolate back
    shifted = np.fft.fftshift(k)
    sl = []
    for n, m in zip(grid, small):
        c = n // 2
        lo = c - m // 2
        sl.append(slice(lo, lo + m))
    crop = np.fft.ifftshift(shifted[tuple(sl)])
    low = np.fft.ifftn(crop, norm="ortho").real * np.sqrt(np.prod(small) / np.prod(grid))
    out = low
    for axis, (n, m) in enumerate(zip(grid, small)):
        out = _periodic_linear(out, axis, n, m)
    return out


def _periodic_linear(a, axis, n, m):
    if n == m:
        return a
    pos = np.arange(n) * (m / n)
    i0 = np.floor(pos).astype(int)
    w = pos - i0
    a0 = np.take(a, i0 % m, axis=axis)
    a1 = np.take(a, (i0 + 1) % m, axis=axis)
    shape = [1] * a.ndim
    shape[axis] = n
    w = w.reshape(shape)
    return (1 - w) * a0 + w * a1


def random_kspace_augment(vol, rng, probability=0.5, spacing_range=(1.25, 3.0),
                          reconstruct="linear"):
    """With the given probability, downsample to a random anisotropic resolution.

    Per-axis target spacing is uniform in ``spacing_range`` (never finer than
    native).  Returns ``(volume, target_spacing or None)``.
    """
    if rng.random() >= probability:
        return vol, None
    lo, hi = spacing_range
    target = np.maximum(rng.uniform(lo, hi, size=3), vol.spacing)
    return kspace_downsample(vol, target, reconstruct), tuple(float(t) for t in target)


# --- phantoms -------------------------------------------------------------------

@dataclass
class Region:
    label: int
    shape: str  # "box" or "sphere"
    geometry: dict
    tensor: np.ndarray  # 6-vector, mm^2/s
    s0: float = 1000.0
    f_iso: float = 0.0
    d_iso: float = D_ISO
    name: str = ""

    def voxels(self, grid):
        idx = np.indices(grid).transpose(1, 2, 3, 0).astype(np.float64)
        if self.shape == "box":
            lo = np.asarray(self.geometry["lo"])
            hi = np.asarray(self.geometry["hi"])
            return np.all((idx >= lo) & (idx < hi), axis=-1)
        if self.shape == "sphere":
            c = np.asarray(self.geometry["center"], dtype=np.float64)
            return np.sum((idx - c) ** 2, axis=-1) <= float(self.geometry["radius"]) ** 2
        raise PhantomSpecError(f"region {self.label}: unknown shape {self.shape!r}")

    def params(self):
        return (tuple(np.round(self.tensor, 15)), self.s0, self.f_iso, self.d_iso)


@dataclass
class PhantomSpec:
    dims: tuple
    scheme: GradientScheme
    regions: list = field(default_factory=list)
    spacing: tuple = (1.25, 1.25, 1.25)
    noise_model: str = "rician"
    noise_sigma: float = 0.0

    def validate(self):
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise PhantomSpecError(f"dims must be 3 positive integers, got {self.dims}")
        seen = set()
        for r in self.regions:
            if r.label <= 0:
                raise PhantomSpecError("region labels must be positive (0 is background)")
            if r.label in seen:
                raise PhantomSpecError(f"duplicate region label {r.label}")
            seen.add(r.label)
            if not 0.0 <= r.f_iso <= 1.0:
                raise PhantomSpecError(f"region {r.label}: f_iso must lie in [0, 1]")
            m = tensor_matrix(r.tensor)
            if not np.allclose(m, m.T) or np.linalg.eigvalsh(m).min() < -1e-15:
                raise PhantomSpecError(f"region {r.label}: tensor is not positive semidefinite")
            if r.s0 < 0:
                raise PhantomSpecError(f"region {r.label}: S0 must be non-negative")


def make_phantom(spec, seed=0):
    """Render a phantom.

    Returns ``(dwi Volume4D, GradientScheme, ground-truth TensorMap, labels)``
    where ``labels`` is an integer array (0 = background).  Regions may only
    overlap if they carry identical tissue parameters.  Noise (when
    ``spec.noise_sigma > 0``) uses ``seed``.
    """
    spec.validate()
    grid = tuple(int(d) for d in spec.dims)
    scheme = spec.scheme
    labels = np.zeros(grid, dtype=np.int64)
    owner = {}
    data = np.zeros(grid + (len(scheme),))
    tensor = np.zeros(grid + (6,))
    log_s0 = np.zeros(grid)
    for r in spec.regions:
        vox = r.voxels(grid)
        clash = vox & (labels > 0)
        for other in np.unique(labels[clash]):
            if owner[int(other)].params() != r.params():
                raise RegionConflict(f"regions {int(other)} and {r.label} overlap with "
                                     f"different tissue parameters")
        fresh = vox & (labels == 0)
        labels[fresh] = r.label
        owner[r.label] = r
        data[fresh] = simulate_signal(r.tensor, r.s0, r.f_iso, r.d_iso, scheme.bvals, scheme.bvecs)
        tensor[fresh] = r.tensor
        log_s0[fresh] = np.log(r.s0) if r.s0 > 0 else 0.0
    vol = Volume4D(data, spec.spacing)
    if spec.noise_sigma > 0:
        vol = add_noise(vol, spec.noise_model, spec.noise_sigma, seed)
    truth = TensorMap(tensor, log_s0, labels > 0)
    return vol, scheme, truth, labels


# --- standard schemes and specs ----------------------------------------------------

def _rotation_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def multishell_scheme(shells=(1000, 2000, 3000), n_dirs=90, n_b0=18, interleave=True):
    """HCP-like table: ``n_b0`` b0 volumes then ``n_dirs`` directions per shell.

    Directions are a Fibonacci hemisphere, rotated about z for each shell so
    the shells do not share directions.  With ``interleave`` the b0 volumes
    are spread through the table (the first volume is always a b0).
    """
    base = fibonacci_hemisphere(n_dirs)
    bvals, bvecs = [], []
    for i, b in enumerate(shells):
        dirs = base @ _rotation_z(i * np.pi / (len(shells) * 7.0)).T
        bvals += [float(b)] * n_dirs
        bvecs += list(dirs)
    bvals, bvecs = np.array(bvals), np.array(bvecs)
    if n_b0 == 0:
        return GradientScheme(bvals, bvecs)
    if not interleave:
        return GradientScheme(np.concatenate([np.zeros(n_b0), bvals]),
                              np.concatenate([np.zeros((n_b0, 3)), bvecs]))
    slots = np.linspace(0, len(bvals), n_b0, endpoint=False).astype(int)
    b_out, g_out = [], []
    j = 0
    for i in range(len(bvals)):
        while j < n_b0 and slots[j] == i:
            b_out.append(0.0)
            g_out.append(np.zeros(3))
            j += 1
        b_out.append(bvals[i])
        g_out.append(bvecs[i])
    return GradientScheme(np.array(b_out), np.array(g_out))


WM_EVALS = (1.7e-3, 0.3e-3, 0.3e-3)
GM_EVALS = (0.9e-3, 0.75e-3, 0.7e-3)


def two_region_spec(n=16, scheme=None, s0=1000.0, snr=None, ventricle=False):
    """Standard desk-scale phantom: an anisotropic "WM" block inside a "GM" box.

    WM (label 1) occupies the central half of the grid with a tilted
    principal axis; GM (label 2) fills the rest of an inset box.  With
    ``ventricle`` a free-water sphere (label 3, isotropic tensor at
    ``D_ISO``) is cut out of the GM.  ``snr`` sets the noise sigma to ``s0 / snr``.
    """
    scheme = scheme or multishell_scheme((1000,), n_dirs=90, n_b0=6)
    q = n // 4
    wm_axis = np.array([1.0, 0.5, 0.2])
    regions = [
        Region(1, "box", {"lo": [q, q, q], "hi": [n - q] * 3},
               tensor_from_eig(WM_EVALS, wm_axis), s0, name="wm"),
    ]
    gm = tensor_from_eig(GM_EVALS, [0.0, 0.0, 1.0])
    margin = 1
    # GM is a shell of boxes around the WM block
    lo, hi = margin, n - margin
    boxes = [
        ([lo, lo, lo], [q, hi, hi]), ([n - q, lo, lo], [hi, hi, hi]),
        ([q, lo, lo], [n - q, q, hi]), ([q, n - q, lo], [n - q, hi, hi]),
        ([q, q, lo], [n - q, n - q, q]), ([q, q, n - q], [n - q, n - q, hi]),
    ]
    spec = PhantomSpec((n, n, n), scheme, regions, noise_sigma=(s0 / snr if snr else 0.0))
    gm_regions = []
    for lo_, hi_ in boxes:
        gm_regions.append(Region(2, "box", {"lo": lo_, "hi": hi_}, gm, s0, name="gm"))
    spec.regions = regions + _merge_label(gm_regions)
    if ventricle:
        spec.regions.append(Region(3, "sphere", {"center": [q / 2 + 0.5] * 3, "radius": q / 2},
                                   tensor_from_eig((D_ISO,) * 3, [0.0, 0.0, 1.0]), s0,
                                   name="ventricle"))
        spec.regions = _carve(spec.regions, spec.regions[-1], (n, n, n))
    return spec


def _merge_label(regions):
    # several boxes sharing one label become one "union" region
    return [UnionRegion(regions)]


class UnionRegion(Region):
    def __init__(self, parts, exclude=None):
        first = parts[0]
        super().__init__(first.label, "union", {}, first.tensor, first.s0, first.f_iso,
                         first.d_iso, first.name)
        self.parts = parts
        self.exclude = exclude or []

    def voxels(self, grid):
        vox = np.zeros(grid, dtype=bool)
        for p in self.parts:
            vox |= p.voxels(grid)
        for e in self.exclude:
            vox &= ~e.voxels(grid)
        return vox


def _carve(regions, hole, grid):
    out = []
    for r in regions:
        if r is hole:
            out.append(r)
            continue
        parts = r.parts if isinstance(r, UnionRegion) else [r]
        excl = (r.exclude if isinstance(r, UnionRegion) else []) + [hole]
        out.append(UnionRegion(parts, excl))
    return out


# --- JSON spec files -----------------------------------------------------------------

def _region_from_json(obj, base):
    try:
        label = int(obj["label"])
        shape = obj.get("shape", "box")
        if shape == "box":
            geometry = {"lo": list(obj["lo"]), "hi": list(obj["hi"])}
        elif shape == "sphere":
            geometry = {"center": list(obj["center"]), "radius": float(obj["radius"])}
        else:
            raise PhantomSpecError(f"region {label}: unknown shape {shape!r}")
        if "tensor" in obj:
            t = np.asarray(obj["tensor"], dtype=np.float64)
            tensor = t if t.shape == (6,) else np.array([t[0, 0], t[1, 1], t[2, 2],
                                                         t[0, 1], t[0, 2], t[1, 2]])
        else:
            tensor = tensor_from_eig(obj["evals"], obj.get("v1", [1.0, 0.0, 0.0]))
        return Region(label, shape, geometry, tensor, float(obj.get("s0", 1000.0)),
                      float(obj.get("f_iso", 0.0)), float(obj.get("d_iso", D_ISO)),
                      str(obj.get("name", "")))
    except KeyError as exc:
        raise PhantomSpecError(f"region entry missing field {exc}") from None


def scheme_from_json(obj, base=Path(".")):
    if "bvals" in obj:
        return GradientScheme(obj["bvals"], obj["bvecs"])
    if "bval" in obj:
        return read_gradients(base / obj["bval"], base / obj["bvec"])
    if "multishell" in obj:
        ms = obj["multishell"]
        return multishell_scheme(tuple(ms.get("shells", (1000, 2000, 3000))),
                                 int(ms.get("n_dirs", 90)), int(ms.get("n_b0", 18)))
    raise PhantomSpecError("scheme needs 'bvals'/'bvecs', 'bval'/'bvec' paths or 'multishell'")


def spec_from_json(obj, base=Path(".")):
    """Build a `PhantomSpec` from a parsed JSON document (see README for the schema)."""
    if isinstance(obj, (str, Path)):
        base = Path(obj).parent
        obj = json.loads(Path(obj).read_text(encoding="utf-8"))
    if obj.get("preset") == "two-region":
        scheme = scheme_from_json(obj["scheme"], base) if "scheme" in obj else None
        spec = two_region_spec(int(obj.get("n", 16)), scheme, float(obj.get("s0", 1000.0)),
                               obj.get("snr"), bool(obj.get("ventricle", False)))
        return spec
    for key in ("dims", "scheme", "regions"):
        if key not in obj:
            raise PhantomSpecError(f"phantom spec missing {key!r}")
    noise = obj.get("noise") or {}
    spec = PhantomSpec(
        tuple(int(d) for d in obj["dims"]),
        scheme_from_json(obj["scheme"], base),
        [_region_from_json(r, base) for r in obj["regions"]],
        tuple(float(s) for s in obj.get("spacing", (1.25, 1.25, 1.25))),
        noise.get("model", "rician"),
        float(noise.get("sigma", 0.0)),
    )
    spec.validate()
    return spec
