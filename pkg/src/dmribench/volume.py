"""Volumes, masks, label maps and gradient tables, with NIfTI-1 / FSL text I/O.

Voxel data is held as a float64 array of shape ``(X, Y, Z, V)``.  The linear
order on disk (and of ``Volume4D.data.ravel(order="F")``) is spatial-fastest:
x varies fastest, then y, then z, then the volume index.
"""
from __future__ import annotations

import gzip
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadRowCount,
    DimOverflow,
    GridMismatch,
    LengthMismatch,
    MalformedHeader,
    NoB0Volumes,
    NonFiniteData,
    NonNumericToken,
    NonUnitDirection,
    NiftiError,
    TruncatedPayload,
    UnsupportedDatatype,
    UnsupportedMagic,
)

B0_THRESHOLD = 50.0
SHELL_ROUNDING = 100.0

# NIfTI-1 datatype codes we decode; only the float ones are written.
_DTYPES = {
    2: np.dtype("u1"),
    4: np.dtype("i2"),
    8: np.dtype("i4"),
    16: np.dtype("f4"),
    64: np.dtype("f8"),
}
_WRITE_CODES = {"float32": 16, "float64": 64}

_HEADER_FIELDS = [
    ("sizeof_hdr", "i4"), ("data_type", "S10"), ("db_name", "S18"),
    ("extents", "i4"), ("session_error", "i2"), ("regular", "S1"),
    ("dim_info", "u1"), ("dim", "i2", (8,)), ("intent_p1", "f4"),
    ("intent_p2", "f4"), ("intent_p3", "f4"), ("intent_code", "i2"),
    ("datatype", "i2"), ("bitpix", "i2"), ("slice_start", "i2"),
    ("pixdim", "f4", (8,)), ("vox_offset", "f4"), ("scl_slope", "f4"),
    ("scl_inter", "f4"), ("slice_end", "i2"), ("slice_code", "u1"),
    ("xyzt_units", "u1"), ("cal_max", "f4"), ("cal_min", "f4"),
    ("slice_duration", "f4"), ("toffset", "f4"), ("glmax", "i4"),
    ("glmin", "i4"), ("descrip", "S80"), ("aux_file", "S24"),
    ("qform_code", "i2"), ("sform_code", "i2"), ("quatern_b", "f4"),
    ("quatern_c", "f4"), ("quatern_d", "f4"), ("qoffset_x", "f4"),
    ("qoffset_y", "f4"), ("qoffset_z", "f4"), ("srow_x", "f4", (4,)),
    ("srow_y", "f4", (4,)), ("srow_z", "f4", (4,)), ("intent_name", "S16"),
    ("magic", "S4"),
]
HEADER_DTYPE = np.dtype(_HEADER_FIELDS)
assert HEADER_DTYPE.itemsize == 348


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Volume4D:
    """Voxel grid ``(X, Y, Z, V)`` with voxel spacing (mm) and voxel->world affine."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    affine: np.ndarray = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 3:
            data = data[..., None]
        if data.ndim != 4 or min(data.shape) < 1:
            raise ValueError(f"expected a non-empty 3D or 4D array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise NonFiniteData("volume contains NaN or Inf", field="data")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacing must be 3 positive numbers, got {self.spacing}")
        affine = np.diag(spacing + (1.0,)) if self.affine is None else self.affine
        affine = np.asarray(affine, dtype=np.float64)
        if affine.shape != (4, 4):
            raise ValueError("affine must be 4x4")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "affine", _frozen(affine))

    @property
    def dims(self):
        return self.data.shape

    @property
    def grid(self):
        return self.data.shape[:3]

    @property
    def nvols(self):
        return self.data.shape[3]

    def with_data(self, data):
        """Same geometry, new voxel values."""
        return Volume4D(data, self.spacing, self.affine)

    def take(self, indices):
        """Sub-volume holding only the listed diffusion volumes (in that order)."""
        return self.with_data(self.data[..., list(indices)])

    def same_grid(self, other):
        return (self.grid == other.grid and np.allclose(self.spacing, other.spacing)
                and np.allclose(self.affine, other.affine))


def _grid_of(x):
    if isinstance(x, Volume4D):
        return x.grid
    return tuple(x) if isinstance(x, tuple) else tuple(np.shape(x)[:3])


def check_grid(a, b, what="volumes"):
    """Raise `GridMismatch` unless ``a`` and ``b`` (arrays, volumes or shapes) share a grid."""
    ga, gb = _grid_of(a), _grid_of(b)
    if ga != gb:
        raise GridMismatch(f"{what} differ in grid: {ga} vs {gb}")


def as_mask(mask, grid):
    """Boolean mask on ``grid``; ``None`` means every voxel."""
    if mask is None:
        return np.ones(grid, dtype=bool)
    m = mask.data[..., 0] if isinstance(mask, Volume4D) else np.asarray(mask)
    if m.ndim == 4 and m.shape[3] == 1:
        m = m[..., 0]
    check_grid(m, tuple(grid), "mask and volume")
    return m.astype(bool)


def as_labels(labels, grid=None):
    """Integer label array (0 = background) from a volume or array."""
    lab = labels.data[..., 0] if isinstance(labels, Volume4D) else np.asarray(labels)
    if lab.ndim == 4 and lab.shape[3] == 1:
        lab = lab[..., 0]
    if grid is not None:
        check_grid(lab, tuple(grid), "labels and volume")
    if np.any(lab < 0) or np.any(lab != np.round(lab)):
        raise ValueError("label values must be non-negative integers")
    return lab.astype(np.int64)


# --- NIfTI-1 ----------------------------------------------------------------

def _open_bytes(path):
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _affine_from_header(h, pixdim):
    if h["sform_code"] > 0:
        aff = np.eye(4)
        aff[0], aff[1], aff[2] = h["srow_x"], h["srow_y"], h["srow_z"]
        return aff
    if h["qform_code"] > 0:
        b, c, d = (float(h[k]) for k in ("quatern_b", "quatern_c", "quatern_d"))
        a = np.sqrt(max(0.0, 1.0 - (b * b + c * c + d * d)))
        rot = np.array([
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
        ])
        qfac = -1.0 if pixdim[0] < 0 else 1.0
        aff = np.eye(4)
        aff[:3, :3] = rot * np.array([pixdim[1], pixdim[2], qfac * pixdim[3]])
        aff[:3, 3] = [h["qoffset_x"], h["qoffset_y"], h["qoffset_z"]]
        return aff
    return np.diag([pixdim[1], pixdim[2], pixdim[3], 1.0])


def read_nifti(path, nan_policy="raise"):
    """Read a single-file NIfTI-1 image (optionally gzipped) as a float64 `Volume4D`.

    3D images are promoted to ``V = 1``.  ``nan_policy`` is ``"raise"``
    (reject non-finite voxels) or ``"zero"`` (replace them with 0).
    """
    raw = _open_bytes(path)
    if len(raw) < 348:
        raise MalformedHeader(f"{path}: {len(raw)} bytes, shorter than a NIfTI-1 header",
                              field="sizeof_hdr")
    hdr = np.frombuffer(raw[:348], dtype=HEADER_DTYPE)[0]
    if hdr["sizeof_hdr"] == 348:
        order = "<"
    elif hdr["sizeof_hdr"].byteswap() == 348:
        order = ">"
        hdr = np.frombuffer(raw[:348], dtype=HEADER_DTYPE.newbyteorder(">"))[0]
    else:
        raise MalformedHeader(f"{path}: sizeof_hdr is {int(hdr['sizeof_hdr'])}, expected 348",
                              field="sizeof_hdr")
    magic = bytes(hdr["magic"]).ljust(4, b"\0")
    if magic != b"n+1\0":
        raise UnsupportedMagic(f"{path}: magic {magic!r}; only single-file 'n+1' is supported",
                               field="magic")
    dim = [int(d) for d in hdr["dim"]]
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise MalformedHeader(f"{path}: dim[0] = {ndim}", field="dim")
    shape = [max(d, 1) if i <= ndim else 1 for i, d in enumerate(dim[1:], start=1)]
    if any(d < 1 for d in dim[1:ndim + 1]):
        raise MalformedHeader(f"{path}: non-positive entry in dim {dim}", field="dim")
    if any(s != 1 for s in shape[4:]):
        raise MalformedHeader(f"{path}: dimensions beyond 4 are not supported", field="dim")
    code = int(hdr["datatype"])
    if code not in _DTYPES:
        raise UnsupportedDatatype(f"{path}: datatype code {code}", field="datatype")
    dtype = _DTYPES[code].newbyteorder(order)
    offset = int(hdr["vox_offset"])
    if offset < 348:
        raise MalformedHeader(f"{path}: vox_offset {hdr['vox_offset']}", field="vox_offset")
    count = int(np.prod(shape[:4]))
    need = offset + count * dtype.itemsize
    if len(raw) < need:
        raise TruncatedPayload(f"{path}: payload has {len(raw) - offset} bytes, need "
                               f"{count * dtype.itemsize}", field="data")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    data = data.astype(np.float64).reshape(shape[:4], order="F")
    slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
    if slope != 0 and np.isfinite(slope) and not (slope == 1 and inter == 0):
        data = data * slope + (inter if np.isfinite(inter) else 0.0)
    if not np.all(np.isfinite(data)):
        if nan_policy == "zero":
            data = np.where(np.isfinite(data), data, 0.0)
        else:
            raise NonFiniteData(f"{path}: non-finite voxel values", field="data")
    pixdim = [float(p) for p in hdr["pixdim"]]
    spacing = tuple(abs(p) if p != 0 else 1.0 for p in pixdim[1:4])
    return Volume4D(data, spacing, _affine_from_header(hdr, pixdim))


def nifti_bytes(vol, datatype="float32"):
    """Encode ``vol`` as an uncompressed little-endian NIfTI-1 byte string."""
    if datatype not in _WRITE_CODES:
        raise UnsupportedDatatype(f"cannot write datatype {datatype!r}", field="datatype")
    if isinstance(vol, np.ndarray):
        vol = Volume4D(vol)
    dims = vol.dims
    for i, d in enumerate(dims):
        if d > 32767:
            raise DimOverflow(f"axis {i} has {d} voxels, above the int16 limit", field="dim")
    code = _WRITE_CODES[datatype]
    dtype = _DTYPES[code].newbyteorder("<")
    h = np.zeros((), dtype=HEADER_DTYPE.newbyteorder("<"))
    h["sizeof_hdr"] = 348
    ndim = 4 if dims[3] > 1 else 3
    h["dim"] = [ndim, *dims, 1, 1, 1]
    h["datatype"] = code
    h["bitpix"] = dtype.itemsize * 8
    h["pixdim"] = [1.0, *vol.spacing, 1.0, 0, 0, 0]
    h["vox_offset"] = 352.0
    h["scl_slope"] = 1.0
    h["xyzt_units"] = 2 | 8  # mm, seconds
    h["sform_code"] = 2
    h["srow_x"], h["srow_y"], h["srow_z"] = vol.affine[0], vol.affine[1], vol.affine[2]
    h["magic"] = b"n+1\0"
    payload = vol.data.astype(dtype).tobytes(order="F")
    return h.tobytes() + b"\0\0\0\0" + payload


def write_nifti(vol, path, datatype="float32"):
    """Write ``vol`` to ``path``; a ``.gz`` suffix selects a gzip wrapper."""
    blob = nifti_bytes(vol, datatype)
    path = os.fspath(path)
    if path.endswith(".gz"):
        # mtime=0 keeps output byte-identical across runs
        blob = gzip.compress(blob, compresslevel=6, mtime=0)
    with open(path, "wb") as fh:
        fh.write(blob)


# --- gradient tables -----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GradientScheme:
    """Per-volume b-values (s/mm^2) and unit gradient directions."""

    bvals: np.ndarray
    bvecs: np.ndarray
    b0_threshold: float = B0_THRESHOLD

    def __post_init__(self):
        bvals = np.asarray(self.bvals, dtype=np.float64).reshape(-1)
        bvecs = np.asarray(self.bvecs, dtype=np.float64).reshape(-1, 3)
        if len(bvals) != len(bvecs):
            raise LengthMismatch(f"{len(bvals)} b-values but {len(bvecs)} directions")
        directed = bvals > self.b0_threshold
        norms = np.linalg.norm(bvecs[directed], axis=1)
        if np.any(np.abs(norms - 1) > 1e-3):
            raise NonUnitDirection("directed volumes need unit gradient directions")
        object.__setattr__(self, "bvals", _frozen(bvals))
        object.__setattr__(self, "bvecs", _frozen(bvecs))

    def __len__(self):
        return len(self.bvals)

    @property
    def b0_mask(self):
        return self.bvals <= self.b0_threshold

    @property
    def b0_indices(self):
        return np.flatnonzero(self.b0_mask)

    @property
    def directed_indices(self):
        return np.flatnonzero(~self.b0_mask)

    def subset(self, indices):
        idx = list(indices)
        return GradientScheme(self.bvals[idx], self.bvecs[idx], self.b0_threshold)

    def shells(self, round_to=SHELL_ROUNDING):
        return shell_partition(self, round_to)


def _parse_rows(path):
    rows = []
    for ln, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rows.append([float(tok) for tok in line.split()])
        except ValueError as exc:
            raise NonNumericToken(f"{path}:{ln}: {exc}") from None
    return rows


def read_gradients(bval_path, bvec_path, b0_threshold=B0_THRESHOLD):
    """Parse FSL-style ``.bval`` (one row) and ``.bvec`` (three rows) files.

    Directed gradients with norm in [0.9, 1.1] are renormalised to unit length.
    """
    brows = _parse_rows(bval_path)
    if len(brows) != 1:
        raise BadRowCount(f"{bval_path}: expected 1 row of b-values, found {len(brows)}")
    vrows = _parse_rows(bvec_path)
    if len(vrows) != 3:
        raise BadRowCount(f"{bvec_path}: expected 3 rows of directions, found {len(vrows)}")
    bvals = np.array(brows[0])
    if any(len(r) != len(bvals) for r in vrows):
        raise LengthMismatch(f"{len(bvals)} b-values but bvec rows have lengths "
                             f"{[len(r) for r in vrows]}")
    bvecs = np.array(vrows).T
    norms = np.linalg.norm(bvecs, axis=1)
    directed = bvals > b0_threshold
    bad = directed & ((norms < 0.9) | (norms > 1.1))
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise NonUnitDirection(f"volume {i}: direction {bvecs[i]} has norm {norms[i]:.4f}")
    bvecs[directed] /= norms[directed, None]
    return GradientScheme(bvals, bvecs, b0_threshold)


def _fmt(x):
    return format(float(x), ".10g")


def write_gradients(scheme, bval_path, bvec_path):
    Path(bval_path).write_text(" ".join(_fmt(b) for b in scheme.bvals) + "\n", encoding="utf-8")
    rows = [" ".join(_fmt(v) for v in scheme.bvecs[:, k]) for k in range(3)]
    Path(bvec_path).write_text("\n".join(rows) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class Shell:
    bval: float
    indices: tuple = field(default_factory=tuple)

    def __len__(self):
        return len(self.indices)


def shell_partition(scheme, round_to=SHELL_ROUNDING):
    """Group volumes by ``round(b / round_to) * round_to``; the b0 group has ``bval == 0``.

    Returns shells sorted by b-value.  Every volume lands in exactly one shell.
    """
    if round_to <= 0:
        raise ValueError("round_to must be positive")
    groups = {}
    for i, (b, is_b0) in enumerate(zip(scheme.bvals, scheme.b0_mask)):
        key = 0.0 if is_b0 else float(np.round(b / round_to) * round_to)
        groups.setdefault(key, []).append(i)
    return [Shell(k, tuple(v)) for k, v in sorted(groups.items())]


def select_shell(scheme, bval, round_to=SHELL_ROUNDING, with_b0=True):
    """Volume indices of one shell (plus every b0 volume when ``with_b0``)."""
    shells = {s.bval: s.indices for s in shell_partition(scheme, round_to)}
    key = float(np.round(bval / round_to) * round_to)
    if key not in shells or key == 0:
        raise ValueError(f"no shell at b={bval}; available: {sorted(shells)}")
    idx = list(shells[key])
    if with_b0:
        idx = list(shells.get(0.0, ())) + idx
    return idx


def mean_b0(vol, scheme):
    """Voxelwise mean over the b0 volumes, as a ``V = 1`` volume."""
    idx = scheme.b0_indices
    if len(idx) == 0:
        raise NoB0Volumes("scheme has no volume with b <= b0 threshold")
    if len(scheme) != vol.nvols:
        raise LengthMismatch(f"scheme has {len(scheme)} entries, volume has {vol.nvols}")
    b0 = vol.data[..., idx]
    # offset by the first b0 so k identical volumes average to exactly that volume
    ref = b0[..., :1]
    return vol.with_data(ref + (b0 - ref).mean(axis=3, keepdims=True))
