"""Point sets on the unit sphere: icospheres, Fibonacci spirals and the 362-point evaluation hemisphere."""
from functools import lru_cache

import numpy as np


def icosahedron():
    """Vertices (12, 3) and triangular faces (20, 3) of a unit icosahedron."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ])
    return verts, faces


def icosphere(subdivisions):
    """Unit icosphere built by repeated edge bisection.

    Vertex counts are 10 * 4**n + 2: 12, 42, 162, 642, 2562, 10242 for
    n = 0..5.  Output is deterministic.
    """
    verts, faces = icosahedron()
    verts = list(verts)
    for _ in range(subdivisions):
        cache = {}
        new_faces = []

        def midpoint(i, j):
            key = (i, j) if i < j else (j, i)
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = np.array(new_faces)
    return np.array(verts), faces


def fibonacci_hemisphere(n):
    """``n`` near-uniform directions with z > 0 on a golden-angle spiral."""
    i = np.arange(n) + 0.5
    z = 1.0 - i / n
    r = np.sqrt(1.0 - z * z)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def to_upper_hemisphere(dirs):
    """Flip each direction to its antipode when needed so that z >= 0.

    On the equator (z == 0) the first non-zero of (x, y) is made positive.
    """
    dirs = np.array(dirs, dtype=np.float64)
    key = np.where(dirs[:, 2] != 0, dirs[:, 2], np.where(dirs[:, 0] != 0, dirs[:, 0], dirs[:, 1]))
    dirs[key < 0] *= -1
    return dirs


def antipodal_classes(dirs, tol=1e-9):
    """Representative index for each direction, merging g and -g (and duplicates)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    dots = np.abs(dirs @ dirs.T)
    rep = np.arange(len(dirs))
    for i in range(len(dirs)):
        same = np.flatnonzero(dots[i, :i] > 1 - tol)
        if len(same):
            rep[i] = rep[same[0]]
    return rep


def _repel(dirs, iterations, step):
    # Antipodally symmetric Coulomb relaxation: each point feels g and -g of every other.
    x = dirs.copy()
    n = len(x)
    off = ~np.eye(n, dtype=bool)
    for _ in range(iterations):
        dots = x @ x.T
        force = np.zeros_like(x)
        for sign in (1.0, -1.0):
            d2 = np.maximum(2.0 - 2.0 * sign * dots, 1e-12)
            w = np.where(off, d2 ** -1.5, 0.0)
            force += w.sum(axis=1)[:, None] * x - sign * (w @ x)
        force -= np.einsum("ij,ij->i", force, x)[:, None] * x
        x = x + step * force / n
        x /= np.linalg.norm(x, axis=1, keepdims=True)
    return x


@lru_cache(maxsize=None)
def _hemisphere_362():
    dirs = _repel(fibonacci_hemisphere(362), iterations=60, step=0.01)
    dirs = to_upper_hemisphere(dirs)
    # canonical, platform-independent ordering
    order = np.lexsort((dirs[:, 0], dirs[:, 1], -np.round(dirs[:, 2], 12)))
    dirs = dirs[order]
    dirs.setflags(write=False)
    return dirs


def make_hemisphere_362():
    """The fixed 362-direction evaluation hemisphere (z >= 0, no antipodal pairs)."""
    dirs = _hemisphere_362()
    if len(dirs) != 362:
        raise RuntimeError(f"hemisphere construction produced {len(dirs)} points")
    cos = np.abs(dirs @ dirs.T)
    np.fill_diagonal(cos, 0.0)
    if cos.max() > 1 - 1e-12:
        raise RuntimeError("hemisphere construction produced an antipodal pair")
    return dirs


def min_pairwise_angle(dirs, antipodal=True):
    """Smallest angle in degrees between distinct directions."""
    dots = np.asarray(dirs) @ np.asarray(dirs).T
    if antipodal:
        dots = np.abs(dots)
    np.fill_diagonal(dots, -np.inf if not antipodal else 0.0)
    return float(np.degrees(np.arccos(np.clip(dots.max(), -1.0, 1.0))))


def random_rotation(rng):
    """Uniformly random 3x3 rotation matrix."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


def random_rotations(rng, n):
    """``n`` uniformly random rotations, shape (n, 3, 3), from normalised Gaussian quaternions."""
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], 1)
