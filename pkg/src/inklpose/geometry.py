"""Point-cloud and similarity-transform kernels.

Conventions: point sets are row-major ``N x 3`` arrays in meters.  A
:class:`SimTransform` maps canonical (NOCS) coordinates ``y`` to the camera
frame as ``x = ||s|| * y @ R.T + t``; :func:`to_nocs` is its inverse,
``y = (x - t) @ R / ||s||``.  Columns of ``R`` are the object axes expressed in
the camera frame, so the oriented bounding box of an object is centered at
``t`` with axes ``R[:, k]`` and extents ``s[k]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from inklpose.errors import ArgumentError
from inklpose.substrate.tensor import Tensor, add_flops, as_tensor, make_result

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None


@dataclass
class PointCloud:
    points: np.ndarray
    appearance: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points)
        if self.points.ndim != 2 or self.points.shape[1] != 3 or len(self.points) < 1:
            raise ArgumentError(f"points must be N x 3 with N >= 1, got {self.points.shape}")
        if not np.all(np.isfinite(self.points)):
            raise ArgumentError("point coordinates must be finite")
        if self.appearance is not None:
            self.appearance = np.asarray(self.appearance)
            if self.appearance.shape[0] != len(self.points):
                raise ArgumentError("appearance must have one row per point")

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class SimTransform:
    R: np.ndarray
    t: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        self.R = np.asarray(self.R)
        self.t = np.asarray(self.t).reshape(3)
        self.s = np.asarray(self.s).reshape(3)

    def validate(self, tol: float = 1e-6) -> None:
        R = self.R.astype(np.float64)
        if R.shape != (3, 3):
            raise ArgumentError(f"rotation must be 3 x 3, got {R.shape}")
        if np.abs(R.T @ R - np.eye(3)).max() > tol or abs(np.linalg.det(R) - 1.0) > tol:
            raise ArgumentError("rotation is not orthonormal with det +1")
        if np.any(self.s <= 0):
            raise ArgumentError("sizes must be strictly positive")

    @property
    def scale(self) -> float:
        return float(np.linalg.norm(self.s.astype(np.float64)))

    def from_nocs(self, y: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(y, dtype=np.float64) @ self.R.T.astype(np.float64) + self.t


# -- sampling and neighbourhoods -------------------------------------------

def farthest_point_sampling(points, n: int, seed: int = 0) -> np.ndarray:
    """Greedy farthest point sampling; starts at index ``seed % N``.

    Each further index maximises the distance to the already chosen set
    (ties go to the lowest index).
    """
    pts = np.asarray(points.points if isinstance(points, PointCloud) else points, dtype=np.float64)
    N = len(pts)
    if not 1 <= n <= N:
        raise ArgumentError(f"cannot sample {n} of {N} points")
    chosen = np.empty(n, dtype=np.int64)
    chosen[0] = seed % N
    mind = np.sum((pts - pts[chosen[0]]) ** 2, axis=1)
    mind[chosen[0]] = -1.0
    for k in range(1, n):
        nxt = int(np.argmax(mind))
        chosen[k] = nxt
        d = np.sum((pts - pts[nxt]) ** 2, axis=1)
        np.minimum(mind, d, out=mind)
        mind[chosen[: k + 1]] = -1.0
    return chosen


def pairwise_sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared distances ``[..., A, B]``, clamped at zero."""
    a2 = np.sum(a * a, axis=-1)[..., :, None]
    b2 = np.sum(b * b, axis=-1)[..., None, :]
    d = a2 + b2 - 2.0 * (a @ np.swapaxes(b, -1, -2))
    return np.maximum(d, 0.0)


def knn(query, base, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest ``base`` rows for every ``query`` row.

    Rows are ordered by ascending distance, ties broken by lower index.
    """
    q = np.asarray(query, dtype=np.float64)
    b = np.asarray(base, dtype=np.float64)
    if not 1 <= k <= len(b):
        raise ArgumentError(f"k={k} must lie in [1, {len(b)}]")
    d = np.sum((q[:, None, :] - b[None, :, :]) ** 2, axis=-1) if len(q) * len(b) <= 65536 else pairwise_sqdist(q, b)
    return _smallest_k(d, k)


def _smallest_k(d: np.ndarray, k: int) -> np.ndarray:
    nq, nb = d.shape
    if k == nb:
        return np.argsort(d, axis=1, kind="stable")
    kth = np.partition(d, k - 1, axis=1)[:, k - 1: k]
    mask = d <= kth
    counts = mask.sum(axis=1)
    out = np.empty((nq, k), dtype=np.int64)
    easy = counts == k
    if easy.any():
        rows, cols = np.nonzero(mask[easy])
        cand = cols.reshape(-1, k)
        vals = np.take_along_axis(d[easy], cand, axis=1)
        order = np.argsort(vals, axis=1, kind="stable")
        out[easy] = np.take_along_axis(cand, order, axis=1)
    for r in np.nonzero(~easy)[0]:
        out[r] = np.argsort(d[r], kind="stable")[:k]
    return out


def batched_knn(query: np.ndarray, base: np.ndarray, k: int) -> np.ndarray:
    """:func:`knn` over a leading batch axis: [B, Q, 3] x [B, N, 3] -> [B, Q, k]."""
    return np.stack([knn(q, b, k) for q, b in zip(query, base)])


# -- chamfer ------------------------------------------------------------------

if numba is not None:

    @numba.njit(cache=True)
    def _nn_both_numba(a, b):  # pragma: no cover - compiled
        nb, na, _ = a.shape
        nbb = b.shape[1]
        ia = np.zeros((nb, na), dtype=np.int64)
        ib = np.zeros((nb, nbb), dtype=np.int64)
        db = np.empty(nbb, dtype=np.float64)
        for k in range(nb):
            db[:] = np.inf
            for i in range(na):
                x0, x1, x2 = a[k, i, 0], a[k, i, 1], a[k, i, 2]
                best = np.inf
                arg = 0
                for j in range(nbb):
                    e0 = x0 - b[k, j, 0]
                    e1 = x1 - b[k, j, 1]
                    e2 = x2 - b[k, j, 2]
                    dd = e0 * e0 + e1 * e1 + e2 * e2
                    if dd < best:
                        best = dd
                        arg = j
                    if dd < db[j]:
                        db[j] = dd
                        ib[k, j] = i
                ia[k, i] = arg
        return ia, ib


def _nn_pairs(a: np.ndarray, b: np.ndarray):
    """Nearest-neighbour index in ``b`` for each row of ``a`` and vice versa (ties -> lowest)."""
    if numba is not None:
        lead = a.shape[:-2]
        a3 = np.ascontiguousarray(a.reshape((-1,) + a.shape[-2:]), dtype=np.float64)
        b3 = np.ascontiguousarray(b.reshape((-1,) + b.shape[-2:]), dtype=np.float64)
        ia, ib = _nn_both_numba(a3, b3)
        return ia.reshape(lead + ia.shape[-1:]), ib.reshape(lead + ib.shape[-1:])
    d = pairwise_sqdist(a, b)
    return np.argmin(d, axis=-1), np.argmin(d, axis=-2)


def chamfer(a, b):
    """Symmetric chamfer distance with squared Euclidean terms.

    ``mean_a min_b |a-b|^2 + mean_b min_a |b-a|^2``.  Accepts numpy arrays
    (returns a float) or tensors of shape [A, 3] / [batch, A, 3] (returns a
    tensor, one value per batch entry).  Gradients treat the nearest-neighbour
    pairing as constant.
    """
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if a.shape[-2] == 0 or b.shape[-2] == 0:
            raise ArgumentError("chamfer of an empty cloud")
        ia, ib = _nn_pairs(a, b)
        da = np.sum((a - np.take_along_axis(b, ia[..., None], axis=-2)) ** 2, axis=-1)
        db = np.sum((b - np.take_along_axis(a, ib[..., None], axis=-2)) ** 2, axis=-1)
        val = da.mean(axis=-1) + db.mean(axis=-1)
        return float(val) if np.ndim(val) == 0 else val
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-2] == 0 or b.shape[-2] == 0:
        raise ArgumentError("chamfer of an empty cloud")
    A, B = a.shape[-2], b.shape[-2]
    ia, ib = _nn_pairs(a.data, b.data)
    add_flops("chamfer", 8 * a.size // 3 * B)
    ra = a.data - np.take_along_axis(b.data, ia[..., None], axis=-2)
    rb = b.data - np.take_along_axis(a.data, ib[..., None], axis=-2)
    val = (ra * ra).sum(-1).mean(-1) + (rb * rb).sum(-1).mean(-1)

    def bw(g):
        g = np.asarray(g)[..., None, None]
        ga = gb = None
        if a.requires_grad:
            ga = (2.0 / A) * ra * g
            contrib = -(2.0 / B) * rb * g
            ga = ga + _scatter_rows(contrib, ib, A)
        if b.requires_grad:
            gb = (2.0 / B) * rb * g
            contrib = -(2.0 / A) * ra * g
            gb = gb + _scatter_rows(contrib, ia, B)
        return ga, gb

    return make_result(np.asarray(val, dtype=a.dtype), (a, b), bw, "chamfer")


def one_sided_chamfer(a, b):
    """``mean_a min_b |a-b|^2`` (tensor ``a``, constant or tensor ``b``)."""
    a, b = as_tensor(a), as_tensor(b)
    A = a.shape[-2]
    ia, _ = _nn_pairs(a.data, b.data)
    ra = a.data - np.take_along_axis(b.data, ia[..., None], axis=-2)
    val = (ra * ra).sum(-1).mean(-1)

    def bw(g):
        g = np.asarray(g)[..., None, None]
        ga = (2.0 / A) * ra * g if a.requires_grad else None
        gb = _scatter_rows(-(2.0 / A) * ra * g, ia, b.shape[-2]) if b.requires_grad else None
        return ga, gb

    return make_result(np.asarray(val, dtype=a.dtype), (a, b), bw, "one_sided_chamfer")


def _scatter_rows(values: np.ndarray, idx: np.ndarray, n: int) -> np.ndarray:
    """Sum ``values[..., i, :]`` into row ``idx[..., i]`` of an ``n``-row output."""
    lead = values.shape[:-2]
    out = np.zeros(lead + (n, values.shape[-1]), dtype=values.dtype)
    if not lead:
        np.add.at(out, idx, values)
        return out
    flat_out = out.reshape(-1, n, values.shape[-1])
    flat_val = values.reshape(-1, values.shape[-2], values.shape[-1])
    flat_idx = idx.reshape(-1, idx.shape[-1])
    for k in range(flat_out.shape[0]):
        np.add.at(flat_out[k], flat_idx[k], flat_val[k])
    return out


# -- similarity transforms ----------------------------------------------------

def to_nocs(x, gt: SimTransform) -> np.ndarray:
    """Map camera-frame points into the canonical frame: ``(x - t) @ R / ||s||``."""
    x = np.asarray(x, dtype=np.float64)
    return (x - gt.t.astype(np.float64)) @ gt.R.astype(np.float64) / gt.scale


def umeyama_fit(src, dst):
    """Least-squares similarity ``(c, R, t)`` with ``dst ~ c * src @ R.T + t``.

    ``R`` is returned in the column convention (``dst_i = c R src_i + t``) so
    it compares directly with :attr:`SimTransform.R`.  A reflection in the
    SVD solution is corrected by flipping the smallest singular direction.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ArgumentError(f"umeyama needs matching N x 3 arrays, got {src.shape} and {dst.shape}")
    if len(src) < 3:
        raise ArgumentError("umeyama needs at least 3 correspondences")
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    sv = np.linalg.svd(xs, compute_uv=False)
    if sv[1] <= 1e-12 * max(sv[0], 1e-300):
        raise ArgumentError("degenerate source: centered points have rank < 2")
    n = len(src)
    cov = xd.T @ xs / n
    U, d, Vt = np.linalg.svd(cov)
    S = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2] = -1.0
    R = U @ np.diag(S) @ Vt
    var_s = (xs * xs).sum() / n
    c = float((d * S).sum() / var_s)
    t = mu_d - c * R @ mu_s
    return R, t, c


def axis_angle_matrix(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


def rot_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def random_unit_vector(rng: np.random.Generator) -> np.ndarray:
    while True:
        v = rng.normal(size=3)
        n = np.linalg.norm(v)
        if n > 1e-9:
            return v / n


def random_rotation(max_deg: float, rng: np.random.Generator) -> np.ndarray:
    """Rotation about a uniformly random axis by an angle uniform in [0, max_deg]."""
    if not 0.0 <= max_deg <= 180.0:
        raise ArgumentError(f"max_deg must lie in [0, 180], got {max_deg}")
    axis = random_unit_vector(rng)
    angle = np.deg2rad(rng.uniform(0.0, max_deg)) if max_deg > 0 else 0.0
    return axis_angle_matrix(axis, angle)


def uniform_rotation(rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform rotation from a normalised Gaussian quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def geodesic_deg(R1: np.ndarray, R2: np.ndarray) -> float:
    c = (np.trace(np.asarray(R1, dtype=np.float64).T @ np.asarray(R2, dtype=np.float64)) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))
