"""Selective state-space scan (Mamba-style) with a hand-written backward pass.

Recurrence, per channel ``i`` and state ``j``::

    h[t] = exp(delta[t, i] * A[i, j]) * h[t-1] + delta[t, i] * B[t, j] * u[t, i]
    y[t, i] = sum_j C[t, j] * h[t, i, j] + D[i] * u[t, i]

``A = -exp(A_log)`` keeps every decay factor in (0, 1).  The time loop runs in
a numba kernel when numba is importable and in a numpy loop (vectorised over
batch, channel and state) otherwise.
"""

from __future__ import annotations

import numpy as np

from inklpose.errors import ArgumentError, ShapeError
from inklpose.substrate import functional as F
from inklpose.substrate.tensor import Tensor, add_flops, make_result

try:  # pragma: no cover - exercised implicitly
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    _HAVE_NUMBA = False

_USE_NUMBA = _HAVE_NUMBA


def set_backend(name: str) -> None:
    """Select ``"numba"`` or ``"numpy"`` for the scan time loop."""
    global _USE_NUMBA
    if name == "numba":
        if not _HAVE_NUMBA:
            raise ArgumentError("numba is not installed")
        _USE_NUMBA = True
    elif name == "numpy":
        _USE_NUMBA = False
    else:
        raise ArgumentError(f"unknown scan backend {name!r}")


def backend() -> str:
    return "numba" if _USE_NUMBA else "numpy"


# -- numpy kernels ----------------------------------------------------------
# Internal layout: decay factors and states are stored as [batch, L, n, d] so
# that the innermost loop runs over the (long, contiguous) channel axis.

def _fwd_numpy(u, delta, dA, B, C):
    bsz, L, d = u.shape
    n = B.shape[-1]
    h = np.zeros((bsz, n, d), dtype=u.dtype)
    hs = np.empty((bsz, L, n, d), dtype=u.dtype)
    y = np.empty((bsz, L, d), dtype=u.dtype)
    du = delta * u
    for t in range(L):
        h = dA[:, t] * h + B[:, t, :, None] * du[:, t, None, :]
        hs[:, t] = h
        y[:, t] = np.einsum("bji,bj->bi", h, C[:, t])
    return y, hs


def _bwd_numpy(gy, u, delta, At, dA, B, C, hs):
    bsz, L, d = u.shape
    n = B.shape[-1]
    gh = np.zeros((bsz, n, d), dtype=u.dtype)
    gdA = np.zeros_like(hs)
    gdu = np.empty_like(u)
    gB = np.empty_like(B)
    gC = np.einsum("btji,bti->btj", hs, gy)
    du = delta * u
    for t in range(L - 1, -1, -1):
        gh = gh + C[:, t, :, None] * gy[:, t, None, :]
        if t > 0:
            gdA[:, t] = gh * hs[:, t - 1]
        gdu[:, t] = np.einsum("bji,bj->bi", gh, B[:, t])
        gB[:, t] = np.einsum("bji,bi->bj", gh, du[:, t])
        gh = gh * dA[:, t]
    t_dA = gdA * dA
    gdelta = np.einsum("btji,ji->bti", t_dA, At) + gdu * u
    gAt = np.einsum("btji,bti->ji", t_dA, delta)
    return gdelta, gdu * delta, gAt, gB, gC


# -- numba kernels ----------------------------------------------------------

if _HAVE_NUMBA:
    # reassociation lets the channel loops vectorise; results stay deterministic
    _FAST = {"nsz", "arcp", "contract", "reassoc"}

    @numba.njit(cache=True, fastmath=_FAST)
    def _decay_arg_numba(delta, At):  # pragma: no cover - compiled
        bsz, L, d = delta.shape
        n = At.shape[0]
        out = np.empty((bsz, L, n, d), dtype=delta.dtype)
        for b in range(bsz):
            for t in range(L):
                for j in range(n):
                    for i in range(d):
                        out[b, t, j, i] = delta[b, t, i] * At[j, i]
        return out

    @numba.njit(cache=True, fastmath=_FAST)
    def _fwd_numba(u, delta, dA, B, C):  # pragma: no cover - compiled
        bsz, L, d = u.shape
        n = B.shape[2]
        hs = np.empty((bsz, L, n, d), dtype=u.dtype)
        y = np.zeros((bsz, L, d), dtype=u.dtype)
        du = np.empty(d, dtype=u.dtype)
        for b in range(bsz):
            for t in range(L):
                for i in range(d):
                    du[i] = delta[b, t, i] * u[b, t, i]
                for j in range(n):
                    bj = B[b, t, j]
                    cj = C[b, t, j]
                    if t == 0:
                        for i in range(d):
                            hv = du[i] * bj
                            hs[b, t, j, i] = hv
                            y[b, t, i] += cj * hv
                    else:
                        for i in range(d):
                            hv = dA[b, t, j, i] * hs[b, t - 1, j, i] + du[i] * bj
                            hs[b, t, j, i] = hv
                            y[b, t, i] += cj * hv
        return y, hs

    @numba.njit(cache=True, fastmath=_FAST)
    def _bwd_numba(gy, u, delta, At, dA, B, C, hs):  # pragma: no cover - compiled
        bsz, L, d = u.shape
        n = B.shape[2]
        gdelta = np.zeros_like(u)
        gu = np.zeros_like(u)
        gAt = np.zeros_like(At)
        gB = np.zeros_like(B)
        gC = np.zeros_like(C)
        gh = np.zeros((n, d), dtype=u.dtype)
        gdu = np.empty(d, dtype=u.dtype)
        gdt = np.empty(d, dtype=u.dtype)
        du = np.empty(d, dtype=u.dtype)
        for b in range(bsz):
            gh[:, :] = 0.0
            for t in range(L - 1, -1, -1):
                for i in range(d):
                    du[i] = delta[b, t, i] * u[b, t, i]
                    gdu[i] = 0.0
                    gdt[i] = 0.0
                for j in range(n):
                    bj = B[b, t, j]
                    cj = C[b, t, j]
                    acc_b = u.dtype.type(0.0)
                    acc_c = u.dtype.type(0.0)
                    for i in range(d):
                        gyi = gy[b, t, i]
                        g = gh[j, i] + gyi * cj
                        acc_c += gyi * hs[b, t, j, i]
                        acc_b += g * du[i]
                        gdu[i] += g * bj
                        gh[j, i] = g * dA[b, t, j, i]
                    if t > 0:
                        for i in range(d):
                            # gh now holds g * dA, i.e. the gradient through exp(delta * A)
                            gda = gh[j, i] * hs[b, t - 1, j, i]
                            gdt[i] += gda * At[j, i]
                            gAt[j, i] += gda * delta[b, t, i]
                    gB[b, t, j] = acc_b
                    gC[b, t, j] = acc_c
                for i in range(d):
                    gdelta[b, t, i] = gdt[i] + gdu[i] * u[b, t, i]
                    gu[b, t, i] = gdu[i] * delta[b, t, i]
        return gdelta, gu, gAt, gB, gC


def _decay(delta, At):
    if _USE_NUMBA:
        arg = _decay_arg_numba(delta, At)
    else:
        arg = delta[:, :, None, :] * At
    return np.exp(arg, out=arg)


def _fwd(u, delta, dA, B, C):
    if _USE_NUMBA:
        return _fwd_numba(u, delta, dA, B, C)
    return _fwd_numpy(u, delta, dA, B, C)


def _bwd(gy, u, delta, At, dA, B, C, hs):
    if _USE_NUMBA:
        return _bwd_numba(gy, u, delta, At, dA, B, C, hs)
    return _bwd_numpy(gy, u, delta, At, dA, B, C, hs)


def scan_core(u: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor, D: Tensor) -> Tensor:
    """Differentiable selective scan.

    Shapes: ``u``, ``delta`` [L, d] or [batch, L, d]; ``A`` [d, n];
    ``B``, ``C`` [L, n] or [batch, L, n]; ``D`` [d].
    """
    squeeze = u.ndim == 2
    if u.ndim not in (2, 3):
        raise ShapeError(f"scan input must be [L, d] or [batch, L, d], got {u.shape}")
    if u.shape[-2] == 0:
        raise ArgumentError("selective scan over an empty sequence")
    d = u.shape[-1]
    n = A.shape[-1]
    if delta.shape != u.shape or A.shape != (d, n) or D.shape != (d,):
        raise ShapeError(f"scan shapes inconsistent: u {u.shape}, delta {delta.shape}, A {A.shape}, D {D.shape}")
    if B.shape != u.shape[:-1] + (n,) or C.shape != B.shape:
        raise ShapeError(f"scan B/C shapes {B.shape}/{C.shape} do not match u {u.shape} and n={n}")

    def lift(x):
        return x[None] if squeeze else x

    uu, dd, bb, cc = (np.ascontiguousarray(lift(t.data)) for t in (u, delta, B, C))
    at = np.ascontiguousarray(A.data.T)
    dA = _decay(dd, at)
    y, hs = _fwd(uu, dd, dA, bb, cc)
    y = y + D.data * uu
    bsz, L, _ = uu.shape
    add_flops("scan", 7 * bsz * L * d * n + 2 * bsz * L * d)

    def bw(g):
        g = np.ascontiguousarray(lift(g))
        g_delta, g_u, g_At, gB, gC = _bwd(g, uu, dd, at, dA, bb, cc, hs)
        g_A = np.ascontiguousarray(g_At.T)
        g_u = g_u + g * D.data
        g_D = (g * uu).sum(axis=(0, 1))
        if squeeze:
            g_u, g_delta, gB, gC = g_u[0], g_delta[0], gB[0], gC[0]
        return g_u, g_delta, g_A, gB, gC, g_D

    out = y[0] if squeeze else y
    return make_result(out, (u, delta, A, B, C, D), bw, "selective_scan")


def selective_scan(u: Tensor, params: dict) -> Tensor:
    """Input-dependent scan: derives delta, B, C from ``u`` and runs :func:`scan_core`.

    ``params`` holds ``A_log`` [d, n], ``w_dt``/``b_dt`` (d -> d),
    ``w_B``/``b_B`` and ``w_C``/``b_C`` (d -> n), and ``D`` [d].
    """
    if u.shape[-2] == 0:
        raise ArgumentError("selective scan over an empty sequence")
    delta = F.softplus(F.linear(u, params["w_dt"], params["b_dt"]))
    Bm = F.linear(u, params["w_B"], params["b_B"])
    Cm = F.linear(u, params["w_C"], params["b_C"])
    A = F.mul(F.exp(params["A_log"]), -1.0)
    return scan_core(u, delta, A, Bm, Cm, params["D"])
