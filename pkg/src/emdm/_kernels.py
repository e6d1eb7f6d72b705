"""Hot numeric kernels: numba-jitted with a pure-numpy fallback.

The jitted path is used whenever numba imports cleanly; set EMDM_NO_NUMBA=1
to force the numpy implementations (useful for debugging and for the
backend comparison in benchmarks/kernel_bench.py). Within one backend all
kernels are serial and bit-deterministic; the two backends may differ in
the last float bits because summation order differs.
"""

import os

import numpy as np

_FORCE_NUMPY = os.environ.get("EMDM_NO_NUMBA", "").strip().lower() in {"1", "true", "yes"}

try:
    if _FORCE_NUMPY:
        raise ImportError("numba disabled via EMDM_NO_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False


# --- conv2d, stride 1, zero "same" padding, odd square kernels --------------
#
# Three bilinear contractions that are closed under differentiation:
#   fwd   (x, k)  -> y        y[b,o,i,j] = sum_{c,u,v} x[b,c,i+u-p,j+v-p] k[o,c,u,v]
#   igrad (g, k)  -> gx       adjoint of fwd in x
#   kgrad (x, g)  -> gk       adjoint of fwd in k


def _conv2d_fwd_np(x, k):
    kh, kw = k.shape[2], k.shape[3]
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return np.einsum("bcijuv,ocuv->boij", win, k, optimize=True)


def _conv2d_igrad_np(g, k):
    # adjoint = same-padded conv with the spatially flipped, channel-swapped kernel
    kt = np.ascontiguousarray(np.flip(k, axis=(2, 3)).transpose(1, 0, 2, 3))
    return _conv2d_fwd_np(g, kt)


def _conv2d_kgrad_np(x, g, kh, kw):
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return np.einsum("boij,bcijuv->ocuv", g, win, optimize=True)


def _conv2d_fwd_loops(x, k):
    b, ci, h, w = x.shape
    co, _, kh, kw = k.shape
    ph, pw = kh // 2, kw // 2
    out = np.zeros((b, co, h, w))
    for n in range(b):
        for o in range(co):
            for i in range(h):
                for j in range(w):
                    acc = 0.0
                    for c in range(ci):
                        for u in range(kh):
                            ii = i + u - ph
                            if ii < 0 or ii >= h:
                                continue
                            for v in range(kw):
                                jj = j + v - pw
                                if 0 <= jj < w:
                                    acc += x[n, c, ii, jj] * k[o, c, u, v]
                    out[n, o, i, j] = acc
    return out


def _conv2d_igrad_loops(g, k):
    b, co, h, w = g.shape
    ci = k.shape[1]
    kh, kw = k.shape[2], k.shape[3]
    ph, pw = kh // 2, kw // 2
    out = np.zeros((b, ci, h, w))
    for n in range(b):
        for c in range(ci):
            for i in range(h):
                for j in range(w):
                    acc = 0.0
                    for o in range(co):
                        for u in range(kh):
                            ii = i - u + ph
                            if ii < 0 or ii >= h:
                                continue
                            for v in range(kw):
                                jj = j - v + pw
                                if 0 <= jj < w:
                                    acc += g[n, o, ii, jj] * k[o, c, u, v]
                    out[n, c, i, j] = acc
    return out


def _conv2d_kgrad_loops(x, g, kh, kw):
    b, ci, h, w = x.shape
    co = g.shape[1]
    ph, pw = kh // 2, kw // 2
    out = np.zeros((co, ci, kh, kw))
    for o in range(co):
        for c in range(ci):
            for u in range(kh):
                for v in range(kw):
                    acc = 0.0
                    for n in range(b):
                        for i in range(h):
                            ii = i + u - ph
                            if ii < 0 or ii >= h:
                                continue
                            for j in range(w):
                                jj = j + v - pw
                                if 0 <= jj < w:
                                    acc += g[n, o, i, j] * x[n, c, ii, jj]
                    out[o, c, u, v] = acc
    return out


# --- cyclic Jacobi sweeps for symmetric eigendecomposition ------------------
#
# One source, compiled for both backends: in-place rotations on (a, v);
# returns the number of sweeps used, or -1 if the off-diagonal Frobenius
# norm is still above tol after max_sweeps.


def _jacobi_sweeps_impl(a, v, tol, max_sweeps):
    n = a.shape[0]
    for sweep in range(max_sweeps):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                off += a[p, q] * a[p, q]
        if np.sqrt(2.0 * off) <= tol:
            return sweep
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                phi = 0.5 * np.arctan2(2.0 * apq, a[q, q] - a[p, p])
                c = np.cos(phi)
                s = np.sin(phi)
                for j in range(n):
                    apj = a[p, j]
                    aqj = a[q, j]
                    a[p, j] = c * apj - s * aqj
                    a[q, j] = s * apj + c * aqj
                for i in range(n):
                    aip = a[i, p]
                    aiq = a[i, q]
                    a[i, p] = c * aip - s * aiq
                    a[i, q] = s * aip + c * aiq
                a[p, q] = 0.0
                a[q, p] = 0.0
                for i in range(n):
                    vip = v[i, p]
                    viq = v[i, q]
                    v[i, p] = c * vip - s * viq
                    v[i, q] = s * vip + c * viq
    off = 0.0
    for p in range(n - 1):
        for q in range(p + 1, n):
            off += a[p, q] * a[p, q]
    if np.sqrt(2.0 * off) <= tol:
        return max_sweeps
    return -1


IMPLEMENTATIONS = {
    "numpy": {
        "conv2d_fwd": _conv2d_fwd_np,
        "conv2d_igrad": _conv2d_igrad_np,
        "conv2d_kgrad": _conv2d_kgrad_np,
        "jacobi_sweeps": _jacobi_sweeps_impl,
    }
}

if HAVE_NUMBA:
    _jit = njit(cache=True, nogil=True)
    IMPLEMENTATIONS["numba"] = {
        "conv2d_fwd": _jit(_conv2d_fwd_loops),
        "conv2d_igrad": _jit(_conv2d_igrad_loops),
        "conv2d_kgrad": _jit(_conv2d_kgrad_loops),
        "jacobi_sweeps": _jit(_jacobi_sweeps_impl),
    }
    BACKEND = "numba"
else:
    BACKEND = "numpy"

# The jitted loops win only for near-single-item inputs (the sampler's
# regime); batched training convs are BLAS-bound and the einsum path is
# several times faster there. The active backend dispatches on batch size;
# the pure variants stay exposed for benchmarks/kernel_bench.py.
_CONV_BATCH_CUTOFF = 2

if HAVE_NUMBA:
    _nb = IMPLEMENTATIONS["numba"]

    def conv2d_fwd(x, k):
        if x.shape[0] <= _CONV_BATCH_CUTOFF:
            return _nb["conv2d_fwd"](x, k)
        return _conv2d_fwd_np(x, k)

    def conv2d_igrad(g, k):
        if g.shape[0] <= _CONV_BATCH_CUTOFF:
            return _nb["conv2d_igrad"](g, k)
        return _conv2d_igrad_np(g, k)

    def conv2d_kgrad(x, g, kh, kw):
        if x.shape[0] <= _CONV_BATCH_CUTOFF:
            return _nb["conv2d_kgrad"](x, g, kh, kw)
        return _conv2d_kgrad_np(x, g, kh, kw)

    jacobi_sweeps = _nb["jacobi_sweeps"]
else:
    conv2d_fwd = _conv2d_fwd_np
    conv2d_igrad = _conv2d_igrad_np
    conv2d_kgrad = _conv2d_kgrad_np
    jacobi_sweeps = _jacobi_sweeps_impl
