"""Optional numba-fused elementwise kernels for the training hot path.

Everything here has an exact numpy fallback in autograd.py; these kernels
only cut temporary-array traffic on the single-core training box.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is an optional speedup
    HAVE_NUMBA = False

    def njit(*a, **k):
        def deco(f):
            return f
        return deco


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_K = 0.044715


@njit(cache=True, fastmath=True)
def gelu_inner(x, t):
    """t <- C*(x + K*x^3), elementwise (tanh applied by the caller)."""
    xf = x.ravel()
    tf = t.ravel()
    for i in range(xf.size):
        xv = xf[i]
        tf[i] = _GELU_C * (xv + _GELU_K * xv * xv * xv)


@njit(cache=True, fastmath=True)
def gelu_combine(x, t, y):
    """y <- 0.5*x*(1+t) where t = tanh(inner)."""
    xf = x.ravel()
    tf = t.ravel()
    yf = y.ravel()
    for i in range(xf.size):
        yf[i] = 0.5 * xf[i] * (1.0 + tf[i])


@njit(cache=True, fastmath=True)
def gelu_backward(x, t, g, out):
    xf = x.ravel()
    tf = t.ravel()
    gf = g.ravel()
    of = out.ravel()
    for i in range(xf.size):
        xv = xf[i]
        tv = tf[i]
        du = _GELU_C * (1.0 + 3.0 * _GELU_K * xv * xv)
        of[i] = gf[i] * (0.5 * (1.0 + tv) + 0.5 * xv * (1.0 - tv * tv) * du)


@njit(cache=True, fastmath=True)
def layernorm_forward(x, gamma, beta, eps, out, xhat, inv):
    """Row-wise normalization over the last axis of a 2-D view."""
    rows, n = x.shape
    for r in range(rows):
        mu = 0.0
        for j in range(n):
            mu += x[r, j]
        mu /= n
        var = 0.0
        for j in range(n):
            d = x[r, j] - mu
            var += d * d
        var /= n
        iv = 1.0 / np.sqrt(var + eps)
        inv[r] = iv
        for j in range(n):
            xh = (x[r, j] - mu) * iv
            xhat[r, j] = xh
            out[r, j] = xh * gamma[j] + beta[j]


@njit(cache=True, fastmath=True)
def layernorm_backward(g, gamma, xhat, inv, gx_out, ggamma, gbeta):
    rows, n = g.shape
    for j in range(n):
        ggamma[j] = 0.0
        gbeta[j] = 0.0
    for r in range(rows):
        s1 = 0.0
        s2 = 0.0
        for j in range(n):
            gv = g[r, j]
            xh = xhat[r, j]
            ggamma[j] += gv * xh
            gbeta[j] += gv
            gx = gv * gamma[j]
            s1 += gx
            s2 += gx * xh
        s1 /= n
        s2 /= n
        iv = inv[r]
        for j in range(n):
            gx_out[r, j] = iv * (g[r, j] * gamma[j] - s1 - xhat[r, j] * s2)
