"""Compiled row-wise kernels for PReLU and layer norm (forward and backward).

Kernels take 2-D ``(rows, channels)`` arrays.  The fused PReLU + layer-norm
kernel keeps only the per-row mean and inverse standard deviation and
recomputes the normalized activations in the backward pass, which halves the
memory traffic.  Without numba the same arithmetic runs through numpy; the
test suite checks the two paths against each other.
"""

from __future__ import annotations

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None

HAVE_NUMBA = numba is not None


def _np_prelu_fwd(x, slope):
    return np.where(x < 0, x * slope, x)


def _np_prelu_bwd(g, x, slope):
    neg = x < 0
    return np.where(neg, g * slope, g), np.where(neg, g * x, 0).sum(axis=0).astype(x.dtype)


def _np_prelu_ln_fwd(z, slope, gain, shift, eps):
    a = _np_prelu_fwd(z, slope)
    mu = a.mean(axis=1)
    d = a - mu[:, None]
    inv = (1 / np.sqrt((d * d).mean(axis=1) + eps)).astype(z.dtype)
    return d * inv[:, None] * gain + shift, mu, inv


def _np_prelu_ln_bwd(g, z, mu, inv, slope, gain):
    xhat = (_np_prelu_fwd(z, slope) - mu[:, None]) * inv[:, None]
    gxh = g * gain
    ga = inv[:, None] * (gxh - gxh.mean(axis=1, keepdims=True)
                         - xhat * (gxh * xhat).mean(axis=1, keepdims=True))
    gz, gslope = _np_prelu_bwd(ga, z, slope)
    return gz, gslope, (g * xhat).sum(axis=0), g.sum(axis=0)


if HAVE_NUMBA:
    # no nnan/ninf fast-math flags: NaN must propagate so the trainer can detect it
    _jit = numba.njit(cache=True, nogil=True, error_model="numpy",
                      fastmath={"nsz", "arcp", "contract", "afn", "reassoc"})

    @_jit
    def _nb_prelu_fwd(x, slope):
        R, C = x.shape
        out = np.empty_like(x)
        for r in range(R):
            for c in range(C):
                v = x[r, c]
                out[r, c] = v * slope[c] if v < 0 else v
        return out

    @_jit
    def _nb_prelu_bwd(g, x, slope):
        R, C = x.shape
        gx = np.empty_like(x)
        gs = np.zeros(C, dtype=x.dtype)
        for r in range(R):
            for c in range(C):
                v = x[r, c]
                if v < 0:
                    gx[r, c] = g[r, c] * slope[c]
                    gs[c] += g[r, c] * v
                else:
                    gx[r, c] = g[r, c]
        return gx, gs

    @_jit
    def _nb_prelu_ln_fwd(z, slope, gain, shift, eps):
        R, C = z.shape
        out = np.empty_like(z)
        mu_out = np.empty(R, z.dtype)
        inv_out = np.empty(R, z.dtype)
        for r in range(R):
            row = z[r]
            o = out[r]
            s = row[0] * 0
            for c in range(C):
                v = row[c]
                a = v * slope[c] if v < 0 else v
                o[c] = a
                s += a
            mu = s / C
            ss = row[0] * 0
            for c in range(C):
                d = o[c] - mu
                ss += d * d
            iv = 1 / np.sqrt(ss / C + eps)
            mu_out[r] = mu
            inv_out[r] = iv
            for c in range(C):
                o[c] = (o[c] - mu) * iv * gain[c] + shift[c]
        return out, mu_out, inv_out

    @_jit
    def _nb_prelu_ln_bwd(g, z, mu_in, inv_in, slope, gain):
        R, C = g.shape
        gz = np.empty_like(g)
        ggain = np.zeros(C, g.dtype)
        gshift = np.zeros(C, g.dtype)
        gslope = np.zeros(C, g.dtype)
        xh = np.empty(C, g.dtype)
        for r in range(R):
            row = z[r]
            gr = g[r]
            o = gz[r]
            mu = mu_in[r]
            iv = inv_in[r]
            m1 = gr[0] * 0
            m2 = gr[0] * 0
            for c in range(C):
                v = row[c]
                a = v * slope[c] if v < 0 else v
                h = (a - mu) * iv
                xh[c] = h
                gh = gr[c] * gain[c]
                m1 += gh
                m2 += gh * h
                ggain[c] += gr[c] * h
                gshift[c] += gr[c]
            m1 /= C
            m2 /= C
            for c in range(C):
                ga = iv * (gr[c] * gain[c] - m1 - xh[c] * m2)
                v = row[c]
                if v < 0:
                    gslope[c] += ga * v
                    ga *= slope[c]
                o[c] = ga
        return gz, gslope, ggain, gshift

    prelu_fwd, prelu_bwd = _nb_prelu_fwd, _nb_prelu_bwd
    prelu_ln_fwd, prelu_ln_bwd = _nb_prelu_ln_fwd, _nb_prelu_ln_bwd
else:  # pragma: no cover
    prelu_fwd, prelu_bwd = _np_prelu_fwd, _np_prelu_bwd
    prelu_ln_fwd, prelu_ln_bwd = _np_prelu_ln_fwd, _np_prelu_ln_bwd

NUMPY_KERNELS = {
    "prelu_fwd": _np_prelu_fwd, "prelu_bwd": _np_prelu_bwd,
    "prelu_ln_fwd": _np_prelu_ln_fwd, "prelu_ln_bwd": _np_prelu_ln_bwd,
}
