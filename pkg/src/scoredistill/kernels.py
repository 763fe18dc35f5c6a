"""Hot numeric kernels, each with a numba and a numpy implementation.

The public wrappers dispatch on :data:`scoredistill._accel.USE_NUMBA`.
"""

from __future__ import annotations

import math

import numpy as np

from . import _accel
from ._accel import njit

# --------------------------------------------------------------------------
# Gaussian-mixture posterior mean of clean data given x_t


def _mixture_x0_numpy(x, modes, logw, sigma, ab):
    var = ab * sigma * sigma + 1.0 - ab
    sa = math.sqrt(ab)
    d = x[:, None, :] - sa * modes[None, :, :]                      # (B, M, D)
    logits = logw[None, :] - np.sum(d * d, axis=2) / (2.0 * var)
    logits -= logits.max(axis=1, keepdims=True)
    r = np.exp(logits)
    r /= r.sum(axis=1, keepdims=True)
    post = modes[None, :, :] + (sigma * sigma * sa / var) * d
    return np.einsum("bm,bmd->bd", r, post)


@njit(cache=True)
def _mixture_x0_numba(x, modes, logw, sigma, ab):
    B, D = x.shape
    M = modes.shape[0]
    var = ab * sigma * sigma + 1.0 - ab
    sa = math.sqrt(ab)
    k = sigma * sigma * sa / var
    out = np.zeros((B, D))
    logits = np.empty(M)
    for b in range(B):
        best = -np.inf
        for m in range(M):
            s = 0.0
            for j in range(D):
                dj = x[b, j] - sa * modes[m, j]
                s += dj * dj
            logits[m] = logw[m] - s / (2.0 * var)
            if logits[m] > best:
                best = logits[m]
        z = 0.0
        for m in range(M):
            logits[m] = math.exp(logits[m] - best)
            z += logits[m]
        for m in range(M):
            r = logits[m] / z
            for j in range(D):
                out[b, j] += r * (modes[m, j] + k * (x[b, j] - sa * modes[m, j]))
    return out


def mixture_posterior_x0(x, modes, weights, sigma: float, alpha_bar: float) -> np.ndarray:
    """E[x_0 | x_t] for an isotropic Gaussian mixture; ``x`` is (B, D)."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    modes = np.ascontiguousarray(modes, dtype=np.float64)
    logw = np.log(np.asarray(weights, dtype=np.float64))
    if _accel.USE_NUMBA:
        return _mixture_x0_numba(x, modes, logw, float(sigma), float(alpha_bar))
    return _mixture_x0_numpy(x, modes, logw, float(sigma), float(alpha_bar))


# --------------------------------------------------------------------------
# Voxel alpha compositing along precomputed rays
#
# idx/wts: (R, S, 8) trilinear corner indices and weights of each sample,
# valid: (R, S) whether the sample lies inside the volume. Density logits
# are (V,), colour logits (V, 3). sigma = dscale * softplus(a), colour =
# sigmoid(b), alpha = 1 - exp(-sigma * delta); white-or-given background.


def _softplus(a):
    return np.logaddexp(0.0, a)


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _voxel_samples_numpy(idx, wts, valid, dens, col, dscale, delta):
    a = np.sum(wts * dens[idx], axis=-1)
    b = np.sum(wts[..., None] * col[idx], axis=-2)
    sigma = np.where(valid, dscale * _softplus(a), 0.0)
    alpha = -np.expm1(-sigma * delta)
    trans = np.cumprod(1.0 - alpha, axis=1)
    T_before = np.concatenate([np.ones_like(trans[:, :1]), trans[:, :-1]], axis=1)
    return a, _sigmoid(b), alpha, T_before, trans[:, -1]


def _voxel_forward_numpy(idx, wts, valid, dens, col, dscale, delta, bg, depth_z, far):
    _, c, alpha, T, T_end = _voxel_samples_numpy(idx, wts, valid, dens, col, dscale, delta)
    w = T * alpha
    img = np.einsum("rs,rsc->rc", w, c) + T_end[:, None] * bg[None, :]
    depth = w @ depth_z + T_end * far
    return img, depth


def _voxel_backward_numpy(idx, wts, valid, dens, col, dscale, delta, bg, cot):
    a, c, alpha, T, T_end = _voxel_samples_numpy(idx, wts, valid, dens, col, dscale, delta)
    w = T * alpha
    chat = np.einsum("rsc,rc->rs", c, cot)
    contrib = w * chat
    # light arriving from behind each sample: later samples plus background
    behind = np.cumsum(contrib[:, ::-1], axis=1)[:, ::-1] - contrib + (T_end * (cot @ bg))[:, None]
    T_after = T * (1.0 - alpha)
    d_sigma = delta * (T_after * chat - behind)
    d_a = np.where(valid, d_sigma * dscale * _sigmoid(a), 0.0)
    d_b = w[..., None] * cot[:, None, :] * c * (1.0 - c)
    V = dens.shape[0]
    flat = idx.reshape(-1)
    g_dens = np.bincount(flat, weights=(wts * d_a[..., None]).reshape(-1), minlength=V)
    g_col = np.empty((V, 3))
    for ch in range(3):
        g_col[:, ch] = np.bincount(flat, weights=(wts * d_b[..., ch, None]).reshape(-1), minlength=V)
    return g_dens, g_col


@njit(cache=True)
def _voxel_forward_numba(idx, wts, valid, dens, col, dscale, delta, bg, depth_z, far):
    R, S, _ = idx.shape
    img = np.empty((R, 3))
    depth = np.empty(R)
    for r in range(R):
        T = 1.0
        acc0 = 0.0
        acc1 = 0.0
        acc2 = 0.0
        dacc = 0.0
        for s in range(S):
            if not valid[r, s]:
                continue
            a = 0.0
            b0 = 0.0
            b1 = 0.0
            b2 = 0.0
            for k in range(8):
                j = idx[r, s, k]
                wk = wts[r, s, k]
                a += wk * dens[j]
                b0 += wk * col[j, 0]
                b1 += wk * col[j, 1]
                b2 += wk * col[j, 2]
            sp = max(a, 0.0) + math.log1p(math.exp(-abs(a)))
            alpha = -math.expm1(-dscale * sp * delta)
            w = T * alpha
            acc0 += w / (1.0 + math.exp(-b0))
            acc1 += w / (1.0 + math.exp(-b1))
            acc2 += w / (1.0 + math.exp(-b2))
            dacc += w * depth_z[s]
            T *= 1.0 - alpha
        img[r, 0] = acc0 + T * bg[0]
        img[r, 1] = acc1 + T * bg[1]
        img[r, 2] = acc2 + T * bg[2]
        depth[r] = dacc + T * far
    return img, depth


@njit(cache=True)
def _voxel_backward_numba(idx, wts, valid, dens, col, dscale, delta, bg, cot):
    R, S, _ = idx.shape
    V = dens.shape[0]
    g_dens = np.zeros(V)
    g_col = np.zeros((V, 3))
    a_s = np.empty(S)
    c_s = np.empty((S, 3))
    alpha_s = np.empty(S)
    T_s = np.empty(S)
    for r in range(R):
        T = 1.0
        for s in range(S):
            alpha_s[s] = 0.0
            T_s[s] = T
            if not valid[r, s]:
                continue
            a = 0.0
            b0 = 0.0
            b1 = 0.0
            b2 = 0.0
            for k in range(8):
                j = idx[r, s, k]
                wk = wts[r, s, k]
                a += wk * dens[j]
                b0 += wk * col[j, 0]
                b1 += wk * col[j, 1]
                b2 += wk * col[j, 2]
            a_s[s] = a
            c_s[s, 0] = 1.0 / (1.0 + math.exp(-b0))
            c_s[s, 1] = 1.0 / (1.0 + math.exp(-b1))
            c_s[s, 2] = 1.0 / (1.0 + math.exp(-b2))
            sp = max(a, 0.0) + math.log1p(math.exp(-abs(a)))
            alpha_s[s] = -math.expm1(-dscale * sp * delta)
            T *= 1.0 - alpha_s[s]
        behind = T * (cot[r, 0] * bg[0] + cot[r, 1] * bg[1] + cot[r, 2] * bg[2])
        for s in range(S - 1, -1, -1):
            if not valid[r, s]:
                continue
            chat = c_s[s, 0] * cot[r, 0] + c_s[s, 1] * cot[r, 1] + c_s[s, 2] * cot[r, 2]
            w = T_s[s] * alpha_s[s]
            d_sigma = delta * (T_s[s] * (1.0 - alpha_s[s]) * chat - behind)
            behind += w * chat
            d_a = d_sigma * dscale / (1.0 + math.exp(-a_s[s]))
            for k in range(8):
                j = idx[r, s, k]
                wk = wts[r, s, k]
                g_dens[j] += wk * d_a
                for ch in range(3):
                    cc = c_s[s, ch]
                    g_col[j, ch] += wk * w * cot[r, ch] * cc * (1.0 - cc)
    return g_dens, g_col


def voxel_forward(idx, wts, valid, dens, col, dscale: float, delta: float, bg, depth_z, far: float):
    """Composited colour ``(R, 3)`` and expected ray depth ``(R,)``."""
    args = (idx, wts, valid, np.ascontiguousarray(dens, dtype=np.float64),
            np.ascontiguousarray(col, dtype=np.float64), float(dscale), float(delta),
            np.asarray(bg, dtype=np.float64), np.asarray(depth_z, dtype=np.float64), float(far))
    if _accel.USE_NUMBA:
        return _voxel_forward_numba(*args)
    return _voxel_forward_numpy(*args)


def voxel_backward(idx, wts, valid, dens, col, dscale: float, delta: float, bg, cot):
    """Gradients of ``sum(cot * image)`` w.r.t. density ``(V,)`` and colour ``(V, 3)`` logits."""
    args = (idx, wts, valid, np.ascontiguousarray(dens, dtype=np.float64),
            np.ascontiguousarray(col, dtype=np.float64), float(dscale), float(delta),
            np.asarray(bg, dtype=np.float64), np.ascontiguousarray(cot, dtype=np.float64))
    if _accel.USE_NUMBA:
        return _voxel_backward_numba(*args)
    return _voxel_backward_numpy(*args)
