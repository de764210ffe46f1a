"""Pure numpy implementations of the hot kernels.

Used when the compiled ``_ckernels`` extension is unavailable or when
``MVREC_BACKEND=python`` is set. Every function here has an identical
signature in ``_ckernels.pyx``.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col3d(x, kd, kh, kw, sd, sh, sw):
    """Unfold ``x`` [B, C, D, H, W] into patches [B, Do, Ho, Wo, C*kd*kh*kw]."""
    win = sliding_window_view(x, (kd, kh, kw), axis=(2, 3, 4))
    win = win[:, :, ::sd, ::sh, ::sw]
    b, c, do, ho, wo = win.shape[:5]
    cols = win.transpose(0, 2, 3, 4, 1, 5, 6, 7)
    return np.ascontiguousarray(cols).reshape(b, do, ho, wo, c * kd * kh * kw)


def col2im3d(cols, c, d, h, w, kd, kh, kw, sd, sh, sw):
    """Adjoint of :func:`im2col3d`: scatter-add patches back to [B, C, D, H, W]."""
    b, do, ho, wo, _ = cols.shape
    out = np.zeros((b, c, d, h, w))
    cr = cols.reshape(b, do, ho, wo, c, kd, kh, kw).transpose(0, 4, 1, 2, 3, 5, 6, 7)
    for a in range(kd):
        for bb in range(kh):
            for cc in range(kw):
                out[:, :, a:a + sd * do:sd, bb:bb + sh * ho:sh, cc:cc + sw * wo:sw] += \
                    cr[..., a, bb, cc]
    return out


def maxpool3d_forward(x, wd, wh, ww, sd, sh, sw):
    """Windowed max over [B, C, D, H, W].

    Returns the pooled values and, per output cell, the flat index
    ``d*H*W + h*W + w`` of the first maximal input in row-major order.
    """
    b, c, d, h, w = x.shape
    win = sliding_window_view(x, (wd, wh, ww), axis=(2, 3, 4))[:, :, ::sd, ::sh, ::sw]
    do, ho, wo = win.shape[2:5]
    flat = win.reshape(b, c, do, ho, wo, wd * wh * ww)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    od, rem = np.divmod(arg, wh * ww)
    oh, ow = np.divmod(rem, ww)
    base_d = (np.arange(do) * sd)[:, None, None]
    base_h = (np.arange(ho) * sh)[None, :, None]
    base_w = (np.arange(wo) * sw)[None, None, :]
    idx = (base_d + od) * (h * w) + (base_h + oh) * w + (base_w + ow)
    return np.ascontiguousarray(out), idx.astype(np.int64)


def maxpool3d_backward(grad_out, argmax, d, h, w):
    b, c = grad_out.shape[:2]
    vol = d * h * w
    offs = (np.arange(b * c, dtype=np.int64) * vol).reshape(b, c, 1, 1, 1)
    flat = np.bincount((argmax + offs).ravel(), weights=grad_out.ravel(),
                       minlength=b * c * vol)
    return flat.reshape(b, c, d, h, w)


def eals_update(P, Q, indptr, indices, pos, pred, w_obs, c0, lam):
    """One element-wise ALS pass over every row of ``P`` with ``Q`` fixed.

    ``indptr``/``indices`` give the observed columns of each row of ``P``;
    ``pos`` maps each of those entries to its slot in ``pred``, the cache of
    current predictions on observed cells. ``P`` and ``pred`` are updated in
    place.
    """
    n_rows, k = P.shape
    counts = np.diff(indptr)
    rows = np.repeat(np.arange(n_rows), counts)
    G = Q.T @ Q
    qcols = Q[indices]
    for f in range(k):
        qf = qcols[:, f]
        pu = P[rows, f]
        rest = pred[pos] - pu * qf
        num = np.bincount(rows, weights=(w_obs * (1.0 - rest) + c0 * rest) * qf,
                          minlength=n_rows)
        num -= c0 * (P @ G[:, f] - P[:, f] * G[f, f])
        den = c0 * G[f, f] + lam + np.bincount(rows, weights=(w_obs - c0) * qf * qf,
                                               minlength=n_rows)
        old = P[:, f].copy()
        new = np.where(den > 0.0, num / np.where(den > 0.0, den, 1.0), old)
        pred[pos] += (new[rows] - pu) * qf
        P[:, f] = new
