"""Hot loops behind the tensor ops.

Every kernel exists twice: a numba ``@njit`` version and a pure-numpy
version.  Both accumulate in the same order, so they agree bit-for-bit.
Set ``SAUNET_NUMBA=0`` before import to force the numpy path.
"""
from __future__ import annotations

import os

import numpy as np

try:
    import numba
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap


def _env_wants_numba() -> bool:
    flag = os.environ.get("SAUNET_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "no", "off")


USE_NUMBA = HAVE_NUMBA and _env_wants_numba()
BACKEND = "numba" if USE_NUMBA else "numpy"


# --------------------------------------------------------------------------
# numpy implementations
# --------------------------------------------------------------------------

def im2col_np(xp, kh, kw, stride, ho, wo):
    """Unfold padded ``xp`` (N,C,Hp,Wp) into columns (N, C*kh*kw, ho*wo)."""
    n, c = xp.shape[:2]
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (N,C,ho,wo,kh,kw) -> (N,C,kh,kw,ho,wo)
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3))
    return cols.reshape(n, c * kh * kw, ho * wo)


def col2im_np(cols, c, hp, wp, kh, kw, stride, ho, wo):
    """Adjoint of :func:`im2col_np`: scatter-add columns back to (N,C,Hp,Wp)."""
    n = cols.shape[0]
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    c6 = cols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += c6[:, :, i, j]
    return out


def maxpool_fwd_np(x, k):
    n, c, h, w = x.shape
    ho, wo = h // k, w // k
    win = x.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    arg = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg.astype(np.int64)


def maxpool_bwd_np(g, arg, k):
    n, c, ho, wo = g.shape
    win = np.zeros((n, c, ho, wo, k * k), dtype=g.dtype)
    np.put_along_axis(win, arg[..., None], g[..., None], axis=-1)
    win = win.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(win.reshape(n, c, ho * k, wo * k))


def _nms_direction(gx, gy):
    # 0: horizontal gradient, 1: 45deg, 2: vertical, 3: 135deg (row axis points down)
    ang = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    d = np.zeros(gx.shape, dtype=np.int64)
    d[(ang >= 22.5) & (ang < 67.5)] = 1
    d[(ang >= 67.5) & (ang < 112.5)] = 2
    d[(ang >= 112.5) & (ang < 157.5)] = 3
    return d


_NMS_OFFSETS = np.array([[0, 1], [1, 1], [1, 0], [1, -1]], dtype=np.int64)


def nms_np(mag, gx, gy):
    """Keep pixels that are local maxima along the gradient direction.

    Ties are broken toward the positive side: a pixel must be ``>=`` its
    negative-side neighbour and ``>`` its positive-side neighbour.
    """
    h, w = mag.shape
    d = _nms_direction(gx, gy)
    padded = np.pad(mag, 1, mode="constant")
    keep = np.zeros((h, w), dtype=bool)
    for code in range(4):
        dy, dx = _NMS_OFFSETS[code]
        pos = padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
        neg = padded[1 - dy : 1 - dy + h, 1 - dx : 1 - dx + w]
        sel = (d == code) & (mag >= neg) & (mag > pos) & (mag > 0)
        keep |= sel
    return np.where(keep, mag, 0.0)


# --------------------------------------------------------------------------
# numba implementations
# --------------------------------------------------------------------------

@njit(cache=True)
def _im2col_nb(xp, kh, kw, stride, ho, wo):
    n, c = xp.shape[0], xp.shape[1]
    cols = np.empty((n, c * kh * kw, ho * wo), dtype=xp.dtype)
    for b in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ch * kh + i) * kw + j
                    for oy in range(ho):
                        iy = oy * stride + i
                        base = oy * wo
                        for ox in range(wo):
                            cols[b, row, base + ox] = xp[b, ch, iy, ox * stride + j]
    return cols


@njit(cache=True)
def _col2im_nb(cols, c, hp, wp, kh, kw, stride, ho, wo):
    n = cols.shape[0]
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    # offset-major order so each output element sums in the same order as col2im_np
    for i in range(kh):
        for j in range(kw):
            for b in range(n):
                for ch in range(c):
                    row = (ch * kh + i) * kw + j
                    for oy in range(ho):
                        iy = oy * stride + i
                        base = oy * wo
                        for ox in range(wo):
                            out[b, ch, iy, ox * stride + j] += cols[b, row, base + ox]
    return out


@njit(cache=True)
def _maxpool_fwd_nb(x, k):
    n, c, h, w = x.shape
    ho, wo = h // k, w // k
    out = np.empty((n, c, ho, wo), dtype=x.dtype)
    arg = np.empty((n, c, ho, wo), dtype=np.int64)
    for b in range(n):
        for ch in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    best = x[b, ch, oy * k, ox * k]
                    bi = 0
                    for i in range(k):
                        for j in range(k):
                            v = x[b, ch, oy * k + i, ox * k + j]
                            if v > best:
                                best = v
                                bi = i * k + j
                    out[b, ch, oy, ox] = best
                    arg[b, ch, oy, ox] = bi
    return out, arg


@njit(cache=True)
def _maxpool_bwd_nb(g, arg, k):
    n, c, ho, wo = g.shape
    out = np.zeros((n, c, ho * k, wo * k), dtype=g.dtype)
    for b in range(n):
        for ch in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    a = arg[b, ch, oy, ox]
                    out[b, ch, oy * k + a // k, ox * k + a % k] = g[b, ch, oy, ox]
    return out


@njit(cache=True)
def _nms_nb(mag, d):
    h, w = mag.shape
    out = np.zeros_like(mag)
    offs = ((0, 1), (1, 1), (1, 0), (1, -1))
    for y in range(h):
        for x in range(w):
            m = mag[y, x]
            if m <= 0:
                continue
            dy, dx = offs[d[y, x]]
            py, px = y + dy, x + dx
            ny, nx = y - dy, x - dx
            pos = mag[py, px] if 0 <= py < h and 0 <= px < w else 0.0
            neg = mag[ny, nx] if 0 <= ny < h and 0 <= nx < w else 0.0
            if m >= neg and m > pos:
                out[y, x] = m
    return out


def nms_nb(mag, gx, gy):
    return _nms_nb(mag, _nms_direction(gx, gy))


# --------------------------------------------------------------------------
# dispatch
# --------------------------------------------------------------------------

NUMPY = {
    "im2col": im2col_np,
    "col2im": col2im_np,
    "maxpool_fwd": maxpool_fwd_np,
    "maxpool_bwd": maxpool_bwd_np,
    "nms": nms_np,
}

NUMBA = {
    "im2col": _im2col_nb,
    "col2im": _col2im_nb,
    "maxpool_fwd": _maxpool_fwd_nb,
    "maxpool_bwd": _maxpool_bwd_nb,
    "nms": nms_nb,
}

_active = NUMBA if USE_NUMBA else NUMPY


def im2col(xp, kh, kw, stride, ho, wo):
    return _active["im2col"](np.ascontiguousarray(xp), kh, kw, stride, ho, wo)


def col2im(cols, c, hp, wp, kh, kw, stride, ho, wo):
    return _active["col2im"](np.ascontiguousarray(cols), c, hp, wp, kh, kw, stride, ho, wo)


def maxpool_fwd(x, k):
    return _active["maxpool_fwd"](np.ascontiguousarray(x), k)


def maxpool_bwd(g, arg, k):
    return _active["maxpool_bwd"](np.ascontiguousarray(g), arg, k)


def nms(mag, gx, gy):
    return _active["nms"](np.ascontiguousarray(mag), gx, gy)
