"""A small reverse-mode layer library on numpy arrays.

Every layer is a ``*_forward`` / ``*_backward`` pair. Forward returns the
output and a cache; backward takes the upstream gradient and that cache.
Tensors are laid out as (batch, channels, rows, cols). Gradient
accumulation always runs in a fixed order so results do not depend on
BLAS thread count beyond floating-point reassociation inside matmul.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


# ---------------------------------------------------------------- conv


def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _im2col(x, kh, kw, stride, pad, ho, wo):
    # rows ordered (c, i, j), columns (n, y, x)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    n, c = x.shape[:2]
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo)


def _flat_padded(x, pad):
    """(C, N*Hp*Wp) view of the zero-padded input, channel-major."""
    n, c, hgt, wid = x.shape
    xp = np.zeros((c, n, hgt + 2 * pad, wid + 2 * pad), dtype=x.dtype)
    xp[:, :, pad : pad + hgt, pad : pad + wid] = x.transpose(1, 0, 2, 3)
    return xp.reshape(c, -1), xp.shape


def conv2d_forward(x, w, b=None, stride=1, pad=0):
    """Cross-correlation of ``x`` (N, C, H, W) with ``w`` (F, C, k, k).

    Stride 1 runs as k*k shifted matmuls over the flattened padded input:
    output position p accumulates ``w[:, :, i, j] @ x[:, p + i*Wp + j]``;
    positions that wrap across rows are cropped afterwards.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError("conv2d expects 4-d input and kernel")
    n, c, hgt, wid = x.shape
    f, cw, kh, kw = w.shape
    if cw != c:
        raise ValueError(f"kernel has {cw} input channels, input has {c}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    ho = conv_output_size(hgt, kh, stride, pad)
    wo = conv_output_size(wid, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ValueError("kernel larger than padded input")
    if stride == 1:
        xf, pshape = _flat_padded(x, pad)
        wp = pshape[3]
        span = xf.shape[1] - ((kh - 1) * wp + kw - 1)
        out = np.zeros((f, xf.shape[1]), dtype=np.result_type(x, w))
        acc = out[:, :span]
        # BLAS needs contiguous kernel taps
        wk = np.ascontiguousarray(w.transpose(2, 3, 0, 1))
        for i in range(kh):
            for j in range(kw):
                off = i * wp + j
                acc += wk[i, j] @ xf[:, off : off + span]
        if b is not None:
            out += b[:, None]
        out = out.reshape(f, n, pshape[2], wp)[:, :, :ho, :wo].transpose(1, 0, 2, 3)
        return np.ascontiguousarray(out), ("flat", x.shape, w, xf, pshape, span, ho, wo, pad)
    cols = _im2col(x, kh, kw, stride, pad, ho, wo)
    out = w.reshape(f, -1) @ cols
    if b is not None:
        out += b[:, None]
    out = out.reshape(f, n, ho, wo).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out), ("cols", x.shape, w, cols, stride, pad, ho, wo)


def conv2d_backward(dout, cache):
    """Returns (dx, dw, db)."""
    if cache[0] == "flat":
        _, xshape, w, xf, pshape, span, ho, wo, pad = cache
        n, c, hgt, wid = xshape
        f, _, kh, kw = w.shape
        wp = pshape[3]
        dfull = np.zeros((f, n, pshape[2], wp), dtype=dout.dtype)
        dfull[:, :, :ho, :wo] = dout.transpose(1, 0, 2, 3)
        dflat = dfull.reshape(f, -1)[:, :span]
        db = dout.sum(axis=(0, 2, 3))
        wk = np.ascontiguousarray(w.transpose(2, 3, 0, 1))
        dwk = np.empty_like(wk, dtype=np.result_type(dout, xf))
        dxf = np.zeros_like(xf, dtype=np.result_type(dout, w))
        for i in range(kh):
            for j in range(kw):
                off = i * wp + j
                dwk[i, j] = dflat @ xf[:, off : off + span].T
                dxf[:, off : off + span] += wk[i, j].T @ dflat
        dw = np.ascontiguousarray(dwk.transpose(2, 3, 0, 1))
        dx = dxf.reshape(c, n, pshape[2], wp)[:, :, pad : pad + hgt, pad : pad + wid].transpose(1, 0, 2, 3)
        return np.ascontiguousarray(dx), dw, db
    _, xshape, w, cols, stride, pad, ho, wo = cache
    n, c, hgt, wid = xshape
    f, _, kh, kw = w.shape
    dflat = dout.transpose(1, 0, 2, 3).reshape(f, -1)
    dw = (dflat @ cols.T).reshape(w.shape)
    db = dflat.sum(axis=1)
    dcols = (w.reshape(f, -1).T @ dflat).reshape(c, kh, kw, n, ho, wo)
    dxp = np.zeros((n, c, hgt + 2 * pad, wid + 2 * pad), dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, i, j].transpose(1, 0, 2, 3)
    dx = dxp[:, :, pad : pad + hgt, pad : pad + wid] if pad else dxp
    return np.ascontiguousarray(dx), dw, db


# ---------------------------------------------------------------- elementwise / pooling


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    return dout * mask


def max_pool2d_forward(x):
    """2x2 max pooling with stride 2; odd trailing rows/cols are dropped."""
    n, c, hgt, wid = x.shape
    ho, wo = hgt // 2, wid // 2
    if ho == 0 or wo == 0:
        raise ValueError("input too small for 2x2 pooling")
    blocks = x[:, :, : 2 * ho, : 2 * wo].reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, ho, wo, 4)
    # first maximal element wins, so ties route the gradient deterministically
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx)


def max_pool2d_backward(dout, cache):
    xshape, idx = cache
    n, c, hgt, wid = xshape
    ho, wo = idx.shape[2], idx.shape[3]
    blocks = np.zeros((n, c, ho, wo, 4), dtype=dout.dtype)
    np.put_along_axis(blocks, idx[..., None], dout[..., None], axis=-1)
    blocks = blocks.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
    dx = np.zeros(xshape, dtype=dout.dtype)
    dx[:, :, : 2 * ho, : 2 * wo] = blocks
    return dx


def global_average_pool_forward(x):
    return x.mean(axis=(2, 3)), x.shape


def global_average_pool_backward(dout, xshape):
    n, c, hgt, wid = xshape
    return np.broadcast_to(dout[:, :, None, None] / (hgt * wid), xshape).copy()


def fully_connected_forward(x, w, b=None):
    """``x`` (N, D) times ``w`` (out, D) transposed, plus bias."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ValueError(f"shape mismatch: input {x.shape}, weight {w.shape}")
    out = x @ w.T
    if b is not None:
        out = out + b
    return out, (x, w)


def fully_connected_backward(dout, cache):
    x, w = cache
    return dout @ w, dout.T @ x, dout.sum(axis=0)


def channel_concat_forward(*xs):
    if len({(x.shape[0],) + x.shape[2:] for x in xs}) != 1:
        raise ValueError("channel_concat needs equal batch and spatial dims")
    return np.concatenate(xs, axis=1), [x.shape[1] for x in xs]


def channel_concat_backward(dout, sizes):
    return np.split(dout, np.cumsum(sizes)[:-1], axis=1)


# ---------------------------------------------------------------- RoI-align


def roi_align_weights(feat_hw, roi, spatial_scale, out_size=(7, 7), samples_per_bin=2):
    """Sparse-as-dense bilinear weight matrix of shape (out_h*out_w, H*W).

    ``roi`` is (cx, cy, w, h) in input pixels, where pixel (i, j) covers
    [j, j+1) x [i, i+1). After scaling, sample coordinates are shifted by
    half a cell so they index feature-cell centers. Samples that fall more
    than one cell outside the map contribute zero; the rest are clamped.
    """
    hgt, wid = feat_hw
    ph, pw = out_size
    sr = samples_per_bin
    cx, cy, bw, bh = (float(v) for v in roi)
    if not (bw > 0 and bh > 0):
        raise ValueError(f"RoI must have positive extent, got {roi}")
    x1 = (cx - bw / 2) * spatial_scale - 0.5
    y1 = (cy - bh / 2) * spatial_scale - 0.5
    rw, rh = bw * spatial_scale, bh * spatial_scale
    if x1 + rw < -1 or y1 + rh < -1 or x1 > wid or y1 > hgt:
        raise ValueError(f"RoI {roi} lies outside the feature map")
    bin_w, bin_h = rw / pw, rh / ph
    sub = (np.arange(sr) + 0.5) / sr
    ys = y1 + (np.arange(ph)[:, None] + sub[None, :]) * bin_h  # (ph, sr)
    xs = x1 + (np.arange(pw)[:, None] + sub[None, :]) * bin_w  # (pw, sr)

    def axis_weights(coords, size):
        # coords (P, sr) -> dense (P, sr, size) interpolation weights
        valid = (coords >= -1.0) & (coords <= size)
        c = np.clip(coords, 0.0, size - 1)
        lo = np.floor(c).astype(np.int64)
        hi = np.minimum(lo + 1, size - 1)
        frac = c - lo
        wts = np.zeros(coords.shape + (size,))
        np.add.at(wts, (*np.indices(coords.shape), lo), (1.0 - frac) * valid)
        np.add.at(wts, (*np.indices(coords.shape), hi), frac * valid)
        return wts

    wy = axis_weights(ys, hgt).mean(axis=1)  # (ph, H)
    wx = axis_weights(xs, wid).mean(axis=1)  # (pw, W)
    return np.einsum("ah,bw->abhw", wy, wx).reshape(ph * pw, hgt * wid)


def roi_align_forward(feat, roi, spatial_scale, out_size=(7, 7), samples_per_bin=2):
    """Pool ``feat`` (C, H, W) over one RoI into (C, out_h, out_w)."""
    c, hgt, wid = feat.shape
    m = roi_align_weights((hgt, wid), roi, spatial_scale, out_size, samples_per_bin).astype(feat.dtype)
    out = feat.reshape(c, -1) @ m.T
    return out.reshape(c, *out_size), (m, feat.shape)


def roi_align_backward(dout, cache):
    m, fshape = cache
    c = fshape[0]
    return (dout.reshape(c, -1) @ m).reshape(fshape)


# ---------------------------------------------------------------- optimisation


@dataclass
class SGD:
    """SGD with classical momentum and L2 weight decay folded into the gradient."""

    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0005
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be non-negative")

    def step(self, params: dict, grads: dict) -> dict:
        """Update ``params`` in place and return it."""
        for name in sorted(params):
            w, g = params[name], grads[name]
            if w.shape != g.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {w.shape} for {name}")
            g = g + self.weight_decay * w
            v = self.velocity.get(name)
            v = g if v is None or self.momentum == 0 else self.momentum * v + g
            self.velocity[name] = v
            w -= (self.lr * v).astype(w.dtype, copy=False)
        return params


def sgd_step(params: dict, grads: dict, state: SGD) -> dict:
    return state.step(params, grads)


@dataclass
class PlateauSchedule:
    factor: float = 0.1
    patience: int = 3
    min_delta: float = 1e-4
    best: float = math.inf
    stall: int = 0

    def __post_init__(self):
        if not 0 < self.factor < 1:
            raise ValueError("factor must lie in (0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")

    def update(self, loss: float, lr: float) -> float:
        """Feed one epoch loss; returns the (possibly reduced) learning rate.

        ``best`` is the lowest loss seen so far, so a run of small gains that
        each miss ``min_delta`` keeps counting as a stall.
        """
        if loss < self.best - self.min_delta:
            self.best = loss
            self.stall = 0
            return lr
        self.best = min(self.best, loss)
        self.stall += 1
        if self.stall >= self.patience:
            self.stall = 0
            return lr * self.factor
        return lr


def plateau_update(sched: PlateauSchedule, opt: SGD, epoch_loss: float) -> float:
    if not math.isfinite(epoch_loss):
        raise ValueError("epoch loss is not finite")
    opt.lr = sched.update(epoch_loss, opt.lr)
    return opt.lr


# ---------------------------------------------------------------- verification


def numerical_gradient(f: Callable[[np.ndarray], float], x, step=1e-5):
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in range(x.size):
        orig = x.flat[i]
        x.flat[i] = orig + step
        fp = f(x)
        x.flat[i] = orig - step
        fm = f(x)
        x.flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise ValueError(f"function is not finite near coordinate {i}")
        grad.flat[i] = (fp - fm) / (2 * step)
    return grad


def relative_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))))


def gradcheck(f: Callable[[np.ndarray], float], grad: Callable[[np.ndarray], np.ndarray], x, step=1e-5):
    """Max relative error between ``grad(x)`` and central differences of ``f``."""
    x = np.array(x, dtype=np.float64)
    if not math.isfinite(f(x)):
        raise ValueError("function is not finite at the check point")
    return relative_error(grad(x), numerical_gradient(f, x, step))


# ---------------------------------------------------------------- serialisation

_MAGIC = b"BBRW"
_VERSION = 1


def save_weights(params: dict, path) -> None:
    """Write named float32 arrays in the BBRW container (sections sorted by name)."""
    chunks = [_MAGIC, struct.pack("<II", _VERSION, len(params))]
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_weights(path) -> dict:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path}: not a BBRW weights file")
    version, count = struct.unpack_from("<II", data, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported weights version {version}")
    off = 12
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        params[name] = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape).astype(np.float32)
        off += 4 * size
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes in weights file")
    return params
