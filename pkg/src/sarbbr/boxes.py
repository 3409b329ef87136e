"""Center-parameterised boxes, delta coding, IoU and the CIoU loss.

Boxes are ``(cx, cy, w, h)`` in pixels; ``cx``/``w`` run along slant range
(columns) and ``cy``/``h`` along azimuth (rows). All functions accept a
single box of shape (4,) or a stack of shape (N, 4).
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

_V_SCALE = 4.0 / math.pi**2
# exp() of anything above this overflows float64
_MAX_LOG = 700.0


class Box(NamedTuple):
    cx: float
    cy: float
    w: float
    h: float

    @property
    def x0(self) -> float:
        return self.cx - self.w / 2

    @property
    def x1(self) -> float:
        return self.cx + self.w / 2

    @property
    def y0(self) -> float:
        return self.cy - self.h / 2

    @property
    def y1(self) -> float:
        return self.cy + self.h / 2

    @classmethod
    def from_corners(cls, x0, y0, x1, y1) -> "Box":
        return cls((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)

    def shifted(self, dx: float, dy: float) -> "Box":
        return Box(self.cx + dx, self.cy + dy, self.w, self.h)


class Delta(NamedTuple):
    dx: float
    dy: float
    dw: float
    dh: float


class CIoUValue(NamedTuple):
    loss: float
    iou: float
    center_term: float
    aspect_term: float
    gradient: np.ndarray


def _as_boxes(b, name="box"):
    arr = np.asarray(b, dtype=np.float64)
    if arr.shape[-1] != 4:
        raise ValueError(f"{name} must have 4 components, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    if np.any(arr[..., 2:] <= 0):
        raise ValueError(f"{name} must have positive width and height")
    return arr


def _wrap(arr, cls):
    return cls(*(float(v) for v in arr)) if arr.ndim == 1 else arr


def encode(base, target):
    """Regression deltas taking ``base`` to ``target``."""
    b = _as_boxes(base, "base")
    g = _as_boxes(target, "target")
    out = np.stack(
        [
            (g[..., 0] - b[..., 0]) / b[..., 2],
            (g[..., 1] - b[..., 1]) / b[..., 3],
            np.log(g[..., 2] / b[..., 2]),
            np.log(g[..., 3] / b[..., 3]),
        ],
        axis=-1,
    )
    return _wrap(out, Delta)


def decode(base, delta):
    """Apply ``delta`` to ``base``; inverse of :func:`encode`."""
    b = _as_boxes(base, "base")
    d = np.asarray(delta, dtype=np.float64)
    if d.shape[-1] != 4 or not np.all(np.isfinite(d)):
        raise ValueError("delta must be 4 finite components")
    if np.any(d[..., 2:] > _MAX_LOG):
        raise OverflowError("size delta overflows exp")
    out = np.stack(
        [
            b[..., 0] + d[..., 0] * b[..., 2],
            b[..., 1] + d[..., 1] * b[..., 3],
            b[..., 2] * np.exp(d[..., 2]),
            b[..., 3] * np.exp(d[..., 3]),
        ],
        axis=-1,
    )
    return _wrap(out, Box)


def decode_jacobian(base, delta):
    """Diagonal of d(decoded box)/d(delta), shape like ``delta``."""
    b = np.asarray(base, dtype=np.float64)
    d = np.asarray(delta, dtype=np.float64)
    return np.stack(
        [b[..., 2], b[..., 3], b[..., 2] * np.exp(d[..., 2]), b[..., 3] * np.exp(d[..., 3])], axis=-1
    )


def iou(a, b):
    a = _as_boxes(a)
    b = _as_boxes(b)
    iw = np.clip(
        np.minimum(a[..., 0] + a[..., 2] / 2, b[..., 0] + b[..., 2] / 2)
        - np.maximum(a[..., 0] - a[..., 2] / 2, b[..., 0] - b[..., 2] / 2),
        0,
        None,
    )
    ih = np.clip(
        np.minimum(a[..., 1] + a[..., 3] / 2, b[..., 1] + b[..., 3] / 2)
        - np.maximum(a[..., 1] - a[..., 3] / 2, b[..., 1] - b[..., 3] / 2),
        0,
        None,
    )
    inter = iw * ih
    union = a[..., 2] * a[..., 3] + b[..., 2] * b[..., 3] - inter
    out = np.minimum(inter / union, 1.0)
    return float(out) if out.ndim == 0 else out


def aspect_consistency(a, b):
    """The aspect-ratio discrepancy ``v`` between two boxes."""
    a = _as_boxes(a)
    b = _as_boxes(b)
    out = _V_SCALE * (np.arctan(b[..., 2] / b[..., 3]) - np.arctan(a[..., 2] / a[..., 3])) ** 2
    return float(out) if out.ndim == 0 else out


def _overlap_1d(pc, pw, gc, gw):
    """Overlap length along one axis and its derivatives wrt (pc, pw)."""
    pl, pr = pc - pw / 2, pc + pw / 2
    gl, gr = gc - gw / 2, gc + gw / 2
    # coincident edges take the mean of the one-sided derivatives
    right_is_pred = np.where(pr == gr, 0.5, (pr < gr).astype(float))
    left_is_pred = np.where(pl == gl, 0.5, (pl > gl).astype(float))
    length = np.minimum(pr, gr) - np.maximum(pl, gl)
    pos = length > 0
    d_c = (right_is_pred - left_is_pred) * pos
    d_w = (0.5 * right_is_pred + 0.5 * left_is_pred) * pos
    return np.where(pos, length, 0.0), d_c, d_w


def _enclose_1d(pc, pw, gc, gw):
    """Enclosing extent along one axis and its derivatives wrt (pc, pw)."""
    pl, pr = pc - pw / 2, pc + pw / 2
    gl, gr = gc - gw / 2, gc + gw / 2
    right_is_pred = np.where(pr == gr, 0.5, (pr > gr).astype(float))
    left_is_pred = np.where(pl == gl, 0.5, (pl < gl).astype(float))
    length = np.maximum(pr, gr) - np.minimum(pl, gl)
    d_c = right_is_pred - left_is_pred
    d_w = 0.5 * right_is_pred + 0.5 * left_is_pred
    return length, d_c, d_w


def ciou_terms(pred, target, alpha=None):
    """Vectorised CIoU: returns (loss, iou, center_term, aspect_term, grad).

    ``grad`` is d loss / d (cx, cy, w, h) of ``pred`` with the trade-off
    weight alpha held constant. With no overlap the IoU term contributes no
    gradient; the center and aspect terms still do. Passing ``alpha`` pins the
    weight instead of deriving it from ``pred`` (used by gradient checks).
    """
    p = _as_boxes(pred, "pred")
    g = _as_boxes(target, "target")
    p, g = np.broadcast_arrays(p, g)
    px, py, pw, ph = (p[..., i] for i in range(4))
    gx, gy, gw, gh = (g[..., i] for i in range(4))

    iw, iw_dx, iw_dw = _overlap_1d(px, pw, gx, gw)
    ih, ih_dy, ih_dh = _overlap_1d(py, ph, gy, gh)
    inter = iw * ih
    union = pw * ph + gw * gh - inter
    # rounding can push inter / union a hair past 1 for coincident boxes
    iou_v = np.minimum(inter / union, 1.0)
    # d inter / d(x, y, w, h)
    di = np.stack([iw_dx * ih, ih_dy * iw, iw_dw * ih, ih_dh * iw], axis=-1)
    du = np.stack([np.zeros_like(pw), np.zeros_like(pw), ph, pw], axis=-1) - di
    d_iou = (di * union[..., None] - inter[..., None] * du) / (union**2)[..., None]

    cw, cw_dx, cw_dw = _enclose_1d(px, pw, gx, gw)
    ch, ch_dy, ch_dh = _enclose_1d(py, ph, gy, gh)
    c2 = cw**2 + ch**2
    rho2 = (px - gx) ** 2 + (py - gy) ** 2
    center = rho2 / c2
    d_rho2 = np.stack([2 * (px - gx), 2 * (py - gy), np.zeros_like(pw), np.zeros_like(pw)], axis=-1)
    d_c2 = np.stack([2 * cw * cw_dx, 2 * ch * ch_dy, 2 * cw * cw_dw, 2 * ch * ch_dh], axis=-1)
    d_center = (d_rho2 * c2[..., None] - rho2[..., None] * d_c2) / (c2**2)[..., None]

    diff = np.arctan(gw / gh) - np.arctan(pw / ph)
    v = _V_SCALE * diff**2
    denom = (1.0 - iou_v) + v
    safe = denom > 0
    if alpha is None:
        alpha = np.where(safe, v / np.where(safe, denom, 1.0), 0.0)
    else:
        alpha = np.broadcast_to(np.asarray(alpha, dtype=np.float64), v.shape)
    r2 = pw**2 + ph**2
    d_v = np.stack(
        [np.zeros_like(pw), np.zeros_like(pw), -2 * _V_SCALE * diff * ph / r2, 2 * _V_SCALE * diff * pw / r2],
        axis=-1,
    )

    aspect = alpha * v
    loss = 1.0 - iou_v + center + aspect
    grad = -d_iou + d_center + alpha[..., None] * d_v
    return loss, iou_v, center, aspect, grad


def ciou_alpha(pred, target):
    """The trade-off weight alpha = v / ((1 - IoU) + v), 0 where undefined."""
    _, iou_v, _, aspect, _ = ciou_terms(pred, target)
    p, g = np.broadcast_arrays(_as_boxes(pred, "pred"), _as_boxes(target, "target"))
    v = _V_SCALE * (np.arctan(g[..., 2] / g[..., 3]) - np.arctan(p[..., 2] / p[..., 3])) ** 2
    denom = (1.0 - iou_v) + v
    return np.where(denom > 0, v / np.where(denom > 0, denom, 1.0), 0.0)


def ciou_loss(pred, target) -> CIoUValue:
    """CIoU loss for a single pair of boxes."""
    loss, iou_v, center, aspect, grad = ciou_terms(pred, target)
    if np.ndim(loss) != 0:
        raise ValueError("ciou_loss takes single boxes; use ciou_terms for stacks")
    return CIoUValue(float(loss), float(iou_v), float(center), float(aspect), np.asarray(grad))
