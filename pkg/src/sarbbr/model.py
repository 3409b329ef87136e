"""Footprint-guided bounding-box regressor: network, loss, training, inference."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from sarbbr import nn
from sarbbr.boxes import Box, ciou_alpha, ciou_terms, decode, decode_jacobian

log = logging.getLogger(__name__)


class NumericalFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    channels: tuple = (8, 16, 32, 64, 64)
    convs_per_stage: int = 2
    roi_size: int = 7
    samples_per_bin: int = 2
    head_width: int = 64
    patch_size: int = 256
    # "he": N(0, 2/fan_in) for convs and the hidden fc layer, N(0, 1/fan_in) for the output;
    # "gaussian": N(0, head_std^2) for fc layers and N(0, 0.01^2) for convs
    init_scheme: str = "he"
    head_std: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) < 2:
            raise ValueError("need at least two stages")
        if self.convs_per_stage < 1:
            raise ValueError("need at least one conv per stage")
        if self.patch_size % self.stride:
            raise ValueError(f"cumulative stride {self.stride} must divide patch size {self.patch_size}")
        if self.init_scheme not in ("he", "gaussian"):
            raise ValueError(f"unknown init {self.init_scheme!r}")

    @property
    def stride(self) -> int:
        return 2 ** (len(self.channels) - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch: int = 4
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0005
    plateau_factor: float = 0.1
    plateau_patience: int = 3
    plateau_min_delta: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch < 1:
            raise ValueError("epochs and batch must be >= 1")
        if not (self.lr > 0 and self.weight_decay >= 0 and 0 <= self.momentum < 1):
            raise ValueError("invalid optimiser settings")


def _conv_names(cfg: ModelConfig):
    names = []
    c_in = 2
    for s, c in enumerate(cfg.channels, start=1):
        for k in range(1, cfg.convs_per_stage + 1):
            names.append((f"stage{s}.conv{k}", c_in, c))
            c_in = c
    return names


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> dict:
    rng = np.random.default_rng(seed)
    params = {}
    for name, c_in, c_out in _conv_names(cfg):
        std = math.sqrt(2.0 / (9 * c_in)) if cfg.init_scheme == "he" else 0.01
        params[f"{name}.w"] = rng.normal(0.0, std, (c_out, c_in, 3, 3)).astype(dtype)
        params[f"{name}.b"] = np.zeros(c_out, dtype=dtype)
    width = cfg.channels[-1]
    if cfg.head_width:
        std = math.sqrt(2.0 / width) if cfg.init_scheme == "he" else cfg.head_std
        params["fc1.w"] = rng.normal(0.0, std, (cfg.head_width, width)).astype(dtype)
        params["fc1.b"] = np.zeros(cfg.head_width, dtype=dtype)
        width = cfg.head_width
    # linear output: LeCun scale keeps the backbone gradient from vanishing
    std = math.sqrt(1.0 / width) if cfg.init_scheme == "he" else cfg.head_std
    params["fc_out.w"] = rng.normal(0.0, std, (4, width)).astype(dtype)
    params["fc_out.b"] = np.zeros(4, dtype=dtype)
    return params


def check_params(cfg: ModelConfig, params: dict) -> None:
    expect = init_params(cfg, 0)
    if set(expect) != set(params):
        raise ValueError(f"parameter names do not match the model config: {sorted(set(expect) ^ set(params))}")
    for k, v in expect.items():
        if params[k].shape != v.shape:
            raise ValueError(f"parameter {k} has shape {params[k].shape}, config expects {v.shape}")


def stack_inputs(samples, dtype=np.float32):
    """(N, 2, P, P) network input and (N, 4) footprint boxes."""
    x = np.stack([np.stack([np.asarray(s.patch), np.asarray(s.mask)]) for s in samples]).astype(dtype)
    rois = np.array([tuple(s.footprint_box) for s in samples], dtype=np.float64)
    return x, rois


def forward(cfg: ModelConfig, params: dict, x, rois):
    """Predicted deltas (N, 4) and the cache needed by :func:`backward`."""
    caches = []
    h = x
    stages = len(cfg.channels)
    names = _conv_names(cfg)
    per = cfg.convs_per_stage
    for s in range(stages - 1):
        for name, _, _ in names[s * per : (s + 1) * per]:
            h, cc = nn.conv2d_forward(h, params[f"{name}.w"], params[f"{name}.b"], 1, 1)
            h, rc = nn.relu_forward(h)
            caches.append(("conv", name, cc, rc))
        h, pc = nn.max_pool2d_forward(h)
        caches.append(("pool", None, pc, None))
    pooled, rcaches = [], []
    scale = 1.0 / cfg.stride
    out_size = (cfg.roi_size, cfg.roi_size)
    for i in range(h.shape[0]):
        fb = rois[i]
        if not (fb[2] * scale > 0 and fb[3] * scale > 0):
            raise ValueError(f"footprint box {tuple(fb)} degenerates on the feature map")
        p, c = nn.roi_align_forward(h[i], fb, scale, out_size, cfg.samples_per_bin)
        pooled.append(p)
        rcaches.append(c)
    g = np.stack(pooled)
    tail = []
    for name, _, _ in names[(stages - 1) * per :]:
        g, cc = nn.conv2d_forward(g, params[f"{name}.w"], params[f"{name}.b"], 1, 1)
        g, rc = nn.relu_forward(g)
        tail.append((name, cc, rc))
    feat, gshape = nn.global_average_pool_forward(g)
    head = []
    if cfg.head_width:
        feat, fc = nn.fully_connected_forward(feat, params["fc1.w"], params["fc1.b"])
        feat, rc = nn.relu_forward(feat)
        head.append(("fc1", fc, rc))
    delta, fc = nn.fully_connected_forward(feat, params["fc_out.w"], params["fc_out.b"])
    head.append(("fc_out", fc, None))
    return delta, (caches, rcaches, tail, gshape, head, h.shape)


def backward(cfg: ModelConfig, ddelta, cache) -> dict:
    caches, rcaches, tail, gshape, head, fshape = cache
    grads = {}
    d = ddelta
    for name, fc, rc in reversed(head):
        if rc is not None:
            d = nn.relu_backward(d, rc)
        d, grads[f"{name}.w"], grads[f"{name}.b"] = nn.fully_connected_backward(d, fc)
    d = nn.global_average_pool_backward(d, gshape)
    for name, cc, rc in reversed(tail):
        d = nn.relu_backward(d, rc)
        d, grads[f"{name}.w"], grads[f"{name}.b"] = nn.conv2d_backward(d, cc)
    dfeat = np.zeros(fshape, dtype=d.dtype)
    for i, c in enumerate(rcaches):
        dfeat[i] = nn.roi_align_backward(d[i], c)
    d = dfeat
    for kind, name, c1, c2 in reversed(caches):
        if kind == "pool":
            d = nn.max_pool2d_backward(d, c1)
        else:
            d = nn.relu_backward(d, c2)
            d, grads[f"{name}.w"], grads[f"{name}.b"] = nn.conv2d_backward(d, c1)
    return grads


def batch_loss(cfg: ModelConfig, params: dict, samples, need_grad: bool = True, alpha=None):
    """Mean CIoU loss of decoded predictions over ``samples`` and its parameter gradients.

    ``alpha`` pins the CIoU trade-off weight per sample (see ``ciou_terms``).
    """
    x, rois = stack_inputs(samples, dtype=next(iter(params.values())).dtype)
    gts = np.array([tuple(s.gt_box) for s in samples], dtype=np.float64)
    delta, cache = forward(cfg, params, x, rois)
    delta64 = delta.astype(np.float64)
    pred = decode(rois, delta64)
    if not (np.all(np.isfinite(pred)) and np.all(pred[:, 2:] > 0)):
        raise NumericalFailure("decoded box is degenerate or non-finite")
    loss, *_, gbox = ciou_terms(pred, gts, alpha)
    n = len(samples)
    mean = float(loss.mean())
    if not math.isfinite(mean):
        raise NumericalFailure(f"non-finite loss; deltas {delta64.tolist()}")
    if not need_grad:
        return mean, None, pred
    ddelta = (gbox * decode_jacobian(rois, delta64) / n).astype(delta.dtype)
    return mean, backward(cfg, ddelta, cache), pred


def predict_boxes(cfg: ModelConfig, params: dict, samples, batch: int = 16) -> np.ndarray:
    """Decoded patch-local boxes (N, 4)."""
    out = []
    dtype = next(iter(params.values())).dtype
    for k in range(0, len(samples), batch):
        chunk = samples[k : k + batch]
        x, rois = stack_inputs(chunk, dtype=dtype)
        delta, _ = forward(cfg, params, x, rois)
        out.append(decode(rois, delta.astype(np.float64)))
    return np.concatenate(out) if out else np.zeros((0, 4))


@dataclass
class TrainResult:
    params: dict
    log: list = field(default_factory=list)  # (epoch, mean_loss, lr)


def train(samples, model_cfg: ModelConfig, train_cfg: TrainConfig, params=None, progress=None) -> TrainResult:
    """Mini-batch SGD over ``samples`` with a plateau learning-rate schedule.

    The epoch loss fed to the scheduler is the mean per-sample loss seen
    during the epoch.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("training set is empty")
    if params is None:
        params = init_params(model_cfg, train_cfg.seed)
    opt = nn.SGD(train_cfg.lr, train_cfg.momentum, train_cfg.weight_decay)
    sched = nn.PlateauSchedule(train_cfg.plateau_factor, train_cfg.plateau_patience, train_cfg.plateau_min_delta)
    rng = np.random.default_rng(train_cfg.seed)
    result = TrainResult(params)
    for epoch in range(1, train_cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(samples))
        total = 0.0
        for k in range(0, len(order), train_cfg.batch):
            chunk = [samples[i] for i in order[k : k + train_cfg.batch]]
            loss, grads, _ = batch_loss(model_cfg, params, chunk)
            total += loss * len(chunk)
            opt.step(params, grads)
        epoch_loss = total / len(samples)
        lr_used = opt.lr
        nn.plateau_update(sched, opt, epoch_loss)
        result.log.append((epoch, epoch_loss, lr_used))
        log.info("epoch %d loss %.6f lr %.2e (%.1fs)", epoch, epoch_loss, lr_used, time.perf_counter() - t0)
        if progress:
            progress(epoch, epoch_loss, lr_used)
    return result


def predict(samples, model_cfg: ModelConfig, params: dict) -> dict:
    """Scene-coordinate predicted box per building id."""
    check_params(model_cfg, params)
    ids = [s.building_id for s in samples]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate building ids in the prediction split")
    boxes = predict_boxes(model_cfg, params, samples)
    out = {}
    for s, b in zip(samples, boxes):
        out[s.building_id] = to_scene(Box(*b), s)
    return out


def to_scene(box: Box, s) -> Box:
    """Map a patch-local (possibly rescaled) box back to scene pixels."""
    f = s.scale
    r0, c0 = s.patch_origin
    return Box(box.cx / f + c0, box.cy / f + r0, box.w / f, box.h / f)


def write_loss_log(path, rows) -> None:
    lines = ["epoch,mean_loss,lr"] + [f"{e},{loss!r},{lr!r}" for e, loss, lr in rows]
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def read_loss_log(path):
    rows = []
    with open(path) as fh:
        next(fh)
        for line in fh:
            e, loss, lr = line.strip().split(",")
            rows.append((int(e), float(loss), float(lr)))
    return rows


def tiny_model_gradcheck(seed: int = 0, step: float = 1e-5) -> float:
    """Max relative error of every parameter gradient of a small float64 model.

    Uses a two-stage network on random 8x8 inputs with a hidden head layer,
    so every layer type of the real model is on the path. The CIoU weight
    alpha is frozen at the checked point, matching the analytic gradient.
    """
    from sarbbr.dataset import Sample

    rng = np.random.default_rng(seed)
    cfg = ModelConfig(channels=(3, 4), convs_per_stage=1, roi_size=2, head_width=5, patch_size=8)
    params = init_params(cfg, seed, dtype=np.float64)
    samples = []
    for i in range(3):
        fb = Box(rng.uniform(3, 5), rng.uniform(3, 5), rng.uniform(2, 4), rng.uniform(2, 4))
        gt = Box(fb.cx - rng.uniform(0.2, 1.5), fb.cy + rng.uniform(-0.5, 0.5), fb.w + rng.uniform(0.5, 2), fb.h * rng.uniform(0.8, 1.2))
        samples.append(Sample(f"t{i}", rng.uniform(0, 1, (8, 8)), (rng.uniform(0, 1, (8, 8)) > 0.5).astype(float), fb, gt, 1.0))
    _, grads, pred = batch_loss(cfg, params, samples)
    # the analytic gradient treats alpha as a constant, so the reference does too
    alpha = ciou_alpha(pred, np.array([tuple(s.gt_box) for s in samples]))
    worst = 0.0
    for name in sorted(params):
        base = params[name]

        def f(v, name=name, base=base):
            trial = dict(params)
            trial[name] = v.reshape(base.shape)
            return batch_loss(cfg, trial, samples, need_grad=False, alpha=alpha)[0]

        worst = max(worst, nn.relative_error(grads[name], nn.numerical_gradient(f, base, step)))
    return worst
