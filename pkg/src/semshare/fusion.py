"""Trainable per-pixel fusion heads merging propagated and native class
scores, with hand-derived gradients and a plain SGD trainer.

All layers are per-pixel linear maps (the 1x1-convolution special case),
so a head is a small stack of (weight, bias) pairs applied independently
at every pixel.  Three wirings are provided:

  basic:      concat -> linear classifier
  residual:   concat -> linear -> ReLU -> linear, plus a linear skip
              projection of the concat, then a linear classifier
  bottleneck: per-input linear projections to a common width, elementwise
              add, down-projection -> ReLU -> up-projection back to the
              common width, residual add, ReLU, linear classifier

Pixels flagged invalid bypass fusion entirely: the native scores pass
through unchanged and no gradient flows from them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, DimensionError, TrainingError
from .formats import KIND_FUSION_HEAD, pack_header, unpack_header
from .raster import LabelMap, ScoreMap

VARIANT_KINDS = ("basic", "residual", "bottleneck")
BOTTLENECK_EXPANSION = 2


@dataclass(frozen=True)
class FusionVariant:
    """Head topology plus its resolved hidden width.

    For the residual wiring `hidden` is the width of the inner layers
    (default 2C); for the bottleneck wiring it is the squeezed width
    (default ceil(C / expansion) with expansion 2).  The basic wiring has
    no hidden layer and stores 0.
    """

    kind: str
    hidden: int = 0

    def __post_init__(self):
        if self.kind not in VARIANT_KINDS:
            raise ConfigError(f"unknown fusion variant {self.kind!r}")
        if self.kind != "basic" and self.hidden < 1:
            raise ConfigError(f"{self.kind} fusion needs a positive hidden width")

    @staticmethod
    def resolve(kind: str, num_classes: int, hidden: int | None = None) -> "FusionVariant":
        if kind == "basic":
            return FusionVariant("basic", 0)
        if kind == "residual":
            return FusionVariant("residual", hidden or 2 * num_classes)
        if kind == "bottleneck":
            return FusionVariant(
                "bottleneck", hidden or math.ceil(num_classes / BOTTLENECK_EXPANSION)
            )
        raise ConfigError(f"unknown fusion variant {kind!r}")


def _param_shapes(variant: FusionVariant, c: int):
    """Canonical parameter names and shapes, in serialization order."""
    h = variant.hidden
    if variant.kind == "basic":
        return [("w", (c, 2 * c)), ("b", (c,))]
    if variant.kind == "residual":
        return [
            ("w1", (h, 2 * c)), ("b1", (h,)),
            ("w2", (h, h)), ("b2", (h,)),
            ("ws", (h, 2 * c)), ("bs", (h,)),
            ("wc", (c, h)), ("bc", (c,)),
        ]
    return [
        ("wp", (c, c)), ("bp", (c,)),
        ("wn", (c, c)), ("bn", (c,)),
        ("wd", (h, c)), ("bd", (h,)),
        ("wu", (c, h)), ("bu", (c,)),
        ("wc", (c, c)), ("bc", (c,)),
    ]


class FusionHead:
    """Immutable bundle of a variant, class count and parameter arrays."""

    __slots__ = ("variant", "num_classes", "params")

    def __init__(self, variant: FusionVariant, num_classes: int, params: dict):
        if num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
        expected = _param_shapes(variant, num_classes)
        if set(params) != {name for name, _ in expected}:
            raise DimensionError(
                f"head parameters {sorted(params)} do not match variant {variant.kind}"
            )
        stored = {}
        for name, shape in expected:
            arr = np.array(params[name], dtype=float)
            if arr.shape != shape:
                raise DimensionError(f"parameter {name} must have shape {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise DataError(f"parameter {name} contains non-finite values")
            arr.flags.writeable = False
            stored[name] = arr
        self.variant = variant
        self.num_classes = int(num_classes)
        self.params = stored

    def replace_params(self, params: dict) -> "FusionHead":
        return FusionHead(self.variant, self.num_classes, params)


def new_head(
    kind: str,
    num_classes: int,
    seed: int = 0,
    init_scale: float = 0.1,
    hidden: int | None = None,
) -> FusionHead:
    """Seeded uniform initialization: weights in [-s, s] with
    s = init_scale / sqrt(fan_in); biases start at zero."""
    variant = FusionVariant.resolve(kind, num_classes, hidden)
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in _param_shapes(variant, num_classes):
        if len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            bound = init_scale / math.sqrt(shape[1])
            params[name] = rng.uniform(-bound, bound, size=shape)
    return FusionHead(variant, num_classes, params)


def identity_head(num_classes: int) -> FusionHead:
    """Basic head whose output equals the native scores exactly."""
    w = np.zeros((num_classes, 2 * num_classes))
    w[:, num_classes:] = np.eye(num_classes)
    return FusionHead(
        FusionVariant("basic", 0), num_classes, {"w": w, "b": np.zeros(num_classes)}
    )


# ---------------------------------------------------------------------------
# Forward / backward on (channels, pixels) matrices


def _forward_mat(head: FusionHead, x: np.ndarray):
    """Forward over a (2C, N) input matrix; returns (output, cache)."""
    p = head.params
    if head.variant.kind == "basic":
        y = p["w"] @ x + p["b"][:, None]
        return y, {"x": x}
    if head.variant.kind == "residual":
        a1 = p["w1"] @ x + p["b1"][:, None]
        z1 = np.maximum(a1, 0.0)
        a2 = p["w2"] @ z1 + p["b2"][:, None]
        s = p["ws"] @ x + p["bs"][:, None]
        r = a2 + s
        y = p["wc"] @ r + p["bc"][:, None]
        return y, {"x": x, "a1": a1, "z1": z1, "r": r}
    c = head.num_classes
    prop, nat = x[:c], x[c:]
    ap = p["wp"] @ prop + p["bp"][:, None]
    an = p["wn"] @ nat + p["bn"][:, None]
    s = ap + an
    d = p["wd"] @ s + p["bd"][:, None]
    zd = np.maximum(d, 0.0)
    u = p["wu"] @ zd + p["bu"][:, None]
    t = s + u
    r = np.maximum(t, 0.0)
    y = p["wc"] @ r + p["bc"][:, None]
    return y, {"x": x, "s": s, "d": d, "zd": zd, "t": t, "r": r}


def _backward_mat(head: FusionHead, cache: dict, gy: np.ndarray):
    """Exact gradients of _forward_mat; ReLU subgradient at 0 is 0.

    Returns (parameter gradients, input gradient of shape (2C, N)).
    """
    p = head.params
    x = cache["x"]
    if head.variant.kind == "basic":
        grads = {"w": gy @ x.T, "b": gy.sum(axis=1)}
        return grads, p["w"].T @ gy
    if head.variant.kind == "residual":
        grads = {}
        grads["wc"] = gy @ cache["r"].T
        grads["bc"] = gy.sum(axis=1)
        gr = p["wc"].T @ gy
        grads["w2"] = gr @ cache["z1"].T
        grads["b2"] = gr.sum(axis=1)
        gz1 = p["w2"].T @ gr
        ga1 = gz1 * (cache["a1"] > 0.0)
        grads["w1"] = ga1 @ x.T
        grads["b1"] = ga1.sum(axis=1)
        grads["ws"] = gr @ x.T
        grads["bs"] = gr.sum(axis=1)
        gx = p["w1"].T @ ga1 + p["ws"].T @ gr
        return grads, gx
    c = head.num_classes
    grads = {}
    grads["wc"] = gy @ cache["r"].T
    grads["bc"] = gy.sum(axis=1)
    gr = p["wc"].T @ gy
    gt = gr * (cache["t"] > 0.0)
    grads["wu"] = gt @ cache["zd"].T
    grads["bu"] = gt.sum(axis=1)
    gzd = p["wu"].T @ gt
    gd = gzd * (cache["d"] > 0.0)
    grads["wd"] = gd @ cache["s"].T
    grads["bd"] = gd.sum(axis=1)
    gs = gt + p["wd"].T @ gd
    grads["wp"] = gs @ x[:c].T
    grads["bp"] = gs.sum(axis=1)
    grads["wn"] = gs @ x[c:].T
    grads["bn"] = gs.sum(axis=1)
    gx = np.concatenate([p["wp"].T @ gs, p["wn"].T @ gs], axis=0)
    return grads, gx


def _check_inputs(head: FusionHead, propagated: ScoreMap, native: ScoreMap, mask):
    if propagated.data.shape != native.data.shape:
        raise DimensionError("propagated and native score maps must share a shape")
    if propagated.num_classes != head.num_classes:
        raise DimensionError(
            f"head expects {head.num_classes} classes, maps carry {propagated.num_classes}"
        )
    mask = np.asarray(mask)
    if mask.dtype != bool or mask.shape != propagated.data.shape[1:]:
        raise DimensionError("mask must be boolean with the maps' spatial shape")
    return mask


def fuse_forward(head: FusionHead, propagated: ScoreMap, native: ScoreMap, mask) -> ScoreMap:
    """Apply the head per pixel; invalid pixels return the native scores
    unchanged."""
    mask = _check_inputs(head, propagated, native, mask)
    c, h, w = propagated.data.shape
    x = np.concatenate([propagated.data, native.data], axis=0).reshape(2 * c, h * w)
    y, _ = _forward_mat(head, x)
    fused = y.reshape(c, h, w)
    return ScoreMap(np.where(mask[None], fused, native.data))


def fuse_backward(head: FusionHead, propagated: ScoreMap, native: ScoreMap, mask, grad_out):
    """Gradients of fuse_forward.

    grad_out has shape (C, H, W); contributions from invalid pixels are
    zeroed since those outputs bypass the head.  Returns (parameter
    gradients, (grad wrt propagated, grad wrt native)).
    """
    mask = _check_inputs(head, propagated, native, mask)
    grad_out = np.asarray(grad_out, dtype=float)
    if grad_out.shape != propagated.data.shape:
        raise DimensionError("grad_out must match the score map shape")
    c, h, w = propagated.data.shape
    x = np.concatenate([propagated.data, native.data], axis=0).reshape(2 * c, h * w)
    _, cache = _forward_mat(head, x)
    gy = (grad_out * mask[None]).reshape(c, h * w)
    grads, gx = _backward_mat(head, cache, gy)
    gx = gx.reshape(2 * c, h, w)
    return grads, (gx[:c], gx[c:])


# ---------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    iterations: int = 2000
    batch_fraction: float = 0.25
    seed: int = 0
    init_scale: float = 0.1

    def __post_init__(self):
        if not self.learning_rate >= 0.0:
            raise ConfigError(f"learning rate must be >= 0, got {self.learning_rate}")
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if not 0.0 < self.batch_fraction <= 1.0:
            raise ConfigError(f"batch fraction must be in (0, 1], got {self.batch_fraction}")
        if not self.init_scale > 0.0:
            raise ConfigError(f"init scale must be positive, got {self.init_scale}")


def _flatten_dataset(head: FusionHead, dataset):
    xs, ys = [], []
    c = head.num_classes
    for propagated, native, mask, gt in dataset:
        mask = _check_inputs(head, propagated, native, mask)
        if not isinstance(gt, LabelMap) or gt.size != propagated.size:
            raise DimensionError("ground-truth labels must match the score maps")
        if gt.num_classes != c:
            raise DimensionError("ground-truth labels disagree on the class count")
        flat_mask = mask.reshape(-1)
        x = np.concatenate([propagated.data, native.data], axis=0).reshape(2 * c, -1)
        xs.append(x[:, flat_mask])
        ys.append(gt.data.reshape(-1)[flat_mask])
    x = np.concatenate(xs, axis=1)
    y = np.concatenate(ys)
    if x.shape[1] == 0:
        raise ConfigError("training dataset has no valid pixels")
    return x, y


def _softmax_ce(scores: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over columns plus its gradient wrt the scores."""
    m = scores.max(axis=0)
    exp = np.exp(scores - m[None])
    norm = exp.sum(axis=0)
    probs = exp / norm[None]
    n = scores.shape[1]
    picked = scores[labels, np.arange(n)]
    loss = float(np.sum(np.log(norm) + m - picked) / n)
    grad = probs
    grad[labels, np.arange(n)] -= 1.0
    return loss, grad / n


def train_fusion(head: FusionHead, dataset, cfg: TrainConfig):
    """Plain SGD on masked cross-entropy; deterministic given cfg.seed.

    dataset is a list of (propagated ScoreMap, native ScoreMap, mask,
    ground-truth LabelMap).  Returns (trained head, per-iteration loss).
    """
    if not dataset:
        raise ConfigError("training dataset is empty")
    x_all, y_all = _flatten_dataset(head, dataset)
    n = x_all.shape[1]
    batch = max(1, int(round(cfg.batch_fraction * n)))
    rng = np.random.default_rng(cfg.seed)
    params = {name: arr.copy() for name, arr in head.params.items()}
    work = head.replace_params(params)
    losses = []
    for _ in range(cfg.iterations):
        idx = rng.integers(0, n, size=batch) if batch < n else np.arange(n)
        xb, yb = x_all[:, idx], y_all[idx]
        out, cache = _forward_mat(work, xb)
        loss, grad_out = _softmax_ce(out, yb)
        if not math.isfinite(loss):
            raise TrainingError(f"training diverged: loss became {loss}")
        losses.append(loss)
        grads, _ = _backward_mat(work, cache, grad_out)
        params = {name: params[name] - cfg.learning_rate * grads[name] for name in params}
        for arr in params.values():
            if not np.all(np.isfinite(arr)):
                raise TrainingError("training diverged: parameters became non-finite")
        work = head.replace_params(params)
    return work, losses


# ---------------------------------------------------------------------------
# Serialization (SEMSHARE container, kind 2)

_VARIANT_TAGS = {"basic": 0, "residual": 1, "bottleneck": 2}
_TAG_VARIANTS = {tag: kind for kind, tag in _VARIANT_TAGS.items()}


def write_head(head: FusionHead, path) -> None:
    """Container layout: width = class count, height = variant tag,
    channels = hidden width; payload is the float32 parameter blocks in
    canonical order."""
    tag = _VARIANT_TAGS[head.variant.kind]
    blobs = [
        np.ascontiguousarray(head.params[name].astype("<f4")).tobytes()
        for name, _ in _param_shapes(head.variant, head.num_classes)
    ]
    with open(path, "wb") as f:
        f.write(pack_header(KIND_FUSION_HEAD, head.num_classes, tag, head.variant.hidden))
        for blob in blobs:
            f.write(blob)


def read_head(path) -> FusionHead:
    with open(path, "rb") as f:
        blob = f.read()
    kind, num_classes, tag, hidden, payload = unpack_header(blob)
    if kind != KIND_FUSION_HEAD:
        raise DataError(f"{path} does not hold a fusion head")
    if tag not in _TAG_VARIANTS:
        raise DataError(f"unknown fusion variant tag {tag}")
    variant = FusionVariant(_TAG_VARIANTS[tag], hidden)
    params = {}
    offset = 0
    for name, shape in _param_shapes(variant, num_classes):
        count = int(np.prod(shape))
        chunk = payload[offset : offset + 4 * count]
        if len(chunk) != 4 * count:
            raise DataError("fusion head payload is truncated")
        params[name] = np.frombuffer(chunk, dtype="<f4").reshape(shape).astype(float)
        offset += 4 * count
    if offset != len(payload):
        raise DataError("fusion head payload has trailing bytes")
    return FusionHead(variant, num_classes, params)
