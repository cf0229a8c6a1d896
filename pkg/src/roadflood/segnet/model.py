"""Residual U-Net: parameters, forward pass and reverse-mode gradients.

Layout per level ``i`` (``F_i = base_filters * 2**i``):

* encoder ``enc{i}``: residual block -> 2x2 max-pool (pre-pool output is the skip)
* ``bottleneck``: residual block at ``F_levels``
* decoder ``dec{i}``: nearest 2x upsample -> 3x3 conv + ReLU (``dec{i}.up``),
  concatenate [up, skip], residual block
* ``head``: 1x1 conv to one logit, sigmoid

A residual block is conv3x3 -> ReLU -> conv3x3, plus an identity shortcut (or a
1x1 projection when channel counts differ), followed by ReLU.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .layers import (
    conv2d,
    conv2d_backward,
    maxpool2,
    maxpool2_backward,
    relu,
    sigmoid,
    upsample2,
    upsample2_backward,
)
from .metrics import dice_loss_grad

Params = dict[str, np.ndarray]


@dataclass(frozen=True)
class ModelConfig:
    levels: int = 3
    base_filters: int = 8
    in_channels: int = 4
    kernel: int = 3
    residual: bool = True

    def __post_init__(self):
        if self.levels < 1 or self.base_filters < 1 or self.in_channels < 1:
            raise ValueError("levels, base_filters and in_channels must be >= 1")
        if self.kernel % 2 == 0:
            raise ValueError("kernel size must be odd")

    def filters(self, level: int) -> int:
        return self.base_filters * 2**level

    def check_input(self, shape) -> None:
        if len(shape) != 4 or shape[3] != self.in_channels:
            raise ValueError(f"expected (N, H, W, {self.in_channels}) input, got {tuple(shape)}")
        div = 2**self.levels
        if shape[1] % div or shape[2] % div:
            raise ValueError(f"spatial dims {shape[1:3]} not divisible by {div}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "ModelConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def _block_shapes(prefix: str, cin: int, cout: int, k: int) -> list[tuple[str, tuple]]:
    shapes = [
        (f"{prefix}.conv1.w", (k, k, cin, cout)),
        (f"{prefix}.conv1.b", (cout,)),
        (f"{prefix}.conv2.w", (k, k, cout, cout)),
        (f"{prefix}.conv2.b", (cout,)),
    ]
    if cin != cout:
        shapes += [(f"{prefix}.proj.w", (1, 1, cin, cout)), (f"{prefix}.proj.b", (cout,))]
    return shapes


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple]]:
    """Ordered (name, shape) list defining the parameter set for ``cfg``."""
    k = cfg.kernel
    shapes = []
    cin = cfg.in_channels
    for i in range(cfg.levels):
        shapes += _block_shapes(f"enc{i}", cin, cfg.filters(i), k)
        cin = cfg.filters(i)
    shapes += _block_shapes("bottleneck", cin, cfg.filters(cfg.levels), k)
    cin = cfg.filters(cfg.levels)
    for i in reversed(range(cfg.levels)):
        f = cfg.filters(i)
        shapes += [(f"dec{i}.up.w", (k, k, cin, f)), (f"dec{i}.up.b", (f,))]
        shapes += _block_shapes(f"dec{i}", 2 * f, f, k)
        cin = f
    shapes += [("head.w", (1, 1, cin, 1)), ("head.b", (1,))]
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> Params:
    """Glorot-uniform kernels, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg):
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            k, _, cin, cout = shape
            limit = np.sqrt(6.0 / (k * k * cin + k * k * cout))
            params[name] = rng.uniform(-limit, limit, size=shape).astype(dtype)
    return params


def zeros_like_params(cfg: ModelConfig, dtype=np.float32) -> Params:
    return {name: np.zeros(shape, dtype=dtype) for name, shape in param_shapes(cfg)}


def is_prunable(name: str) -> bool:
    return name.endswith(".w")


def _block_forward(p: Params, prefix: str, x, cfg: ModelConfig, cache: dict):
    a1 = relu(conv2d(x, p[f"{prefix}.conv1.w"], p[f"{prefix}.conv1.b"]))
    h2 = conv2d(a1, p[f"{prefix}.conv2.w"], p[f"{prefix}.conv2.b"])
    if cfg.residual:
        if f"{prefix}.proj.w" in p:
            h2 = h2 + conv2d(x, p[f"{prefix}.proj.w"], p[f"{prefix}.proj.b"])
        else:
            h2 = h2 + x
    out = relu(h2)
    cache[prefix] = (x, a1, out)
    return out


def _block_backward(p: Params, prefix: str, dout, cfg: ModelConfig, cache: dict, grads: Params):
    x, a1, out = cache[prefix]
    d = dout * (out > 0)
    dx = 0
    if cfg.residual:
        if f"{prefix}.proj.w" in p:
            dx, grads[f"{prefix}.proj.w"], grads[f"{prefix}.proj.b"] = conv2d_backward(
                d, x, p[f"{prefix}.proj.w"]
            )
        else:
            dx = d
    da1, grads[f"{prefix}.conv2.w"], grads[f"{prefix}.conv2.b"] = conv2d_backward(
        d, a1, p[f"{prefix}.conv2.w"]
    )
    dh1 = da1 * (a1 > 0)
    dx1, grads[f"{prefix}.conv1.w"], grads[f"{prefix}.conv1.b"] = conv2d_backward(
        dh1, x, p[f"{prefix}.conv1.w"]
    )
    return dx1 + dx


def _forward(params: Params, cfg: ModelConfig, batch):
    x = np.asarray(batch)
    cfg.check_input(x.shape)
    if not np.isfinite(x).all():
        raise ValueError("non-finite values in model input")
    dtype = params["head.w"].dtype
    x = x.astype(dtype, copy=False)
    cache: dict = {"pool": {}, "up": {}}
    skips = []
    for i in range(cfg.levels):
        s = _block_forward(params, f"enc{i}", x, cfg, cache)
        skips.append(s)
        x, cache["pool"][i] = maxpool2(s)
    x = _block_forward(params, "bottleneck", x, cfg, cache)
    for i in reversed(range(cfg.levels)):
        u = upsample2(x)
        a = relu(conv2d(u, params[f"dec{i}.up.w"], params[f"dec{i}.up.b"]))
        cache["up"][i] = (u, a)
        x = _block_forward(params, f"dec{i}", np.concatenate([a, skips[i]], axis=-1), cfg, cache)
    cache["head_in"] = x
    logits = conv2d(x, params["head.w"], params["head.b"])
    return sigmoid(logits), cache


def forward(params: Params, cfg: ModelConfig, batch) -> np.ndarray:
    """Water probabilities, shape (N, H, W, 1), each in (0, 1)."""
    return _forward(params, cfg, batch)[0]


def loss_and_grads(params: Params, cfg: ModelConfig, batch, targets, eps: float = 1.0, scale: float = 1.0):
    """Dice loss of one batch and its exact gradient for every parameter.

    ``scale`` multiplies the loss (and so every gradient); tensors the
    forward pass never touches get zero gradients.
    """
    loss, grads, _ = loss_grads_probs(params, cfg, batch, targets, eps, scale)
    return loss, grads


def loss_grads_probs(params: Params, cfg: ModelConfig, batch, targets, eps: float = 1.0, scale: float = 1.0):
    probs, cache = _forward(params, cfg, batch)
    targets = np.asarray(targets, dtype=probs.dtype).reshape(probs.shape)
    loss, dprobs = dice_loss_grad(probs, targets, eps)
    dz = scale * dprobs * probs * (1 - probs)
    grads: Params = {}
    d, grads["head.w"], grads["head.b"] = conv2d_backward(dz, cache["head_in"], params["head.w"])
    dskips = {}
    for i in range(cfg.levels):
        dcat = _block_backward(params, f"dec{i}", d, cfg, cache, grads)
        f = cfg.filters(i)
        da, dskips[i] = dcat[..., :f], dcat[..., f:]
        u, a = cache["up"][i]
        du, grads[f"dec{i}.up.w"], grads[f"dec{i}.up.b"] = conv2d_backward(
            da * (a > 0), u, params[f"dec{i}.up.w"]
        )
        d = upsample2_backward(du)
    d = _block_backward(params, "bottleneck", d, cfg, cache, grads)
    for i in reversed(range(cfg.levels)):
        ds = maxpool2_backward(d, cache["pool"][i]) + dskips[i]
        d = _block_backward(params, f"enc{i}", ds, cfg, cache, grads)
    out = {}
    for name, value in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(value)
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in tensor {name}")
        out[name] = g.astype(value.dtype, copy=False)
    return scale * loss, out, probs


def backward(params: Params, cfg: ModelConfig, batch, targets, eps: float = 1.0) -> Params:
    return loss_and_grads(params, cfg, batch, targets, eps)[1]


def count_weights(params: Params) -> int:
    return sum(int(v.size) for v in params.values())
