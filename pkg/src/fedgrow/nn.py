"""Minimal deterministic CNN engine on float32 numpy arrays.

Supports exactly the layer kinds needed by the staged model families:
conv2d, dense, maxpool, global-average-pool, dropout, relu, softmax and
flatten. Activations are laid out as (batch, height, width, channels);
flattening is row-major over (height, width, channels). Plain SGD with
sparse categorical cross-entropy is the only optimizer/loss pair.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, NumericalError

DTYPE = np.float32

TRAINABLE_KINDS = ("conv2d", "dense")
# Kinds a transform may walk through when looking for the next/previous
# trainable layer.
PASS_THROUGH_KINDS = ("relu", "dropout", "maxpool", "flatten", "gap")


@dataclass(frozen=True)
class KernelShape:
    """Convolution kernel extents: width, height, input and output channels."""

    w: int
    h: int
    i: int
    o: int

    def __post_init__(self):
        if min(self.w, self.h, self.i, self.o) < 1:
            raise ConfigError(f"kernel extents must be >= 1, got {self}")


@dataclass(frozen=True)
class LayerSpec:
    """One layer in a model; ``kind`` selects which fields are meaningful.

    conv2d:  kernel, padding ("same"|"valid"), stride
    dense:   in_units, out_units
    maxpool: window (square side), stride equals window (non-overlapping)
    dropout: rate in [0, 1)
    relu / softmax / flatten / gap: no parameters
    """

    kind: str
    kernel: KernelShape | None = None
    padding: str = "same"
    stride: int = 1
    in_units: int = 0
    out_units: int = 0
    window: int = 0
    rate: float = 0.0


def conv2d(kernel: KernelShape, padding: str = "same", stride: int = 1) -> LayerSpec:
    if padding not in ("same", "valid"):
        raise ConfigError(f"unknown padding mode {padding!r}")
    if stride < 1:
        raise ConfigError("conv stride must be >= 1")
    return LayerSpec("conv2d", kernel=kernel, padding=padding, stride=stride)


def dense(in_units: int, out_units: int) -> LayerSpec:
    if in_units < 1 or out_units < 1:
        raise ConfigError("dense units must be >= 1")
    return LayerSpec("dense", in_units=in_units, out_units=out_units)


def maxpool(window: int) -> LayerSpec:
    if window < 1:
        raise ConfigError("pool window must be >= 1")
    return LayerSpec("maxpool", window=window)


def dropout(rate: float) -> LayerSpec:
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    return LayerSpec("dropout", rate=rate)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def softmax() -> LayerSpec:
    return LayerSpec("softmax")


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def global_avg_pool() -> LayerSpec:
    return LayerSpec("gap")


@dataclass(frozen=True)
class ModelArch:
    """Immutable layer sequence plus the input sample shape (H, W, C)."""

    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]
    name: str = ""

    @property
    def num_classes(self) -> int:
        for spec in reversed(self.layers):
            if spec.kind == "dense":
                return spec.out_units
        raise ConfigError("model has no dense layer")

    def with_layers(self, layers: Iterable[LayerSpec]) -> "ModelArch":
        return replace(self, layers=tuple(layers))


@dataclass
class LayerParams:
    """Weight and bias arrays of one trainable layer."""

    w: np.ndarray
    b: np.ndarray


# Params maps layer index -> LayerParams for every trainable layer.
Params = dict[int, LayerParams]


@dataclass(frozen=True)
class TrainConfig:
    """Local SGD hyperparameters."""

    learning_rate: float
    batch_size: int = 10
    local_epochs: int = 1
    dropout_rate: float = 0.125
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError("learning rate must be >= 0")
        if self.batch_size < 1 or self.local_epochs < 1:
            raise ConfigError("batch size and local epochs must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout rate must be in [0, 1)")


# ---------------------------------------------------------------------------
# Shape inference and validation


def _pool_out(size: int, window: int) -> int:
    # Non-overlapping pooling drops the remainder rows/cols.
    return size // window


def _conv_out(size: int, k: int, stride: int, padding: str) -> int:
    if padding == "same":
        return -(-size // stride)
    return (size - k) // stride + 1


def infer_shapes(arch: ModelArch) -> list[tuple[int, ...]]:
    """Per-layer output shapes (sample shapes, no batch axis).

    Raises ConfigError naming the offending layer index when adjacent
    layers are incompatible.
    """
    shapes = []
    cur = tuple(arch.input_shape)
    for i, spec in enumerate(arch.layers):
        kind = spec.kind
        if kind == "conv2d":
            if len(cur) != 3:
                raise ConfigError(f"layer {i}: conv2d needs a (H, W, C) input, got {cur}")
            k = spec.kernel
            if cur[2] != k.i:
                raise ConfigError(
                    f"layer {i}: conv2d expects {k.i} input channels, got {cur[2]}")
            oh = _conv_out(cur[0], k.h, spec.stride, spec.padding)
            ow = _conv_out(cur[1], k.w, spec.stride, spec.padding)
            if oh < 1 or ow < 1:
                raise ConfigError(f"layer {i}: conv2d output collapses to {oh}x{ow}")
            cur = (oh, ow, k.o)
        elif kind == "dense":
            if len(cur) != 1:
                raise ConfigError(f"layer {i}: dense needs a flat input, got {cur}")
            if cur[0] != spec.in_units:
                raise ConfigError(
                    f"layer {i}: dense expects {spec.in_units} inputs, got {cur[0]}")
            cur = (spec.out_units,)
        elif kind == "maxpool":
            if len(cur) != 3:
                raise ConfigError(f"layer {i}: maxpool needs a (H, W, C) input, got {cur}")
            oh, ow = _pool_out(cur[0], spec.window), _pool_out(cur[1], spec.window)
            if oh < 1 or ow < 1:
                raise ConfigError(f"layer {i}: maxpool window {spec.window} too large for {cur}")
            cur = (oh, ow, cur[2])
        elif kind == "gap":
            if len(cur) != 3:
                raise ConfigError(f"layer {i}: gap needs a (H, W, C) input, got {cur}")
            cur = (cur[2],)
        elif kind == "flatten":
            cur = (int(np.prod(cur)),)
        elif kind in ("relu", "dropout"):
            pass
        elif kind == "softmax":
            if len(cur) != 1:
                raise ConfigError(f"layer {i}: softmax needs a flat input, got {cur}")
        else:
            raise ConfigError(f"layer {i}: unknown layer kind {kind!r}")
        shapes.append(cur)
    return shapes


def validate_arch(arch: ModelArch) -> None:
    """Full structural validation; raises ConfigError on any problem."""
    if not arch.layers:
        raise ConfigError("model has no layers")
    infer_shapes(arch)
    if arch.layers[-1].kind != "softmax":
        raise ConfigError("final layer must be softmax")
    if any(s.kind == "softmax" for s in arch.layers[:-1]):
        raise ConfigError("softmax is only supported as the final layer")


def shape_before(arch: ModelArch, index: int) -> tuple[int, ...]:
    """Sample shape entering ``arch.layers[index]``."""
    if index == 0:
        return tuple(arch.input_shape)
    return infer_shapes(arch)[index - 1]


def trainable_indices(arch: ModelArch) -> list[int]:
    return [i for i, s in enumerate(arch.layers) if s.kind in TRAINABLE_KINDS]


def next_trainable(arch: ModelArch, index: int) -> int | None:
    """Index of the next trainable layer after ``index``, walking through
    relu/dropout/pool/flatten/gap. None if the chain ends first."""
    for j in range(index + 1, len(arch.layers)):
        kind = arch.layers[j].kind
        if kind in TRAINABLE_KINDS:
            return j
        if kind not in PASS_THROUGH_KINDS:
            return None
    return None


# ---------------------------------------------------------------------------
# Parameter initialization and counting

INIT_SCHEMES = ("fanin_truncnorm", "truncnorm", "he")


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    # Resample (not clip) draws beyond two standard deviations.
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(DTYPE)


def _init_std(scheme: str, fan_in: int) -> float:
    if scheme == "fanin_truncnorm":
        return 0.1 / np.sqrt(fan_in)
    if scheme == "truncnorm":
        return 0.1
    if scheme == "he":
        return float(np.sqrt(2.0 / fan_in))
    raise ConfigError(f"unknown init scheme {scheme!r}")


def init_params(arch: ModelArch, rng: np.random.Generator,
                scheme: str = "truncnorm") -> Params:
    """Fresh trainable parameters: truncated-normal weights, zero biases."""
    params: Params = {}
    for i in trainable_indices(arch):
        spec = arch.layers[i]
        if spec.kind == "conv2d":
            k = spec.kernel
            fan_in = k.h * k.w * k.i
            w = _truncated_normal(rng, (k.h, k.w, k.i, k.o), _init_std(scheme, fan_in))
            b = np.zeros(k.o, dtype=DTYPE)
        else:
            fan_in = spec.in_units
            w = _truncated_normal(rng, (spec.in_units, spec.out_units),
                                  _init_std(scheme, fan_in))
            b = np.zeros(spec.out_units, dtype=DTYPE)
        params[i] = LayerParams(w, b)
    return params


def copy_params(params: Params) -> Params:
    return {i: LayerParams(p.w.copy(), p.b.copy()) for i, p in params.items()}


def count_params(arch: ModelArch) -> int:
    """Exact number of trainable scalars (weights plus biases)."""
    total = 0
    for spec in arch.layers:
        if spec.kind == "conv2d":
            k = spec.kernel
            total += k.h * k.w * k.i * k.o + k.o
        elif spec.kind == "dense":
            total += spec.in_units * spec.out_units + spec.out_units
    return total


def forward_flops(arch: ModelArch) -> int:
    """Per-sample forward FLOPs (2 per multiply-accumulate) for the MAC layers."""
    shapes = infer_shapes(arch)
    macs = 0
    for i, spec in enumerate(arch.layers):
        if spec.kind == "conv2d":
            oh, ow, co = shapes[i]
            k = spec.kernel
            macs += oh * ow * k.h * k.w * k.i * co
        elif spec.kind == "dense":
            macs += spec.in_units * spec.out_units
    return 2 * macs


def fwd_bwd_flops(arch: ModelArch) -> int:
    """Per-sample forward+backward FLOP estimate (3x the forward cost)."""
    return 3 * forward_flops(arch)


# ---------------------------------------------------------------------------
# Forward / backward


def _pad_spec(size: int, k: int, stride: int, padding: str):
    out = _conv_out(size, k, stride, padding)
    if padding == "valid":
        return 0, 0, out
    total = max((out - 1) * stride + k - size, 0)
    lo = total // 2
    return lo, total - lo, out


def _conv_forward(x, w, b, stride, padding):
    """Patch-matrix convolution.

    Returns (output, saved) where saved carries the materialized patch
    matrix so the backward pass reuses it for the weight gradient
    instead of re-extracting windows.
    """
    kh, kw, ci, co = w.shape
    n, h, wd, _ = x.shape
    ph_lo, ph_hi, oh = _pad_spec(h, kh, stride, padding)
    pw_lo, pw_hi, ow = _pad_spec(wd, kw, stride, padding)
    if ph_lo or ph_hi or pw_lo or pw_hi:
        xp = np.pad(x, ((0, 0), (ph_lo, ph_hi), (pw_lo, pw_hi), (0, 0)))
    else:
        xp = x
    if kh == 1 and kw == 1 and stride == 1:
        cols = xp.reshape(n * oh * ow, ci)  # pointwise conv: no patch copy
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
        # (n, oh, ow, ci, kh, kw) -> rows ordered (kh, kw, ci) to match
        # w.reshape(kh*kw*ci, co).
        cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
        cols = cols.reshape(n * oh * ow, kh * kw * ci)
    out = cols @ w.reshape(-1, co) + b
    saved = (xp.shape, cols, (ph_lo, pw_lo), (oh, ow))
    return out.reshape(n, oh, ow, co), saved


def _conv_backward(g, w, stride, saved, x_shape, need_dx=True):
    xp_shape, cols, (ph_lo, pw_lo), (oh, ow) = saved
    kh, kw, ci, co = w.shape
    n, h, wd, _ = x_shape
    g2 = g.reshape(-1, co)
    gw = (cols.T @ g2).reshape(kh, kw, ci, co)
    gb = g.sum(axis=(0, 1, 2), dtype=g.dtype)
    if not need_dx:
        return None, gw, gb

    dcols = g2 @ w.reshape(-1, co).T  # (n*oh*ow, kh*kw*ci)
    if kh == 1 and kw == 1 and stride == 1:
        dxp = dcols.reshape(xp_shape)
    else:
        # col2im: every patch row adds back into its source window.
        dcols = dcols.reshape(n, oh, ow, kh, kw, ci)
        dxp = np.zeros(xp_shape, dtype=g.dtype)
        for u in range(kh):
            hi = u + (oh - 1) * stride + 1
            for v in range(kw):
                wi = v + (ow - 1) * stride + 1
                dxp[:, u:hi:stride, v:wi:stride, :] += dcols[:, :, :, u, v, :]
    gx = dxp[:, ph_lo:ph_lo + h, pw_lo:pw_lo + wd, :]
    return np.ascontiguousarray(gx, dtype=g.dtype), gw, gb


def _maxpool_forward(x, window, want_indices):
    n, h, w, c = x.shape
    oh, ow = h // window, w // window
    xr = x[:, :oh * window, :ow * window, :].reshape(n, oh, window, ow, window, c)
    if not want_indices:
        return np.ascontiguousarray(xr.max(axis=(2, 4))), None
    xt = xr.transpose(0, 1, 3, 5, 2, 4).reshape(n, oh, ow, c, window * window)
    idx = xt.argmax(axis=-1)
    out = np.take_along_axis(xt, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out, dtype=x.dtype), idx


def _maxpool_backward(g, idx, window, x_shape):
    n, h, w, c = x_shape
    oh, ow = h // window, w // window
    gt = np.zeros((n, oh, ow, c, window * window), dtype=g.dtype)
    np.put_along_axis(gt, idx[..., None], g[..., None], axis=-1)
    gr = gt.reshape(n, oh, ow, c, window, window).transpose(0, 1, 4, 2, 5, 3)
    gx = np.zeros(x_shape, dtype=g.dtype)
    gx[:, :oh * window, :ow * window, :] = gr.reshape(n, oh * window, ow * window, c)
    return gx


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_batch(arch, x):
    # float32 is the working precision; float64 inputs are honored so the
    # same formulas can be verified at higher precision in tests.
    x = np.asarray(x)
    if x.dtype != np.float64:
        x = x.astype(DTYPE, copy=False)
    if x.shape[1:] != tuple(arch.input_shape):
        raise ConfigError(
            f"batch shape {x.shape[1:]} does not match model input {tuple(arch.input_shape)}")
    return x


def _run_layers(arch, params, x, mode, rng, upto, tape):
    """Forward through layers [0, upto); appends per-layer saves to tape if given."""
    a = x
    for i in range(upto):
        spec = arch.layers[i]
        kind = spec.kind
        if kind == "conv2d":
            p = params[i]
            if a.shape[3] != p.w.shape[2]:
                raise ConfigError(f"layer {i}: conv2d expects {p.w.shape[2]} channels, "
                                  f"got {a.shape[3]}")
            out, saved = _conv_forward(a, p.w, p.b, spec.stride, spec.padding)
            if tape is not None:
                tape.append((a.shape, saved))
            a = out
        elif kind == "dense":
            p = params[i]
            if a.shape[1] != p.w.shape[0]:
                raise ConfigError(f"layer {i}: dense expects {p.w.shape[0]} inputs, "
                                  f"got {a.shape[1]}")
            if tape is not None:
                tape.append(a)
            a = a @ p.w + p.b
        elif kind == "relu":
            if tape is not None:
                tape.append(a > 0)
            a = np.maximum(a, 0)
        elif kind == "dropout":
            if mode == "train" and spec.rate > 0.0:
                if rng is None:
                    raise ConfigError("train-mode forward with dropout requires an rng")
                keep = rng.random(a.shape, dtype=np.float32) >= spec.rate
                scale = a.dtype.type(1.0 / (1.0 - spec.rate))
                if tape is not None:
                    tape.append((keep, scale))
                a = a * keep * scale
            else:
                if tape is not None:
                    tape.append(None)
        elif kind == "maxpool":
            out, idx = _maxpool_forward(a, spec.window, tape is not None)
            if tape is not None:
                tape.append((a.shape, idx))
            a = out
        elif kind == "gap":
            if tape is not None:
                tape.append(a.shape)
            a = a.mean(axis=(1, 2), dtype=a.dtype)
        elif kind == "flatten":
            if tape is not None:
                tape.append(a.shape)
            a = a.reshape(a.shape[0], -1)
        elif kind == "softmax":
            a = _softmax(a)
        else:
            raise ConfigError(f"layer {i}: unknown layer kind {kind!r}")
    return a


def forward(arch: ModelArch, params: Params, batch: np.ndarray,
            mode: str = "eval", rng: np.random.Generator | None = None) -> np.ndarray:
    """Per-class probabilities for a batch.

    In eval mode dropout is the identity and the result is a pure
    function of (arch, params, batch). Train mode additionally consumes
    dropout masks from ``rng``.
    """
    if mode not in ("train", "eval"):
        raise ConfigError(f"unknown forward mode {mode!r}")
    x = _check_batch(arch, batch)
    return _run_layers(arch, params, x, mode, rng, len(arch.layers), None)


def gradients(arch: ModelArch, params: Params, batch: np.ndarray, labels: np.ndarray,
              rng: np.random.Generator | None = None, mode: str = "train"):
    """Mean cross-entropy loss and its gradients for every trainable layer.

    Returns (loss, grads) with grads[i] = (gw, gb). The softmax and the
    cross-entropy are differentiated jointly for numerical stability.
    """
    x = _check_batch(arch, batch)
    labels = np.asarray(labels)
    n_classes = arch.num_classes
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ConfigError(f"labels must be integer class ids in [0, {n_classes})")
    if arch.layers[-1].kind != "softmax":
        raise ConfigError("final layer must be softmax")

    tape: list = []
    logits = _run_layers(arch, params, x, mode, rng, len(arch.layers) - 1, tape)

    n = x.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = float(-logp[np.arange(n), labels].mean())
    probs = np.exp(logp)

    g = probs.astype(x.dtype)
    g[np.arange(n), labels] -= 1.0
    g /= x.dtype.type(n)

    grads: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    lowest = min(trainable_indices(arch))
    for i in range(len(arch.layers) - 2, -1, -1):
        spec = arch.layers[i]
        kind = spec.kind
        saved = tape[i]
        if i < lowest:
            break  # nothing below needs a gradient
        if kind == "conv2d":
            x_shape, conv_saved = saved
            g, gw, gb = _conv_backward(g, params[i].w, spec.stride, conv_saved,
                                       x_shape, need_dx=i > lowest)
            grads[i] = (gw, gb)
        elif kind == "dense":
            xin = saved
            gw = xin.T @ g
            gb = g.sum(axis=0, dtype=g.dtype)
            if i > lowest:
                g = g @ params[i].w.T
            grads[i] = (np.ascontiguousarray(gw), gb)
        elif kind == "relu":
            g = g * saved
        elif kind == "dropout":
            if saved is not None:
                keep, scale = saved
                g = g * keep * scale
        elif kind == "maxpool":
            x_shape, idx = saved
            g = _maxpool_backward(g, idx, spec.window, x_shape)
        elif kind == "gap":
            x_shape = saved
            h, w = x_shape[1], x_shape[2]
            g = np.broadcast_to(g[:, None, None, :] / g.dtype.type(h * w),
                                x_shape).astype(g.dtype)
        elif kind == "flatten":
            g = g.reshape(saved)
    return loss, grads


def backward_and_step(arch: ModelArch, params: Params, batch: np.ndarray,
                      labels: np.ndarray, cfg: TrainConfig,
                      rng: np.random.Generator | None = None):
    """One SGD step on a minibatch.

    Returns (updated params, mean loss before the step). Raises
    NumericalError if the loss is not finite.
    """
    loss, grads = gradients(arch, params, batch, labels, rng=rng, mode="train")
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite training loss {loss!r}")
    lr = DTYPE(cfg.learning_rate)
    new_params: Params = {}
    for i, p in params.items():
        if i in grads:
            gw, gb = grads[i]
            new_params[i] = LayerParams(p.w - lr * gw, p.b - lr * gb)
        else:
            new_params[i] = LayerParams(p.w.copy(), p.b.copy())
    return new_params, loss
