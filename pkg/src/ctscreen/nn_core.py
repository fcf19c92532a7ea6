"""From-scratch 3D CNN engine: forward passes, analytic backward passes.

Tensors are numpy arrays shaped (batch, channels, depth, height, width).
"Convolution" is cross-correlation (no kernel flip) with zero padding.
The layer set is closed: conv3d, relu, maxpool3d, batchnorm3d, gap, dense,
dropout, softmax. Models are a flat list of LayerSpec applied in order,
with global average pooling bridging the convolutional stack to the dense
classifier head.

Everything is dtype-polymorphic: float32 for training, float64 when the
finite-difference tests need headroom.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeMismatch(Exception):
    pass


class DegenerateBatch(Exception):
    """Batch statistics need at least two values per channel."""


def _triple(v):
    if v is None:
        return None
    if np.isscalar(v):
        return (int(v),) * 3
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ValueError(f"expected scalar or 3-tuple, got {v!r}")
    return t


# ------------------------------------------------------------------ layers

def conv3d_forward(x, kernel, bias=None, stride=1, padding=0):
    """Cross-correlation; output extent = floor((n + 2p - k)/s) + 1."""
    if x.ndim != 5 or kernel.ndim != 5:
        raise ShapeMismatch("conv3d expects 5D input and kernel")
    if x.shape[1] != kernel.shape[1]:
        raise ShapeMismatch(f"input has {x.shape[1]} channels, kernel expects "
                            f"{kernel.shape[1]}")
    stride, padding = _triple(stride), _triple(padding)
    co, ci, kd, kh, kw = kernel.shape
    pd, ph, pw = padding
    xp = np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    dims = []
    for n, k, s in zip(xp.shape[2:], (kd, kh, kw), stride):
        if n < k:
            raise ShapeMismatch(f"kernel {k} exceeds padded extent {n}")
        dims.append((n - k) // s + 1)
    do, ho, wo = dims
    sd, sh, sw = stride
    out = np.zeros((x.shape[0], co, do, ho, wo), dtype=x.dtype)
    # accumulate one kernel offset at a time over strided input views; this
    # stays O(active data) in memory where im2col would not
    for i in range(kd):
        for j in range(kh):
            for k in range(kw):
                sub = xp[:, :, i:i + sd * do:sd, j:j + sh * ho:sh, k:k + sw * wo:sw]
                out += np.einsum("bcdhw,oc->bodhw", sub, kernel[:, :, i, j, k])
    if bias is not None:
        out += bias.reshape(1, -1, 1, 1, 1)
    return out


def conv3d_backward(x, kernel, grad_out, stride=1, padding=0):
    """Gradients of conv3d_forward w.r.t. (input, kernel, bias)."""
    stride, padding = _triple(stride), _triple(padding)
    co, ci, kd, kh, kw = kernel.shape
    pd, ph, pw = padding
    sd, sh, sw = stride
    do, ho, wo = grad_out.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    grad_xp = np.zeros_like(xp)
    grad_k = np.zeros_like(kernel)
    for i in range(kd):
        for j in range(kh):
            for k in range(kw):
                sub = xp[:, :, i:i + sd * do:sd, j:j + sh * ho:sh, k:k + sw * wo:sw]
                grad_k[:, :, i, j, k] = np.einsum("bcdhw,bodhw->oc", sub, grad_out)
                grad_xp[:, :, i:i + sd * do:sd, j:j + sh * ho:sh, k:k + sw * wo:sw] += \
                    np.einsum("bodhw,oc->bcdhw", grad_out, kernel[:, :, i, j, k])
    grad_x = grad_xp[:, :, pd:xp.shape[2] - pd, ph:xp.shape[3] - ph,
                     pw:xp.shape[4] - pw]
    return np.ascontiguousarray(grad_x), grad_k, grad_out.sum(axis=(0, 2, 3, 4))


def maxpool3d_forward(x, window, stride=None):
    """Max per window; ties resolve to the lowest linear in-window index."""
    window = _triple(window)
    stride = _triple(stride) if stride is not None else window
    if x.ndim != 5:
        raise ShapeMismatch("maxpool3d expects 5D input")
    for n, k in zip(x.shape[2:], window):
        if k > n:
            raise ShapeMismatch(f"pool window {window} exceeds extent {x.shape[2:]}")
    xw = sliding_window_view(x, window, axis=(2, 3, 4))
    xw = xw[:, :, ::stride[0], ::stride[1], ::stride[2]]
    flat = xw.reshape(xw.shape[:5] + (-1,))
    idx = flat.argmax(axis=-1)  # first maximum = lowest linear index
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), (x.shape, window, stride, idx)


def maxpool3d_backward(grad_out, cache):
    x_shape, window, stride, idx = cache
    di, hi, wi = np.unravel_index(idx, window)
    do, ho, wo = idx.shape[2:]
    b = np.arange(x_shape[0]).reshape(-1, 1, 1, 1, 1)
    c = np.arange(x_shape[1]).reshape(1, -1, 1, 1, 1)
    d = np.arange(do).reshape(1, 1, -1, 1, 1) * stride[0] + di
    h = np.arange(ho).reshape(1, 1, 1, -1, 1) * stride[1] + hi
    w = np.arange(wo).reshape(1, 1, 1, 1, -1) * stride[2] + wi
    grad_x = np.zeros(x_shape, dtype=grad_out.dtype)
    # windows may overlap when stride < window, so scatter must accumulate
    np.add.at(grad_x, (np.broadcast_to(b, idx.shape), np.broadcast_to(c, idx.shape),
                       d, h, w), grad_out)
    return grad_x


def batchnorm3d_forward(x, gamma, beta, mode, running_mean, running_var,
                        momentum=0.1, eps=1e-5):
    """Per-channel standardization.

    Train mode normalizes by batch statistics (biased variance) and blends
    running stats toward them; infer mode uses the running stats untouched.
    Returns (out, cache, new_running_mean, new_running_var).
    """
    shape = (1, -1, 1, 1, 1)
    if mode == "train":
        n = x.shape[0] * x.shape[2] * x.shape[3] * x.shape[4]
        if n < 2:
            raise DegenerateBatch("need at least 2 values per channel to normalize")
        mean = x.mean(axis=(0, 2, 3, 4))
        var = x.var(axis=(0, 2, 3, 4))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x - mean.reshape(shape)) * inv.reshape(shape)
        out = gamma.reshape(shape) * xhat + beta.reshape(shape)
        new_rm = (1 - momentum) * running_mean + momentum * mean
        new_rv = (1 - momentum) * running_var + momentum * var
        return out, ("train", xhat, inv, gamma), new_rm, new_rv
    if mode == "infer":
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (x - running_mean.reshape(shape)) * inv.reshape(shape)
        out = gamma.reshape(shape) * xhat + beta.reshape(shape)
        return out, ("infer", xhat, inv, gamma), running_mean, running_var
    raise ValueError(f"mode must be train or infer, got {mode!r}")


def batchnorm3d_backward(grad_out, cache):
    shape = (1, -1, 1, 1, 1)
    if cache[0] == "train":
        _, xhat, inv, gamma = cache
        axes = (0, 2, 3, 4)
        grad_gamma = (grad_out * xhat).sum(axis=axes)
        grad_beta = grad_out.sum(axis=axes)
        n = grad_out.size // grad_out.shape[1]
        # d/dx of ((x - mean)/std): both stats depend on every batch element
        grad_x = (gamma * inv).reshape(shape) * (
            grad_out - (grad_beta / n).reshape(shape)
            - xhat * (grad_gamma / n).reshape(shape))
        return grad_x, grad_gamma, grad_beta
    _, xhat, inv, gamma = cache
    # running stats are constants here, so only the affine part carries grads
    grad_x = grad_out * (gamma * inv).reshape(shape)
    return grad_x, (grad_out * xhat).sum(axis=(0, 2, 3, 4)), \
        grad_out.sum(axis=(0, 2, 3, 4))


def gap_forward(x):
    """Mean over (depth, height, width) per channel: the bridge layer."""
    if x.ndim != 5:
        raise ShapeMismatch("gap expects 5D input")
    return x.mean(axis=(2, 3, 4)), x.shape


def gap_backward(grad_out, x_shape):
    n = x_shape[2] * x_shape[3] * x_shape[4]
    return np.broadcast_to(grad_out[:, :, None, None, None] / n, x_shape).astype(
        grad_out.dtype).copy()


def relu_forward(x):
    return np.maximum(x, 0), x > 0


def relu_backward(grad_out, mask):
    return grad_out * mask


def dense_forward(x, weight, bias):
    if x.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeMismatch(f"dense: input {x.shape} vs weight {weight.shape}")
    return x @ weight + bias, x


def dense_backward(grad_out, weight, x):
    return grad_out @ weight.T, x.T @ grad_out, grad_out.sum(axis=0)


def dropout_forward(x, rate, mode, seed):
    """Inverted dropout: train-time scaling by 1/(1-rate), infer is identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0,1)")
    if mode != "train" or rate == 0.0:
        return x.copy(), None
    seq = seed if isinstance(seed, (list, tuple)) else [int(seed)]
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seq)))
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * mask, mask.astype(x.dtype)


def dropout_backward(grad_out, mask):
    if mask is None:
        return grad_out.copy()
    return grad_out * mask


def softmax_forward(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    return p, p


def softmax_backward(grad_out, p):
    inner = (grad_out * p).sum(axis=1, keepdims=True)
    return p * (grad_out - inner)


# ------------------------------------------------------------------- specs

KINDS = ("conv3d", "relu", "maxpool3d", "batchnorm3d", "gap", "dense",
         "dropout", "softmax")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    kernel: tuple = None        # conv3d: (kd, kh, kw)
    stride: tuple = None        # conv3d/maxpool3d; pool default = window
    padding: tuple = None       # conv3d
    out_channels: int = None    # conv3d
    window: tuple = None        # maxpool3d
    clamp_window: bool = False  # maxpool3d: shrink window to fit small extents
    rate: float = 0.5           # dropout
    units: int = None           # dense
    momentum: float = 0.1       # batchnorm3d
    eps: float = 1e-5           # batchnorm3d

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        for name in ("kernel", "stride", "padding", "window"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, _triple(v))
        if self.kind == "conv3d":
            if self.kernel is None or self.out_channels is None:
                raise ValueError("conv3d needs kernel and out_channels")
            if min(self.kernel) < 1 or self.out_channels < 1:
                raise ValueError("conv3d kernel/out_channels must be positive")
        if self.kind == "maxpool3d" and (self.window is None or min(self.window) < 1):
            raise ValueError("maxpool3d needs a positive window")
        if self.stride is not None and min(self.stride) < 1:
            raise ValueError("stride must be positive")
        if self.kind == "dense" and (self.units is None or self.units < 1):
            raise ValueError("dense needs positive units")
        if self.kind == "dropout" and not 0.0 <= self.rate < 1.0:
            raise ValueError("dropout rate must be in [0,1)")

    def to_dict(self):
        d = {k: v for k, v in asdict(self).items() if v is not None}
        for k in ("kernel", "stride", "padding", "window"):
            if k in d:
                d[k] = list(d[k])
        return d

    @staticmethod
    def from_dict(d):
        return LayerSpec(**d)


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple          # (channels, depth, height, width)
    layers: tuple
    class_count: int

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if len(self.input_shape) != 4 or min(self.input_shape) < 1:
            raise ValueError(f"input_shape must be 4 positive ints, got {self.input_shape}")
        if self.class_count < 2:
            raise ValueError("need at least two classes")
        kinds = [l.kind for l in self.layers]
        if not kinds or kinds[-1] != "softmax":
            raise ValueError("final layer must be softmax")
        if kinds.count("gap") != 1:
            raise ValueError("exactly one gap bridge layer is required")
        bridge = kinds.index("gap")
        head = {"dense", "relu", "dropout", "softmax"}
        body = {"conv3d", "relu", "maxpool3d", "batchnorm3d"}
        for i, k in enumerate(kinds):
            if i < bridge and k not in body:
                raise ValueError(f"layer {i} ({k}) not allowed before the gap bridge")
            if i > bridge and k not in head:
                raise ValueError(f"layer {i} ({k}) not allowed after the gap bridge")

    def to_json(self):
        return json.dumps({
            "input_shape": list(self.input_shape),
            "class_count": self.class_count,
            "layers": [l.to_dict() for l in self.layers],
        }, sort_keys=True)

    @staticmethod
    def from_json(text):
        d = json.loads(text)
        return ModelSpec(tuple(d["input_shape"]),
                         tuple(LayerSpec.from_dict(l) for l in d["layers"]),
                         d["class_count"])


def _pool_geometry(extent, layer):
    window = layer.window
    if layer.clamp_window:
        window = tuple(min(w, n) for w, n in zip(window, extent))
    else:
        for w, n in zip(window, extent):
            if w > n:
                raise ShapeMismatch(f"pool window {layer.window} exceeds extent {extent}")
    stride = layer.stride if layer.stride is not None else window
    return window, stride


def layer_output_shape(in_shape, layer: LayerSpec):
    """Shape algebra for one layer; raises ShapeMismatch when impossible."""
    k = layer.kind
    if k in ("relu", "dropout"):
        return tuple(in_shape)
    if k == "conv3d":
        if len(in_shape) != 4:
            raise ShapeMismatch("conv3d needs (C,D,H,W) input")
        stride = layer.stride or (1, 1, 1)
        padding = layer.padding or (0, 0, 0)
        dims = []
        for n, kk, s, p in zip(in_shape[1:], layer.kernel, stride, padding):
            o = (n + 2 * p - kk) // s + 1
            if n + 2 * p < kk or o < 1:
                raise ShapeMismatch(f"conv kernel {layer.kernel} too large for {in_shape}")
            dims.append(o)
        return (layer.out_channels, *dims)
    if k == "maxpool3d":
        if len(in_shape) != 4:
            raise ShapeMismatch("maxpool3d needs (C,D,H,W) input")
        window, stride = _pool_geometry(in_shape[1:], layer)
        return (in_shape[0],) + tuple(
            (n - w) // s + 1 for n, w, s in zip(in_shape[1:], window, stride))
    if k == "batchnorm3d":
        if len(in_shape) != 4:
            raise ShapeMismatch("batchnorm3d needs (C,D,H,W) input")
        return tuple(in_shape)
    if k == "gap":
        if len(in_shape) != 4:
            raise ShapeMismatch("gap needs (C,D,H,W) input")
        return (in_shape[0],)
    if k == "dense":
        if len(in_shape) != 1:
            raise ShapeMismatch("dense expects a flat feature vector (after gap)")
        return (layer.units,)
    if k == "softmax":
        if len(in_shape) != 1:
            raise ShapeMismatch("softmax expects a flat vector")
        return tuple(in_shape)
    raise ValueError(k)


def model_shapes(spec: ModelSpec):
    """Per-layer output shapes, starting from spec.input_shape."""
    shapes = []
    cur = spec.input_shape
    for layer in spec.layers:
        cur = layer_output_shape(cur, layer)
        shapes.append(cur)
    if shapes[-1] != (spec.class_count,):
        raise ShapeMismatch(f"model emits {shapes[-1]}, expected ({spec.class_count},)")
    return shapes


# ----------------------------------------------------------------- weights

def init_weights(spec: ModelSpec, seed=0, dtype=np.float32):
    """Xavier-normal conv/dense kernels, unit batchnorm, zero biases."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed)])))
    weights = {}
    cur = spec.input_shape
    for i, layer in enumerate(spec.layers):
        out = layer_output_shape(cur, layer)
        if layer.kind == "conv3d":
            kd, kh, kw = layer.kernel
            ci, co = cur[0], layer.out_channels
            fan_in, fan_out = ci * kd * kh * kw, co * kd * kh * kw
            std = np.sqrt(2.0 / (fan_in + fan_out))
            weights[f"L{i}.kernel"] = rng.normal(0, std, (co, ci, kd, kh, kw)).astype(dtype)
            weights[f"L{i}.bias"] = np.zeros(co, dtype=dtype)
        elif layer.kind == "batchnorm3d":
            c = cur[0]
            weights[f"L{i}.gamma"] = np.ones(c, dtype=dtype)
            weights[f"L{i}.beta"] = np.zeros(c, dtype=dtype)
            weights[f"L{i}.running_mean"] = np.zeros(c, dtype=dtype)
            weights[f"L{i}.running_var"] = np.ones(c, dtype=dtype)
        elif layer.kind == "dense":
            fan_in, fan_out = cur[0], layer.units
            std = np.sqrt(2.0 / (fan_in + fan_out))
            weights[f"L{i}.weight"] = rng.normal(0, std, (fan_in, layer.units)).astype(dtype)
            weights[f"L{i}.bias"] = np.zeros(layer.units, dtype=dtype)
        cur = out
    return weights


TRAINABLE_SUFFIXES = ("kernel", "bias", "gamma", "beta", "weight")


def trainable_names(weights):
    return sorted(n for n in weights if n.split(".")[1] in TRAINABLE_SUFFIXES)


# ----------------------------------------------------------------- forward

def _forward(spec, weights, x, mode, seed, caches=None):
    """Run all layers; caches list is filled when a list is passed in.

    Train mode commits batchnorm running stats back into `weights`.
    """
    if x.ndim != 5 or tuple(x.shape[1:]) != spec.input_shape:
        raise ShapeMismatch(f"batch shape {x.shape[1:]} != model input "
                            f"{spec.input_shape}")
    cur = x
    for i, layer in enumerate(spec.layers):
        k = layer.kind
        if k == "conv3d":
            stride = layer.stride or (1, 1, 1)
            padding = layer.padding or (0, 0, 0)
            out = conv3d_forward(cur, weights[f"L{i}.kernel"], weights[f"L{i}.bias"],
                                 stride, padding)
            ctx = (cur,)
        elif k == "relu":
            out, m = relu_forward(cur)
            ctx = (m,)
        elif k == "maxpool3d":
            window, stride = _pool_geometry(cur.shape[2:], layer)
            out, pc = maxpool3d_forward(cur, window, stride)
            ctx = (pc,)
        elif k == "batchnorm3d":
            out, bc, rm, rv = batchnorm3d_forward(
                cur, weights[f"L{i}.gamma"], weights[f"L{i}.beta"], mode,
                weights[f"L{i}.running_mean"], weights[f"L{i}.running_var"],
                layer.momentum, layer.eps)
            if mode == "train":
                dt = weights[f"L{i}.running_mean"].dtype
                weights[f"L{i}.running_mean"] = rm.astype(dt)
                weights[f"L{i}.running_var"] = rv.astype(dt)
            ctx = (bc,)
        elif k == "gap":
            out, xs = gap_forward(cur)
            ctx = (xs,)
        elif k == "dense":
            out, xin = dense_forward(cur, weights[f"L{i}.weight"], weights[f"L{i}.bias"])
            ctx = (xin,)
        elif k == "dropout":
            out, m = dropout_forward(cur, layer.rate, mode, [int(seed), i])
            ctx = (m,)
        elif k == "softmax":
            out, p = softmax_forward(cur)
            ctx = (p,)
        else:
            raise ValueError(k)
        if caches is not None:
            caches.append(ctx)
        cur = out
    return cur


def model_forward(spec, weights, x, mode="infer", seed=0):
    """Class probabilities for a batch; rows sum to 1."""
    return _forward(spec, weights, x, mode, seed)


def _backward_from(spec, weights, caches, grad, start):
    """Backpropagate from layer `start` down to the input; returns grads."""
    grads = {}
    for i in range(start, -1, -1):
        layer = spec.layers[i]
        k = layer.kind
        ctx = caches[i]
        if k == "conv3d":
            stride = layer.stride or (1, 1, 1)
            padding = layer.padding or (0, 0, 0)
            grad, gk, gb = conv3d_backward(ctx[0], weights[f"L{i}.kernel"], grad,
                                           stride, padding)
            grads[f"L{i}.kernel"], grads[f"L{i}.bias"] = gk, gb
        elif k == "relu":
            grad = relu_backward(grad, ctx[0])
        elif k == "maxpool3d":
            grad = maxpool3d_backward(grad, ctx[0])
        elif k == "batchnorm3d":
            grad, gg, gb = batchnorm3d_backward(grad, ctx[0])
            grads[f"L{i}.gamma"], grads[f"L{i}.beta"] = gg, gb
        elif k == "gap":
            grad = gap_backward(grad, ctx[0])
        elif k == "dense":
            grad, gw, gb = dense_backward(grad, weights[f"L{i}.weight"], ctx[0])
            grads[f"L{i}.weight"], grads[f"L{i}.bias"] = gw, gb
        elif k == "dropout":
            grad = dropout_backward(grad, ctx[0])
        elif k == "softmax":
            grad = softmax_backward(grad, ctx[0])
    return grads, grad


def loss_and_grads(spec, weights, x, labels, class_weight_vec=None,
                   mode="train", seed=0):
    """Weighted cross-entropy loss plus gradients for every trainable tensor.

    loss = mean_b w[y_b] * (-log p_b[y_b]). The softmax layer is folded into
    the loss gradient (w[y] * (p - onehot) / B at the logits), so the last
    explicit backward starts just below it.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if class_weight_vec is None:
        class_weight_vec = np.ones(spec.class_count)
    w = np.asarray(class_weight_vec, dtype=np.float64)
    if w.shape != (spec.class_count,):
        raise ShapeMismatch("class weight vector length must equal class_count")
    caches = []
    probs = _forward(spec, weights, x, mode, seed, caches)
    b = x.shape[0]
    picked = probs[np.arange(b), labels]
    sample_w = w[labels]
    loss = float((sample_w * -np.log(np.maximum(picked, 1e-12))).sum() / b)
    grad_logits = probs.astype(np.float64).copy()
    grad_logits[np.arange(b), labels] -= 1.0
    grad_logits *= (sample_w / b)[:, None]
    grad_logits = grad_logits.astype(x.dtype)
    grads, _ = _backward_from(spec, weights, caches, grad_logits,
                              len(spec.layers) - 2)
    return loss, grads, probs


# ---------------------------------------------------- reference architecture

BASE_CHANNELS = (16, 32, 64, 128)
BASE_DENSE_UNITS = 64
BASE_DROPOUT = 0.5


def conv_block(out_channels):
    return [LayerSpec("conv3d", kernel=3, stride=1, padding=1, out_channels=out_channels),
            LayerSpec("relu"),
            LayerSpec("maxpool3d", window=2, clamp_window=True),
            LayerSpec("batchnorm3d")]


def base_model(input_shape, class_count, channels=BASE_CHANNELS):
    """Four conv blocks, GAP bridge, small dense head."""
    layers = []
    for ch in channels:
        layers += conv_block(ch)
    layers += [LayerSpec("gap"),
               LayerSpec("dense", units=BASE_DENSE_UNITS),
               LayerSpec("dropout", rate=BASE_DROPOUT),
               LayerSpec("dense", units=class_count),
               LayerSpec("softmax")]
    return ModelSpec(tuple(input_shape), tuple(layers), class_count)


STEM_LAYER_COUNT = 3  # conv3d, maxpool3d, batchnorm3d


def build_progressive(small_spec: ModelSpec, small_weights, large_input=None,
                      seed=0):
    """Wrap a trained model for a larger input.

    A stem block (conv3d k=3 stride 1 -> maxpool 2 -> batchnorm) is
    prepended to map the larger grid down toward the old one; every carried
    layer keeps its weights bit-for-bit. The stem's output channel count
    equals the small model's input channels, which is what makes the carry
    possible. Default large input doubles each spatial extent.
    """
    ci = small_spec.input_shape[0]
    if large_input is None:
        large_input = (ci,) + tuple(2 * n for n in small_spec.input_shape[1:])
    large_input = tuple(int(v) for v in large_input)
    if large_input[0] != ci:
        raise ShapeMismatch("enlarged input must keep the channel count")
    stem = [LayerSpec("conv3d", kernel=3, stride=1, padding=1, out_channels=ci),
            LayerSpec("maxpool3d", window=2, clamp_window=True),
            LayerSpec("batchnorm3d")]
    large_spec = ModelSpec(large_input, tuple(stem) + small_spec.layers,
                           small_spec.class_count)
    dtype = next(iter(small_weights.values())).dtype
    large_weights = init_weights(large_spec, seed=seed, dtype=dtype)
    for name, tensor in small_weights.items():
        idx, suffix = name[1:].split(".", 1)
        large_weights[f"L{int(idx) + STEM_LAYER_COUNT}.{suffix}"] = tensor.copy()
    return large_spec, large_weights


# -------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"CTCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(spec: ModelSpec, weights, path=None):
    """Self-describing binary: spec JSON, then named little-endian tensors."""
    spec_bytes = spec.to_json().encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(spec_bytes)),
             spec_bytes, struct.pack("<I", len(weights))]
    for name in sorted(weights):
        arr = np.ascontiguousarray(weights[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        dt = le.dtype.str.encode()
        parts.append(struct.pack("<H", len(name)) + name.encode())
        parts.append(struct.pack("<H", len(dt)) + dt)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(le.tobytes())
    blob = b"".join(parts)
    if path is not None:
        with open(path, "wb") as fh:
            fh.write(blob)
    return blob


def load_checkpoint(src):
    """Inverse of save_checkpoint; validates magic and tensor completeness."""
    if isinstance(src, str):
        with open(src, "rb") as fh:
            blob = fh.read()
    else:
        blob = bytes(src)
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file")
    version, spec_len = struct.unpack_from("<HI", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 10
    spec = ModelSpec.from_json(blob[off:off + spec_len].decode())
    off += spec_len
    count, = struct.unpack_from("<I", blob, off)
    off += 4
    weights = {}
    for _ in range(count):
        nlen, = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode()
        off += nlen
        dlen, = struct.unpack_from("<H", blob, off)
        off += 2
        dtype = np.dtype(blob[off:off + dlen].decode())
        off += dlen
        ndim, = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        n = int(np.prod(shape)) * dtype.itemsize
        weights[name] = np.frombuffer(blob, dtype=dtype, count=int(np.prod(shape)),
                                      offset=off).reshape(shape).copy()
        off += n
    expected = set(init_weights(spec, seed=0, dtype=np.float32))
    if set(weights) != expected:
        raise ValueError("checkpoint tensors do not match the declared model spec")
    return spec, weights
