"""Dense float64 CNN primitives with hand-written backward passes.

Every operation works on plain numpy arrays. The public single-sample ops
(`conv2d`, `relu`, `maxpool2`, `dense`, `softmax_xent`) wrap batched cores
that the training loop and the attacks reuse. Gradients are layer-local
backward functions chained in reverse order; there is no autodiff tape.
"""

from __future__ import annotations

import ctypes
from dataclasses import dataclass

import numpy as np


def _tune_malloc() -> None:
    """Keep large freed buffers on the heap instead of returning them to the
    OS; otherwise every fresh multi-MB numpy temporary page-faults on first
    touch, which dominates the conv runtime on this workload."""
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 512 * 1024 * 1024)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 512 * 1024 * 1024)  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass  # non-glibc platform: only costs speed


_tune_malloc()


def as_f64(x) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# batched cores (leading batch axis)
# ---------------------------------------------------------------------------

def _plane_embed(x: np.ndarray, padding: int) -> np.ndarray:
    """[B,C,H,W] -> contiguous channel-major padded plane [C, B, Hp, Wp]."""
    batch, ch, height, width = x.shape
    plane = np.zeros((ch, batch, height + 2 * padding, width + 2 * padding))
    plane[:, :, padding:padding + height, padding:padding + width] = \
        x.transpose(1, 0, 2, 3)
    return plane


def _stack_taps(plane: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Rows of the correlation operand: one contiguous memcpy per (c, u, v) tap.

    Row (c, u, v) at flat position r = b*Hp*Wp + i*Wp + j holds
    plane[c, b, i+u, j+v]; columns beyond the last full window are junk that
    the caller slices away. Built this way the copy runs at memcpy speed,
    which matters: a strided window gather is an order of magnitude slower.
    """
    ch, batch, hp, wp = plane.shape
    flat = plane.reshape(ch, -1)
    length = batch * hp * wp - (kh - 1) * wp - (kw - 1)
    stacked = np.empty((ch * kh * kw, length))
    row = 0
    for c in range(ch):
        src = flat[c]
        for u in range(kh):
            base = u * wp
            for v in range(kw):
                stacked[row] = src[base + v:base + v + length]
                row += 1
    return stacked


def _corr_plane(plane: np.ndarray, kernels: np.ndarray,
                stacked: np.ndarray | None = None):
    """Correlate an embedded plane with kernels -> [B, C_out, Ho, Wo].

    Also returns the tap stack so the parameter-gradient path can reuse it.
    """
    ch, batch, hp, wp = plane.shape
    c_out, _, kh, kw = kernels.shape
    h_out, w_out = hp - kh + 1, wp - kw + 1
    if stacked is None:
        stacked = _stack_taps(plane, kh, kw)
    out_flat = kernels.reshape(c_out, -1) @ stacked
    # valid outputs live at flat positions b*Hp*Wp + i*Wp + j, all inside L
    so = out_flat.strides
    view = np.lib.stride_tricks.as_strided(
        out_flat, shape=(c_out, batch, h_out, w_out),
        strides=(so[0], hp * wp * so[1], wp * so[1], so[1]))
    return np.ascontiguousarray(view.transpose(1, 0, 2, 3)), stacked


def conv2d_forward(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray,
                   padding: int) -> np.ndarray:
    """Cross-correlation with zero padding, stride 1.

    x: [B, C_in, H, W], kernels: [C_out, C_in, kH, kW], bias: [C_out].
    Returns [B, C_out, H', W'] with H' = H + 2*padding - kH + 1.
    """
    batch, c_in, height, width = x.shape
    c_out, kc, kh, kw = kernels.shape
    if kc != c_in:
        raise ValueError(f"kernel input channels {kc} != image channels {c_in}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel size {kh}x{kw} must be odd")
    if padding < 0:
        raise ValueError(f"padding {padding} must be >= 0")
    if bias.shape != (c_out,):
        raise ValueError(f"bias length {bias.shape} != output channels {c_out}")
    h_out = height + 2 * padding - kh + 1
    w_out = width + 2 * padding - kw + 1
    if h_out <= 0 or w_out <= 0:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {height}x{width}")
    out, _ = _corr_plane(_plane_embed(x, padding), kernels)
    out += bias[None, :, None, None]
    return out


def conv2d_backward(dy: np.ndarray, x: np.ndarray, kernels: np.ndarray,
                    padding: int, need_input_grad: bool = True,
                    need_param_grads: bool = True,
                    stacked: np.ndarray | None = None):
    """Backward of conv2d_forward. Returns (dx, dkernels, dbias).

    `stacked` may pass the tap stack cached from the forward pass.
    """
    c_out, c_in, kh, kw = kernels.shape
    batch, _, h_out, w_out = dy.shape
    hp = x.shape[2] + 2 * padding
    wp = x.shape[3] + 2 * padding
    dk = db = dx = None
    if need_param_grads:
        if stacked is None:
            stacked = _stack_taps(_plane_embed(x, padding), kh, kw)
        # dy on the same flat grid as the taps; junk tap columns meet zeros
        dy_grid = np.zeros((c_out, batch, hp, wp))
        dy_grid[:, :, :h_out, :w_out] = dy.transpose(1, 0, 2, 3)
        dy_flat = dy_grid.reshape(c_out, -1)[:, :stacked.shape[1]]
        dk = (dy_flat @ stacked.T).reshape(c_out, c_in, kh, kw)
        db = dy_grid.reshape(c_out, -1).sum(axis=1)
    if need_input_grad:
        # full correlation of dy with spatially flipped, channel-swapped kernels
        back_pad = kh - 1 - padding
        if back_pad < 0:
            raise ValueError(f"padding {padding} > kernel size - 1 is unsupported")
        flipped = np.ascontiguousarray(kernels[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        dx, _ = _corr_plane(_plane_embed(dy, back_pad), flipped)
    return dx, dk, db


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dy * (x > 0.0)


def maxpool2_forward(x: np.ndarray) -> np.ndarray:
    """2x2 non-overlapping max pool over [B, C, H, W]; H and W must be even."""
    batch, ch, height, width = x.shape
    if height % 2 or width % 2:
        raise ValueError(f"maxpool2 needs even spatial dims, got {height}x{width}")
    return x.reshape(batch, ch, height // 2, 2, width // 2, 2).max(axis=(3, 5))


def maxpool2_backward(dy: np.ndarray, x: np.ndarray,
                      pooled: np.ndarray | None = None) -> np.ndarray:
    batch, ch, height, width = x.shape
    if pooled is None:
        pooled = maxpool2_forward(x)
    win = x.reshape(batch, ch, height // 2, 2, width // 2, 2)
    hit = win == pooled.reshape(batch, ch, height // 2, 1, width // 2, 1)
    share = dy.reshape(batch, ch, height // 2, 1, width // 2, 1) \
        / hit.sum(axis=5).sum(axis=3).reshape(batch, ch, height // 2, 1, width // 2, 1)
    return (hit * share).reshape(batch, ch, height, width)  # ties split the gradient


def dense_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Affine map over [B, D]: x @ W.T + b with W of shape [O, D]."""
    if weights.shape[1] != x.shape[1]:
        raise ValueError(f"weight columns {weights.shape[1]} != input length {x.shape[1]}")
    return x @ weights.T + bias


def dense_backward(dy: np.ndarray, x: np.ndarray, weights: np.ndarray,
                   need_input_grad: bool = True, need_param_grads: bool = True):
    dw = db = dx = None
    if need_param_grads:
        dw = dy.T @ x
        db = dy.sum(axis=0)
    if need_input_grad:
        dx = dy @ weights
    return dx, dw, db


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent_forward(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-sample cross-entropy -log softmax(logits)[label], max-subtracted."""
    labels = np.asarray(labels)
    if np.any(labels < 0) or np.any(labels >= logits.shape[-1]):
        raise ValueError(f"label out of range for {logits.shape[-1]} classes")
    z = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    return lse - z[np.arange(len(labels)), labels]


def softmax_xent_backward(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """d(per-sample loss)/d(logits) = softmax - onehot."""
    d = softmax(logits)
    d[np.arange(len(labels)), np.asarray(labels)] -= 1.0
    return d


# ---------------------------------------------------------------------------
# public single-sample ops
# ---------------------------------------------------------------------------

def conv2d(image: np.ndarray, kernels: np.ndarray, bias: np.ndarray,
           padding: int = 0) -> np.ndarray:
    """Cross-correlate one [C_in, H, W] image with [C_out, C_in, kH, kW] kernels."""
    out = conv2d_forward(as_f64(image)[None], as_f64(kernels), as_f64(bias), padding)[0]
    if not np.isfinite(out).all():
        raise ValueError("conv2d produced non-finite values")
    return out


def relu(x: np.ndarray) -> np.ndarray:
    """Elementwise max(0, x)."""
    return relu_forward(as_f64(x))


def maxpool2(image: np.ndarray) -> np.ndarray:
    """2x2 max pool of one [C, H, W] image."""
    return maxpool2_forward(as_f64(image)[None])[0]


def dense(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """W @ x + b for a single vector x."""
    out = dense_forward(as_f64(x)[None], as_f64(weights), as_f64(bias))[0]
    if not np.isfinite(out).all():
        raise ValueError("dense produced non-finite values")
    return out


def softmax_xent(logits: np.ndarray, label: int) -> float:
    """Cross-entropy of one logit vector against an integer class label."""
    return float(softmax_xent_forward(as_f64(logits)[None], np.array([label]))[0])


# ---------------------------------------------------------------------------
# layer chain
# ---------------------------------------------------------------------------

class Conv:
    """3x3-style convolution layer bound to parameter arrays (views allowed).

    With `cache_stack` set (training), the forward tap stack is kept in the
    cache so the kernel-gradient pass does not rebuild it.
    """

    def __init__(self, kernels: np.ndarray, bias: np.ndarray, padding: int = 1,
                 cache_stack: bool = False):
        self.kernels = kernels
        self.bias = bias
        self.padding = padding
        self.cache_stack = cache_stack

    def param_arrays(self):
        return [self.kernels, self.bias]

    def forward(self, x):
        out, stacked = _corr_plane(_plane_embed(x, self.padding), self.kernels)
        out += self.bias[None, :, None, None]
        return out, (x, stacked if self.cache_stack else None)

    def backward(self, dy, cache, need_input_grad=True, need_param_grads=True):
        x, stacked = cache
        dx, dk, db = conv2d_backward(dy, x, self.kernels, self.padding,
                                     need_input_grad, need_param_grads,
                                     stacked=stacked)
        return dx, [dk, db]


class ReLU:
    def param_arrays(self):
        return []

    def forward(self, x):
        return relu_forward(x), x

    def backward(self, dy, cache, need_input_grad=True, need_param_grads=True):
        return relu_backward(dy, cache), []


class MaxPool2:
    def param_arrays(self):
        return []

    def forward(self, x):
        y = maxpool2_forward(x)
        return y, (x, y)

    def backward(self, dy, cache, need_input_grad=True, need_param_grads=True):
        return maxpool2_backward(dy, cache[0], pooled=cache[1]), []


class Flatten:
    def param_arrays(self):
        return []

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, cache, need_input_grad=True, need_param_grads=True):
        return dy.reshape(cache), []


class Dense:
    def __init__(self, weights: np.ndarray, bias: np.ndarray):
        self.weights = weights
        self.bias = bias

    def param_arrays(self):
        return [self.weights, self.bias]

    def forward(self, x):
        return dense_forward(x, self.weights, self.bias), x

    def backward(self, dy, cache, need_input_grad=True, need_param_grads=True):
        dx, dw, db = dense_backward(dy, cache, self.weights,
                                    need_input_grad, need_param_grads)
        return dx, [dw, db]


def chain_forward(layers, x: np.ndarray, keep_caches: bool = True):
    """Run a batch through the layer chain; returns (output, caches)."""
    caches = []
    for layer in layers:
        x, cache = layer.forward(x)
        caches.append(cache if keep_caches else None)
    return x, caches


def chain_backward(layers, caches, dy: np.ndarray, need_input_grad: bool = True,
                   need_param_grads: bool = True, start: int | None = None):
    """Backpropagate dy from chain position `start` (default: the end).

    Returns (dx, grads) where grads lists one [dparam, ...] entry per layer,
    aligned with `layers`; entries are [] for parameter-free layers and None
    for layers after `start`.
    """
    if start is None:
        start = len(layers) - 1
    grads: list = [None] * len(layers)
    for i in range(start, -1, -1):
        need_dx = need_input_grad or i > 0
        dy, g = layers[i].backward(dy, caches[i], need_dx, need_param_grads)
        grads[i] = g
    return dy, grads


def flatten_param_grads(layers, grads) -> np.ndarray:
    """Concatenate per-layer parameter gradients in chain order."""
    parts = []
    for layer, g in zip(layers, grads):
        if g:
            parts.extend(a.ravel() for a in g)
    if not parts:
        return np.zeros(0)
    return np.concatenate(parts)


@dataclass
class GradientPair:
    """Loss with its exact gradients w.r.t. the input and all parameters."""
    loss: float
    grad_input: np.ndarray
    grad_params: np.ndarray


def loss_and_gradients(layers, image: np.ndarray, label: int) -> GradientPair:
    """Reverse-mode gradients of softmax_xent(chain(image), label).

    `layers` is the forward chain (e.g. ModelParams.layers()); the returned
    grad_params concatenates every layer's parameter gradients in chain order,
    matching the model's flat parameter layout.
    """
    x = as_f64(image)[None]
    logits, caches = chain_forward(layers, x)
    labels = np.array([label])
    loss = float(softmax_xent_forward(logits, labels)[0])
    if not np.isfinite(loss):
        raise ValueError("loss is non-finite")
    dlogits = softmax_xent_backward(logits, labels)
    dx, grads = chain_backward(layers, caches, dlogits)
    return GradientPair(loss=loss, grad_input=dx[0], grad_params=flatten_param_grads(layers, grads))
