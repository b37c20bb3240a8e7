"""Layer primitives with hand-derived backward passes.

Every ``*_forward`` returns ``(out, cache)`` and the matching ``*_backward``
consumes that cache. Image tensors are ``(C, H, W)`` or batched
``(B, C, H, W)``; all spatial operations preserve ``H x W``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import check_finite


@dataclass
class ConvLayer:
    kernels: np.ndarray  # (out_maps, in_maps, k, k)
    bias: np.ndarray     # (out_maps,)

    def __post_init__(self):
        if self.kernels.ndim != 4 or self.kernels.shape[2] != self.kernels.shape[3]:
            raise ValueError(f"kernels must be (O, C, k, k), got {self.kernels.shape}")
        if self.kernels.shape[2] % 2 == 0:
            raise ValueError("kernel size must be odd")
        if self.bias.shape != (self.kernels.shape[0],):
            raise ValueError("bias length must equal out_maps")

    @property
    def in_maps(self) -> int:
        return self.kernels.shape[1]

    @property
    def out_maps(self) -> int:
        return self.kernels.shape[0]

    @property
    def size(self) -> int:
        return self.kernels.shape[2]


def _as_batch(x):
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ValueError(f"expected (C,H,W) or (B,C,H,W), got shape {x.shape}")
    return x, False


def _flat_padded(x, p):
    """Zero-pad (B,C,H,W) by ``p`` and lay it out as (C, B*Hp*Wp).

    In this layout a kernel tap at offset (u, v) is a constant shift of
    ``u*Wp + v`` along the last axis, so each tap of the correlation is a
    single GEMM over a strided view with no patch copies. Outputs at
    positions that wrap past a row or image end are discarded.
    """
    b, c, h, w = x.shape
    xf = np.zeros((c, b, h + 2 * p, w + 2 * p), dtype=x.dtype)
    xf[:, :, p:p + h, p:p + w] = x.transpose(1, 0, 2, 3)
    return xf.reshape(c, -1)


_TAP_BLOCK_BYTES = 32 << 20


def _correlate(x, w):
    """Zero-padded stride-1 cross-correlation of (B,C,H,W) with (O,C,k,k), as a float64 view."""
    b, _, h, wd = x.shape
    o, _, k, _ = w.shape
    p = k // 2
    wp = wd + 2 * p
    xf = _flat_padded(x, p)
    n = xf.shape[1] - (k - 1) * (wp + 1)
    # one float64 GEMM over all taps, so float32 outputs are rounded once at the end;
    # the tap matrix is built in column blocks to bound memory
    c = xf.shape[0]
    xd = xf.astype(np.float64, copy=False)
    wm = np.ascontiguousarray(w.transpose(0, 2, 3, 1), dtype=np.float64).reshape(o, k * k * c)
    out = np.zeros((o, xf.shape[1]), dtype=np.float64)
    block = max(1024, _TAP_BLOCK_BYTES // (8 * k * k * c))
    cols = np.empty((k, k, c, min(block, n)), dtype=np.float64)
    for start in range(0, n, block):
        stop = min(start + block, n)
        m = stop - start
        for u in range(k):
            for v in range(k):
                off = u * wp + v + start
                cols[u, v, :, :m] = xd[:, off:off + m]
        out[:, start:stop] = wm @ cols.reshape(k * k * c, -1)[:, :m]
    out = out.reshape(o, b, h + 2 * p, wp)[:, :, :h, :wd]
    return out.transpose(1, 0, 2, 3), xf


def conv2d_forward(x, layer: ConvLayer):
    xb, squeeze = _as_batch(x)
    if xb.shape[1] != layer.in_maps:
        raise ValueError(f"input has {xb.shape[1]} channels, layer expects {layer.in_maps}")
    acc, xf = _correlate(xb, layer.kernels)
    acc += layer.bias[None, :, None, None]
    out = acc.astype(np.result_type(xb, layer.kernels), order="C")  # one rounding
    return (out[0] if squeeze else out), (xf, xb.shape, layer, squeeze)


def conv2d_backward(grad_out, cache):
    """Returns ``(grad_x, grad_kernels, grad_bias)``."""
    if cache is None:
        raise ValueError("conv2d_backward called without a forward cache")
    xf, (b, c, h, wd), layer, squeeze = cache
    g, _ = _as_batch(grad_out)
    kernels = layer.kernels
    o, k = layer.out_maps, layer.size
    p = k // 2
    wp = wd + 2 * p
    grad_bias = g.sum(axis=(0, 2, 3))
    # gradient laid out on the padded grid, zero at discarded positions
    gf = np.zeros((o, b, h + 2 * p, wp), dtype=g.dtype)
    gf[:, :, :h, :wd] = g.transpose(1, 0, 2, 3)
    gf = gf.reshape(o, -1)
    n = gf.shape[1] - (k - 1) * (wp + 1)
    gf = gf[:, :n]
    grad_taps = np.empty((k, k, o, c), dtype=kernels.dtype)
    taps_t = np.ascontiguousarray(kernels.transpose(2, 3, 1, 0))  # (k, k, C, O)
    gxf = np.zeros_like(xf)
    for u in range(k):
        for v in range(k):
            off = u * wp + v
            grad_taps[u, v] = gf @ xf[:, off:off + n].T
            gxf[:, off:off + n] += taps_t[u, v] @ gf
    grad_kernels = np.ascontiguousarray(grad_taps.transpose(2, 3, 0, 1))
    grad_x = gxf.reshape(c, b, h + 2 * p, wp)[:, :, p:p + h, p:p + wd].transpose(1, 0, 2, 3)
    grad_x = np.ascontiguousarray(grad_x)
    return (grad_x[0] if squeeze else grad_x), grad_kernels, grad_bias


def relu_forward(x):
    x = np.asarray(x)
    return np.maximum(x, 0), x


def relu_backward(grad_out, cache):
    return grad_out * (cache > 0)


# 2x2 window offsets in scan order; argmax ties resolve to the earliest.
_POOL_OFFSETS = ((0, 0), (0, 1), (1, 0), (1, 1))


def maxpool2d_s1_forward(x):
    """2x2 max-pool with stride 1; bottom/right border is edge-replicated."""
    x = np.asarray(x)
    h, w = x.shape[-2:]
    pad = [(0, 0)] * (x.ndim - 2) + [(0, 1), (0, 1)]
    xp = np.pad(x, pad, mode="edge")
    cands = [xp[..., i:i + h, j:j + w] for i, j in _POOL_OFFSETS]
    out = np.maximum(np.maximum(cands[0], cands[1]), np.maximum(cands[2], cands[3]))
    # index of the first candidate equal to the max
    idx = np.full(out.shape, 3, dtype=np.uint8)
    for n in (2, 1, 0):
        idx[cands[n] == out] = n
    return out, (idx, x.shape)


def maxpool2d_s1_backward(grad_out, cache):
    idx, shape = cache
    h, w = shape[-2:]
    gp = np.zeros(shape[:-2] + (h + 1, w + 1), dtype=grad_out.dtype)
    for n, (i, j) in enumerate(_POOL_OFFSETS):
        gp[..., i:i + h, j:j + w] += np.where(idx == n, grad_out, 0)
    grad_x = gp[..., :h, :w].copy()
    # fold replicated border cells back onto their source pixels
    grad_x[..., h - 1, :] += gp[..., h, :w]
    grad_x[..., :, w - 1] += gp[..., :h, w]
    grad_x[..., h - 1, w - 1] += gp[..., h, w]
    return grad_x


def dense_forward(x, weights, bias):
    """Affine map ``W @ x + b`` on a vector or a batch of row vectors."""
    x = np.asarray(x)
    if x.shape[-1] != weights.shape[1]:
        raise ValueError(f"input length {x.shape[-1]} != weight columns {weights.shape[1]}")
    return x @ weights.T + bias, (x, weights)


def dense_backward(grad_out, cache):
    """Returns ``(grad_x, grad_weights, grad_bias)``."""
    x, weights = cache
    g2 = grad_out.reshape(-1, weights.shape[0])
    x2 = x.reshape(-1, weights.shape[1])
    return grad_out @ weights, g2.T @ x2, g2.sum(axis=0)


def pixel_softmax(logits):
    """Softmax over the class axis (-3) of ``(L,H,W)`` or ``(B,L,H,W)`` logits."""
    logits = np.asarray(logits)
    if logits.shape[-3] < 2:
        raise ValueError("pixel_softmax needs at least two classes")
    z = logits - logits.max(axis=-3, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-3, keepdims=True)


def cross_entropy_loss(probs, labels, pixel_weights=None):
    """Weighted mean pixelwise cross-entropy.

    ``probs`` are softmax outputs with classes on axis -3; ``labels`` has the
    same shape minus that axis. Returns ``(loss, grad_logits)`` where the
    gradient is taken through the softmax.
    """
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    n_classes = probs.shape[-3]
    if labels.shape != probs.shape[:-3] + probs.shape[-2:]:
        raise ValueError(f"labels shape {labels.shape} incompatible with probs {probs.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    labels = labels.astype(np.intp)
    if pixel_weights is None:
        pixel_weights = np.ones(labels.shape, dtype=probs.dtype)
    norm = float(np.sum(pixel_weights, dtype=np.float64))
    if norm <= 0:
        raise ValueError("pixel weights sum to zero")
    onehot = np.moveaxis(np.eye(n_classes, dtype=probs.dtype)[labels], -1, -3)
    p_true = np.take_along_axis(probs, np.expand_dims(labels, -3), axis=-3)
    p_true = np.squeeze(p_true, -3)
    tiny = np.finfo(probs.dtype).tiny
    loss = float(np.sum(pixel_weights * -np.log(np.maximum(p_true, tiny)), dtype=np.float64)) / norm
    w = np.expand_dims(pixel_weights, -3)
    grad = ((probs - onehot) * w / norm).astype(probs.dtype)
    return loss, grad


@dataclass
class SgdState:
    learning_rate: float = 1e-3
    momentum: float = 0.9
    decay: float = 1e-4
    weight_decay: float = 0.0
    iterations: int = 0
    velocity: dict = field(default_factory=dict)

    @property
    def current_lr(self) -> float:
        return self.learning_rate / (1.0 + self.decay * self.iterations)


def sgd_nesterov_step(params: dict, grads: dict, state: SgdState) -> dict:
    """One Nesterov momentum step, in place over the parameters named in ``grads``.

    ``v <- m v - lr_t g``; ``p <- p + m v - lr_t g`` with ``g`` including the
    L2 term and ``lr_t = lr / (1 + decay t)``.
    """
    lr = state.current_lr
    m = state.momentum
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        if state.weight_decay:
            g = g + state.weight_decay * p
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(p)
        elif v.shape != p.shape:
            raise ValueError(f"velocity shape mismatch for {name}")
        step = (lr * g).astype(p.dtype)
        v *= m
        v -= step
        p += (m * v).astype(p.dtype) - step
        check_finite(p, name)
    state.iterations += 1
    return params
