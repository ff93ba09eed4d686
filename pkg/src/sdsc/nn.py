"""Layer primitives for the CNN and the decoder-only transformer.

Each op computes its forward in numpy and records a fused backward rule, so a
whole batchnorm or attention softmax costs one tape node instead of a dozen.
Images are (batch, channel, height, width); sequences are (batch, time, dim).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DTYPE, ShapeError, Tensor, add, as_tensor, make_op, matmul, mul, relu, take

BN_EPS = 1e-5
LN_EPS = 1e-5
BN_MOMENTUM = 0.1
MASK_VALUE = -1e9


def conv_output_extent(n: int, k: int, stride: int, padding: int) -> int:
    span = n + 2 * padding - k
    if span < 0 or span % stride:
        raise ShapeError(f"non-integral conv output extent for n={n}, k={k}, stride={stride}, pad={padding}")
    return span // stride + 1


def conv2d(x: Tensor, weights: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation via im2col."""
    x = as_tensor(x)
    B, C, H, W = x.shape
    O, I, kh, kw = weights.shape
    if C != I:
        raise ShapeError(f"conv2d channel mismatch: input has {C}, kernel expects {I}")
    Ho = conv_output_extent(H, kh, stride, padding)
    Wo = conv_output_extent(W, kw, stride, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (B, Ho, Wo, C, kh, kw) -> rows of receptive fields
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    wmat = weights.data.reshape(O, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)

    def back(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        gw = (gmat.T @ cols).reshape(weights.shape) if weights.requires_grad else None
        gb = gmat.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(B, Ho, Wo, C, kh, kw)
            gxp = np.zeros(xp.shape, dtype=DTYPE)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weights, bias) if bias is not None else (x, weights)
    return make_op("conv2d", out, inputs, back)


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int) -> "RunningStats":
        return cls(np.zeros(channels, DTYPE), np.ones(channels, DTYPE))


def batchnorm(x: Tensor, scale: Tensor, shift: Tensor, stats: RunningStats, train: bool) -> Tensor:
    """Per-channel batch normalization over every axis except 1.

    In train mode the batch statistics are used and ``stats`` is updated in
    place (momentum 0.1, unbiased variance); eval mode reads ``stats``.
    """
    C = x.shape[1]
    if scale.shape != (C,) or shift.shape != (C,):
        raise ShapeError(f"batchnorm parameters must have length {C}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, C) + (1,) * (x.ndim - 2)
    xd = x.data
    if train:
        if x.shape[0] < 2:
            raise ShapeError("batchnorm in train mode needs a batch of at least 2")
        n = xd.size // C
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        stats.mean[:] = (1 - BN_MOMENTUM) * stats.mean + BN_MOMENTUM * mu
        stats.var[:] = (1 - BN_MOMENTUM) * stats.var + BN_MOMENTUM * var * n / max(n - 1, 1)
    else:
        mu, var = stats.mean, stats.var
    inv = (1.0 / np.sqrt(var + BN_EPS)).astype(DTYPE)
    xhat = (xd - mu.reshape(bshape)) * inv.reshape(bshape)
    out = xhat * scale.data.reshape(bshape) + shift.data.reshape(bshape)

    def back(g):
        gscale = (g * xhat).sum(axis=axes)
        gshift = g.sum(axis=axes)
        gxhat = g * scale.data.reshape(bshape)
        if train:
            m = xd.size // C
            gx = (inv.reshape(bshape) / m) * (
                m * gxhat
                - gxhat.sum(axis=axes, keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            gx = gxhat * inv.reshape(bshape)
        return gx, gscale, gshift

    return make_op("batchnorm", out, (x, scale, shift), back)


def maxpool2x2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 max pool; ties route the gradient to the first index
    in row-major window order."""
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial extents, got {H}x{W}")
    xd = x.data
    corners = [xd[..., 0::2, 0::2], xd[..., 0::2, 1::2], xd[..., 1::2, 0::2], xd[..., 1::2, 1::2]]
    out = np.maximum(np.maximum(corners[0], corners[1]), np.maximum(corners[2], corners[3]))

    def back(g):
        gx = np.zeros(xd.shape, dtype=DTYPE)
        taken = np.zeros(out.shape, dtype=bool)
        for (dy, dx), c in zip(((0, 0), (0, 1), (1, 0), (1, 1)), corners):
            hit = (c == out) & ~taken
            taken |= hit
            gx[..., dy::2, dx::2] = g * hit
        return (gx,)

    return make_op("maxpool2x2", out, (x,), back)


def layernorm(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    D = x.shape[-1]
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(xd.var(axis=-1, keepdims=True) + LN_EPS)
    xhat = (xd - mu) * inv
    out = xhat * scale.data + shift.data

    def back(g):
        red = tuple(range(g.ndim - 1))
        gscale = (g * xhat).sum(axis=red)
        gshift = g.sum(axis=red)
        gxhat = g * scale.data
        gx = (inv / D) * (D * gxhat - gxhat.sum(-1, keepdims=True) - xhat * (gxhat * xhat).sum(-1, keepdims=True))
        return gx, gscale, gshift

    return make_op("layernorm", out, (x, scale, shift), back)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return make_op("softmax", y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy in nats; ``logits`` is (..., C), ``targets`` int (...)."""
    C = logits.shape[-1]
    flat = logits.data.reshape(-1, C)
    t = np.asarray(targets).reshape(-1)
    if t.shape[0] != flat.shape[0]:
        raise ShapeError(f"{flat.shape[0]} logit rows but {t.shape[0]} targets")
    lsm = log_softmax(flat.astype(np.float64))
    n = flat.shape[0]
    loss = -lsm[np.arange(n), t].mean()

    def back(g):
        p = np.exp(lsm)
        p[np.arange(n), t] -= 1.0
        return ((g * p / n).astype(DTYPE).reshape(logits.shape),)

    return make_op("cross_entropy", loss, (logits,), back)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    return take(table, ids)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = matmul(x, w)
    return add(out, b) if b is not None else out


@dataclass
class AttentionBlock:
    """One pre-norm transformer block.

    ``heads`` stacks every head's parameters as (n_heads, 4, d_model, d_head):
    slot 0/1/2 are the query/key/value projections and slot 3 is the head's
    slice of the output projection stored transposed. A head is therefore one
    contiguous group of 4*d_model*d_head weights.
    """

    heads: Tensor
    ln1_scale: Tensor
    ln1_shift: Tensor
    ln2_scale: Tensor
    ln2_shift: Tensor
    ff_w1: Tensor
    ff_b1: Tensor
    ff_w2: Tensor
    ff_b2: Tensor
    head_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.heads.ndim != 4 or self.heads.shape[1] != 4:
            raise ShapeError(f"heads must be (n_heads, 4, d_model, d_head), got {self.heads.shape}")
        if self.head_mask is None:
            self.head_mask = np.ones(self.n_heads, dtype=bool)

    @property
    def n_heads(self) -> int:
        return self.heads.shape[0]

    @property
    def d_model(self) -> int:
        return self.heads.shape[2]

    @property
    def d_head(self) -> int:
        return self.heads.shape[3]


def causal_mask(T: int) -> np.ndarray:
    return np.triu(np.full((T, T), MASK_VALUE, dtype=DTYPE), k=1)


def attention_forward(x: Tensor, block: AttentionBlock, causal: bool = True,
                      heads: Tensor | None = None, context: int | None = None) -> Tensor:
    """Pre-norm block: x + attn(ln1(x)), then + ff(ln2(x)).

    ``heads`` overrides ``block.heads`` (the trainer passes quantized weights
    here). Pruned heads are multiplied out before the output projection.
    """
    B, T, D = x.shape
    if context is not None and T > context:
        raise ShapeError(f"sequence length {T} exceeds context {context}")
    W = block.heads if heads is None else heads
    H, dh = W.shape[0], W.shape[3]

    h = layernorm(x, block.ln1_scale, block.ln1_shift)
    h4 = h.reshape(B, 1, T, D)
    q = matmul(h4, take(W, (slice(None), 0)))  # (B, H, T, dh)
    k = matmul(h4, take(W, (slice(None), 1)))
    v = matmul(h4, take(W, (slice(None), 2)))
    scores = mul(matmul(q, k.swapaxes(-1, -2)), 1.0 / np.sqrt(dh))
    if causal:
        scores = add(scores, causal_mask(T))
    att = softmax(scores, axis=-1)
    ctx = matmul(att, v)  # (B, H, T, dh)
    if not block.head_mask.all():
        ctx = mul(ctx, block.head_mask.astype(DTYPE).reshape(1, H, 1, 1))
    proj = matmul(ctx, take(W, (slice(None), 3)).swapaxes(-1, -2))  # (B, H, T, D)
    x = add(x, proj.sum(axis=1))

    h = layernorm(x, block.ln2_scale, block.ln2_shift)
    ff = linear(relu(linear(h, block.ff_w1, block.ff_b1)), block.ff_w2, block.ff_b2)
    return add(x, ff)
