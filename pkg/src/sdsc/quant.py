"""Learnable-bit-depth quantizer and the analytic size model.

The quantizer maps each weight of group ``g`` onto ``2**e[g] * k`` with integer
``k`` clamped to ``[-2**(b[g]-1), max(2**(b[g]-1) - 1, 0)]``, flooring toward minus
infinity. Its backward pass treats the floor as the identity (straight-through)
while keeping the clamp, which is what lets ``b`` and ``e`` learn.

Groups are always laid out along axis 0 of the weight tensor: output channels
for convolutions, heads for attention blocks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import DTYPE, NonFiniteError, ShapeError, Tensor, as_tensor, make_op, mul, relu

B_MIN, B_MAX = 0.0, 16.0
E_LIMIT = 32.0
LN2 = math.log(2.0)
# Relative slack added before flooring so grid points stored in float32
# re-quantize to themselves (float32 rounding of 2**e * k is ~6e-8 relative).
SNAP = 2.0 ** -22


def _group_view(v: np.ndarray, ndim: int) -> np.ndarray:
    return np.asarray(v, dtype=np.float64).reshape((-1,) + (1,) * (ndim - 1))


def _check_groups(x: np.ndarray, b: np.ndarray, e: np.ndarray) -> None:
    if b.shape != (x.shape[0],) or e.shape != (x.shape[0],):
        raise ShapeError(f"expected {x.shape[0]} groups along axis 0, got b{b.shape} e{e.shape}")
    if not (np.isfinite(x).all() and np.isfinite(b).all() and np.isfinite(e).all()):
        raise NonFiniteError("quantize received non-finite input")


def _upper(bb):
    # below one bit the ceiling 2**(b-1) - 1 turns negative; hold it at zero so
    # q(0) stays 0 and the grid fits in ceil(b) bits
    return np.maximum(np.exp2(bb - 1) - 1, 0.0)


def quantize_array(x: np.ndarray, b: np.ndarray, e: np.ndarray) -> np.ndarray:
    """Forward quantizer on plain arrays (float64 internally, float32 out)."""
    x = np.asarray(x)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    e = np.asarray(e, dtype=np.float64).reshape(-1)
    _check_groups(x, b, e)
    bb, ee = _group_view(b, x.ndim), _group_view(e, x.ndim)
    scale = np.exp2(ee)
    xs = x.astype(np.float64) / scale
    hi = _upper(bb)
    c = np.minimum(np.maximum(xs, -np.exp2(bb - 1)), hi)
    # the snap must not lift a clamped value past a non-integer upper bound
    k = np.minimum(np.floor(c + np.abs(c) * SNAP), np.floor(hi))
    out = np.where(bb > 0, k * scale, 0.0)
    return out.astype(DTYPE)


def quantize_backward(upstream: np.ndarray, x: np.ndarray, b: np.ndarray, e: np.ndarray):
    """Gradients (dx, db, de) of the clamp surrogate ``2**e * clamp(x / 2**e)``.

    Inside the clamp range the surrogate is the identity in ``x``; a clamped
    element passes nothing to ``x`` and feeds ``b`` and ``e`` through the
    saturated value. Groups with ``b <= 0`` receive no gradient at all.
    """
    x = np.asarray(x)
    g = np.asarray(upstream, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    e = np.asarray(e, dtype=np.float64).reshape(-1)
    bb, ee = _group_view(b, x.ndim), _group_view(e, x.ndim)
    scale = np.exp2(ee)
    xs = x.astype(np.float64) / scale
    half = np.exp2(bb - 1)
    lo, hi = -half, _upper(bb)
    low = xs < lo
    high = (xs > hi) & ~low
    live = bb > 0
    inside = ~(low | high) & live

    sat = np.where(high, scale * hi, np.where(low, scale * lo, 0.0))
    d_b = np.where(high & (bb >= 1), scale * LN2 * half, np.where(low, -scale * LN2 * half, 0.0))
    red = tuple(range(1, x.ndim))
    dx = np.where(inside, g, 0.0)
    de = (g * LN2 * sat * live).sum(axis=red)
    db = (g * d_b * live).sum(axis=red)
    return dx.astype(DTYPE), db.astype(DTYPE), de.astype(DTYPE)


def quantize(x: Tensor, b: Tensor, e: Tensor) -> Tensor:
    """Differentiable quantizer; ``b`` and ``e`` hold one value per group."""
    x, b, e = as_tensor(x), as_tensor(b), as_tensor(e)
    out = quantize_array(x.data, b.data, e.data)
    xd, bd, ed = x.data, b.data, e.data
    return make_op("quantize", out, (x, b, e), lambda g: quantize_backward(g, xd, bd, ed))


def initial_exponent(w: np.ndarray, b0: float) -> np.ndarray:
    """Per-group exponent whose clamp range just covers the group's weights."""
    flat = np.abs(np.asarray(w, dtype=np.float64)).reshape(w.shape[0], -1)
    return np.ceil(np.log2(flat.max(axis=1) + 1e-12)) - (b0 - 1)


@dataclass
class QuantizedParam:
    """A weight tensor with learnable per-group bit depth and exponent.

    ``live`` marks groups that have not been pruned; ``frozen_until`` holds the
    last optimizer step during which a group's (b, e) stay untouched.
    """

    weights: Tensor
    b: Tensor
    e: Tensor
    name: str = ""
    live: np.ndarray = field(default=None)
    frozen_until: np.ndarray = field(default=None)

    def __post_init__(self):
        G = self.weights.shape[0]
        if self.b.shape != (G,) or self.e.shape != (G,):
            raise ShapeError(f"{self.name}: need {G} groups, got b{self.b.shape} e{self.e.shape}")
        if self.live is None:
            self.live = np.ones(G, dtype=bool)
        if self.frozen_until is None:
            self.frozen_until = np.full(G, -1, dtype=np.int64)

    @classmethod
    def wrap(cls, weights: Tensor, b0: float, name: str = "") -> "QuantizedParam":
        G = weights.shape[0]
        b = Tensor(np.full(G, b0), requires_grad=True)
        e = Tensor(np.clip(initial_exponent(weights.data, b0), -E_LIMIT, E_LIMIT), requires_grad=True)
        return cls(weights, b, e, name=name)

    @property
    def n_groups(self) -> int:
        return self.weights.shape[0]

    @property
    def group_size(self) -> int:
        return self.weights.size // self.n_groups

    def quantized(self) -> Tensor:
        return quantize(self.weights, self.b, self.e)

    def quantized_array(self) -> np.ndarray:
        return quantize_array(self.weights.data, self.b.data, self.e.data)

    def clamp_(self) -> None:
        np.clip(self.b.data, B_MIN, B_MAX, out=self.b.data)
        np.clip(self.e.data, -E_LIMIT, E_LIMIT, out=self.e.data)

    def frozen(self, step: int) -> np.ndarray:
        return step <= self.frozen_until

    def kill(self, g: int) -> None:
        self.live[g] = False
        self.weights.data[g] = 0.0
        self.b.data[g] = 0.0


# ----------------------------------------------------------------- size model


@dataclass(frozen=True)
class ConvSizeDesc:
    """Extents entering one convolution's quantized size.

    ``in_ch`` counts live input channels; ``out_h``/``out_w`` are the layer's
    output feature-map extents; ``out_ch`` is the number of groups.
    """

    in_ch: int
    out_h: int
    out_w: int
    out_ch: int

    def __post_init__(self):
        if min(self.in_ch, self.out_h, self.out_w, self.out_ch) < 1:
            raise ShapeError(f"size descriptor extents must be >= 1: {self}")

    @property
    def bits_per_unit(self) -> int:
        return self.in_ch * self.out_h * self.out_w

    @property
    def n_groups(self) -> int:
        return self.out_ch


@dataclass(frozen=True)
class AttentionSizeDesc:
    n_heads: int
    d_model: int
    d_head: int

    def __post_init__(self):
        if min(self.n_heads, self.d_model, self.d_head) < 1:
            raise ShapeError(f"size descriptor extents must be >= 1: {self}")

    @property
    def bits_per_unit(self) -> int:
        # query, key, value and the head's slice of the output projection
        return 4 * self.d_model * self.d_head

    @property
    def n_groups(self) -> int:
        return self.n_heads


SizeDesc = ConvSizeDesc | AttentionSizeDesc


def _bits_vector(desc: SizeDesc, b) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if b.shape[0] != desc.n_groups:
        raise ShapeError(f"{b.shape[0]} bit depths for {desc.n_groups} groups")
    return b


def layer_quantized_size(desc: ConvSizeDesc, b) -> float:
    """Bits of one conv layer: in_ch * out_h * out_w * sum(max(b, 0))."""
    b = _bits_vector(desc, b)
    return float(desc.bits_per_unit * np.maximum(b, 0.0).sum())


def attention_quantized_size(desc: AttentionSizeDesc, b) -> float:
    """Bits of one attention block: sum over heads of 4*d_model*d_head*max(b_h, 0)."""
    b = _bits_vector(desc, b)
    return float(desc.bits_per_unit * np.maximum(b, 0.0).sum())


def quantized_size(desc: SizeDesc, b) -> float:
    if isinstance(desc, ConvSizeDesc):
        return layer_quantized_size(desc, b)
    return attention_quantized_size(desc, b)


@dataclass
class SizeModel:
    layers: list[SizeDesc]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("size model needs at least one quantized layer")

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def layer_sizes(self, bs: Sequence) -> list[float]:
        self._check(bs)
        return [quantized_size(d, _plain(b)) for d, b in zip(self.layers, bs)]

    def average_bit_depth(self, bs: Sequence) -> float:
        """Mean of per-layer quantized sizes, in bits (float64)."""
        return sum(self.layer_sizes(bs)) / self.n_layers

    def average_bit_depth_tensor(self, bs: Sequence[Tensor]) -> Tensor:
        """Same quantity as a differentiable tensor of the ``b`` vectors."""
        self._check(bs)
        total = None
        for d, b in zip(self.layers, bs):
            z = mul(relu(b).sum(), float(d.bits_per_unit) / self.n_layers)
            total = z if total is None else total + z
        return total

    def gradient(self, bs: Sequence) -> list[np.ndarray]:
        """Analytic dQ/db per layer: bits_per_unit / N where b > 0, else 0."""
        self._check(bs)
        return [np.where(np.asarray(_plain(b)) > 0, d.bits_per_unit / self.n_layers, 0.0)
                for d, b in zip(self.layers, bs)]

    def _check(self, bs) -> None:
        if len(bs) != self.n_layers:
            raise ShapeError(f"{len(bs)} bit vectors for {self.n_layers} layers")


def _plain(b):
    return b.data if isinstance(b, Tensor) else b


def average_bit_depth(size_model: SizeModel, bs: Sequence):
    """Q for the given bit vectors; returns a Tensor when given Tensors."""
    if bs and all(isinstance(b, Tensor) for b in bs):
        return size_model.average_bit_depth_tensor(bs)
    return size_model.average_bit_depth(bs)


# -------------------------------------------------------------- byte report


@dataclass
class QuantizedBytesEntry:
    """Storage view of one quantized tensor after structural pruning.

    ``elements`` is the per-group element count of the compacted tensor (zero
    for pruned groups, reduced when upstream channels were removed).
    """

    elements: np.ndarray
    b: np.ndarray
    live: np.ndarray


BYTES_PER_FLOAT = 4
BYTES_PER_QUANT_PAIR = 4


def model_bytes(entries: Sequence[QuantizedBytesEntry], unquantized_elements: int) -> float:
    """Reported storage: ceil(b)/8 bytes per quantized weight, 4 bytes per
    unquantized element, 4 bytes per stored (b, e) pair of a live group."""
    bits = 0
    pairs = 0
    for ent in entries:
        live = np.asarray(ent.live, dtype=bool)
        whole_bits = np.ceil(np.maximum(np.asarray(ent.b, dtype=np.float64), 0.0)).astype(np.int64)
        bits += int((np.asarray(ent.elements, dtype=np.int64) * whole_bits * live).sum())
        pairs += int(live.sum())
    return bits / 8 + BYTES_PER_FLOAT * int(unquantized_elements) + BYTES_PER_QUANT_PAIR * pairs
