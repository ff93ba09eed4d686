"""The quantized CNN and decoder-only transformer.

Both models keep their prunable weights in :class:`QuantizedParam` objects
(one group per conv output channel or attention head) and expose the same
small surface to the trainer: ``forward``, ``trainable()``, ``quant_params``,
``size_model()``, ``byte_entries()`` and mask maintenance.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .quant import (AttentionSizeDesc, ConvSizeDesc, QuantizedBytesEntry, QuantizedParam, SizeModel,
                    model_bytes)
from .tensor import DTYPE, Rng, ShapeError, Tensor, abs_, mul, random_init


@dataclass
class CnnSpec:
    n_conv_layers: int = 2
    channels: list[int] = field(default_factory=lambda: [16, 32])
    kernel: int = 3
    in_channels: int = 1
    image_size: int = 28
    classes: int = 10

    def validate(self) -> None:
        if self.n_conv_layers < 1:
            raise ShapeError("n_conv_layers must be >= 1")
        if len(self.channels) != self.n_conv_layers:
            raise ShapeError(f"{len(self.channels)} channel counts for {self.n_conv_layers} conv layers")
        if min(self.channels) < 1 or self.kernel < 1 or self.kernel % 2 == 0:
            raise ShapeError("channels must be >= 1 and the kernel odd")
        side = self.image_size
        for _ in range(self.n_conv_layers):
            if side % 2:
                raise ShapeError(f"spatial extent {side} is odd before a 2x2 pool")
            side //= 2
        if side < 1:
            raise ShapeError("spatial extent vanishes after pooling")

    def spatial(self, layer: int) -> int:
        """Output side length of conv ``layer`` (before its pool)."""
        return self.image_size // (2 ** layer)

    @property
    def flat_features(self) -> int:
        side = self.image_size // (2 ** self.n_conv_layers)
        return self.channels[-1] * side * side


@dataclass
class DecoderSpec:
    vocab_size: int = 27
    d_model: int = 64
    n_heads: int = 4
    n_blocks: int = 2
    context: int = 16
    ff_width: int | None = None

    def validate(self) -> None:
        if min(self.vocab_size, self.d_model, self.n_heads, self.n_blocks, self.context) < 1:
            raise ShapeError("decoder extents must be >= 1")
        if self.d_model % self.n_heads:
            raise ShapeError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.ff_width is not None and self.ff_width < 1:
            raise ShapeError("ff_width must be >= 1")

    @property
    def ff(self) -> int:
        return self.ff_width or 4 * self.d_model

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


class PruneRejected(Exception):
    pass


class QuantModel:
    """Behaviour shared by both architectures."""

    kind = ""
    quant_params: list[QuantizedParam]

    def __init__(self):
        self.quantize_enabled = True
        self.trained = False

    # subclasses fill these in
    def named_tensors(self) -> list[tuple[str, np.ndarray]]:
        raise NotImplementedError

    def trainable(self) -> list[Tensor]:
        raise NotImplementedError

    def weight(self, qp: QuantizedParam) -> Tensor:
        return qp.quantized() if self.quantize_enabled else qp.weights

    def b_tensors(self) -> list[Tensor]:
        return [qp.b for qp in self.quant_params]

    def q_tensor(self) -> Tensor:
        return self.size_model().average_bit_depth_tensor(self.b_tensors())

    def q_value(self) -> float:
        return self.size_model().average_bit_depth([qp.b.data for qp in self.quant_params])

    def bytes(self) -> float:
        return model_bytes(self.byte_entries(), self.unquantized_elements())

    def quantized_bytes(self) -> float:
        """Bytes of the quantized tensors alone (conv kernels or attention heads)."""
        if not self.quantize_enabled:
            return 4.0 * sum(int(ent.elements.sum()) for ent in self._raw_entries())
        return model_bytes(self.byte_entries(), 0)

    def byte_entries(self) -> list[QuantizedBytesEntry]:
        return self._raw_entries() if self.quantize_enabled else []

    def unquantized_elements(self) -> int:
        n = self._plain_elements()
        if not self.quantize_enabled:
            n += sum(int(ent.elements.sum()) for ent in self._raw_entries())
        return n

    def param_count(self) -> int:
        return sum(t.size for t in self.trainable())

    def live_groups(self) -> int:
        return int(sum(qp.live.sum() for qp in self.quant_params))

    def dead_groups(self) -> int:
        return int(sum((~qp.live).sum() for qp in self.quant_params))

    def clamp_quant_(self) -> None:
        for qp in self.quant_params:
            qp.clamp_()
            qp.b.data[~qp.live] = 0.0

    def l1(self) -> Tensor:
        total = None
        for t, mask in self.l1_terms():
            a = abs_(t)
            if mask is not None:
                a = mul(a, mask)
            s = a.sum()
            total = s if total is None else total + s
        return total

    def zero_groups(self) -> list[tuple[int, int]]:
        """(layer, group) pairs that are live but quantize to all zeros."""
        found = []
        for li, qp in enumerate(self.quant_params):
            if self.quantize_enabled:
                q = qp.quantized_array().reshape(qp.n_groups, -1)
            else:
                q = qp.weights.data.reshape(qp.n_groups, -1)
            dead = ~q.any(axis=1)
            if self.quantize_enabled:
                dead |= qp.b.data <= 0
            for g in np.flatnonzero(dead & qp.live):
                found.append((li, int(g)))
        return found

    def prune(self, layer: int, group: int) -> None:
        qp = self.quant_params[layer]
        if qp.live.sum() <= 1 and qp.live[group]:
            raise PruneRejected(f"pruning group {group} would empty layer {layer}")
        qp.kill(group)
        self.enforce_masks()

    def enforce_masks(self) -> None:
        raise NotImplementedError

    def spec_dict(self) -> dict:
        return asdict(self.spec)

    def _plain_elements(self) -> int:
        raise NotImplementedError

    def _raw_entries(self) -> list[QuantizedBytesEntry]:
        raise NotImplementedError


class VisionCNN(QuantModel):
    """[conv -> batchnorm -> relu -> maxpool] x n -> flatten -> linear."""

    kind = "cnn"

    def __init__(self, spec: CnnSpec, rng: Rng, b0: float = 8.0):
        super().__init__()
        spec.validate()
        self.spec = spec
        k = spec.kernel
        self.quant_params = []
        self.conv_bias, self.bn_scale, self.bn_shift, self.bn_stats = [], [], [], []
        cin = spec.in_channels
        for li, cout in enumerate(spec.channels):
            w = random_init((cout, cin, k, k), cin * k * k, rng)
            self.quant_params.append(QuantizedParam.wrap(w, b0, name=f"conv{li}"))
            self.conv_bias.append(Tensor(np.zeros(cout), requires_grad=True))
            self.bn_scale.append(Tensor(np.ones(cout), requires_grad=True))
            self.bn_shift.append(Tensor(np.zeros(cout), requires_grad=True))
            self.bn_stats.append(nn.RunningStats.fresh(cout))
            cin = cout
        self.fc_w = random_init((spec.flat_features, spec.classes), spec.flat_features, rng)
        self.fc_b = Tensor(np.zeros(spec.classes), requires_grad=True)

    @property
    def padding(self) -> int:
        return self.spec.kernel // 2

    def trainable(self) -> list[Tensor]:
        out = []
        for li, qp in enumerate(self.quant_params):
            out += [qp.weights, self.conv_bias[li], self.bn_scale[li], self.bn_shift[li]]
        return out + [self.fc_w, self.fc_b]

    def l1_terms(self):
        terms = []
        for qp in self.quant_params:
            terms.append((qp.weights, qp.live.astype(DTYPE).reshape(-1, 1, 1, 1)))
        terms.append((self.fc_w, None))
        return terms

    def block(self, li: int, h: Tensor, train: bool) -> Tensor:
        qp = self.quant_params[li]
        h = nn.conv2d(h, self.weight(qp), self.conv_bias[li], padding=self.padding)
        h = nn.batchnorm(h, self.bn_scale[li], self.bn_shift[li], self.bn_stats[li], train)
        h = nn.relu(h)
        if not qp.live.all():
            h = mul(h, qp.live.astype(DTYPE).reshape(1, -1, 1, 1))
        return h

    def trunk(self, x, train: bool = False) -> Tensor:
        """Activations of the last conv block, before its pool."""
        h = x if isinstance(x, Tensor) else Tensor(x)
        last = len(self.quant_params) - 1
        for li in range(last + 1):
            h = self.block(li, h, train)
            if li < last:
                h = nn.maxpool2x2(h)
        return h

    def head(self, feats: Tensor) -> Tensor:
        h = nn.maxpool2x2(feats)
        h = h.reshape(h.shape[0], -1)
        return nn.linear(h, self.fc_w, self.fc_b)

    def forward(self, x, train: bool = False) -> Tensor:
        return self.head(self.trunk(x, train))

    def penultimate(self, x) -> np.ndarray:
        h = nn.maxpool2x2(self.trunk(x, False))
        return h.data.reshape(h.shape[0], -1)

    def enforce_masks(self) -> None:
        prev_dead = None
        for li, qp in enumerate(self.quant_params):
            dead = ~qp.live
            qp.weights.data[dead] = 0.0
            qp.b.data[dead] = 0.0
            if prev_dead is not None and prev_dead.any():
                qp.weights.data[:, prev_dead] = 0.0
            prev_dead = dead
        if prev_dead.any():
            side = self.spec.image_size // (2 ** self.spec.n_conv_layers)
            rows = np.repeat(prev_dead, side * side)
            self.fc_w.data[rows] = 0.0

    def size_model(self) -> SizeModel:
        layers = []
        cin_live = self.spec.in_channels
        for li, qp in enumerate(self.quant_params):
            s = self.spec.spatial(li)
            layers.append(ConvSizeDesc(max(cin_live, 1), s, s, qp.n_groups))
            cin_live = int(qp.live.sum())
        return SizeModel(layers)

    def _raw_entries(self) -> list[QuantizedBytesEntry]:
        k2 = self.spec.kernel ** 2
        out = []
        cin_live = self.spec.in_channels
        for qp in self.quant_params:
            elements = np.where(qp.live, cin_live * k2, 0)
            out.append(QuantizedBytesEntry(elements, qp.b.data.copy(), qp.live.copy()))
            cin_live = int(qp.live.sum())
        return out

    def _plain_elements(self) -> int:
        n = 0
        for qp in self.quant_params:
            n += 3 * int(qp.live.sum())  # conv bias + batchnorm scale/shift
        side = self.spec.image_size // (2 ** self.spec.n_conv_layers)
        n += int(self.quant_params[-1].live.sum()) * side * side * self.spec.classes + self.spec.classes
        return n

    def named_tensors(self):
        out = []
        for li, qp in enumerate(self.quant_params):
            out += [(f"conv{li}.weight", qp.weights.data), (f"conv{li}.bias", self.conv_bias[li].data),
                    (f"bn{li}.scale", self.bn_scale[li].data), (f"bn{li}.shift", self.bn_shift[li].data),
                    (f"bn{li}.running_mean", self.bn_stats[li].mean),
                    (f"bn{li}.running_var", self.bn_stats[li].var)]
        return out + [("fc.weight", self.fc_w.data), ("fc.bias", self.fc_b.data)]


class Decoder(QuantModel):
    """Token + learned positional embeddings, pre-norm blocks, final norm, vocab head.

    Only the attention heads are quantized; feed-forward and embedding weights
    stay at full precision.
    """

    kind = "decoder"

    def __init__(self, spec: DecoderSpec, rng: Rng, b0: float = 8.0):
        super().__init__()
        spec.validate()
        self.spec = spec
        D, H, dh, F, V = spec.d_model, spec.n_heads, spec.d_head, spec.ff, spec.vocab_size
        self.tok_emb = random_init((V, D), D, rng)
        self.pos_emb = random_init((spec.context, D), D, rng)
        self.quant_params = []
        self.blocks: list[nn.AttentionBlock] = []
        for bi in range(spec.n_blocks):
            heads = random_init((H, 4, D, dh), D, rng)
            qp = QuantizedParam.wrap(heads, b0, name=f"block{bi}.heads")
            self.quant_params.append(qp)
            self.blocks.append(nn.AttentionBlock(
                heads=heads,
                ln1_scale=Tensor(np.ones(D), requires_grad=True), ln1_shift=Tensor(np.zeros(D), requires_grad=True),
                ln2_scale=Tensor(np.ones(D), requires_grad=True), ln2_shift=Tensor(np.zeros(D), requires_grad=True),
                ff_w1=random_init((D, F), D, rng), ff_b1=Tensor(np.zeros(F), requires_grad=True),
                ff_w2=random_init((F, D), F, rng), ff_b2=Tensor(np.zeros(D), requires_grad=True),
                head_mask=qp.live,
            ))
        self.lnf_scale = Tensor(np.ones(D), requires_grad=True)
        self.lnf_shift = Tensor(np.zeros(D), requires_grad=True)
        self.lm_w = random_init((D, V), D, rng)
        self.lm_b = Tensor(np.zeros(V), requires_grad=True)

    def _block_tensors(self, blk: nn.AttentionBlock) -> list[Tensor]:
        return [blk.heads, blk.ln1_scale, blk.ln1_shift, blk.ln2_scale, blk.ln2_shift,
                blk.ff_w1, blk.ff_b1, blk.ff_w2, blk.ff_b2]

    def trainable(self) -> list[Tensor]:
        out = [self.tok_emb, self.pos_emb]
        for blk in self.blocks:
            out += self._block_tensors(blk)
        return out + [self.lnf_scale, self.lnf_shift, self.lm_w, self.lm_b]

    def l1_terms(self):
        terms = []
        for qp, blk in zip(self.quant_params, self.blocks):
            terms.append((qp.weights, qp.live.astype(DTYPE).reshape(-1, 1, 1, 1)))
            terms += [(blk.ff_w1, None), (blk.ff_w2, None)]
        terms.append((self.lm_w, None))
        return terms

    def trunk(self, tokens, train: bool = False) -> Tensor:
        """Output of the last attention block, (B, T, d_model)."""
        tokens = np.asarray(tokens)
        B, T = tokens.shape
        if T > self.spec.context:
            raise ShapeError(f"sequence length {T} exceeds context {self.spec.context}")
        h = nn.embedding(self.tok_emb, tokens) + self.pos_emb[:T]
        for qp, blk in zip(self.quant_params, self.blocks):
            blk.head_mask = qp.live
            h = nn.attention_forward(h, blk, causal=True, heads=self.weight(qp))
        return h

    def head(self, feats: Tensor) -> Tensor:
        h = nn.layernorm(feats, self.lnf_scale, self.lnf_shift)
        return nn.linear(h, self.lm_w, self.lm_b)

    def forward(self, tokens, train: bool = False) -> Tensor:
        return self.head(self.trunk(tokens, train))

    def penultimate(self, tokens) -> np.ndarray:
        h = nn.layernorm(self.trunk(tokens), self.lnf_scale, self.lnf_shift)
        return h.data.mean(axis=1)

    def enforce_masks(self) -> None:
        for qp in self.quant_params:
            dead = ~qp.live
            qp.weights.data[dead] = 0.0
            qp.b.data[dead] = 0.0

    def prune(self, layer: int, group: int) -> None:
        qp = self.quant_params[layer]
        if qp.live.sum() <= 1 and qp.live[group]:
            raise PruneRejected(f"pruning head {group} would leave block {layer} without heads")
        qp.kill(group)
        self.enforce_masks()

    def size_model(self) -> SizeModel:
        return SizeModel([AttentionSizeDesc(qp.n_groups, self.spec.d_model, qp.weights.shape[3])
                          for qp in self.quant_params])

    def _raw_entries(self) -> list[QuantizedBytesEntry]:
        return [QuantizedBytesEntry(np.where(qp.live, qp.group_size, 0), qp.b.data.copy(), qp.live.copy())
                for qp in self.quant_params]

    def _plain_elements(self) -> int:
        heads = {blk.heads.id for blk in self.blocks}
        return sum(t.size for t in self.trainable() if t.id not in heads)

    def named_tensors(self):
        out = [("tok_emb", self.tok_emb.data), ("pos_emb", self.pos_emb.data)]
        names = ["heads", "ln1.scale", "ln1.shift", "ln2.scale", "ln2.shift",
                 "ff.w1", "ff.b1", "ff.w2", "ff.b2"]
        for bi, blk in enumerate(self.blocks):
            out += [(f"block{bi}.{n}", t.data) for n, t in zip(names, self._block_tensors(blk))]
        return out + [("lnf.scale", self.lnf_scale.data), ("lnf.shift", self.lnf_shift.data),
                      ("lm.weight", self.lm_w.data), ("lm.bias", self.lm_b.data)]


def build_cnn(spec: CnnSpec | None = None, rng: Rng | None = None, b0: float = 8.0) -> VisionCNN:
    return VisionCNN(spec or CnnSpec(), rng or Rng(0), b0)


def build_decoder(spec: DecoderSpec | None = None, rng: Rng | None = None, b0: float = 8.0) -> Decoder:
    return Decoder(spec or DecoderSpec(), rng or Rng(0), b0)


def cnn_param_count(spec: CnnSpec) -> int:
    """Closed-form trainable parameter count of :class:`VisionCNN`."""
    total, cin = 0, spec.in_channels
    for c in spec.channels:
        total += c * cin * spec.kernel ** 2 + 3 * c
        cin = c
    return total + spec.flat_features * spec.classes + spec.classes


def decoder_param_count(spec: DecoderSpec) -> int:
    D, V, F, T = spec.d_model, spec.vocab_size, spec.ff, spec.context
    per_block = 4 * D * D + 4 * D + D * F + F + F * D + D
    return V * D + T * D + spec.n_blocks * per_block + 2 * D + D * V + V


# ------------------------------------------------------------------ compaction


def _slice_qp(qp: QuantizedParam, keep_out: np.ndarray, keep_in: np.ndarray | None = None) -> QuantizedParam:
    w = qp.weights.data[keep_out]
    if keep_in is not None:
        w = w[:, keep_in]
    return QuantizedParam(Tensor(w, requires_grad=True), Tensor(qp.b.data[keep_out], requires_grad=True),
                          Tensor(qp.e.data[keep_out], requires_grad=True), name=qp.name,
                          live=np.ones(int(keep_out.sum()), dtype=bool),
                          frozen_until=qp.frozen_until[keep_out].copy())


def compact(model: QuantModel) -> QuantModel:
    """Physically remove pruned groups and the downstream slices they fed.

    The result computes the same function as the masked model (up to float
    summation order) with smaller tensors.
    """
    m = copy.deepcopy(model)
    if isinstance(m, VisionCNN):
        keep_in = None
        new_channels = []
        for li, qp in enumerate(m.quant_params):
            keep = qp.live.copy()
            m.quant_params[li] = _slice_qp(qp, keep, keep_in)
            m.conv_bias[li] = Tensor(m.conv_bias[li].data[keep], requires_grad=True)
            m.bn_scale[li] = Tensor(m.bn_scale[li].data[keep], requires_grad=True)
            m.bn_shift[li] = Tensor(m.bn_shift[li].data[keep], requires_grad=True)
            m.bn_stats[li] = nn.RunningStats(m.bn_stats[li].mean[keep].copy(), m.bn_stats[li].var[keep].copy())
            new_channels.append(int(keep.sum()))
            keep_in = keep
        side = m.spec.image_size // (2 ** m.spec.n_conv_layers)
        m.fc_w = Tensor(m.fc_w.data[np.repeat(keep_in, side * side)], requires_grad=True)
        m.spec = CnnSpec(m.spec.n_conv_layers, new_channels, m.spec.kernel, m.spec.in_channels,
                         m.spec.image_size, m.spec.classes)
        return m
    if isinstance(m, Decoder):
        for bi, qp in enumerate(m.quant_params):
            keep = qp.live.copy()
            m.quant_params[bi] = _slice_qp(qp, keep)
            m.blocks[bi].heads = m.quant_params[bi].weights
            m.blocks[bi].head_mask = m.quant_params[bi].live
        return m
    raise TypeError(f"cannot compact {type(model).__name__}")
