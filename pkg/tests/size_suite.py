"""Size model and byte report against straight-loop recomputation.

Bit depths are drawn on a 1/16 grid so every partial sum is exact in float64
and the comparison can demand equality rather than a tolerance.
"""

from __future__ import annotations

import numpy as np

from oracles import attention_bits_loop, conv_bits_loop, model_bytes_loop
from sdsc.quant import (AttentionSizeDesc, ConvSizeDesc, QuantizedBytesEntry, SizeModel, attention_quantized_size,
                        average_bit_depth, layer_quantized_size, model_bytes)
from sdsc.tensor import Tensor

FD_STEP = 0.5
FD_RTOL = 1e-4


def _bits(rng, n, positive=False):
    lo = 16 if positive else -16
    return rng.integers(lo, 257, n) / 16.0


def random_layers(rng):
    layers = []
    for _ in range(int(rng.integers(1, 5))):
        if rng.random() < 0.5:
            layers.append(ConvSizeDesc(int(rng.integers(1, 33)), int(rng.integers(1, 29)),
                                       int(rng.integers(1, 29)), int(rng.integers(1, 17))))
        else:
            layers.append(AttentionSizeDesc(int(rng.integers(1, 9)), int(rng.integers(1, 129)),
                                            int(rng.integers(1, 33))))
    return layers


def _loop_bits(desc, b):
    if isinstance(desc, ConvSizeDesc):
        return conv_bits_loop(desc.in_ch, desc.out_h, desc.out_w, b)
    return attention_bits_loop(desc.d_model, desc.d_head, b)


def run_size_suite(n: int = 100, seed: int = 0) -> dict[str, tuple[int, int]]:
    """Returns {check: (failures, cases)} over ``n`` random configurations."""
    rng = np.random.default_rng(seed)
    fails = dict.fromkeys(("layer_size", "attention_size", "average_bit_depth", "model_bytes", "dq_db"), 0)
    counts = dict.fromkeys(fails, 0)
    for _ in range(n):
        layers = random_layers(rng)
        bs = [_bits(rng, d.n_groups) for d in layers]
        for d, b in zip(layers, bs):
            key = "layer_size" if isinstance(d, ConvSizeDesc) else "attention_size"
            fn = layer_quantized_size if key == "layer_size" else attention_quantized_size
            counts[key] += 1
            fails[key] += fn(d, b) != _loop_bits(d, b)

        sm = SizeModel(layers)
        want = sum(_loop_bits(d, b) for d, b in zip(layers, bs)) / len(layers)
        counts["average_bit_depth"] += 1
        fails["average_bit_depth"] += average_bit_depth(sm, bs) != want

        # dQ/db: central differences on strictly positive b (Q is piecewise linear)
        pos = [_bits(rng, d.n_groups, positive=True) for d in layers]
        analytic = sm.gradient(pos)
        tensor_q = average_bit_depth(sm, [Tensor(b) for b in pos])
        for li, b in enumerate(pos):
            for gi in range(len(b)):
                up = [v.copy() for v in pos]
                dn = [v.copy() for v in pos]
                up[li][gi] += FD_STEP
                dn[li][gi] -= FD_STEP
                numeric = (sm.average_bit_depth(up) - sm.average_bit_depth(dn)) / (2 * FD_STEP)
                counts["dq_db"] += 1
                fails["dq_db"] += abs(analytic[li][gi] - numeric) > FD_RTOL * abs(numeric)
        fails["average_bit_depth"] += abs(float(tensor_q.data) - sm.average_bit_depth(pos)) > 1e-6 * sm.average_bit_depth(pos)

        entries, loop_layers = [], []
        for _ in range(int(rng.integers(1, 5))):
            g = int(rng.integers(1, 17))
            elements = rng.integers(0, 600, g)
            b = _bits(rng, g)
            live = rng.random(g) < 0.8
            entries.append(QuantizedBytesEntry(elements, b, live))
            loop_layers.append((list(elements), list(b), list(live)))
        plain = int(rng.integers(0, 10_000))
        counts["model_bytes"] += 1
        fails["model_bytes"] += model_bytes(entries, plain) != model_bytes_loop(loop_layers, plain)
    return {k: (int(fails[k]), counts[k]) for k in fails}
