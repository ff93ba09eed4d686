"""Random model states with injected zero groups, for prune equivalence."""

from __future__ import annotations

import numpy as np

from sdsc.compressor import prune_zeroed
from sdsc.models import CnnSpec, DecoderSpec, build_cnn, build_decoder, compact
from sdsc.tensor import Rng

N_INPUTS = 100
EQUIV_ATOL = 1e-5


def random_state(seed: int):
    """A small CNN (even seeds) or decoder (odd seeds) with randomised (b, e),
    batchnorm statistics and at least one zeroed group per model."""
    rng = np.random.default_rng(seed)
    if seed % 2 == 0:
        n = int(rng.integers(1, 3))
        spec = CnnSpec(n, [int(c) for c in rng.integers(3, 7, n)], image_size=12)
        model = build_cnn(spec, Rng(seed), b0=8.0)
        for st in model.bn_stats:
            st.mean[:] = rng.normal(0, 0.3, st.mean.shape)
            st.var[:] = rng.uniform(0.5, 2.0, st.var.shape)
        for t in model.bn_shift + model.conv_bias:
            t.data[:] = rng.normal(0, 0.3, t.shape)
    else:
        spec = DecoderSpec(d_model=16, n_heads=int(rng.choice([2, 4])), n_blocks=int(rng.integers(1, 3)), context=6)
        model = build_decoder(spec, Rng(seed), b0=8.0)
    for qp in model.quant_params:
        qp.b.data[:] = rng.uniform(3.0, 9.0, qp.n_groups)
        qp.e.data[:] += np.round(rng.uniform(-1.0, 1.0, qp.n_groups))
    injected = []
    for li, qp in enumerate(model.quant_params):
        k = int(rng.integers(1, qp.n_groups)) if qp.n_groups > 1 else 0
        for g in rng.choice(qp.n_groups, size=k, replace=False):
            qp.weights.data[g] = 0.0
            injected.append((li, int(g)))
    if not injected:  # single-group layers everywhere: lower one b to zero instead
        model.quant_params[0].b.data[0] = 0.0
    model.trained = True
    return model, sorted(injected)


def random_inputs(model, seed: int, n: int = N_INPUTS):
    rng = np.random.default_rng(seed + 10_000)
    if model.kind == "cnn":
        s = model.spec.image_size
        return rng.uniform(0, 1, (n, model.spec.in_channels, s, s)).astype(np.float32)
    return rng.integers(0, model.spec.vocab_size, (n, model.spec.context))


def prune_equivalence(seed: int) -> dict:
    """Masked model vs its compacted twin after pruning the injected groups."""
    model, injected = random_state(seed)
    before = model.bytes()
    report = prune_zeroed(model)
    pruned = compact(model)
    x = random_inputs(model, seed)
    diff = float(np.abs(model.forward(x).data.astype(np.float64) - pruned.forward(x).data).max())
    return {"injected": injected, "report": report, "max_diff": diff,
            "bytes_before": before, "bytes_after": model.bytes(), "model": model, "compact": pruned}
