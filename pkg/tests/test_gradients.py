import numpy as np
import pytest

from gradient_cases import (LAYER_ATOL, LAYER_CASES, LAYER_RTOL, N_SEEDS, SURROGATE_RTOL, surrogate_case)
from oracles import fd_check, fd_mismatches
from sdsc.quant import quantize, quantize_backward
from sdsc.tensor import Tape, Tensor, grad


@pytest.mark.parametrize("name", sorted(LAYER_CASES))
def test_layer_gradients_match_finite_differences(name):
    for seed in range(N_SEEDS):
        rng = np.random.default_rng(seed)
        fn, tensors = LAYER_CASES[name](rng)
        bad = fd_mismatches(fd_check(fn, tensors, rng), LAYER_RTOL, LAYER_ATOL)
        assert not bad, f"{name} seed {seed}: {bad[:3]}"


@pytest.mark.parametrize("seed", range(N_SEEDS))
def test_surrogate_backward_matches_finite_differences(seed):
    x, b, e, up, (dx, db, de) = surrogate_case(np.random.default_rng(seed))
    gx, gb, ge = quantize_backward(up, x.astype(np.float32), b.astype(np.float32), e.astype(np.float32))
    np.testing.assert_allclose(gx, dx, rtol=SURROGATE_RTOL, atol=1e-6)
    np.testing.assert_allclose(gb, db, rtol=SURROGATE_RTOL)
    np.testing.assert_allclose(ge, de, rtol=SURROGATE_RTOL)


def test_tape_quantize_routes_surrogate_gradients():
    x, b, e, up, _ = surrogate_case(np.random.default_rng(7))
    xt, bt, et = (Tensor(v, requires_grad=True) for v in (x, b, e))
    with Tape() as tape:
        loss = (quantize(xt, bt, et) * up.astype(np.float32)).sum()
    g = grad(tape, loss)
    ref = quantize_backward(up, xt.data, bt.data, et.data)
    for t, r in zip((xt, bt, et), ref):
        np.testing.assert_allclose(g[t.id].data, r, rtol=1e-6)
