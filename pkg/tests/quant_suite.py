"""Vectorised quantizer property checks shared by the unit and acceptance tests."""

from __future__ import annotations

import numpy as np

from oracles import quantize_scalar
from sdsc.quant import SNAP, quantize_array

HAND_EXAMPLES = [
    ((0.3, 4.0, -2.0), 0.25),
    ((100.0, 4.0, 0.0), 7.0),
    ((0.0, 5.0, -3.0), 0.0),
    ((-0.3, 4.0, -2.0), -0.5),
]


def _one(x, b, e):
    return float(quantize_array(np.array([[x]], np.float32), np.array([b]), np.array([e]))[0, 0])


def _triples(rng, n, integer_b):
    b = rng.integers(1, 17, n).astype(np.float64) if integer_b else rng.uniform(0.05, 16.0, n)
    e = rng.uniform(-12.0, 6.0, n)
    reach = np.exp2(e + b - 1)
    x = rng.uniform(-2.0, 2.0, n) * reach
    b, e = b.astype(np.float32), e.astype(np.float32)
    return x.astype(np.float32), b, e


def run_quant_suite(n: int = 10_000, seed: int = 0) -> dict[str, tuple[int, int]]:
    """Returns {check: (failures, cases)}."""
    rng = np.random.default_rng(seed)
    res = {}

    fails = sum(_one(*args) != want for args, want in HAND_EXAMPLES)
    res["hand_examples"] = (fails, len(HAND_EXAMPLES))

    # grid membership and saturation: integer b (the grid the byte report stores)
    x, b, e = _triples(rng, n, integer_b=True)
    q = quantize_array(x[:, None], b, e)[:, 0].astype(np.float64)
    scale = np.exp2(e.astype(np.float64))
    k = np.round(q / scale)
    half = np.exp2(b.astype(np.float64) - 1)
    on_grid = np.abs(q - k * scale) <= np.spacing(np.abs(q).astype(np.float32)).astype(np.float64)
    in_range = (k >= -half) & (k <= half - 1)
    res["grid_membership"] = (int((~(on_grid & in_range)).sum()), n)
    bound = (scale * half).astype(np.float32).astype(np.float64)  # the bound as stored
    res["saturation_bound"] = (int((np.abs(q) > bound).sum()), n)

    # scalar oracle agreement on the same triples (float64 reference). Inputs
    # within the snap window just below a grid point are the float32 images of
    # that point and may legitimately land on it.
    ref = np.array([quantize_scalar(float(xi), float(bi), float(ei)) for xi, bi, ei in zip(x, b, e)])
    snapped = np.array([quantize_scalar(float(xi) * (1 + np.sign(xi) * SNAP), float(bi), float(ei))
                        for xi, bi, ei in zip(x, b, e)])
    tol = np.spacing(np.abs(ref).astype(np.float32))
    agree = (np.abs(q - ref) <= tol) | (np.abs(q - snapped) <= tol)
    res["scalar_oracle"] = (int((~agree).sum()), n)

    # continuous b: integer multiple of 2^e between floor(-2^(b-1)) and
    # max(2^(b-1) - 1, 0), which always fits the ceil(b)-bit stored grid
    x, b, e = _triples(rng, n, integer_b=False)
    q = quantize_array(x[:, None], b, e)[:, 0].astype(np.float64)
    scale = np.exp2(e.astype(np.float64))
    k = np.round(q / scale)
    half = np.exp2(b.astype(np.float64) - 1)
    stored = np.exp2(np.ceil(b.astype(np.float64)) - 1)
    ok = (np.abs(q - k * scale) <= np.spacing(np.abs(q).astype(np.float32))) & \
         (k >= np.floor(-half)) & (k <= np.maximum(half - 1, 0)) & (k >= -stored) & (k <= stored - 1)
    res["grid_continuous_b"] = (int((~ok).sum()), n)

    # zero is a fixed point for every b > 0, including fractional b below one bit
    b = rng.uniform(1e-3, 16.0, n)
    e = rng.uniform(-12.0, 6.0, n)
    qz = quantize_array(np.zeros((n, 3), np.float32), b, e)
    res["zero_fixed_point"] = (int(np.count_nonzero(qz.any(axis=1))), n)

    # idempotence for b in {2, 4, 8, 16}
    b = rng.choice([2.0, 4.0, 8.0, 16.0], n).astype(np.float32)
    e = rng.uniform(-12.0, 6.0, n).astype(np.float32)
    x = (rng.uniform(-2.0, 2.0, n) * np.exp2(e + b - 1)).astype(np.float32)
    q1 = quantize_array(x[:, None], b, e)
    q2 = quantize_array(q1, b, e)
    res["idempotence"] = (int((q1 != q2).sum()), n)

    # monotonicity within a group: sorted inputs give non-decreasing outputs
    groups, per = 100, max(2, n // 100)
    b = rng.uniform(0.05, 16.0, groups).astype(np.float32)
    e = rng.uniform(-12.0, 6.0, groups).astype(np.float32)
    xs = np.sort(rng.uniform(-2.0, 2.0, (groups, per)) * np.exp2(e + b - 1)[:, None], axis=1).astype(np.float32)
    qs = quantize_array(xs, b, e)
    res["monotonicity"] = (int((np.diff(qs, axis=1) < 0).sum()), groups * (per - 1))

    # b <= 0 silences the whole group
    b = -rng.uniform(0.0, 3.0, 100).astype(np.float32)
    qz = quantize_array(rng.normal(size=(100, 5)).astype(np.float32), b, np.zeros(100, np.float32))
    res["nonpositive_b_zero"] = (int(np.count_nonzero(qz)), qz.size)
    return res
