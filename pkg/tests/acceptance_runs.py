"""Desk-scale three-mode comparisons used by the acceptance suite.

Run directly to print per-seed numbers: ``python tests/acceptance_runs.py vision 0 1 2``.
"""

from __future__ import annotations

import sys
import time
from dataclasses import dataclass

from sdsc.compressor import MODES, CompressionConfig, run_experiment
from sdsc.data import synthetic_text, synthetic_vision
from sdsc.models import DecoderSpec, build_cnn, build_decoder
from sdsc.tensor import Rng

SEEDS = (0, 1, 2)
TIME_LIMIT_S = 600.0
BYTES_RATIO = 0.70
ACC_SLACK = 0.5

VISION_SIZES = (2000, 500)
TEXT_NAMES = (600, 150)
TUNED = dict(gamma_fraction=1.0, quant_learning_rate=0.1, eval_every=25)
VISION_CFG = dict(TUNED, epochs=6)
TEXT_CFG = dict(TUNED, epochs=3)


@dataclass
class ModeResult:
    metric: float
    model_bytes: float
    quantized_bytes: float


@dataclass
class SeedRun:
    seed: int
    results: dict[str, ModeResult]
    seconds: float


def vision_run(seed: int) -> SeedRun:
    start = time.perf_counter()
    train = synthetic_vision(VISION_SIZES[0], seed, "train")
    test = synthetic_vision(VISION_SIZES[1], seed + 1000, "test")
    results = {}
    for mode in MODES:
        res = run_experiment(build_cnn(rng=Rng(seed)), train, test, CompressionConfig(seed=seed, **VISION_CFG), mode)
        last = res.metrics[-1]
        results[mode] = ModeResult(last.test_metric, last.model_bytes, res.model.quantized_bytes())
    return SeedRun(seed, results, time.perf_counter() - start)


def text_run(seed: int) -> SeedRun:
    start = time.perf_counter()
    spec = DecoderSpec()
    train = synthetic_text(TEXT_NAMES[0], seed, spec.context, "train")
    test = synthetic_text(TEXT_NAMES[1], seed + 1000, spec.context, "test")
    results = {}
    for mode in MODES:
        model = build_decoder(spec, Rng(seed))
        res = run_experiment(model, train, test, CompressionConfig(seed=seed, **TEXT_CFG), mode)
        last = res.metrics[-1]
        results[mode] = ModeResult(last.test_metric, last.model_bytes, model.quantized_bytes())
    return SeedRun(seed, results, time.perf_counter() - start)


def vision_verdict(run: SeedRun) -> tuple[bool, str]:
    r = run.results
    ratio = r["safe"].model_bytes / r["baseline"].model_bytes
    ok = (ratio <= BYTES_RATIO and r["safe"].metric >= r["baseline"].metric - ACC_SLACK
          and r["safe"].metric >= r["unsafe"].metric and run.seconds <= TIME_LIMIT_S)
    return ok, (f"seed {run.seed}: acc base {r['baseline'].metric:.1f} unsafe {r['unsafe'].metric:.1f} "
                f"safe {r['safe'].metric:.1f}; bytes ratio {ratio:.3f}; {run.seconds:.0f}s")


def text_verdict(run: SeedRun) -> tuple[bool, str]:
    r = run.results
    ratio = r["safe"].quantized_bytes / r["baseline"].quantized_bytes
    ok = ratio <= BYTES_RATIO and r["safe"].metric <= r["unsafe"].metric and run.seconds <= TIME_LIMIT_S
    return ok, (f"seed {run.seed}: loss base {r['baseline'].metric:.4f} unsafe {r['unsafe'].metric:.4f} "
                f"safe {r['safe'].metric:.4f}; attention bytes ratio {ratio:.3f}; {run.seconds:.0f}s")


if __name__ == "__main__":
    task, seeds = sys.argv[1], [int(s) for s in sys.argv[2:]] or SEEDS
    runner, verdict = (vision_run, vision_verdict) if task == "vision" else (text_run, text_verdict)
    for s in seeds:
        ok, line = verdict(runner(s))
        print("PASS" if ok else "FAIL", line, flush=True)
