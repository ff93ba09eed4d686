"""Compression training loop guarded by a preservation set.

Every mini-batch minimises

    task loss + alpha * L1(weights) + gamma * Q + lambda * preservation loss

and updates both the weights and the per-group (b, e) quantization
parameters. Every ``eval_every`` steps, groups that quantize to all zeros are
pruned before the preservation check. A passing check snapshots the bit
depths; a failing one rolls shrunken groups back to the last good snapshot
and freezes them.

Three modes share the loop: ``baseline`` (no quantization, plain training),
``unsafe`` (size pressure and pruning, no preservation term or restoration)
and ``safe`` (everything).
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .data import Dataset
from .models import QuantModel
from .nn import cross_entropy
from .optim import Adam
from .preserve import PreservationSet, build_preservation_set, evaluate_arrays, preservation_metrics
from .quant import E_LIMIT, initial_exponent
from .tensor import NonFiniteError, Rng, Tape, Tensor, grad

log = logging.getLogger(__name__)

MODES = ("baseline", "unsafe", "safe")


class DivergenceError(RuntimeError):
    pass


@dataclass
class CompressionConfig:
    alpha: float = 1e-5
    gamma: float | None = None  # None: auto-scale at step 0
    gamma_fraction: float = 0.10  # auto-scale target gamma*Q0 / initial task loss
    lam: float = 1.0
    learning_rate: float = 1e-3
    quant_learning_rate: float = 0.05
    batch_size: int = 64
    epochs: int = 3
    warmup_epochs: int = 1
    eval_every: int = 100
    restore_threshold: float | None = None  # None: 1.0 accuracy point / 5% relative loss
    freeze_steps: int = 200
    b0: float = 8.0
    pset_batch: int = 64
    seed: int = 0
    fault_step: int | None = None  # corrupt preservation labels at the first evaluation >= this step

    def validate(self) -> None:
        for name in ("alpha", "lam", "gamma_fraction"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.gamma is not None and self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.learning_rate <= 0 or self.quant_learning_rate <= 0:
            raise ValueError("learning rates must be positive")
        if self.eval_every < 1 or self.batch_size < 2 or self.pset_batch < 1:
            raise ValueError("eval_every >= 1, batch_size >= 2 and pset_batch >= 1 required")
        if self.epochs < 0 or self.warmup_epochs < 0 or self.freeze_steps < 0:
            raise ValueError("epoch and freeze counts must be >= 0")
        if not 0 <= self.b0 <= 16:
            raise ValueError("b0 must lie in [0, 16]")


@dataclass
class LossTerms:
    total: Tensor
    task: Tensor
    l1: Tensor | None
    size: Tensor | None
    preservation: Tensor | None

    def values(self) -> dict[str, float]:
        val = lambda t: 0.0 if t is None else t.item()
        return {"total": val(self.total), "task": val(self.task), "l1": val(self.l1),
                "size": val(self.size), "preservation": val(self.preservation)}


@dataclass
class Snapshot:
    step: int
    b: list[np.ndarray]
    e: list[np.ndarray]
    accuracy: float
    loss: float


@dataclass
class MetricsRecord:
    step: int
    train_loss: float
    l1_term: float
    size_term: float
    preservation_loss: float
    test_metric: float
    q_bits: float
    model_bytes: float
    pruned_count: int
    restored_count: int
    wall_ms: float


METRIC_COLUMNS = [f.name for f in fields(MetricsRecord)]


@dataclass
class PruneReport:
    pruned: list[tuple[int, int]] = field(default_factory=list)
    kept: list[tuple[int, int]] = field(default_factory=list)

    def __bool__(self) -> bool:
        return bool(self.pruned)


@dataclass
class RestoreReport:
    step: int
    groups: list[tuple[int, int, float]] = field(default_factory=list)  # (layer, group, delta b)

    def __bool__(self) -> bool:
        return bool(self.groups)


def _finite_or_raise(terms: dict[str, Tensor | None]) -> None:
    bad = [k for k, t in terms.items() if t is not None and not np.isfinite(t.data).all()]
    if bad:
        raise DivergenceError(f"non-finite loss terms: {bad}")


def composite_loss(model: QuantModel, batch: tuple[np.ndarray, np.ndarray],
                   pset_batch: tuple[np.ndarray, np.ndarray] | None, config: CompressionConfig,
                   gamma: float = 0.0, lam: float | None = None, alpha: float | None = None,
                   train: bool = True) -> LossTerms:
    """Four-term objective; absent terms (weight zero or no set) are None."""
    lam = config.lam if lam is None else lam
    alpha = config.alpha if alpha is None else alpha
    xb, yb = batch
    try:
        task = cross_entropy(model.forward(xb, train=train), yb)
        l1 = model.l1() * alpha if alpha > 0 else None
        size = model.q_tensor() * gamma if gamma > 0 and model.quantize_enabled else None
        pres = None
        if lam > 0 and pset_batch is not None:
            px, py = pset_batch
            pres = cross_entropy(model.forward(px, train=train), py) * lam
    except NonFiniteError as exc:
        raise DivergenceError(str(exc)) from exc
    total = task
    for t in (l1, size, pres):
        if t is not None:
            total = total + t
    _finite_or_raise({"task": task, "l1": l1, "size": size, "preservation": pres, "total": total})
    return LossTerms(total, task, l1, size, pres)


def prune_zeroed(model: QuantModel) -> PruneReport:
    """Kill every live group whose quantized weights are all zero.

    A layer (or block) always keeps one group: if every live group qualifies,
    the one with the largest raw L1 norm survives with b reset to 1.
    """
    report = PruneReport()
    candidates = model.zero_groups()
    for li, qp in enumerate(model.quant_params):
        groups = [g for (l, g) in candidates if l == li]
        if not groups:
            continue
        if len(groups) >= int(qp.live.sum()):
            norms = np.abs(qp.weights.data.reshape(qp.n_groups, -1)).sum(axis=1)
            keep = max(groups, key=lambda g: (norms[g], -g))
            groups.remove(keep)
            qp.b.data[keep] = 1.0
            qp.e.data[keep] = np.clip(initial_exponent(qp.weights.data[keep:keep + 1], 1.0)[0], -E_LIMIT, E_LIMIT)
            report.kept.append((li, keep))
        for g in groups:
            qp.kill(g)
            report.pruned.append((li, g))
    if report.pruned:
        model.enforce_masks()
    return report


def take_snapshot(model: QuantModel, step: int, accuracy: float, loss: float) -> Snapshot:
    return Snapshot(step, [qp.b.data.copy() for qp in model.quant_params],
                    [qp.e.data.copy() for qp in model.quant_params], accuracy, loss)


def restore_precision(model: QuantModel, snapshot: Snapshot | None, step: int,
                      freeze_steps: int, b0: float) -> RestoreReport:
    """Return shrunken live groups to the snapshot's (b, e) and freeze them.

    Without a snapshot every live group goes back to ``b0``.
    """
    report = RestoreReport(step)
    for li, qp in enumerate(model.quant_params):
        for g in np.flatnonzero(qp.live):
            old = float(qp.b.data[g])
            if snapshot is None:
                target_b, target_e = b0, None
            else:
                target_b, target_e = float(snapshot.b[li][g]), float(snapshot.e[li][g])
                if not old < target_b:
                    continue
            qp.b.data[g] = target_b
            if target_e is not None:
                qp.e.data[g] = target_e
            qp.frozen_until[g] = step + freeze_steps
            report.groups.append((li, int(g), float(qp.b.data[g]) - old))
    return report


def evaluate(model: QuantModel, dataset: Dataset) -> float:
    """Top-1 accuracy in % for classifiers, mean cross-entropy (nats) for the LM."""
    loss, acc = evaluate_arrays(model, dataset.inputs, dataset.targets)
    return acc if dataset.task == "vision" else loss


class Trainer:
    """Holds the optimizer state across warm-up and compression."""

    def __init__(self, model: QuantModel, train: Dataset, test: Dataset, config: CompressionConfig,
                 mode: str = "safe", on_step: Callable | None = None, csv_path=None):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        config.validate()
        self.model, self.train, self.test = model, train, test
        self.config, self.mode = config, mode
        self.on_step = on_step
        self.csv_path = Path(csv_path) if csv_path else None
        self.is_lm = train.task != "vision"
        self.delta = config.restore_threshold
        if self.delta is None:
            self.delta = 0.05 if self.is_lm else 1.0

        model.quantize_enabled = mode != "baseline"
        self.alpha = config.alpha if mode != "baseline" else 0.0
        self.lam = config.lam if mode == "safe" else 0.0
        self.gamma: float | None = 0.0 if mode == "baseline" else config.gamma
        self.rng = Rng(config.seed).child(1)
        self.weight_opt = Adam(model.trainable(), lr=config.learning_rate)
        self.quant_opt = Adam([t for qp in model.quant_params for t in (qp.b, qp.e)],
                              lr=config.quant_learning_rate)

        self.pset: PreservationSet | None = None
        self.step = 0
        self.snapshot: Snapshot | None = None
        self.best_accuracy = -math.inf
        self.best_loss = math.inf
        self.restored_count = 0
        self.fault_fired = False
        self.metrics: list[MetricsRecord] = []
        self.loss_log: list[dict[str, float]] = []
        self.restore_events: list[RestoreReport] = []
        self.prune_events: list[tuple[int, PruneReport]] = []
        self._last_terms: dict[str, float] = {}
        self._interval_start = time.perf_counter()
        if self.csv_path:
            self.csv_path.parent.mkdir(parents=True, exist_ok=True)
            with self.csv_path.open("w", newline="") as fh:
                csv.writer(fh).writerow(METRIC_COLUMNS)

    # ------------------------------------------------------------- steps

    @property
    def learns_quant(self) -> bool:
        return self.model.quantize_enabled and bool(self.gamma)

    def _pset_batch(self):
        if self.pset is None or self.lam <= 0:
            return None
        ids = np.asarray(self.pset.indices)
        if len(ids) > self.config.pset_batch:
            ids = np.sort(self.rng.choice(ids, size=self.config.pset_batch, replace=False))
        return self.train.inputs[ids], self.train.targets[ids]

    def _resolve_gamma(self, xb, yb) -> None:
        if self.gamma is not None:
            return
        task = cross_entropy(self.model.forward(xb, train=False), yb).item()
        q0 = self.model.q_value()
        self.gamma = self.config.gamma_fraction * task / q0 if q0 > 0 else 0.0
        log.info("auto-scaled gamma=%.3g (task %.4f, Q0 %.1f)", self.gamma, task, q0)

    def train_step(self, xb, yb) -> LossTerms:
        self._resolve_gamma(xb, yb)
        self.step += 1
        with Tape() as tape:
            terms = composite_loss(self.model, (xb, yb), self._pset_batch(), self.config,
                                   gamma=self.gamma, lam=self.lam, alpha=self.alpha)
        grads = grad(tape, terms.total)
        self.weight_opt.step(grads)
        if self.learns_quant:
            frozen = {}
            for qp in self.model.quant_params:
                mask = qp.frozen(self.step) | ~qp.live
                frozen[qp.b.id] = mask
                frozen[qp.e.id] = mask
            self.quant_opt.step(grads, frozen)
            self.model.clamp_quant_()
        self.model.enforce_masks()
        self._last_terms = terms.values()
        self.loss_log.append({"step": self.step, **self._last_terms})
        if self.on_step is not None:
            self.on_step(self)
        return terms

    def _epoch(self, evaluate_now: bool) -> None:
        for _, xb, yb in self.train.batches(self.config.batch_size, self.rng):
            if len(xb) < 2:
                continue
            self.train_step(xb, yb)
            if evaluate_now and self.step % self.config.eval_every == 0:
                self.evaluation()

    def warm_up(self) -> None:
        """Plain epochs before the set exists; no pruning, no evaluations."""
        saved_lam, self.lam = self.lam, 0.0
        for _ in range(self.config.warmup_epochs):
            self._epoch(evaluate_now=False)
        self.lam = saved_lam
        self.model.trained = True

    def set_preservation(self, pset: PreservationSet | None) -> None:
        self.pset = pset

    def run(self) -> list[MetricsRecord]:
        if self.mode == "safe" and self.pset is None:
            raise ValueError("safe mode needs a preservation set")
        for _ in range(self.config.epochs):
            self._epoch(evaluate_now=True)
        if not self.metrics or self.metrics[-1].step != self.step:
            self.evaluation()
        return self.metrics

    # -------------------------------------------------------- evaluation

    def _preservation_eval(self) -> tuple[float, float]:
        targets = None
        fault = self.config.fault_step
        if fault is not None and not self.fault_fired and self.step >= fault:
            # label corruption for fault-injection runs
            self.fault_fired = True
            y = self.train.targets[np.asarray(self.pset.indices)]
            vocab = self.model.spec.classes if not self.is_lm else self.model.spec.vocab_size
            targets = (y + 1) % vocab
        return preservation_metrics(self.model, self.pset, self.train, targets)

    def _passes(self, loss: float, acc: float) -> bool:
        if self.snapshot is None:
            return True
        if self.is_lm:
            return not loss > self.best_loss * (1 + self.delta)
        return not acc < self.best_accuracy - self.delta

    def evaluation(self) -> MetricsRecord:
        try:
            return self._evaluation()
        except NonFiniteError as exc:
            raise DivergenceError(f"step {self.step}: {exc}") from exc

    def _evaluation(self) -> MetricsRecord:
        pres_loss = math.nan
        if self.mode == "safe":
            pres_loss, pres_acc = self._preservation_eval()
        if self.mode != "baseline":
            report = prune_zeroed(self.model)
            if report or report.kept:
                self.prune_events.append((self.step, report))
        if self.mode == "safe":
            if self._passes(pres_loss, pres_acc):
                self.snapshot = take_snapshot(self.model, self.step, pres_acc, pres_loss)
                self.best_accuracy = max(self.best_accuracy, pres_acc)
                self.best_loss = min(self.best_loss, pres_loss)
            else:
                rep = restore_precision(self.model, self.snapshot, self.step,
                                        self.config.freeze_steps, self.config.b0)
                self.restored_count += len(rep.groups)
                self.restore_events.append(rep)
                log.info("step %d: preservation check failed, restored %d groups", self.step, len(rep.groups))

        now = time.perf_counter()
        terms = self._last_terms or {"total": math.nan, "l1": 0.0, "size": 0.0}
        rec = MetricsRecord(
            step=self.step,
            train_loss=terms["total"],
            l1_term=terms["l1"],
            size_term=terms["size"],
            preservation_loss=pres_loss,
            test_metric=evaluate(self.model, self.test),
            q_bits=self.model.q_value(),
            model_bytes=self.model.bytes(),
            pruned_count=self.model.dead_groups(),
            restored_count=self.restored_count,
            wall_ms=(now - self._interval_start) * 1000.0,
        )
        self._interval_start = now
        self.metrics.append(rec)
        if self.csv_path:
            with self.csv_path.open("a", newline="") as fh:
                csv.writer(fh).writerow([_fmt(v) for v in asdict(rec).values()])
        return rec

    def state_dump(self) -> dict:
        """Per-group (b, e, live, frozen_until) for inspection."""
        return {qp.name: {"b": qp.b.data.tolist(), "e": qp.e.data.tolist(), "live": qp.live.tolist(),
                          "frozen_until": qp.frozen_until.tolist()} for qp in self.model.quant_params}


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def train_compress(model: QuantModel, dataset: Dataset, pset: PreservationSet | None,
                   config: CompressionConfig, test: Dataset | None = None, mode: str = "safe",
                   on_step: Callable | None = None, csv_path=None) -> tuple[QuantModel, list[MetricsRecord]]:
    """Compression epochs on an already warmed-up model."""
    trainer = Trainer(model, dataset, test if test is not None else dataset, config, mode, on_step, csv_path)
    trainer.model.trained = True
    trainer.set_preservation(pset)
    trainer.run()
    return model, trainer.metrics


@dataclass
class ExperimentResult:
    model: QuantModel
    trainer: Trainer
    pset: PreservationSet | None

    @property
    def metrics(self) -> list[MetricsRecord]:
        return self.trainer.metrics


def run_experiment(model: QuantModel, train: Dataset, test: Dataset, config: CompressionConfig,
                   mode: str = "safe", rho: float = 0.10, quotas=(0.4, 0.3, 0.3),
                   pset: PreservationSet | None = None, on_step: Callable | None = None,
                   csv_path=None) -> ExperimentResult:
    """Warm-up, preservation-set construction (safe mode), then compression."""
    trainer = Trainer(model, train, test, config, mode, on_step, csv_path)
    trainer.warm_up()
    if mode == "safe" and pset is None:
        pset = build_preservation_set(model, train, rho, quotas, seed=config.seed)
    trainer.set_preservation(pset if mode == "safe" else None)
    trainer.run()
    return ExperimentResult(model, trainer, pset)
