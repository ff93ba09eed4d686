"""Preservation-set construction and evaluation.

The set is a fixed slice of the training data picked after warm-up from three
rankings: Grad-CAM concentration (salient samples), predictive entropy
(uncertain samples) and k-means medoids over penultimate features (diverse
samples). During compression it serves both as an extra loss term and as the
guard that triggers precision restoration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset
from .nn import cross_entropy, log_softmax
from .tensor import Rng, Tape, Tensor, grad

PROVENANCE = ("saliency", "uncertainty", "diversity")
DEFAULT_QUOTAS = (0.4, 0.3, 0.3)
TOP_FRACTION = 0.10
KMEANS_ITERATIONS = 50
EVAL_BATCH = 256


class UntrainedModelError(RuntimeError):
    pass


@dataclass(frozen=True)
class PreservationSet:
    indices: tuple[int, ...]
    provenance: tuple[str, ...]
    rho: float
    seed: int

    def __post_init__(self):
        if len(self.indices) != len(self.provenance):
            raise ValueError("one provenance tag per index")
        if list(self.indices) != sorted(set(self.indices)):
            raise ValueError("indices must be sorted and unique")
        bad = set(self.provenance) - set(PROVENANCE)
        if bad:
            raise ValueError(f"unknown provenance tags {sorted(bad)}")

    def __len__(self) -> int:
        return len(self.indices)

    def counts(self) -> dict[str, int]:
        return {p: self.provenance.count(p) for p in PROVENANCE}

    def to_text(self) -> str:
        lines = [f"rho={self.rho!r},seed={self.seed}"]
        lines += [f"{i},{p}" for i, p in zip(self.indices, self.provenance)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PreservationSet":
        lines = text.strip("\n").split("\n")
        header = dict(part.split("=", 1) for part in lines[0].split(","))
        idx, prov = [], []
        for line in lines[1:]:
            i, p = line.split(",")
            idx.append(int(i))
            prov.append(p)
        return cls(tuple(idx), tuple(prov), float(header["rho"]), int(header["seed"]))

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "PreservationSet":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def target_size(rho: float, n: int) -> int:
    """ceil(rho * n), immune to float noise such as 0.1 * 30 = 3.0000000000000004."""
    if not 0 < rho <= 1:
        raise ValueError(f"rho must be in (0, 1], got {rho}")
    return max(1, math.ceil(round(rho * n, 9)))


def _top_k_count(n: int) -> int:
    return max(1, math.ceil(round(TOP_FRACTION * n, 9)))


def _score_target(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Sum over the batch (and positions) of the correct-class logits."""
    onehot = np.zeros(logits.shape, dtype=np.float32)
    t = np.asarray(targets)
    np.put_along_axis(onehot, t[..., None], 1.0, axis=-1)
    return (logits * onehot).sum()


def gradcam_map(activations: np.ndarray, gradients: np.ndarray) -> np.ndarray:
    """relu(sum_c w_c A_c) with w_c the mean gradient over positions.

    CNN activations are (B, C, H, W); transformer activations are (B, T, D)
    with channels on the last axis. Returns (B, positions).
    """
    if activations.ndim == 4:
        w = gradients.mean(axis=(2, 3))
        cam = np.einsum("bc,bchw->bhw", w, activations)
        return np.maximum(cam.reshape(cam.shape[0], -1), 0.0)
    w = gradients.mean(axis=1)
    return np.maximum(np.einsum("bd,btd->bt", w, activations), 0.0)


def concentration(cam: np.ndarray) -> np.ndarray:
    """Mean of the top 10% map values per sample."""
    k = _top_k_count(cam.shape[1])
    top = -np.sort(-cam, axis=1)[:, :k]
    return top.mean(axis=1)


def saliency_scores(model, dataset: Dataset, batch_size: int = EVAL_BATCH) -> np.ndarray:
    if not model.trained:
        raise UntrainedModelError("saliency needs a model that finished warm-up")
    scores = []
    for _, xb, yb in dataset.batches(batch_size):
        acts = model.trunk(xb, train=False)
        leaf = Tensor(acts.data, requires_grad=True)
        with Tape() as tape:
            target = _score_target(model.head(leaf), yb)
        g = grad(tape, target, wrt=[leaf])[leaf.id].data
        scores.append(concentration(gradcam_map(acts.data.astype(np.float64), g.astype(np.float64))))
    return np.concatenate(scores)


def predictive_entropy(logits: np.ndarray) -> np.ndarray:
    """Entropy of softmax over the last axis, averaged over any middle axes."""
    lsm = log_softmax(np.asarray(logits, dtype=np.float64))
    ent = -(np.exp(lsm) * lsm).sum(axis=-1)
    return ent.reshape(ent.shape[0], -1).mean(axis=1)


def uncertainty_scores(model, dataset: Dataset, batch_size: int = EVAL_BATCH) -> np.ndarray:
    out = [predictive_entropy(model.forward(xb, train=False).data) for _, xb, _ in dataset.batches(batch_size)]
    return np.concatenate(out)


def penultimate_features(model, dataset: Dataset, batch_size: int = EVAL_BATCH) -> np.ndarray:
    return np.concatenate([model.penultimate(xb) for _, xb, _ in dataset.batches(batch_size)])


def diversity_medoids(features: np.ndarray, k: int, rng: Rng, ids=None,
                      iterations: int = KMEANS_ITERATIONS) -> np.ndarray:
    """One medoid per k-means cluster, as sorted sample ids.

    Samples are processed in id order and the initial centroids are drawn
    from that order, so relabelling rows without changing ids gives the same
    answer. Empty clusters are filled by the unselected sample nearest their
    centroid.
    """
    X = np.asarray(features, dtype=np.float64)
    X = X.reshape(len(X), -1)
    ids = np.arange(len(X)) if ids is None else np.asarray(ids, dtype=np.int64)
    n = len(X)
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > n:
        raise ValueError(f"k={k} exceeds {n} samples")
    order = np.argsort(ids, kind="stable")
    X, ids = X[order], ids[order]
    if k == n:
        return ids.copy()

    cent = X[np.sort(rng.choice(n, size=k, replace=False))].copy()
    sq = (X * X).sum(axis=1)
    assign = None
    for _ in range(iterations):
        d = sq[:, None] - 2.0 * X @ cent.T + (cent * cent).sum(axis=1)[None, :]
        new = d.argmin(axis=1)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for j in range(k):
            members = assign == j
            if members.any():
                cent[j] = X[members].mean(axis=0)

    d = sq[:, None] - 2.0 * X @ cent.T + (cent * cent).sum(axis=1)[None, :]
    chosen = []
    taken = np.zeros(n, dtype=bool)
    empty = []
    for j in range(k):
        members = np.flatnonzero(assign == j)
        if members.size == 0:
            empty.append(j)
            continue
        pick = members[np.argmin(d[members, j])]
        chosen.append(pick)
        taken[pick] = True
    for j in empty:
        dist = np.where(taken, np.inf, d[:, j])
        pick = int(np.argmin(dist))
        chosen.append(pick)
        taken[pick] = True
    return np.sort(ids[chosen])


def _ranked(scores: np.ndarray, pool: np.ndarray) -> np.ndarray:
    """Pool ids ordered by descending score, ties to the lower id."""
    return pool[np.lexsort((pool, -scores[pool]))]


def quota_counts(m: int, quotas) -> tuple[int, int, int]:
    qs, qu, qd = (float(q) for q in quotas)
    if min(qs, qu, qd) < 0 or abs(qs + qu + qd - 1.0) > 1e-9:
        raise ValueError(f"quotas must be non-negative and sum to 1, got {quotas}")
    ns = math.floor(qs * m + 1e-9)
    nu = min(math.floor(qu * m + 1e-9), m - ns)
    return ns, nu, m - ns - nu


def build_preservation_set(model, dataset: Dataset, rho: float = 0.10, quotas=DEFAULT_QUOTAS,
                           seed: int = 0) -> PreservationSet:
    n = len(dataset)
    m = target_size(rho, n)
    ns, nu, nd = quota_counts(m, quotas)
    rng = Rng(seed)

    pool = np.arange(n)
    tags: dict[int, str] = {}
    if ns:
        for i in _ranked(saliency_scores(model, dataset), pool)[:ns]:
            tags[int(i)] = "saliency"
    if nu:
        pool = np.array([i for i in range(n) if i not in tags], dtype=np.int64)
        for i in _ranked(uncertainty_scores(model, dataset), pool)[:nu]:
            tags[int(i)] = "uncertainty"
    if nd:
        pool = np.array([i for i in range(n) if i not in tags], dtype=np.int64)
        feats = penultimate_features(model, dataset.subset(pool))
        for i in diversity_medoids(feats, nd, rng, ids=pool):
            tags[int(i)] = "diversity"
    idx = tuple(sorted(tags))
    return PreservationSet(idx, tuple(tags[i] for i in idx), float(rho), int(seed))


def evaluate_arrays(model, inputs: np.ndarray, targets: np.ndarray,
                    batch_size: int = EVAL_BATCH) -> tuple[float, float]:
    """(mean cross-entropy in nats, top-1 accuracy in %) without a tape.

    For sequence models both are averaged over every token position.
    """
    if len(inputs) == 0:
        raise ValueError("cannot evaluate an empty split")
    total_loss, correct, count = 0.0, 0, 0
    for start in range(0, len(inputs), batch_size):
        xb = inputs[start:start + batch_size]
        yb = np.asarray(targets[start:start + batch_size])
        logits = model.forward(xb, train=False).data
        lsm = log_softmax(logits.astype(np.float64))
        picked = np.take_along_axis(lsm, yb[..., None], axis=-1)[..., 0]
        total_loss += float(-picked.sum())
        correct += int((logits.argmax(axis=-1) == yb).sum())
        count += yb.size
    return total_loss / count, 100.0 * correct / count


def preservation_loss(model, pset: PreservationSet, dataset: Dataset, ids=None, train: bool = False) -> Tensor:
    """Differentiable mean cross-entropy over the set (or the ``ids`` subset of it)."""
    if len(pset) == 0:
        raise ValueError("preservation set is empty")
    ids = np.asarray(pset.indices if ids is None else ids, dtype=np.int64)
    return cross_entropy(model.forward(dataset.inputs[ids], train=train), dataset.targets[ids])


def preservation_metrics(model, pset: PreservationSet, dataset: Dataset,
                         targets: np.ndarray | None = None) -> tuple[float, float]:
    """(loss, accuracy %) over the full set; ``targets`` overrides the labels."""
    if len(pset) == 0:
        raise ValueError("preservation set is empty")
    ids = np.asarray(pset.indices, dtype=np.int64)
    y = dataset.targets[ids] if targets is None else targets
    return evaluate_arrays(model, dataset.inputs[ids], y)


def preservation_accuracy(model, pset: PreservationSet, dataset: Dataset) -> float:
    return preservation_metrics(model, pset, dataset)[1]
