"""Embedding evaluation: NMI over a k-means clustering, Recall@K, error rates."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .losses import triplet_loss
from .mining import random_triplets

DEFAULT_KS = (1, 2, 4, 8)
CSV_HEADER = "epoch,nmi,r@1,r@2,r@4,r@8,train_err,val_err"


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(clusters, labels) -> float:
    """Mutual information over the geometric mean of the two entropies.

    Both partitions trivial gives 1.0; exactly one trivial gives 0.0.
    """
    a = np.asarray(clusters)
    b = np.asarray(labels)
    if a.shape != b.shape or a.ndim != 1 or len(a) == 0:
        raise ConfigError("nmi needs two equal-length, non-empty label vectors")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1.0)
    ha = _entropy(table.sum(axis=1))
    hb = _entropy(table.sum(axis=0))
    if ha == 0.0 and hb == 0.0:
        return 1.0
    if ha == 0.0 or hb == 0.0:
        return 0.0
    n = len(a)
    nz = table > 0
    outer = np.outer(table.sum(axis=1), table.sum(axis=0))
    mi = float((table[nz] / n * np.log(table[nz] * n / outer[nz])).sum())
    return float(min(1.0, max(0.0, mi / np.sqrt(ha * hb))))


def _kmeans_once(X, k, rng, max_iter):
    n = len(X)
    sq = np.einsum("ij,ij->i", X, X)
    centres = np.empty((k, X.shape[1]))
    centres[0] = X[rng.integers(n)]
    closest = np.sum((X - centres[0]) ** 2, axis=1)
    for c in range(1, k):
        total = closest.sum()
        if total <= 0:
            centres[c] = X[rng.integers(n)]
        else:
            j = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            centres[c] = X[min(j, n - 1)]
        closest = np.minimum(closest, np.sum((X - centres[c]) ** 2, axis=1))
    assign = None
    for _ in range(max_iter):
        d = sq[:, None] - 2.0 * X @ centres.T + np.einsum("ij,ij->i", centres, centres)[None, :]
        new = np.argmin(d, axis=1)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for c in range(k):
            members = X[assign == c]
            if len(members):
                centres[c] = members.mean(axis=0)
            else:
                # re-seed an empty cluster at the point farthest from its centre
                far = int(np.argmax(d[np.arange(n), assign]))
                centres[c] = X[far]
    inertia = float(np.sum((X - centres[assign]) ** 2))
    return assign, inertia


def cluster_for_nmi(embeddings, num_classes: int, seed: int, restarts: int = 10,
                    max_iter: int = 100) -> np.ndarray:
    """k-means++ seeded Lloyd iterations; best inertia over ``restarts`` runs."""
    X = np.asarray(embeddings, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise ConfigError("embeddings must be a non-empty [N, D] table")
    if not 1 <= num_classes <= len(X):
        raise ConfigError(f"num_classes must be in [1, {len(X)}], got {num_classes}")
    if num_classes == 1:
        return np.zeros(len(X), dtype=np.int64)
    rng = np.random.default_rng(seed)
    best, best_inertia = None, np.inf
    for _ in range(restarts):
        assign, inertia = _kmeans_once(X, num_classes, rng, max_iter)
        if inertia < best_inertia:
            best, best_inertia = assign, inertia
    return best.astype(np.int64)


def _neighbour_order(X: np.ndarray, kmax: int) -> np.ndarray:
    """First ``kmax`` exact neighbours of each row, self excluded, ties by index."""
    n = len(X)
    out = np.empty((n, kmax), dtype=np.int64)
    step = max(1, 4_000_000 // max(n * X.shape[1], 1))
    for lo in range(0, n, step):
        hi = min(n, lo + step)
        diff = X[lo:hi, None, :] - X[None, :, :]
        d = np.einsum("ijk,ijk->ij", diff, diff)
        d[np.arange(hi - lo), np.arange(lo, hi)] = np.inf
        out[lo:hi] = np.argsort(d, axis=1, kind="stable")[:, :kmax]
    return out


def recall_at_ks(embeddings, labels, ks: Sequence[int] = DEFAULT_KS) -> dict[int, float]:
    X = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(X)
    if n < 2 or len(labels) != n:
        raise ConfigError("recall needs at least two labelled points")
    if any(k < 1 or k > n - 1 for k in ks):
        raise ConfigError(f"every K must be in [1, {n - 1}]")
    order = _neighbour_order(X, max(ks))
    hits = labels[order] == labels[:, None]
    first = np.where(hits.any(axis=1), hits.argmax(axis=1), n)
    return {k: float(np.mean(first < k)) for k in ks}


def recall_at_k(embeddings, labels, k: int) -> float:
    """Fraction of points with a same-class point among their k exact neighbours."""
    return recall_at_ks(embeddings, labels, (k,))[k]


def training_error(losses) -> float:
    """Fraction of triplets with strictly positive loss."""
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size == 0:
        raise ConfigError("training error of an empty batch is undefined")
    return float(np.mean(losses > 0.0))


def validation_error(embed, features, labels, sampler_seed: int, count: int = 1000,
                     margin: float = 0.2) -> float:
    """Training error of seeded random triplets drawn from a held-out split.

    ``embed`` maps a feature table to embeddings (e.g. a bound forward_batch).
    """
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ConfigError("validation split is empty")
    t = random_triplets(labels, count, sampler_seed)
    E = np.asarray(embed(np.asarray(features)))
    return training_error(triplet_loss(E[t.anchors], E[t.positives], E[t.negatives], margin))


@dataclass
class EvalReport:
    epoch: int
    nmi: float
    recall: dict[int, float] = field(default_factory=dict)
    training_error: float = 0.0
    validation_error: float = 0.0

    def csv_row(self) -> str:
        r = [self.recall.get(k, float("nan")) for k in DEFAULT_KS]
        vals = [self.nmi, *r, self.training_error, self.validation_error]
        return ",".join([str(self.epoch)] + [f"{v:.6f}" for v in vals])

    def as_dict(self) -> dict:
        return asdict(self)


def evaluate(embeddings, labels, num_classes: int, epoch: int, seed: int,
             training_err: float = 0.0, validation_err: float = 0.0,
             ks: Sequence[int] = DEFAULT_KS) -> EvalReport:
    clusters = cluster_for_nmi(embeddings, num_classes, seed)
    return EvalReport(epoch, nmi(clusters, labels), recall_at_ks(embeddings, labels, ks),
                      training_err, validation_err)


def write_reports(path, reports: Sequence[EvalReport]) -> None:
    lines = [CSV_HEADER] + [r.csv_row() for r in reports]
    Path(path).write_text("\n".join(lines) + "\n")
