"""Triplet miners: smart (exclusion-boundary) selection plus three baselines.

Triplets are carried in a ``TripletBatch`` of parallel index arrays with a
provenance code per row. All miners are deterministic given their seeds; ties
are broken toward the lower dataset index.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from numba import njit

from .errors import ConfigError, NoPositiveError

MINED = 0
RANDOM_FALLBACK = 1
RANDOM = 2
PROVENANCE_NAMES = ("mined", "random-fallback", "random")


@dataclass(frozen=True)
class Triplet:
    anchor: int
    positive: int
    negative: int
    provenance: str = "mined"


@dataclass(frozen=True)
class NeighbourList:
    """Approximate neighbours of one anchor, ascending by squared distance."""

    anchor: int
    indices: np.ndarray
    distances: np.ndarray


class TripletBatch:
    def __init__(self, anchors=(), positives=(), negatives=(), provenance=()):
        self.anchors = np.asarray(anchors, dtype=np.int64).reshape(-1)
        self.positives = np.asarray(positives, dtype=np.int64).reshape(-1)
        self.negatives = np.asarray(negatives, dtype=np.int64).reshape(-1)
        self.provenance = np.asarray(provenance, dtype=np.int8).reshape(-1)
        n = len(self.anchors)
        if not (len(self.positives) == len(self.negatives) == len(self.provenance) == n):
            raise ConfigError("triplet arrays must have equal lengths")

    @classmethod
    def from_triplets(cls, triplets: Sequence[Triplet]) -> TripletBatch:
        codes = [PROVENANCE_NAMES.index(t.provenance) for t in triplets]
        return cls(
            [t.anchor for t in triplets], [t.positive for t in triplets],
            [t.negative for t in triplets], codes,
        )

    @classmethod
    def concat(cls, parts: Sequence[TripletBatch]) -> TripletBatch:
        parts = list(parts)
        if not parts:
            return cls()
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in cls._fields))

    _fields = ("anchors", "positives", "negatives", "provenance")

    def take(self, idx) -> TripletBatch:
        return TripletBatch(*(getattr(self, f)[idx] for f in self._fields))

    def count(self, provenance: int) -> int:
        return int(np.count_nonzero(self.provenance == provenance))

    def __len__(self) -> int:
        return len(self.anchors)

    def __iter__(self) -> Iterator[Triplet]:
        for a, p, n, c in zip(self.anchors, self.positives, self.negatives, self.provenance):
            yield Triplet(int(a), int(p), int(n), PROVENANCE_NAMES[c])

    def __eq__(self, other) -> bool:
        if not isinstance(other, TripletBatch):
            return NotImplemented
        return all(np.array_equal(getattr(self, f), getattr(other, f)) for f in self._fields)

    def __repr__(self) -> str:
        return f"TripletBatch(n={len(self)})"


def anchor_rng(seed: int, anchor: int) -> np.random.Generator:
    """Independent stream per anchor so selection order does not matter."""
    return np.random.default_rng((int(seed), int(anchor)))


class _ClassIndex:
    """Member lists per class, for uniform same/other-class draws."""

    def __init__(self, labels):
        self.labels = np.asarray(labels)
        self.n = len(self.labels)
        classes, inverse = np.unique(self.labels, return_inverse=True)
        order = np.argsort(inverse, kind="stable")
        counts = np.bincount(inverse, minlength=len(classes))
        starts = np.concatenate([[0], np.cumsum(counts)])
        self.inverse = inverse
        self.sorted_members = order
        self.starts = starts
        self.counts = counts

    def members(self, i: int) -> np.ndarray:
        c = self.inverse[i]
        return self.sorted_members[self.starts[c]:self.starts[c + 1]]

    def class_size(self, i: int) -> int:
        return int(self.counts[self.inverse[i]])

    def can_anchor(self, i: int) -> bool:
        return self.class_size(i) >= 2 and self.class_size(i) < self.n

    def random_positive(self, i: int, rng) -> int:
        # uniform over the class minus the anchor
        m = self.members(i)
        j = int(rng.integers(len(m) - 1))
        cand = int(m[j])
        return int(m[-1]) if cand == i else cand

    def random_negative(self, i: int, rng) -> int:
        # uniform over the complement of the anchor's class
        c = self.inverse[i]
        j = int(rng.integers(self.n - self.counts[c]))
        lo = self.starts[c]
        return int(self.sorted_members[j if j < lo else j + self.counts[c]])


def exclusion_bound(neighbour_list: NeighbourList, labels, kappa: float) -> float:
    """``kappa`` times the squared distance to the first same-class entry."""
    if not kappa > 0:
        raise ConfigError(f"kappa must be > 0, got {kappa}")
    labels = np.asarray(labels)
    mine = labels[neighbour_list.anchor]
    for s, d in zip(neighbour_list.indices, neighbour_list.distances):
        if labels[s] == mine:
            return float(kappa * d)
    raise NoPositiveError(f"anchor {neighbour_list.anchor} has no same-class neighbour in its list")


def _as_arrays(lists, n: int):
    if isinstance(lists, tuple) and len(lists) == 2:
        idx, dist = (np.asarray(a) for a in lists)
    else:
        lists = list(lists)
        if len(lists) != n:
            raise ConfigError(f"expected {n} neighbour lists, got {len(lists)}")
        for i, nl in enumerate(lists):
            if nl.anchor != i:
                raise ConfigError("neighbour lists must be ordered by anchor")
        width = {len(nl.indices) for nl in lists}
        if len(width) != 1:
            return [np.asarray(nl.indices) for nl in lists], [np.asarray(nl.distances) for nl in lists]
        idx = np.array([nl.indices for nl in lists], dtype=np.int64).reshape(n, -1)
        dist = np.array([nl.distances for nl in lists], dtype=np.float64).reshape(n, -1)
    if idx.shape[0] != n or idx.shape != dist.shape:
        raise ConfigError("neighbour index/distance tables must be [N, k] and match the labels")
    return idx, dist


def _scan_list(anchor, idx, dist, labels, kappa):
    """One pass over a sorted list: valid negatives and (positive, negatives-before) pairs."""
    mine = labels[anchor]
    bound = None
    negs: list[int] = []
    pos: list[tuple[int, int]] = []
    for s, d in zip(idx, dist):
        same = labels[s] == mine
        if bound is None:
            if same:
                bound = kappa * d
            continue
        # the boundary test is strict: a negative exactly on it is excluded
        if d <= bound:
            continue
        if same:
            pos.append((int(s), len(negs)))
        else:
            negs.append(int(s))
    return negs, pos


def select_triplets(lists, labels, kappa: float, seed: int, per_anchor: int = 1) -> TripletBatch:
    """Smart triplet selection over per-anchor neighbour lists.

    ``lists`` is either a sequence of NeighbourList (one per anchor, in anchor
    order) or an ``(indices, distances)`` pair of [N, k] tables. Each anchor
    yields ``per_anchor`` triplets: the next unused valid negative with the
    first positive that lies beyond it in the list, otherwise a uniform
    same-class point from outside the list. Anchors whose negatives are used
    up get random-fallback triplets; anchors in a singleton class are skipped.
    """
    labels = np.asarray(labels)
    n = len(labels)
    if n == 0:
        raise ConfigError("select_triplets needs a non-empty dataset")
    if not kappa > 0:
        raise ConfigError(f"kappa must be > 0, got {kappa}")
    if per_anchor < 1:
        raise ConfigError("per_anchor must be >= 1")
    idx, dist = _as_arrays(lists, n)
    if len(idx) == 0 or (not isinstance(idx, list) and idx.shape[1] == 0):
        raise ConfigError("neighbour lists are empty")
    classes = _ClassIndex(labels)
    A, P, N, C = [], [], [], []
    for a in range(n):
        if not classes.can_anchor(a):
            continue
        row = idx[a]
        negs, pos = _scan_list(a, row, dist[a], labels, kappa)
        rng = None
        for t in range(per_anchor):
            if t >= len(negs):
                rng = rng or anchor_rng(seed, a)
                A.append(a)
                P.append(classes.random_positive(a, rng))
                N.append(classes.random_negative(a, rng))
                C.append(RANDOM_FALLBACK)
                continue
            neg = negs[t]
            chosen = next((p for p, before in pos if before > t), None)
            provenance = MINED
            if chosen is None:
                rng = rng or anchor_rng(seed, a)
                outside = np.setdiff1d(classes.members(a), np.append(row, a), assume_unique=False)
                if len(outside):
                    chosen = int(outside[rng.integers(len(outside))])
                else:
                    chosen = classes.random_positive(a, rng)
                    neg = classes.random_negative(a, rng)
                    provenance = RANDOM_FALLBACK
            A.append(a)
            P.append(chosen)
            N.append(neg)
            C.append(provenance)
    return TripletBatch(A, P, N, C)


def minable_kappa(lists, labels) -> np.ndarray:
    """Per anchor, the supremum of kappa values that still yield a mined triplet.

    An anchor is mined at ``kappa`` iff ``kappa < minable_kappa[anchor]``: some
    negative past the nearest positive lies beyond the boundary and has a
    usable positive (later in the list, or outside it). 0 means never.
    """
    labels = np.asarray(labels)
    n = len(labels)
    idx, dist = _as_arrays(lists, n)
    classes = _ClassIndex(labels)
    out = np.zeros(n)
    for a in range(n):
        if not classes.can_anchor(a):
            continue
        row, d = np.asarray(idx[a]), np.asarray(dist[a], dtype=np.float64)
        same = labels[row] == labels[a]
        if not same.any():
            continue
        first = int(np.argmax(same))
        outside = classes.class_size(a) - 1 - int(np.count_nonzero(same & (row != a))) > 0
        # a positive strictly later than position j exists iff j < last positive
        last_pos = int(np.flatnonzero(same)[-1])
        for j in range(len(row) - 1, first, -1):
            if not same[j] and (outside or j < last_pos):
                if d[first] > 0.0:
                    out[a] = d[j] / d[first]
                elif d[j] > 0.0:
                    out[a] = np.inf  # zero-radius boundary excludes nothing
                break
    return out


def fallback_triplets(labels, anchors, seed: int) -> TripletBatch:
    """Random-fallback triplets for the given anchors, one each, from per-anchor streams."""
    classes = _ClassIndex(labels)
    A, P, N = [], [], []
    for a in np.asarray(anchors, dtype=np.int64):
        if not classes.can_anchor(int(a)):
            continue
        rng = anchor_rng(seed, int(a))
        A.append(int(a))
        P.append(classes.random_positive(int(a), rng))
        N.append(classes.random_negative(int(a), rng))
    return TripletBatch(A, P, N, np.full(len(A), RANDOM_FALLBACK, np.int8))


def random_triplets(labels, count: int, seed: int) -> TripletBatch:
    """Uniform anchor (among points with a classmate), positive, and negative."""
    labels = np.asarray(labels)
    if count < 0:
        raise ConfigError("count must be >= 0")
    if count == 0:
        return TripletBatch()
    classes = _ClassIndex(labels)
    sizes = classes.counts[classes.inverse]
    eligible = np.flatnonzero((sizes >= 2) & (sizes < classes.n))
    if len(eligible) == 0:
        raise ConfigError("no point has both a same-class partner and a different-class point")
    rng = np.random.default_rng(seed)
    a = eligible[rng.integers(len(eligible), size=count)]
    c = classes.inverse[a]
    size = classes.counts[c]
    start = classes.starts[c]
    # positive: uniform over class minus anchor
    j = rng.integers(0, size - 1)
    p = classes.sorted_members[start + j]
    p = np.where(p == a, classes.sorted_members[start + size - 1], p)
    # negative: uniform over the complement of the class
    j = rng.integers(0, classes.n - size)
    n_idx = classes.sorted_members[np.where(j < start, j, j + size)]
    return TripletBatch(a, p, n_idx, np.full(count, RANDOM, np.int8))


@njit(cache=True, nogil=True)
def _hardest(X, labels):
    n = X.shape[0]
    pos = np.full(n, -1, np.int64)
    neg = np.full(n, -1, np.int64)
    for i in range(n):
        best_p = -1.0
        best_n = np.inf
        for j in range(n):
            if j == i:
                continue
            s = 0.0
            for t in range(X.shape[1]):
                d = X[i, t] - X[j, t]
                s += d * d
            if labels[j] == labels[i]:
                if s > best_p:
                    best_p = s
                    pos[i] = j
            elif s < best_n:
                best_n = s
                neg[i] = j
    return pos, neg


def naive_hard_triplets(embeddings, labels) -> tuple[TripletBatch, int]:
    """Hardest positive (argmax) and hardest negative (argmin) over the whole set.

    Returns the triplets and the number of distance evaluations, N(N-1).
    Anchors lacking a positive or a negative are skipped.
    """
    X = np.ascontiguousarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if X.ndim != 2 or len(X) != len(labels):
        raise ConfigError("embeddings must be [N, D] with one label per row")
    n = len(X)
    _, codes = np.unique(labels, return_inverse=True)
    pos, neg = _hardest(X, codes.astype(np.int64))
    keep = np.flatnonzero((pos >= 0) & (neg >= 0))
    batch = TripletBatch(keep, pos[keep], neg[keep], np.full(len(keep), MINED, np.int8))
    return batch, n * (n - 1)


def semihard_minibatch_triplets(embeddings, labels) -> TripletBatch:
    """Semi-hard negatives for every ordered anchor-positive pair in a minibatch.

    For each pair the closest negative strictly farther than the positive is
    used; when there is none, the closest negative overall. Indices refer to
    rows of the minibatch.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if X.ndim != 2 or len(X) != len(labels):
        raise ConfigError("embeddings must be [B, D] with one label per row")
    diff = X[:, None, :] - X[None, :, :]
    D = np.einsum("ijk,ijk->ij", diff, diff)
    same = labels[:, None] == labels[None, :]
    A, P, N = [], [], []
    for a in range(len(X)):
        negs = np.flatnonzero(~same[a])
        if len(negs) == 0:
            continue
        dn = D[a, negs]
        for p in np.flatnonzero(same[a]):
            if p == a:
                continue
            farther = dn > D[a, p]
            if farther.any():
                cand = np.where(farther, dn, np.inf)
                n = negs[int(np.argmin(cand))]
            else:
                n = negs[int(np.argmin(dn))]
            A.append(a)
            P.append(int(p))
            N.append(int(n))
    return TripletBatch(A, P, N, np.full(len(A), MINED, np.int8))


def mix_batches(mined: TripletBatch, random: TripletBatch, mined_fraction: float,
                batch_size: int, seed: int) -> list[TripletBatch]:
    """Split one epoch of ``len(mined)`` triplets into mixed minibatches.

    Each batch holds ``round(mined_fraction * size)`` mined triplets, drawn in
    order from a seeded shuffle of ``mined``, and is topped up from ``random``
    in order. Rows within a batch are then shuffled.
    """
    if not 0.0 <= mined_fraction <= 1.0:
        raise ConfigError(f"mined_fraction must be in [0, 1], got {mined_fraction}")
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    total = len(mined)
    rng = np.random.default_rng(seed)
    mined = mined.take(rng.permutation(total))
    batches = []
    mi = ri = 0
    for start in range(0, total, batch_size):
        size = min(batch_size, total - start)
        m = min(int(round(mined_fraction * size)), total - mi)
        r = size - m
        if ri + r > len(random):
            raise ConfigError("not enough random triplets to fill the batches")
        part = TripletBatch.concat([mined.take(slice(mi, mi + m)), random.take(slice(ri, ri + r))])
        mi += m
        ri += r
        batches.append(part.take(rng.permutation(size)))
    return batches


def write_triplet_log(path, batch: TripletBatch, embeddings) -> None:
    """Lines ``anchor,positive,negative,provenance,d_ap,d_an`` (squared distances)."""
    X = np.asarray(embeddings, dtype=np.float64)
    d_ap = np.sum((X[batch.anchors] - X[batch.positives]) ** 2, axis=1)
    d_an = np.sum((X[batch.anchors] - X[batch.negatives]) ** 2, axis=1)
    lines = ["anchor,positive,negative,provenance,d_ap,d_an"]
    for t, dp, dn in zip(batch, d_ap, d_an):
        lines.append(f"{t.anchor},{t.positive},{t.negative},{t.provenance},{float(dp)!r},{float(dn)!r}")
    Path(path).write_text("\n".join(lines) + "\n")
