"""Epoch loop: embed, index, mine, mix, optimise, evaluate.

Every random draw in an epoch comes from ``SeedSequence([seed, epoch, phase])``
so a run is a pure function of (data, config). During warm-up epochs no index
is built and every miner trains on the same random triplets.
"""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import ann_index, mining
from .controller import ADAPTIVE, FIXED, ControllerConfig, KappaController, kappa_for_share
from .data import TEST, TRAIN, VALIDATION as VALIDATION_SPLIT, Dataset
from .embedding import (EmbeddingParams, backward, default_specs, forward, forward_batch,
                        init_params, sgd_step)
from .errors import ConfigError, IndexBuildError
from .losses import LossConfig, combined_loss
from .metrics import EvalReport, cluster_for_nmi, nmi, recall_at_ks, training_error, validation_error

SMART_ADAPTIVE = "smart-adaptive"
SMART_FIXED = "smart-fixed"
RANDOM = "random"
NAIVE_HARD = "naive-hard"
SEMI_HARD = "semi-hard"
MINERS = (SMART_ADAPTIVE, SMART_FIXED, RANDOM, NAIVE_HARD, SEMI_HARD)

# phase ids for per-epoch seed derivation
_PH_INDEX, _PH_MINE, _PH_RANDOM, _PH_MIX, _PH_EVAL = range(5)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    mined_fraction: float = 0.5
    miner: str = SMART_ADAPTIVE
    lr_initial: float = 0.1
    lr_decay_every: int = 3
    lr_decay_factor: float = 2.0
    weight_decay: float = 0.0005
    warmup_epochs: int = 2
    hidden: int = 128
    embedding_dim: int = 64
    normalise_hidden: bool = False
    loss: LossConfig = field(default_factory=LossConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    list_size: int | None = None
    search_effort: int | None = None
    build_target: float = 0.98
    calibrate_kappa: bool = True
    index_workers: int = 1
    validation_triplets: int = 1000
    patience: int = 5
    min_improvement: float = 0.005
    seed: int = 0

    def __post_init__(self):
        if self.miner not in MINERS:
            raise ConfigError(f"unknown miner {self.miner!r}; choose from {', '.join(MINERS)}")
        if self.epochs < 0 or self.batch_size < 1 or self.warmup_epochs < 0:
            raise ConfigError("epochs >= 0, batch_size >= 1 and warmup_epochs >= 0 required")
        if not 0.0 <= self.mined_fraction <= 1.0:
            raise ConfigError("mined_fraction must be in [0, 1]")
        if self.lr_initial < 0 or self.lr_decay_every < 1 or self.lr_decay_factor <= 0:
            raise ConfigError("invalid learning-rate schedule")
        if self.patience < 0 or self.validation_triplets < 1:
            raise ConfigError("patience >= 0 and validation_triplets >= 1 required")

    def controller_config(self) -> ControllerConfig:
        mode = self.controller.mode
        if self.miner == SMART_FIXED:
            mode = FIXED
        elif self.miner == SMART_ADAPTIVE and mode == FIXED:
            mode = ADAPTIVE
        return replace(self.controller, mode=mode, warmup_epochs=self.warmup_epochs)


def learning_rate(config: TrainConfig, epoch: int) -> float:
    return config.lr_initial / config.lr_decay_factor ** ((epoch - 1) // config.lr_decay_every)


def epoch_rng(seed: int, epoch: int, phase: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, phase]))


def _phase_seed(seed: int, epoch: int, phase: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, phase]).generate_state(1)[0])


@dataclass
class TrainData:
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray

    @classmethod
    def from_dataset(cls, ds: Dataset, validation_fraction: float = 0.1) -> TrainData:
        if not np.any(ds.splits == VALIDATION_SPLIT):
            ds = ds.with_validation(validation_fraction)
        tx, ty = ds.split(TRAIN)
        vx, vy = ds.split(VALIDATION_SPLIT)
        sx, sy = ds.split(TEST)
        if len(ty) == 0 or len(sy) == 0:
            raise ConfigError("dataset needs non-empty train and test splits")
        return cls(tx, ty, vx, vy, sx, sy)


@dataclass
class BuildRecord:
    attempts: int
    successes: int
    window_success: float
    build_distance_computations: int
    search_distance_computations: int


@dataclass
class EpochRecord:
    report: EvalReport
    kappa: float | None
    lr: float
    mined: int
    random: int
    fallback: int
    mining_distance_computations: int
    build: BuildRecord | None
    timings: dict[str, float] = field(default_factory=dict, compare=False)

    @property
    def epoch(self) -> int:
        return self.report.epoch

    @property
    def triplets(self) -> int:
        return self.mined + self.random + self.fallback


@dataclass
class TrainState:
    params: EmbeddingParams
    controller: KappaController
    last_training_error: float | None = None
    last_validation_error: float | None = None
    best_validation: float = float("inf")
    stale_epochs: int = 0


def init_state(config: TrainConfig, input_dim: int) -> TrainState:
    specs = default_specs(input_dim, config.hidden, config.embedding_dim, config.normalise_hidden)
    return TrainState(init_params(specs, config.seed), KappaController(config.controller_config()))


def evaluate_params(params: EmbeddingParams, data: TrainData, config: TrainConfig, epoch: int,
                    training_err: float = 0.0) -> EvalReport:
    emb = forward_batch(params, data.test_x)
    num_classes = len(np.unique(data.test_y))
    clusters = cluster_for_nmi(emb, num_classes, _phase_seed(config.seed, epoch, _PH_EVAL))
    ks = tuple(k for k in (1, 2, 4, 8) if k < len(data.test_y))
    val_err = 0.0
    if len(data.val_y):
        val_err = validation_error(lambda x: forward_batch(params, x), data.val_x, data.val_y,
                                   config.seed, config.validation_triplets, config.loss.margin)
    return EvalReport(epoch, nmi(clusters, data.test_y), recall_at_ks(emb, data.test_y, ks),
                      training_err, val_err)


def _list_size(config: TrainConfig, labels: np.ndarray) -> int:
    n = len(labels)
    k = config.list_size
    if k is None:
        per_class = int(np.median(np.unique(labels, return_counts=True)[1]))
        k = ann_index.default_list_size(per_class)
    return max(1, min(k, n - 1))


def _initial_kappa(config, ctl_config, idx, dist, labels, prev_error):
    """Kappa whose mined share should lift the epoch's error to the target.

    Slots that are not mined are assumed to keep the previous epoch's error.
    """
    e_prev = 0.0 if prev_error is None else prev_error
    f = config.mined_fraction
    if f <= 0.0 or e_prev >= 1.0:
        return None
    share = (ctl_config.e_target - e_prev) / (f * (1.0 - e_prev))
    thresholds = mining.minable_kappa((idx, dist), labels)
    thresholds = np.minimum(thresholds, ctl_config.kappa_max)
    return kappa_for_share(thresholds, share)


def _smart_triplets(state, config, data, epoch, emb, timings):
    t0 = time.perf_counter()
    graph = ann_index.build(emb, config.build_target, _phase_seed(config.seed, epoch, _PH_INDEX))
    timings["build"] = time.perf_counter() - t0
    k = _list_size(config, data.train_y)
    effort = config.search_effort
    if effort is None:
        effort = ann_index.default_effort(k)
    t0 = time.perf_counter()
    idx, dist, calcs = ann_index.neighbour_lists(graph, k, min(effort, len(emb) - 1),
                                                 config.index_workers)
    timings["search"] = time.perf_counter() - t0
    ctl = state.controller
    guess = None
    if config.calibrate_kappa and ctl.kappa is None and ctl.config.mode != FIXED:
        guess = _initial_kappa(config, ctl.config, idx, dist, data.train_y, state.last_training_error)
    kappa = ctl.advance(state.last_training_error, epoch, state.last_validation_error, guess)
    t0 = time.perf_counter()
    mined = mining.select_triplets((idx, dist), data.train_y, kappa,
                                   _phase_seed(config.seed, epoch, _PH_MINE))
    timings["mine"] = time.perf_counter() - t0
    s = graph.stats
    build = BuildRecord(s.attempts, s.successes, s.window_success, s.distance_computations,
                        int(calcs.sum()))
    return mined, kappa, build, build.build_distance_computations + build.search_distance_computations


def _semihard_triplets(config, data, epoch, emb):
    """Semi-hard mining inside seeded chunks of the epoch-start embedding.

    One triplet per anchor, picked uniformly from that anchor's pairs. Anchors
    without a classmate in their chunk get a random-fallback triplet.
    """
    rng = epoch_rng(config.seed, epoch, _PH_MINE)
    n = len(emb)
    order = rng.permutation(n)
    parts, calcs = [], 0
    for lo in range(0, n, config.batch_size):
        rows = order[lo:lo + config.batch_size]
        t = mining.semihard_minibatch_triplets(emb[rows], data.train_y[rows])
        calcs += len(rows) * (len(rows) - 1)
        if len(t) == 0:
            continue
        # keep one pair per anchor
        pick = []
        for a in np.unique(t.anchors):
            choices = np.flatnonzero(t.anchors == a)
            pick.append(choices[rng.integers(len(choices))])
        t = t.take(np.array(pick))
        parts.append(mining.TripletBatch(rows[t.anchors], rows[t.positives], rows[t.negatives],
                                         t.provenance))
    covered = mining.TripletBatch.concat(parts).anchors
    missing = np.setdiff1d(np.arange(n), covered)
    parts.append(mining.fallback_triplets(data.train_y, missing, _phase_seed(config.seed, epoch, _PH_MINE)))
    return mining.TripletBatch.concat(parts), calcs


def _train_batch(params, batch, x, config, lr):
    rows, inv = np.unique(np.concatenate([batch.anchors, batch.positives, batch.negatives]),
                          return_inverse=True)
    emb, tape = forward(params, x[rows])
    b = len(batch)
    ia, ip, ineg = inv[:b], inv[b:2 * b], inv[2 * b:]
    out = combined_loss(emb[ia], emb[ip], emb[ineg], config.loss)
    grad = np.zeros_like(emb)
    np.add.at(grad, ia, out.grad_anchor)
    np.add.at(grad, ip, out.grad_positive)
    np.add.at(grad, ineg, out.grad_negative)
    grads, _ = backward(params, tape, grad)
    return sgd_step(params, grads, lr, config.weight_decay), out.triplet_losses


def run_epoch(state: TrainState, config: TrainConfig, data: TrainData, epoch: int,
              triplet_log: Callable[[mining.TripletBatch, np.ndarray], None] | None = None,
              ) -> tuple[TrainState, EpochRecord]:
    if epoch < 1:
        raise ConfigError("epochs are numbered from 1")
    timings: dict[str, float] = {}
    # the controller is advanced in place; keep the caller's state intact
    state = replace(state, controller=copy.deepcopy(state.controller))
    lr = learning_rate(config, epoch)
    n = len(data.train_y)
    t0 = time.perf_counter()
    emb = forward_batch(state.params, data.train_x)
    timings["forward"] = time.perf_counter() - t0

    random_pool = mining.random_triplets(data.train_y, n, _phase_seed(config.seed, epoch, _PH_RANDOM))
    kappa, build, calcs = None, None, 0
    mined = None
    warm = epoch <= config.warmup_epochs
    if warm or config.miner == RANDOM:
        if config.miner in (SMART_ADAPTIVE, SMART_FIXED):
            # keeps the controller trace aligned with epoch numbers
            state.controller.advance(state.last_training_error, epoch)
    elif config.miner in (SMART_ADAPTIVE, SMART_FIXED):
        try:
            mined, kappa, build, calcs = _smart_triplets(state, config, data, epoch, emb, timings)
        except IndexBuildError as exc:
            raise IndexBuildError(f"epoch {epoch}: {exc}") from exc
    elif config.miner == NAIVE_HARD:
        mined, calcs = mining.naive_hard_triplets(emb, data.train_y)
    else:
        mined, calcs = _semihard_triplets(config, data, epoch, emb)

    mix_seed = _phase_seed(config.seed, epoch, _PH_MIX)
    if mined is None:
        batches = [random_pool.take(slice(lo, lo + config.batch_size))
                   for lo in range(0, n, config.batch_size)]
    else:
        batches = mining.mix_batches(mined, random_pool, config.mined_fraction,
                                     config.batch_size, mix_seed)
    if triplet_log is not None:
        triplet_log(mining.TripletBatch.concat(batches), emb)

    t0 = time.perf_counter()
    params = state.params
    losses = []
    for batch in batches:
        params, l = _train_batch(params, batch, data.train_x, config, lr)
        losses.append(l)
    timings["train"] = time.perf_counter() - t0
    all_losses = np.concatenate(losses) if losses else np.zeros(0)
    train_err = training_error(all_losses) if len(all_losses) else 0.0

    t0 = time.perf_counter()
    report = evaluate_params(params, data, config, epoch, train_err)
    timings["eval"] = time.perf_counter() - t0

    trained = mining.TripletBatch.concat(batches)
    record = EpochRecord(
        report, kappa, lr,
        trained.count(mining.MINED), trained.count(mining.RANDOM), trained.count(mining.RANDOM_FALLBACK),
        int(calcs), build, timings,
    )
    best, stale = state.best_validation, state.stale_epochs
    if report.validation_error < best - config.min_improvement:
        best, stale = report.validation_error, 0
    else:
        stale += 1
        best = min(best, report.validation_error)
    new_state = TrainState(params, state.controller, train_err, report.validation_error, best, stale)
    return new_state, record


def train(data: TrainData, config: TrainConfig, on_epoch=None, triplet_log=None,
          ) -> tuple[EmbeddingParams, list[EpochRecord]]:
    """Run up to ``config.epochs`` epochs.

    Stops early after ``patience`` epochs without a validation gain above
    ``min_improvement``; patience 0 disables early stopping. ``on_epoch`` is
    called with (state, record) after every epoch.
    """
    state = init_state(config, data.train_x.shape[1])
    records: list[EpochRecord] = []
    for epoch in range(1, config.epochs + 1):
        log = None if triplet_log is None else (lambda b, e, ep=epoch: triplet_log(ep, b, e))
        state, rec = run_epoch(state, config, data, epoch, log)
        records.append(rec)
        if on_epoch is not None:
            on_epoch(state, rec)
        if config.patience and state.stale_epochs >= config.patience:
            break
    return state.params, records


@dataclass(frozen=True)
class BenchRow:
    n: int
    naive_distance_computations: int
    naive_seconds: float
    smart_distance_computations: int
    smart_seconds: float
    smart_mined: int

    HEADER = "n,naive_calcs,naive_seconds,smart_calcs,smart_seconds,smart_mined"

    def csv_row(self) -> str:
        return (f"{self.n},{self.naive_distance_computations},{self.naive_seconds:.6f},"
                f"{self.smart_distance_computations},{self.smart_seconds:.6f},{self.smart_mined}")


def benchmark_mining(sizes, config: TrainConfig | None = None, per_class: int = 50,
                     dim: int = 64, spread: float = 0.3, kappa: float = 1.0,
                     run_naive: bool = True) -> list[BenchRow]:
    """Distance computations and wall-clock time of one mining pass per size.

    Points are unit-normalised synthetic clusters standing in for an epoch's
    embedding. Smart mining counts index build plus neighbour-list search;
    naive-hard counts are the exact N(N-1) pairwise evaluations.
    """
    from .data import generate_synthetic

    config = config or TrainConfig()
    rows = []
    for n in sizes:
        n = int(n)
        classes = max(2, n // per_class)
        ds = generate_synthetic(classes, -(-n // classes), dim, spread, config.seed)
        emb = ds.features[:n] / np.linalg.norm(ds.features[:n], axis=1, keepdims=True)
        labels = ds.labels[:n]
        naive_calcs, naive_s = n * (n - 1), float("nan")
        if run_naive:
            t0 = time.perf_counter()
            _, naive_calcs = mining.naive_hard_triplets(emb, labels)
            naive_s = time.perf_counter() - t0
        t0 = time.perf_counter()
        graph = ann_index.build(emb, config.build_target, config.seed)
        k = _list_size(config, labels)
        effort = config.search_effort or ann_index.default_effort(k)
        idx, dist, calcs = ann_index.neighbour_lists(graph, k, min(effort, n - 1),
                                                     config.index_workers)
        mined = mining.select_triplets((idx, dist), labels, kappa, config.seed)
        smart_s = time.perf_counter() - t0
        smart_calcs = graph.stats.distance_computations + int(calcs.sum())
        rows.append(BenchRow(n, int(naive_calcs), naive_s, smart_calcs, smart_s,
                             mined.count(mining.MINED)))
    return rows
