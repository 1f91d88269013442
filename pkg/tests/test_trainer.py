from dataclasses import replace

import numpy as np
import pytest

from smartmine import ann_index, mining
from smartmine.data import generate_synthetic
from smartmine.errors import ConfigError, IndexBuildError
from smartmine.trainer import (MINERS, TrainConfig, TrainData, benchmark_mining, evaluate_params,
                               init_state, learning_rate, run_epoch, train)


@pytest.fixture(scope="module")
def data():
    return TrainData.from_dataset(generate_synthetic(10, 30, 16, 0.3, 0, nuisance=0.3))


def small(**kw):
    base = dict(epochs=4, batch_size=16, hidden=32, embedding_dim=16, patience=0,
                validation_triplets=200, warmup_epochs=2, lr_initial=0.2)
    base.update(kw)
    return TrainConfig(**base)


def test_learning_rate_schedule():
    cfg = TrainConfig()
    assert learning_rate(cfg, 4) == 0.05
    assert [learning_rate(cfg, i) for i in (1, 3, 7, 10)] == [0.1, 0.1, 0.025, 0.0125]


def test_zero_epochs_returns_initial_params(data):
    cfg = small(epochs=0)
    params, records = train(data, cfg)
    assert records == [] and params.equals(init_state(cfg, 16).params)


def test_warmup_epochs_mine_nothing_and_counts_reconcile(data):
    _, records = train(data, small(epochs=4))
    n = len(data.train_y)
    for r in records:
        assert r.triplets == n
    assert [r.mined + r.fallback for r in records[:2]] == [0, 0]
    assert records[0].kappa is None and records[2].kappa is not None
    assert records[2].mined > 0


def test_random_and_smart_coincide_during_warmup(data):
    _, a = train(data, small(epochs=1, miner="random"))
    _, b = train(data, small(epochs=1, miner="smart-adaptive"))
    assert a == b


def test_epoch_is_deterministic(data):
    cfg = small(epochs=3)
    s = init_state(cfg, 16)
    for epoch in (1, 2):
        s, _ = run_epoch(s, cfg, data, epoch)
    s1, r1 = run_epoch(s, cfg, data, 3)
    s2, r2 = run_epoch(s, cfg, data, 3)
    assert r1 == r2 and s1.params.equals(s2.params)


def test_run_is_independent_of_index_workers(data):
    _, a = train(data, small(epochs=3, index_workers=1))
    _, b = train(data, small(epochs=3, index_workers=3))
    assert a == b


@pytest.mark.parametrize("miner", MINERS)
def test_every_miner_trains(data, miner):
    _, records = train(data, small(epochs=3, miner=miner))
    assert len(records) == 3
    r = records[-1]
    assert r.triplets == len(data.train_y)
    if miner == "random":
        assert r.mined == 0 and r.mining_distance_computations == 0
    else:
        assert r.mined + r.fallback > 0


def test_end_to_end_recall_improves(data):
    cfg = small(epochs=10)
    before = evaluate_params(init_state(cfg, 16).params, data, cfg, 0).recall[1]
    _, records = train(data, cfg)
    trace = [r.report.recall[1] for r in records]
    assert len(set(trace)) > 1 and all(0 < v <= 1 for v in trace)
    assert trace[-1] > before


def test_early_stopping(data):
    # the first epoch always improves on +inf, then two stale epochs stop the run
    cfg = small(epochs=30, patience=2, min_improvement=1.0)
    _, records = train(data, cfg)
    assert len(records) == 3


def test_triplet_log_callback(data):
    seen = []
    train(data, small(epochs=3), triplet_log=lambda ep, b, e: seen.append((ep, len(b), e.shape)))
    assert [s[0] for s in seen] == [1, 2, 3]
    assert all(s[1] == len(data.train_y) for s in seen)


def test_index_failure_carries_epoch(data, monkeypatch):
    def boom(*a, **k):
        raise IndexBuildError("stalled")
    monkeypatch.setattr(ann_index, "build", boom)
    with pytest.raises(IndexBuildError, match="epoch 3"):
        train(data, small(epochs=3))


def test_config_contracts():
    with pytest.raises(ConfigError):
        TrainConfig(miner="hardest")
    with pytest.raises(ConfigError):
        TrainConfig(mined_fraction=1.5)
    with pytest.raises(ConfigError):
        run_epoch(None, TrainConfig(), None, 0)


def test_benchmark_sanity_row():
    (row,) = benchmark_mining([100], TrainConfig(), per_class=10)
    assert row.n == 100 and row.naive_distance_computations == 100 * 99
    assert row.smart_distance_computations > 0 and row.smart_mined > 0
    assert row.csv_row().startswith("100,9900,")
