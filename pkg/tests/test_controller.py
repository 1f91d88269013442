import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from oracles import fit_normal_equations
from smartmine.controller import (ControllerConfig, KappaController, fit, kappa_for_share,
                                  predict)
from smartmine.errors import ConfigError, DegenerateFitError


def test_two_point_example():
    a, b = fit([(0.9, 16), (0.5, 4)])
    assert a == pytest.approx(30.0, abs=1e-12)
    assert b == pytest.approx(-11.0, abs=1e-12)
    assert predict(a, b, 0.6) == pytest.approx(7.0, abs=1e-12)


def test_degenerate_and_constant_fits():
    with pytest.raises(DegenerateFitError):
        fit([(0.5, 4), (0.5, 8)])
    with pytest.raises(DegenerateFitError):
        fit([(0.5, 4)])
    a, b = fit([(0.1, 3.0), (0.4, 3.0), (0.9, 3.0)])
    assert a == pytest.approx(0.0, abs=1e-12) and b == pytest.approx(3.0, abs=1e-12)


@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0.5, 64)), min_size=2, max_size=12))
def test_fit_matches_normal_equations(history):
    e = np.array([h[0] for h in history])
    assume(np.ptp(e) > 1e-3)
    a, b = fit(history)
    ra, rb = fit_normal_equations(history)
    assert a == pytest.approx(ra, abs=1e-10, rel=1e-10)
    assert b == pytest.approx(rb, abs=1e-10, rel=1e-10)


def test_predict_examples():
    assert predict(0.0, 4.0, 0.1) == 4.0 and predict(0.0, 4.0, 0.9) == 4.0
    assert predict(30, -11, 0.3) == 0.5  # raw -2 clamps up
    assert predict(300, 0, 0.9) == 64.0


@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(0.05, 0.95), st.floats(0.05, 0.95))
def test_predict_affine_without_clamp(a, b, e1, e2):
    raw = [a * e + b for e in (e1, e2, (e1 + e2) / 2)]
    assume(all(0.5 < r < 64 for r in raw))
    assert predict(a, b, e1) + predict(a, b, e2) == pytest.approx(2 * predict(a, b, (e1 + e2) / 2))


def test_warmup_returns_initial_and_leaves_history():
    c = KappaController(ControllerConfig(kappa_initial=16, warmup_epochs=2))
    assert c.advance(None, 1) == 16.0
    assert c.advance(0.4, 2) == 16.0
    assert c.history == []


def test_first_mining_epoch_predicts_seed():
    cfg = ControllerConfig(kappa_initial=16, warmup_epochs=2)
    c = KappaController(cfg)
    c.advance(None, 1)
    c.advance(0.5, 2)
    assert c.advance(0.5, 3) == pytest.approx(16.0)
    c2 = KappaController(cfg)
    c2.advance(None, 1)
    c2.advance(0.5, 2)
    assert c2.advance(0.5, 3, initial_guess=5.0) == pytest.approx(5.0)


def test_later_epoch_is_fit_then_predict():
    cfg = ControllerConfig(kappa_initial=8, warmup_epochs=0, window=3)
    c = KappaController(cfg)
    k1 = c.advance(None, 1)
    k2 = c.advance(0.8, 2)
    a, b = fit([(1.0, cfg.kappa_min), (0.8, k1)])
    assert k2 == pytest.approx(predict(a, b, cfg.e_target, c.bounds))
    k3 = c.advance(0.3, 3)
    a, b = fit([(1.0, cfg.kappa_min), (0.8, k1), (0.3, k2)])
    assert k3 == pytest.approx(predict(a, b, cfg.e_target, c.bounds))


def test_window_keeps_recent_pairs():
    c = KappaController(ControllerConfig(warmup_epochs=0, window=2))
    c.advance(None, 1)
    for epoch, e in enumerate([0.2, 0.7, 0.5, 0.65], start=2):
        c.advance(e, epoch)
    assert len(c.history) == 2 and c.history[-1][0] == 0.65


def test_degenerate_fit_holds_previous_model():
    cfg = ControllerConfig(warmup_epochs=0, window=1, kappa_min=0.5)
    c = KappaController(cfg)
    c.advance(None, 1)
    k = c.advance(0.8, 2)
    model = (c.alpha, c.beta)
    # window 1 plus the anchor at e=1.0 is degenerate when e=1.0 is observed
    assert c.advance(1.0, 3) == k
    assert (c.alpha, c.beta) == model


def test_fixed_mode_decays_and_clamps():
    c = KappaController(ControllerConfig(mode="fixed", kappa_initial=16, decay=0.5,
                                         warmup_epochs=1, kappa_min=1.0))
    ks = [c.advance(0.5, e) for e in range(1, 8)]
    assert ks == [16.0, 16.0, 8.0, 4.0, 2.0, 1.0, 1.0]


def test_validation_mode_tracks_validation_error():
    cfg = ControllerConfig(mode="validation", warmup_epochs=0)
    c = KappaController(cfg)
    c.advance(None, 1)
    k = c.advance(0.7, 2, validation_error=0.3)
    assert k == pytest.approx(predict(c.alpha, c.beta, 0.3, c.bounds))


@given(st.lists(st.floats(0, 1), min_size=1, max_size=15))
def test_kappa_always_bounded_and_pure(errors):
    def run():
        c = KappaController(ControllerConfig(warmup_epochs=1))
        out = [c.advance(None, 1)]
        out += [c.advance(e, i) for i, e in enumerate(errors, start=2)]
        return out, c.trace
    a, trace_a = run()
    b, trace_b = run()
    assert a == b and trace_a == trace_b
    assert all(np.isfinite(k) and 0.5 <= k <= 64 for k in a)


def test_kappa_for_share():
    t = [0.0, 1.0, 2.0, 3.0]
    assert kappa_for_share(t, 1.0) == 0.0
    assert kappa_for_share(t, 0.5) == 2.0
    assert kappa_for_share(t, 0.0) == 3.0
    with pytest.raises(ConfigError):
        kappa_for_share([], 0.5)


def test_config_validation_and_trace(tmp_path):
    with pytest.raises(ConfigError):
        ControllerConfig(e_target=1.2)
    with pytest.raises(ConfigError):
        ControllerConfig(mode="pid")
    c = KappaController(ControllerConfig(warmup_epochs=1))
    c.advance(None, 1)
    c.advance(0.5, 2)
    with pytest.raises(ConfigError):
        c.advance(1.5, 3)
    c.write_trace(tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "epoch,observed_error,alpha,beta,kappa" and len(lines) == 3
