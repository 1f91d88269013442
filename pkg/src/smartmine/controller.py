"""Adaptive kappa: a least-squares affine map from training error to kappa.

Each epoch the controller refits ``kappa = alpha * e + beta`` on its recent
(error, kappa) history and evaluates it at a target error. Two alternative
modes are kept for sweeps: a fixed kappa with optional per-epoch decay, and
tracking the latest validation error instead of a constant target.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DegenerateFitError

ADAPTIVE = "adaptive"
FIXED = "fixed"
VALIDATION = "validation"


@dataclass(frozen=True)
class ControllerConfig:
    mode: str = ADAPTIVE
    e_target: float = 0.6
    window: int = 8
    kappa_min: float = 0.5
    kappa_max: float = 64.0
    kappa_initial: float = 16.0
    decay: float = 1.0  # fixed mode: kappa_initial * decay ** (mining epochs elapsed)
    warmup_epochs: int = 2

    def __post_init__(self):
        if self.mode not in (ADAPTIVE, FIXED, VALIDATION):
            raise ConfigError(f"unknown controller mode {self.mode!r}")
        if not 0.0 < self.e_target < 1.0:
            raise ConfigError("e_target must be in (0, 1)")
        if self.window < 1:
            raise ConfigError("window must be >= 1")
        if not 0.0 < self.kappa_min <= self.kappa_max:
            raise ConfigError("kappa bounds must satisfy 0 < min <= max")
        if self.kappa_initial <= 0 or self.decay <= 0 or self.warmup_epochs < 0:
            raise ConfigError("kappa_initial and decay must be > 0, warmup_epochs >= 0")


def fit(history) -> tuple[float, float]:
    """Least-squares (alpha, beta) for kappa ~ alpha * e + beta."""
    h = np.asarray(history, dtype=np.float64).reshape(-1, 2)
    if len(h) < 2:
        raise DegenerateFitError("need at least two (error, kappa) points")
    e, k = h[:, 0], h[:, 1]
    if not np.all(np.isfinite(h)):
        raise DegenerateFitError("history contains non-finite values")
    e_mean, k_mean = e.mean(), k.mean()
    se = e - e_mean
    sxx = float(se @ se)
    if sxx <= 1e-24 * max(1.0, float(e @ e)):
        raise DegenerateFitError("all recorded errors are identical")
    alpha = float(se @ (k - k_mean)) / sxx
    beta = float(k_mean - alpha * e_mean)
    return alpha, beta


def predict(alpha: float, beta: float, e_target: float,
            bounds: tuple[float, float] = (0.5, 64.0)) -> float:
    lo, hi = bounds
    raw = alpha * e_target + beta
    if not math.isfinite(raw):
        raise ConfigError("prediction is not finite")
    return float(min(hi, max(lo, raw)))


def kappa_for_share(thresholds, share: float) -> float:
    """Largest kappa at which about ``share`` of anchors can still be mined.

    ``thresholds`` holds, per anchor, the supremum kappa that still yields a
    mined triplet (see ``mining.minable_kappa``).
    """
    t = np.sort(np.asarray(thresholds, dtype=np.float64))
    if t.size == 0:
        raise ConfigError("no anchors to calibrate on")
    share = min(1.0, max(0.0, share))
    # anchors above position i are mined when kappa sits just below t[i]
    i = min(t.size - 1, int(math.floor((1.0 - share) * t.size)))
    return float(t[i])


@dataclass(frozen=True)
class TraceRow:
    epoch: int
    observed_error: float | None
    alpha: float | None
    beta: float | None
    kappa: float


@dataclass
class KappaController:
    config: ControllerConfig = field(default_factory=ControllerConfig)
    history: list[tuple[float, float]] = field(default_factory=list)
    alpha: float | None = None
    beta: float | None = None
    kappa: float | None = None
    trace: list[TraceRow] = field(default_factory=list)
    kappa_seed: float | None = None
    _mining_epochs: int = 0

    @property
    def bounds(self) -> tuple[float, float]:
        return self.config.kappa_min, self.config.kappa_max

    def _seed_points(self) -> list[tuple[float, float]]:
        # A line through (1.0, kappa_min) and (e_target, seed kappa): high
        # error calls for a smaller kappa, and the line predicts the seed at
        # the target. The first point also keeps every later fit well-posed.
        c = self.config
        seed = c.kappa_initial if self.kappa_seed is None else self.kappa_seed
        return [(1.0, c.kappa_min), (c.e_target, seed)]

    def advance(self, observed_error: float | None, epoch: int,
                validation_error: float | None = None,
                initial_guess: float | None = None) -> float:
        """kappa for ``epoch``; ``observed_error`` is the previous epoch's training error.

        ``initial_guess`` replaces ``kappa_initial`` as the seed of the model on
        the first mining epoch (ignored afterwards and in fixed mode).
        """
        c = self.config
        if epoch < 1:
            raise ConfigError("epoch index starts at 1")
        if observed_error is not None and not 0.0 <= observed_error <= 1.0:
            raise ConfigError("observed error must lie in [0, 1]")
        if epoch <= c.warmup_epochs:
            kappa = c.kappa_initial
            self.trace.append(TraceRow(epoch, observed_error, self.alpha, self.beta, kappa))
            return kappa

        first = self.kappa is None
        if c.mode == FIXED:
            kappa = c.kappa_initial * c.decay ** self._mining_epochs
            kappa = min(c.kappa_max, max(c.kappa_min, kappa))
        else:
            if first:
                if initial_guess is not None:
                    lo, hi = self.bounds
                    self.kappa_seed = float(min(hi, max(lo, initial_guess)))
                self.alpha, self.beta = fit(self._seed_points())
            elif observed_error is not None:
                self.history.append((float(observed_error), float(self.kappa)))
                self.history = self.history[-c.window:]
                try:
                    self.alpha, self.beta = fit(self._seed_points()[:1] + self.history)
                except DegenerateFitError:
                    pass  # hold the previous model
            target = c.e_target
            if c.mode == VALIDATION and validation_error is not None:
                target = validation_error
            kappa = predict(self.alpha, self.beta, target, self.bounds)
        self._mining_epochs += 1
        self.kappa = kappa
        self.trace.append(TraceRow(epoch, observed_error, self.alpha, self.beta, kappa))
        return kappa

    def write_trace(self, path) -> None:
        def fmt(v):
            return "" if v is None else repr(float(v))

        lines = ["epoch,observed_error,alpha,beta,kappa"]
        for r in self.trace:
            lines.append(f"{r.epoch},{fmt(r.observed_error)},{fmt(r.alpha)},{fmt(r.beta)},{fmt(r.kappa)}")
        Path(path).write_text("\n".join(lines) + "\n")
