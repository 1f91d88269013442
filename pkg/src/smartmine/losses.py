"""Ratio-form triplet loss, Gaussian-statistics global loss, and their gradients.

Embedding arguments are arrays of shape ``(D,)`` for a single triplet or
``(B, D)`` for a batch. Gradients are taken with respect to the embeddings
themselves; the network's normalisation layer handles the projection onto
the sphere during backpropagation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

SQRT_EPS = 1e-12


@dataclass(frozen=True)
class LossConfig:
    margin: float = 0.2
    global_margin: float = 0.01
    lam: float = 1.0
    global_weight: float = 1.0

    def __post_init__(self):
        if not self.margin > 0:
            raise ConfigError(f"triplet margin must be > 0, got {self.margin}")
        if self.global_margin < 0 or self.lam < 0 or self.global_weight < 0:
            raise ConfigError("global margin, lambda and global weight must be >= 0")


@dataclass(frozen=True)
class GlobalLossStats:
    mu_plus: float
    mu_minus: float
    var_plus: float
    var_minus: float
    n: int


def pair_distance(f1, f2) -> np.ndarray | float:
    """Squared Euclidean distance divided by 4; lies in [0, 1] for unit vectors."""
    diff = np.asarray(f1, dtype=np.float64) - np.asarray(f2, dtype=np.float64)
    d = np.einsum("...i,...i->...", diff, diff) / 4.0
    return float(d) if np.ndim(d) == 0 else d


def _norms(diff):
    return np.sqrt(np.einsum("...i,...i->...", diff, diff))


def triplet_loss(fa, fp, fn, margin: float):
    """``max(0, 1 - |fa - fn| / (|fa - fp| + margin))`` with plain Euclidean norms."""
    if not margin > 0:
        raise ConfigError("triplet margin must be > 0")
    fa, fp, fn = (np.asarray(v, dtype=np.float64) for v in (fa, fp, fn))
    d_pos = _norms(fa - fp)
    d_neg = _norms(fa - fn)
    loss = np.maximum(0.0, 1.0 - d_neg / (d_pos + margin))
    return float(loss) if np.ndim(loss) == 0 else loss


def triplet_loss_grad(fa, fp, fn, margin: float):
    """Gradients of ``triplet_loss`` w.r.t. (fa, fp, fn), plus an active mask.

    Inactive triplets (hinge not engaged, including exact equality) get zero
    gradients.
    """
    if not margin > 0:
        raise ConfigError("triplet margin must be > 0")
    fa, fp, fn = (np.asarray(v, dtype=np.float64) for v in (fa, fp, fn))
    u = fa - fp
    v = fa - fn
    sq_pos = np.einsum("...i,...i->...", u, u)
    sq_neg = np.einsum("...i,...i->...", v, v)
    d_pos = np.sqrt(sq_pos)
    d_neg = np.sqrt(sq_neg)
    denom = d_pos + margin
    active = d_neg < denom
    dl_dpos = np.where(active, d_neg / denom**2, 0.0)
    dl_dneg = np.where(active, -1.0 / denom, 0.0)
    unit_pos = u / np.sqrt(sq_pos + SQRT_EPS)[..., None]
    unit_neg = v / np.sqrt(sq_neg + SQRT_EPS)[..., None]
    g_pos = dl_dpos[..., None] * unit_pos
    g_neg = dl_dneg[..., None] * unit_neg
    ga = g_pos + g_neg
    gp = -g_pos
    gn = -g_neg
    if np.ndim(active) == 0:
        active = bool(active)
    return ga, gp, gn, active


def _check_distances(d_plus, d_minus):
    d_plus = np.asarray(d_plus, dtype=np.float64)
    d_minus = np.asarray(d_minus, dtype=np.float64)
    if d_plus.size == 0 or d_minus.size == 0:
        raise ConfigError("global loss needs non-empty matching and non-matching distance sets")
    return d_plus, d_minus


def global_loss(d_plus, d_minus, lam: float, t: float) -> tuple[float, GlobalLossStats]:
    """``(var+ + var-) + lam * max(0, mu+ - mu- + t)`` with population variances."""
    d_plus, d_minus = _check_distances(d_plus, d_minus)
    mu_p, mu_m = d_plus.mean(), d_minus.mean()
    var_p = np.mean((d_plus - mu_p) ** 2)
    var_m = np.mean((d_minus - mu_m) ** 2)
    value = var_p + var_m + lam * max(0.0, mu_p - mu_m + t)
    stats = GlobalLossStats(float(mu_p), float(mu_m), float(var_p), float(var_m), int(d_plus.size))
    return float(value), stats


def global_loss_grad(fa, fp, fn, lam: float, t: float):
    """Gradients of the global loss over a batch of embedded triplets.

    Returns (ga, gp, gn), each shaped like the inputs (B, D).
    """
    fa, fp, fn = (np.atleast_2d(np.asarray(v, dtype=np.float64)) for v in (fa, fp, fn))
    u = fa - fp
    v = fa - fn
    d_plus = np.einsum("ij,ij->i", u, u) / 4.0
    d_minus = np.einsum("ij,ij->i", v, v) / 4.0
    d_plus, d_minus = _check_distances(d_plus, d_minus)
    n = d_plus.size
    mu_p, mu_m = d_plus.mean(), d_minus.mean()
    hinge = 1.0 if mu_p - mu_m + t > 0 else 0.0
    dj_dplus = 2.0 * (d_plus - mu_p) / n + lam * hinge / n
    dj_dminus = 2.0 * (d_minus - mu_m) / n - lam * hinge / n
    # d(|a-b|^2 / 4) / da = (a - b) / 2
    g_pos = dj_dplus[:, None] * u / 2.0
    g_neg = dj_dminus[:, None] * v / 2.0
    return g_pos + g_neg, -g_pos, -g_neg


@dataclass
class CombinedLoss:
    value: float
    triplet_losses: np.ndarray
    grad_anchor: np.ndarray
    grad_positive: np.ndarray
    grad_negative: np.ndarray
    global_value: float
    stats: GlobalLossStats | None


def combined_loss(fa, fp, fn, config: LossConfig) -> CombinedLoss:
    """Mean triplet loss plus ``global_weight`` times the batch global loss."""
    fa, fp, fn = (np.atleast_2d(np.asarray(v, dtype=np.float64)) for v in (fa, fp, fn))
    b = fa.shape[0]
    losses = np.atleast_1d(triplet_loss(fa, fp, fn, config.margin))
    ga, gp, gn, _ = triplet_loss_grad(fa, fp, fn, config.margin)
    ga, gp, gn = ga / b, gp / b, gn / b
    value = float(losses.mean())
    g_value, stats = 0.0, None
    if config.global_weight > 0:
        g_value, stats = global_loss(
            pair_distance(fa, fp), pair_distance(fa, fn), config.lam, config.global_margin
        )
        gga, ggp, ggn = global_loss_grad(fa, fp, fn, config.lam, config.global_margin)
        w = config.global_weight
        ga, gp, gn = ga + w * gga, gp + w * ggp, gn + w * ggn
        value += w * g_value
    return CombinedLoss(value, losses, ga, gp, gn, g_value, stats)
