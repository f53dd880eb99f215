"""Distance correlation, disentanglement and Cox partial-likelihood losses.

All functions accept either numpy arrays or :class:`~dimaf.diffgraph.Tensor`
objects and return a scalar Tensor, so the same code path is used for
training (differentiable) and for evaluation.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import diffgraph as dg
from .diffgraph import Tensor

# dVar below this is treated as a collapsed (constant) sample
DEGENERATE_DVAR = 1e-14


class CensoredBatchWarning(UserWarning):
    """The Cox batch had no observed event, so the loss is zero."""


def _as_2d(x) -> Tensor:
    t = dg.as_tensor(x)
    if t.ndim == 1:
        t = dg.reshape(t, (t.shape[0], 1))
    if t.ndim != 2:
        raise ValueError(f"expected a B x D matrix, got shape {t.shape}")
    return t


def _double_centered(x: Tensor) -> Tensor:
    d = dg.pairwise_distances(x)
    return (d - dg.mean(d, axis=0, keepdims=True) - dg.mean(d, axis=1, keepdims=True)
            + dg.mean(d))


def distance_covariance_sq(x, y) -> Tensor:
    """Squared empirical distance covariance (V-statistic), not clamped."""
    x, y = _as_2d(x), _as_2d(y)
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"sample sizes differ: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 2:
        raise ValueError("distance covariance needs at least 2 samples")
    return dg.mean(_double_centered(x) * _double_centered(y))


def distance_covariance(x, y) -> Tensor:
    """Empirical distance covariance ``sqrt(max(dCov^2, 0))``."""
    return dg.sqrt(dg.clamp_min(distance_covariance_sq(x, y), 0.0))


def distance_correlation(x, y, squared: bool = False) -> Tensor:
    """Distance correlation in [0, 1].

    Returns 0 when either sample is degenerate (vanishing distance variance).
    With ``squared=True`` the squared statistic dCov^2 / sqrt(dVar^2_x dVar^2_y)
    is returned instead.
    """
    x, y = _as_2d(x), _as_2d(y)
    if x.shape[0] < 2:
        raise ValueError("distance correlation needs at least 2 samples")
    ax, ay = _double_centered(x), _double_centered(y)
    vxx = dg.clamp_min(dg.mean(ax * ax), 0.0)
    vyy = dg.clamp_min(dg.mean(ay * ay), 0.0)
    if np.sqrt(vxx.item()) < DEGENERATE_DVAR or np.sqrt(vyy.item()) < DEGENERATE_DVAR:
        return Tensor(0.0)
    vxy = dg.clamp_min(dg.mean(ax * ay), 0.0)
    r2 = vxy / dg.sqrt(vxx * vyy)
    return r2 if squared else dg.sqrt(r2)


@dataclass
class DisentanglementTerms:
    d1: Tensor
    d2: Tensor

    @property
    def total(self) -> Tensor:
        return self.d1 + self.d2


def disentanglement_terms(z_gg, z_hh, z_hg, z_gh, squared: bool = False) -> DisentanglementTerms:
    """D1 = DC(gg, hh) between the specific blocks; D2 = DC([gg|hh], [hg|gh])."""
    z_gg, z_hh, z_hg, z_gh = (_as_2d(z) for z in (z_gg, z_hh, z_hg, z_gh))
    if len({z.shape[0] for z in (z_gg, z_hh, z_hg, z_gh)}) != 1:
        raise ValueError("representation blocks must share the batch dimension")
    d1 = distance_correlation(z_gg, z_hh, squared=squared)
    d2 = distance_correlation(dg.concat([z_gg, z_hh], axis=1),
                              dg.concat([z_hg, z_gh], axis=1), squared=squared)
    return DisentanglementTerms(d1, d2)


def disentanglement_loss(z_gg, z_hh, z_hg, z_gh, squared: bool = False) -> Tensor:
    return disentanglement_terms(z_gg, z_hh, z_hg, z_gh, squared=squared).total


def risk_set_mask(times: np.ndarray) -> np.ndarray:
    """``mask[i, j]`` is true when patient j is still at risk at t_i (t_j >= t_i)."""
    times = np.asarray(times, dtype=np.float64)
    return times[None, :] >= times[:, None]


def cox_loss(risks, times, events, reduction: str = "sum") -> Tensor:
    """Negative Cox partial log-likelihood with Breslow ties.

    ``reduction="sum"`` sums over uncensored patients; ``"mean"`` divides that
    sum by the batch size. An all-censored batch yields 0 and emits
    :class:`CensoredBatchWarning`.
    """
    r = dg.as_tensor(risks)
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=np.float64)
    if r.ndim != 1 or not (r.shape[0] == times.shape[0] == events.shape[0]):
        raise ValueError("risks, times and events must be vectors of equal length")
    if np.any(times <= 0):
        raise ValueError("survival times must be positive")
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    if not events.any():
        warnings.warn("no uncensored patient in batch; Cox loss is 0", CensoredBatchWarning,
                      stacklevel=2)
        return dg.mul(dg.sum(r), 0.0)
    n = r.shape[0]
    grid = dg.broadcast_to(dg.reshape(r, (1, n)), (n, n))
    log_risk_set = dg.masked_logsumexp(grid, risk_set_mask(times), axis=1)
    loss = -dg.sum((r - log_risk_set) * events)
    return loss * (1.0 / n) if reduction == "mean" else loss


def total_loss(surv, dis, lambda_surv: float = 1.0, lambda_dis: float = 7.0) -> Tensor:
    if lambda_surv < 0 or lambda_dis < 0:
        raise ValueError("loss weights must be non-negative")
    return dg.as_tensor(surv) * lambda_surv + dg.as_tensor(dis) * lambda_dis
