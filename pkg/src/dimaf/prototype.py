"""Slide summarization with anchored diagonal Gaussian mixtures.

Global prototypes are k-means centroids of pooled training patches. Each
slide's patch bag is then fitted by EM initialized at those anchors, so that
component ``c`` means the same morphological prototype for every patient.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp
from sklearn.cluster import KMeans

from .config import ConfigError

LOG_2PI = np.log(2.0 * np.pi)


class EmNumericalError(FloatingPointError):
    pass


@dataclass(frozen=True)
class EmConfig:
    max_iter: int = 10
    tol: float = 1e-6
    var_floor: float = 1e-4
    empty_mass: float = 1e-8


@dataclass
class GlobalPrototypes:
    means: np.ndarray          # N_h x D_p
    variance: np.ndarray       # D_p, pooled per-dimension variance

    @property
    def n_components(self) -> int:
        return self.means.shape[0]


@dataclass
class GmmSummary:
    weights: np.ndarray        # N_h
    means: np.ndarray          # N_h x D_p
    variances: np.ndarray      # N_h x D_p
    log_likelihoods: list[float] = field(default_factory=list)

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]


def fit_global_prototypes(bags, n_components: int, seed: int,
                          max_patches: int = 20000) -> GlobalPrototypes:
    """k-means++ centroids over a pooled (sub)sample of training patches."""
    pooled = np.concatenate([np.asarray(b, dtype=np.float64) for b in bags], axis=0)
    if pooled.shape[0] < n_components:
        raise ConfigError(f"{pooled.shape[0]} patches cannot support {n_components} prototypes")
    rng = np.random.default_rng([seed, 3])
    if pooled.shape[0] > max_patches:
        pooled = pooled[np.sort(rng.choice(pooled.shape[0], max_patches, replace=False))]
    km = KMeans(n_clusters=n_components, init="k-means++", n_init=4,
                random_state=int(rng.integers(2**31 - 1)))
    km.fit(pooled)
    return GlobalPrototypes(km.cluster_centers_.astype(np.float64), pooled.var(axis=0))


def _log_joint(x: np.ndarray, weights: np.ndarray, means: np.ndarray,
               variances: np.ndarray) -> np.ndarray:
    """log pi_c + log N(x; mu_c, diag var_c) for every (patch, component)."""
    diff = x[:, None, :] - means[None, :, :]
    quad = (diff * diff / variances[None]).sum(axis=-1)
    log_det = np.log(variances).sum(axis=-1)
    with np.errstate(divide="ignore"):
        log_w = np.log(weights)
    return log_w[None, :] - 0.5 * (quad + log_det[None, :] + x.shape[1] * LOG_2PI)


def fit_gmm(bag: np.ndarray, anchors: GlobalPrototypes, cfg: EmConfig = EmConfig()) -> GmmSummary:
    """Diagonal-covariance EM started at the global anchors.

    The returned ``log_likelihoods`` holds the bag log-likelihood evaluated
    before each M-step, and a final entry at the returned parameters.
    """
    x = np.asarray(bag, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("cannot fit a mixture to an empty patch bag")
    k = anchors.n_components
    means = anchors.means.copy()
    variances = np.tile(np.maximum(anchors.variance, cfg.var_floor), (k, 1))
    weights = np.full(k, 1.0 / k)
    history: list[float] = []
    for it in range(cfg.max_iter):
        lj = _log_joint(x, weights, means, variances)
        ll_rows = logsumexp(lj, axis=1)
        ll = float(ll_rows.sum())
        if not np.isfinite(ll):
            raise EmNumericalError(f"non-finite log-likelihood at EM iteration {it}")
        if history and ll - history[-1] <= cfg.tol * abs(history[-1]):
            history.append(ll)
            break
        history.append(ll)
        resp = np.exp(lj - ll_rows[:, None])
        mass = resp.sum(axis=0)
        # components with negligible mass keep their previous mean and variance
        live = mass >= cfg.empty_mass
        new_means = means.copy()
        new_vars = variances.copy()
        new_means[live] = (resp[:, live].T @ x) / mass[live, None]
        sq = resp[:, live].T @ (x * x) / mass[live, None] - new_means[live] ** 2
        new_vars[live] = np.maximum(sq, cfg.var_floor)
        w = np.maximum(mass / x.shape[0], cfg.empty_mass)
        weights = w / w.sum()
        means, variances = new_means, new_vars
        if not (np.all(np.isfinite(means)) and np.all(np.isfinite(variances))):
            raise EmNumericalError(f"non-finite parameters after EM iteration {it}")
    else:
        history.append(float(logsumexp(_log_joint(x, weights, means, variances), axis=1).sum()))
    return GmmSummary(weights, means, variances, history)


def posterior(z: np.ndarray, g: GmmSummary) -> np.ndarray:
    """q(c | z) for one patch (D_p,) or a matrix of patches (n, D_p)."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    lj = _log_joint(np.atleast_2d(z), g.weights, g.means, g.variances)
    q = np.exp(lj - logsumexp(lj, axis=1, keepdims=True))
    return q[0] if single else q


@dataclass
class PrototypeAssignment:
    component: np.ndarray
    probability: np.ndarray


def prototype_assignments(bag: np.ndarray, g: GmmSummary) -> PrototypeAssignment:
    """Most probable component per patch; ties go to the lowest index."""
    q = posterior(bag, g)
    comp = np.argmax(q, axis=1)
    return PrototypeAssignment(comp, q[np.arange(q.shape[0]), comp])


def export_prototype_assignments(bag: np.ndarray, g: GmmSummary, path) -> PrototypeAssignment:
    """Write ``patch_index,component,probability`` rows (0-based) to ``path``."""
    a = prototype_assignments(bag, g)
    with open(Path(path), "w", encoding="utf-8", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["patch_index", "component", "probability"])
        for i, (c, p) in enumerate(zip(a.component, a.probability)):
            wr.writerow([i, int(c), repr(float(p))])
    return a


def summarize_bags(bags, anchors: GlobalPrototypes, cfg: EmConfig = EmConfig()) -> tuple[np.ndarray, np.ndarray]:
    """Fit every bag; returns stacked weights (n, N_h) and means (n, N_h, D_p)."""
    fits = [fit_gmm(b, anchors, cfg) for b in bags]
    return np.stack([f.weights for f in fits]), np.stack([f.means for f in fits])
