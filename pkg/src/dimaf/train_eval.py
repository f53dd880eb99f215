"""Training, evaluation metrics, clinical baseline and k-fold cross-validation."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import diffgraph as dg
from .datagen import Cohort, split_folds, tokenize_pathways
from .explain import ShareReport, normalized_report
from .losses import CensoredBatchWarning, cox_loss, disentanglement_terms, total_loss
from .model import BLOCKS, DimafModel, ModelConfig, ModelInputs, save_checkpoint
from .prototype import EmConfig, GlobalPrototypes, fit_global_prototypes, summarize_bags

log = logging.getLogger(__name__)

REPORT_SCHEMA = "dimaf.crossval_report"
REPORT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class UndefinedMetricError(ValueError):
    pass


class ReportSchemaError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-4
    weight_decay: float = 1e-5
    batch_size: int = 64
    lambda_surv: float = 1.0
    lambda_dis: float = 7.0
    n_prototypes: int = 16
    seed: int = 0
    folds: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    cox_reduction: str = "mean"
    dc_squared: bool = False
    d_emb: int = 24
    d_enc: int = 8
    d_z: int = 32
    em_max_iter: int = 10
    em_tol: float = 1e-6
    var_floor: float = 1e-4

    def validate(self) -> None:
        if self.epochs < 1 or self.lr <= 0 or self.batch_size < 1:
            raise ValueError("epochs, lr and batch_size must be positive")
        if self.lambda_surv < 0 or self.lambda_dis < 0 or self.weight_decay < 0:
            raise ValueError("loss weights and weight decay must be non-negative")
        if self.cox_reduction not in ("sum", "mean"):
            raise ValueError("cox_reduction must be 'sum' or 'mean'")

    @property
    def variant(self) -> str:
        return "DIMAF" if self.lambda_dis > 0 else "DIMAF_no_dis"

    def em_config(self) -> EmConfig:
        return EmConfig(max_iter=self.em_max_iter, tol=self.em_tol, var_floor=self.var_floor)


# ---------------------------------------------------------------- optimization


def cosine_lr(step: int, total_steps: int, lr_max: float) -> float:
    """Cosine decay from ``lr_max`` at step 0 to 0 at the last step."""
    if total_steps <= 1:
        return lr_max
    return 0.5 * lr_max * (1.0 + math.cos(math.pi * min(step, total_steps - 1) / (total_steps - 1)))


class AdamW:
    """Adam with decoupled weight decay, updating Tensor values in place."""

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-5):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.value) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in self.params.items()}

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.value)
            if self.weight_decay:
                p.value = p.value - lr * self.weight_decay * p.value
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            p.value = p.value - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


# ---------------------------------------------------------------- metrics


def concordance_index(risks, times, events) -> float:
    """Harrell's c: pairs with t_i < t_j and event_i = 1; higher risk should fail first."""
    r = np.asarray(risks, dtype=np.float64)
    t = np.asarray(times, dtype=np.float64)
    e = np.asarray(events).astype(bool)
    if not (r.shape == t.shape == e.shape) or r.ndim != 1:
        raise ValueError("risks, times and events must be equal-length vectors")
    perm = (t[:, None] < t[None, :]) & e[:, None]
    n_perm = int(perm.sum())
    if n_perm == 0:
        raise UndefinedMetricError("no permissible pairs; c-index undefined")
    conc = int(((r[:, None] > r[None, :]) & perm).sum())
    ties = int(((r[:, None] == r[None, :]) & perm).sum())
    return (2 * conc + ties) / (2 * n_perm)


def dc_report(model: DimafModel, inputs: ModelInputs, squared: bool = False) -> dict[str, float]:
    """D1, D2 and their sum over the stacked pooled representations of ``inputs``."""
    if len(inputs) < 2:
        raise ValueError("dc_report needs at least 2 patients")
    _, pooled = model.predict(inputs)
    return dc_from_pooled(pooled, squared)


def dc_from_pooled(pooled: dict[str, np.ndarray], squared: bool = False) -> dict[str, float]:
    with dg.no_grad():
        terms = disentanglement_terms(*(pooled[b] for b in BLOCKS), squared=squared)
    d1, d2 = terms.d1.item(), terms.d2.item()
    return {"d1": d1, "d2": d2, "total": d1 + d2}


# ---------------------------------------------------------------- clinical baseline


@dataclass
class CoxBaselineResult:
    coef: np.ndarray            # per standardized covariate
    c_index: float
    n_iter: int
    ridge: float


def _cox_hessian(x: np.ndarray, r: np.ndarray, mask: np.ndarray, events: np.ndarray) -> np.ndarray:
    w = np.where(mask, np.exp(r - r.max())[None, :], 0.0)
    p = w / w.sum(axis=1, keepdims=True)
    xbar = p @ x
    diag = (events[:, None] * p).sum(axis=0)
    return x.T @ (diag[:, None] * x) - xbar.T @ (events[:, None] * xbar)


def fit_linear_cox(x: np.ndarray, times, events, max_iter: int = 50, tol: float = 1e-10) -> tuple[np.ndarray, int, float]:
    """Newton iterations on the Breslow partial likelihood; returns (coef, iterations, ridge)."""
    from .losses import risk_set_mask

    x = np.asarray(x, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=np.float64)
    if not events.any():
        raise ValueError("linear Cox fit needs at least one event")
    mask = risk_set_mask(times)
    beta = dg.Tensor(np.zeros(x.shape[1]), requires_grad=True)

    def loss_and_grad(b):
        beta.value = b
        beta.zero_grad()
        loss = cox_loss(dg.reshape(dg.matmul(dg.Tensor(x), dg.reshape(beta, (-1, 1))), (x.shape[0],)),
                        times, events)
        loss.backward()
        return loss.item(), beta.grad.copy()

    b = np.zeros(x.shape[1])
    loss, grad = loss_and_grad(b)
    ridge = 0.0
    it = 0
    for it in range(1, max_iter + 1):
        hess = _cox_hessian(x, x @ b, mask, events)
        try:
            step = np.linalg.solve(hess + ridge * np.eye(len(b)), grad)
            if not np.all(np.isfinite(step)):
                raise np.linalg.LinAlgError("non-finite step")
        except np.linalg.LinAlgError:
            if ridge:
                raise
            ridge = 1e-6
            step = np.linalg.solve(hess + ridge * np.eye(len(b)), grad)
        scale = 1.0
        while True:
            cand = b - scale * step
            new_loss, new_grad = loss_and_grad(cand)
            if new_loss <= loss + 1e-12 or scale < 1e-8:
                break
            scale *= 0.5
        done = abs(loss - new_loss) < tol * max(1.0, abs(loss))
        b, loss, grad = cand, new_loss, new_grad
        if done:
            break
    return b, it, ridge


def clinical_cox_baseline(train_x, train_times, train_events, test_x, test_times,
                          test_events) -> CoxBaselineResult:
    """Multivariate linear Cox on standardized covariates, scored by test c-index."""
    train_x = np.atleast_2d(np.asarray(train_x, dtype=np.float64).T).T
    test_x = np.atleast_2d(np.asarray(test_x, dtype=np.float64).T).T
    mu = train_x.mean(axis=0)
    sd = train_x.std(axis=0)
    sd[sd < 1e-12] = 1.0
    coef, n_iter, ridge = fit_linear_cox((train_x - mu) / sd, train_times, train_events)
    risk = ((test_x - mu) / sd) @ coef
    return CoxBaselineResult(coef, concordance_index(risk, test_times, test_events), n_iter, ridge)


# ---------------------------------------------------------------- preprocessing


@dataclass
class FoldPreprocessing:
    gene_mean: np.ndarray
    gene_std: np.ndarray
    anchors: GlobalPrototypes

    def extras(self) -> dict[str, np.ndarray]:
        return {"gene_mean": self.gene_mean, "gene_std": self.gene_std,
                "anchor_means": self.anchors.means, "anchor_variance": self.anchors.variance}

    @classmethod
    def from_extras(cls, extras: dict[str, np.ndarray]) -> "FoldPreprocessing":
        return cls(extras["gene_mean"], extras["gene_std"],
                   GlobalPrototypes(extras["anchor_means"], extras["anchor_variance"]))


def fit_preprocessing(cohort: Cohort, train_idx, n_prototypes: int, seed: int) -> FoldPreprocessing:
    expr = cohort.expression[train_idx]
    sd = expr.std(axis=0)
    sd[sd < 1e-8] = 1.0
    anchors = fit_global_prototypes([cohort.bags[i] for i in train_idx], n_prototypes, seed)
    return FoldPreprocessing(expr.mean(axis=0), sd, anchors)


def build_inputs(cohort: Cohort, prep: FoldPreprocessing, em: EmConfig = EmConfig()) -> ModelInputs:
    expr = (cohort.expression - prep.gene_mean) / prep.gene_std
    weights, means = summarize_bags(cohort.bags, prep.anchors, em)
    return ModelInputs(tokenize_pathways(expr, cohort.pathways), weights, means)


def model_config_for(cohort: Cohort, cfg: TrainConfig) -> ModelConfig:
    return ModelConfig(pathway_sizes=cohort.pathways.sizes, n_prototypes=cfg.n_prototypes,
                       patch_dim=cohort.patch_dim, d_emb=cfg.d_emb, d_enc=cfg.d_enc, d_z=cfg.d_z)


def cohort_signature(cohort: Cohort) -> str:
    doc = {"genes": cohort.gene_names, "pathways": cohort.pathways.names,
           "members": [g.tolist() for g in cohort.pathways.genes], "patch_dim": cohort.patch_dim}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------- training


@dataclass
class FoldResult:
    fold: int
    c_index: float
    d1: float
    d2: float
    dc_total: float
    clinical_c_index: float | None
    shares: dict
    history: list[dict] = field(default_factory=list)
    checkpoint: str | None = None
    n_train: int = 0
    n_test: int = 0

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def _fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


def fit_model(cfg: TrainConfig, model: DimafModel, inputs: ModelInputs, times, events,
              seed: int) -> list[dict]:
    """Minibatch AdamW with cosine decay; returns the per-epoch loss history."""
    cfg.validate()
    n = len(inputs)
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events)
    if not events.any():
        raise TrainingError("training set has no uncensored patient")
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    opt = AdamW(model.params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps,
                weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([seed, 5])
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        sums = dict.fromkeys(("loss", "surv", "dis", "d1", "d2"), 0.0)
        n_batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            opt.zero_grad()
            out = model.forward(inputs.take(idx))
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", CensoredBatchWarning)
                surv = cox_loss(out.risk, times[idx], events[idx], reduction=cfg.cox_reduction)
            if len(idx) >= 2:
                pooled = [out.repr.pooled[b] for b in BLOCKS]
                if cfg.lambda_dis > 0:
                    terms = disentanglement_terms(*pooled, squared=cfg.dc_squared)
                else:
                    with dg.no_grad():
                        terms = disentanglement_terms(*pooled, squared=cfg.dc_squared)
                dis = terms.total
                d1, d2 = terms.d1.item(), terms.d2.item()
            else:
                dis, d1, d2 = dg.Tensor(0.0), 0.0, 0.0
            loss = total_loss(surv, dis, cfg.lambda_surv, cfg.lambda_dis) if cfg.lambda_dis > 0 \
                else surv * cfg.lambda_surv
            if not np.isfinite(loss.item()):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}")
            loss.backward()
            lr = cosine_lr(step, total_steps, cfg.lr)
            opt.step(lr)
            step += 1
            n_batches += 1
            for key, val in (("loss", loss.item()), ("surv", surv.item()), ("dis", dis.item()),
                             ("d1", d1), ("d2", d2)):
                sums[key] += val
        history.append({"epoch": epoch, "lr": lr, **{k: v / n_batches for k, v in sums.items()}})
    return history


def train(cfg: TrainConfig, cohort: Cohort, fold: tuple[np.ndarray, np.ndarray], fold_index: int = 0,
          out_dir=None) -> FoldResult:
    """Preprocess, train and evaluate one fold."""
    train_idx, test_idx = (np.asarray(a, dtype=np.int64) for a in fold)
    fseed = _fold_seed(cfg.seed, fold_index)
    prep = fit_preprocessing(cohort, train_idx, cfg.n_prototypes, fseed)
    inputs = build_inputs(cohort, prep, cfg.em_config())
    model = DimafModel(model_config_for(cohort, cfg), seed=fseed)
    tr_in, te_in = inputs.take(train_idx), inputs.take(test_idx)
    try:
        history = fit_model(cfg, model, tr_in, cohort.times[train_idx], cohort.events[train_idx], fseed)
    except TrainingError as exc:
        raise TrainingError(f"fold {fold_index}: {exc}") from exc

    risk, pooled = model.predict(te_in)
    c_index = concordance_index(risk, cohort.times[test_idx], cohort.events[test_idx])
    dc = dc_from_pooled(pooled, squared=cfg.dc_squared)
    _, train_pooled = model.predict(tr_in)
    baseline = {b: train_pooled[b].mean(axis=0) for b in BLOCKS}
    shares: ShareReport = normalized_report(model, te_in, baseline)

    try:
        clin = clinical_cox_baseline(cohort.clinical[train_idx], cohort.times[train_idx],
                                     cohort.events[train_idx], cohort.clinical[test_idx],
                                     cohort.times[test_idx], cohort.events[test_idx]).c_index
    except (ValueError, np.linalg.LinAlgError, UndefinedMetricError) as exc:
        log.warning("fold %d: clinical baseline failed: %s", fold_index, exc)
        clin = None

    ckpt = None
    if out_dir is not None:
        ck_dir = Path(out_dir) / "checkpoints"
        ck_dir.mkdir(parents=True, exist_ok=True)
        extras = {**prep.extras(), "train_index": train_idx, "test_index": test_idx,
                  **{f"baseline_{b}": baseline[b] for b in BLOCKS}}
        meta = {"fold": fold_index, "train_config": dataclasses.asdict(cfg),
                "cohort_signature": cohort_signature(cohort), "variant": cfg.variant}
        save_checkpoint(ck_dir / f"fold_{fold_index}.npz", model, extras, meta)
        ckpt = f"checkpoints/fold_{fold_index}.npz"
    return FoldResult(fold_index, c_index, dc["d1"], dc["d2"], dc["total"], clin, shares.as_dict(),
                      history, ckpt, len(train_idx), len(test_idx))


# ---------------------------------------------------------------- cross-validation


def _run_fold(args):
    cfg, cohort, fold, i, out_dir = args
    with threadpool_limits(1):
        return train(cfg, cohort, fold, i, out_dir)


def crossval(cfg: TrainConfig, cohort: Cohort, k: int | None = None, out_dir=None,
             threads: int = 1) -> dict:
    """k-fold CV; returns the report document (also written when ``out_dir`` is given)."""
    k = cfg.folds if k is None else k
    folds = split_folds(cohort, k, cfg.seed)
    jobs = [(cfg, cohort, f, i, out_dir) for i, f in enumerate(folds)]
    results: list[FoldResult] = []
    failure: tuple[int, Exception] | None = None
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(_run_fold, j) for j in jobs]
            for i, fut in enumerate(futures):
                try:
                    results.append(fut.result())
                except Exception as exc:
                    failure = failure or (i, exc)
    else:
        for i, job in enumerate(jobs):
            try:
                results.append(_run_fold(job))
            except Exception as exc:
                failure = (i, exc)
                break
    if failure is not None:
        i, exc = failure
        if out_dir is not None and results:
            partial = build_report(cfg, results)
            partial["metadata"]["partial"] = f"fold {i} failed: {exc}"
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            (Path(out_dir) / "crossval_partial.json").write_text(
                json.dumps(partial, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        raise TrainingError(f"fold {i} failed: {exc}") from exc
    report = build_report(cfg, results)
    if out_dir is not None:
        write_report(report, out_dir)
    return report


SUMMARY_METRICS = ("c_index", "clinical_c_index", "d1", "d2", "dc_total",
                   "share_specific", "share_shared", "share_gg", "share_hh", "share_hg", "share_gh")


def _fold_metric(f: dict, name: str):
    if name.startswith("share_"):
        key = name[len("share_"):]
        return f["shares"][key] if key in ("specific", "shared") else f["shares"]["blocks"][key]
    return f[name]


def build_report(cfg: TrainConfig, results: list[FoldResult]) -> dict:
    folds = [r.as_dict() for r in results]
    summary = {}
    for m in SUMMARY_METRICS:
        vals = [_fold_metric(f, m) for f in folds]
        if any(v is None for v in vals):
            summary[m] = {"values": vals, "mean": None, "std": None}
            continue
        arr = np.array(vals, dtype=np.float64)
        summary[m] = {"values": [float(v) for v in arr], "mean": float(arr.mean()),
                      "std": float(arr.std())}
    return {"schema": REPORT_SCHEMA, "version": REPORT_VERSION, "variant": cfg.variant,
            "config": dataclasses.asdict(cfg),
            "metadata": {"dc_evaluation": "full test set per fold",
                         "std": "population (ddof=0) over folds",
                         "cox_reduction": cfg.cox_reduction,
                         "shap_baseline": "training-fold mean pooled representation",
                         "shap_normalization": "per-patient |phi| shares averaged over test patients"},
            "folds": folds, "summary": summary}


CSV_ROWS = (("c_index", "c_index", None), ("c_index", "clinical_c_index", "Clinical"),
            ("dc_d1", "d1", None), ("dc_d2", "d2", None), ("dc_total", "dc_total", None),
            ("share_specific", "share_specific", None), ("share_shared", "share_shared", None),
            ("share_hh", "share_hh", None), ("share_gg", "share_gg", None),
            ("share_gh", "share_gh", None), ("share_hg", "share_hg", None))


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def write_report(report: dict, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jpath = out / "crossval_report.json"
    jpath.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    k = len(report["folds"])
    lines = [",".join(["variant", "metric"] + [f"fold_{i}" for i in range(k)] + ["mean", "std"])]
    for label, key, variant in CSV_ROWS:
        s = report["summary"][key]
        lines.append(",".join([variant or report["variant"], label, *map(_fmt, s["values"]),
                               _fmt(s["mean"]), _fmt(s["std"])]))
    cpath = out / "crossval_report.csv"
    cpath.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return jpath, cpath


def read_report(path) -> dict:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("schema") != REPORT_SCHEMA:
        raise ReportSchemaError(f"{path}: not a crossval report")
    if doc.get("version") != REPORT_VERSION:
        raise ReportSchemaError(f"{path}: crossval report version {doc.get('version')} needs migration "
                                f"to version {REPORT_VERSION}")
    return doc
