import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dimaf import diffgraph as dg
from dimaf.datagen import GeneratorConfig, generate_cohort, split_folds
from dimaf.model import DimafModel, ModelConfig, ModelInputs
from dimaf.train_eval import (
    AdamW,
    ReportSchemaError,
    TrainConfig,
    TrainingError,
    UndefinedMetricError,
    build_inputs,
    clinical_cox_baseline,
    concordance_index,
    cosine_lr,
    crossval,
    dc_report,
    fit_linear_cox,
    fit_model,
    fit_preprocessing,
    model_config_for,
    read_report,
    train,
    write_report,
)

TINY_GEN = GeneratorConfig(n_patients=60, n_genes=24, n_pathways=3, patches_min=8, patches_max=12)
TINY_TRAIN = TrainConfig(epochs=3, n_prototypes=3, d_emb=6, d_enc=2, d_z=5, batch_size=16, lr=1e-3)


def brute_cindex(r, t, e):
    num = den = 0.0
    for i in range(len(r)):
        for j in range(len(r)):
            if e[i] and t[i] < t[j]:
                den += 1
                num += 1.0 if r[i] > r[j] else 0.5 if r[i] == r[j] else 0.0
    return num / den


def random_survival(rng, n):
    t = np.round(rng.exponential(size=n), 1) + 0.1      # rounding creates tied times
    e = (rng.uniform(size=n) < 0.6).astype(int)
    e[0] = 1
    t[0] = t.min() - 0.05 if t.min() > 0.1 else t.min()
    r = np.round(rng.normal(size=n), 1)                  # and tied risks
    return r, t, e


# ---------------------------------------------------------------- c-index


def test_cindex_examples():
    t = np.arange(1.0, 6.0)
    assert concordance_index(-t, t, np.ones(5)) == 1.0
    assert concordance_index(np.zeros(5), t, np.ones(5)) == 0.5


@pytest.mark.parametrize("seed", range(50))
def test_cindex_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    r, t, e = random_survival(rng, int(rng.integers(2, 80)))
    assert concordance_index(r, t, e) == brute_cindex(r, t, e)


def test_cindex_complement_identity():
    rng = np.random.default_rng(0)
    t, e = rng.exponential(size=100), (rng.uniform(size=100) < 0.7).astype(int)
    r = rng.normal(size=100)
    assert concordance_index(r, t, e) + concordance_index(-r, t, e) == 1.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000))
def test_cindex_invariant_to_increasing_transforms(seed):
    rng = np.random.default_rng(seed)
    r, t, e = random_survival(rng, 40)
    base = concordance_index(r, t, e)
    assert concordance_index(2 * r + 1, t, e) == base
    assert concordance_index(np.tanh(r), t, e) == base


def test_cindex_undefined_and_shape_errors():
    with pytest.raises(UndefinedMetricError):
        concordance_index([1.0, 2.0], [1.0, 2.0], [0, 0])
    with pytest.raises(ValueError):
        concordance_index([1.0], [1.0, 2.0], [1, 1])


# ---------------------------------------------------------------- optimizer and schedule


def test_cosine_endpoints_and_monotone():
    total = 120
    lrs = [cosine_lr(s, total, 3e-4) for s in range(total)]
    assert lrs[0] == 3e-4 and lrs[-1] <= 1e-3 * 3e-4
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert cosine_lr(59.5, total, 1.0) == pytest.approx(0.5, abs=1e-12)


def plain_adam(x0, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Reference Adam written from the update rule, no weight decay."""
    x, m, v = x0.copy(), np.zeros_like(x0), np.zeros_like(x0)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return x


def test_adamw_without_decay_matches_adam_bitwise():
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=(3, 4))
    p = dg.Tensor(x0.copy(), requires_grad=True)
    opt = AdamW({"p": p}, lr=1e-2, weight_decay=0.0)
    grads = []
    for _ in range(10):
        opt.zero_grad()
        dg.sum(dg.selu(p) * p).backward()
        grads.append(p.grad.copy())
        opt.step()
    assert p.value.tobytes() == plain_adam(x0, grads, 1e-2).tobytes()


def test_adamw_decay_is_decoupled():
    p = dg.Tensor(np.array([2.0]), requires_grad=True)
    opt = AdamW({"p": p}, lr=0.1, weight_decay=0.5)
    p.grad = np.zeros(1)
    opt.step()
    # zero gradient: only the decoupled shrink acts
    assert p.value[0] == pytest.approx(2.0 * (1 - 0.1 * 0.5), abs=1e-15)


# ---------------------------------------------------------------- clinical baseline


def test_linear_cox_single_planted_covariate():
    rng = np.random.default_rng(1)
    n = 1000
    x = rng.normal(size=n)
    t = rng.exponential(size=n) / np.exp(1.2 * x)
    e = np.ones(n, dtype=int)
    coef, _, _ = fit_linear_cox(x[:, None], t, e)
    assert coef[0] > 0
    res = clinical_cox_baseline(x[:500], t[:500], e[:500], x[500:], t[500:], e[500:])
    assert abs(res.c_index - concordance_index(x[500:], t[500:], e[500:])) < 0.02


def test_linear_cox_coefficient_sign_negative_hazard():
    rng = np.random.default_rng(2)
    x = rng.normal(size=400)
    t = rng.exponential(size=400) / np.exp(-0.8 * x)
    coef, _, _ = fit_linear_cox(x[:, None], t, np.ones(400))
    assert coef[0] < 0


def test_linear_cox_matches_scipy_optimum():
    from scipy.optimize import minimize
    rng = np.random.default_rng(3)
    x = rng.normal(size=(200, 2))
    t = rng.exponential(size=200) / np.exp(x @ [0.7, -0.4])
    e = (rng.uniform(size=200) < 0.8).astype(int)

    def nll(b):
        r = x @ b
        return -sum(r[i] - np.log(np.exp(r[t >= t[i]]).sum()) for i in range(200) if e[i])

    ref = minimize(nll, np.zeros(2), method="BFGS", options={"gtol": 1e-10}).x
    coef, _, _ = fit_linear_cox(x, t, e)
    np.testing.assert_allclose(coef, ref, atol=1e-5)


def test_clinical_baseline_noise_covariate_is_chance():
    vals = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(1000, 1))
        t, e = rng.exponential(size=1000), (rng.uniform(size=1000) < 0.7).astype(int)
        vals.append(clinical_cox_baseline(x[:500], t[:500], e[:500], x[500:], t[500:], e[500:]).c_index)
    assert all(0.45 <= v <= 0.55 for v in vals)


def test_linear_cox_singular_design_gets_ridge():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(100, 1))
    x = np.hstack([x, x])                      # collinear columns
    t = rng.exponential(size=100) / np.exp(x[:, 0])
    coef, _, ridge = fit_linear_cox(x, t, np.ones(100))
    assert ridge == 1e-6 and np.all(np.isfinite(coef))


# ---------------------------------------------------------------- training


@pytest.fixture(scope="module")
def tiny_cohort():
    return generate_cohort(TINY_GEN, seed=0)


def _prepared(cohort, cfg):
    idx = np.arange(len(cohort))
    prep = fit_preprocessing(cohort, idx, cfg.n_prototypes, 0)
    return build_inputs(cohort, prep, cfg.em_config())


def test_fit_model_deterministic(tiny_cohort):
    inputs = _prepared(tiny_cohort, TINY_TRAIN)
    runs = []
    for _ in range(2):
        model = DimafModel(model_config_for(tiny_cohort, TINY_TRAIN), seed=1)
        hist = fit_model(TINY_TRAIN, model, inputs, tiny_cohort.times, tiny_cohort.events, 1)
        runs.append((hist, model.predict(inputs)[0].tobytes()))
    assert runs[0] == runs[1]
    assert [h["epoch"] for h in runs[0][0]] == [0, 1, 2]
    assert runs[0][0][-1]["lr"] <= 1e-3 * TINY_TRAIN.lr


def test_ablation_skips_dis_gradient(tiny_cohort):
    cfg = dataclasses.replace(TINY_TRAIN, lambda_dis=0.0, epochs=1)
    assert cfg.variant == "DIMAF_no_dis" and TINY_TRAIN.variant == "DIMAF"
    inputs = _prepared(tiny_cohort, cfg)
    model = DimafModel(model_config_for(tiny_cohort, cfg), seed=0)
    hist = fit_model(cfg, model, inputs, tiny_cohort.times, tiny_cohort.events, 0)
    assert hist[0]["loss"] == pytest.approx(hist[0]["surv"], abs=1e-15)
    assert hist[0]["dis"] > 0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_fit_model_errors(tiny_cohort):
    inputs = _prepared(tiny_cohort, TINY_TRAIN)
    model = DimafModel(model_config_for(tiny_cohort, TINY_TRAIN), seed=0)
    with pytest.raises(TrainingError, match="uncensored"):
        fit_model(TINY_TRAIN, model, inputs, tiny_cohort.times, np.zeros(len(tiny_cohort)), 0)
    model.params["head.b"].value = np.array([np.inf])
    with dg.checked(False), pytest.raises(TrainingError, match="epoch 0, step 0"):
        fit_model(TINY_TRAIN, model, inputs, tiny_cohort.times, tiny_cohort.events, 0)


def test_train_config_validation():
    for bad in (dict(epochs=0), dict(lr=0.0), dict(lambda_dis=-1.0), dict(cox_reduction="max")):
        with pytest.raises(ValueError):
            dataclasses.replace(TrainConfig(), **bad).validate()


def test_training_reduces_survival_loss():
    cohort = generate_cohort(GeneratorConfig(n_patients=500), seed=0)
    cfg = TrainConfig(n_prototypes=4, lr=3e-4)
    train_idx, _ = split_folds(cohort, 2, 0)[0]
    inputs = _prepared(cohort.subset(train_idx), cfg)
    model = DimafModel(model_config_for(cohort, cfg), seed=0)
    hist = fit_model(cfg, model, inputs, cohort.times[train_idx], cohort.events[train_idx], 0)
    assert len(hist) == 30 and hist[-1]["surv"] < hist[0]["surv"]


# ---------------------------------------------------------------- evaluation and cross-validation


def test_dc_report_identical_branches_give_unit_d1():
    cfg = ModelConfig(pathway_sizes=(3, 3), n_prototypes=2, patch_dim=2, d_emb=4, d_enc=2, d_z=3)
    model = DimafModel(cfg, seed=0)
    for m in ("wq", "wk", "wv"):
        model.params[f"attn.hh.{m}"] = model.params[f"attn.gg.{m}"]
    # identical inputs: pathway encoder output equals slide encoder output row for row
    rng = np.random.default_rng(0)
    z = rng.normal(size=(10, 2, cfg.d_gh))
    from dimaf.model import fuse
    rep = fuse(dg.Tensor(z), dg.Tensor(z), model.params, cfg)
    from dimaf.train_eval import dc_from_pooled
    dc = dc_from_pooled(rep.pooled_numpy())
    assert dc["d1"] == pytest.approx(1.0, abs=1e-12)
    inputs = ModelInputs([rng.normal(size=(10, 3)), rng.normal(size=(10, 3))],
                         rng.dirichlet([1, 1], size=10), rng.normal(size=(10, 2, 2)))
    out = dc_report(model, inputs)
    assert 0 <= out["d1"] <= 1 and 0 <= out["d2"] <= 1
    assert out["total"] == out["d1"] + out["d2"]


def test_train_writes_checkpoint(tiny_cohort, tmp_path):
    fold = split_folds(tiny_cohort, 2, 0)[0]
    res = train(TINY_TRAIN, tiny_cohort, fold, 0, tmp_path)
    assert 0 <= res.c_index <= 1 and 0 <= res.d1 <= 1 and 0 <= res.d2 <= 1
    assert (tmp_path / res.checkpoint).exists() and len(res.history) == 3
    assert res.shares["specific"] + res.shares["shared"] == pytest.approx(1.0, abs=1e-12)


def test_crossval_five_folds_and_report_round_trip(tmp_path):
    cohort = generate_cohort(dataclasses.replace(TINY_GEN, n_patients=100), seed=1)
    cfg = dataclasses.replace(TINY_TRAIN, epochs=1)
    report = crossval(cfg, cohort, 5, out_dir=tmp_path)
    assert len(report["folds"]) == 5
    assert sum(f["n_test"] for f in report["folds"]) == 100
    for key, s in report["summary"].items():
        if s["mean"] is not None:
            assert abs(s["mean"] - math.fsum(s["values"]) / 5) < 1e-12
    back = read_report(tmp_path / "crossval_report.json")
    assert back == report
    header, *rows = (tmp_path / "crossval_report.csv").read_text().splitlines()
    assert header == "variant,metric,fold_0,fold_1,fold_2,fold_3,fold_4,mean,std"
    assert rows[1].startswith("Clinical,c_index,")


def test_crossval_parallel_equals_serial(tiny_cohort):
    serial = crossval(TINY_TRAIN, tiny_cohort, 2, threads=1)
    parallel = crossval(TINY_TRAIN, tiny_cohort, 2, threads=2)
    assert serial == parallel


def test_report_version_mismatch(tmp_path, tiny_cohort):
    report = crossval(dataclasses.replace(TINY_TRAIN, epochs=1), tiny_cohort, 2)
    report["version"] = 99
    path, _ = write_report(report, tmp_path)
    with pytest.raises(ReportSchemaError, match="migration"):
        read_report(path)


def test_crossval_failure_names_fold_and_keeps_partial(tmp_path, tiny_cohort):
    bad = tiny_cohort.subset(np.arange(len(tiny_cohort)))
    bad.events = np.zeros_like(bad.events)
    bad.events[0] = 1                      # the fold testing on patient 0 trains without events
    folds = split_folds(bad, 2, 0)
    failing = next(i for i, (tr, _) in enumerate(folds) if not bad.events[tr].any())
    with pytest.raises(TrainingError, match=f"fold {failing}"):
        crossval(TINY_TRAIN, bad, 2, out_dir=tmp_path)
    assert (tmp_path / "crossval_partial.json").exists() == (failing == 1)
