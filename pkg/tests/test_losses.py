import itertools
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import ortho_group

from dimaf import diffgraph as dg
from dimaf.diffgraph import Tensor
from dimaf.losses import (
    CensoredBatchWarning,
    cox_loss,
    disentanglement_loss,
    disentanglement_terms,
    distance_correlation,
    distance_covariance,
    total_loss,
)


# ---------------------------------------------------------------- oracles


def dcov_sq_four_term(x, y):
    """Textbook V-statistic: S1 + S2 - 2 S3 from raw distance matrices, double loops."""
    x = np.atleast_2d(np.asarray(x, dtype=float).T).T
    y = np.atleast_2d(np.asarray(y, dtype=float).T).T
    n = x.shape[0]
    a = [[math.dist(x[j], x[k]) for k in range(n)] for j in range(n)]
    b = [[math.dist(y[j], y[k]) for k in range(n)] for j in range(n)]
    s1 = sum(a[j][k] * b[j][k] for j in range(n) for k in range(n)) / n**2
    s2 = (sum(map(sum, a)) / n**2) * (sum(map(sum, b)) / n**2)
    s3 = sum(sum(a[j]) * sum(b[j]) for j in range(n)) / n**3
    return s1 + s2 - 2 * s3


def cox_naive(r, t, e):
    total = 0.0
    for i in range(len(r)):
        if e[i]:
            risk_set = [math.exp(r[j]) for j in range(len(r)) if t[j] >= t[i]]
            total -= r[i] - math.log(math.fsum(risk_set))
    return total


# ---------------------------------------------------------------- distance covariance


def test_dcov_constant_rows_is_zero():
    x = np.ones((6, 3))
    y = np.random.default_rng(0).normal(size=(6, 2))
    assert distance_covariance(x, y).item() == 0.0


def test_dcov_two_points_closed_form():
    # centered 2x2 distance matrix is d/2 * [[-1, 1], [1, -1]], so dCov = sqrt(d_x d_y) / 2
    rng = np.random.default_rng(1)
    x, y = rng.normal(size=(2, 3)), rng.normal(size=(2, 4))
    dx, dy = np.linalg.norm(x[0] - x[1]), np.linalg.norm(y[0] - y[1])
    assert distance_covariance(x, y).item() == pytest.approx(math.sqrt(dx * dy) / 2, rel=1e-12)
    assert distance_correlation(x, y).item() == pytest.approx(1.0, abs=1e-12)


def test_dcov_matches_four_term_oracle_b32():
    rng = np.random.default_rng(2)
    x, y = rng.normal(size=(32, 3)), rng.normal(size=(32, 5)) + rng.normal(size=(32, 1))
    expected = math.sqrt(max(dcov_sq_four_term(x, y), 0.0))
    assert distance_covariance(x, y).item() == pytest.approx(expected, abs=1e-10)


def test_dcov_requires_two_samples():
    with pytest.raises(ValueError):
        distance_covariance(np.ones((1, 2)), np.ones((1, 2)))


# ---------------------------------------------------------------- distance correlation


def test_dc_self_and_sign_flip_are_one():
    x = np.random.default_rng(3).normal(size=(40, 4))
    assert distance_correlation(x, x).item() == pytest.approx(1.0, abs=1e-12)
    assert distance_correlation(x, -x).item() == pytest.approx(1.0, abs=1e-12)


def test_dc_degenerate_input_is_zero():
    x = np.random.default_rng(4).normal(size=(10, 3))
    assert distance_correlation(np.zeros((10, 2)), x).item() == 0.0


def _independent_dc(n, d, seeds):
    out = []
    for seed in seeds:
        rng = np.random.default_rng([seed, n, d])
        out.append(distance_correlation(rng.normal(size=(n, d)), rng.normal(size=(n, d))).item())
    return np.array(out)


def test_dc_independent_scalar_samples_small():
    assert np.percentile(_independent_dc(1000, 1, range(20)), 95) < 0.1


def test_dc_independent_bias_shrinks_with_sample_size():
    # the plug-in estimator is biased upward by O(n^-1/2) under independence
    small = _independent_dc(250, 8, range(10)).mean()
    large = _independent_dc(1000, 8, range(10)).mean()
    assert 0 < large < small
    assert large / small == pytest.approx(0.5, abs=0.1)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(3, 20), st.integers(1, 4), st.integers(1, 4))
def test_dc_range_and_symmetry(seed, b, d1, d2):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(b, d1)), rng.normal(size=(b, d2))
    y[:, 0] += x[:, 0] ** 2
    dxy = distance_correlation(x, y).item()
    assert -1e-9 <= dxy <= 1 + 1e-9
    assert dxy == pytest.approx(distance_correlation(y, x).item(), abs=1e-12)


def test_dc_invariances():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(50, 4))
    y = np.tanh(x @ rng.normal(size=(4, 3))) + 0.3 * rng.normal(size=(50, 3))
    base = distance_correlation(x, y).item()
    q = ortho_group.rvs(3, random_state=7)
    assert abs(distance_correlation(x, y @ q).item() - base) < 1e-9
    assert abs(distance_correlation(x + 5.0, y - 2.0).item() - base) < 1e-9
    assert abs(distance_correlation(3.5 * x, 0.2 * y).item() - base) < 1e-9


def test_dc_squared_switch():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(20, 2))
    y = x + rng.normal(size=(20, 2))
    plain = distance_correlation(x, y).item()
    assert distance_correlation(x, y, squared=True).item() == pytest.approx(plain**2, rel=1e-12)


# ---------------------------------------------------------------- disentanglement loss


def test_dis_loss_identical_specific_blocks():
    rng = np.random.default_rng(9)
    z = rng.normal(size=(16, 4))
    terms = disentanglement_terms(z, z, rng.normal(size=(16, 4)), rng.normal(size=(16, 4)))
    assert terms.d1.item() == pytest.approx(1.0, abs=1e-12)


def test_dis_loss_independent_blocks_small():
    rng = np.random.default_rng(10)
    blocks = [rng.normal(size=(512, 1)) for _ in range(4)]
    terms = disentanglement_terms(*blocks)
    assert terms.d1.item() < 0.15 and terms.d2.item() < 0.15


def test_dis_loss_d2_uses_column_concatenation():
    rng = np.random.default_rng(11)
    gg, hh, hg, gh = (rng.normal(size=(12, 3)) for _ in range(4))
    expected = (distance_correlation(gg, hh).item()
                + distance_correlation(np.hstack([gg, hh]), np.hstack([hg, gh])).item())
    assert disentanglement_loss(gg, hh, hg, gh).item() == pytest.approx(expected, abs=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_dis_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    blocks = [Tensor(rng.normal(size=(8, 4)), requires_grad=True) for _ in range(4)]
    blocks[2].value += blocks[0].value
    assert dg.grad_check(lambda: disentanglement_loss(*blocks), blocks) < 1e-4


# ---------------------------------------------------------------- Cox loss


def test_cox_single_patient_is_zero():
    assert cox_loss(Tensor([0.7]), [2.0], [1]).item() == pytest.approx(0.0, abs=1e-12)


def test_cox_equal_risk_pair_is_log2():
    assert cox_loss(Tensor([0.3, 0.3]), [1.0, 2.0], [1, 0]).item() == pytest.approx(math.log(2), abs=1e-12)


def test_cox_breslow_ties_share_risk_set():
    r = np.array([0.1, -0.4, 0.9])
    t = np.array([1.0, 1.0, 3.0])
    e = np.array([1, 1, 0])
    lse = math.log(sum(math.exp(v) for v in r))
    assert cox_loss(Tensor(r), t, e).item() == pytest.approx(-(r[0] - lse) - (r[1] - lse), abs=1e-12)


def test_cox_matches_naive_five_patients():
    r = np.array([0.2, -1.0, 0.5, 1.3, -0.1])
    t = np.array([5.0, 1.0, 3.0, 2.0, 4.0])
    e = np.array([1, 0, 1, 1, 0])
    assert cox_loss(Tensor(r), t, e).item() == pytest.approx(cox_naive(r, t, e), abs=1e-12)


def test_cox_mean_reduction():
    r, t, e = np.array([0.2, -1.0, 0.5]), np.array([1.0, 2.0, 3.0]), np.array([1, 1, 0])
    assert cox_loss(r, t, e, reduction="mean").item() == pytest.approx(cox_naive(r, t, e) / 3, abs=1e-14)


def test_cox_all_censored_warns_and_is_zero():
    with pytest.warns(CensoredBatchWarning):
        assert cox_loss(Tensor([0.1, 0.2]), [1.0, 2.0], [0, 0]).item() == 0.0


def test_cox_shift_invariance_and_monotonicity():
    rng = np.random.default_rng(12)
    r, t = rng.normal(size=20), rng.exponential(size=20) + 0.01
    e = (rng.uniform(size=20) < 0.7).astype(int)
    e[np.argmin(t)] = 1
    base = cox_loss(r, t, e).item()
    assert abs(cox_loss(r + 3.7, t, e).item() - base) < 1e-10
    i = int(np.argmin(t))
    bumped = r.copy()
    bumped[i] += 0.5
    assert cox_loss(bumped, t, e).item() < base


@pytest.mark.parametrize("seed", range(3))
def test_cox_gradient(seed):
    rng = np.random.default_rng(seed)
    r = Tensor(rng.normal(size=5), requires_grad=True)
    t = rng.exponential(size=5) + 0.1
    e = np.array([1, 0, 1, 1, 0])
    assert dg.grad_check(lambda: cox_loss(r, t, e), [r]) < 1e-6


def test_cox_validates_inputs():
    with pytest.raises(ValueError):
        cox_loss(np.zeros(2), [1.0, -1.0], [1, 1])
    with pytest.raises(ValueError):
        cox_loss(np.zeros(2), [1.0], [1])


# ---------------------------------------------------------------- total loss


def test_total_loss_values():
    assert total_loss(0.5, 0.1, 1.0, 7.0).item() == pytest.approx(1.2, abs=1e-15)
    assert total_loss(0.5, 0.1, 1.0, 0.0).item() == 0.5
    with pytest.raises(ValueError):
        total_loss(0.5, 0.1, -1.0, 7.0)


def test_total_loss_gradient_is_weighted_sum():
    rng = np.random.default_rng(13)
    z = [Tensor(rng.normal(size=(6, 3)), requires_grad=True) for _ in range(4)]
    r = Tensor(rng.normal(size=6), requires_grad=True)
    t, e = rng.exponential(size=6) + 0.1, np.array([1, 1, 0, 1, 0, 1])

    def grads(fn):
        for p in (*z, r):
            p.zero_grad()
        fn().backward()
        return [np.zeros_like(p.value) if p.grad is None else p.grad.copy() for p in (*z, r)]

    g_surv = grads(lambda: cox_loss(r, t, e))
    g_dis = grads(lambda: disentanglement_loss(*z))
    g_tot = grads(lambda: total_loss(cox_loss(r, t, e), disentanglement_loss(*z), 2.0, 7.0))
    for a, b, c in zip(g_tot, g_surv, g_dis):
        np.testing.assert_allclose(a, 2.0 * b + 7.0 * c, rtol=1e-12, atol=1e-12)
