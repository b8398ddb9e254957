import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from evicvr import diffcore as dc
from evicvr import losses as L
from evicvr.data import Dataset, FieldSchema, SyntheticConfig, generate_synthetic
from evicvr.metrics import (
    MetricError,
    auc,
    cvr_evaluation_scope,
    evaluate,
    mean_bias,
    nll,
    signed_bias,
    teacher_nonclick_logloss,
    welch_t_test,
)


def brute_auc(s, y):
    pos, neg = s[y == 1], s[y == 0]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return wins / (len(pos) * len(neg))


@pytest.fixture(scope="module")
def syn():
    return generate_synthetic(SyntheticConfig(n_records=5000, seed=5))


def test_auc_examples():
    assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    assert auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_auc_rejects_single_class():
    with pytest.raises(MetricError, match="both classes"):
        auc([0.1, 0.2], [1, 1])


def test_auc_matches_brute_force_with_ties():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(2, 201))
        s = rng.integers(0, 10, n) / 10.0
        y = rng.integers(0, 2, n)
        y[0], y[1] = 0, 1
        assert auc(s, y) == brute_auc(s, y)


@given(st.integers(0, 10_000))
def test_auc_invariant_under_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    s = rng.normal(size=50)
    y = rng.integers(0, 2, 50)
    y[:2] = [0, 1]
    assert auc(s, y) == auc(np.exp(3 * s) + 1, y)


def test_nll_examples_and_shared_definition():
    assert nll([1.0, 0.0], [1, 0]) < 1e-6
    assert nll([0.5, 0.5], [1, 0]) == pytest.approx(math.log(2), abs=1e-15)
    assert nll([0.9, 0.2], [1, 0]) == pytest.approx(0.164252, abs=1e-6)
    p, y = np.array([0.3, 0.99, 0.01, 0.6]), np.array([1, 1, 0, 0])
    assert nll(p, y) == pytest.approx(L.loss_ctr(dc.Tensor(p), y).item(), abs=1e-15)


def test_scope_oracle_and_click(syn):
    p = np.full(len(syn), 0.1)
    _, labels, scope = cvr_evaluation_scope(syn, p)
    assert scope == "entire" and len(labels) == len(syn)
    plain = Dataset(syn.schema, syn.features, syn.click, syn.conversion)
    _, labels, scope = cvr_evaluation_scope(plain, p)
    assert scope == "click" and len(labels) == int(syn.click.sum())


def test_teacher_nonclick_logloss(syn):
    unclicked = syn.click == 0
    q = syn.oracle_cvr[unclicked]
    labels = syn.oracle_conv_all[unclicked]
    expected = -(labels * np.log(q) + (1 - labels) * np.log(1 - q)).mean()
    assert teacher_nonclick_logloss(syn.oracle_cvr, syn) == pytest.approx(expected, abs=1e-12)
    assert teacher_nonclick_logloss(np.full(len(syn), 0.5), syn) == pytest.approx(math.log(2), abs=1e-15)
    plain = Dataset(syn.schema, syn.features, syn.click, syn.conversion)
    assert teacher_nonclick_logloss(np.full(len(syn), 0.5), plain) is None


def test_mean_bias(syn):
    assert mean_bias(syn.oracle_cvr, syn) == 0.0
    assert mean_bias(syn.oracle_cvr + 0.1, syn) == pytest.approx(0.1, abs=1e-12)
    rand = np.random.default_rng(1).uniform(0, 1, len(syn))
    assert mean_bias(rand, syn) == pytest.approx(abs(rand.mean() - syn.oracle_cvr.mean()), abs=1e-15)
    plain = Dataset(syn.schema, syn.features, syn.click, syn.conversion)
    bias, proxy = signed_bias(rand, plain)
    clicked = syn.click == 1
    assert proxy and bias == pytest.approx(rand[clicked].mean() - syn.conversion[clicked].mean())


@settings(max_examples=30)
@given(st.floats(0.001, 5.0))
def test_signed_bias_shifts_by_constant(c):
    rng = np.random.default_rng(3)
    ds = generate_synthetic(SyntheticConfig(n_records=500, seed=1, base_ctr_logit_shift=-1.0))
    p = rng.uniform(0, 1, 500)
    assert signed_bias(p + c, ds)[0] - signed_bias(p, ds)[0] == pytest.approx(c, abs=1e-12)


def test_evaluate_report(syn):
    rep = evaluate(syn, syn.oracle_cvr, syn.oracle_cvr, seed=3, method="m")
    d = rep.to_dict()
    assert d["scope"] == "entire" and d["n_eval"] == len(syn) and d["seed"] == 3
    assert 0.5 < d["auc"] <= 1 and d["mean_bias"] == 0.0
    assert d["teacher_nonclick_logloss"] is not None


def test_welch_examples():
    assert welch_t_test([1, 2, 3], [1, 2, 3]) == (0.0, 1.0)
    assert welch_t_test([1.0] * 5, [1.0] * 5) == (0.0, 1.0)
    t, p = welch_t_test([1.0] * 5, [2.0] * 5)
    assert t == -math.inf and p == 0.0
    t, _ = welch_t_test([0.1, 0.2, 0.3], [0.4, 0.5, 0.6])
    assert t == pytest.approx(-3.674235, abs=1e-6)
    with pytest.raises(MetricError):
        welch_t_test([1.0], [2.0, 3.0])


@settings(max_examples=50)
@given(st.integers(0, 10_000))
def test_welch_matches_scipy(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(0, rng.uniform(0.1, 3), int(rng.integers(2, 12)))
    b = rng.normal(rng.uniform(-2, 2), rng.uniform(0.1, 3), int(rng.integers(2, 12)))
    t, p = welch_t_test(a, b)
    ref = stats.ttest_ind(a, b, equal_var=False)
    assert t == pytest.approx(ref.statistic, rel=1e-10)
    assert p == pytest.approx(ref.pvalue, rel=1e-8, abs=1e-14)
