import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from choicectx.data import ChoiceDataset
from choicectx.models import (
    DLCLParams,
    LCLParams,
    MixedLogitParams,
    MNLParams,
    log_probabilities,
    negative_log_likelihood,
)
from choicectx.optimize import TrainConfig, fit_mle
from choicectx.stats import (
    binned_mnl,
    chi2_sf,
    gamma_q,
    likelihood_ratio_test,
    mean_relative_rank,
    relative_ranks,
    weighted_least_squares,
    wilcoxon_signed_rank,
)

from _helpers import generated, random_params
from _oracles import (
    CHI2_GRID,
    chi2_tail_by_quadrature,
    rank_by_brute_force,
    wilcoxon_by_enumeration,
    wilcoxon_difference_vectors,
)


def test_chi2_full_tail():
    for k in (1, 2, 7, 36, 100):
        assert chi2_sf(0.0, k) == 1.0


def test_chi2_five_percent_point():
    assert chi2_sf(3.841, 1) == pytest.approx(0.05, abs=1e-3)
    assert chi2_sf(3.841, 1) == pytest.approx(chi2_tail_by_quadrature(3.841, 1), abs=1e-10)


@pytest.mark.parametrize("x, k", CHI2_GRID)
def test_chi2_matches_quadrature(x, k):
    assert abs(chi2_sf(x, k) - chi2_tail_by_quadrature(x, k)) < 1e-8


def test_chi2_reference_row():
    assert chi2_sf(97, 36) == pytest.approx(1.6e-7, rel=0.25)


def test_chi2_monotonicity():
    xs = np.linspace(0.01, 120, 200)
    for k in (1, 3, 10, 36):
        vals = [chi2_sf(x, k) for x in xs]
        assert all(b <= a for a, b in zip(vals, vals[1:]))
    for x in (0.5, 5.0, 40.0):
        vals = [chi2_sf(x, k) for k in range(1, 80)]
        assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_gamma_q_exponential_case():
    for x in (0.1, 1.0, 3.5, 20.0):
        assert gamma_q(1.0, x) == pytest.approx(math.exp(-x), rel=1e-13)


def test_chi2_rejects_bad_arguments():
    with pytest.raises(ValueError):
        chi2_sf(1.0, 0)
    with pytest.raises(ValueError):
        chi2_sf(-1.0, 2)


# --------------------------------------------------------------------------
# likelihood-ratio test


def test_lrt_no_improvement():
    res = likelihood_ratio_test(123.4, 123.4, 9)
    assert res.statistic == 0.0 and res.p_value == 1.0


def test_lrt_reference_row():
    # integer-rounded NLLs give a statistic of exactly 96; the reported
    # p-value of 1.6e-7 belongs to the unrounded statistic of about 97
    res = likelihood_ratio_test(9821, 9773, 36)
    assert 96 <= res.statistic <= 97
    assert res.p_value == chi2_sf(96, 36)
    assert chi2_sf(97, 36) <= res.p_value <= chi2_sf(96, 36)
    unrounded = likelihood_ratio_test(9821, 9772.5, 36)
    assert unrounded.statistic == 97
    assert unrounded.p_value == pytest.approx(1.6e-7, rel=0.25)


def test_lrt_negative_statistic():
    res = likelihood_ratio_test(100.0, 112.5, 36)
    assert res.statistic == -25.0 and res.p_value == 1.0


def test_fitted_models_are_nested():
    rng = np.random.default_rng(1)
    data = generated(random_params("dlcl", 2, rng), 1500, 4, seed=2)
    cfg = TrainConfig(batch_size=data.n, epochs=2000, learning_rate=0.05, weight_decay=0.0)
    mnl = fit_mle("mnl", data, cfg)
    lcl = fit_mle("lcl", data, cfg)
    assert negative_log_likelihood(lcl.params, data) <= negative_log_likelihood(mnl.params, data) + 1e-3
    mixed = fit_mle("mixed", data, cfg).params
    start = DLCLParams(np.zeros((2, 2)), mixed.thetas.T.copy(), mixed.pi_logits.copy())
    dlcl = fit_mle("dlcl", data, cfg, init=start).params
    assert negative_log_likelihood(dlcl, data) <= negative_log_likelihood(mixed, data) + 1e-3
    assert isinstance(mixed, MixedLogitParams)


# --------------------------------------------------------------------------
# Wilcoxon signed-rank


def test_wilcoxon_hand_cases():
    res = wilcoxon_signed_rank([1, 2, 3])
    assert res.T == 0 and res.p_value == pytest.approx(0.25)
    res = wilcoxon_signed_rank([1, -1])
    assert res.T == 1.5 and res.p_value == 1.0
    assert wilcoxon_signed_rank([0, 0, 0]).p_value == 1.0


@pytest.mark.parametrize("diffs", wilcoxon_difference_vectors(), ids=lambda v: f"n{len(v)}")
def test_wilcoxon_exact_matches_enumeration(diffs):
    T, p = wilcoxon_by_enumeration(diffs)
    res = wilcoxon_signed_rank(diffs)
    assert res.T == pytest.approx(T, abs=1e-12)
    assert res.p_value == pytest.approx(p, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(-6, 6), min_size=1, max_size=30))
def test_wilcoxon_sign_flip_symmetry(values):
    a = wilcoxon_signed_rank(values)
    b = wilcoxon_signed_rank([-v for v in values])
    assert a.T == b.T and a.p_value == pytest.approx(b.p_value, abs=1e-15)


def test_wilcoxon_normal_approximation_against_scipy():
    from scipy.stats import wilcoxon

    rng = np.random.default_rng(3)
    for _ in range(20):
        d = np.round(rng.normal(0.2, 1, size=rng.integers(25, 200)), 1)
        ref = wilcoxon(d, zero_method="wilcox", correction=True, method="approx")
        res = wilcoxon_signed_rank(d)
        assert res.method == "normal_approx"
        assert res.T == pytest.approx(ref.statistic)
        assert res.p_value == pytest.approx(ref.pvalue, rel=1e-9)


# --------------------------------------------------------------------------
# relative rank


def test_top_and_bottom_ranks():
    params = MNLParams(np.array([1.0]))
    data = ChoiceDataset(np.array([[[3.0], [1.0], [2.0]], [[3.0], [1.0], [2.0]]]), [3, 3], [0, 1])
    assert relative_ranks(params, data).tolist() == [0.0, 1.0]


def test_tie_rule_hand_case():
    params = MNLParams(np.array([1.0]))
    data = ChoiceDataset(np.log([[[4.0], [3.0], [3.0]]]), [3], [1])
    assert relative_ranks(params, data).tolist() == [0.75]


def test_uniform_random_scorer():
    rng = np.random.default_rng(4)
    n, k = 10_000, 6
    feats = rng.normal(size=(n, k, 3))
    data = ChoiceDataset(feats, np.full(n, k), rng.integers(k, size=n))
    mrr, _ = mean_relative_rank(MNLParams(rng.normal(size=3)), data)
    assert abs(mrr - 0.5) < 0.02


def test_tie_rule_matches_brute_force():
    rng = np.random.default_rng(5)
    pool = rng.normal(size=(4, 2))
    params = MNLParams(rng.normal(size=2))
    for _ in range(1000):
        k = int(rng.integers(2, 8))
        items = pool[rng.integers(len(pool), size=k)]
        data = ChoiceDataset(items[None], [k], [int(rng.integers(k))])
        probs = np.exp(log_probabilities(params, data)[0])
        assert relative_ranks(params, data)[0] == pytest.approx(rank_by_brute_force(probs, data.chosen[0]),
                                                                abs=1e-15)


# --------------------------------------------------------------------------
# weighted least squares and binned MNLs


def test_wls_exact_line():
    fit = weighted_least_squares([0, 1, 2], [0, 1, 2], [1, 5, 2])
    assert fit.slope == pytest.approx(1.0) and fit.intercept == pytest.approx(0.0, abs=1e-15)
    assert fit.r2 == pytest.approx(1.0)


def test_wls_constant():
    fit = weighted_least_squares([0, 1], [1, 1], [1, 1])
    assert fit.slope == 0.0 and fit.intercept == 1.0


def test_wls_normal_equations():
    x, y, w = np.array([0.0, 1, 1]), np.array([0.0, 0, 2]), np.array([1.0, 1, 3])
    X = np.column_stack([np.ones(3), x])
    beta = np.linalg.solve(X.T @ (w[:, None] * X), X.T @ (w * y))
    fit = weighted_least_squares(x, y, w)
    assert fit.intercept == pytest.approx(beta[0], abs=1e-14)
    assert fit.slope == pytest.approx(beta[1], abs=1e-14)


def test_wls_rejects_degenerate_input():
    with pytest.raises(ValueError):
        weighted_least_squares([1, 1], [0, 1], [1, 1])
    with pytest.raises(ValueError):
        weighted_least_squares([0, 1], [0, 1], [1, 0])


def test_binned_flat_line_for_identical_bins():
    base = generated(MNLParams(np.array([1.0, -0.5])), 300, 4, seed=7).features
    chosen = generated(MNLParams(np.array([1.0, -0.5])), 300, 4, seed=7).chosen
    shifted = base.copy()
    shifted[:, :, 0] += 8.0  # moves every set mean of feature 0 into a second bin
    data = ChoiceDataset(np.concatenate([base, shifted]), np.full(600, 4), np.concatenate([chosen, chosen]))
    cfg = TrainConfig(batch_size=1000, epochs=200, weight_decay=0.0)
    res = binned_mnl(data, context_feature=0, target_feature=1, n_bins=2, config=cfg, min_count=10)
    assert len(res.bins) == 2
    assert abs(res.bins[0].coefficient - res.bins[1].coefficient) < 1e-10
    assert abs(res.slope) < 1e-10


def test_binned_detects_context_effect_small_scale():
    A = np.zeros((2, 2))
    A[1, 0] = 0.5
    data = generated(LCLParams(np.array([0.5, 0.5]), A), 8000, 5, seed=8)
    res = binned_mnl(data, context_feature=0, target_feature=1, n_bins=8,
                     config=TrainConfig(epochs=30), min_count=100)
    assert res.slope > 0
    j = res.to_json()
    assert j["context_feature"] == 0 and len(j["bins"]) == len(res.bins)


def test_binned_csv(tmp_path):
    data = generated(MNLParams(np.array([1.0, 0.0])), 600, 3, seed=9)
    res = binned_mnl(data, 0, 1, n_bins=3, config=TrainConfig(epochs=3), min_count=20, binning="quantile",
                     weighting="sqrt")
    res.write_csv(tmp_path / "bins.csv")
    rows = (tmp_path / "bins.csv").read_text().splitlines()
    assert rows[0] == "bin_center,coefficient,count" and len(rows) == len(res.bins) + 1


def test_binned_needs_two_bins():
    data = generated(MNLParams(np.array([1.0, 0.0])), 60, 3, seed=10)
    with pytest.raises(ValueError):
        binned_mnl(data, 0, 1, n_bins=5, config=TrainConfig(epochs=2), min_count=1000)
