from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from choicectx.data import ChoiceDataset, apply_standardizer, fit_standardizer
from choicectx.models import LCLParams, MNLParams, negative_log_likelihood
from choicectx.optimize import (
    AdamState,
    GridSearchSpec,
    RegPathConfig,
    TrainConfig,
    TrainingError,
    adam_step,
    fit_constrained_lcl,
    fit_mle,
    full_batch_gradient_descent,
    grid_search,
    l1_path,
    selection_score,
    soft_threshold,
)

from _helpers import generated, random_params


def _scalar(x):
    return MNLParams(np.array([x]))


def test_null_update():
    state = AdamState()
    params, state = adam_step(state, _scalar(1.5), _scalar(0.0), lr=0.1)
    assert params.theta.tolist() == [1.5] and state.step_count == 1


def test_first_step_moves_by_lr():
    params, _ = adam_step(AdamState(), _scalar(0.0), _scalar(4.0), lr=0.1)
    assert params.theta[0] == pytest.approx(-0.1, rel=1e-6)


def test_decay_only_step():
    params, _ = adam_step(AdamState(), _scalar(1.0), _scalar(0.0), lr=0.1, weight_decay=0.5)
    assert params.theta[0] < 1.0


def test_non_finite_gradient_rejected():
    class Grad:
        def arrays(self):
            return {"theta": np.array([0.0, np.nan])}

    with pytest.raises(TrainingError, match="theta"):
        adam_step(AdamState(), MNLParams(np.zeros(2)), Grad(), lr=0.1)


def test_trainable_mask_freezes_entries():
    p = LCLParams(np.zeros(2), np.zeros((2, 2)))
    g = LCLParams(np.ones(2), np.ones((2, 2)))
    mask = {"theta": np.array([True, False]), "A": np.zeros((2, 2), bool)}
    new, _ = adam_step(AdamState(), p, g, lr=0.1, weight_decay=0.1, trainable=mask)
    assert new.theta[0] < 0 and new.theta[1] == 0 and np.all(new.A == 0)


@pytest.mark.parametrize("x, lam, expected", [(0.5, 1.0, 0.0), (3.0, 1.0, 2.0), (-3.0, 1.0, -2.0)])
def test_soft_threshold(x, lam, expected):
    assert soft_threshold(x, lam) == expected


@settings(max_examples=200, deadline=None)
@given(st.floats(-1e6, 1e6), st.floats(0, 1e6))
def test_soft_threshold_never_grows(x, lam):
    assert abs(soft_threshold(x, lam)) <= abs(x)


def test_l1_step_never_increases_magnitude_relative_to_plain_step():
    rng = np.random.default_rng(0)
    for _ in range(50):
        p = LCLParams(rng.normal(size=3), rng.normal(size=(3, 3)))
        g = LCLParams(rng.normal(size=3), rng.normal(size=(3, 3)))
        plain, _ = adam_step(AdamState(), p, g, lr=0.05)
        prox, _ = adam_step(AdamState(), p, g, lr=0.05, l1_lambda=rng.uniform(0, 2))
        assert np.all(np.abs(prox.A) <= np.abs(plain.A))
        np.testing.assert_array_equal(prox.theta, plain.theta)


# --------------------------------------------------------------------------
# training


def _separable(n=50):
    return ChoiceDataset(np.tile([[1.0], [0.0]], (n, 1, 1)), np.full(n, 2), np.zeros(n, int))


def test_separable_direction():
    fit = fit_mle("mnl", _separable(), TrainConfig(epochs=40, batch_size=16, weight_decay=0.0))
    assert fit.params.theta[0] > 0
    nlls = [r.train_nll for r in fit.log]
    assert all(b <= a + 1e-3 for a, b in zip(nlls, nlls[1:]))


def test_same_seed_same_log():
    data = generated(random_params("lcl", 2, np.random.default_rng(1)), 300, 4, seed=2)
    cfg = TrainConfig(epochs=5, batch_size=32, seed=3)
    a, b = fit_mle("lcl", data, cfg, validation=data), fit_mle("lcl", data, cfg, validation=data)
    assert [(r.train_nll, r.val_nll) for r in a.log] == [(r.train_nll, r.val_nll) for r in b.log]
    np.testing.assert_array_equal(a.params.flat(), b.params.flat())


def test_weight_decay_keeps_A_small_on_mnl_data():
    data = generated(MNLParams(np.array([1.0, -0.5, 0.5])), 10_000, 5, seed=4)
    data = apply_standardizer(fit_standardizer(data), data)
    fit = fit_mle("lcl", data, TrainConfig(epochs=30, weight_decay=0.001, batch_size=256))
    assert np.max(np.abs(fit.params.A)) < 0.1


def test_divergence_is_reported():
    data = generated(MNLParams(np.array([1.0])), 200, 3, seed=5)
    with pytest.raises(TrainingError, match="diverged"):
        fit_mle("mnl", data, TrainConfig(learning_rate=1e6, epochs=3, batch_size=8))


def test_wall_clock_stop():
    data = generated(MNLParams(np.array([1.0])), 100, 3, seed=6)
    fit = fit_mle("mnl", data, TrainConfig(epochs=1000, wall_clock_limit_seconds=0.0))
    assert fit.stop_reason == "wall_clock" and len(fit.log) == 1


@pytest.mark.parametrize("kind", ["mnl", "lcl"])
def test_full_batch_descent_is_monotone(kind):
    rng = np.random.default_rng(7)
    data = generated(random_params(kind, 3, rng), 2000, 5, seed=8)
    data = apply_standardizer(fit_standardizer(data), data)
    start = random_params(kind, 3, rng)
    _, trace = full_batch_gradient_descent(start, data, lr=1e-3, steps=200)
    assert all(b <= a + 1e-9 for a, b in zip(trace, trace[1:]))


# --------------------------------------------------------------------------
# grid search


def test_selection_score_is_worst_of_window():
    assert selection_score([50, 9, 10, 8, 7, 9]) == 10
    assert selection_score([12, 11, 12]) == 12


def _grid_data():
    data = generated(random_params("lcl", 2, np.random.default_rng(9)), 600, 4, seed=10)
    return data.subset(range(400)), data.subset(range(400, 600))


def test_singleton_grid():
    train, val = _grid_data()
    cfg = TrainConfig(epochs=6)
    res = grid_search("mnl", train, val, GridSearchSpec((0.01,), (0.0,)), cfg)
    direct = fit_mle("mnl", train, replace(cfg, weight_decay=0.0), validation=val)
    np.testing.assert_array_equal(res.params.flat(), direct.params.flat())
    assert (res.learning_rate, res.weight_decay) == (0.01, 0.0)


def test_grid_selects_lowest_score_and_ignores_order():
    train, val = _grid_data()
    cfg = TrainConfig(epochs=8)
    a = grid_search("lcl", train, val, GridSearchSpec((0.001, 0.05), (0.0, 0.01)), cfg)
    b = grid_search("lcl", train, val, GridSearchSpec((0.05, 0.001), (0.01, 0.0)), cfg)
    assert (a.learning_rate, a.weight_decay) == (b.learning_rate, b.weight_decay)
    scores = {(r["learning_rate"], r["weight_decay"]): r["score"] for r in a.table}
    assert scores[(a.learning_rate, a.weight_decay)] == min(scores.values())


def test_grid_with_workers_matches_serial():
    train, val = _grid_data()
    spec = GridSearchSpec((0.01, 0.05), (0.0,))
    serial = grid_search("mnl", train, val, spec, TrainConfig(epochs=4))
    parallel = grid_search("mnl", train, val, spec, TrainConfig(epochs=4), workers=2)
    assert serial.table == parallel.table


def test_grid_all_diverged():
    train, val = _grid_data()
    with pytest.raises(TrainingError, match="all grid cells diverged"):
        grid_search("mnl", train, val, GridSearchSpec((1e6,), (0.0,)), TrainConfig(epochs=3, batch_size=8))


# --------------------------------------------------------------------------
# L1 path and constrained fits


def _full_batch(n, **kw):
    return TrainConfig(batch_size=n, weight_decay=0.0, **kw)


def test_l1_zero_lambda_equals_plain_fit():
    data = generated(random_params("lcl", 2, np.random.default_rng(11)), 500, 4, seed=12)
    cfg = _full_batch(data.n, epochs=50)
    path = l1_path(data, RegPathConfig((0.0,), cfg))
    plain = fit_mle("lcl", data, cfg)
    np.testing.assert_array_equal(path[0].A, plain.params.A)


def test_l1_large_lambda_collapses_to_mnl():
    data = generated(random_params("lcl", 3, np.random.default_rng(13)), 2000, 5, seed=14)
    data = apply_standardizer(fit_standardizer(data), data)
    cfg = _full_batch(data.n, epochs=1500, learning_rate=0.05)
    mnl = fit_mle("mnl", data, cfg)
    path = l1_path(data, RegPathConfig((1e3,), cfg), mnl_fit=mnl)
    assert path[0].nnz == 0
    mnl_nll = negative_log_likelihood(mnl.params, data)
    assert abs(path[0].nll - mnl_nll) <= 1e-4 * mnl_nll


def test_l1_path_sparsity_is_monotone_on_fixture():
    rng = np.random.default_rng(15)
    data = generated(random_params("lcl", 3, rng), 3000, 5, seed=16)
    data = apply_standardizer(fit_standardizer(data), data)
    cfg = _full_batch(data.n, epochs=300, learning_rate=0.05)
    path = l1_path(data, RegPathConfig((0.0, 0.01, 0.03, 0.1, 0.3, 1.0), cfg))
    nnz = [e.nnz for e in path]
    assert all(b <= a for a, b in zip(nnz, nnz[1:]))
    assert nnz[0] == 9 and nnz[-1] == 0
    assert path[0].significant and not path[-1].significant


def test_lambdas_must_increase():
    with pytest.raises(ValueError):
        RegPathConfig((0.1, 0.01))


def test_constrained_entry_on_context_free_data():
    data = generated(MNLParams(np.array([0.8, -0.4])), 5000, 5, seed=17)
    data = apply_standardizer(fit_standardizer(data), data)
    fit = fit_constrained_lcl(data, (0, 1), TrainConfig(epochs=20, weight_decay=0.001))
    assert abs(fit.value) < 0.05
    assert np.count_nonzero(fit.params.A) <= 1


def test_constrained_fit_is_nested():
    rng = np.random.default_rng(18)
    data = generated(random_params("lcl", 2, rng), 2000, 4, seed=19)
    cfg = _full_batch(data.n, epochs=3000, learning_rate=0.05)
    full = negative_log_likelihood(fit_mle("lcl", data, cfg).params, data)
    mnl = negative_log_likelihood(fit_mle("mnl", data, cfg).params, data)
    for entry in [(0, 0), (1, 0)]:
        con = fit_constrained_lcl(data, entry, cfg)
        assert con.nll >= full - 1e-6
        assert con.nll <= mnl + 1e-6


def test_constrained_entry_out_of_range():
    data = generated(MNLParams(np.array([1.0])), 10, 2, seed=20)
    with pytest.raises(IndexError):
        fit_constrained_lcl(data, (1, 0))
