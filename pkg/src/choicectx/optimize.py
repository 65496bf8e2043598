"""AMSGrad training, hyperparameter grid search and L1-regularized LCL fits."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import ChoiceDataset
from .models import (
    LCLParams,
    MNLParams,
    ModelKind,
    init_params,
    negative_log_likelihood,
    nll_and_gradient,
)

logger = logging.getLogger(__name__)

DEFAULT_LEARNING_RATES = (0.0005, 0.001, 0.005, 0.01, 0.05, 0.1)
DEFAULT_WEIGHT_DECAYS = (0.0, 0.0001, 0.0005, 0.001, 0.005, 0.01)


class TrainingError(RuntimeError):
    pass


@dataclass
class AdamState:
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)
    max_second_moment: dict = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    amsgrad: bool = True


def soft_threshold(x, lam):
    """``sign(x) * max(|x| - lam, 0)``, elementwise."""
    if np.any(np.asarray(lam) < 0):
        raise ValueError("threshold must be nonnegative")
    return np.sign(x) * np.maximum(np.abs(x) - lam, 0.0)


def adam_step(state: AdamState, params, grad, lr: float, weight_decay: float = 0.0,
              l1_lambda: float = 0.0, l1_keys=("A",), trainable: dict | None = None):
    """One AMSGrad update with coupled weight decay; mutates and returns ``state``.

    ``params`` and ``grad`` are parameter objects of the same type.  With
    ``l1_lambda > 0`` the entries named in ``l1_keys`` get a proximal
    soft-threshold step in Adam's diagonal metric, i.e. a threshold of
    ``lr * l1_lambda / denom`` per coordinate.  ``trainable`` optionally maps
    a parameter name to a boolean mask of entries allowed to move.
    """
    p_arrays = params.arrays()
    g_arrays = grad.arrays()
    for name, g in g_arrays.items():
        if not np.all(np.isfinite(g)):
            bad = np.argwhere(~np.isfinite(g))[0]
            raise TrainingError(f"non-finite gradient in {name}{tuple(int(i) for i in bad)}")

    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    out = {}
    for name, p in p_arrays.items():
        g = g_arrays[name] + weight_decay * p
        mask = None if trainable is None else trainable.get(name)
        if mask is not None:
            g = np.where(mask, g, 0.0)
        m = state.first_moment.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
            vmax = np.zeros_like(p)
        else:
            v = state.second_moment[name]
            vmax = state.max_second_moment[name]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        if state.amsgrad:
            vmax = np.maximum(vmax, v)
            denom = np.sqrt(vmax) / np.sqrt(bc2) + state.epsilon
        else:
            denom = np.sqrt(v) / np.sqrt(bc2) + state.epsilon
        new = p - (lr / bc1) * m / denom
        if l1_lambda > 0 and name in l1_keys:
            new = soft_threshold(new, lr * l1_lambda / denom)
        if mask is not None:
            new = np.where(mask, new, p)
        state.first_moment[name] = m
        state.second_moment[name] = v
        state.max_second_moment[name] = vmax
        out[name] = new
    return params.with_arrays(out), state


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    weight_decay: float = 0.001
    batch_size: int = 128
    epochs: int = 500
    wall_clock_limit_seconds: float | None = 3600.0
    seed: int = 0
    l1_lambda: float = 0.0
    amsgrad: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be at least 1")
        if self.weight_decay < 0 or self.l1_lambda < 0:
            raise ValueError("weight_decay and l1_lambda must be nonnegative")


@dataclass
class EpochRecord:
    epoch: int
    train_nll: float
    val_nll: float | None
    elapsed_s: float

    def to_json(self):
        return {"epoch": self.epoch, "train_nll": self.train_nll,
                "val_nll": self.val_nll, "elapsed_s": self.elapsed_s}


@dataclass
class FitResult:
    params: object
    log: list[EpochRecord]
    stop_reason: str

    @property
    def train_nll(self) -> float:
        return self.log[-1].train_nll

    def write_log(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.log:
                fh.write(json.dumps(rec.to_json()) + "\n")


def _batches(data: ChoiceDataset, order: np.ndarray, batch_size: int):
    features = data.features[order]
    sizes = data.sizes[order]
    chosen = data.chosen[order]
    for start in range(0, data.n, batch_size):
        s = slice(start, start + batch_size)
        yield ChoiceDataset._trusted(features[s], sizes[s], chosen[s])


def fit_mle(kind, train: ChoiceDataset, config: TrainConfig = TrainConfig(), init=None,
            validation: ChoiceDataset | None = None, trainable: dict | None = None,
            n_components: int | None = None) -> FitResult:
    """Minibatch AMSGrad on the mean NLL of each batch.

    Epoch order is a seeded permutation, batches are contiguous slices of
    it, and the wall-clock limit is only checked between epochs, so the log
    is reproducible for a given seed.
    """
    if init is None:
        kind = ModelKind.parse(kind) if isinstance(kind, str) else kind
        params = init_params(kind, train.d, seed=config.seed, n_components=n_components)
    else:
        params = init
    rng = np.random.default_rng(config.seed)
    state = AdamState(amsgrad=config.amsgrad)
    initial = negative_log_likelihood(params, train)
    start = time.perf_counter()
    log = []
    stop_reason = "epochs"
    for epoch in range(1, config.epochs + 1):
        for batch in _batches(train, rng.permutation(train.n), config.batch_size):
            _, grad = nll_and_gradient(params, batch, scale=1.0 / batch.n)
            params, state = adam_step(state, params, grad, config.learning_rate,
                                      config.weight_decay, config.l1_lambda, trainable=trainable)
        nll = negative_log_likelihood(params, train)
        if not np.isfinite(nll) or nll > 10.0 * max(initial, 1e-12):
            raise TrainingError(f"training diverged at epoch {epoch}: NLL {nll:.6g} (initial {initial:.6g})")
        val = negative_log_likelihood(params, validation) if validation is not None else None
        log.append(EpochRecord(epoch, nll, val, time.perf_counter() - start))
        if config.wall_clock_limit_seconds is not None and time.perf_counter() - start > config.wall_clock_limit_seconds:
            stop_reason = "wall_clock"
            break
    return FitResult(params, log, stop_reason)


def full_batch_gradient_descent(params, data: ChoiceDataset, lr: float, steps: int):
    """Plain fixed-step gradient descent on the mean NLL; returns params and the NLL trace."""
    trace = []
    for _ in range(steps):
        nll, grad = nll_and_gradient(params, data, scale=1.0 / data.n)
        trace.append(nll)
        params = params.from_flat(params.flat() - lr * grad.flat())
    trace.append(negative_log_likelihood(params, data) / data.n)
    return params, trace


# --------------------------------------------------------------------------
# grid search


@dataclass(frozen=True)
class GridSearchSpec:
    learning_rates: tuple = DEFAULT_LEARNING_RATES
    weight_decays: tuple = DEFAULT_WEIGHT_DECAYS
    window: int = 5

    def __post_init__(self):
        if not self.learning_rates or not self.weight_decays:
            raise ValueError("grid lists must be non-empty")


@dataclass
class GridResult:
    params: object
    learning_rate: float
    weight_decay: float
    table: list[dict]
    fit: FitResult


def selection_score(val_nlls, window: int = 5) -> float:
    """Worst validation NLL over the last ``window`` epochs (lower is better)."""
    return float(max(val_nlls[-window:]))


def _grid_cell(kind, train, validation, cfg, init, n_components, window):
    row = {"learning_rate": cfg.learning_rate, "weight_decay": cfg.weight_decay}
    try:
        fit = fit_mle(kind, train, cfg, init=init, validation=validation, n_components=n_components)
    except TrainingError as exc:
        row.update(diverged=True, score=None, error=str(exc))
        return row, None
    score = selection_score([r.val_nll for r in fit.log], window)
    row.update(diverged=False, score=score, final_val_nll=fit.log[-1].val_nll, final_train_nll=fit.train_nll)
    return row, fit


def grid_search(kind, train: ChoiceDataset, validation: ChoiceDataset,
                spec: GridSearchSpec = GridSearchSpec(), base_config: TrainConfig = TrainConfig(),
                init=None, n_components: int | None = None, workers: int = 1) -> GridResult:
    """Train one model per (lr, wd) cell and keep the one whose worst
    validation NLL over the final epochs is smallest.

    Every cell uses the same seed, and ties are broken by ``(lr, wd)``, so
    the outcome does not depend on evaluation order.  ``workers > 1`` runs
    cells in separate processes.
    """
    configs = [replace(base_config, learning_rate=lr, weight_decay=wd)
               for lr in spec.learning_rates for wd in spec.weight_decays]
    args = [(kind, train, validation, cfg, init, n_components, spec.window) for cfg in configs]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_grid_cell, *zip(*args)))
    else:
        results = [_grid_cell(*a) for a in args]
    table = [row for row, _ in results]
    best = None
    for row, fit in results:
        if fit is None:
            continue
        key = (row["score"], row["learning_rate"], row["weight_decay"])
        if best is None or key < best[0]:
            best = (key, fit)
    if best is None:
        raise TrainingError("all grid cells diverged: " + json.dumps(table))
    (_, lr, wd), fit = best
    return GridResult(fit.params, lr, wd, table, fit)


# --------------------------------------------------------------------------
# L1 regularization path and single-entry LCL


@dataclass(frozen=True)
class RegPathConfig:
    lambdas: tuple
    base: TrainConfig = TrainConfig()

    def __post_init__(self):
        lams = tuple(float(x) for x in self.lambdas)
        if not lams or any(x < 0 for x in lams) or any(b <= a for a, b in zip(lams, lams[1:])):
            raise ValueError("lambdas must be nonnegative and strictly increasing")
        object.__setattr__(self, "lambdas", lams)


@dataclass
class PathEntry:
    lam: float
    A: np.ndarray
    theta: np.ndarray
    nll: float
    lrt_statistic: float
    p_value: float
    significant: bool

    @property
    def nnz(self) -> int:
        return int(np.count_nonzero(self.A))

    def to_json(self):
        return {"lambda": self.lam, "A": self.A.tolist(), "theta": self.theta.tolist(),
                "nll": self.nll, "nnz": self.nnz, "lrt_statistic": self.lrt_statistic,
                "p_value": self.p_value, "significant": self.significant}


def l1_path(train: ChoiceDataset, config: RegPathConfig, alpha: float = 0.001,
            mnl_fit: FitResult | None = None) -> list[PathEntry]:
    """Fit an L1-penalized LCL for each lambda, warm-starting along the path.

    Each entry also reports a likelihood-ratio test of the (penalized) LCL
    against an MNL fitted with the same base configuration.
    """
    from .stats import likelihood_ratio_test

    if mnl_fit is None:
        mnl_fit = fit_mle(ModelKind.MNL, train, config.base)
    mnl_nll = negative_log_likelihood(mnl_fit.params, train)
    params = init_params(ModelKind.LCL, train.d)
    out = []
    for lam in config.lambdas:
        fit = fit_mle(ModelKind.LCL, train, replace(config.base, l1_lambda=lam), init=params)
        params = fit.params
        nll = negative_log_likelihood(params, train)
        lrt = likelihood_ratio_test(mnl_nll, nll, train.d ** 2)
        out.append(PathEntry(lam, params.A.copy(), params.theta.copy(), nll, lrt.statistic,
                             lrt.p_value, lrt.p_value < alpha))
    return out


@dataclass
class ConstrainedFit:
    entry: tuple[int, int]
    theta: np.ndarray
    value: float
    nll: float
    params: LCLParams
    fit: FitResult


def fit_constrained_lcl(train: ChoiceDataset, entry: tuple[int, int],
                        config: TrainConfig = TrainConfig(), init: MNLParams | None = None) -> ConstrainedFit:
    """LCL with every entry of ``A`` except ``A[p, q]`` pinned at zero."""
    p, q = entry
    d = train.d
    if not (0 <= p < d and 0 <= q < d):
        raise IndexError(f"entry {entry} out of range for d={d}")
    mask = np.zeros((d, d), dtype=bool)
    mask[p, q] = True
    theta0 = np.zeros(d) if init is None else init.theta
    start = LCLParams(theta0, np.zeros((d, d)))
    fit = fit_mle(ModelKind.LCL, train, config, init=start,
                  trainable={"theta": np.ones(d, dtype=bool), "A": mask})
    nll = negative_log_likelihood(fit.params, train)
    return ConstrainedFit((p, q), fit.params.theta.copy(), float(fit.params.A[p, q]), nll, fit.params, fit)
