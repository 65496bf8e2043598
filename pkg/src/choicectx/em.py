"""Expectation-maximization for the DLCL.

The E-step computes each observation's posterior over the ``d`` components;
the M-step maximizes the responsibility-weighted log-likelihood, which is
concave in ``(A, B)``, with a fixed number of full-batch AMSGrad steps;
the mixture weights then get their closed-form update (column means of the
responsibilities).
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .data import ChoiceDataset
from .models import (
    DLCLParams,
    chain_preference_gradient,
    component_log_probs,
    component_preferences,
    init_params,
    ModelKind,
    nll_and_gradient,
    preference_gradient,
)
from .optimize import AdamState, adam_step

FROZEN_WEIGHT = 1e-12


def _single(observation) -> ChoiceDataset:
    items, chosen = observation
    items = np.asarray(items, dtype=float)
    return ChoiceDataset(items[None], np.array([len(items)]), np.array([chosen]))


def _chosen_component_log_probs(params: DLCLParams, data: ChoiceDataset):
    logp = component_log_probs(component_preferences(params, data), data)
    return logp, logp[np.arange(data.n), :, data.chosen]


def component_probabilities(params: DLCLParams, observation) -> np.ndarray:
    """Probability of the chosen item under each component's logit alone."""
    data = _single(observation)
    if data.d != params.d:
        raise ValueError(f"observation has d={data.d}, parameters d={params.d}")
    return np.exp(_chosen_component_log_probs(params, data)[1][0])


def compute_responsibilities(params: DLCLParams, data: ChoiceDataset) -> np.ndarray:
    """Posterior component probabilities, shape ``(n, d)``, normalized in log space."""
    _, lp = _chosen_component_log_probs(params, data)
    with np.errstate(divide="ignore"):
        joint = lp + np.log(params.pis)[None, :]
    return np.exp(joint - logsumexp(joint, axis=1, keepdims=True))


def q_function(A, B, responsibilities, data: ChoiceDataset):
    """Expected complete-data log-likelihood (without the mixture-weight term).

    Returns ``(Q, {"A": dQ/dA, "B": dQ/dB})``.
    """
    r = np.asarray(responsibilities, dtype=float)
    d = data.d
    if r.shape != (data.n, d):
        raise ValueError(f"responsibilities must have shape {(data.n, d)}")
    params = DLCLParams(A, B, np.zeros(d))
    logp, lp = _chosen_component_log_probs(params, data)
    q = float((r * lp).sum())
    grads = chain_preference_gradient(params, preference_gradient(logp, r, data), data)
    return q, {"A": -grads["A"], "B": -grads["B"]}


@dataclass(frozen=True)
class MStepConfig:
    iterations: int = 50
    learning_rate: float = 0.005


@dataclass(frozen=True)
class EMLimits:
    max_iterations: int = 500
    grad_tol: float = 1e-6
    wall_clock_limit_seconds: float | None = 3600.0
    seed: int = 0


@dataclass
class EMRecord:
    t: int
    nll: float
    grad_norm: float
    pi: list
    q: float | None = None

    def to_json(self):
        return {"t": self.t, "nll": self.nll, "grad_norm": self.grad_norm, "pi": self.pi}


@dataclass
class EMResult:
    params: DLCLParams
    trace: list[EMRecord] = field(default_factory=list)
    stop_reason: str = ""

    @property
    def nll(self) -> float:
        return self.trace[-1].nll

    def write_trace(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.trace:
                fh.write(json.dumps(rec.to_json()) + "\n")


class _AB:
    """Minimal parameter holder so the M-step can reuse :func:`adam_step`."""

    def __init__(self, A, B):
        self.A, self.B = A, B

    def arrays(self):
        return {"A": self.A, "B": self.B}

    def with_arrays(self, arrays):
        return _AB(arrays["A"], arrays["B"])


def m_step(params: DLCLParams, responsibilities: np.ndarray, data: ChoiceDataset,
           config: MStepConfig = MStepConfig()) -> tuple[np.ndarray, np.ndarray, float]:
    """Increase Q over ``(A, B)`` by full-batch AMSGrad ascent.

    Returns the best iterate seen (never worse than the starting point, so
    the outer EM loop stays monotone even when Adam overshoots).  Columns of
    components whose weight has collapsed are left untouched.
    """
    trainable_cols = params.pis >= FROZEN_WEIGHT
    mask = np.broadcast_to(trainable_cols[None, :], params.A.shape)
    trainable = {"A": mask, "B": mask}
    scale = 1.0 / data.n
    cur = _AB(params.A, params.B)
    state = AdamState()
    best_q, best = None, cur
    for _ in range(config.iterations):
        q, g = q_function(cur.A, cur.B, responsibilities, data)
        if best_q is None or q > best_q:
            best_q, best = q, cur
        grad = _AB(-scale * g["A"], -scale * g["B"])
        cur, state = adam_step(state, cur, grad, config.learning_rate, trainable=trainable)
    q, _ = q_function(cur.A, cur.B, responsibilities, data)
    if best_q is None or q > best_q:
        best_q, best = q, cur
    return best.A, best.B, best_q


def update_weights(responsibilities) -> np.ndarray:
    """Closed-form mixture-weight update: column means of the responsibilities."""
    pis = np.asarray(responsibilities, dtype=float).mean(axis=0)
    return pis / pis.sum()


def _grad_norm(params: DLCLParams, data: ChoiceDataset):
    nll, grad = nll_and_gradient(params, data)
    return nll, float(np.linalg.norm(grad.flat()))


def em_fit(train: ChoiceDataset, inner: MStepConfig = MStepConfig(), limits: EMLimits = EMLimits(),
           init: DLCLParams | None = None) -> EMResult:
    """Run EM until the NLL gradient norm drops below ``limits.grad_tol`` or a limit is hit."""
    params = init if init is not None else init_params(ModelKind.DLCL, train.d, seed=limits.seed)
    nll, gnorm = _grad_norm(params, train)
    result = EMResult(params, [EMRecord(0, nll, gnorm, params.pis.tolist())])
    start = time.perf_counter()
    t = 0
    while True:
        if gnorm < limits.grad_tol:
            result.stop_reason = "converged"
            break
        if t >= limits.max_iterations:
            result.stop_reason = "max_iterations"
            break
        if limits.wall_clock_limit_seconds is not None and time.perf_counter() - start > limits.wall_clock_limit_seconds:
            result.stop_reason = "wall_clock"
            break
        r = compute_responsibilities(params, train)
        A, B, q = m_step(params, r, train, inner)
        params = DLCLParams.from_weights(A, B, update_weights(r))
        t += 1
        nll, gnorm = _grad_norm(params, train)
        result.trace.append(EMRecord(t, nll, gnorm, params.pis.tolist(), q))
        result.params = params
    return result
