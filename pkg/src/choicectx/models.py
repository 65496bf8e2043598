"""MNL, LCL, mixed logit and DLCL choice probabilities, likelihoods and gradients.

Every model here is a mixture of logits over *preference vectors* that may
depend on the choice set:

* MNL: one component with preferences ``theta``.
* LCL: one component with preferences ``theta + A @ x_C``.
* mixed logit: ``M`` components with fixed preferences ``thetas[m]``.
* DLCL: ``d`` components; component ``k`` uses ``B[:, k] + A[:, k] * x_C[k]``.

so likelihoods and gradients share one code path: compute per-component
preferences, the per-component log-probabilities of each item, and then
chain the gradient with respect to the preferences back to the parameters.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, fields, replace
from typing import ClassVar

import numpy as np
from scipy.special import logsumexp

from .data import ChoiceDataset, Standardizer


class ModelKind(str, enum.Enum):
    MNL = "mnl"
    LCL = "lcl"
    MIXED = "mixed_logit"
    DLCL = "dlcl"

    @classmethod
    def parse(cls, name: str) -> ModelKind:
        aliases = {"mixed": cls.MIXED, "mixed-logit": cls.MIXED}
        if name in aliases:
            return aliases[name]
        return cls(name)


class ModelError(ValueError):
    pass


def _log_softmax(x, axis=-1):
    # every slice along ``axis`` must hold at least one finite entry
    m = np.max(x, axis=axis, keepdims=True)
    shifted = x - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


@dataclass(frozen=True)
class _Params:
    kind: ClassVar[ModelKind]

    def __post_init__(self):
        for f in fields(self):
            arr = np.array(getattr(self, f.name), dtype=float)
            if not np.all(np.isfinite(arr)):
                raise ModelError(f"{type(self).__name__}.{f.name} has non-finite entries")
            object.__setattr__(self, f.name, arr)
        self._check_shapes()

    def _check_shapes(self):
        pass

    def arrays(self) -> dict[str, np.ndarray]:
        """Free parameters by name (the layout optimizers and gradients use)."""
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def with_arrays(self, arrays: dict[str, np.ndarray]):
        return replace(self, **arrays)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays().values()])

    def from_flat(self, vec):
        out, i = {}, 0
        for name, a in self.arrays().items():
            out[name] = np.asarray(vec[i:i + a.size], dtype=float).reshape(a.shape)
            i += a.size
        return self.with_arrays(out)


@dataclass(frozen=True)
class MNLParams(_Params):
    theta: np.ndarray
    kind: ClassVar = ModelKind.MNL

    def _check_shapes(self):
        if self.theta.ndim != 1:
            raise ModelError("theta must be a vector")

    @property
    def d(self):
        return len(self.theta)


@dataclass(frozen=True)
class LCLParams(_Params):
    theta: np.ndarray
    A: np.ndarray
    kind: ClassVar = ModelKind.LCL

    def _check_shapes(self):
        d = len(self.theta)
        if self.theta.ndim != 1 or self.A.shape != (d, d):
            raise ModelError(f"LCL needs theta (d,) and A (d, d); got {self.theta.shape}, {self.A.shape}")

    @property
    def d(self):
        return len(self.theta)


@dataclass(frozen=True)
class MixedLogitParams(_Params):
    thetas: np.ndarray  # (M, d)
    pi_logits: np.ndarray  # (M,)
    kind: ClassVar = ModelKind.MIXED

    def _check_shapes(self):
        if self.thetas.ndim != 2 or self.pi_logits.shape != (self.thetas.shape[0],):
            raise ModelError("mixed logit needs thetas (M, d) and pi_logits (M,)")

    @property
    def d(self):
        return self.thetas.shape[1]

    @property
    def pis(self):
        return np.exp(_log_softmax(self.pi_logits))

    @classmethod
    def from_weights(cls, thetas, pis):
        pis = np.asarray(pis, dtype=float)
        if np.any(pis < 0) or abs(pis.sum() - 1.0) > 1e-12:
            raise ModelError("mixture weights must be nonnegative and sum to 1")
        with np.errstate(divide="ignore"):
            logits = np.maximum(np.log(pis), -745.0)
        return cls(thetas, logits)


@dataclass(frozen=True)
class DLCLParams(_Params):
    A: np.ndarray  # (d, d); column k scales x_C[k] for component k
    B: np.ndarray  # (d, d); column k is component k's base preferences
    pi_logits: np.ndarray  # (d,)
    kind: ClassVar = ModelKind.DLCL

    def _check_shapes(self):
        d = self.A.shape[0]
        if self.A.shape != (d, d) or self.B.shape != (d, d) or self.pi_logits.shape != (d,):
            raise ModelError("DLCL needs A (d, d), B (d, d) and pi_logits (d,)")

    @property
    def d(self):
        return self.A.shape[0]

    @property
    def pis(self):
        return np.exp(_log_softmax(self.pi_logits))

    @classmethod
    def from_weights(cls, A, B, pis):
        pis = np.asarray(pis, dtype=float)
        if np.any(pis < 0) or abs(pis.sum() - 1.0) > 1e-12:
            raise ModelError("mixture weights must be nonnegative and sum to 1")
        with np.errstate(divide="ignore"):
            logits = np.maximum(np.log(pis), -745.0)
        return cls(A, B, logits)


PARAM_TYPES = {
    ModelKind.MNL: MNLParams,
    ModelKind.LCL: LCLParams,
    ModelKind.MIXED: MixedLogitParams,
    ModelKind.DLCL: DLCLParams,
}


def init_params(kind: ModelKind | str, d: int, seed: int = 0, n_components: int | None = None):
    """Zeros for MNL/LCL; mixture components uniform on [-0.1, 0.1] with uniform weights."""
    kind = ModelKind.parse(kind) if isinstance(kind, str) else kind
    rng = np.random.default_rng(seed)
    if kind is ModelKind.MNL:
        return MNLParams(np.zeros(d))
    if kind is ModelKind.LCL:
        return LCLParams(np.zeros(d), np.zeros((d, d)))
    if kind is ModelKind.MIXED:
        m = d if n_components is None else n_components
        return MixedLogitParams(rng.uniform(-0.1, 0.1, (m, d)), np.zeros(m))
    A = rng.uniform(-0.1, 0.1, (d, d))
    B = rng.uniform(-0.1, 0.1, (d, d))
    return DLCLParams(A, B, np.zeros(d))


def context_adjusted_preferences(theta, A, x_C) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    A = np.asarray(A, dtype=float)
    x_C = np.asarray(x_C, dtype=float)
    if A.shape != (len(theta), len(x_C)):
        raise ModelError(f"shape mismatch: theta {theta.shape}, A {A.shape}, x_C {x_C.shape}")
    return theta + A @ x_C


# --------------------------------------------------------------------------
# shared machinery


def _check_dims(params, data: ChoiceDataset):
    if params.d != data.d:
        raise ModelError(f"parameters have d={params.d} but data has d={data.d}")


def component_preferences(params, data: ChoiceDataset) -> np.ndarray:
    """Per-observation, per-component preference vectors, shape ``(n, K, d)``."""
    _check_dims(params, data)
    n, d = data.n, data.d
    if isinstance(params, MNLParams):
        return np.broadcast_to(params.theta, (n, 1, d))
    if isinstance(params, LCLParams):
        return (params.theta + data.set_means @ params.A.T)[:, None, :]
    if isinstance(params, MixedLogitParams):
        return np.broadcast_to(params.thetas, (n,) + params.thetas.shape)
    if isinstance(params, DLCLParams):
        return params.B.T[None, :, :] + params.A.T[None, :, :] * data.set_means[:, :, None]
    raise TypeError(f"unsupported parameter type {type(params).__name__}")


def log_mixture_weights(params) -> np.ndarray:
    if isinstance(params, (MixedLogitParams, DLCLParams)):
        return _log_softmax(params.pi_logits)
    return np.zeros(1)


def component_log_probs(prefs: np.ndarray, data: ChoiceDataset) -> np.ndarray:
    """Log-softmax of every item's utility under every component, ``(n, K, m)``.

    Padding slots hold ``-inf``.
    """
    util = np.matmul(prefs, data.features.transpose(0, 2, 1))
    if not np.all(np.isfinite(util)):
        raise ModelError("non-finite utility")
    util = np.where(data.mask[:, None, :], util, -np.inf)
    return _log_softmax(util, axis=2)


def preference_gradient(logp: np.ndarray, weights: np.ndarray, data: ChoiceDataset) -> np.ndarray:
    """Gradient of ``-sum_hk weights[h,k] * log p_k(chosen_h)`` w.r.t. the preferences.

    For one component this is ``-(x_chosen - E_p[x])``, scaled by the weight.
    """
    expected = np.matmul(np.exp(logp), data.features)
    return -(data.chosen_features[:, None, :] - expected) * weights[:, :, None]


def chain_preference_gradient(params, g_pref: np.ndarray, data: ChoiceDataset) -> dict:
    """Map a gradient w.r.t. per-component preferences onto the parameters."""
    if isinstance(params, MNLParams):
        return {"theta": g_pref[:, 0].sum(axis=0)}
    if isinstance(params, LCLParams):
        g = g_pref[:, 0]
        return {"theta": g.sum(axis=0), "A": g.T @ data.set_means}
    if isinstance(params, MixedLogitParams):
        return {"thetas": g_pref.sum(axis=0)}
    if isinstance(params, DLCLParams):
        return {"B": g_pref.sum(axis=0).T, "A": np.einsum("nkd,nk->dk", g_pref, data.set_means)}
    raise TypeError(f"unsupported parameter type {type(params).__name__}")


def log_probabilities(params, data: ChoiceDataset) -> np.ndarray:
    """Log choice probability of every item, shape ``(n, max_size)``; padding is ``-inf``."""
    logp = component_log_probs(component_preferences(params, data), data)
    return logsumexp(logp + log_mixture_weights(params)[None, :, None], axis=1)


def chosen_log_probabilities(params, data: ChoiceDataset) -> np.ndarray:
    logp = component_log_probs(component_preferences(params, data), data)
    joint = logp[np.arange(data.n), :, data.chosen] + log_mixture_weights(params)
    return logsumexp(joint, axis=1)


def negative_log_likelihood(params, data: ChoiceDataset) -> float:
    """Total NLL, ``-sum_h log P(chosen_h | C_h)``."""
    return float(-chosen_log_probabilities(params, data).sum())


def nll_and_gradient(params, data: ChoiceDataset, scale: float = 1.0):
    """NLL and its exact gradient (as a params object of the same type), both times ``scale``.

    Mixture weights are differentiated through their softmax logits; the
    per-observation posterior over components is formed in log space.
    """
    logp = component_log_probs(component_preferences(params, data), data)
    logw = log_mixture_weights(params)
    joint = logp[np.arange(data.n), :, data.chosen] + logw
    ll = logsumexp(joint, axis=1)
    post = np.exp(joint - ll[:, None])
    grads = chain_preference_gradient(params, preference_gradient(logp, post, data), data)
    if "pi_logits" in params.arrays():
        grads["pi_logits"] = -(post - np.exp(logw)[None, :]).sum(axis=0)
    grads = {k: scale * v for k, v in grads.items()}
    return -scale * float(ll.sum()), params.with_arrays(grads)


def nll_gradient(params, data: ChoiceDataset):
    return nll_and_gradient(params, data)[1]


# --------------------------------------------------------------------------
# single choice sets


def _single_set(choice_set) -> ChoiceDataset:
    arr = np.asarray(choice_set, dtype=float)
    if arr.ndim != 2 or len(arr) == 0:
        raise ModelError("choice set must be a non-empty (k, d) array")
    return ChoiceDataset(arr[None], np.array([len(arr)]), np.array([0]))


def choice_probabilities(params, choice_set) -> np.ndarray:
    data = _single_set(choice_set)
    return np.exp(log_probabilities(params, data)[0])


def mnl_probabilities(params: MNLParams, choice_set) -> np.ndarray:
    return choice_probabilities(params, choice_set)


def lcl_probabilities(params: LCLParams, choice_set) -> np.ndarray:
    return choice_probabilities(params, choice_set)


def mixed_logit_probabilities(params: MixedLogitParams, choice_set) -> np.ndarray:
    return choice_probabilities(params, choice_set)


def dlcl_probabilities(params: DLCLParams, choice_set) -> np.ndarray:
    return choice_probabilities(params, choice_set)


def log_probability_ratios(params, choice_set) -> np.ndarray:
    """``beta_i = log(P(i) / geometric mean of P(j))`` for each item."""
    lp = log_probabilities(params, _single_set(choice_set))[0]
    return lp - lp.mean()


def probabilities_from_ratios(beta) -> np.ndarray:
    beta = np.asarray(beta, dtype=float)
    return np.exp(_log_softmax(beta))


# --------------------------------------------------------------------------
# serialization


def params_to_json(params, standardizer: Standardizer | None = None) -> dict:
    out = {"kind": params.kind.value, "d": int(params.d)}
    if isinstance(params, MNLParams):
        out["theta"] = params.theta.tolist()
    elif isinstance(params, LCLParams):
        out["theta"] = params.theta.tolist()
        out["A"] = params.A.tolist()
    elif isinstance(params, MixedLogitParams):
        out["theta"] = params.thetas.tolist()
        out["pi"] = params.pis.tolist()
        out["pi_logits"] = params.pi_logits.tolist()
    elif isinstance(params, DLCLParams):
        out["A"] = params.A.tolist()
        out["B"] = params.B.tolist()
        out["pi"] = params.pis.tolist()
        out["pi_logits"] = params.pi_logits.tolist()
    if standardizer is not None:
        out["standardizer"] = standardizer.to_json()
    return out


def params_from_json(obj: dict):
    """Inverse of :func:`params_to_json`; returns ``(params, standardizer or None)``."""
    kind = ModelKind.parse(obj["kind"])
    if kind is ModelKind.MNL:
        params = MNLParams(obj["theta"])
    elif kind is ModelKind.LCL:
        params = LCLParams(obj["theta"], obj["A"])
    elif kind is ModelKind.MIXED:
        if "pi_logits" in obj:
            params = MixedLogitParams(obj["theta"], obj["pi_logits"])
        else:
            params = MixedLogitParams.from_weights(obj["theta"], obj["pi"])
    else:
        if "pi_logits" in obj:
            params = DLCLParams(obj["A"], obj["B"], obj["pi_logits"])
        else:
            params = DLCLParams.from_weights(obj["A"], obj["B"], obj["pi"])
    if params.d != obj.get("d", params.d):
        raise ModelError("serialized d does not match parameter shapes")
    std = obj.get("standardizer")
    return params, (Standardizer.from_json(std) if std is not None else None)


def sample_choices(params, features, sizes=None, seed: int = 0) -> ChoiceDataset:
    """Draw one choice per choice set from the model's probabilities.

    ``features`` is a padded ``(n, m, d)`` array; ``sizes`` defaults to ``m``
    for every set.
    """
    features = np.asarray(features, dtype=float)
    n, m, _ = features.shape
    sizes = np.full(n, m) if sizes is None else np.asarray(sizes)
    rng = np.random.default_rng(seed)
    probe = ChoiceDataset(features, sizes, np.zeros(n, dtype=np.int64))
    cdf = np.cumsum(np.exp(log_probabilities(params, probe)), axis=1)
    u = rng.random(n)[:, None] * cdf[np.arange(n), sizes - 1][:, None]
    chosen = np.minimum((cdf < u).sum(axis=1), sizes - 1)
    return ChoiceDataset(probe.features, sizes, chosen, probe.feature_names)
