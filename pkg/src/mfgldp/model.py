"""Finite mean-field game model: spaces, transition kernels and mean-field flows.

State-action pairs are flattened as ``z = x * |A| + a``; every measure over
``E = X x A`` in the package uses that ordering.
"""

from __future__ import annotations

import json
import numbers
from dataclasses import dataclass, replace
from typing import Any, Sequence

import numpy as np

DIST_ATOL = 1e-9
NEG_ATOL = 1e-12

_FIELDS = (
    "state_space",
    "action_space",
    "horizon",
    "mu0",
    "base_logits",
    "mf_weights",
    "policy",
    "costs",
    "mf_cost_weights",
)
_REQUIRED = ("state_space", "action_space", "horizon", "mu0", "base_logits", "policy")


class ModelError(ValueError):
    """A model or measure violates a shape or probability constraint.

    ``violations`` lists every problem found, each tagged with its tensor path.
    """

    def __init__(self, violations: Sequence[str] | str):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class ConfigParseError(ValueError):
    def __init__(self, msg: str, lineno: int | None = None, colno: int | None = None):
        self.lineno = lineno
        self.colno = colno
        where = f" (line {lineno}, column {colno})" if lineno is not None else ""
        super().__init__(msg + where)


class PolicyUnresolved(RuntimeError):
    """The model's policy is the ``"solve"`` marker and has not been solved yet."""


@dataclass(frozen=True)
class Space:
    labels: tuple[str, ...]

    def __post_init__(self):
        if len(self.labels) < 1:
            raise ModelError("space must have at least one label")
        if len(set(self.labels)) != len(self.labels):
            raise ModelError(f"duplicate labels in space {list(self.labels)}")

    @property
    def size(self) -> int:
        return len(self.labels)

    def index(self, label: str) -> int:
        return self.labels.index(label)

    @classmethod
    def of(cls, spec: int | Sequence[str], prefix: str = "s") -> "Space":
        if isinstance(spec, (int, np.integer)):
            return cls(tuple(f"{prefix}{i}" for i in range(int(spec))))
        return cls(tuple(str(s) for s in spec))


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def _row_problems(rows: np.ndarray, name: str) -> list[str]:
    problems = []
    for idx in np.ndindex(rows.shape[:-1]):
        row = rows[idx]
        path = name + "".join(f"[{i}]" for i in idx)
        if not np.all(np.isfinite(row)):
            problems.append(f"non-finite probability at {path}")
            continue
        if row.min() < -NEG_ATOL:
            problems.append(f"negative probability {row.min():g} at {path}")
            continue
        s = row.sum()
        if abs(s - 1.0) > DIST_ATOL:
            problems.append(f"row sum {s:g} ≠ 1 at {path}")
    return problems


def _normalize_rows(rows: np.ndarray) -> np.ndarray:
    rows = np.clip(np.asarray(rows, dtype=float), 0.0, None)
    return rows / rows.sum(axis=-1, keepdims=True)


def as_dist(weights, where: str = "dist") -> np.ndarray:
    """Validate a probability vector and return a renormalized read-only copy."""
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or w.size == 0:
        raise ModelError(f"expected a non-empty vector at {where}, got shape {w.shape}")
    problems = _row_problems(w, where)
    if problems:
        raise ModelError(problems)
    return _frozen(_normalize_rows(w))


def as_kernel(rows, where: str = "kernel") -> np.ndarray:
    """Validate a row-stochastic matrix (rows = source, columns = target)."""
    k = np.asarray(rows, dtype=float)
    if k.ndim != 2 or 0 in k.shape:
        raise ModelError(f"expected a non-empty matrix at {where}, got shape {k.shape}")
    problems = _row_problems(k, where)
    if problems:
        raise ModelError(problems)
    return _frozen(_normalize_rows(k))


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """A finite mean-field game under a fixed (or to-be-solved) Markov policy.

    The transition kernel at time ``t`` is
    ``softmax_x'(base_logits[t, x, a, x'] + sum_k mf_weights[t, x, a, x', k] * mu[k])``.
    ``policy`` has shape ``(T + 1, |X|, |A|)``; ``None`` stands for ``"solve"``.
    Costs, when present, are ``c_t(x, a, mu) = costs[t, x, a] + mf_cost_weights[t, x, a] @ mu``.
    """

    state_space: Space
    action_space: Space
    horizon: int
    mu0: np.ndarray
    base_logits: np.ndarray
    mf_weights: np.ndarray
    policy: np.ndarray | None = None
    costs: np.ndarray | None = None
    mf_cost_weights: np.ndarray | None = None

    @property
    def nx(self) -> int:
        return self.state_space.size

    @property
    def na(self) -> int:
        return self.action_space.size

    @property
    def ne(self) -> int:
        return self.nx * self.na

    @property
    def T(self) -> int:
        return self.horizon

    @property
    def mean_field_dependent(self) -> bool:
        return bool(np.any(self.mf_weights != 0))

    def require_policy(self) -> np.ndarray:
        if self.policy is None:
            raise PolicyUnresolved("policy is the 'solve' marker; run solve_mfe first")
        return self.policy

    def with_policy(self, policy) -> "ModelSpec":
        policy = np.asarray(policy, dtype=float)
        expected = (self.horizon + 1, self.nx, self.na)
        if policy.shape != expected:
            raise ModelError(f"policy shape {policy.shape} ≠ {expected}")
        problems = _row_problems(policy, "policy")
        if problems:
            raise ModelError(problems)
        return replace(self, policy=_frozen(_normalize_rows(policy)))

    def with_mu0(self, mu0) -> "ModelSpec":
        mu0 = as_dist(mu0, "mu0")
        if mu0.shape != (self.nx,):
            raise ModelError(f"mu0 shape {mu0.shape} ≠ ({self.nx},)")
        return replace(self, mu0=mu0)


def _check_shape(problems: list[str], name: str, arr, shape: tuple[int, ...]):
    try:
        a = np.asarray(arr, dtype=float)
    except (TypeError, ValueError):
        problems.append(f"ragged or non-numeric tensor at {name}")
        return None
    if a.size == 0 and int(np.prod(shape)) == 0:
        a = a.reshape(shape)
    if a.shape != shape:
        problems.append(f"shape mismatch at {name}: got {a.shape}, expected {shape}")
        return None
    return a


def model_from_dict(cfg: dict[str, Any]) -> ModelSpec:
    """Build a ModelSpec from a decoded config, collecting every violation."""
    if not isinstance(cfg, dict):
        raise ModelError("config must be a JSON object")
    problems: list[str] = []
    for key in cfg:
        if key not in _FIELDS:
            problems.append(f"unknown field {key!r}")
    for key in _REQUIRED:
        if key not in cfg:
            problems.append(f"missing field {key!r}")
    if problems:
        raise ModelError(problems)

    try:
        xs = Space.of(cfg["state_space"])
        as_ = Space.of(cfg["action_space"], prefix="a")
    except ModelError as exc:
        raise ModelError([f"state_space/action_space: {v}" for v in exc.violations]) from None
    T = cfg["horizon"]
    if not isinstance(T, numbers.Integral) or isinstance(T, bool) or T < 0:
        raise ModelError(f"horizon must be a nonnegative integer, got {T!r}")
    T = int(T)
    nx, na = xs.size, as_.size

    mu0 = _check_shape(problems, "mu0", cfg["mu0"], (nx,))
    if mu0 is not None:
        problems += _row_problems(mu0, "mu0")

    base = _check_shape(problems, "base_logits", cfg["base_logits"], (T, nx, na, nx))
    if base is not None:
        if np.any(np.isnan(base)) or np.any(base == np.inf):
            problems.append("base_logits must be finite or -inf")
        elif T > 0 and np.any(np.all(base == -np.inf, axis=-1)):
            problems.append("base_logits row entirely -inf")

    if cfg.get("mf_weights") is None:
        mfw = np.zeros((T, nx, na, nx, nx))
    else:
        mfw = _check_shape(problems, "mf_weights", cfg["mf_weights"], (T, nx, na, nx, nx))
        if mfw is not None and not np.all(np.isfinite(mfw)):
            problems.append("mf_weights must be finite")

    policy = cfg["policy"]
    if isinstance(policy, str):
        if policy != "solve":
            problems.append(f"policy must be a tensor or 'solve', got {policy!r}")
        policy = None
    else:
        policy = _check_shape(problems, "policy", policy, (T + 1, nx, na))
        if policy is not None:
            problems += _row_problems(policy, "policy")

    costs = cfg.get("costs")
    if costs is not None:
        costs = _check_shape(problems, "costs", costs, (T + 1, nx, na))
    mfc = cfg.get("mf_cost_weights")
    if mfc is not None:
        mfc = _check_shape(problems, "mf_cost_weights", mfc, (T + 1, nx, na, nx))
        if costs is None:
            problems.append("mf_cost_weights given without costs")
    if isinstance(cfg["policy"], str) and costs is None:
        problems.append("policy 'solve' requires costs")

    if problems:
        raise ModelError(problems)
    return ModelSpec(
        state_space=xs,
        action_space=as_,
        horizon=T,
        mu0=_frozen(_normalize_rows(mu0)),
        base_logits=_frozen(base),
        mf_weights=_frozen(mfw),
        policy=None if policy is None else _frozen(_normalize_rows(policy)),
        costs=None if costs is None else _frozen(costs),
        mf_cost_weights=None if mfc is None else _frozen(mfc),
    )


def make_model(
    states,
    actions,
    horizon: int,
    mu0,
    base_logits,
    mf_weights=None,
    policy="solve",
    costs=None,
    mf_cost_weights=None,
) -> ModelSpec:
    """Keyword-friendly constructor; ``states``/``actions`` may be sizes or label lists."""
    cfg = {
        "state_space": list(Space.of(states).labels),
        "action_space": list(Space.of(actions, prefix="a").labels),
        "horizon": horizon,
        "mu0": mu0,
        "base_logits": base_logits,
        "policy": policy if isinstance(policy, str) else np.asarray(policy, dtype=float),
    }
    if mf_weights is not None:
        cfg["mf_weights"] = mf_weights
    if costs is not None:
        cfg["costs"] = costs
    if mf_cost_weights is not None:
        cfg["mf_cost_weights"] = mf_cost_weights
    return model_from_dict(cfg)


def validate_model(raw_config: str) -> ModelSpec:
    """Parse JSON model config text and validate it."""
    try:
        cfg = json.loads(raw_config)
    except json.JSONDecodeError as exc:
        raise ConfigParseError(f"malformed JSON: {exc.msg}", exc.lineno, exc.colno) from None
    return model_from_dict(cfg)


def load_model(path) -> ModelSpec:
    with open(path, encoding="utf-8") as fh:
        return validate_model(fh.read())


def _tolist(a):
    return None if a is None else np.asarray(a).tolist()


def model_to_dict(model: ModelSpec) -> dict[str, Any]:
    d = {
        "state_space": list(model.state_space.labels),
        "action_space": list(model.action_space.labels),
        "horizon": model.horizon,
        "mu0": _tolist(model.mu0),
        "base_logits": _tolist(model.base_logits),
        "mf_weights": _tolist(model.mf_weights),
        "policy": "solve" if model.policy is None else _tolist(model.policy),
    }
    if model.costs is not None:
        d["costs"] = _tolist(model.costs)
    if model.mf_cost_weights is not None:
        d["mf_cost_weights"] = _tolist(model.mf_cost_weights)
    return d


# --- measures over E -------------------------------------------------------


def state_action(mu_x, policy_t) -> np.ndarray:
    """``mu (x) pi_t`` flattened over E."""
    mu_x = np.asarray(mu_x, dtype=float)
    return (mu_x[..., :, None] * np.asarray(policy_t)).reshape(mu_x.shape[:-1] + (-1,))


def marginal_x(nu, na: int) -> np.ndarray:
    nu = np.asarray(nu, dtype=float)
    return nu.reshape(nu.shape[:-1] + (-1, na)).sum(axis=-1)


def initial_pair(model: ModelSpec) -> np.ndarray:
    """``nu(0) = mu(0) (x) pi_0``."""
    return state_action(model.mu0, model.require_policy()[0])


# --- kernels ---------------------------------------------------------------


def _softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=-1, keepdims=True)


def transition_kernels(model: ModelSpec, mus, t: int) -> np.ndarray:
    """Batched ``p_t^mu``: ``mus`` of shape ``(..., |X|)`` -> ``(..., |X|, |A|, |X|)``.

    The mean-field term is accumulated one state at a time so a row's value
    does not depend on how many rows are evaluated together.
    """
    if not 0 <= t < model.horizon:
        raise ValueError(f"time {t} outside [0, {model.horizon})")
    mus = np.asarray(mus, dtype=float)
    base = model.base_logits[t]
    logits = np.broadcast_to(base, mus.shape[:-1] + base.shape).copy()
    w = model.mf_weights[t]
    for k in range(model.nx):
        if np.any(w[..., k]):
            logits += w[..., k] * mus[..., k, None, None, None]
    return _softmax(logits)


def transition_kernel(model: ModelSpec, mu, t: int) -> np.ndarray:
    """``p_t^mu`` as a Kernel from E (rows ``z = x*|A| + a``) to X."""
    mu = np.asarray(mu, dtype=float)
    if mu.shape != (model.nx,):
        raise ModelError(f"mu shape {mu.shape} ≠ ({model.nx},)")
    return transition_kernels(model, mu, t).reshape(model.ne, model.nx)


def kappa_from_state_kernel(state_kernel: np.ndarray, policy_next: np.ndarray) -> np.ndarray:
    """Compose ``p(x'|z)`` with ``pi(a'|x')`` into a kernel on E."""
    p = np.asarray(state_kernel)
    out = p[..., :, :, None] * np.asarray(policy_next)
    return out.reshape(p.shape[:-1] + (-1,))


def build_kappa(model: ModelSpec, nu, t: int) -> np.ndarray:
    """``kappa_t^nu((x',a')|(x,a)) = p_t^{nu_X}(x'|x,a) * pi_{t+1}(a'|x')``."""
    policy = model.require_policy()
    if t + 1 > model.horizon:
        raise ValueError(f"kappa needs t + 1 <= T, got t={t}, T={model.horizon}")
    p = transition_kernel(model, marginal_x(nu, model.na), t)
    return kappa_from_state_kernel(p, policy[t + 1])


def build_kappa_batch(model: ModelSpec, nus, t: int) -> np.ndarray:
    """``build_kappa`` over a stack of measures, shape ``(M, |E|)`` -> ``(M, |E|, |E|)``."""
    policy = model.require_policy()
    nus = np.asarray(nus, dtype=float)
    p = transition_kernels(model, marginal_x(nus, model.na), t)
    p = p.reshape(nus.shape[:-1] + (model.ne, model.nx))
    return kappa_from_state_kernel(p, policy[t + 1])


def gamma_map(model: ModelSpec, nu, t: int) -> np.ndarray:
    """The nonlinear one-step map ``nu -> nu kappa_t^nu``."""
    nu = np.asarray(nu, dtype=float)
    return nu @ build_kappa(model, nu, t)


def gamma_map_batch(model: ModelSpec, nus, t: int) -> np.ndarray:
    nus = np.asarray(nus, dtype=float)
    return np.einsum("mz,mzy->my", nus, build_kappa_batch(model, nus, t))


def mean_field_flow(
    model: ModelSpec,
    variant: str = "own",
    upto: int | None = None,
    nu=None,
    initial=None,
) -> np.ndarray:
    """State-action flow ``b(0..upto)`` of the infinite-population system.

    ``variant="own"`` feeds each step its own X-marginal; ``variant="simplified"``
    freezes the mean-field argument to the supplied flow ``nu``. ``initial``
    overrides ``mu(0) (x) pi_0``.
    """
    policy = model.require_policy()
    upto = model.horizon if upto is None else upto
    if not 0 <= upto <= model.horizon:
        raise ValueError(f"upto={upto} outside [0, {model.horizon}]")
    if variant not in ("own", "simplified"):
        raise ValueError(f"unknown variant {variant!r}")
    if variant == "simplified":
        if nu is None:
            raise ValueError("simplified variant needs a reference flow nu")
        nu = np.asarray(nu, dtype=float)
    b0 = state_action(model.mu0, policy[0]) if initial is None else np.asarray(initial, float)
    flow = [b0]
    for t in range(upto):
        driver = flow[t] if variant == "own" else nu[t]
        flow.append(flow[t] @ build_kappa(model, driver, t))
    return np.array(flow)
