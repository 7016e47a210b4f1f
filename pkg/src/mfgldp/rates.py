"""Rate functions of the empirical state-action process.

* ``v_rate``: closed form ``R(g0|nu0) + sum_t R(g_{t+1} | Gamma_t(g_t))``.
* ``j_rate``: ``inf R(Lambda | reference path law)`` over path laws with the
  given time marginals. The reference is Markov and the constraints are
  single-time marginals, so the infimum splits into one static bridge per step.
* ``prop1_residual``: the same infimum against the time-reversed factorization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, NamedTuple

import numpy as np
from scipy.optimize import minimize, minimize_scalar
from scipy.special import logsumexp

from .entropy import (
    INF,
    MarkovPathMeasure,
    joint_from,
    relative_entropy,
    reverse_kernel,
    sinkhorn_bridge,
)
from .model import (
    ModelSpec,
    build_kappa,
    gamma_map,
    gamma_map_batch,
    initial_pair,
    mean_field_flow,
)


@dataclass
class RateReport:
    value: float
    terms: list[float]
    diagnostics: dict[str, Any] = field(default_factory=dict)

    @property
    def finite(self) -> bool:
        return math.isfinite(self.value)

    def to_dict(self) -> dict[str, Any]:
        from .io import to_jsonable

        return to_jsonable({"value": self.value, "terms": self.terms, "diagnostics": self.diagnostics})


def _total(terms) -> float:
    return INF if any(math.isinf(t) for t in terms) else float(sum(terms))


def _check_flow(model: ModelSpec, gamma) -> np.ndarray:
    gamma = np.asarray(gamma, dtype=float)
    if gamma.ndim != 2 or gamma.shape[1] != model.ne:
        raise ValueError(f"flow must have shape (T+1, {model.ne}), got {gamma.shape}")
    if gamma.shape[0] - 1 > model.horizon:
        raise ValueError(f"flow length {gamma.shape[0]} exceeds horizon {model.horizon} + 1")
    return gamma


def reference_path_measure(model: ModelSpec, gamma) -> MarkovPathMeasure:
    """``nu(0) (x) kappa_0^{g0} (x) ... (x) kappa_{T-1}^{g_{T-1}}``."""
    gamma = _check_flow(model, gamma)
    kernels = tuple(build_kappa(model, gamma[t], t) for t in range(gamma.shape[0] - 1))
    return MarkovPathMeasure(initial_pair(model), kernels)


def v_rate(model: ModelSpec, gamma, kernel_builder: Callable | None = None) -> RateReport:
    gamma = _check_flow(model, gamma)
    step = gamma_map if kernel_builder is None else (lambda m, nu, t: nu @ kernel_builder(m, nu, t))
    terms = [relative_entropy(gamma[0], initial_pair(model))]
    for t in range(gamma.shape[0] - 1):
        terms.append(relative_entropy(gamma[t + 1], step(model, gamma[t], t)))
    return RateReport(_total(terms), terms)


def _bridge_report(initial_term, bridges, extra=None) -> RateReport:
    terms = ([initial_term] if initial_term is not None else []) + [b.value for b in bridges]
    diag = {
        "iterations": [b.iterations for b in bridges],
        "marginal_errors": [b.marginal_error for b in bridges],
        "feasible": [b.feasible for b in bridges],
        "converged": all(b.converged for b in bridges),
    }
    if not diag["converged"]:
        lower = (initial_term or 0.0) + sum(b.dual_lower for b in bridges)
        diag["bracket"] = [lower, _total(terms)]
    if extra:
        diag.update(extra)
    return RateReport(_total(terms), terms, diag)


def j_rate(model: ModelSpec, gamma, tol: float = 1e-10, max_iter: int = 100_000) -> RateReport:
    """Terms: ``[R(g0|nu0), bridge_0, ..., bridge_{T-1}]``."""
    gamma = _check_flow(model, gamma)
    bridges = []
    for t in range(gamma.shape[0] - 1):
        ref = joint_from(gamma[t], build_kappa(model, gamma[t], t))
        bridges.append(sinkhorn_bridge(ref, gamma[t], gamma[t + 1], tol=tol, max_iter=max_iter))
    return _bridge_report(relative_entropy(gamma[0], initial_pair(model)), bridges)


def reversed_reference(model: ModelSpec, gamma) -> MarkovPathMeasure:
    """``g_T (x) kbar_{T-1} (x) ... (x) kbar_0`` in reversed time order."""
    gamma = _check_flow(model, gamma)
    kbars = [reverse_kernel(joint_from(gamma[t], build_kappa(model, gamma[t], t)))[0] for t in range(gamma.shape[0] - 1)]
    return MarkovPathMeasure(gamma[-1], tuple(reversed(kbars)))


def prop1_residual(model: ModelSpec, gamma, tol: float = 1e-10, max_iter: int = 100_000) -> RateReport:
    """Terms: one reversed-time bridge per step, listed in forward time order."""
    gamma = _check_flow(model, gamma)
    T = gamma.shape[0] - 1
    if T == 0:
        return RateReport(0.0, [0.0])
    bridges = []
    for t in range(T):
        kbar, _ = reverse_kernel(joint_from(gamma[t], build_kappa(model, gamma[t], t)))
        ref = joint_from(gamma[t + 1], kbar)
        bridges.append(sinkhorn_bridge(ref, gamma[t + 1], gamma[t], tol=tol, max_iter=max_iter))
    return _bridge_report(None, bridges)


def path_rate(model: ModelSpec, phi: MarkovPathMeasure) -> RateReport:
    """``R(phi | nu(0) (x) kappa_0^{phi_0} (x) ...)`` by the chain rule over factors."""
    marg = phi.marginals()
    terms = [relative_entropy(phi.initial, initial_pair(model))]
    for t, K in enumerate(phi.kernels):
        ref = build_kappa(model, marg[t], t)
        step = 0.0
        for z in np.flatnonzero(marg[t] > 0):
            step += marg[t][z] * relative_entropy(K[z], ref[z])
        terms.append(step)
    return RateReport(_total(terms), terms)


# --- Donsker-Varadhan lower bounds ------------------------------------------


def simplex_grid(ne: int, resolution: int) -> np.ndarray:
    """All points of the simplex with coordinates in ``{0, 1/r, ..., 1}``."""
    if resolution < 1:
        raise ValueError("resolution must be at least 1")
    if ne == 1:
        return np.ones((1, 1))
    pts = []

    def rec(prefix, remaining, slots):
        if slots == 1:
            pts.append(prefix + [remaining])
            return
        for k in range(remaining + 1):
            rec(prefix + [k], remaining - k, slots - 1)

    if ne == 2:
        k = np.arange(resolution + 1)
        return np.stack([k, resolution - k], axis=1) / resolution
    rec([], resolution, ne)
    return np.array(pts, dtype=float) / resolution


def _rel_entropy_rows(P: np.ndarray, q: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(P > 0, P * (np.log(P) - np.log(q)), 0.0)
    out = terms.sum(axis=1)
    out[np.any((P > 0) & (q <= 0), axis=1)] = INF
    return np.maximum(out, 0.0)


def dv_lower_bound(
    model: ModelSpec,
    gamma,
    t: int,
    g_family,
    simplex_grid_resolution: int = 1000,
    refine: bool = True,
) -> RateReport:
    """Finite-family, gridded Donsker-Varadhan recursion for ``V_t(gamma)``.

    ``Vhat_0 = R(. | nu0)`` and
    ``Vhat_s(g) = max_g [<g, gamma> + min_nu (Vhat_{s-1}(nu) - log <e^g, Gamma_{s-1}(nu)>)]``.
    The inner infimum does not depend on ``gamma``, so each level reduces to
    one constant per test function. For ``|E| = 2`` the grid minimum is polished
    by a bounded scalar search around the best grid cell.
    Terms list ``Vhat_s(gamma)`` for ``s = 0..t``; ``diagnostics["grid_error"]``
    is the largest gap between the grid minimum and its refinement (or, without
    refinement, the spread to neighbouring grid points).
    """
    gamma = np.asarray(gamma, dtype=float)
    G = np.atleast_2d(np.asarray(g_family, dtype=float))
    if G.shape[1] != model.ne:
        raise ValueError(f"test functions must have {model.ne} entries")
    if simplex_grid_resolution < 1:
        raise ValueError("simplex grid resolution must be at least 1")
    if model.ne > 3:
        raise ValueError("grid lower bound supports |E| <= 3")
    nu0 = initial_pair(model)
    grid = simplex_grid(model.ne, simplex_grid_resolution)

    def v0(P):
        return _rel_entropy_rows(np.atleast_2d(P), nu0)

    levels: list[np.ndarray] = []  # constants m_s[g] for s = 1..t

    def vhat(s, P):
        P = np.atleast_2d(P)
        if s == 0:
            return v0(P)
        return np.max(P @ G.T + levels[s - 1][None, :], axis=1)

    grid_error = 0.0
    for s in range(1, t + 1):
        base = vhat(s - 1, grid)
        logG = np.log(np.maximum(gamma_map_batch(model, grid, s - 1), 0.0))
        consts = np.empty(len(G))
        for j, g in enumerate(G):
            with np.errstate(invalid="ignore"):
                h = base - logsumexp(g[None, :] + logG, axis=1)
            k = int(np.argmin(h))
            best = float(h[k])
            if refine and model.ne == 2:

                def obj(p, g=g, s=s):
                    nu = np.array([p, 1.0 - p])
                    val = vhat(s - 1, nu)[0]
                    return val - float(logsumexp(g + np.log(np.maximum(gamma_map(model, nu, s - 1), 0.0))))

                lo, hi = grid[max(k - 1, 0), 0], grid[min(k + 1, len(grid) - 1), 0]
                lo, hi = min(lo, hi), max(lo, hi)
                res = minimize_scalar(obj, bounds=(lo, hi), method="bounded", options={"xatol": 1e-13})
                if res.fun < best:
                    grid_error = max(grid_error, best - float(res.fun))
                    best = float(res.fun)
            else:
                finite = np.isfinite(h)
                spread = np.abs(np.diff(np.where(finite, h, best)))
                if spread.size:
                    grid_error = max(grid_error, float(np.max(spread)))
            consts[j] = best
        levels.append(consts)
    terms = [float(vhat(s, gamma)[0]) for s in range(t + 1)]
    return RateReport(terms[-1], terms, {"grid_points": len(grid), "grid_error": grid_error, "n_test_functions": len(G)})


# --- infima over flows -------------------------------------------------------


class FlowSearch(NamedTuple):
    value: float
    witness: np.ndarray
    exhausted: bool


def _softmax_rows(theta: np.ndarray, ne: int) -> np.ndarray:
    th = theta.reshape(-1, ne)
    th = th - th.max(axis=1, keepdims=True)
    e = np.exp(th)
    return e / e.sum(axis=1, keepdims=True)


def marginal_j_rate(
    model: ModelSpec,
    gamma_t,
    t: int,
    starts: int = 4,
    seed: int = 0,
    grid: int | None = None,
    tol: float = 1e-12,
) -> FlowSearch:
    """``J_t(gamma) = inf over g_0..g_{t-1}`` of ``j_rate(g_0, ..., g_{t-1}, gamma)``.

    For ``|E| = 2`` and ``t <= 2`` a grid over the free coordinates seeds
    Nelder-Mead runs on those coordinates; otherwise the starts are the
    mean-field prefix plus random flows, searched in softmax coordinates.
    ``value`` upper-bounds the true infimum.
    """
    gamma_t = np.asarray(gamma_t, dtype=float)
    ne = model.ne
    if t == 0:
        return FlowSearch(relative_entropy(gamma_t, initial_pair(model)), gamma_t[None, :], False)

    def value_of(prefix):
        return j_rate(model, np.vstack([prefix, gamma_t[None, :]]), tol=tol).value

    def penalized(v):
        return v if math.isfinite(v) else 1e6

    candidates = [mean_field_flow(model, upto=t)[:t]]
    if ne == 2 and t <= 2:
        n = grid or (101 if t == 1 else 21)
        p = np.linspace(0.0, 1.0, n)
        mesh = np.stack(np.meshgrid(*([p] * t), indexing="ij"), axis=-1).reshape(-1, t)
        vals = np.array([value_of(np.stack([q, 1 - q], axis=-1)) for q in mesh])
        order = np.argsort(vals, kind="stable")[:starts]
        candidates += [np.stack([mesh[i], 1 - mesh[i]], axis=-1) for i in order]

        def to_prefix(q):
            q = np.clip(q, 0.0, 1.0)
            return np.stack([q, 1 - q], axis=-1)

        def objective(q):
            return penalized(value_of(to_prefix(q)))

        x0s = [c[:, 0] for c in candidates]
        method, decode = "Nelder-Mead", to_prefix
        opts = {"xatol": 1e-9, "fatol": 1e-13, "maxiter": 400 * t}
    else:
        rng = np.random.default_rng(seed)
        while len(candidates) < starts + 1:
            candidates.append(rng.dirichlet(np.ones(ne), size=t))

        def decode(theta):
            return _softmax_rows(theta, ne)

        def objective(theta):
            return penalized(value_of(decode(theta)))

        x0s = [np.log(np.clip(c, 1e-12, None)).ravel() for c in candidates]
        method = "BFGS"
        opts = {"gtol": 1e-9, "maxiter": 300}

    best_val, best_flow, exhausted = INF, None, False
    for cand, x0 in zip(candidates, x0s):
        res = minimize(objective, x0, method=method, options=opts)
        flow = decode(res.x)
        val = value_of(flow)
        direct = value_of(cand)
        if direct < val:
            val, flow = direct, cand
        if val < best_val:
            best_val, best_flow = val, flow
            exhausted = res.status == (2 if method == "Nelder-Mead" else 1)
    witness = np.vstack([best_flow, gamma_t[None, :]])
    return FlowSearch(best_val, witness, exhausted)


def _project_into_ball(gamma, target, epsilon):
    d = float(np.abs(gamma - target).sum())
    if d <= epsilon:
        return gamma
    return target + (gamma - target) * (epsilon / d) * (1 - 1e-9)


def ball_rate_inf(
    model: ModelSpec,
    target,
    epsilon: float,
    t: int,
    search_budget: int = 8,
    seed: int = 0,
    tol: float = 1e-12,
    rate: str = "j",
) -> FlowSearch:
    """Approximate ``inf { J_t(g_0..g_t) : |g_t - target|_1 <= epsilon }``.

    ``rate="v"`` minimizes ``V_t`` instead of ``J_t``.

    SLSQP over the flow simplices with the L1 ball written through slack
    variables ``d >= |g_t - target|``, ``sum d <= epsilon``. Starts: the mean-field
    flow pulled into the ball, grid seeds when ``|E| = 2`` and ``t <= 1``, and
    random flows. ``value`` upper-bounds the true infimum.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if rate not in ("j", "v"):
        raise ValueError(f"rate must be 'j' or 'v', got {rate!r}")

    def rate_of(g, tol=tol):
        return j_rate(model, g, tol=tol).value if rate == "j" else v_rate(model, g).value

    target = np.asarray(target, dtype=float)
    ne = model.ne
    flow = mean_field_flow(model, upto=t)
    if np.abs(flow[t] - target).sum() <= epsilon:
        return FlowSearch(rate_of(flow), flow, False)
    if epsilon >= 2:
        return FlowSearch(rate_of(flow), flow, False)

    nvar = (t + 1) * ne

    def unpack(x):
        return x[:nvar].reshape(t + 1, ne)

    def objective(x):
        g = np.clip(unpack(x), 0.0, None)
        g = g / g.sum(axis=1, keepdims=True)
        v = rate_of(g)
        return v if math.isfinite(v) else 1e6

    cons = [
        {"type": "eq", "fun": lambda x: unpack(x).sum(axis=1) - 1.0},
        {"type": "ineq", "fun": lambda x: x[nvar:] - (unpack(x)[t] - target)},
        {"type": "ineq", "fun": lambda x: x[nvar:] + (unpack(x)[t] - target)},
        {"type": "ineq", "fun": lambda x: epsilon - x[nvar:].sum()},
    ]
    bounds = [(1e-12, 1.0)] * nvar + [(0.0, 2.0)] * ne

    starts = []
    f0 = flow.copy()
    f0[t] = _project_into_ball(flow[t], target, epsilon)
    starts.append(f0)
    if ne == 2 and t <= 1:
        lo = max(0.0, target[0] - epsilon / 2)
        hi = min(1.0, target[0] + epsilon / 2)
        p_last = np.linspace(lo, hi, 9)
        p_prev = np.linspace(0.0, 1.0, 41) if t == 1 else [None]
        scored = []
        for a in p_prev:
            for b in p_last:
                rows = ([[a, 1 - a]] if a is not None else []) + [[b, 1 - b]]
                g = np.array(rows)
                scored.append((rate_of(g, 1e-10), g))
        scored.sort(key=lambda s: s[0])
        starts += [g for _, g in scored[: max(1, search_budget // 2)]]
    rng = np.random.default_rng(seed)
    while len(starts) < search_budget:
        g = rng.dirichlet(np.ones(ne), size=t + 1)
        g[t] = _project_into_ball(g[t], target, epsilon)
        starts.append(g)

    best_val, best_flow, exhausted = INF, None, False
    for g in starts:
        x0 = np.concatenate([g.ravel(), np.abs(g[t] - target) + 1e-12])
        res = minimize(objective, x0, method="SLSQP", bounds=bounds, constraints=cons,
                       options={"ftol": 1e-14, "maxiter": 300, "eps": 1e-8})
        cand = np.clip(unpack(res.x), 0.0, None)
        cand = cand / cand.sum(axis=1, keepdims=True)
        if np.abs(cand[t] - target).sum() > epsilon + 1e-9:
            cand = g
        val = rate_of(cand)
        start_val = rate_of(g)
        if start_val < val:
            val, cand = start_val, g
        if val < best_val:
            best_val, best_flow = val, cand
            exhausted = res.status == 9
    return FlowSearch(best_val, best_flow, exhausted)
