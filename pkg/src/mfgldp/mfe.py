"""Finite-horizon mean-field equilibrium by damped fixed-point iteration."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelError, ModelSpec, state_action, transition_kernel

TIE_RTOL = 1e-12


@dataclass
class MFEResult:
    policy: np.ndarray  # (T+1, |X|, |A|), deterministic
    flow: np.ndarray  # (T+1, |E|) state-action flow induced by ``policy``
    state_flow: np.ndarray  # (T+1, |X|)
    iterations: int
    residual: float
    converged: bool


def stage_costs(model: ModelSpec, mu, t: int) -> np.ndarray:
    c = np.array(model.costs[t], dtype=float)
    if model.mf_cost_weights is not None:
        c = c + model.mf_cost_weights[t] @ np.asarray(mu, dtype=float)
    return c


def best_response(model: ModelSpec, state_flow) -> tuple[np.ndarray, np.ndarray]:
    """Backward induction on the total cost ``sum_{t=0}^T c_t`` against a fixed flow.

    Returns a deterministic policy (ties go to the lowest action index) and the
    value function ``V[t, x]``.
    """
    if model.costs is None:
        raise ModelError("best response needs costs")
    T, nx, na = model.horizon, model.nx, model.na
    policy = np.zeros((T + 1, nx, na))
    values = np.zeros((T + 2, nx))
    for t in range(T, -1, -1):
        q = stage_costs(model, state_flow[t], t)
        if t < T:
            p = transition_kernel(model, state_flow[t], t).reshape(nx, na, nx)
            q = q + p @ values[t + 1]
        qmin = q.min(axis=1, keepdims=True)
        ties = q <= qmin + TIE_RTOL * (1.0 + np.abs(qmin))
        best = ties.argmax(axis=1)
        policy[t, np.arange(nx), best] = 1.0
        values[t] = q[np.arange(nx), best]
    return policy, values[: T + 1]


def induced_state_flow(model: ModelSpec, policy) -> np.ndarray:
    """State distributions of the mean-field system when every agent uses ``policy``."""
    mu = [np.asarray(model.mu0, dtype=float)]
    for t in range(model.horizon):
        p = transition_kernel(model, mu[t], t)
        mu.append(state_action(mu[t], policy[t]) @ p)
    return np.array(mu)


def solve_mfe(
    model: ModelSpec,
    damping: float = 0.5,
    tol: float = 1e-10,
    max_iter: int = 1000,
) -> MFEResult:
    """Iterate best response / induced flow with damping on the flow.

    Stops once the flow induced by the best response is within ``tol`` (max over
    t of the L1 distance) of the flow it responds to. On non-convergence the
    iterate with the smallest residual is returned with ``converged=False``.
    """
    if not 0 < damping <= 1:
        raise ValueError("damping must lie in (0, 1]")
    if model.costs is None:
        raise ModelError("solve_mfe needs costs")
    na = model.na
    start = np.full((model.horizon + 1, model.nx, na), 1.0 / na)
    mu = induced_state_flow(model, start)
    best = None
    for it in range(1, max_iter + 1):
        policy, _ = best_response(model, mu)
        induced = induced_state_flow(model, policy)
        residual = float(np.abs(induced - mu).sum(axis=1).max())
        if best is None or residual < best[2]:
            best = (policy, induced, residual, it)
        if residual < tol:
            break
        mu = (1.0 - damping) * mu + damping * induced
    policy, induced, residual, _ = best
    converged = residual < tol
    flow = np.array([state_action(induced[t], policy[t]) for t in range(model.horizon + 1)])
    return MFEResult(
        policy=policy,
        flow=flow,
        state_flow=induced,
        iterations=it if converged else max_iter,
        residual=residual,
        converged=converged,
    )
