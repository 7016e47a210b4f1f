"""Relative entropy, couplings, kernel reversal and entropic I-projections."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

INF = math.inf


def _lse(a: np.ndarray, axis: int) -> np.ndarray:
    """Log-sum-exp along ``axis`` for arrays whose slices hold at least one finite entry."""
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m), axis=axis)) + np.squeeze(m, axis=axis)
    return out


def relative_entropy(p, q) -> float:
    """``sum p log(p/q)`` with ``0 log 0 = 0``; ``inf`` when ``p`` is not dominated by ``q``."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError(f"dimension mismatch: {p.shape} vs {q.shape}")
    p, q = p.ravel(), q.ravel()
    support = p > 0
    if np.any(q[support] <= 0):
        return INF
    ps = p[support]
    return max(0.0, float(np.sum(ps * (np.log(ps) - np.log(q[support])))))


def joint_from(nu, kappa) -> np.ndarray:
    """``theta(z, z') = nu(z) kappa(z'|z)``."""
    nu = np.asarray(nu, dtype=float)
    kappa = np.asarray(kappa, dtype=float)
    if kappa.shape[0] != nu.shape[0]:
        raise ValueError(f"shape mismatch: nu {nu.shape}, kappa {kappa.shape}")
    return nu[:, None] * kappa


def reverse_kernel(theta) -> tuple[np.ndarray, np.ndarray]:
    """Disintegrate a coupling along its second coordinate.

    Returns ``(kbar, sigma)`` with ``sigma`` the second marginal and
    ``kbar[z', z] = theta[z, z'] / sigma[z']``. Rows with ``sigma[z'] = 0`` are
    set to uniform.
    """
    theta = np.asarray(theta, dtype=float)
    sigma = theta.sum(axis=0)
    kbar = np.empty(theta.T.shape)
    pos = sigma > 0
    kbar[pos] = theta.T[pos] / sigma[pos, None]
    kbar[~pos] = 1.0 / theta.shape[0]
    return kbar, sigma


def maximal_support(A: np.ndarray, b: np.ndarray, allowed: np.ndarray):
    """Largest support of a nonnegative solution of ``A x = b`` inside ``allowed``.

    Solves ``max sum s`` over ``A y = tau b``, ``0 <= s <= min(1, y)``,
    ``tau >= 1``; the feasible cone is closed under addition, so the optimum has
    ``s = 1`` exactly on the maximal support. Returns ``(mask, x)`` with ``x``
    positive on the mask, or ``None`` if ``A x = b`` has no solution.
    """
    idx = np.flatnonzero(allowed.ravel())
    n = idx.size
    if n == 0:
        return None
    Asub = A[:, idx]
    m = A.shape[0]
    # variables: y (n), s (n), tau (1)
    c = np.concatenate([np.zeros(n), -np.ones(n), [0.0]])
    A_eq = np.hstack([Asub, np.zeros((m, n)), -b[:, None]])
    b_eq = np.zeros(m)
    A_ub = np.hstack([-np.eye(n), np.eye(n), np.zeros((n, 1))])
    b_ub = np.zeros(n)
    bounds = [(0, None)] * n + [(0, 1)] * n + [(1, None)]
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq, bounds=bounds, method="highs")
    if res.status != 0:
        return None
    y, s, tau = res.x[:n], res.x[n : 2 * n], res.x[-1]
    keep = s > 0.5
    if not keep.any():
        return None
    mask = np.zeros(allowed.size, dtype=bool)
    mask[idx[keep]] = True
    x = np.zeros(allowed.size)
    x[idx[keep]] = y[keep] / tau
    return mask.reshape(allowed.shape), x.reshape(allowed.shape)


def _coupling_constraints(shape: tuple[int, int]) -> np.ndarray:
    n, m = shape
    rows = np.kron(np.eye(n), np.ones((1, m)))
    cols = np.kron(np.ones((1, n)), np.eye(m))
    return np.vstack([rows, cols])


@dataclass
class BridgeResult:
    coupling: np.ndarray
    value: float
    iterations: int
    marginal_error: float
    feasible: bool
    converged: bool
    dual_lower: float  # weak-duality lower bound on the optimal value


def _infeasible(shape) -> BridgeResult:
    return BridgeResult(np.zeros(shape), INF, 0, INF, False, True, INF)


def sinkhorn_bridge(reference, rho, sigma, tol: float = 1e-10, max_iter: int = 100_000) -> BridgeResult:
    """``min R(theta | reference)`` over couplings of ``rho`` and ``sigma``.

    Log-domain iterative proportional fitting; each sweep fits rows then
    columns, so on exit the column marginal is exact to rounding and the loop
    stops once the row L1 error drops below ``tol``.
    """
    K = np.asarray(reference, dtype=float)
    rho = np.asarray(rho, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if K.shape != (rho.size, sigma.size):
        raise ValueError(f"reference shape {K.shape} does not match marginals")
    if tol <= 0:
        raise ValueError("tol must be positive")

    if np.any(rho[K.sum(axis=1) <= 0] > 0) or np.any(sigma[K.sum(axis=0) <= 0] > 0):
        return _infeasible(K.shape)
    I = rho > 0
    J = sigma > 0
    support = (K > 0) & I[:, None] & J[None, :]
    if not support[np.ix_(I, J)].all():
        found = maximal_support(_coupling_constraints(K.shape), np.concatenate([rho, sigma]), support)
        if found is None:
            return _infeasible(K.shape)
        support = found[0]
        if np.any(rho[~support.any(axis=1)] > 0) or np.any(sigma[~support.any(axis=0)] > 0):
            return _infeasible(K.shape)

    sub = np.ix_(I, J)
    with np.errstate(divide="ignore"):
        L = np.where(support[sub], np.log(np.where(K[sub] > 0, K[sub], 1.0)), -np.inf)
    lr, ls = np.log(rho[I]), np.log(sigma[J])
    rho_i = rho[I]
    f = np.zeros(I.sum())
    g = np.zeros(J.sum())
    it = 0
    row_lse = _lse(L, axis=1)
    for it in range(1, max_iter + 1):
        f = lr - row_lse
        g = ls - _lse(L + f[:, None], axis=0)
        row_lse = _lse(L + g[None, :], axis=1)
        if float(np.abs(np.exp(row_lse + f) - rho_i).sum()) < tol:
            break

    P = np.zeros(K.shape)
    P[sub] = np.exp(L + f[:, None] + g[None, :])
    marginal_error = max(float(np.abs(P.sum(axis=1) - rho).sum()), float(np.abs(P.sum(axis=0) - sigma).sum()))
    dual = float(rho_i @ f + sigma[J] @ g - P.sum() + 1.0)
    return BridgeResult(
        coupling=P,
        value=relative_entropy(P, K),
        iterations=it,
        marginal_error=marginal_error,
        feasible=True,
        converged=marginal_error < tol,
        dual_lower=dual,
    )


# --- path measures ----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MarkovPathMeasure:
    """Initial law on E followed by one kernel per step; ``kernels[t][z, z']``."""

    initial: np.ndarray
    kernels: tuple[np.ndarray, ...]

    def __post_init__(self):
        object.__setattr__(self, "initial", np.asarray(self.initial, dtype=float))
        object.__setattr__(self, "kernels", tuple(np.asarray(k, dtype=float) for k in self.kernels))

    @property
    def horizon(self) -> int:
        return len(self.kernels)

    def marginals(self) -> np.ndarray:
        out = [self.initial]
        for K in self.kernels:
            out.append(out[-1] @ K)
        return np.array(out)

    def pair_marginals(self) -> list[np.ndarray]:
        m = self.marginals()
        return [joint_from(m[t], K) for t, K in enumerate(self.kernels)]

    def to_tensor(self) -> np.ndarray:
        """Dense law on ``E^{T+1}``, axis ``t`` indexing ``z(t)``."""
        P = self.initial
        for K in self.kernels:
            P = P[..., None] * K
        return P


def _pair_conditionals(pair: np.ndarray) -> np.ndarray:
    mass = pair.sum(axis=1, keepdims=True)
    out = np.full(pair.shape, 1.0 / pair.shape[1])
    pos = mass[:, 0] > 0
    out[pos] = pair[pos] / mass[pos]
    return out


def markovianize(joint) -> MarkovPathMeasure:
    """Markov law with the same initial marginal and consecutive-pair conditionals."""
    joint = np.asarray(joint, dtype=float)
    T = joint.ndim - 1
    axes = tuple(range(joint.ndim))
    initial = joint.sum(axis=axes[1:]) if T > 0 else joint.copy()
    kernels = []
    for t in range(T):
        pair = joint.sum(axis=tuple(a for a in axes if a not in (t, t + 1)))
        kernels.append(_pair_conditionals(pair))
    return MarkovPathMeasure(initial, tuple(kernels))


def time_marginal_constraints(ne: int, T: int) -> np.ndarray:
    """Rows ``(t, z)`` of the linear map taking a law on ``E^{T+1}`` to its time marginals."""
    grids = np.indices((ne,) * (T + 1)).reshape(T + 1, -1)
    A = np.zeros(((T + 1) * ne, ne ** (T + 1)))
    for t in range(T + 1):
        A[t * ne + grids[t], np.arange(grids.shape[1])] = 1.0
    return A


def i_project_exact(
    reference,
    marginals,
    max_size: int = 10_000,
    tol: float = 1e-15,
    max_iter: int = 500,
    return_solution: bool = False,
):
    """Full-simplex oracle for ``inf R(Lambda | reference)`` with fixed time marginals.

    Equality-constrained Newton's method on the dense joint law, started from a
    strictly positive feasible point. Intended for desk-scale checks only.
    """
    R = reference.to_tensor() if isinstance(reference, MarkovPathMeasure) else np.asarray(reference, float)
    marginals = np.asarray(marginals, dtype=float)
    T = R.ndim - 1
    ne = R.shape[0]
    if marginals.shape != (T + 1, ne):
        raise ValueError(f"marginals shape {marginals.shape} ≠ {(T + 1, ne)}")
    if R.size > max_size:
        raise ValueError(f"instance too large: |E|^(T+1) = {R.size} > {max_size}")

    r = R.ravel()
    A = time_marginal_constraints(ne, T)
    b = marginals.ravel()
    allowed = r > 0
    grids = np.indices((ne,) * (T + 1)).reshape(T + 1, -1)
    for t in range(T + 1):
        allowed &= marginals[t][grids[t]] > 0

    prod = np.ones(r.size)
    for t in range(T + 1):
        prod = prod * marginals[t][grids[t]]
    if np.array_equal(allowed, prod > 0):
        mask, x0 = allowed, prod
    else:
        found = maximal_support(A, b, allowed)
        if found is None:
            return (INF, None) if return_solution else INF
        mask, x0 = found
    S = np.flatnonzero(mask)
    A_S = A[:, S]
    logr = np.log(r[S])
    x = x0[S].copy()

    def objective(v):
        return float(np.sum(v * (np.log(v) - logr)))

    for _ in range(max_iter):
        grad = np.log(x) - logr + 1.0
        rp = b - A_S @ x
        AX = A_S * x
        w = np.linalg.lstsq(AX @ A_S.T, -rp - AX @ grad, rcond=None)[0]
        dx = -x * (grad + A_S.T @ w)
        dec = float(np.sum(dx * dx / x))
        feasible = float(np.abs(rp).sum()) < 1e-13
        if feasible and dec < tol:
            break
        neg = dx < 0
        step = min(1.0, 0.95 * float(np.min(-x[neg] / dx[neg]))) if neg.any() else 1.0
        if feasible:
            f0, slope = objective(x), float(grad @ dx)
            while objective(x + step * dx) > f0 + 0.25 * step * slope and step > 1e-12:
                step *= 0.5
        x = x + step * dx
    full = np.zeros(r.size)
    full[S] = x
    value = relative_entropy(full, r)
    if return_solution:
        return value, full.reshape(R.shape)
    return value
