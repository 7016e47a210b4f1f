"""Seeded N-particle simulation, empirical measures and Monte Carlo estimators.

Stream layout (per replication ``r`` and particle ``i``; see ``noise``):

* ``(time=0, STATE)``: initial state draw from ``mu(0)``.
* ``(time=t, ACTION)``: action ``a(t)`` from ``pi_t(.|x(t))``.
* ``(time=t, ANCESTOR)``: ancestor index ``floor(u * N)`` for the step
  ``t -> t+1`` (ancestor variant only).
* ``(time=t+1, STATE)``: the transition variate ``w(t)`` producing ``x(t+1)``.

States and actions are drawn by inverse-CDF in label order, so
``x(t+1) = F_t(x, a, e^N(t), w)`` and ``a(t) = G_t(x, v)`` are concrete maps.
"""

from __future__ import annotations

import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .model import ModelError, ModelSpec, mean_field_flow, transition_kernels
from .noise import ACTION, ANCESTOR, N_ROLES, STATE, NoiseDriver, _fold

VARIANTS = ("own", "ancestor")
HIT_ATOL = 1e-12
WILSON_Z = 1.959963984540054
CHUNK_CELLS = 1 << 21  # particles per batch (replications x N)


def _check_variant(variant: str) -> str:
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
    return variant


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("MFGLDP_THREADS", "1")))
    except ValueError:
        return 1


def inverse_cdf(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Smallest index ``k`` with ``u < cdf[k]``, cumulating in label order."""
    cdf = np.cumsum(probs, axis=-1)
    cdf = cdf / cdf[..., -1:]
    return (cdf <= u[..., None]).sum(axis=-1)


def action_map(model: ModelSpec, t: int, x, v, policy=None) -> np.ndarray:
    """``G_t(x, v)``: action index for state ``x`` and uniform ``v``."""
    policy = model.require_policy() if policy is None else policy
    return inverse_cdf(policy[t][np.asarray(x)], np.asarray(v))


def state_map(model: ModelSpec, t: int, x, a, mu_x, w) -> np.ndarray:
    """``F_t(x, a, mu, w)``: next state from source pair ``(x, a)`` under mean field ``mu``.

    ``mu_x`` is ``(..., |X|)`` and broadcasts against a leading batch axis of ``x``.
    """
    mu_x = np.asarray(mu_x, dtype=float)
    p = transition_kernels(model, mu_x, t)  # (..., nx, na, nx)
    x, a = np.asarray(x), np.asarray(a)
    if mu_x.ndim == 1:
        rows = p[x, a]
    else:
        lead = np.arange(mu_x.shape[0]).reshape((-1,) + (1,) * (x.ndim - 1))
        rows = p[lead, x, a]
    return inverse_cdf(rows, np.asarray(w))


def _counts(states: np.ndarray, actions: np.ndarray, nx: int, na: int) -> np.ndarray:
    """Per-row state-action counts, ``(R, N)`` indices -> ``(R, |E|)`` int64."""
    R = states.shape[0]
    z = states.astype(np.int64) * na + actions + (np.arange(R)[:, None] * (nx * na))
    return np.bincount(z.ravel(), minlength=R * nx * na).reshape(R, nx * na)


@dataclass
class _Batch:
    counts: np.ndarray  # (R, t_max + 1, |E|)
    states: np.ndarray | None = None  # (R, N, t_max + 1)
    actions: np.ndarray | None = None
    noise: np.ndarray | None = None  # (R, N, t_max + 1, 3)


def _run_batch(
    model: ModelSpec,
    policy: np.ndarray,
    N: int,
    driver: NoiseDriver,
    reps: np.ndarray,
    t_max: int,
    variant: str,
    record: bool,
    particle_ids: np.ndarray | None = None,
) -> _Batch:
    nx, na, ne = model.nx, model.na, model.ne
    R = reps.size
    ids = np.arange(N, dtype=np.uint64) if particle_ids is None else np.asarray(particle_ids, dtype=np.uint64)
    keys = driver.particle_keys(reps[:, None].astype(np.uint64), ids[None, :])
    counts = np.zeros((R, t_max + 1, ne), dtype=np.int64)
    if record:
        S = np.zeros((R, N, t_max + 1), dtype=np.int32)
        A = np.zeros((R, N, t_max + 1), dtype=np.int32)
        W = np.full((R, N, t_max + 1, N_ROLES), np.nan)

    w = driver.draw(keys, 0, STATE)
    x = inverse_cdf(model.mu0, w)
    for t in range(t_max + 1):
        if na == 1 and not record:
            a = np.zeros_like(x)
        else:
            v = driver.draw(keys, t, ACTION)
            a = action_map(model, t, x, v, policy)
        if record:
            S[:, :, t], A[:, :, t] = x, a
            W[:, :, t, STATE], W[:, :, t, ACTION] = w, v
        c = _counts(x, a, nx, na)
        counts[:, t] = c
        if t == t_max:
            break
        e = c.reshape(R, nx, na).sum(axis=2) / N
        if variant == "ancestor":
            u = driver.draw(keys, t, ANCESTOR)
            j = np.minimum((u * N).astype(np.int64), N - 1)
            src_x = np.take_along_axis(x, j, axis=1)
            src_a = np.take_along_axis(a, j, axis=1)
            if record:
                W[:, :, t, ANCESTOR] = u
        else:
            src_x, src_a = x, a
        w = driver.draw(keys, t + 1, STATE)
        x = state_map(model, t, src_x, src_a, e, w)
    if record:
        return _Batch(counts, S, A, W)
    return _Batch(counts)


def _chunks(reps: np.ndarray, N: int) -> list[np.ndarray]:
    per = max(1, CHUNK_CELLS // max(N, 1))
    return [reps[i : i + per] for i in range(0, reps.size, per)]


def simulate_counts(
    model: ModelSpec,
    N: int,
    reps: int | Sequence[int],
    seed: int,
    variant: str = "own",
    t_max: int | None = None,
    policy=None,
    workers: int | None = None,
) -> np.ndarray:
    """State-action counts ``N * b^N(t)`` for many replications, shape ``(R, t_max+1, |E|)``.

    Replication ``r`` uses substream ``r`` of the master seed, so the result
    for a given replication does not depend on batching or worker count.
    """
    _check_variant(variant)
    if N < 1:
        raise ValueError("N must be at least 1")
    policy = model.require_policy() if policy is None else np.asarray(policy, dtype=float)
    t_max = model.horizon if t_max is None else t_max
    if not 0 <= t_max <= model.horizon:
        raise ValueError(f"t_max={t_max} outside [0, {model.horizon}]")
    rep_ids = np.arange(reps, dtype=np.int64) if np.isscalar(reps) else np.asarray(reps, dtype=np.int64)
    driver = NoiseDriver(seed)
    parts = _chunks(rep_ids, N)
    workers = default_workers() if workers is None else max(1, int(workers))

    def job(chunk):
        return _run_batch(model, policy, N, driver, chunk, t_max, variant, False).counts

    if workers == 1 or len(parts) == 1:
        out = [job(c) for c in parts]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(job, parts))
    if not out:
        return np.zeros((0, t_max + 1, model.ne), dtype=np.int64)
    return np.concatenate(out, axis=0)


# --- traces -----------------------------------------------------------------


@dataclass
class EmpiricalFlow:
    """``b^N(t) = counts[t] / N``; ``paths`` optionally lists each particle's (states, actions)."""

    counts: np.ndarray  # (T+1, |E|) int64
    N: int
    paths: list[tuple[tuple[int, ...], tuple[int, ...]]] | None = None

    @property
    def weights(self) -> np.ndarray:
        return self.counts / self.N

    def state_marginals(self, na: int) -> np.ndarray:
        return self.counts.reshape(self.counts.shape[0], -1, na).sum(axis=2) / self.N


@dataclass
class EnsembleTrace:
    N: int
    T: int
    states: np.ndarray  # (N, T+1) int32
    actions: np.ndarray  # (N, T+1) int32
    noise: np.ndarray  # (N, T+1, 3) float64; NaN where a role is not consumed
    seed: int
    variant: str
    replication: int = 0
    counts: np.ndarray | None = field(default=None, repr=False)  # recorded N b^N(t)


def simulate(
    model: ModelSpec,
    policy=None,
    N: int = 100,
    seed: int = 0,
    variant: str = "own",
    replication: int = 0,
    paths: bool = False,
    particle_ids=None,
) -> tuple[EnsembleTrace, EmpiricalFlow]:
    """One replication over the full horizon, with every variate recorded.

    ``particle_ids`` (a permutation of ``range(N)``) reassigns the noise
    substreams to particle slots.
    """
    _check_variant(variant)
    if N < 1:
        raise ValueError("N must be at least 1")
    if particle_ids is not None and sorted(np.asarray(particle_ids).tolist()) != list(range(N)):
        raise ValueError("particle_ids must be a permutation of range(N)")
    policy = model.require_policy() if policy is None else np.asarray(policy, dtype=float)
    b = _run_batch(model, policy, N, NoiseDriver(seed), np.array([replication]), model.horizon, variant, True,
                   particle_ids)
    trace = EnsembleTrace(
        N=N,
        T=model.horizon,
        states=b.states[0],
        actions=b.actions[0],
        noise=b.noise[0],
        seed=int(seed),
        variant=variant,
        replication=int(replication),
        counts=b.counts[0],
    )
    plist = None
    if paths:
        plist = [(tuple(map(int, s)), tuple(map(int, a))) for s, a in zip(trace.states, trace.actions)]
    return trace, EmpiricalFlow(b.counts[0], N, plist)


def empirical_flow(trace: EnsembleTrace, nx: int, na: int) -> EmpiricalFlow:
    """Counts recomputed from the recorded states and actions."""
    S, A = trace.states.T, trace.actions.T  # (T+1, N)
    return EmpiricalFlow(_counts(S, A, nx, na), trace.N)


class PhiCheck(NamedTuple):
    ok: bool
    discrepancy: float
    particle: int | None
    time: int | None


def phi_map(model: ModelSpec, initial_states, noise, policy=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Push the empirical law of ``(x(0), w, v)`` through the mean-field recursion.

    With ``Q`` the uniform law on the N recorded ``(x_i(0), w_i, v_i)``, the
    state law at each time is the law of ``x(t)`` under ``Q`` and the next
    states are ``F_t(x, G_t(x, v), Law(x(t)), w)``. Returns the recomputed
    states, actions and state-action counts.
    """
    policy = model.require_policy() if policy is None else policy
    x = np.asarray(initial_states, dtype=np.int64)
    noise = np.asarray(noise, dtype=float)
    N, T1 = x.size, noise.shape[1]
    nx, na = model.nx, model.na
    S = np.zeros((N, T1), dtype=np.int64)
    A = np.zeros((N, T1), dtype=np.int64)
    counts = np.zeros((T1, model.ne), dtype=np.int64)
    for t in range(T1):
        a = action_map(model, t, x, noise[:, t, ACTION], policy)
        S[:, t], A[:, t] = x, a
        c = _counts(x[None, :], a[None, :], nx, na)[0]
        counts[t] = c
        if t + 1 < T1:
            law = c.reshape(nx, na).sum(axis=1) / N
            x = state_map(model, t, x, a, law, noise[:, t + 1, STATE])
    return S, A, counts


def phi_check(model: ModelSpec, trace: EnsembleTrace, policy=None) -> PhiCheck:
    """Check that the pushforward of the trace's noise law reproduces its empirical flow.

    ``discrepancy`` is the largest ``|b_phi(t)(z) - b^N(t)(z)|``. On failure the
    first (time, particle) whose recomputed state or action differs from the
    recorded one is reported.
    """
    if trace.variant != "own":
        raise ValueError("the pushforward identity holds for the own-state variant only")
    S, A, counts = phi_map(model, trace.states[:, 0], trace.noise, policy)
    recorded = empirical_flow(trace, model.nx, model.na).counts
    disc = float(np.abs(counts - recorded).max()) / trace.N
    mismatch = (S != trace.states) | (A != trace.actions)
    if disc == 0.0 and not mismatch.any():
        return PhiCheck(True, 0.0, None, None)
    if mismatch.any():
        t = int(np.flatnonzero(mismatch.any(axis=0))[0])
        i = int(np.flatnonzero(mismatch[:, t])[0])
    else:
        t, i = int(np.flatnonzero(np.abs(counts - recorded).max(axis=1))[0]), None
    return PhiCheck(False, disc, i, t)


# --- binary trace persistence ----------------------------------------------

_MAGIC = b"MFGT"
_HEADER = struct.Struct("<4sHBxIIIIQQ32s")  # magic, version, variant, N, T, nx, na, seed, replication, sha256
_VERSION = 1


def save_trace(path, trace: EnsembleTrace, model: ModelSpec) -> None:
    """Little-endian header, then int32 states, int32 actions, float64 noise (row-major)."""
    from .io import config_hash

    head = _HEADER.pack(
        _MAGIC,
        _VERSION,
        VARIANTS.index(trace.variant),
        trace.N,
        trace.T,
        model.nx,
        model.na,
        trace.seed & 0xFFFFFFFFFFFFFFFF,
        trace.replication,
        bytes.fromhex(config_hash(model)),
    )
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(np.ascontiguousarray(trace.states, dtype="<i4").tobytes())
        fh.write(np.ascontiguousarray(trace.actions, dtype="<i4").tobytes())
        fh.write(np.ascontiguousarray(trace.noise, dtype="<f8").tobytes())


def load_trace(path) -> tuple[EnsembleTrace, dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, version, var, N, T, nx, na, seed, rep, digest = _HEADER.unpack_from(raw)
    if magic != _MAGIC or version != _VERSION:
        raise ValueError("not a trace file or unsupported version")
    off = _HEADER.size
    n = N * (T + 1)
    states = np.frombuffer(raw, "<i4", n, off).reshape(N, T + 1).astype(np.int32)
    off += 4 * n
    actions = np.frombuffer(raw, "<i4", n, off).reshape(N, T + 1).astype(np.int32)
    off += 4 * n
    noise = np.frombuffer(raw, "<f8", n * N_ROLES, off).reshape(N, T + 1, N_ROLES).copy()
    trace = EnsembleTrace(N, T, states, actions, noise, int(seed), VARIANTS[var], int(rep))
    trace.counts = _counts(states.T, actions.T, nx, na)
    return trace, {"nx": nx, "na": na, "config_sha256": digest.hex()}


# --- estimators -------------------------------------------------------------


@dataclass(frozen=True)
class EventSpec:
    """``{ |b^N(t) - target|_1 <= epsilon }``."""

    t: int
    target: np.ndarray
    epsilon: float

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        object.__setattr__(self, "target", np.asarray(self.target, dtype=float))

    def hits(self, counts_t: np.ndarray, N: int) -> np.ndarray:
        d = np.abs(counts_t / N - self.target).sum(axis=-1)
        return d <= self.epsilon + HIT_ATOL


def wilson_interval(hits: int, n: int, z: float = WILSON_Z) -> tuple[float, float]:
    if n == 0:
        return 0.0, 1.0
    p = hits / n
    den = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / den
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    lo = 0.0 if hits == 0 else max(0.0, centre - half)
    hi = 1.0 if hits == n else min(1.0, centre + half)
    return lo, hi


class ProbabilityEstimate(NamedTuple):
    p_hat: float
    lo: float
    hi: float
    hits: int
    reps: int


def _sub_seed(seed: int, N: int) -> int:
    """Independent master seed per population size, so rows of a sweep do not share noise."""
    return int(_fold(np.uint64(seed & 0xFFFFFFFFFFFFFFFF), np.uint64(N)))


def estimate_probability(
    model: ModelSpec,
    policy=None,
    event: EventSpec | None = None,
    N: int = 100,
    reps: int = 1000,
    seed: int = 0,
    variant: str = "own",
    workers: int | None = None,
) -> ProbabilityEstimate:
    if event is None:
        raise ValueError("an event is required")
    if reps < 1:
        raise ValueError("reps must be at least 1")
    if event.target.shape != (model.ne,):
        raise ModelError(f"event target must have {model.ne} entries")
    counts = simulate_counts(model, N, reps, seed, variant, t_max=event.t, policy=policy, workers=workers)
    h = int(event.hits(counts[:, event.t], N).sum())
    lo, hi = wilson_interval(h, reps)
    return ProbabilityEstimate(h / reps, lo, hi, h, reps)


@dataclass
class LDPResult:
    rows: list[dict]  # N, hits, reps, p_hat, lo, hi, rate, dropped
    slope: float
    slope_se: float
    slope_plain: float
    prefactor_corrected: bool
    dropped: list[int]


def _wls_intercept(x: np.ndarray, y: np.ndarray, sd: np.ndarray) -> tuple[float, float]:
    """Weighted least squares ``y = a + b x``; returns ``(a, se(a))``."""
    if x.size == 1:
        return float(y[0]), float(sd[0])
    w = 1.0 / np.maximum(sd, 1e-300) ** 2
    X = np.stack([np.ones_like(x), x], axis=1)
    cov = np.linalg.inv(X.T @ (X * w[:, None]))
    coef = cov @ (X.T @ (w * y))
    return float(coef[0]), float(math.sqrt(max(cov[0, 0], 0.0)))


def ldp_slope(
    model: ModelSpec,
    policy=None,
    event: EventSpec | None = None,
    N_list: Sequence[int] = (),
    reps: int = 10_000,
    seed: int = 0,
    variant: str = "own",
    prefactor: str | bool = "auto",
    workers: int | None = None,
) -> LDPResult:
    """Decay rates ``-log(p_hat)/N`` and their extrapolation to ``N = infinity``.

    The intercept of a weighted fit against ``1/N`` estimates the rate.
    Rare-event probabilities carry a polynomial prefactor, ``p ~ C N^(-1/2) e^(-N I)``
    for lattice ball events, so with ``prefactor`` on (default whenever every
    retained ``p_hat <= 1/2``) the fit uses ``-log(p_hat)/N - log(N)/(2N)``.
    Weights come from the Wilson intervals. Zero-hit rows are reported and
    dropped.
    """
    if event is None:
        raise ValueError("an event is required")
    N_list = [int(n) for n in N_list]
    if not N_list or any(b <= a for a, b in zip(N_list, N_list[1:])):
        raise ValueError("N_list must be non-empty and strictly increasing")
    rows, dropped = [], []
    for N in N_list:
        est = estimate_probability(model, policy, event, N, reps, _sub_seed(seed, N), variant, workers)
        rate = -math.log(est.p_hat) / N if est.hits > 0 else math.inf
        rows.append(
            {"N": N, "hits": est.hits, "reps": reps, "p_hat": est.p_hat, "lo": est.lo, "hi": est.hi,
             "rate": rate, "dropped": est.hits == 0}
        )
        if est.hits == 0:
            dropped.append(N)
    kept = [r for r in rows if not r["dropped"]]
    if not kept:
        return LDPResult(rows, math.nan, math.nan, math.nan, False, dropped)
    Ns = np.array([r["N"] for r in kept], dtype=float)
    y = np.array([r["rate"] for r in kept])
    lo = np.array([max(r["lo"], 1e-300) for r in kept])
    hi = np.array([max(r["hi"], 1e-300) for r in kept])
    sd = np.maximum((np.log(hi) - np.log(lo)) / (2 * WILSON_Z * Ns), 1e-12)
    if prefactor == "auto":
        corrected = all(r["p_hat"] <= 0.5 for r in kept)
    else:
        corrected = bool(prefactor)
    plain, _ = _wls_intercept(1 / Ns, y, sd)
    yc = y - np.log(Ns) / (2 * Ns) if corrected else y
    slope, se = _wls_intercept(1 / Ns, yc, sd)
    return LDPResult(rows, slope, se, plain, corrected, dropped)


def lln_curve(
    model: ModelSpec,
    policy=None,
    t: int = 0,
    N_list: Sequence[int] = (),
    reps: int = 100,
    seed: int = 0,
    variant: str = "own",
    workers: int | None = None,
) -> list[dict]:
    """Mean over replications of ``|b^N(t) - b(t)|_1`` for each ``N``."""
    pol = model.require_policy() if policy is None else np.asarray(policy, dtype=float)
    ref = mean_field_flow(model.with_policy(pol), upto=t)[t]
    out = []
    for N in N_list:
        counts = simulate_counts(model, int(N), reps, _sub_seed(seed, int(N)), variant, t_max=t, policy=pol, workers=workers)
        err = np.abs(counts[:, t] / N - ref).sum(axis=1)
        se = float(err.std(ddof=1) / math.sqrt(reps)) if reps > 1 else math.nan
        out.append({"N": int(N), "reps": reps, "mean_l1_error": float(err.mean()), "se": se})
    return out
