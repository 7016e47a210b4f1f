"""Random and hand-designed model instances used by tests and demos."""

from __future__ import annotations

import numpy as np

from .model import ModelSpec, make_model


def random_model(
    rng: np.random.Generator,
    nx: int,
    na: int,
    horizon: int,
    mf_scale: float = 1.5,
    logit_scale: float = 1.0,
    policy_concentration: float = 1.0,
    with_costs: bool = False,
    sparsity: float = 0.0,
) -> ModelSpec:
    """Random mu-dependent model with a random Markov policy.

    With ``sparsity > 0`` that fraction of transition logits is set to ``-inf``
    and of policy entries to 0 (never a whole row), so kernels lose support.
    """
    base = rng.normal(scale=logit_scale, size=(horizon, nx, na, nx))
    mf = rng.normal(scale=mf_scale, size=(horizon, nx, na, nx, nx))
    policy = rng.dirichlet(np.full(na, policy_concentration), size=(horizon + 1, nx))
    if sparsity > 0:
        base[_sparse_mask(rng, base.shape, sparsity)] = -np.inf
        policy[_sparse_mask(rng, policy.shape, sparsity)] = 0.0
        policy /= policy.sum(axis=-1, keepdims=True)
    mu0 = rng.dirichlet(np.ones(nx))
    kw = {}
    if with_costs:
        kw["costs"] = rng.normal(size=(horizon + 1, nx, na))
        kw["mf_cost_weights"] = rng.normal(size=(horizon + 1, nx, na, nx))
    return make_model(nx, na, horizon, mu0, base, mf, policy, **kw)


def _sparse_mask(rng: np.random.Generator, shape, fraction: float) -> np.ndarray:
    mask = rng.random(shape) < fraction
    full = mask.all(axis=-1)
    keep = rng.integers(shape[-1], size=full.shape)
    idx = np.nonzero(full)
    mask[idx + (keep[idx],)] = False
    return mask


def random_flow(
    rng: np.random.Generator,
    ne: int,
    length: int,
    concentration: float = 1.0,
    sparsity: float = 0.0,
) -> np.ndarray:
    g = rng.dirichlet(np.full(ne, concentration), size=length)
    if sparsity > 0:
        g[_sparse_mask(rng, g.shape, sparsity)] = 0.0
        g /= g.sum(axis=-1, keepdims=True)
    return g


def perturb_flow(rng: np.random.Generator, flow: np.ndarray, min_l1: float) -> np.ndarray:
    """Mix one random slice of ``flow`` toward a random law until it moves by at least ``min_l1``."""
    out = np.array(flow, dtype=float)
    t = int(rng.integers(out.shape[0]))
    while True:
        d = rng.dirichlet(np.ones(out.shape[1]))
        gap = float(np.abs(d - out[t]).sum())
        if gap > min_l1 * 1.01:
            break
    lam = rng.uniform(min_l1 / gap, 1.0)
    out[t] = (1 - lam) * out[t] + lam * d
    return out
