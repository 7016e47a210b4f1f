import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfgldp.entropy import MarkovPathMeasure, i_project_exact, relative_entropy
from mfgldp.instances import perturb_flow, random_flow, random_model
from mfgldp.model import build_kappa, initial_pair, load_model, make_model, marginal_x, mean_field_flow, transition_kernel
from mfgldp.rates import (
    RateReport,
    ball_rate_inf,
    dv_lower_bound,
    j_rate,
    marginal_j_rate,
    path_rate,
    prop1_residual,
    reference_path_measure,
    simplex_grid,
    v_rate,
)

from helpers import CONFIGS

instances = st.tuples(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**32 - 1))


def _collapsed_uniform():
    return make_model(2, 1, 1, [0.5, 0.5], np.zeros((1, 2, 1, 2)), policy=np.ones((2, 2, 1)))


def _deterministic_swap():
    return load_model(CONFIGS / "deterministic.json")


# --- V and J ------------------------------------------------------------------


def test_v_rate_direct_summation_example():
    rep = v_rate(_collapsed_uniform(), [[0.6, 0.4], [0.5, 0.5]])
    expect = 0.6 * math.log(1.2) + 0.4 * math.log(0.8)
    assert rep.value == pytest.approx(expect, abs=1e-15)
    assert rep.value == pytest.approx(0.020136, abs=5e-7)
    assert rep.terms[1] == 0.0


def test_j_rate_equals_v_for_uniform_kernel():
    m = _collapsed_uniform()
    g = [[0.6, 0.4], [0.5, 0.5]]
    rep = j_rate(m, g)
    assert rep.value == pytest.approx(v_rate(m, g).value, abs=1e-12)
    assert rep.terms[1] == pytest.approx(0.0, abs=1e-12)


def test_unreachable_support_is_infinite():
    m = _deterministic_swap()
    g = np.array([[1.0, 0.0], [0.5, 0.5], [1.0, 0.0], [0.0, 1.0]])
    assert v_rate(m, g).value == math.inf
    assert j_rate(m, g).value == math.inf


def test_own_flow_has_zero_rates():
    m = load_model(CONFIGS / "two_by_two.json")
    f = mean_field_flow(m)
    assert v_rate(m, f).value == pytest.approx(0.0, abs=1e-14)
    assert j_rate(m, f).value <= 1e-10
    assert prop1_residual(m, f).value <= 1e-10


def test_simplified_flow_driven_by_itself_has_zero_j():
    m = load_model(CONFIGS / "two_by_two.json")
    f = mean_field_flow(m)
    g = mean_field_flow(m, "simplified", nu=f)
    assert j_rate(m, g).value <= 1e-10


def test_prefix_flows_accepted():
    m = load_model(CONFIGS / "two_by_two.json")
    f = mean_field_flow(m)
    assert len(j_rate(m, f[:2]).terms) == 2
    with pytest.raises(ValueError):
        j_rate(m, np.vstack([f, f[-1:]]))


@pytest.mark.parametrize("seed", range(6))
def test_j_rate_matches_full_simplex_oracle(seed):
    rng = np.random.default_rng(seed)
    m = random_model(rng, 2, 1, 2) if seed % 2 else random_model(rng, 1, 2, 2)
    g = random_flow(rng, 2, 3)
    exact = i_project_exact(reference_path_measure(m, g), g)
    assert j_rate(m, g).value == pytest.approx(exact, abs=1e-7)


def test_j_rate_matches_oracle_on_larger_space():
    rng = np.random.default_rng(10)
    m = random_model(rng, 2, 2, 2)
    g = random_flow(rng, 4, 3)
    exact = i_project_exact(reference_path_measure(m, g), g)
    assert j_rate(m, g).value == pytest.approx(exact, abs=1e-7)


def test_t0_residual_zero():
    m = load_model(CONFIGS / "sanov.json")
    assert prop1_residual(m, [[0.3, 0.7]]).value == 0.0


@settings(max_examples=40, deadline=None)
@given(instances, st.booleans())
def test_prop1_identity_and_inequality(inst, sparse):
    nx, na, T, seed = inst
    rng = np.random.default_rng(seed)
    m = random_model(rng, nx, na, T, sparsity=0.3 if sparse else 0.0)
    g = random_flow(rng, m.ne, T + 1, sparsity=0.3 if sparse else 0.0)
    j, v, r = j_rate(m, g).value, v_rate(m, g).value, prop1_residual(m, g).value
    assert j >= v - 1e-9
    assert math.isinf(j) == math.isinf(v + r)
    if math.isfinite(j):
        assert abs(j - v - r) <= 1e-6


@settings(max_examples=40, deadline=None)
@given(instances)
def test_initial_law_decomposition(inst):
    nx, na, T, seed = inst
    rng = np.random.default_rng(seed)
    m = random_model(rng, nx, na, T)
    g = random_flow(rng, m.ne, T + 1)
    g0x = marginal_x(g[0], na)
    lhs = j_rate(m, g).value
    rhs = relative_entropy(g0x, m.mu0) + j_rate(m.with_mu0(g0x), g).value
    assert lhs == pytest.approx(rhs, abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(instances)
def test_zero_set_is_the_mean_field_flow(inst):
    nx, na, T, seed = inst
    if nx * na == 1:
        nx = 2
    rng = np.random.default_rng(seed)
    m = random_model(rng, nx, na, T)
    f = mean_field_flow(m)
    assert j_rate(m, f).value <= 1e-10
    assert j_rate(m, perturb_flow(rng, f, 0.05)).value > 0


def test_rate_values_nonnegative_and_sum_of_terms():
    rng = np.random.default_rng(3)
    for _ in range(20):
        m = random_model(rng, 2, 2, 2)
        g = random_flow(rng, 4, 3)
        for rep in (v_rate(m, g), j_rate(m, g), prop1_residual(m, g)):
            assert all(t >= 0 for t in rep.terms)
            assert rep.value == pytest.approx(sum(rep.terms), abs=1e-9)


def test_report_json_encodes_infinity():
    rep = RateReport(math.inf, [0.1, math.inf], {"x": np.float64(1.0)})
    d = rep.to_dict()
    assert d["value"] == "inf" and d["terms"] == [0.1, "inf"]
    json.dumps(d, allow_nan=False)


def test_non_convergence_flagged_with_bracket():
    rng = np.random.default_rng(5)
    m = random_model(rng, 3, 2, 2)
    g = random_flow(rng, 6, 3)
    rep = j_rate(m, g, tol=1e-15, max_iter=2)
    assert not rep.diagnostics["converged"]
    lo, hi = rep.diagnostics["bracket"]
    assert lo <= j_rate(m, g).value + 1e-9


def test_custom_kernel_builder_for_v():
    m = load_model(CONFIGS / "two_by_two.json")
    f = mean_field_flow(m)
    frozen = lambda model, nu, t: build_kappa(model, f[t], t)  # noqa: E731
    assert v_rate(m, f, kernel_builder=frozen).value == pytest.approx(0.0, abs=1e-14)


# --- path rate --------------------------------------------------------------------


def _self_consistent(m, rho=None):
    flow = mean_field_flow(m, initial=rho)
    return MarkovPathMeasure(flow[0], tuple(build_kappa(m, flow[t], t) for t in range(m.horizon)))


def test_path_rate_self_consistent_zero():
    m = load_model(CONFIGS / "two_by_two.json")
    assert path_rate(m, _self_consistent(m)).value == pytest.approx(0.0, abs=1e-14)


def test_path_rate_only_initial_term():
    m = load_model(CONFIGS / "two_by_two.json")
    rho = np.array([0.1, 0.2, 0.3, 0.4])
    rep = path_rate(m, _self_consistent(m, rho))
    assert rep.value == pytest.approx(relative_entropy(rho, initial_pair(m)), abs=1e-13)


@pytest.mark.parametrize("seed", range(5))
def test_path_rate_matches_dense_tensor(seed):
    rng = np.random.default_rng(seed)
    m = random_model(rng, 2, 1, 2) if seed % 2 else random_model(rng, 1, 2, 2)
    phi = MarkovPathMeasure(rng.dirichlet(np.ones(2)), tuple(rng.dirichlet(np.ones(2), size=2) for _ in range(2)))
    marg = phi.marginals()
    ref = MarkovPathMeasure(initial_pair(m), tuple(build_kappa(m, marg[t], t) for t in range(2)))
    dense = relative_entropy(phi.to_tensor(), ref.to_tensor())
    assert path_rate(m, phi).value == pytest.approx(dense, abs=1e-12)


# --- Donsker-Varadhan bound ---------------------------------------------------------


def test_simplex_grid_counts():
    assert simplex_grid(2, 10).shape == (11, 2)
    assert simplex_grid(3, 4).shape == (15, 3)
    np.testing.assert_allclose(simplex_grid(3, 4).sum(axis=1), 1.0)
    with pytest.raises(ValueError):
        simplex_grid(2, 0)


def test_dv_base_case_is_exact():
    m = load_model(CONFIGS / "dynamic_ldp.json")
    g = np.array([0.3, 0.7])
    rep = dv_lower_bound(m, g, 0, np.zeros((1, 2)), 10)
    assert rep.value == pytest.approx(relative_entropy(g, initial_pair(m)), abs=1e-15)


def test_dv_zero_test_function_gives_nonnegative_bound():
    m = load_model(CONFIGS / "dynamic_ldp.json")
    rep = dv_lower_bound(m, np.array([0.9, 0.1]), 1, np.zeros((1, 2)), 100)
    assert rep.value >= -1e-12


def test_dv_rejects_bad_arguments():
    m = load_model(CONFIGS / "dynamic_ldp.json")
    with pytest.raises(ValueError):
        dv_lower_bound(m, np.array([0.5, 0.5]), 1, np.zeros((1, 2)), 0)
    with pytest.raises(ValueError):
        dv_lower_bound(m, np.array([0.5, 0.5]), 1, np.zeros((1, 3)), 10)


@pytest.mark.parametrize("seed", range(3))
def test_dv_bound_below_marginal_j(seed):
    rng = np.random.default_rng(seed)
    m = random_model(rng, 2, 1, 1)
    g = rng.dirichlet(np.ones(2))
    G = rng.normal(scale=2, size=(20, 2))
    b = dv_lower_bound(m, g, 1, G, 300)
    assert marginal_j_rate(m, g, 1).value >= b.value - 1e-6 - b.diagnostics["grid_error"]


def test_dv_bound_tight_for_single_step_with_rich_family():
    # with many test functions the bound approaches inf_nu V(nu, gamma), which J dominates
    m = load_model(CONFIGS / "dynamic_ldp.json")
    g = np.array([0.4, 0.6])
    G = np.stack([np.linspace(-6, 6, 241), np.zeros(241)], axis=1)
    b = dv_lower_bound(m, g, 1, G, 1000).value
    v_marginal = min(v_rate(m, [[p, 1 - p], g]).value for p in np.linspace(0, 1, 20001))
    assert b <= v_marginal + 1e-6
    assert b >= v_marginal - 1e-4
    assert marginal_j_rate(m, g, 1).value >= v_marginal - 1e-9


def test_dv_on_three_point_space():
    rng = np.random.default_rng(8)
    m = random_model(rng, 3, 1, 1)
    g = rng.dirichlet(np.ones(3))
    b = dv_lower_bound(m, g, 1, rng.normal(size=(10, 3)), 40)
    assert b.value <= marginal_j_rate(m, g, 1).value + 1e-6 + b.diagnostics["grid_error"]


# --- infima over flows ----------------------------------------------------------------


def test_marginal_j_rate_t0_and_upper_bound():
    m = load_model(CONFIGS / "dynamic_ldp.json")
    g = np.array([0.2, 0.8])
    assert marginal_j_rate(m, g, 0).value == pytest.approx(relative_entropy(g, m.mu0), abs=1e-15)
    res = marginal_j_rate(m, g, 1)
    for p in np.linspace(0.05, 0.95, 7):
        assert res.value <= j_rate(m, [[p, 1 - p], g]).value + 1e-12
    np.testing.assert_array_equal(res.witness[-1], g)


def _closed_form_bridge_2x2(K, rho0, sig0):
    """Minimal R(P|K) over 2x2 couplings: the optimal cross ratio matches K's."""
    c = K[..., 0, 0] * K[..., 1, 1] / (K[..., 0, 1] * K[..., 1, 0])
    A = 1 - c
    B = 1 - rho0 - sig0 + c * (rho0 + sig0)
    C = -c * rho0 * sig0
    lo, hi = np.maximum(0.0, rho0 + sig0 - 1), np.minimum(rho0, sig0)
    with np.errstate(divide="ignore", invalid="ignore"):
        disc = np.sqrt(np.maximum(B * B - 4 * A * C, 0.0))
        r1 = np.where(np.abs(A) > 1e-14, (-B + disc) / (2 * A), -C / B)
        r2 = np.where(np.abs(A) > 1e-14, (-B - disc) / (2 * A), -C / B)
    a = np.where((r1 >= lo - 1e-15) & (r1 <= hi + 1e-15), r1, r2)
    a = np.clip(a, lo, hi)
    P = np.stack([a, rho0 - a, sig0 - a, 1 - rho0 - sig0 + a], axis=-1)
    Kf = K.reshape(K.shape[:-2] + (4,))
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(P > 0, P * np.log(P / Kf), 0.0)
    return terms.sum(axis=-1)


def test_ball_rate_matches_dense_grid():
    m = load_model(CONFIGS / "dynamic_ldp.json")
    f = mean_field_flow(m)
    target = f[1] + np.array([0.25, -0.25])
    eps = 0.05
    res = ball_rate_inf(m, target, eps, 1)
    # dense grid over gamma_0 and over the slice of the ball, closed-form bridges
    p0 = np.linspace(0.0, 1.0, 4001)[1:-1]
    p1 = np.linspace(target[0] - eps / 2, target[0] + eps / 2, 201)
    nu0 = initial_pair(m)
    init = p0 * np.log(p0 / nu0[0]) + (1 - p0) * np.log((1 - p0) / nu0[1])
    K = np.array([transition_kernel(m, np.array([p, 1 - p]), 0) for p in p0])  # (n, 2, 2)
    ref = np.stack([p0[:, None] * K[:, 0], (1 - p0)[:, None] * K[:, 1]], axis=1)
    vals = init[:, None] + _closed_form_bridge_2x2(ref[:, None], p0[:, None], p1[None, :])
    grid_min = float(vals.min())
    assert res.value == pytest.approx(grid_min, rel=0.02)
    assert res.value >= grid_min - 1e-4
    assert np.abs(res.witness[1] - target).sum() <= eps + 1e-9


def test_ball_rate_trivial_cases():
    m = load_model(CONFIGS / "two_by_two.json")
    f = mean_field_flow(m)
    assert ball_rate_inf(m, f[2], 0.1, 2).value <= 1e-10
    assert ball_rate_inf(m, np.array([1.0, 0, 0, 0]), 2.0, 2).value <= 1e-10
    with pytest.raises(ValueError):
        ball_rate_inf(m, f[2], 0.0, 2)


def test_ball_rate_v_below_j():
    m = load_model(CONFIGS / "dynamic_ldp.json")
    target = mean_field_flow(m)[1] + np.array([0.25, -0.25])
    j = ball_rate_inf(m, target, 0.2, 1).value
    v = ball_rate_inf(m, target, 0.2, 1, rate="v").value
    assert 0 < v <= j + 1e-9
    with pytest.raises(ValueError):
        ball_rate_inf(m, target, 0.2, 1, rate="w")
