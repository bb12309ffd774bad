import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clra.lowrank import build_blocks
from clra.metrics import estimation_error
from clra.scene import TimingOffsets, generate_scene, toa_from_scene
from clra.solver import (
    Case,
    ConfigurationError,
    Layout,
    Method,
    PenaltyWeights,
    Problem,
    SolverConfig,
    Status,
    _dU,
    closed_form_p,
    closed_form_q,
    default_weights,
    gauss_newton_step,
    init_coefficients,
    init_offsets,
    jacobian_fd,
    jacobian_rel_error,
    random_point,
    resolve_weights,
    select_case,
    solve,
)


def _truth_problem(m, n, method="CLRA", seed=0, all_blocks=False):
    scene = generate_scene(m, n, seed=seed)
    _, _, w = resolve_weights(method, m, n)
    return scene, Problem(toa_from_scene(scene), w, all_blocks)


def _near_truth(scene, seed, width=1e-3):
    rng = np.random.default_rng(seed)
    return TimingOffsets(scene.delta + rng.uniform(-width, width, scene.m),
                         scene.eta + np.r_[0.0, rng.uniform(-width, width, scene.n - 1)])


# --- case and weights -----------------------------------------------------

@pytest.mark.parametrize("m,n,case", [(15, 8, Case.C1), (8, 15, Case.C2), (10, 10, Case.C3),
                                      (9, 5, Case.C1), (8, 5, Case.C3), (5, 9, Case.C2)])
def test_select_case(m, n, case):
    assert select_case(m, n) is case


def test_select_case_rejects_small():
    with pytest.raises(ValueError):
        select_case(4, 10)


@pytest.mark.parametrize("case", list(Case))
def test_stls_weights_any_case(case):
    assert default_weights("STLS", case) == PenaltyWeights(lam=1e10)


def test_default_weight_presets():
    assert default_weights("CLRA", Case.C2) == PenaltyWeights(lam=1e12, gamma=1e9, beta=1e13)
    assert default_weights("CLRA", Case.C1) == PenaltyWeights(lam=1e10, gamma=1e10, alpha=1e11)
    assert default_weights("CLRA", Case.C3) == PenaltyWeights(lam=1e10, gamma=1e10)
    assert default_weights("CLRA1", Case.C3) == PenaltyWeights(lam=1e10, gamma=1e10)
    assert default_weights("CLRA1", Case.C2) == PenaltyWeights(lam=1e12, gamma=1e9)
    assert default_weights("clra2", Case.C2) == PenaltyWeights(lam=1e10, beta=1e11)
    assert default_weights("CLRA3", Case.C1) == PenaltyWeights(lam=1e10, alpha=1e11)


@pytest.mark.parametrize("method,case", [("CLRA2", Case.C1), ("CLRA2", Case.C3),
                                         ("CLRA3", Case.C2), ("CLRA3", Case.C3)])
def test_inapplicable_method_case(method, case):
    with pytest.raises(ConfigurationError):
        default_weights(method, case)


def test_weight_validation():
    with pytest.raises(ConfigurationError):
        PenaltyWeights(lam=-1.0)
    with pytest.raises(ConfigurationError):
        PenaltyWeights(lam=float("nan"))
    with pytest.raises(ConfigurationError):
        PenaltyWeights(lam=1e10, alpha=1.0).check_case(Case.C3)
    with pytest.raises(ConfigurationError):
        Method.parse("LRA")
    assert PenaltyWeights.from_exponents(lam=10, gamma=9) == PenaltyWeights(lam=1e10, gamma=1e9)


def test_solver_config_guards():
    with pytest.raises(ConfigurationError):
        SolverConfig(m2=0)
    with pytest.raises(ConfigurationError):
        SolverConfig(d_p=0.0)
    with pytest.raises(ConfigurationError):
        SolverConfig(w_star=-1.0)


# --- dimensions -----------------------------------------------------------

def test_dimensions_c3_active_blocks():
    lay = Layout.for_weights(10, 10, default_weights("CLRA", Case.C3))
    assert lay.active == ("X", "Y")
    # 81 + 54 + 108, and 19 + 18 + 72
    assert lay.q_size == 243
    assert lay.p_size == 109


def test_dimensions_all_blocks_match_closed_forms():
    lay = Layout.for_weights(10, 10, PenaltyWeights(lam=1e10), all_blocks=True)
    assert lay.q_size == 351 == closed_form_q(10, 10)
    assert lay.p_size == closed_form_p(10, 10) == 253


@settings(max_examples=40, deadline=None)
@given(m=st.integers(5, 15), n=st.integers(5, 15))
def test_all_blocks_sizes_match_closed_forms(m, n):
    lay = Layout.for_weights(m, n, PenaltyWeights(), all_blocks=True)
    assert lay.q_size == closed_form_q(m, n)
    assert lay.p_size == closed_form_p(m, n)


@pytest.mark.parametrize("method,m,n", [("STLS", 10, 10), ("CLRA", 15, 8), ("CLRA2", 8, 15)])
def test_residual_and_jacobian_shapes(method, m, n):
    _, prob = _truth_problem(m, n, method)
    p = prob.initial_point(init_offsets(m, n, seed=1))
    assert p.size == prob.layout.p_size
    assert prob.residual(p).size == prob.layout.q_size
    assert prob.jacobian(p).shape == (prob.layout.q_size, prob.layout.p_size)


def test_pack_unpack_round_trip_and_gauge():
    lay = Layout.for_weights(10, 10, default_weights("CLRA", Case.C3))
    rng = np.random.default_rng(2)
    off = init_offsets(10, 10, seed=3)
    coefs = {"X": rng.normal(size=(3, 6)), "Y": rng.normal(size=(12, 6))}
    p = lay.pack(off, coefs)
    back = lay.unpack_offsets(p)
    assert back.eta[0] == 0.0
    np.testing.assert_array_equal(back.delta, off.delta)
    np.testing.assert_array_equal(back.eta, off.eta)
    for k, v in lay.unpack_coefs(p).items():
        np.testing.assert_array_equal(v, coefs[k])


# --- initialisation -------------------------------------------------------

def test_init_offsets_deterministic_and_gauged():
    a, b = init_offsets(10, 12, seed=4), init_offsets(10, 12, seed=4)
    np.testing.assert_array_equal(a.delta, b.delta)
    assert a.eta[0] == 0.0


def test_init_offsets_sample_mean():
    draws = np.concatenate([init_offsets(100, 2, seed=s).delta for s in range(100)])
    # uniform on [-1, 1]: standard error of the mean = sqrt(1/3 / 1e4)
    assert abs(draws.mean()) < 3 * np.sqrt(1 / 3 / draws.size)
    assert draws.min() >= -1 and draws.max() <= 1


@pytest.mark.parametrize("m,n", [(10, 10), (15, 8), (8, 15)])
def test_init_coefficients_consistent_at_truth(m, n):
    scene = generate_scene(m, n, seed=5)
    blocks = build_blocks(toa_from_scene(scene), scene.offsets)
    systems = blocks.constraint_systems()
    coefs = init_coefficients(blocks, ("X", "Y", "Z", "W"))
    for k, (lhs, rhs) in systems.items():
        rel = np.linalg.norm(lhs @ coefs[k] - rhs) / np.linalg.norm(rhs)
        assert rel < 1e-8, k


def test_init_coefficients_zero_blocks():
    blocks = build_blocks(np.full((6, 6), 0.5), TimingOffsets(np.zeros(6), np.zeros(6)))
    np.testing.assert_array_equal(init_coefficients(blocks, ("X",))["X"], 0.0)


def test_penalty_blocks_vanish_at_truth():
    scene, prob = _truth_problem(15, 8, "CLRA", seed=6, all_blocks=True)
    p = prob.initial_point(scene.offsets)
    q = prob.residual(p)
    qs = prob.layout.q_slices
    assert np.linalg.norm(q[qs["f_A"]]) > 1.0
    # unweighted: each constraint holds to roundoff relative to its right-hand side
    systems = prob.blocks(scene.offsets).constraint_systems()
    for name, block in (("X", "f_B"), ("Y", "f_C"), ("Z", "f_D"), ("W", "f_E")):
        rhs_norm = np.linalg.norm(systems[name][1])
        raw = np.linalg.norm(q[qs[block]]) / prob.weight(name) if prob.weight(name) else 0.0
        assert raw <= 1e-10 * rhs_norm, name


# --- Jacobian -------------------------------------------------------------

def test_du_reference_derivative_entries():
    rng = np.random.default_rng(0)
    t = rng.uniform(-1, 1, (6, 7))
    delta, eta = rng.uniform(-1, 1, 6), np.r_[0.0, rng.uniform(-1, 1, 6)]
    du = _dU(t, delta, eta)
    for i, j in [(1, 1), (3, 5), (5, 6)]:
        assert du[i - 1, j - 1, 0] == pytest.approx(-2 * (t[0, j] - t[0, 0]) + 2 * eta[j])
        # delta_i for i >= 2 sits in column i - 1; eta_j for j >= 2 in column m + j - 2
        assert du[i - 1, j - 1, i] == pytest.approx(2 * (t[i, j] - t[i, 0]) - 2 * eta[j])
        assert du[i - 1, j - 1, 6 + j - 1] == pytest.approx(
            -2 * (t[i, j] - t[0, j]) + 2 * (delta[0] - delta[i]))


def test_fa_independent_of_coefficients():
    _, prob = _truth_problem(10, 10)
    p = random_point(prob, np.random.default_rng(1))
    jac = prob.jacobian(p)
    fa = prob.layout.q_slices["f_A"]
    assert np.all(jac[fa, prob.layout.n_timing:] == 0.0)


@pytest.mark.parametrize("method,m,n", [
    ("STLS", 10, 10), ("CLRA1", 10, 10), ("CLRA", 10, 10),
    ("CLRA3", 15, 8), ("CLRA", 15, 8), ("CLRA2", 8, 15), ("CLRA", 8, 15), ("CLRA1", 8, 15),
])
def test_jacobian_matches_finite_differences(method, m, n):
    rng = np.random.default_rng([m, n, len(method)])
    _, prob = _truth_problem(m, n, method, seed=int(rng.integers(1000)))
    p = random_point(prob, rng)
    assert jacobian_rel_error(prob.jacobian(p), jacobian_fd(prob, p)) < 1e-6


def test_jacobian_all_blocks_matches_finite_differences():
    _, prob = _truth_problem(10, 10, all_blocks=True)
    prob.weights = PenaltyWeights(lam=1e3, alpha=2e3, beta=3e3, gamma=4e3)
    p = random_point(prob, np.random.default_rng(3))
    assert jacobian_rel_error(prob.jacobian(p), jacobian_fd(prob, p)) < 1e-6


# --- Gauss-Newton step ----------------------------------------------------

def test_gn_step_zero_residual():
    p = np.arange(4.0)
    np.testing.assert_array_equal(gauss_newton_step(p, np.eye(6, 4), np.zeros(6)), p)


def test_gn_step_orthonormal_columns():
    rng = np.random.default_rng(0)
    qmat, _ = np.linalg.qr(rng.normal(size=(8, 3)))
    r = rng.normal(size=8)
    np.testing.assert_allclose(gauss_newton_step(np.zeros(3), qmat, r), -qmat.T @ r, atol=1e-14)


def test_gn_step_matches_normal_equations():
    rng = np.random.default_rng(1)
    jac, r, p = rng.normal(size=(30, 8)), rng.normal(size=30), rng.normal(size=8)
    ref = np.linalg.solve(jac.T @ jac, jac.T @ r)
    delta = p - gauss_newton_step(p, jac, r)
    assert np.linalg.norm(delta - ref) / np.linalg.norm(ref) < 1e-10


def test_gn_step_minimum_norm_when_rank_deficient():
    jac = np.array([[1.0, 1.0], [1.0, 1.0], [0.0, 0.0]])
    delta = -gauss_newton_step(np.zeros(2), jac, np.array([2.0, 2.0, 0.0]))
    np.testing.assert_allclose(delta, [1.0, 1.0], atol=1e-12)


def test_gn_step_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        gauss_newton_step(np.zeros(2), np.array([[np.nan, 0.0], [0, 1]]), np.ones(2))


# --- solve ----------------------------------------------------------------

@pytest.mark.parametrize("method,m,n", [("CLRA", 10, 10), ("STLS", 10, 10),
                                        ("CLRA3", 15, 8), ("CLRA2", 8, 15), ("CLRA", 8, 15)])
def test_local_recovery(method, m, n):
    hits = 0
    for k in range(10):
        scene = generate_scene(m, n, seed=k)
        out = solve(toa_from_scene(scene), method, init=_near_truth(scene, k))
        assert out.offsets.eta[0] == 0.0
        hits += estimation_error(out.offsets, scene.offsets) < 1e-4
    assert hits >= 8


def test_local_recovery_reports_converged():
    scene = generate_scene(10, 10, seed=21)
    out = solve(toa_from_scene(scene), "CLRA", init=_near_truth(scene, 1))
    assert out.status is Status.CONVERGED
    assert estimation_error(out.offsets, scene.offsets) < 1e-4


def test_divergence_flag():
    scene = generate_scene(10, 10, seed=3)
    out = solve(toa_from_scene(scene), "CLRA", init=init_offsets(10, 10, seed=1),
                config=SolverConfig(w_star=1e-3))
    assert out.status is Status.DIVERGED and out.iterations == 0
    assert out.final_objective > 1e-3


def test_iteration_cap_one_step():
    scene = generate_scene(10, 10, seed=3)
    out = solve(toa_from_scene(scene), "CLRA", init=init_offsets(10, 10, seed=1),
                config=SolverConfig(m2=1))
    assert out.iterations <= 1
    assert out.status in (Status.MAX_ITERATIONS, Status.DIVERGED)


def test_clra_without_variants_equals_stls():
    scene = generate_scene(10, 10, seed=8)
    meas = toa_from_scene(scene)
    init = init_offsets(10, 10, seed=2)
    a = solve(meas, "STLS", init=init, keep_history=True)
    b = solve(meas, "CLRA", init=init, weights=PenaltyWeights(lam=1e10), keep_history=True)
    assert len(a.history) == len(b.history)
    for x, y in zip(a.history, b.history):
        np.testing.assert_array_equal(x, y)


def test_solve_rejects_bad_config():
    scene = generate_scene(10, 10, seed=1)
    with pytest.raises(ConfigurationError):
        solve(toa_from_scene(scene), "CLRA3")
    with pytest.raises(ValueError):
        solve(toa_from_scene(scene), "STLS", init=init_offsets(9, 10))


def test_descent_from_near_truth():
    # plain Gauss-Newton may overshoot on its first steps; overall it must descend
    lower, monotone, n = 0, 0, 20
    for k in range(n):
        scene = generate_scene(10, 10, seed=100 + k)
        prob = Problem(toa_from_scene(scene), default_weights("CLRA", Case.C3))
        out = solve(toa_from_scene(scene), "CLRA", init=_near_truth(scene, k), keep_history=True)
        objs = [prob.objective(p) for p in out.history]
        lower += objs[-1] < objs[0]
        monotone += all(b <= a * (1 + 1e-9) for a, b in zip(objs, objs[1:]))
    assert lower >= 19
    assert monotone >= n // 2


def test_outcome_json():
    scene = generate_scene(10, 10, seed=2)
    out = solve(toa_from_scene(scene), "STLS", init=_near_truth(scene, 0), seed=5)
    rec = json.loads(out.to_json())
    assert rec["status"] == "Converged" and rec["method"] == "STLS" and rec["case"] == "C3"
    assert rec["seed"] == 5 and "er" not in rec
    assert len(rec["delta"]) == 10 and rec["eta"][0] == 0.0
