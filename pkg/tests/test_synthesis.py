"""Tests for the SDP trainers: residual expansion, both problem builders,
the anchor iteration, and the nuclear-norm relaxation with line search."""

import dataclasses
import logging

import numpy as np
import pytest

from lmiql import conic, synthesis
from lmiql.baselines import LinearModel, make_baseline, optimal_qparams, solve_dare
from lmiql.conic import SolveSettings, SolveStatus
from lmiql.env import Dataset, RewardSpec, UniformInit, generate_linear_dataset
from lmiql.qmodel import (
    BaselinePolicy,
    QParams,
    RelaxationVars,
    bellman_residual,
    identity_basis,
    l1_cost,
    params_to_vector,
    vech,
)
from lmiql.synthesis import (
    EpigraphSystem,
    LmiQlConfig,
    QliAnchors,
    SynthesisError,
    ThetaLayout,
    build_lmi_ql_problem,
    build_qli_problem,
    build_residual_exprs,
    load_train_result,
    project_upper_bound,
    run_lmi_ql,
    run_lmi_qli,
    save_train_result,
)

GAMMA = 0.98
A_SYS = np.array([[0.7, 0.1], [0.0, 0.6]])
B_SYS = np.array([[0.0], [1.0]])
M_COST = np.diag([1.0, 1.0, 0.5])


def lqr_data(n, seed):
    spec = RewardSpec(M_COST)
    init = UniformInit(np.array([-2.0, -2.0]), np.array([2.0, 2.0]))
    return generate_linear_dataset(A_SYS, B_SYS, spec, n, seed=seed,
                                   init_sampler=init)


def lqr_pieces():
    basis = identity_basis(2)
    baseline = BaselinePolicy.zero(2, 2, 1)
    model = LinearModel(A_SYS, B_SYS, M_COST[:2, :2], M_COST[2:, 2:], GAMMA)
    return basis, baseline, model


def random_feasible_params(rng, n_phi, n_u):
    m = n_phi + n_u
    g = rng.standard_normal((m, m))
    s = g @ g.T + 0.5 * np.eye(m)
    return QParams(
        float(rng.standard_normal()),
        rng.standard_normal(n_phi),
        rng.standard_normal(n_u),
        s,
    )


def encode_decision(layout, params, w_mat):
    y = np.zeros(layout.var_count(with_w=True))
    y[: layout.n_theta] = params_to_vector(params)
    y[layout.w_start :] = vech(w_mat)
    return y


def test_layout_counts_and_indices():
    layout = ThetaLayout(2, 1, 3)
    assert layout.n_theta == 10
    assert layout.n_zeta == 3
    assert layout.w_dim == 3
    assert layout.s_start == 4
    assert layout.t_start == 10
    assert layout.w_start == 13
    assert layout.var_count(with_w=False) == 13
    assert layout.var_count(with_w=True) == 19
    assert layout.s_index(0, 0) == 4
    assert layout.s_index(2, 2) == 9
    assert layout.s_index(1, 0) == layout.s_index(0, 1)
    assert layout.t_index(2) == 12
    assert layout.w_index(0, 2) == 15
    problem, s_var, w_var = layout.new_problem(with_w=True)
    assert problem.var_count == 19
    assert s_var.index(1, 2) == layout.s_index(1, 2)
    assert w_var.index(2, 2) == layout.w_index(2, 2)


def test_layout_decode_roundtrip():
    rng = np.random.default_rng(5)
    layout = ThetaLayout(2, 1, 4)
    params = random_feasible_params(rng, 2, 1)
    w = RelaxationVars.from_params(params).W
    y = encode_decision(layout, params, w)
    decoded = layout.decode_params(y)
    assert np.allclose(params_to_vector(decoded), params_to_vector(params), atol=1e-14)
    assert np.allclose(layout.decode_w(y), w, atol=1e-14)


def test_single_sample_counts():
    data = lqr_data(1, seed=0)
    basis, baseline, _ = lqr_pieces()
    layout = ThetaLayout(2, 1, 1)
    system = build_residual_exprs(data, baseline, basis, GAMMA, layout)
    assert len(system) == 1
    assert len(system.residual_exprs) == 1
    problem = build_qli_problem(system, QliAnchors.identity(2, 1), 1e-6)
    assert len(problem.scalar_ineqs) == 2


def test_epigraph_pairs_sum_to_2t():
    # (t - z) + (t + z) = 2 t for each consecutive inequality pair
    data = lqr_data(3, seed=1)
    basis, baseline, _ = lqr_pieces()
    layout = ThetaLayout(2, 1, 3)
    system = build_residual_exprs(data, baseline, basis, GAMMA, layout)
    problem = build_qli_problem(system, QliAnchors.identity(2, 1), 1e-6)
    rng = np.random.default_rng(2)
    y = rng.standard_normal(layout.var_count(with_w=False))
    for k in range(3):
        lo = problem.scalar_ineqs[2 * k].value(y)
        hi = problem.scalar_ineqs[2 * k + 1].value(y)
        assert abs(lo + hi - 2.0 * y[layout.t_index(k)]) < 1e-12


def test_residual_exprs_match_bellman():
    # cross-module identity at W = Psi S_uu^-1 Psi'
    data = lqr_data(6, seed=0)
    basis, baseline, _ = lqr_pieces()
    layout = ThetaLayout(2, 1, 6)
    system = build_residual_exprs(data, baseline, basis, GAMMA, layout)
    rng = np.random.default_rng(7)
    for _ in range(5):
        params = random_feasible_params(rng, 2, 1)
        y = encode_decision(layout, params, RelaxationVars.from_params(params).W)
        for k in range(len(data)):
            sample = (data.X[k], data.U[k], data.R[k], data.X_plus[k])
            want = bellman_residual(params, baseline, basis, sample, GAMMA)
            got = system.residual_exprs[k].value(y)
            assert abs(got - want) < 1e-10


def test_zero_theta_zero_w_residual_is_minus_reward():
    data = lqr_data(5, seed=2)
    basis, baseline, _ = lqr_pieces()
    layout = ThetaLayout(2, 1, 5)
    system = build_residual_exprs(data, baseline, basis, GAMMA, layout)
    y = np.zeros(layout.var_count(with_w=True))
    for k in range(5):
        assert abs(system.residual_exprs[k].value(y) + data.R[k]) < 1e-12


def test_build_residual_exprs_validation():
    data = lqr_data(4, seed=0)
    basis, baseline, _ = lqr_pieces()
    with pytest.raises(ValueError):
        build_residual_exprs(data, baseline, basis, GAMMA, ThetaLayout(2, 1, 3))
    with pytest.raises(ValueError):
        build_residual_exprs(data, baseline, basis, GAMMA, ThetaLayout(2, 2, 4))
    with pytest.raises(ValueError):
        # emptiness is rejected at the Dataset boundary already
        Dataset(np.zeros((0, 2)), np.zeros((0, 1)), np.zeros(0), np.zeros((0, 2)),
                0, "")


def test_rank_deficiency_warning(caplog):
    data = lqr_data(3, seed=4)  # 3 samples cannot identify 10 parameters
    basis, baseline, _ = lqr_pieces()
    with caplog.at_level(logging.WARNING, logger="lmiql.synthesis"):
        build_residual_exprs(data, baseline, basis, GAMMA, ThetaLayout(2, 1, 3))
    assert any("rank-deficient" in rec.message for rec in caplog.records)


def test_identity_anchors_give_zero_w():
    anchors = QliAnchors.identity(2, 1)
    g_hat = anchors.greedy_matrix_hat()
    want = np.zeros((3, 3))
    want[:2, :2] = -np.eye(2)
    assert np.array_equal(g_hat, want)


def test_anchor_validation():
    with pytest.raises(ValueError):
        QliAnchors(np.eye(2), np.zeros(2), np.zeros((3, 1)), -np.eye(1))
    with pytest.raises(ValueError):
        QliAnchors(np.eye(2), np.zeros(2), np.zeros((3, 2)),
                   np.array([[1.0, 0.5], [0.0, 1.0]]))
    data = lqr_data(4, seed=0)
    basis, baseline, _ = lqr_pieces()
    layout = ThetaLayout(2, 1, 4)
    system = build_residual_exprs(data, baseline, basis, GAMMA, layout)
    wrong_dim = QliAnchors.identity(3, 1)
    with pytest.raises(ValueError):
        build_qli_problem(system, wrong_dim, 1e-6)


def test_qli_problem_feasible_for_any_data():
    # feasibility certificate: S = eps I, t large
    rng = np.random.default_rng(9)
    data = lqr_data(8, seed=5)
    hostile = Dataset(data.X, data.U, 1e3 * rng.standard_normal(8), data.X_plus,
                      data.seed, "")
    basis, baseline, _ = lqr_pieces()
    layout = ThetaLayout(2, 1, 8)
    system = build_residual_exprs(hostile, baseline, basis, GAMMA, layout)
    problem = build_qli_problem(system, QliAnchors.identity(2, 1), 1e-6)
    res = conic.solve(problem)
    assert res.status is SolveStatus.OPTIMAL
    assert np.isfinite(res.objective)


def test_qli_anchored_at_riccati_solution():
    data = lqr_data(50, seed=3)
    basis, baseline, model = lqr_pieces()
    star = optimal_qparams(model)
    layout = ThetaLayout(2, 1, 50)
    system = build_residual_exprs(data, baseline, basis, GAMMA, layout)
    problem = build_qli_problem(system, QliAnchors.from_params(star), 1e-6)
    res = conic.solve(problem)
    assert res.status is SolveStatus.OPTIMAL
    assert res.objective <= 1e-6


def test_run_qli_tau1_equals_single_anchored_solve():
    data = lqr_data(30, seed=6)
    basis, baseline, _ = lqr_pieces()
    result = run_lmi_qli(data, baseline, basis, GAMMA, tau=1)
    layout = ThetaLayout(2, 1, 30)
    system = build_residual_exprs(data, baseline, basis, GAMMA, layout)
    problem = build_qli_problem(system, QliAnchors.identity(2, 1), 1e-6)
    res = conic.solve(problem)
    direct = layout.decode_params(res.y)
    assert np.allclose(
        params_to_vector(result.params), params_to_vector(direct), atol=1e-9
    )
    assert len(result.solve_log) == 1
    assert result.method == "lmi-qli"
    assert result.relaxed_cost is None


def test_run_qli_recovers_lqr_gain():
    data = lqr_data(60, seed=3)
    basis, baseline, model = lqr_pieces()
    _, k_star = solve_dare(model)
    result = run_lmi_qli(data, baseline, basis, GAMMA, tau=20)
    assert np.max(np.abs(result.policy.coef + k_star)) <= 1e-3
    assert result.upper_bound_cost <= 1e-4
    assert all(row.status == "optimal" for row in result.solve_log)


def test_qli_anchor_fixed_point():
    # once converged, re-anchoring reproduces theta and the anchored cost
    # agrees with the original l1 objective
    data = lqr_data(60, seed=3)
    basis, baseline, _ = lqr_pieces()
    result = run_lmi_qli(data, baseline, basis, GAMMA, tau=30)
    star = result.params
    layout = ThetaLayout(2, 1, 60)
    system = build_residual_exprs(data, baseline, basis, GAMMA, layout)
    problem = build_qli_problem(system, QliAnchors.from_params(star), 1e-6)
    res = conic.solve(problem)
    assert res.status is SolveStatus.OPTIMAL
    resolved = layout.decode_params(res.y)
    assert np.max(np.abs(params_to_vector(resolved) - params_to_vector(star))) <= 1e-8
    assert abs(res.objective - l1_cost(star, baseline, basis, data, GAMMA)) <= 1e-6


def test_run_qli_tau_validation():
    data = lqr_data(4, seed=0)
    basis, baseline, _ = lqr_pieces()
    with pytest.raises(ValueError):
        run_lmi_qli(data, baseline, basis, GAMMA, tau=0)


def test_run_qli_first_iteration_failure_raises():
    data = lqr_data(20, seed=1)
    basis, baseline, _ = lqr_pieces()
    starved = SolveSettings(max_iter=1)
    with pytest.raises(SynthesisError, match="iteration 1"):
        run_lmi_qli(data, baseline, basis, GAMMA, tau=3, settings=starved)


def test_run_qli_later_failure_keeps_last_params(monkeypatch):
    data = lqr_data(20, seed=1)
    basis, baseline, _ = lqr_pieces()
    reference = run_lmi_qli(data, baseline, basis, GAMMA, tau=1)

    calls = {"n": 0}
    real_solve = conic.solve

    def flaky(problem, settings=None):
        calls["n"] += 1
        res = real_solve(problem, settings)
        if calls["n"] >= 2:
            return dataclasses.replace(res, status=SolveStatus.NUMERICAL_FAILURE)
        return res

    monkeypatch.setattr(synthesis.conic, "solve", flaky)
    result = run_lmi_qli(data, baseline, basis, GAMMA, tau=5)
    assert np.allclose(
        params_to_vector(result.params), params_to_vector(reference.params),
        atol=1e-12,
    )
    assert len(result.solve_log) == 2
    assert result.solve_log[1].status == "numerical_failure"


def test_build_lmi_ql_structure():
    data = lqr_data(2, seed=0)
    basis, baseline, _ = lqr_pieces()
    layout = ThetaLayout(2, 1, 2)
    system = build_residual_exprs(data, baseline, basis, GAMMA, layout)

    problem = build_lmi_ql_problem(system, 0.5, 1e-6, use_extra_lmi=True)
    assert len(problem.scalar_ineqs) == 4
    assert len(problem.psd_blocks) == 3
    schur = problem.psd_blocks[0]
    m = layout.w_dim
    assert schur[0][0].coeffs == {layout.w_index(0, 0): 1.0}
    assert schur[0][m].coeffs == {layout.s_index(0, 2): 1.0}  # S_xu entry
    assert schur[2][m].coeffs == {layout.r_u_index(0): -0.5}  # -R_u/2 row
    assert schur[m][m].coeffs == {layout.s_index(2, 2): 1.0}  # S_uu corner
    # objective: sum t + lam * tr W
    assert problem.objective.coeffs[layout.t_index(0)] == 1.0
    assert problem.objective.coeffs[layout.w_index(1, 1)] == 0.5
    assert layout.w_index(0, 1) not in problem.objective.coeffs

    bare = build_lmi_ql_problem(system, 0.0, 1e-6, use_extra_lmi=False)
    assert len(bare.psd_blocks) == 2
    assert all(i not in bare.objective.coeffs
               for i in (layout.w_index(0, 0), layout.w_index(1, 1), layout.w_index(2, 2)))

    with pytest.raises(ValueError):
        build_lmi_ql_problem(system, -0.1, 1e-6, use_extra_lmi=True)


def test_relaxation_lower_bounds_feasible_points():
    # lam = 0 optimum <= l1 cost of any feasible theta; looser gap tolerance
    # because the optimal face is unbounded along the (T, W_22) direction
    data = lqr_data(40, seed=3)
    basis, baseline, _ = lqr_pieces()
    cfg = LmiQlConfig(lambda_grid=(0.0,), solver=SolveSettings(gap_tol=1e-6))
    result = run_lmi_ql(data, baseline, basis, GAMMA, cfg)
    assert result.solve_log[0].status == "optimal"
    rng = np.random.default_rng(11)
    for _ in range(20):
        params = random_feasible_params(rng, 2, 1)
        assert result.relaxed_cost <= l1_cost(params, baseline, basis, data, GAMMA) + 1e-8
    # projecting the relaxed solution can only increase the cost
    assert project_upper_bound(result.params, data, baseline, basis, GAMMA) >= (
        result.relaxed_cost - 1e-8
    )


def test_run_lmi_ql_bracket_and_line_search():
    data = lqr_data(60, seed=11)
    basis, baseline, model = lqr_pieces()
    _, k_star = solve_dare(model)
    result = run_lmi_ql(data, baseline, basis, GAMMA)
    assert result.method == "lmi-ql"
    assert result.relaxed_cost <= result.upper_bound_cost + 1e-6
    assert np.max(np.abs(result.policy.coef + k_star)) <= 1e-3
    assert result.upper_bound_cost <= 1e-4
    solved_uppers = [row.upper_bound for row in result.solve_log
                     if row.upper_bound is not None]
    assert result.upper_bound_cost == min(solved_uppers)


def test_epigraph_tightness_and_nuclear_norm():
    data = lqr_data(40, seed=3)
    basis, baseline, _ = lqr_pieces()
    layout = ThetaLayout(2, 1, 40)
    system = build_residual_exprs(data, baseline, basis, GAMMA, layout)
    problem = build_lmi_ql_problem(system, 0.1, 1e-6, use_extra_lmi=True)
    settings = SolveSettings()
    res = conic.solve(problem, settings)
    assert res.status is SolveStatus.OPTIMAL
    for k in range(len(data)):
        z = system.residual_exprs[k].value(res.y)
        t = res.y[layout.t_index(k)]
        assert t - abs(z) <= 10 * settings.feas_tol
    w = layout.decode_w(res.y)
    nuclear = float(np.linalg.svd(w, compute_uv=False).sum())
    assert abs(nuclear - np.trace(w)) <= 1e-8


def test_project_upper_bound_shift_invariance():
    data = lqr_data(25, seed=8)
    basis, baseline, _ = lqr_pieces()
    rng = np.random.default_rng(3)
    params = random_feasible_params(rng, 2, 1)
    base_val = project_upper_bound(params, data, baseline, basis, GAMMA)
    c = 3.7
    shifted_data = Dataset(data.X, data.U, data.R + c, data.X_plus, data.seed, "")
    shifted_params = QParams(
        params.T + c / (1.0 - GAMMA), params.R_x, params.R_u, params.S
    )
    shifted_val = project_upper_bound(shifted_params, shifted_data, baseline,
                                      basis, GAMMA)
    assert abs(shifted_val - base_val) <= 1e-9 * max(1.0, abs(base_val))


def test_config_validation():
    with pytest.raises(ValueError):
        LmiQlConfig(lambda_grid=())
    with pytest.raises(ValueError):
        LmiQlConfig(lambda_grid=(1.0, 0.5))
    with pytest.raises(ValueError):
        LmiQlConfig(lambda_grid=(-1.0, 0.0))
    with pytest.raises(ValueError):
        LmiQlConfig(epsilon_pd=0.0)


def test_run_lmi_ql_all_failures_raise():
    data = lqr_data(20, seed=1)
    basis, baseline, _ = lqr_pieces()
    cfg = LmiQlConfig(lambda_grid=(1e-2, 1.0), solver=SolveSettings(max_iter=1))
    with pytest.raises(SynthesisError, match="every lambda candidate failed"):
        run_lmi_ql(data, baseline, basis, GAMMA, cfg)


def test_run_lmi_ql_with_model_baseline():
    # an inaccurate baseline changes the parametrization, not the recovered
    # control law, as long as its value matrix is optimistic (P_bar < P*,
    # here via an overestimated input gain): S > 0 requires the greedy-value
    # correction x'(P_bar - P*)x to be concave
    data = lqr_data(60, seed=11)
    basis, _, model = lqr_pieces()
    wrong = LinearModel(A_SYS * 0.95, B_SYS * 1.5, model.Q_cost, model.R_cost, GAMMA)
    baseline = make_baseline(wrong, basis)
    p_star, k_star = solve_dare(model)
    p_bar, _ = solve_dare(wrong)
    assert np.linalg.eigvalsh(p_star - p_bar)[0] > 0  # fixture sanity
    result = run_lmi_ql(data, baseline, basis, GAMMA)
    greedy_gain = result.policy.coef  # phi(x) = x, so coef is the state gain
    assert np.max(np.abs(greedy_gain + k_star)) <= 1e-3


def test_train_result_roundtrip(tmp_path):
    data = lqr_data(25, seed=8)
    basis, baseline, _ = lqr_pieces()
    cfg = LmiQlConfig(lambda_grid=(1e-2, 1.0))
    result = run_lmi_ql(data, baseline, basis, GAMMA, cfg)
    path = tmp_path / "result.json"
    save_train_result(result, path)
    loaded = load_train_result(path)
    assert loaded.method == result.method
    assert loaded.relaxed_cost == result.relaxed_cost
    assert loaded.upper_bound_cost == result.upper_bound_cost
    assert np.array_equal(params_to_vector(loaded.params),
                          params_to_vector(result.params))
    assert np.array_equal(loaded.policy.coef, result.policy.coef)
    assert np.array_equal(loaded.policy.offset, result.policy.offset)
    assert [r.lam for r in loaded.solve_log] == [r.lam for r in result.solve_log]
    assert [r.status for r in loaded.solve_log] == [r.status for r in result.solve_log]
    with pytest.raises(ValueError):
        bad = tmp_path / "bad.json"
        bad.write_text('{"format": "something-else"}')
        load_train_result(bad)


def test_epigraph_system_metadata():
    data = lqr_data(4, seed=9)
    basis, baseline, _ = lqr_pieces()
    layout = ThetaLayout(2, 1, 4)
    system = build_residual_exprs(data, baseline, basis, GAMMA, layout)
    assert isinstance(system, EpigraphSystem)
    assert system.gamma == GAMMA
    assert list(system.t_vars) == [layout.t_index(k) for k in range(4)]
    assert "seed=9" in system.data_ref
