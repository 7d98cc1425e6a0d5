"""Tests for the Monte-Carlo learning-curve harness and curve files."""

import dataclasses
import math

import numpy as np
import pytest

from lmiql import harness
from lmiql.env import PendulumConfig, RewardSpec, UniformInit, generate_dataset
from lmiql.harness import (
    CSV_HEADER,
    ExperimentConfig,
    LearningCurvePoint,
    baseline_loop_radius,
    build_baseline,
    child_seed,
    emit_curves,
    load_config,
    load_curves,
    run_experiment,
    save_config,
)


def small_config(**over):
    """Fast settings shared by most harness tests."""
    base = dict(
        methods=("baseline-only",),
        subset_sizes=(0, 5, 10),
        n_monte_carlo=2,
        eval_horizon=20,
    )
    base.update(over)
    return ExperimentConfig(**base)


# ---------------------------------------------------------------------------
# configuration

def test_config_defaults_are_valid():
    config = ExperimentConfig()
    assert config.n_full == 500
    assert config.methods == harness.METHODS
    assert config.subset_sizes == (0, 25, 50, 100, 200, 300, 400, 500)


def test_config_validation_errors():
    with pytest.raises(ValueError, match="unknown methods"):
        ExperimentConfig(methods=("lmi-ql", "sarsa"))
    with pytest.raises(ValueError, match="duplicates"):
        ExperimentConfig(methods=("lspi", "lspi"))
    with pytest.raises(ValueError, match="non-empty"):
        ExperimentConfig(methods=())
    with pytest.raises(ValueError, match="increasing"):
        ExperimentConfig(subset_sizes=(0, 50, 50))
    with pytest.raises(ValueError, match="nonnegative"):
        ExperimentConfig(subset_sizes=(-5, 10))
    with pytest.raises(ValueError, match="n_monte_carlo"):
        ExperimentConfig(n_monte_carlo=0)
    with pytest.raises(ValueError, match="gamma"):
        ExperimentConfig(gamma=1.5)
    with pytest.raises(ValueError, match="ci_method"):
        ExperimentConfig(ci_method="student-t")
    with pytest.raises(ValueError, match="both or neither"):
        ExperimentConfig(baseline_m=None, baseline_l=0.3)
    with pytest.raises(ValueError, match="3x3"):
        ExperimentConfig(reward_m=np.eye(2))


def test_config_dict_roundtrip():
    config = small_config(methods=("oracle", "lspi"), ci_method="bootstrap",
                          lambda_grid=(1e-3, 1e-1), base_seed=42)
    again = ExperimentConfig.from_dict(config.to_dict())
    assert again.to_dict() == config.to_dict()
    assert again.methods == ("oracle", "lspi")
    assert again.lambda_grid == (1e-3, 1e-1)
    assert isinstance(again.pendulum, PendulumConfig)


def test_config_rejects_unknown_keys():
    raw = ExperimentConfig().to_dict()
    raw["subset_size"] = [0, 10]
    with pytest.raises(ValueError, match="subset_size"):
        ExperimentConfig.from_dict(raw)


def test_config_file_roundtrip(tmp_path):
    config = small_config(base_seed=7, reward_m=np.diag([2.0, 0.3, 0.01]))
    path = tmp_path / "exp.json"
    save_config(config, path)
    again = load_config(path)
    assert again.to_dict() == config.to_dict()


def test_load_config_bad_json(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    with pytest.raises(ValueError, match="broken.json"):
        load_config(path)


def test_child_seed_deterministic_and_distinct():
    assert child_seed(3, 1, 0) == child_seed(3, 1, 0)
    seeds = {child_seed(3, run, k) for run in range(50) for k in (0, 1)}
    assert len(seeds) == 100


# ---------------------------------------------------------------------------
# baseline construction

def test_build_baseline_wrong_model():
    baseline, basis = build_baseline(ExperimentConfig())
    assert baseline.k_coef.shape == (1, 3)
    assert baseline.k_coef[0, 2] == 0.0  # linear model puts nothing on sin(x1)
    assert np.linalg.eigvalsh(baseline.p_bar)[0] > 0
    assert not baseline.zero_flag


def test_build_baseline_zero_fallback():
    baseline, _ = build_baseline(ExperimentConfig(baseline_m=None, baseline_l=None))
    assert baseline.zero_flag
    assert baseline.value([1.0, 2.0]) == 0.0


def test_baseline_loop_radius_wrong_vs_true_model():
    config = ExperimentConfig()
    wrong_baseline, _ = build_baseline(config)
    rho_wrong = baseline_loop_radius(wrong_baseline, config.pendulum)

    true_config = dataclasses.replace(
        config, baseline_m=config.pendulum.m, baseline_l=config.pendulum.l
    )
    true_baseline, _ = build_baseline(true_config)
    rho_true = baseline_loop_radius(true_baseline, config.pendulum)

    # the mismatched model leaves the true plant unstable; the right one closes
    # a stable loop
    assert rho_true < 1.0
    assert rho_wrong > rho_true


def test_baseline_loop_radius_rejects_other_bases():
    baseline, _ = build_baseline(ExperimentConfig())
    clipped = dataclasses.replace(baseline, k_coef=baseline.k_coef[:, :2])
    with pytest.raises(ValueError, match="3-feature"):
        baseline_loop_radius(clipped, PendulumConfig())


# ---------------------------------------------------------------------------
# run_experiment

def test_oracle_curve_is_flat():
    config = small_config(methods=("oracle",))
    points = run_experiment(config)
    assert len(points) == 3
    means = {p.mean_reward for p in points}
    assert len(means) == 1
    assert all(p.n_excluded == 0 and p.n_total == 2 for p in points)
    assert all(p.ci95_low <= p.mean_reward <= p.ci95_high for p in points)


def test_single_run_degenerate_ci():
    config = small_config(subset_sizes=(0,), n_monte_carlo=1)
    points = run_experiment(config)
    assert len(points) == 1
    p = points[0]
    assert p.n_total == 1 and p.n_excluded == 0
    assert p.ci95_low == p.mean_reward == p.ci95_high
    again = run_experiment(config)[0]
    assert again.mean_reward == p.mean_reward


def test_eval_seeds_shared_across_methods():
    # at n=0 both methods run the same baseline policy, so identical
    # disturbances mean identical rewards run by run
    config = small_config(methods=("baseline-only", "lmi-ql"), subset_sizes=(0,),
                          n_monte_carlo=3)
    points, records = run_experiment(config, collect_records=True)
    by_method = {}
    for r in records:
        by_method.setdefault(r.method, []).append(r.reward)
    assert by_method["baseline-only"] == by_method["lmi-ql"]
    assert points[0].mean_reward == points[1].mean_reward


def test_lspi_starts_from_zero_policy():
    config = small_config(methods=("lspi", "baseline-only"), subset_sizes=(0,),
                          n_monte_carlo=1)
    _, records = run_experiment(config, collect_records=True)
    rewards = {r.method: r.reward for r in records}
    # zero policy lets the pendulum fall; the baseline at least fights it
    assert rewards["lspi"] != rewards["baseline-only"]


def test_training_failure_is_excluded_not_fatal(monkeypatch):
    def flaky(subset, *args, **kwargs):
        if len(subset) >= 10:
            raise RuntimeError("synthetic failure")
        return real_lspi(subset, *args, **kwargs)

    real_lspi = harness.lspi_train
    monkeypatch.setattr(harness, "lspi_train", flaky)
    config = small_config(methods=("lspi", "baseline-only"))
    points, records = run_experiment(config, collect_records=True)

    bad = [r for r in records if r.status != "ok"]
    assert all(r.method == "lspi" and r.n_data == 10 for r in bad)
    assert len(bad) == config.n_monte_carlo
    assert sum(p.n_excluded for p in points) == len(bad)
    lspi_10 = [p for p in points if p.method == "lspi" and p.n_data == 10][0]
    assert lspi_10.n_excluded == lspi_10.n_total == config.n_monte_carlo
    assert math.isnan(lspi_10.mean_reward)


def test_diverged_rollouts_are_excluded():
    # an impossible velocity envelope makes every evaluation diverge
    config = small_config(subset_sizes=(0,), vel_limit=1e-9, x0=(0.5, 0.0))
    points, records = run_experiment(config, collect_records=True)
    assert all(r.status == "diverged" for r in records)
    p = points[0]
    assert p.n_excluded == p.n_total == config.n_monte_carlo
    assert math.isnan(p.mean_reward) and math.isnan(p.ci95_low)


def test_exclusion_accounting_matches_records():
    config = small_config(methods=("baseline-only", "oracle"))
    points, records = run_experiment(config, collect_records=True)
    bad = sum(1 for r in records if r.status != "ok")
    assert sum(p.n_excluded for p in points) == bad
    assert sum(p.n_total for p in points) == len(records)


def test_dataset_prefix_property(monkeypatch):
    seen = []

    def spy(subset, *args, **kwargs):
        seen.append(subset)
        return real_lspi(subset, *args, **kwargs)

    real_lspi = harness.lspi_train
    monkeypatch.setattr(harness, "lspi_train", spy)
    config = small_config(methods=("lspi",), subset_sizes=(5, 10), n_monte_carlo=1)
    run_experiment(config)

    full = generate_dataset(
        config.pendulum, RewardSpec(config.reward_m), 10,
        seed=child_seed(config.base_seed, 0, 0),
        init_sampler=UniformInit(config.init_low, config.init_high),
        explore_std=config.explore_std,
    )
    scale = harness.reward_scale(full)
    assert [len(s) for s in seen] == [5, 10]
    for s in seen:
        np.testing.assert_array_equal(s.X, full.X[: len(s)])
        np.testing.assert_array_equal(s.U, full.U[: len(s)])
        np.testing.assert_array_equal(s.R, full.R[: len(s)] / scale)
        np.testing.assert_array_equal(s.X_plus, full.X_plus[: len(s)])


def test_reward_normalization_preserves_greedy_policies():
    from lmiql.baselines import lspi_train
    from lmiql.harness import scaled_training_problem

    config = ExperimentConfig()
    baseline, basis = build_baseline(config)
    raw = generate_dataset(
        config.pendulum, RewardSpec(config.reward_m), 60, seed=21,
        init_sampler=UniformInit(config.init_low, config.init_high),
        explore_std=config.explore_std,
    )
    scaled, scaled_baseline, scale = scaled_training_problem(raw, baseline)
    assert scale > 1.0
    assert float(np.max(np.abs(scaled.R))) == 1.0
    np.testing.assert_allclose(scaled_baseline.p_bar * scale, baseline.p_bar)

    res_raw = lspi_train(raw, baseline, basis, config.gamma)
    res_scaled = lspi_train(scaled, scaled_baseline, basis, config.gamma)
    np.testing.assert_allclose(res_scaled.policy.coef, res_raw.policy.coef,
                               rtol=0, atol=1e-6)
    np.testing.assert_allclose(res_scaled.policy.offset, res_raw.policy.offset,
                               rtol=0, atol=1e-6)


def test_small_rewards_are_not_rescaled():
    from lmiql.harness import scaled_training_problem

    config = ExperimentConfig()
    baseline, _ = build_baseline(config)
    tiny = generate_dataset(
        config.pendulum, RewardSpec(config.reward_m * 1e-6), 10, seed=2,
        init_sampler=UniformInit(config.init_low, config.init_high),
    )
    same, same_baseline, scale = scaled_training_problem(tiny, baseline)
    assert scale == 1.0
    assert same is tiny and same_baseline is baseline


def test_points_sorted_and_complete():
    config = small_config(methods=("oracle", "baseline-only"))
    points = run_experiment(config)
    keys = [(p.method, p.n_data) for p in points]
    assert keys == sorted(keys)
    assert len(points) == len(config.methods) * len(config.subset_sizes)


def test_bootstrap_ci_brackets_mean_and_is_deterministic():
    config = small_config(methods=("oracle",), subset_sizes=(0,),
                          n_monte_carlo=4, ci_method="bootstrap", n_bootstrap=200)
    first = run_experiment(config)[0]
    second = run_experiment(config)[0]
    assert first.ci95_low <= first.mean_reward <= first.ci95_high
    assert first.ci95_low < first.ci95_high
    assert (first.ci95_low, first.ci95_high) == (second.ci95_low, second.ci95_high)


def test_sdp_methods_report_epigraph_tightness():
    config = small_config(methods=("lmi-ql", "lmi-qli"), subset_sizes=(0, 25),
                          n_monte_carlo=1)
    _, records = run_experiment(config, collect_records=True)
    trained = [r for r in records if r.n_data == 25]
    assert len(trained) == 2
    for r in trained:
        assert r.status == "ok"
        assert r.tightness is not None
        assert r.tightness <= 1e-6
    untrained = [r for r in records if r.n_data == 0]
    assert all(r.tightness is None for r in untrained)


# ---------------------------------------------------------------------------
# curve points and files

def test_curve_point_invariants():
    with pytest.raises(ValueError, match="n_excluded"):
        LearningCurvePoint("lspi", 10, -1.0, -2.0, 0.0, 5, 4)
    with pytest.raises(ValueError, match="ci95_low"):
        LearningCurvePoint("lspi", 10, -1.0, -0.5, 0.0, 0, 4)


def make_points():
    return [
        LearningCurvePoint("lspi", 50, -3.25, -4.0, -2.5, 1, 20),
        LearningCurvePoint("lmi-ql", 0, -1.0 / 3.0, -0.5, -0.25, 0, 20),
        LearningCurvePoint("lspi", 0, -7.125, -7.125, -7.125, 0, 20),
    ]


def test_emit_curves_header_sorting_and_roundtrip(tmp_path):
    path = tmp_path / "curves.csv"
    emit_curves(make_points(), path)
    lines = path.read_text().splitlines()
    assert lines[0] == CSV_HEADER
    assert len(lines) == 4
    assert [ln.split(",")[0] for ln in lines[1:]] == ["lmi-ql", "lspi", "lspi"]
    assert [ln.split(",")[1] for ln in lines[1:]] == ["0", "0", "50"]

    again = load_curves(path)
    assert again == sorted(make_points(), key=lambda p: (p.method, p.n_data))


def test_emit_curves_deterministic_bytes(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    emit_curves(make_points(), a)
    emit_curves(list(reversed(make_points())), b)
    assert a.read_bytes() == b.read_bytes()


def test_emit_curves_single_point(tmp_path):
    path = tmp_path / "one.csv"
    emit_curves(make_points()[:1], path)
    assert len(path.read_text().splitlines()) == 2


def test_emit_curves_rejects_empty(tmp_path):
    with pytest.raises(ValueError, match="no curve points"):
        emit_curves([], tmp_path / "empty.csv")


def test_emit_curves_full_precision(tmp_path):
    point = LearningCurvePoint("oracle", 500, -57.01310982374129,
                               -57.013109823741295, -57.01310982374128, 0, 20)
    path = tmp_path / "precise.csv"
    emit_curves([point], path)
    again = load_curves(path)[0]
    assert again.mean_reward == point.mean_reward
    assert again.ci95_low == point.ci95_low
    assert again.ci95_high == point.ci95_high


def test_load_curves_rejects_bad_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("method,n data,mean\noracle,0,-1.0\n")
    with pytest.raises(ValueError, match="header"):
        load_curves(path)


def test_load_curves_rejects_short_row(tmp_path):
    path = tmp_path / "short.csv"
    path.write_text(CSV_HEADER + "\noracle,0,-1.0\n")
    with pytest.raises(ValueError, match="malformed"):
        load_curves(path)


def test_nan_points_survive_emit_and_load(tmp_path):
    point = LearningCurvePoint("lspi", 25, math.nan, math.nan, math.nan, 2, 2)
    path = tmp_path / "nan.csv"
    emit_curves([point], path)
    again = load_curves(path)[0]
    assert math.isnan(again.mean_reward)
    assert again.n_excluded == 2
