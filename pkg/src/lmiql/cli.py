"""Command-line front end: datasets, training, evaluation, experiments.

Subcommands
    generate-data   env config + seed -> transition dataset file
    train           dataset + env config + method -> train-result file
    evaluate        train-result + env config -> closed-loop metrics
    experiment      experiment config -> learning-curve CSV
    verify          analytic self-checks, one PASS/FAIL line each

Every subcommand accepts --seed, --out and --config.  Environment
config files are JSON objects with a "kind" discriminator; unknown keys
are rejected to catch typos.  All fields except "kind" (and, for the
linear kind, the system matrices) have defaults.

    {"kind": "pendulum",
     "pendulum": {"m": 0.1, "l": 1.0, "g_const": 9.81, "d": 0.1,
                  "Ts": 0.01, "sigma_w": 2.5e-5, "sigma_v": 1e-4},
     "reward_m": [[1,0,0],[0,0.1,0],[0,0,0.001]], "gamma": 0.98,
     "baseline_m": 0.01, "baseline_l": 0.3,
     "explore_std": 3.1623, "init_low": [-3.1416, -2.0],
     "init_high": [3.1416, 2.0], "n_samples": 500,
     "x0": [1.5708, 0.0], "horizon": 100}

    {"kind": "linear", "A": [[0.7,0.1],[0,0.6]], "B": [[0],[1]],
     "reward_m": [[1,0,0],[0,1,0],[0,0,0.5]], "gamma": 0.98,
     "baseline": null, "explore_std": 1.0, "sigma_w": 0.0,
     "init_low": [-2,-2], "init_high": [2,2], "n_samples": 200,
     "x0": [1,1], "horizon": 100}

Training knobs can ride along in either kind: "tau", "lspi_iterations",
"lspi_ridge", "lambda_grid", "epsilon_pd".  The experiment subcommand
takes the learning-curve sweep schema instead (see the harness module);
--print-config echoes its normalized form.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from dataclasses import dataclass

import numpy as np

from .baselines import (
    LinearModel,
    LspiConfig,
    lspi_train,
    make_baseline,
    model_from_reward,
    solve_dare,
)
from .env import (
    PendulumConfig,
    RewardSpec,
    UniformInit,
    generate_dataset,
    generate_linear_dataset,
    linearize_pendulum,
    linear_rollout,
    load_dataset,
    pendulum_basis,
    rollout,
    save_dataset,
)
from .harness import ExperimentConfig, emit_curves, run_experiment
from .qmodel import (
    greedy_action,
    greedy_value,
    identity_basis,
    q_value,
    QParams,
)
from .synthesis import (
    LmiQlConfig,
    load_train_result,
    run_lmi_ql,
    run_lmi_qli,
    save_train_result,
)

logger = logging.getLogger(__name__)


class CliError(Exception):
    """User-facing failure: printed as a one-line diagnostic, exit 1."""


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: not valid JSON ({exc})") from exc


def _require(args, flag):
    value = getattr(args, flag.replace("-", "_"))
    if value is None:
        raise CliError(f"{args.command} needs --{flag}")
    return value


# ---------------------------------------------------------------------------
# environment configs

_SHARED_KEYS = {
    "kind", "reward_m", "gamma", "explore_std", "init_low", "init_high",
    "n_samples", "x0", "horizon", "tau", "lspi_iterations", "lspi_ridge",
    "lambda_grid", "epsilon_pd",
}
_PENDULUM_KEYS = _SHARED_KEYS | {"pendulum", "baseline_m", "baseline_l"}
_LINEAR_KEYS = _SHARED_KEYS | {"A", "B", "baseline", "sigma_w"}


@dataclass
class EnvSetup:
    """Resolved environment config shared by the data/train/evaluate paths."""

    kind: str
    spec: RewardSpec
    gamma: float
    basis: object
    baseline: object
    init: UniformInit
    explore_std: float
    n_samples: int
    x0: np.ndarray
    horizon: int
    tau: int = 20
    lspi_iterations: int = 20
    lspi_ridge: float = 1e-8
    lambda_grid: tuple = None
    epsilon_pd: float = 1e-6
    pendulum: PendulumConfig = None
    a_mat: np.ndarray = None
    b_mat: np.ndarray = None
    sigma_w: float = 0.0


def _training_knobs(raw):
    grid = raw.get("lambda_grid")
    return dict(
        tau=int(raw.get("tau", 20)),
        lspi_iterations=int(raw.get("lspi_iterations", 20)),
        lspi_ridge=float(raw.get("lspi_ridge", 1e-8)),
        lambda_grid=None if grid is None else tuple(float(v) for v in grid),
        epsilon_pd=float(raw.get("epsilon_pd", 1e-6)),
    )


def _setup_env(raw):
    kind = raw.get("kind")
    if kind == "pendulum":
        unknown = sorted(set(raw) - _PENDULUM_KEYS)
        if unknown:
            raise CliError(f"unknown pendulum config keys: {unknown}")
        pend = PendulumConfig(**raw.get("pendulum", {}))
        spec = RewardSpec(np.asarray(raw.get("reward_m", np.diag([1.0, 0.1, 1e-3])), float))
        gamma = float(raw.get("gamma", 0.98))
        basis = pendulum_basis()
        b_m = raw.get("baseline_m", 0.01)
        b_l = raw.get("baseline_l", 0.3)
        if (b_m is None) != (b_l is None):
            raise CliError("set both or neither of baseline_m, baseline_l")
        if b_m is None:
            baseline = make_baseline(None, basis, n_u=1)
        else:
            wrong = dataclasses.replace(pend, m=float(b_m), l=float(b_l))
            a_bar, b_bar = linearize_pendulum(wrong)
            baseline = make_baseline(model_from_reward(a_bar, b_bar, spec, gamma), basis)
        return EnvSetup(
            kind=kind, spec=spec, gamma=gamma, basis=basis, baseline=baseline,
            init=UniformInit(raw.get("init_low", [-math.pi, -2.0]),
                             raw.get("init_high", [math.pi, 2.0])),
            explore_std=float(raw.get("explore_std", math.sqrt(10.0))),
            n_samples=int(raw.get("n_samples", 500)),
            x0=np.asarray(raw.get("x0", [math.pi / 2.0, 0.0]), float),
            horizon=int(raw.get("horizon", 100)),
            pendulum=pend, **_training_knobs(raw),
        )
    if kind == "linear":
        unknown = sorted(set(raw) - _LINEAR_KEYS)
        if unknown:
            raise CliError(f"unknown linear config keys: {unknown}")
        if "A" not in raw or "B" not in raw or "reward_m" not in raw:
            raise CliError("linear config needs A, B and reward_m")
        a_mat = np.atleast_2d(np.asarray(raw["A"], float))
        b_mat = np.atleast_2d(np.asarray(raw["B"], float))
        n_x, n_u = a_mat.shape[0], b_mat.shape[1]
        spec = RewardSpec(np.asarray(raw["reward_m"], float))
        gamma = float(raw.get("gamma", 0.98))
        basis = identity_basis(n_x)
        bl = raw.get("baseline")
        if bl is None:
            baseline = make_baseline(None, basis, n_u=n_u)
        else:
            model = model_from_reward(np.asarray(bl["A"], float),
                                      np.asarray(bl["B"], float), spec, gamma)
            baseline = make_baseline(model, basis)
        return EnvSetup(
            kind=kind, spec=spec, gamma=gamma, basis=basis, baseline=baseline,
            init=UniformInit(raw.get("init_low", [-2.0] * n_x),
                             raw.get("init_high", [2.0] * n_x)),
            explore_std=float(raw.get("explore_std", 1.0)),
            n_samples=int(raw.get("n_samples", 200)),
            x0=np.asarray(raw.get("x0", np.ones(n_x)), float),
            horizon=int(raw.get("horizon", 100)),
            a_mat=a_mat, b_mat=b_mat, sigma_w=float(raw.get("sigma_w", 0.0)),
            **_training_knobs(raw),
        )
    raise CliError(f"config must set kind to 'pendulum' or 'linear', got {kind!r}")


# ---------------------------------------------------------------------------
# subcommands

def cmd_generate_data(args):
    env = _setup_env(_read_json(_require(args, "config")))
    out = _require(args, "out")
    n = args.n if args.n is not None else env.n_samples
    seed = args.seed if args.seed is not None else 0
    if env.kind == "pendulum":
        data = generate_dataset(env.pendulum, env.spec, n, seed,
                                init_sampler=env.init, explore_std=env.explore_std)
    else:
        data = generate_linear_dataset(env.a_mat, env.b_mat, env.spec, n, seed,
                                       env.init, env.explore_std, env.sigma_w)
    save_dataset(data, out)
    print(f"wrote {len(data)} transitions to {out}")
    return 0


def cmd_train(args):
    env = _setup_env(_read_json(_require(args, "config")))
    data = load_dataset(_require(args, "data"))
    out = _require(args, "out")
    if args.method == "lmi-ql":
        lmi = LmiQlConfig(epsilon_pd=env.epsilon_pd)
        if env.lambda_grid is not None:
            lmi = LmiQlConfig(lambda_grid=env.lambda_grid, epsilon_pd=env.epsilon_pd)
        result = run_lmi_ql(data, env.baseline, env.basis, env.gamma, lmi)
    elif args.method == "lmi-qli":
        result = run_lmi_qli(data, env.baseline, env.basis, env.gamma,
                             tau=env.tau, epsilon_pd=env.epsilon_pd)
    else:
        result = lspi_train(data, env.baseline, env.basis, env.gamma,
                            LspiConfig(iterations=env.lspi_iterations,
                                       ridge=env.lspi_ridge))
    save_train_result(result, out)
    relaxed = "-" if result.relaxed_cost is None else repr(result.relaxed_cost)
    print(f"{args.method}: upper_bound_cost={result.upper_bound_cost!r} "
          f"relaxed_cost={relaxed} -> {out}")
    return 0


def cmd_evaluate(args):
    env = _setup_env(_read_json(_require(args, "config")))
    result = load_train_result(_require(args, "policy"))
    seed = args.seed if args.seed is not None else 0
    policy = lambda x: result.policy.act(env.basis, x)
    if env.kind == "pendulum":
        run = rollout(policy, env.pendulum, env.spec, env.x0, env.horizon,
                      seed, env.gamma)
    else:
        run = linear_rollout(policy, env.a_mat, env.b_mat, env.spec, env.x0,
                             env.horizon, seed, env.gamma, sigma_w=env.sigma_w)
    metrics = {
        "method": result.method,
        "cumulative_reward": run.cumulative_reward,
        "diverged": run.diverged,
        "horizon": env.horizon,
    }
    if env.kind == "linear":
        # reference gain from the true model: policy u = coef x should match -K
        _, k_gain = solve_dare(model_from_reward(env.a_mat, env.b_mat,
                                                 env.spec, env.gamma))
        metrics["gain_error"] = float(np.max(np.abs(result.policy.coef + k_gain)))
        metrics["offset_error"] = float(np.max(np.abs(result.policy.offset)))
    for key, value in metrics.items():
        print(f"{key}={value!r}")
    if args.out is not None:
        with open(args.out, "w") as fh:
            json.dump(metrics, fh, indent=2)
            fh.write("\n")
    return 0


def cmd_experiment(args):
    raw = _read_json(_require(args, "config"))
    if args.seed is not None:
        raw = {**raw, "base_seed": args.seed}
    config = ExperimentConfig.from_dict(raw)
    if args.print_config:
        print(json.dumps(config.to_dict(), indent=2, sort_keys=True))
        if args.out is None:
            return 0
    out = _require(args, "out")
    points = run_experiment(config)
    emit_curves(points, out)
    print(f"wrote {len(points)} curve points to {out}")
    return 0


# ---------------------------------------------------------------------------
# self checks

def _check_greedy_identity(rng):
    basis = identity_basis(2)
    baseline = make_baseline(None, basis, n_u=1)
    worst = 0.0
    for _ in range(200):
        g = rng.normal(size=(3, 3))
        s = g @ g.T + 0.5 * np.eye(3)
        params = QParams(rng.normal(), rng.normal(size=2), rng.normal(size=1), s)
        x = rng.uniform(-3.0, 3.0, size=2)
        direct = q_value(params, baseline, basis, x,
                         greedy_action(params, baseline, basis, x))
        closed = greedy_value(params, baseline, basis, x)
        worst = max(worst, abs(direct - closed) / max(1.0, abs(closed)))
    return worst <= 1e-9, f"max relative gap {worst:.3e}"


def _check_dare_golden_ratio(rng):
    one = np.eye(1)
    p, _ = solve_dare(LinearModel(one, one, one, one, 1.0))
    gap = abs(float(p[0, 0]) - (1.0 + math.sqrt(5.0)) / 2.0)
    return gap <= 1e-8, f"|P - golden ratio| = {gap:.3e}"


def _check_dare_discount_scaling(rng):
    worst = 0.0
    for _ in range(5):
        a = rng.normal(size=(2, 2)) * 0.5
        b = rng.normal(size=(2, 1))
        q = np.eye(2)
        r = 0.5 * np.eye(1)
        gamma = 0.9
        p1, k1 = solve_dare(LinearModel(a, b, q, r, gamma))
        root = math.sqrt(gamma)
        p2, k2 = solve_dare(LinearModel(root * a, root * b, q, r, 1.0))
        worst = max(worst, float(np.max(np.abs(p1 - p2))),
                    float(np.max(np.abs(k1 - k2))))
    return worst <= 1e-8, f"max mismatch {worst:.3e}"


def _check_relaxation_bracketing(rng):
    a_sys = np.array([[0.7, 0.1], [0.0, 0.6]])
    b_sys = np.array([[0.0], [1.0]])
    spec = RewardSpec(np.diag([1.0, 1.0, 0.5]))
    data = generate_linear_dataset(a_sys, b_sys, spec, 40,
                                   int(rng.integers(1 << 31)),
                                   UniformInit([-2.0, -2.0], [2.0, 2.0]))
    basis = identity_basis(2)
    baseline = make_baseline(None, basis, n_u=1)
    result = run_lmi_ql(data, baseline, basis, 0.98)
    gap = result.relaxed_cost - result.upper_bound_cost
    return gap <= 1e-6, (f"relaxed {result.relaxed_cost:.6e} vs upper "
                         f"{result.upper_bound_cost:.6e}")


_CHECKS = (
    ("greedy-value-identity", _check_greedy_identity),
    ("dare-golden-ratio", _check_dare_golden_ratio),
    ("dare-discount-scaling", _check_dare_discount_scaling),
    ("relaxation-bracketing", _check_relaxation_bracketing),
)


def cmd_verify(args):
    seed = args.seed if args.seed is not None else 0
    lines = []
    all_ok = True
    for index, (name, check) in enumerate(_CHECKS):
        rng = np.random.default_rng([seed, index])
        try:
            ok, detail = check(rng)
        except Exception as exc:
            ok, detail = False, repr(exc)
        all_ok = all_ok and ok
        lines.append(f"{name:28s} {'PASS' if ok else 'FAIL'}  ({detail})")
        print(lines[-1])
    if args.out is not None:
        with open(args.out, "w") as fh:
            fh.write("\n".join(lines) + "\n")
    return 0 if all_ok else 1


# ---------------------------------------------------------------------------
# entry point

def build_parser():
    parser = argparse.ArgumentParser(
        prog="lmiql",
        description="SDP-based off-policy Q-learning: data, training, "
                    "evaluation and learning-curve experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, default=None,
                       help="seed for any randomness in this subcommand")
        p.add_argument("--out", default=None, help="output file path")
        p.add_argument("--config", default=None, help="JSON config file")
        p.set_defaults(func=func)
        return p

    p = add("generate-data", cmd_generate_data,
            "sample a transition dataset from the configured environment")
    p.add_argument("--n", type=int, default=None,
                   help="sample count (default: n_samples from the config)")

    p = add("train", cmd_train, "fit Q-function parameters on a dataset")
    p.add_argument("--method", required=True,
                   choices=("lmi-ql", "lmi-qli", "lspi"))
    p.add_argument("--data", required=True, help="dataset file")

    p = add("evaluate", cmd_evaluate,
            "roll out a trained policy and report closed-loop metrics")
    p.add_argument("--policy", required=True, help="train-result file")

    p = add("experiment", cmd_experiment,
            "run the Monte-Carlo learning-curve sweep, write the curve CSV")
    p.add_argument("--print-config", action="store_true",
                   help="echo the normalized experiment config")

    add("verify", cmd_verify, "run the analytic self-checks")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # keep the contract: diagnostic + nonzero exit
        logger.debug("unexpected failure", exc_info=True)
        print(f"error: {exc!r}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
