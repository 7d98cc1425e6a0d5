"""Monte-Carlo learning-curve experiments on the noisy pendulum.

Each Monte-Carlo run draws one exploring dataset of max(subset_sizes)
transitions, trains every requested method from scratch on growing
prefixes of it, and scores the greedy policies in closed loop from a
fixed initial state.  The evaluation disturbances are derived from
(base_seed, run) only, so at a given run every method and every subset
size sees identical initial conditions and noise; the data-independent
oracle therefore traces a flat curve.

Special cases at n_data = 0: the SDP methods fall back to the baseline
policy (that is their starting point before any data), LSPI falls back
to its zero initial policy, and the oracle ignores data everywhere.

Training always sees rewards normalized into [-1, 1], with the baseline
value divided by the same factor.  That scaling conditions the SDP
solves without moving any greedy policy; evaluation rewards stay in
original units.

Unstable evaluations and failed trainings are excluded from the
aggregates but kept in the run records, so the per-point n_excluded
totals match the bad (run, method, size) triples exactly.  Curve points
carry the mean cumulative reward with a 95% confidence interval, normal
approximation by default or a seeded bootstrap.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .baselines import (
    LspiConfig,
    feedback_linearization_oracle,
    lspi_train,
    make_baseline,
    model_from_reward,
)
from .env import (
    Dataset,
    PendulumConfig,
    RewardSpec,
    UniformInit,
    generate_dataset,
    linearize_pendulum,
    pendulum_basis,
    rollout,
)
from .qmodel import AffinePolicy, BaselinePolicy
from .synthesis import LmiQlConfig, run_lmi_ql, run_lmi_qli

logger = logging.getLogger(__name__)

METHODS = ("lmi-ql", "lmi-qli", "lspi", "oracle", "baseline-only")

CSV_HEADER = "method,n_data,mean_reward,ci95_low,ci95_high,n_excluded,n_total"


# ---------------------------------------------------------------------------
# configuration

@dataclass(eq=False)
class ExperimentConfig:
    """Everything a learning-curve sweep needs, JSON round-trippable.

    baseline_m / baseline_l are the wrong model parameters behind the
    baseline controller; set both to None for a zero baseline.
    """

    methods: tuple = METHODS
    subset_sizes: tuple = (0, 25, 50, 100, 200, 300, 400, 500)
    n_monte_carlo: int = 20
    eval_horizon: int = 100
    gamma: float = 0.98
    tau: int = 20
    lspi_iterations: int = 20
    lspi_ridge: float = 1e-8
    base_seed: int = 0
    pendulum: PendulumConfig = field(default_factory=PendulumConfig)
    reward_m: np.ndarray = field(
        default_factory=lambda: np.diag([1.0, 0.1, 1e-3])
    )
    baseline_m: float = 0.01
    baseline_l: float = 0.3
    explore_std: float = math.sqrt(10.0)
    init_low: tuple = (-math.pi, -2.0)
    init_high: tuple = (math.pi, 2.0)
    x0: tuple = (math.pi / 2.0, 0.0)
    lambda_grid: tuple = None  # None keeps the trainer default
    epsilon_pd: float = 1e-6
    ci_method: str = "normal"  # or "bootstrap"
    n_bootstrap: int = 1000
    vel_limit: float = 50.0
    state_limit: float = 100.0

    def __post_init__(self):
        self.methods = tuple(self.methods)
        self.subset_sizes = tuple(int(n) for n in self.subset_sizes)
        self.init_low = tuple(float(v) for v in self.init_low)
        self.init_high = tuple(float(v) for v in self.init_high)
        self.x0 = tuple(float(v) for v in self.x0)
        self.reward_m = np.atleast_2d(np.asarray(self.reward_m, float))
        if self.lambda_grid is not None:
            self.lambda_grid = tuple(float(v) for v in self.lambda_grid)

        if not self.methods:
            raise ValueError("methods must be non-empty")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ValueError(f"unknown methods {bad}; choose from {METHODS}")
        if len(set(self.methods)) != len(self.methods):
            raise ValueError("methods contains duplicates")
        if not self.subset_sizes:
            raise ValueError("subset_sizes must be non-empty")
        if self.subset_sizes[0] < 0:
            raise ValueError("subset sizes must be nonnegative")
        if any(b <= a for a, b in zip(self.subset_sizes, self.subset_sizes[1:])):
            raise ValueError("subset_sizes must be strictly increasing")
        if self.n_monte_carlo < 1:
            raise ValueError("n_monte_carlo must be >= 1")
        if self.eval_horizon < 1:
            raise ValueError("eval_horizon must be >= 1")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if self.tau < 1 or self.lspi_iterations < 1:
            raise ValueError("tau and lspi_iterations must be >= 1")
        if self.base_seed < 0:
            raise ValueError("base_seed must be nonnegative")
        if self.reward_m.shape != (3, 3):
            raise ValueError("reward_m must be 3x3 ([x1, x2, u] weighting)")
        if (self.baseline_m is None) != (self.baseline_l is None):
            raise ValueError("set both or neither of baseline_m, baseline_l")
        if self.baseline_m is not None and (self.baseline_m <= 0 or self.baseline_l <= 0):
            raise ValueError("baseline model parameters must be positive")
        if self.explore_std < 0:
            raise ValueError("explore_std must be nonnegative")
        if len(self.init_low) != 2 or len(self.init_high) != 2 or len(self.x0) != 2:
            raise ValueError("init_low, init_high, x0 must have 2 entries")
        if any(b < a for a, b in zip(self.init_low, self.init_high)):
            raise ValueError("need init_low <= init_high elementwise")
        if self.ci_method not in ("normal", "bootstrap"):
            raise ValueError("ci_method must be 'normal' or 'bootstrap'")
        if self.n_bootstrap < 1:
            raise ValueError("n_bootstrap must be >= 1")

    @property
    def n_full(self):
        return self.subset_sizes[-1]

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["methods"] = list(self.methods)
        d["subset_sizes"] = list(self.subset_sizes)
        d["init_low"] = list(self.init_low)
        d["init_high"] = list(self.init_high)
        d["x0"] = list(self.x0)
        d["reward_m"] = self.reward_m.tolist()
        d["lambda_grid"] = None if self.lambda_grid is None else list(self.lambda_grid)
        return d

    @classmethod
    def from_dict(cls, raw):
        d = dict(raw)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        if "pendulum" in d and isinstance(d["pendulum"], dict):
            d["pendulum"] = PendulumConfig(**d["pendulum"])
        return cls(**d)


def save_config(config, path):
    try:
        with open(path, "w") as fh:
            json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise OSError(f"cannot write config to {path}: {exc}") from exc


def load_config(path):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise OSError(f"cannot read config from {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: not valid JSON ({exc})") from exc
    return ExperimentConfig.from_dict(raw)


# ---------------------------------------------------------------------------
# experiment pieces

@dataclass
class LearningCurvePoint:
    """One aggregated (method, n_data) cell of the learning curve.

    A point whose every run was excluded carries NaN statistics.
    """

    method: str
    n_data: int
    mean_reward: float
    ci95_low: float
    ci95_high: float
    n_excluded: int
    n_total: int

    def __post_init__(self):
        if not 0 <= self.n_excluded <= self.n_total:
            raise ValueError("need 0 <= n_excluded <= n_total")
        if math.isfinite(self.mean_reward) and not (
            self.ci95_low <= self.mean_reward <= self.ci95_high
        ):
            raise ValueError("need ci95_low <= mean_reward <= ci95_high")


@dataclass
class RunRecord:
    """Outcome of one (run, method, size) training + evaluation attempt.

    status is "ok", "diverged" or "train-failed"; tightness is the worst
    pre-polish epigraph gap over the training's successful SDP solves
    (None when no SDP ran).
    """

    run: int
    method: str
    n_data: int
    status: str
    reward: float = None
    seconds: float = 0.0
    tightness: float = None


def child_seed(base_seed, *path):
    """Deterministic independent stream: SeedSequence([base_seed, *path])."""
    seq = np.random.SeedSequence([int(base_seed)] + [int(p) for p in path])
    return int(seq.generate_state(1, np.uint64)[0])


def build_baseline(config):
    """Baseline policy from the (wrong) linearized model, or the zero one."""
    basis = pendulum_basis()
    if config.baseline_m is None:
        return make_baseline(None, basis, n_u=1), basis
    wrong = dataclasses.replace(
        config.pendulum, m=config.baseline_m, l=config.baseline_l
    )
    a_bar, b_bar = linearize_pendulum(wrong)
    model = model_from_reward(a_bar, b_bar, RewardSpec(config.reward_m), config.gamma)
    return make_baseline(model, basis), basis


def baseline_loop_radius(baseline, config):
    """Spectral radius of the true linearized plant under the baseline.

    Assumes the [x1, x2, sin(x1)] basis, whose Jacobian at the origin
    folds the sine feature onto the angle.
    """
    if baseline.k_coef.shape[1] != 3:
        raise ValueError("expects the 3-feature pendulum basis")
    a_true, b_true = linearize_pendulum(config)
    k_lin = baseline.k_coef[:, :2] + baseline.k_coef[:, 2:3] @ np.array([[1.0, 0.0]])
    return float(np.max(np.abs(np.linalg.eigvals(a_true + b_true @ k_lin))))


def reward_scale(data):
    """max(1, max |r|): divisor that brings dataset rewards into [-1, 1]."""
    return max(1.0, float(np.max(np.abs(data.R))))


def scaled_training_problem(data, baseline):
    """The same decision problem with rewards normalized to [-1, 1].

    Dividing the rewards and the baseline value by a common factor
    scales every Q-parameter linearly and leaves the greedy policy
    untouched, so policies trained on the scaled pair solve the original
    problem while the solver sees O(1) data.  Returns the scaled
    dataset, the scaled baseline and the divisor.
    """
    scale = reward_scale(data)
    if scale == 1.0:
        return data, baseline, scale
    scaled = Dataset(data.X, data.U, data.R / scale, data.X_plus, data.seed,
                     f"{data.meta} [rewards scaled by 1/{scale:g}]")
    scaled_baseline = BaselinePolicy(baseline.k_coef, baseline.k_off,
                                     baseline.p_bar / scale, baseline.zero_flag)
    return scaled, scaled_baseline, scale


def _max_tightness(solve_log):
    vals = [row.tightness for row in solve_log
            if row.status == "optimal" and row.tightness is not None]
    return max(vals) if vals else None


def _train_policy(method, subset, baseline, basis, config):
    """Policy for one cell; returns (policy, tightness-or-None)."""
    if method == "oracle":
        oracle = feedback_linearization_oracle(
            config.pendulum, RewardSpec(config.reward_m), config.gamma
        )
        return oracle, None
    if method == "baseline-only" or (subset is None and method != "lspi"):
        return baseline.as_policy(), None
    if subset is None:  # lspi before any data: its zero initial policy
        return AffinePolicy.zero(1, basis.n_phi), None
    if method == "lspi":
        res = lspi_train(subset, baseline, basis, config.gamma,
                         LspiConfig(iterations=config.lspi_iterations,
                                    ridge=config.lspi_ridge))
        return res.policy, None
    if method == "lmi-ql":
        lmi = LmiQlConfig(epsilon_pd=config.epsilon_pd)
        if config.lambda_grid is not None:
            lmi = LmiQlConfig(lambda_grid=config.lambda_grid,
                              epsilon_pd=config.epsilon_pd)
        res = run_lmi_ql(subset, baseline, basis, config.gamma, lmi)
        return res.policy, _max_tightness(res.solve_log)
    if method == "lmi-qli":
        res = run_lmi_qli(subset, baseline, basis, config.gamma, tau=config.tau,
                          epsilon_pd=config.epsilon_pd)
        return res.policy, _max_tightness(res.solve_log)
    raise ValueError(f"unknown method {method!r}")


def _confidence_interval(vals, config, method_index, n_data):
    """95% interval for the mean; degenerate when only one value survives."""
    mean = float(np.mean(vals))
    if len(vals) == 1:
        return mean, mean, mean
    if config.ci_method == "normal":
        half = 1.96 * float(np.std(vals, ddof=1)) / math.sqrt(len(vals))
        return mean, mean - half, mean + half
    rng = np.random.default_rng(
        child_seed(config.base_seed, 2, method_index, n_data)
    )
    draws = rng.choice(vals, size=(config.n_bootstrap, len(vals)), replace=True)
    lo, hi = np.percentile(draws.mean(axis=1), [2.5, 97.5])
    return mean, min(float(lo), mean), max(float(hi), mean)


def run_experiment(config, collect_records=False):
    """Learning curves per the module docstring.

    Returns the curve points sorted by (method, n_data); with
    collect_records=True, also the list of per-cell RunRecords.
    """
    baseline, basis = build_baseline(config)
    spec = RewardSpec(config.reward_m)
    radius = baseline_loop_radius(baseline, config.pendulum)
    logger.info(
        "baseline closed loop on the true linearized plant: spectral radius "
        "%.4f (%s)", radius, "stable" if radius < 1.0 else "unstable",
    )
    init = UniformInit(config.init_low, config.init_high)
    x0 = np.asarray(config.x0, float)

    records = []
    for run in range(config.n_monte_carlo):
        full = None
        train_baseline = baseline
        if config.n_full > 0:
            raw = generate_dataset(
                config.pendulum, spec, config.n_full,
                seed=child_seed(config.base_seed, run, 0),
                init_sampler=init, explore_std=config.explore_std,
            )
            full, train_baseline, _ = scaled_training_problem(raw, baseline)
        eval_seed = child_seed(config.base_seed, run, 1)
        for n in config.subset_sizes:
            subset = full.subset(n) if n > 0 else None
            for method in config.methods:
                start = time.perf_counter()
                try:
                    policy, tightness = _train_policy(
                        method, subset, train_baseline, basis, config
                    )
                except Exception as exc:
                    logger.warning("training %s at n=%d (run %d) failed: %r",
                                   method, n, run, exc)
                    records.append(RunRecord(
                        run, method, n, "train-failed",
                        seconds=time.perf_counter() - start,
                    ))
                    continue
                out = rollout(
                    lambda x: policy.act(basis, x), config.pendulum, spec,
                    x0, config.eval_horizon, eval_seed, config.gamma,
                    vel_limit=config.vel_limit, state_limit=config.state_limit,
                )
                records.append(RunRecord(
                    run, method, n,
                    "diverged" if out.diverged else "ok",
                    reward=out.cumulative_reward,
                    seconds=time.perf_counter() - start,
                    tightness=tightness,
                ))

    points = []
    for mi, method in enumerate(config.methods):
        for n in config.subset_sizes:
            cell = [r for r in records if r.method == method and r.n_data == n]
            vals = [r.reward for r in cell if r.status == "ok"]
            n_excluded = len(cell) - len(vals)
            if not vals:
                points.append(LearningCurvePoint(
                    method, n, math.nan, math.nan, math.nan,
                    n_excluded, len(cell),
                ))
                continue
            mean, lo, hi = _confidence_interval(vals, config, mi, n)
            points.append(LearningCurvePoint(
                method, n, mean, lo, hi, n_excluded, len(cell),
            ))
    points.sort(key=lambda p: (p.method, p.n_data))
    if collect_records:
        return points, records
    return points


# ---------------------------------------------------------------------------
# curve files

def emit_curves(points, path):
    """CSV with the exact header above, rows sorted by (method, n_data).

    Floats are written with repr so a parse-back is bit-exact.
    """
    if not points:
        raise ValueError("no curve points to write")
    lines = [CSV_HEADER]
    for p in sorted(points, key=lambda q: (q.method, q.n_data)):
        lines.append(",".join([
            p.method, str(p.n_data), repr(float(p.mean_reward)),
            repr(float(p.ci95_low)), repr(float(p.ci95_high)),
            str(p.n_excluded), str(p.n_total),
        ]))
    try:
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write curves to {path}: {exc}") from exc


def load_curves(path):
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise OSError(f"cannot read curves from {path}: {exc}") from exc
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError(f"{path}: missing curve header")
    points = []
    for line in lines[1:]:
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 7:
            raise ValueError(f"{path}: malformed row {line!r}")
        points.append(LearningCurvePoint(
            parts[0], int(parts[1]), float(parts[2]), float(parts[3]),
            float(parts[4]), int(parts[5]), int(parts[6]),
        ))
    return points
