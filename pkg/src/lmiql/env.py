"""Simulated environments: a noisy pendulum, a linear test system, rewards, data.

Pendulum (forward-Euler discretization, state x = [angle; angular velocity],
angle measured from the upright target, wrapped to [-pi, pi)):

    x1+ = wrap(x1 + Ts*x2)
    x2+ = x2 + (Ts*g/l) sin(x1) - (Ts*d/(m l^2)) x2 + (Ts/(m l^2)) u

plus additive process noise w.  Rewards are -[x; u]' M [x; u] with M positive
definite, evaluated on the true (noiseless) state; measurement noise only
perturbs the states recorded into datasets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .qmodel import BasisSpec


def wrap_angle(a):
    """Map an angle to [-pi, pi)."""
    return (a + math.pi) % (2.0 * math.pi) - math.pi


# ---------------------------------------------------------------------------
# pendulum

@dataclass
class PendulumConfig:
    m: float = 0.1
    l: float = 1.0
    g_const: float = 9.81
    d: float = 0.1
    Ts: float = 0.01
    sigma_w: float = 2.5e-5  # process-noise covariance scale (cov = sigma_w * I)
    sigma_v: float = 1e-4  # measurement-noise covariance scale

    def __post_init__(self):
        if self.m <= 0 or self.l <= 0 or self.Ts <= 0:
            raise ValueError("m, l, Ts must be positive")
        if self.d < 0 or self.sigma_w < 0 or self.sigma_v < 0:
            raise ValueError("d and noise scales must be nonnegative")


def pendulum_step(config, x, u, w):
    x = np.asarray(x, float)
    u_val = float(np.asarray(u, float).reshape(-1)[0])
    w = np.asarray(w, float)
    c = config
    ml2 = c.m * c.l * c.l
    angle = wrap_angle(x[0] + c.Ts * x[1]) + w[0]
    vel = (
        x[1]
        + (c.Ts * c.g_const / c.l) * math.sin(x[0])
        - (c.Ts * c.d / ml2) * x[1]
        + (c.Ts / ml2) * u_val
        + w[1]
    )
    return np.array([angle, vel])


def linearize_pendulum(config):
    """First-order model at the upright equilibrium: x+ = A x + B u."""
    c = config
    ml2 = c.m * c.l * c.l
    a = np.array(
        [[1.0, c.Ts], [c.Ts * c.g_const / c.l, 1.0 - c.Ts * c.d / ml2]]
    )
    b = np.array([[0.0], [c.Ts / ml2]])
    return a, b


def pendulum_basis():
    """phi(x) = [x1, x2, sin(x1)] with the angle wrapped first."""

    def phi(x):
        a = wrap_angle(x[0])
        return np.array([a, x[1], math.sin(a)])

    return BasisSpec(n_x=2, n_phi=3, phi=phi)


# ---------------------------------------------------------------------------
# reward

@dataclass
class RewardSpec:
    M: np.ndarray

    def __post_init__(self):
        self.M = np.atleast_2d(np.asarray(self.M, float))
        if not np.allclose(self.M, self.M.T, atol=1e-12):
            raise ValueError("M must be symmetric")
        if float(np.linalg.eigvalsh(self.M)[0]) <= 0.0:
            raise ValueError("M must be positive definite")

    @property
    def dim(self):
        return self.M.shape[0]


def reward(spec, x, u):
    z = np.concatenate([np.atleast_1d(np.asarray(x, float)), np.atleast_1d(np.asarray(u, float))])
    if len(z) != spec.dim:
        raise ValueError(f"reward expects {spec.dim} entries in [x; u], got {len(z)}")
    return -float(z @ spec.M @ z)


# ---------------------------------------------------------------------------
# datasets

@dataclass
class UniformInit:
    """Uniform box sampler for initial states; low == high gives a point mass."""

    low: np.ndarray
    high: np.ndarray

    def __post_init__(self):
        self.low = np.atleast_1d(np.asarray(self.low, float))
        self.high = np.atleast_1d(np.asarray(self.high, float))
        if self.low.shape != self.high.shape or np.any(self.low > self.high):
            raise ValueError("need low <= high elementwise")

    def sample(self, rng):
        return rng.uniform(self.low, self.high)


@dataclass
class Dataset:
    """Batch of one-step transitions (X, U, R, X_plus), aligned row-wise."""

    X: np.ndarray
    U: np.ndarray
    R: np.ndarray
    X_plus: np.ndarray
    seed: int = 0
    meta: str = ""

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, float))
        self.U = np.atleast_2d(np.asarray(self.U, float))
        self.R = np.atleast_1d(np.asarray(self.R, float))
        self.X_plus = np.atleast_2d(np.asarray(self.X_plus, float))
        n = len(self.X)
        if n < 1:
            raise ValueError("dataset must contain at least one transition")
        if not (len(self.U) == len(self.R) == len(self.X_plus) == n):
            raise ValueError("dataset arrays must be aligned")

    def __len__(self):
        return len(self.X)

    def subset(self, n):
        """Prefix of the first n transitions."""
        if not 1 <= n <= len(self):
            raise ValueError(f"subset size {n} outside [1, {len(self)}]")
        return Dataset(
            self.X[:n], self.U[:n], self.R[:n], self.X_plus[:n], self.seed,
            f"{self.meta} [prefix {n}]",
        )


def generate_dataset(config, spec, n_samples, seed, init_sampler=None, explore_std=math.sqrt(10.0)):
    """Independent exploring transitions from the pendulum.

    Per sample, in fixed RNG order: initial state from init_sampler, input
    u ~ N(0, explore_std^2), process noise w, then measurement noise v added
    to the recorded x and x+ (angles re-wrapped).  Rewards come from the
    noiseless state.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    init_sampler = init_sampler or UniformInit([-math.pi, -2.0], [math.pi, 2.0])
    rng = np.random.default_rng(seed)
    w_std = math.sqrt(config.sigma_w)
    v_std = math.sqrt(config.sigma_v)

    xs, us, rs, xps = [], [], [], []
    for _ in range(n_samples):
        x = init_sampler.sample(rng)
        u = rng.normal(0.0, explore_std, size=1) if explore_std > 0 else np.zeros(1)
        w = rng.normal(0.0, w_std, size=2) if w_std > 0 else np.zeros(2)
        v_x = rng.normal(0.0, v_std, size=2) if v_std > 0 else np.zeros(2)
        v_xp = rng.normal(0.0, v_std, size=2) if v_std > 0 else np.zeros(2)
        r = reward(spec, x, u)
        x_plus = pendulum_step(config, x, u, w)
        x_rec = x + v_x
        xp_rec = x_plus + v_xp
        x_rec[0] = wrap_angle(x_rec[0])
        xp_rec[0] = wrap_angle(xp_rec[0])
        xs.append(x_rec)
        us.append(u)
        rs.append(r)
        xps.append(xp_rec)

    return Dataset(
        np.array(xs), np.array(us), np.array(rs), np.array(xps), seed,
        f"pendulum exploring policy, explore_std={explore_std:g}",
    )


def generate_linear_dataset(a_mat, b_mat, spec, n_samples, seed, init_sampler,
                            explore_std=1.0, sigma_w=0.0):
    """Exploring transitions from x+ = A x + B u (+ optional process noise)."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    a_mat = np.asarray(a_mat, float)
    b_mat = np.asarray(b_mat, float)
    n_u = b_mat.shape[1]
    rng = np.random.default_rng(seed)
    w_std = math.sqrt(sigma_w)

    xs, us, rs, xps = [], [], [], []
    for _ in range(n_samples):
        x = init_sampler.sample(rng)
        u = rng.normal(0.0, explore_std, size=n_u)
        w = rng.normal(0.0, w_std, size=len(x)) if w_std > 0 else np.zeros(len(x))
        rs.append(reward(spec, x, u))
        xs.append(x)
        us.append(u)
        xps.append(a_mat @ x + b_mat @ u + w)

    return Dataset(np.array(xs), np.array(us), np.array(rs), np.array(xps), seed,
                   "linear exploring policy")


# ---------------------------------------------------------------------------
# rollouts

@dataclass
class RolloutResult:
    cumulative_reward: float
    trajectory: np.ndarray
    diverged: bool


def _diverged(x, vel_limit, state_limit):
    return abs(x[1]) > vel_limit or float(np.max(np.abs(x))) > state_limit


def rollout(policy, config, spec, x0, horizon, seed, gamma,
            vel_limit=50.0, state_limit=100.0):
    """Simulate the pendulum under ``u = policy(x)`` with seeded disturbances.

    Returns the discounted reward sum over ``horizon`` steps.  If the state
    leaves the envelope (|velocity| > vel_limit or any entry > state_limit)
    the rollout is flagged diverged and simulation stops there.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    rng = np.random.default_rng(seed)
    w_std = math.sqrt(config.sigma_w)
    x = np.asarray(x0, float).copy()
    traj = [x.copy()]
    total = 0.0
    diverged = False
    for i in range(horizon):
        u = np.atleast_1d(np.asarray(policy(x), float))
        total += (gamma ** i) * reward(spec, x, u)
        w = rng.normal(0.0, w_std, size=2) if w_std > 0 else np.zeros(2)
        x = pendulum_step(config, x, u, w)
        traj.append(x.copy())
        if _diverged(x, vel_limit, state_limit):
            diverged = True
            break
    return RolloutResult(float(total), np.array(traj), diverged)


def linear_rollout(policy, a_mat, b_mat, spec, x0, horizon, seed, gamma,
                   sigma_w=0.0, vel_limit=50.0, state_limit=100.0):
    """Same contract as ``rollout`` for the linear test system."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    a_mat = np.asarray(a_mat, float)
    b_mat = np.asarray(b_mat, float)
    rng = np.random.default_rng(seed)
    w_std = math.sqrt(sigma_w)
    x = np.asarray(x0, float).copy()
    traj = [x.copy()]
    total = 0.0
    diverged = False
    for i in range(horizon):
        u = np.atleast_1d(np.asarray(policy(x), float))
        total += (gamma ** i) * reward(spec, x, u)
        w = rng.normal(0.0, w_std, size=len(x)) if w_std > 0 else np.zeros(len(x))
        x = a_mat @ x + b_mat @ u + w
        traj.append(x.copy())
        if _diverged(x, vel_limit, state_limit):
            diverged = True
            break
    return RolloutResult(float(total), np.array(traj), diverged)


# ---------------------------------------------------------------------------
# dataset files

def save_dataset(data, path):
    """Columnar text format, bit-exact floats (repr round-trip)."""
    n_x = data.X.shape[1]
    n_u = data.U.shape[1]
    lines = [f"# dataset-v1 n={len(data)} n_x={n_x} n_u={n_u} seed={data.seed}",
             f"# meta: {data.meta}"]
    for k in range(len(data)):
        fields = (
            [repr(float(v)) for v in data.X[k]]
            + [repr(float(v)) for v in data.U[k]]
            + [repr(float(data.R[k]))]
            + [repr(float(v)) for v in data.X_plus[k]]
        )
        lines.append(" ".join(fields))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("# dataset-v1 "):
        raise ValueError(f"{path}: not a dataset-v1 file")
    head = dict(tok.split("=", 1) for tok in lines[0].split()[2:])
    n, n_x, n_u = int(head["n"]), int(head["n_x"]), int(head["n_u"])
    seed = int(head["seed"])
    meta = lines[1][len("# meta: "):] if len(lines) > 1 and lines[1].startswith("# meta: ") else ""
    rows = [line.split() for line in lines[2:] if line.strip()]
    if len(rows) != n:
        raise ValueError(f"{path}: expected {n} rows, found {len(rows)}")
    vals = np.array([[float(v) for v in row] for row in rows])
    if vals.shape[1] != 2 * n_x + n_u + 1:
        raise ValueError(f"{path}: row width {vals.shape[1]} does not match header")
    return Dataset(
        vals[:, :n_x], vals[:, n_x : n_x + n_u], vals[:, n_x + n_u],
        vals[:, n_x + n_u + 1 :], seed, meta,
    )
