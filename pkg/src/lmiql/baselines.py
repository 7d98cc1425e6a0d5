"""Comparison and oracle methods for the SDP trainers.

 * discounted LQR via the Riccati fixed-point iteration
     P <- Q + g A'PA - g^2 A'PB (R + g B'PB)^-1 B'PA,   K = g (R+gB'PB)^-1 B'PA
   (equivalent to the undiscounted equation on (sqrt(g) A, sqrt(g) B));
 * exact Q-function parameters for a linear model (the Riccati oracle used to
   pin down tests);
 * baseline-policy construction from a (possibly wrong) linear model;
 * a gravity-cancelling pendulum controller: u = -m l g sin(x1) - K x with K
   from the LQR on the cancelled linear dynamics -- the comparison target;
 * LSPI over the same quadratic feature class, policy evaluation as a p=2
   Bellman-residual least squares with the next-step policy held fixed.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla

from .qmodel import (
    AffinePolicy,
    BaselinePolicy,
    QParams,
    feature_matrix,
    greedy_policy,
    l1_cost,
    params_from_vector,
)
from .synthesis import SolveLogRow, TrainResult

logger = logging.getLogger(__name__)


class DareError(RuntimeError):
    pass


@dataclass
class LinearModel:
    A: np.ndarray
    B: np.ndarray
    Q_cost: np.ndarray
    R_cost: np.ndarray
    gamma: float

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, float))
        self.B = np.atleast_2d(np.asarray(self.B, float))
        self.Q_cost = np.atleast_2d(np.asarray(self.Q_cost, float))
        self.R_cost = np.atleast_2d(np.asarray(self.R_cost, float))
        if not np.allclose(self.Q_cost, self.Q_cost.T, atol=1e-12):
            raise ValueError("Q_cost must be symmetric")
        if not np.allclose(self.R_cost, self.R_cost.T, atol=1e-12):
            raise ValueError("R_cost must be symmetric")
        if float(np.linalg.eigvalsh(self.Q_cost)[0]) < -1e-12:
            raise ValueError("Q_cost must be positive semidefinite")
        if float(np.linalg.eigvalsh(self.R_cost)[0]) <= 0.0:
            raise ValueError("R_cost must be positive definite")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")

    @property
    def n_x(self):
        return self.A.shape[0]

    @property
    def n_u(self):
        return self.B.shape[1]


def model_from_reward(a_mat, b_mat, spec, gamma):
    """Split a joint [x; u] reward matrix into Q/R blocks (no cross terms)."""
    a_mat = np.atleast_2d(np.asarray(a_mat, float))
    n_x = a_mat.shape[0]
    m = spec.M
    cross = m[:n_x, n_x:]
    if np.any(cross != 0.0):
        raise ValueError(
            "reward matrix couples x and u; the Riccati utilities need a "
            "block-diagonal M"
        )
    return LinearModel(a_mat, b_mat, m[:n_x, :n_x], m[n_x:, n_x:], gamma)


def solve_dare(model, tol=1e-12, max_iter=100_000):
    """Fixed point of the discounted Riccati recursion, started at P = Q."""
    a, b, q, r, g = model.A, model.B, model.Q_cost, model.R_cost, model.gamma
    p = q.copy()
    for _ in range(max_iter):
        btpb = r + g * b.T @ p @ b
        btpa = b.T @ p @ a
        p_next = q + g * a.T @ p @ a - g * g * a.T @ p @ b @ np.linalg.solve(btpb, btpa)
        p_next = 0.5 * (p_next + p_next.T)
        diff = float(np.max(np.abs(p_next - p)))
        p = p_next
        if diff <= tol:
            k = g * np.linalg.solve(r + g * b.T @ p @ b, b.T @ p @ a)
            return p, k
    raise DareError(
        f"Riccati iteration did not converge in {max_iter} steps "
        f"(last update {diff:.3e})"
    )


def optimal_qparams(model, baseline=None):
    """Exact Q-function parameters for a linear model under phi(x) = x.

    With the zero baseline:  Q*(x,u) = -[x;u]' S* [x;u] with
    S* = [[Q + g A'PA, g A'PB], [g B'PA, R + g B'PB]],  T = 0, R-vector = 0.
    With a linear baseline (offset-free, value -x' Pbar x), S* transforms by
    the congruence [x; u] = [[I, 0], [-Kbar, I]] [x; u - pibar(x)] and Pbar
    moves into the explicit Vbar term.
    """
    p, _ = solve_dare(model)
    a, b, g = model.A, model.B, model.gamma
    n_x, n_u = model.n_x, model.n_u
    s_star = np.block(
        [
            [model.Q_cost + g * a.T @ p @ a, g * a.T @ p @ b],
            [g * b.T @ p @ a, model.R_cost + g * b.T @ p @ b],
        ]
    )
    if baseline is None or baseline.zero_flag:
        return QParams(0.0, np.zeros(n_x), np.zeros(n_u), s_star)
    if np.any(baseline.k_off != 0.0):
        raise ValueError("Riccati oracle supports only offset-free baselines")
    k_bar = -baseline.k_coef[:, :n_x]  # pibar = -Kbar x on the identity basis
    tr = np.block([[np.eye(n_x), np.zeros((n_x, n_u))], [-k_bar, np.eye(n_u)]])
    shifted = s_star.copy()
    shifted[:n_x, :n_x] -= baseline.p_bar
    s_tilde = tr.T @ shifted @ tr
    return QParams(0.0, np.zeros(n_x), np.zeros(n_u), 0.5 * (s_tilde + s_tilde.T))


def make_baseline(model, basis, n_u=None):
    """Baseline policy u = -K x from a (possibly inaccurate) model's LQR.

    K acts on the x sub-block of phi (the basis must carry the state in its
    leading n_x entries).  With no model, the zero fallback is returned.
    """
    if model is None:
        if n_u is None:
            raise ValueError("n_u is required for the zero baseline")
        return BaselinePolicy.zero(basis.n_x, basis.n_phi, n_u)
    if basis.n_phi < model.n_x:
        raise ValueError("basis must embed the state to carry a state-feedback law")
    p, k = solve_dare(model)
    k_coef = np.zeros((model.n_u, basis.n_phi))
    k_coef[:, : model.n_x] = -k
    return BaselinePolicy(k_coef, np.zeros(model.n_u), p)


def feedback_linearization_oracle(config, spec, gamma):
    """Gravity-cancelling controller for the pendulum, affine in its basis.

    u(x) = -m l g sin(x1) - K x: the first term exactly cancels the
    (Ts g / l) sin(x1) contribution through the Ts/(m l^2) input channel; K is
    the discounted LQR gain for the cancelled dynamics
    A = [[1, Ts], [0, 1 - Ts d/(m l^2)]] with the same B and cost blocks.
    Returned as an AffinePolicy over phi(x) = [x1, x2, sin(x1)].
    """
    c = config
    ml2 = c.m * c.l * c.l
    a_cancelled = np.array([[1.0, c.Ts], [0.0, 1.0 - c.Ts * c.d / ml2]])
    b = np.array([[0.0], [c.Ts / ml2]])
    model = model_from_reward(a_cancelled, b, spec, gamma)
    _, k = solve_dare(model)
    coef = np.array([[-k[0, 0], -k[0, 1], -c.m * c.l * c.g_const]])
    return AffinePolicy(coef, np.zeros(1))


# ---------------------------------------------------------------------------
# LSPI

@dataclass
class LspiConfig:
    iterations: int = 20
    ridge: float = 1e-8
    init_policy: AffinePolicy = None  # None -> zero policy

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.ridge < 0:
            raise ValueError("ridge must be nonnegative")


def bellman_lstsq(a_mat, b_vec, ridge):
    """argmin_theta sum_k (a_k . theta - b_k)^2 + ridge ||theta||^2, closed form."""
    a_mat = np.asarray(a_mat, float)
    b_vec = np.asarray(b_vec, float)
    gram = a_mat.T @ a_mat + ridge * np.eye(a_mat.shape[1])
    rhs = a_mat.T @ b_vec
    try:
        chol = sla.cho_factor(gram)
    except np.linalg.LinAlgError:
        raise ValueError("normal equations are singular; set ridge > 0") from None
    return sla.cho_solve(chol, rhs)


def policy_evaluation(data, baseline, basis, gamma, policy, ridge):
    """LSTD-Q in Bellman-residual form: fit theta with the next action fixed
    to policy(x+).  Returns (theta, p2 objective at theta)."""
    psi = feature_matrix(baseline, basis, data.X, data.U)
    u_next = np.array([policy.act(basis, x) for x in data.X_plus])
    psi_next = feature_matrix(baseline, basis, data.X_plus, u_next)
    a_mat = psi - gamma * psi_next
    b_vec = (
        np.asarray(data.R, float)
        + gamma * baseline.value_many(data.X_plus)
        - baseline.value_many(data.X)
    )
    theta = bellman_lstsq(a_mat, b_vec, ridge)
    obj = float(np.sum((a_mat @ theta - b_vec) ** 2))
    return theta, obj


def lspi_train(data, baseline, basis, gamma, config=None):
    """Alternate LSTD-Q evaluation and greedy improvement.

    Iterations whose S_uu is not positive definite keep the previous policy
    (the least-squares fit cannot enforce S > 0); they are flagged in the log.
    """
    config = config or LspiConfig()
    n_u = data.U.shape[1]
    policy = config.init_policy or AffinePolicy.zero(n_u, basis.n_phi)
    log = []
    params = None
    for it in range(1, config.iterations + 1):
        theta, obj = policy_evaluation(data, baseline, basis, gamma, policy,
                                       config.ridge)
        params = params_from_vector(theta, basis.n_phi, n_u)
        if float(np.linalg.eigvalsh(params.S_uu)[0]) > 0.0:
            policy = greedy_policy(params, baseline)
            log.append(SolveLogRow(status="optimal", objective=obj, iteration=it))
        else:
            log.append(SolveLogRow(status="suu-indefinite", objective=obj,
                                   iteration=it))
            logger.debug(
                "iteration %d produced an indefinite S_uu; keeping previous policy",
                it,
            )
    try:
        upper = l1_cost(params, baseline, basis, data, gamma)
    except ValueError:
        upper = math.inf  # final S_uu indefinite: no greedy value to project
    return TrainResult(
        method="lspi",
        params=params,
        relaxed_cost=None,
        upper_bound_cost=upper,
        solve_log=log,
        policy=policy,
    )
