"""Quadratic-in-basis Q-function: parametrization, greedy policy, residuals.

The model, over a state basis phi and a baseline policy pibar with value
model Vbar(x) = -x' Pbar x:

    Q(x, u) = Vbar(x) + T + zeta' R - zeta' S zeta,
    zeta    = [phi(x); u - pibar(x)],

with theta = (T, R_x, R_u, S), S symmetric positive definite partitioned as
[[S_xx, S_xu], [S_xu', S_uu]].  Maximizing over u in closed form gives the
greedy action

    pi(x) = pibar(x) + 1/2 S_uu^-1 R_u - S_uu^-1 S_xu' phi(x)

and the greedy value

    max_u Q(x, u) = Vbar(x) + T + f' (Omega + Psi S_uu^-1 Psi') f,
    f = [phi(x); 1],  Omega = [[-S_xx, R_x/2], [R_x'/2, 0]],
    Psi = [S_xu; -R_u'/2].

The Bellman residual of a transition (x, u, r, x+) is
Q(x, u) - r - gamma * max_u' Q(x+, u'); its l1 sum over a dataset is the
training objective the SDP builders linearize.

Decision-vector flattening used everywhere (also by the SDP layer and LSPI
features): [T, R_x, R_u, vech(S)] with vech walking the upper triangle
row-major.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# symmetric-matrix flattening

def vech(m):
    """Upper triangle of a symmetric matrix, row-major."""
    m = np.asarray(m, float)
    d = m.shape[0]
    return np.array([m[i, j] for i in range(d) for j in range(i, d)])


def unvech(v, dim):
    m = np.empty((dim, dim))
    k = 0
    for i in range(dim):
        for j in range(i, dim):
            m[i, j] = m[j, i] = v[k]
            k += 1
    if k != len(v):
        raise ValueError(f"expected {dim * (dim + 1) // 2} entries, got {len(v)}")
    return m


def quad_weights(z):
    """Vector w with w . vech(S) = z' S z (off-diagonal products doubled)."""
    z = np.asarray(z, float)
    d = len(z)
    return np.array(
        [(1.0 if i == j else 2.0) * z[i] * z[j] for i in range(d) for j in range(i, d)]
    )


def vech_indices(dim):
    """(i, j, scale) triples in vech order; scale doubles off-diagonal terms."""
    return [(i, j, 1.0 if i == j else 2.0) for i in range(dim) for j in range(i, dim)]


# ---------------------------------------------------------------------------
# basis and policies

@dataclass
class BasisSpec:
    """State basis phi: R^n_x -> R^n_phi.  phi must be deterministic/finite."""

    n_x: int
    n_phi: int
    phi: callable

    def phi_matrix(self, states):
        return np.array([self.phi(x) for x in np.atleast_2d(states)])


def identity_basis(n_x):
    return BasisSpec(n_x=n_x, n_phi=n_x, phi=lambda x: np.asarray(x, float).copy())


@dataclass
class AffinePolicy:
    """u = coef @ phi(x) + offset."""

    coef: np.ndarray  # (n_u, n_phi)
    offset: np.ndarray  # (n_u,)

    def __post_init__(self):
        self.coef = np.atleast_2d(np.asarray(self.coef, float))
        self.offset = np.atleast_1d(np.asarray(self.offset, float))

    def act(self, basis, x):
        return self.coef @ basis.phi(x) + self.offset

    @staticmethod
    def zero(n_u, n_phi):
        return AffinePolicy(np.zeros((n_u, n_phi)), np.zeros(n_u))


@dataclass
class BaselinePolicy:
    """Baseline pibar (affine in phi) with quadratic value Vbar(x) = -x' Pbar x.

    zero_flag marks the no-model fallback pibar = Vbar = 0.
    """

    k_coef: np.ndarray  # (n_u, n_phi)
    k_off: np.ndarray  # (n_u,)
    p_bar: np.ndarray  # (n_x, n_x) symmetric
    zero_flag: bool = False

    def __post_init__(self):
        self.k_coef = np.atleast_2d(np.asarray(self.k_coef, float))
        self.k_off = np.atleast_1d(np.asarray(self.k_off, float))
        self.p_bar = np.atleast_2d(np.asarray(self.p_bar, float))
        if not np.allclose(self.p_bar, self.p_bar.T, atol=1e-12):
            raise ValueError("Pbar must be symmetric")

    @property
    def n_u(self):
        return self.k_coef.shape[0]

    def act(self, basis, x):
        if self.zero_flag:
            return np.zeros(self.n_u)
        return self.k_coef @ basis.phi(x) + self.k_off

    def value(self, x):
        if self.zero_flag:
            return 0.0
        x = np.asarray(x, float)
        return -float(x @ self.p_bar @ x)

    def value_many(self, states):
        if self.zero_flag:
            return np.zeros(len(states))
        states = np.asarray(states, float)
        return -np.einsum("ni,ij,nj->n", states, self.p_bar, states)

    def as_policy(self):
        if self.zero_flag:
            return AffinePolicy.zero(self.n_u, self.k_coef.shape[1])
        return AffinePolicy(self.k_coef.copy(), self.k_off.copy())

    @staticmethod
    def zero(n_x, n_phi, n_u):
        return BaselinePolicy(
            np.zeros((n_u, n_phi)), np.zeros(n_u), np.zeros((n_x, n_x)), zero_flag=True
        )


# ---------------------------------------------------------------------------
# parameters

def param_count(n_phi, n_u):
    d = n_phi + n_u
    return 1 + n_phi + n_u + d * (d + 1) // 2


@dataclass
class QParams:
    T: float
    R_x: np.ndarray
    R_u: np.ndarray
    S: np.ndarray

    def __post_init__(self):
        self.T = float(self.T)
        self.R_x = np.atleast_1d(np.asarray(self.R_x, float))
        self.R_u = np.atleast_1d(np.asarray(self.R_u, float))
        self.S = np.atleast_2d(np.asarray(self.S, float))
        d = self.n_phi + self.n_u
        if self.S.shape != (d, d):
            raise ValueError(f"S must be {d}x{d}, got {self.S.shape}")
        if not np.allclose(self.S, self.S.T, atol=1e-10):
            raise ValueError("S must be symmetric")
        self.S = 0.5 * (self.S + self.S.T)

    @property
    def n_phi(self):
        return len(self.R_x)

    @property
    def n_u(self):
        return len(self.R_u)

    @property
    def S_xx(self):
        return self.S[: self.n_phi, : self.n_phi]

    @property
    def S_xu(self):
        return self.S[: self.n_phi, self.n_phi :]

    @property
    def S_uu(self):
        return self.S[self.n_phi :, self.n_phi :]


def params_to_vector(params):
    return np.concatenate(([params.T], params.R_x, params.R_u, vech(params.S)))


def params_from_vector(vec, n_phi, n_u):
    vec = np.asarray(vec, float)
    if len(vec) != param_count(n_phi, n_u):
        raise ValueError(
            f"expected {param_count(n_phi, n_u)} entries for (n_phi={n_phi}, n_u={n_u}), "
            f"got {len(vec)}"
        )
    d = n_phi + n_u
    t = vec[0]
    r_x = vec[1 : 1 + n_phi]
    r_u = vec[1 + n_phi : 1 + n_phi + n_u]
    s = unvech(vec[1 + n_phi + n_u :], d)
    return QParams(t, r_x, r_u, s)


def omega_matrix(params):
    """(n_phi+1)-square block [[-S_xx, R_x/2], [R_x'/2, 0]]."""
    n = params.n_phi
    omega = np.zeros((n + 1, n + 1))
    omega[:n, :n] = -params.S_xx
    omega[:n, n] = 0.5 * params.R_x
    omega[n, :n] = 0.5 * params.R_x
    return omega


def psi_matrix(params):
    """(n_phi+1) x n_u block [S_xu; -R_u'/2]."""
    return np.vstack([params.S_xu, -0.5 * params.R_u[None, :]])


@dataclass
class RelaxationVars:
    """The (Omega, Psi, W) triple the SDP relaxation works with."""

    Omega: np.ndarray
    Psi: np.ndarray
    W: np.ndarray

    def __post_init__(self):
        self.Omega = np.atleast_2d(np.asarray(self.Omega, float))
        self.Psi = np.atleast_2d(np.asarray(self.Psi, float))
        self.W = np.atleast_2d(np.asarray(self.W, float))
        if self.Omega[-1, -1] != 0.0:
            raise ValueError("Omega bottom-right entry must be exactly 0")
        if not np.allclose(self.Omega, self.Omega.T, atol=1e-12):
            raise ValueError("Omega must be symmetric")
        if not np.allclose(self.W, self.W.T, atol=1e-12):
            raise ValueError("W must be symmetric")

    @staticmethod
    def from_params(params):
        psi = psi_matrix(params)
        w = psi @ np.linalg.solve(params.S_uu, psi.T)
        return RelaxationVars(omega_matrix(params), psi, 0.5 * (w + w.T))


# ---------------------------------------------------------------------------
# values and residuals

def _check_suu(params):
    eigmin = float(np.linalg.eigvalsh(params.S_uu)[0])
    if eigmin <= 0.0:
        raise ValueError(
            f"S_uu is not positive definite (min eigenvalue {eigmin:.3e}); "
            "greedy action undefined"
        )


def q_value(params, baseline, basis, x, u):
    phi = basis.phi(x)
    zeta = np.concatenate([phi, np.asarray(u, float) - baseline.act(basis, x)])
    r_vec = np.concatenate([params.R_x, params.R_u])
    return (
        baseline.value(x)
        + params.T
        + float(zeta @ r_vec)
        - float(zeta @ params.S @ zeta)
    )


def greedy_action(params, baseline, basis, x):
    _check_suu(params)
    phi = basis.phi(x)
    correction = np.linalg.solve(params.S_uu, 0.5 * params.R_u - params.S_xu.T @ phi)
    return baseline.act(basis, x) + correction


def _baseline_affine(baseline):
    """(coef, offset) of pibar in phi, honoring the zero_flag fallback."""
    if baseline.zero_flag:
        return np.zeros_like(baseline.k_coef), np.zeros_like(baseline.k_off)
    return baseline.k_coef, baseline.k_off


def greedy_policy(params, baseline):
    """The greedy action as an AffinePolicy in phi."""
    _check_suu(params)
    k_coef, k_off = _baseline_affine(baseline)
    coef = k_coef - np.linalg.solve(params.S_uu, params.S_xu.T)
    offset = k_off + np.linalg.solve(params.S_uu, 0.5 * params.R_u)
    return AffinePolicy(coef, offset)


def greedy_matrix(params):
    """Omega + Psi S_uu^-1 Psi', the quadratic form of the greedy value in [phi; 1]."""
    _check_suu(params)
    psi = psi_matrix(params)
    g = omega_matrix(params) + psi @ np.linalg.solve(params.S_uu, psi.T)
    return 0.5 * (g + g.T)


def greedy_value(params, baseline, basis, x):
    f = np.concatenate([basis.phi(x), [1.0]])
    return baseline.value(x) + params.T + float(f @ greedy_matrix(params) @ f)


def bellman_residual(params, baseline, basis, sample, gamma):
    """q_value(x, u) - r - gamma * greedy value at x_next."""
    x, u, r, x_next = sample
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    return q_value(params, baseline, basis, x, u) - (
        r + gamma * greedy_value(params, baseline, basis, x_next)
    )


def relaxed_residual(params, w_mat, baseline, basis, sample, gamma):
    """Residual with the greedy-value quadratic replaced by Omega + W.

    Equals bellman_residual when W = Psi S_uu^-1 Psi'.
    """
    x, u, r, x_next = sample
    f = np.concatenate([basis.phi(x_next), [1.0]])
    next_val = baseline.value(x_next) + params.T + float(f @ (omega_matrix(params) + w_mat) @ f)
    return q_value(params, baseline, basis, x, u) - (r + gamma * next_val)


def residual_vector(params, baseline, basis, data, gamma):
    """All Bellman residuals of a dataset at once (vectorized l1_cost core)."""
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    phis = basis.phi_matrix(data.X)
    phis_next = basis.phi_matrix(data.X_plus)
    k_coef, k_off = _baseline_affine(baseline)
    deltas = np.asarray(data.U, float) - (phis @ k_coef.T + k_off)
    zetas = np.hstack([phis, deltas])
    r_vec = np.concatenate([params.R_x, params.R_u])
    q_vals = (
        baseline.value_many(data.X)
        + params.T
        + zetas @ r_vec
        - np.einsum("ni,ij,nj->n", zetas, params.S, zetas)
    )
    fs = np.hstack([phis_next, np.ones((len(phis_next), 1))])
    g = greedy_matrix(params)
    next_vals = (
        baseline.value_many(data.X_plus)
        + params.T
        + np.einsum("ni,ij,nj->n", fs, g, fs)
    )
    return q_vals - (np.asarray(data.R, float) + gamma * next_vals)


def l1_cost(params, baseline, basis, data, gamma):
    """Sum of absolute Bellman residuals over the dataset."""
    if len(data.X) == 0:
        raise ValueError("l1 cost needs a non-empty dataset")
    return float(np.abs(residual_vector(params, baseline, basis, data, gamma)).sum())


# ---------------------------------------------------------------------------
# LSPI-compatible linear features

def features(baseline, basis, x, u):
    """Feature vector psi with psi . [T, R_x, R_u, vech(S)] = Q(x,u) - Vbar(x).

    The vech(S) slots carry -zeta_i zeta_j (doubled off-diagonal), matching
    quad_weights, so the quadratic term is linear in the flattened parameters.
    """
    phi = basis.phi(x)
    delta = np.asarray(u, float) - baseline.act(basis, x)
    zeta = np.concatenate([phi, delta])
    return np.concatenate(([1.0], phi, delta, -quad_weights(zeta)))


def feature_matrix(baseline, basis, states, inputs):
    return np.array([features(baseline, basis, x, u) for x, u in zip(states, inputs)])


# ---------------------------------------------------------------------------
# repair and serialization

def project_psd(params, eps):
    """Clip S's eigenvalues at eps (minimal repair when a solver undershoots).

    Returns params unchanged when S already satisfies S >= eps*I.
    """
    vals, vecs = np.linalg.eigh(params.S)
    if vals[0] >= eps:
        return params
    # undershoot within solver tolerance is routine; anything larger is news
    level = logging.DEBUG if eps - vals[0] <= 1e-7 else logging.WARNING
    logger.log(
        level, "clipping S eigenvalues at %.1e (min eigenvalue was %.3e)", eps, vals[0]
    )
    s_fixed = vecs @ np.diag(np.maximum(vals, eps)) @ vecs.T
    return QParams(params.T, params.R_x, params.R_u, 0.5 * (s_fixed + s_fixed.T))


def save_qparams(params, path):
    record = {
        "format": "qparams-v1",
        "n_phi": params.n_phi,
        "n_u": params.n_u,
        "T": params.T,
        "R_x": params.R_x.tolist(),
        "R_u": params.R_u.tolist(),
        "S_upper": vech(params.S).tolist(),
    }
    with open(path, "w") as fh:
        json.dump(record, fh, indent=2)
        fh.write("\n")


def load_qparams(path):
    with open(path) as fh:
        record = json.load(fh)
    if record.get("format") != "qparams-v1":
        raise ValueError(f"unrecognized parameter file format in {path}")
    return QParams(
        record["T"],
        np.array(record["R_x"]),
        np.array(record["R_u"]),
        unvech(np.array(record["S_upper"]), record["n_phi"] + record["n_u"]),
    )
