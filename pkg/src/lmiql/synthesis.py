"""SDP synthesis of Q-function parameters from batch transition data.

Both trainers minimize the l1 Bellman-residual cost through its epigraph: one
auxiliary t_k per sample with t_k >= z_k and t_k >= -z_k.  The residual z_k
is affine in the decision variables once the next-state greedy value's
quadratic Omega + Psi S_uu^-1 Psi' is handled:

 * iterated scheme (run_lmi_qli): the nonlinear product and Omega are frozen
   at anchor values, the resulting SDP solved, and the anchors refreshed from
   the solution, tau times;
 * relaxation (run_lmi_ql): a free symmetric W with the Schur-complement LMI
   [[W, Psi], [Psi', S_uu]] >= 0 stands in for the product, a trace penalty
   lam * tr(W) (the nuclear norm, W being PSD) discourages slack, and lam is
   picked by line search on the projected upper bound: the l1 cost of the
   returned theta with W set back to Psi S_uu^-1 Psi'.

The relaxed optimum lower-bounds and the projected cost upper-bounds the
original l1 objective, so every train result carries a bracket.

Decision layout: [T | R_x | R_u | vech(S) | t_0..t_{N-1} | vech(W)], vech
walking the upper triangle row-major.  The W tail exists only in the
relaxation problem; all other indices are shared between the two builders.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass

import numpy as np

from . import conic
from .conic import AffineExpr, SolveSettings, SolveStatus
from .qmodel import (
    AffinePolicy,
    QParams,
    _baseline_affine,
    greedy_policy,
    l1_cost,
    param_count,
    params_from_vector,
    project_psd,
    psi_matrix,
    unvech,
    vech,
    vech_indices,
)

logger = logging.getLogger(__name__)


class SynthesisError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# decision-vector layout

@dataclass
class ThetaLayout:
    """Index bookkeeping for [T | R_x | R_u | vech(S) | t | vech(W)]."""

    n_phi: int
    n_u: int
    n_samples: int

    @property
    def n_zeta(self):
        return self.n_phi + self.n_u

    @property
    def n_theta(self):
        return param_count(self.n_phi, self.n_u)

    @property
    def w_dim(self):
        return self.n_phi + 1

    @property
    def s_start(self):
        return 1 + self.n_phi + self.n_u

    @property
    def t_start(self):
        return self.n_theta

    @property
    def w_start(self):
        return self.n_theta + self.n_samples

    def t_index(self, k):
        return self.t_start + k

    def r_x_index(self, i):
        return 1 + i

    def r_u_index(self, j):
        return 1 + self.n_phi + j

    def s_index(self, i, j):
        if i > j:
            i, j = j, i
        return self.s_start + i * self.n_zeta - i * (i - 1) // 2 + (j - i)

    def w_index(self, i, j):
        if i > j:
            i, j = j, i
        return self.w_start + i * self.w_dim - i * (i - 1) // 2 + (j - i)

    def var_count(self, with_w):
        n = self.n_theta + self.n_samples
        if with_w:
            n += self.w_dim * (self.w_dim + 1) // 2
        return n

    def new_problem(self, with_w):
        """Fresh ConicProblem whose variable allocation realizes this layout."""
        p = conic.ConicProblem()
        p.add_scalar_var()  # T
        p.add_scalar_vars(self.n_phi)  # R_x
        p.add_scalar_vars(self.n_u)  # R_u
        s_var = p.add_sym_mat_var(self.n_zeta, "S")
        p.add_scalar_vars(self.n_samples)  # t
        w_var = p.add_sym_mat_var(self.w_dim, "W") if with_w else None
        assert p.var_count == self.var_count(with_w)
        assert s_var.index(0, 0) == self.s_index(0, 0)
        return p, s_var, w_var

    def decode_params(self, y):
        return params_from_vector(np.asarray(y)[: self.n_theta], self.n_phi, self.n_u)

    def decode_w(self, y):
        m = self.w_dim * (self.w_dim + 1) // 2
        return unvech(np.asarray(y)[self.w_start : self.w_start + m], self.w_dim)


# ---------------------------------------------------------------------------
# residual expressions

@dataclass
class EpigraphSystem:
    """Residuals of one dataset as affine expressions over a ThetaLayout.

    residual_exprs[k] is z_k as a function of (theta, W); base_exprs[k] is its
    theta-only part (everything except the -gamma * f' (Omega + W) f next-state
    quadratic), kept separate so the iterated scheme can substitute anchors.
    next_feats[k] is f_k = [phi(x+_k); 1].
    """

    layout: ThetaLayout
    gamma: float
    t_vars: np.ndarray
    residual_exprs: list
    base_exprs: list
    next_feats: np.ndarray
    data_ref: str = ""

    def __len__(self):
        return len(self.residual_exprs)


def build_residual_exprs(data, baseline, basis, gamma, layout):
    """Expand each transition's Bellman residual into the decision layout."""
    n = len(data)
    if n == 0:
        raise ValueError("cannot build residuals from an empty dataset")
    if layout.n_phi != basis.n_phi or layout.n_samples != n:
        raise ValueError("layout does not match basis/data dimensions")
    if data.U.shape[1] != layout.n_u:
        raise ValueError(
            f"layout expects n_u={layout.n_u}, dataset has {data.U.shape[1]}"
        )

    k_coef, k_off = _baseline_affine(baseline)
    phis = basis.phi_matrix(data.X)
    phis_next = basis.phi_matrix(data.X_plus)
    deltas = np.asarray(data.U, float) - (phis @ k_coef.T + k_off)
    vbars = baseline.value_many(data.X)
    vbars_next = baseline.value_many(data.X_plus)

    s_entries = vech_indices(layout.n_zeta)
    w_entries = vech_indices(layout.w_dim)
    base_exprs, full_exprs, feats = [], [], []
    coeff_rows = []
    for k in range(n):
        phi = phis[k]
        zeta = np.concatenate([phi, deltas[k]])
        f = np.concatenate([phis_next[k], [1.0]])
        feats.append(f)

        coeffs = {0: 1.0 - gamma}
        for i in range(layout.n_phi):
            coeffs[layout.r_x_index(i)] = phi[i]
        for j in range(layout.n_u):
            coeffs[layout.r_u_index(j)] = deltas[k][j]
        for i, j, scale in s_entries:
            coeffs[layout.s_index(i, j)] = -scale * zeta[i] * zeta[j]
        const = vbars[k] - data.R[k] - gamma * vbars_next[k]
        base = AffineExpr(coeffs, const)
        base_exprs.append(base)
        coeff_rows.append([coeffs.get(i, 0.0) for i in range(layout.n_theta)])

        # -gamma * f' Omega f: Omega = [[-S_xx, R_x/2], [R_x'/2, 0]]
        omega_coeffs = {}
        for i in range(layout.n_phi):
            for j in range(i, layout.n_phi):
                scale = 1.0 if i == j else 2.0
                omega_coeffs[layout.s_index(i, j)] = gamma * scale * f[i] * f[j]
            omega_coeffs[layout.r_x_index(i)] = -gamma * f[i]
        # -gamma * f' W f
        w_coeffs = {
            layout.w_index(i, j): -gamma * scale * f[i] * f[j]
            for i, j, scale in w_entries
        }
        full = base + AffineExpr(omega_coeffs) + AffineExpr(w_coeffs)
        full_exprs.append(full)

    rank = np.linalg.matrix_rank(np.array(coeff_rows))
    if rank < layout.n_theta:
        logger.warning(
            "dataset features are rank-deficient (%d < %d): the residual "
            "minimizer is not unique", rank, layout.n_theta,
        )

    return EpigraphSystem(
        layout=layout,
        gamma=gamma,
        t_vars=np.arange(layout.t_start, layout.t_start + n),
        residual_exprs=full_exprs,
        base_exprs=base_exprs,
        next_feats=np.array(feats),
        data_ref=f"seed={data.seed} n={n}",
    )


def _add_epigraph(problem, layout, z_exprs):
    for k, z in enumerate(z_exprs):
        t = AffineExpr.variable(layout.t_index(k))
        problem.add_scalar_ineq(t - z)
        problem.add_scalar_ineq(t + z)


def _s_minus_eps_block(s_var, dim, epsilon_pd):
    return [
        [s_var.expr(i, j) - (epsilon_pd if i == j else 0.0) for j in range(dim)]
        for i in range(dim)
    ]


def _sum_t(layout):
    return AffineExpr({layout.t_index(k): 1.0 for k in range(layout.n_samples)})


def _polish_t(y, z_values, layout):
    """Tighten the epigraph in place: t_k := |z_k(y)| (stays feasible,
    never increases the objective).  Returns sum of t."""
    t = np.abs(z_values)
    y[layout.t_start : layout.t_start + layout.n_samples] = t
    return float(t.sum())


# ---------------------------------------------------------------------------
# iterated fixed-anchor scheme

@dataclass
class QliAnchors:
    """Fixed values standing in for the nonlinearly-appearing variables."""

    S_xx_hat: np.ndarray
    R_x_hat: np.ndarray
    Psi_hat: np.ndarray
    S_uu_hat: np.ndarray

    def __post_init__(self):
        self.S_xx_hat = np.atleast_2d(np.asarray(self.S_xx_hat, float))
        self.R_x_hat = np.atleast_1d(np.asarray(self.R_x_hat, float))
        self.Psi_hat = np.atleast_2d(np.asarray(self.Psi_hat, float))
        self.S_uu_hat = np.atleast_2d(np.asarray(self.S_uu_hat, float))
        if not np.allclose(self.S_uu_hat, self.S_uu_hat.T, atol=1e-10):
            raise ValueError("S_uu anchor must be symmetric")
        if float(np.linalg.eigvalsh(self.S_uu_hat)[0]) <= 0.0:
            raise ValueError("S_uu anchor must be positive definite")

    @staticmethod
    def identity(n_phi, n_u):
        return QliAnchors(
            np.eye(n_phi), np.zeros(n_phi), np.zeros((n_phi + 1, n_u)), np.eye(n_u)
        )

    @staticmethod
    def from_params(params):
        return QliAnchors(
            params.S_xx.copy(), params.R_x.copy(), psi_matrix(params), params.S_uu.copy()
        )

    def greedy_matrix_hat(self):
        """Omega_hat + Psi_hat S_uu_hat^-1 Psi_hat'."""
        n = len(self.R_x_hat)
        omega = np.zeros((n + 1, n + 1))
        omega[:n, :n] = -self.S_xx_hat
        omega[:n, n] = 0.5 * self.R_x_hat
        omega[n, :n] = 0.5 * self.R_x_hat
        w_hat = self.Psi_hat @ np.linalg.solve(self.S_uu_hat, self.Psi_hat.T)
        return omega + 0.5 * (w_hat + w_hat.T)


def _qli_shifts(system, anchors):
    """gamma * f_k' (Omega_hat + W_hat) f_k for every sample."""
    g_hat = anchors.greedy_matrix_hat()
    if g_hat.shape != (system.layout.w_dim, system.layout.w_dim):
        raise ValueError(
            f"anchor dimension {g_hat.shape} does not match layout "
            f"({system.layout.w_dim}x{system.layout.w_dim})"
        )
    f = system.next_feats
    return system.gamma * np.einsum("ni,ij,nj->n", f, g_hat, f)


def build_qli_problem(system, anchors, epsilon_pd):
    """The fixed-anchor SDP: min sum t, residuals affine in theta only."""
    layout = system.layout
    shifts = _qli_shifts(system, anchors)
    problem, s_var, _ = layout.new_problem(with_w=False)
    z_exprs = [system.base_exprs[k] - shifts[k] for k in range(len(system))]
    _add_epigraph(problem, layout, z_exprs)
    problem.add_psd_constraint(_s_minus_eps_block(s_var, layout.n_zeta, epsilon_pd))
    problem.set_objective(_sum_t(layout))
    return problem


@dataclass
class SolveLogRow:
    status: str
    objective: float
    upper_bound: float = None
    iteration: int = None
    lam: float = None
    tightness: float = None  # max_k(t_k - |z_k|) at the solver point, before polish


@dataclass
class TrainResult:
    method: str
    params: QParams
    relaxed_cost: float  # None for methods without a relaxation lower bound
    upper_bound_cost: float
    solve_log: list
    policy: AffinePolicy


def run_lmi_qli(data, baseline, basis, gamma, tau, init=None, epsilon_pd=1e-6,
                settings=None):
    """Iterate the fixed-anchor SDP tau times, refreshing anchors each pass.

    A failed first iteration raises; a later failure aborts the loop and the
    last successful parameters are returned (the failure is logged).
    """
    if tau < 1:
        raise ValueError("tau must be >= 1")
    n_u = data.U.shape[1]
    layout = ThetaLayout(basis.n_phi, n_u, len(data))
    system = build_residual_exprs(data, baseline, basis, gamma, layout)
    anchors = init or QliAnchors.identity(basis.n_phi, n_u)
    settings = settings or SolveSettings()

    log = []
    params = None
    prev_objective = None
    for it in range(1, tau + 1):
        problem = build_qli_problem(system, anchors, epsilon_pd)
        res = conic.solve(problem, settings)
        if res.status is not SolveStatus.OPTIMAL:
            log.append(SolveLogRow(status=res.status.value, objective=res.objective,
                                   iteration=it))
            if params is None:
                raise SynthesisError(
                    f"iterated SDP failed at iteration {it}: status {res.status.value}"
                )
            logger.warning(
                "iterated SDP failed at iteration %d (status %s); keeping the "
                "parameters from iteration %d", it, res.status.value, it - 1,
            )
            break
        y = res.y.copy()
        shifts = _qli_shifts(system, anchors)
        z_vals = np.array([e.value(y) for e in system.base_exprs]) - shifts
        t_raw = y[layout.t_start : layout.t_start + layout.n_samples]
        tightness = float(np.max(t_raw - np.abs(z_vals)))
        objective = _polish_t(y, z_vals, layout)
        params = project_psd(layout.decode_params(y), epsilon_pd)
        log.append(SolveLogRow(status=res.status.value, objective=objective,
                               iteration=it, tightness=tightness))
        if prev_objective is not None and abs(objective - prev_objective) <= 1e-12 * max(
            1.0, abs(objective)
        ):
            logger.debug("objective stagnated at iteration %d (%.6e)", it, objective)
        prev_objective = objective
        anchors = QliAnchors.from_params(params)

    upper = l1_cost(params, baseline, basis, data, gamma)
    return TrainResult(
        method="lmi-qli",
        params=params,
        relaxed_cost=None,
        upper_bound_cost=upper,
        solve_log=log,
        policy=greedy_policy(params, baseline),
    )


# ---------------------------------------------------------------------------
# nuclear-norm relaxation

def build_lmi_ql_problem(system, lam, epsilon_pd, use_extra_lmi):
    """The relaxed SDP: min sum t + lam*tr(W) with the Schur-complement LMI."""
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    layout = system.layout
    problem, s_var, w_var = layout.new_problem(with_w=True)
    _add_epigraph(problem, layout, system.residual_exprs)

    # [[W, Psi], [Psi', S_uu]] >= 0 with Psi = [S_xu; -R_u'/2]
    n_phi, n_u, m = layout.n_phi, layout.n_u, layout.w_dim

    def psi_expr(i, j):
        if i < n_phi:
            return s_var.expr(i, n_phi + j)
        return AffineExpr.variable(layout.r_u_index(j)) * -0.5

    schur = [[None] * (m + n_u) for _ in range(m + n_u)]
    for i in range(m):
        for j in range(m):
            schur[i][j] = w_var.expr(i, j)
        for j in range(n_u):
            schur[i][m + j] = psi_expr(i, j)
            schur[m + j][i] = psi_expr(i, j)
    for i in range(n_u):
        for j in range(n_u):
            schur[m + i][m + j] = s_var.expr(n_phi + i, n_phi + j)
    problem.add_psd_constraint(schur)

    problem.add_psd_constraint(_s_minus_eps_block(s_var, layout.n_zeta, epsilon_pd))

    if use_extra_lmi:
        # S_xx - W_11 >= eps*I  (caps the state block of W from above)
        block = [
            [
                s_var.expr(i, j) - w_var.expr(i, j) - (epsilon_pd if i == j else 0.0)
                for j in range(n_phi)
            ]
            for i in range(n_phi)
        ]
        problem.add_psd_constraint(block)

    trace_w = AffineExpr({layout.w_index(i, i): 1.0 for i in range(m)})
    problem.set_objective(_sum_t(layout) + lam * trace_w)
    return problem


@dataclass
class LmiQlConfig:
    lambda_grid: tuple = (0.0, 1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0)
    epsilon_pd: float = 1e-6
    use_extra_lmi: bool = True
    refine_rel_tol: float = 1e-3
    refine_max_evals: int = 6
    solver: SolveSettings = None

    def __post_init__(self):
        grid = tuple(float(v) for v in self.lambda_grid)
        if not grid:
            raise ValueError("lambda_grid must be non-empty")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ValueError("lambda_grid must be strictly increasing")
        if grid[0] < 0:
            raise ValueError("lambda values must be nonnegative")
        if self.epsilon_pd <= 0:
            raise ValueError("epsilon_pd must be positive")
        self.lambda_grid = grid


def project_upper_bound(params, data, baseline, basis, gamma):
    """l1 cost of theta with W set back to Psi S_uu^-1 Psi' (the upper bound)."""
    return l1_cost(params, baseline, basis, data, gamma)


def run_lmi_ql(data, baseline, basis, gamma, config=None):
    """Relaxation with nuclear-norm penalty and line search over lambda.

    Every candidate solve lands in solve_log; the returned parameters belong
    to the candidate with the smallest projected upper bound (ties prefer the
    larger lambda).
    """
    config = config or LmiQlConfig()
    n_u = data.U.shape[1]
    layout = ThetaLayout(basis.n_phi, n_u, len(data))
    system = build_residual_exprs(data, baseline, basis, gamma, layout)
    settings = config.solver or SolveSettings()

    log = []
    solved = {}  # lam -> (upper, relaxed_part, params)

    def evaluate(lam):
        lam = float(lam)
        if lam in solved:
            return solved[lam][0]
        problem = build_lmi_ql_problem(system, lam, config.epsilon_pd,
                                       config.use_extra_lmi)
        res = conic.solve(problem, settings)
        if res.status is not SolveStatus.OPTIMAL:
            log.append(SolveLogRow(status=res.status.value, objective=res.objective,
                                   lam=lam))
            return math.inf
        y = res.y.copy()
        z_vals = np.array([e.value(y) for e in system.residual_exprs])
        t_raw = y[layout.t_start : layout.t_start + layout.n_samples]
        tightness = float(np.max(t_raw - np.abs(z_vals)))
        relaxed_part = _polish_t(y, z_vals, layout)
        params = project_psd(layout.decode_params(y), config.epsilon_pd)
        upper = project_upper_bound(params, data, baseline, basis, gamma)
        w_trace = float(np.trace(layout.decode_w(y)))
        log.append(SolveLogRow(status=res.status.value,
                               objective=relaxed_part + lam * w_trace,
                               upper_bound=upper, lam=lam, tightness=tightness))
        solved[lam] = (upper, relaxed_part, params)
        return upper

    for lam in config.lambda_grid:
        evaluate(lam)
    if not solved:
        statuses = {row.lam: row.status for row in log}
        raise SynthesisError(f"every lambda candidate failed: {statuses}")

    def best_lam():
        return min(solved, key=lambda lam: (solved[lam][0], -lam))

    # golden-section refinement between the winner's grid neighbors
    grid = sorted(solved)
    i = grid.index(best_lam())
    a = grid[max(i - 1, 0)]
    b = grid[min(i + 1, len(grid) - 1)]
    if b > a and config.refine_max_evals > 0:
        gr = (math.sqrt(5.0) - 1.0) / 2.0
        c = b - gr * (b - a)
        d = a + gr * (b - a)
        best_before = solved[best_lam()][0]
        fc, fd = evaluate(c), evaluate(d)
        evals = 2
        while evals < config.refine_max_evals and (b - a) > 1e-12:
            if fc <= fd:
                b, d, fd = d, c, fc
                c = b - gr * (b - a)
                fc = evaluate(c)
            else:
                a, c, fc = c, d, fd
                d = a + gr * (b - a)
                fd = evaluate(d)
            evals += 1
            best_now = solved[best_lam()][0]
            if best_before - best_now < config.refine_rel_tol * max(1.0, abs(best_before)):
                break
            best_before = best_now

    winner = best_lam()
    upper, relaxed_part, params = solved[winner]
    logger.debug("line search selected lambda=%.6g (upper bound %.6e)", winner, upper)
    return TrainResult(
        method="lmi-ql",
        params=params,
        relaxed_cost=relaxed_part,
        upper_bound_cost=upper,
        solve_log=log,
        policy=greedy_policy(params, baseline),
    )


# ---------------------------------------------------------------------------
# result files

def save_train_result(result, path):
    record = {
        "format": "train-result-v1",
        "method": result.method,
        "params": {
            "n_phi": result.params.n_phi,
            "n_u": result.params.n_u,
            "T": result.params.T,
            "R_x": result.params.R_x.tolist(),
            "R_u": result.params.R_u.tolist(),
            "S_upper": vech(result.params.S).tolist(),
        },
        "policy": {
            "coef": result.policy.coef.tolist(),
            "offset": result.policy.offset.tolist(),
        },
        "relaxed_cost": result.relaxed_cost,
        "upper_bound_cost": result.upper_bound_cost,
        "solve_log": [
            {
                "status": row.status,
                "objective": row.objective,
                "upper_bound": row.upper_bound,
                "iteration": row.iteration,
                "lam": row.lam,
                "tightness": row.tightness,
            }
            for row in result.solve_log
        ],
    }
    with open(path, "w") as fh:
        json.dump(record, fh, indent=2)
        fh.write("\n")


def load_train_result(path):
    with open(path) as fh:
        record = json.load(fh)
    if record.get("format") != "train-result-v1":
        raise ValueError(f"unrecognized train-result file format in {path}")
    p = record["params"]
    params = QParams(
        p["T"], np.array(p["R_x"]), np.array(p["R_u"]),
        unvech(np.array(p["S_upper"]), p["n_phi"] + p["n_u"]),
    )
    policy = AffinePolicy(np.array(record["policy"]["coef"]),
                          np.array(record["policy"]["offset"]))
    log = [SolveLogRow(**row) for row in record["solve_log"]]
    return TrainResult(
        method=record["method"],
        params=params,
        relaxed_cost=record["relaxed_cost"],
        upper_bound_cost=record["upper_bound_cost"],
        solve_log=log,
        policy=policy,
    )
