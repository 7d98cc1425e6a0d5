"""Small conic programs: affine expressions, a problem builder, one solve contract.

Canonical form, over a flat decision vector y:

    minimize    c' y + c0
    subject to  e_i(y) >= 0                     (scalar affine inequalities)
                B_j(y) positive semidefinite    (symmetric affine matrix blocks)

The solver behind ``solve`` is Clarabel (interior-point). Nothing outside this
module may touch the backend; callers see only ConicProblem / SolveResult.

Clarabel takes min q'x s.t. Ax + s = b, s in K.  A scalar inequality e(y) >= 0
becomes the nonnegative-cone row  -coef(e)' y + s = const(e).  A d x d PSD
block becomes d(d+1)/2 rows in a PSD-triangle cone: the block's upper triangle
in column-major order, off-diagonal entries scaled by sqrt(2) (the isometric
vectorization the cone expects).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import sparse

import clarabel

_SQRT2 = math.sqrt(2.0)


class SolveStatus(Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    MAX_ITER = "max_iter"
    NUMERICAL_FAILURE = "numerical_failure"


class AffineExpr:
    """Affine function of the decision vector: sum_i coeffs[i]*y_i + constant.

    Immutable by convention; arithmetic returns new expressions.  Zero
    coefficients are dropped so structural equality is meaningful.
    """

    __slots__ = ("coeffs", "constant")

    def __init__(self, coeffs=None, constant=0.0):
        self.coeffs = {i: float(c) for i, c in (coeffs or {}).items() if c != 0.0}
        self.constant = float(constant)

    @staticmethod
    def variable(index):
        return AffineExpr({index: 1.0})

    @staticmethod
    def const(value):
        return AffineExpr({}, value)

    def __add__(self, other):
        other = _as_expr(other)
        coeffs = dict(self.coeffs)
        for i, c in other.coeffs.items():
            coeffs[i] = coeffs.get(i, 0.0) + c
        return AffineExpr(coeffs, self.constant + other.constant)

    __radd__ = __add__

    def __neg__(self):
        return AffineExpr({i: -c for i, c in self.coeffs.items()}, -self.constant)

    def __sub__(self, other):
        return self + (-_as_expr(other))

    def __rsub__(self, other):
        return _as_expr(other) + (-self)

    def __mul__(self, scalar):
        s = float(scalar)
        return AffineExpr({i: s * c for i, c in self.coeffs.items()}, s * self.constant)

    __rmul__ = __mul__

    def value(self, y):
        return self.constant + sum(c * y[i] for i, c in self.coeffs.items())

    def same_as(self, other):
        other = _as_expr(other)
        return self.constant == other.constant and self.coeffs == other.coeffs

    def __repr__(self):
        return f"AffineExpr({format_expr(self)})"


def _as_expr(x):
    if isinstance(x, AffineExpr):
        return x
    return AffineExpr({}, float(x))


def format_expr(expr):
    """Deterministic human-readable rendering, terms ordered by variable index."""
    parts = []
    for i in sorted(expr.coeffs):
        parts.append(f"{expr.coeffs[i]:+.12g}*y{i}")
    if expr.constant != 0.0 or not parts:
        parts.append(f"{expr.constant:+.12g}")
    return " ".join(parts)


@dataclass
class SymMatVar:
    """Symmetric matrix of scalar variables; only the upper triangle is stored.

    Entry (i, j) with i <= j lives at flat index ``start + offset(i, j)`` where
    offsets walk the upper triangle row-major.
    """

    dim: int
    start: int
    name: str = ""

    def index(self, i, j):
        if i > j:
            i, j = j, i
        if not (0 <= i <= j < self.dim):
            raise IndexError(f"entry ({i},{j}) outside {self.dim}x{self.dim} matrix")
        return self.start + i * self.dim - i * (i - 1) // 2 + (j - i)

    def expr(self, i, j):
        return AffineExpr.variable(self.index(i, j))

    @property
    def num_entries(self):
        return self.dim * (self.dim + 1) // 2

    def value(self, y):
        """Assemble the symmetric matrix from a solution vector."""
        m = np.empty((self.dim, self.dim))
        for i in range(self.dim):
            for j in range(i, self.dim):
                m[i, j] = m[j, i] = y[self.index(i, j)]
        return m


@dataclass
class SolveSettings:
    feas_tol: float = 1e-8
    gap_tol: float = 1e-8
    max_iter: int = 200
    verbose: bool = False


@dataclass
class SolveResult:
    status: SolveStatus
    y: np.ndarray
    objective: float
    primal_residual: float
    dual_residual: float
    iterations: int


@dataclass
class ConicProblem:
    """Builder for the canonical form.  Variables are allocated in call order."""

    var_count: int = 0
    objective: AffineExpr = field(default_factory=AffineExpr)
    scalar_ineqs: list = field(default_factory=list)
    psd_blocks: list = field(default_factory=list)

    def add_scalar_var(self):
        idx = self.var_count
        self.var_count += 1
        return idx

    def add_scalar_vars(self, n):
        return [self.add_scalar_var() for _ in range(n)]

    def add_sym_mat_var(self, dim, name=""):
        if dim <= 0:
            raise ValueError(f"matrix variable needs positive dimension, got {dim}")
        var = SymMatVar(dim=dim, start=self.var_count, name=name)
        self.var_count += var.num_entries
        return var

    def set_objective(self, expr):
        self.objective = _as_expr(expr)

    def add_scalar_ineq(self, expr):
        """Constrain expr >= 0."""
        self.scalar_ineqs.append(_as_expr(expr))

    def add_psd_constraint(self, block):
        """Constrain the affine symmetric matrix ``block`` to be PSD.

        ``block`` is a square nested sequence of AffineExpr (or numbers);
        entries (i, j) and (j, i) must be structurally identical.
        """
        rows = [[_as_expr(e) for e in row] for row in block]
        d = len(rows)
        for row in rows:
            if len(row) != d:
                raise ValueError("psd block must be square")
        for i in range(d):
            for j in range(i + 1, d):
                if not rows[i][j].same_as(rows[j][i]):
                    raise ValueError(f"psd block not symmetric at ({i},{j})")
        self.psd_blocks.append(rows)
        return len(self.psd_blocks) - 1


def eval_psd_violation(block, y):
    """Largest eigenvalue deficit of a block at the point y: max(0, -lambda_min)."""
    d = len(block)
    m = np.empty((d, d))
    for i in range(d):
        for j in range(d):
            m[i, j] = block[i][j].value(y)
    m = 0.5 * (m + m.T)
    return max(0.0, -float(np.linalg.eigvalsh(m)[0]))


def _assemble(problem):
    """Lower the builder state to Clarabel's (P, q, A, b, cones)."""
    n = problem.var_count
    q = np.zeros(n)
    for i, c in problem.objective.coeffs.items():
        q[i] = c

    rows, cols, vals, b, cones = [], [], [], [], []
    r = 0
    nl = len(problem.scalar_ineqs)
    for e in problem.scalar_ineqs:
        for i, c in e.coeffs.items():
            rows.append(r)
            cols.append(i)
            vals.append(-c)
        b.append(e.constant)
        r += 1
    if nl:
        cones.append(clarabel.NonnegativeConeT(nl))

    for block in problem.psd_blocks:
        d = len(block)
        for j in range(d):
            for i in range(j + 1):
                scale = 1.0 if i == j else _SQRT2
                e = block[i][j]
                for k, c in e.coeffs.items():
                    rows.append(r)
                    cols.append(k)
                    vals.append(-c * scale)
                b.append(e.constant * scale)
                r += 1
        cones.append(clarabel.PSDTriangleConeT(d))

    A = sparse.csc_matrix(
        (vals, (rows, cols)), shape=(r, n), dtype=np.float64
    )
    return q, A, np.array(b), cones


def _audit_primal(problem, y):
    """Max constraint violation at y, by direct evaluation (backend-free)."""
    worst = 0.0
    for e in problem.scalar_ineqs:
        worst = max(worst, -min(0.0, e.value(y)))
    for block in problem.psd_blocks:
        worst = max(worst, eval_psd_violation(block, y))
    return worst


_STATUS_MAP = {
    "Solved": SolveStatus.OPTIMAL,
    "PrimalInfeasible": SolveStatus.INFEASIBLE,
    "AlmostPrimalInfeasible": SolveStatus.INFEASIBLE,
    "DualInfeasible": SolveStatus.UNBOUNDED,
    "AlmostDualInfeasible": SolveStatus.UNBOUNDED,
    "MaxIterations": SolveStatus.MAX_ITER,
    "MaxTime": SolveStatus.MAX_ITER,
}


def solve(problem, settings=None):
    """Solve the problem; never raises on solver-side failure, reports status.

    An Optimal result is audited: the returned point must satisfy every scalar
    inequality above -feas_tol and every PSD block within feas_tol eigenvalue
    deficit, else the status is downgraded to NUMERICAL_FAILURE.
    """
    settings = settings or SolveSettings()
    n = problem.var_count

    if n == 0:
        # Constant problem: feasibility is decidable by inspection.
        y = np.zeros(0)
        viol = _audit_primal(problem, y)
        status = SolveStatus.OPTIMAL if viol <= settings.feas_tol else SolveStatus.INFEASIBLE
        return SolveResult(status, y, problem.objective.constant, viol, 0.0, 0)

    q, A, b, cones = _assemble(problem)
    P = sparse.csc_matrix((n, n), dtype=np.float64)

    cfg = clarabel.DefaultSettings()
    cfg.verbose = settings.verbose
    cfg.max_iter = settings.max_iter
    # The backend's feasibility test is relative to the problem scale while the
    # audit below is absolute, so ask the backend for one extra digit.
    cfg.tol_feas = 0.1 * settings.feas_tol
    cfg.tol_gap_abs = settings.gap_tol
    cfg.tol_gap_rel = settings.gap_tol

    solver = clarabel.DefaultSolver(P, q, A, b, cones, cfg)
    sol = solver.solve()

    status = _STATUS_MAP.get(str(sol.status).split(".")[-1], SolveStatus.NUMERICAL_FAILURE)
    y = np.asarray(sol.x, dtype=float)
    objective = float(q @ y) + problem.objective.constant
    primal = _audit_primal(problem, y)
    dual = float(sol.r_dual)

    if status is SolveStatus.OPTIMAL and primal > settings.feas_tol:
        status = SolveStatus.NUMERICAL_FAILURE

    return SolveResult(status, y, objective, primal, dual, int(sol.iterations))


def dump_problem(problem):
    """Plain-text rendering of the whole problem, stable across runs."""
    lines = [f"variables: {problem.var_count}", f"minimize {format_expr(problem.objective)}"]
    if problem.scalar_ineqs:
        lines.append("subject to")
        for e in problem.scalar_ineqs:
            lines.append(f"  {format_expr(e)} >= 0")
    for bi, block in enumerate(problem.psd_blocks):
        lines.append(f"psd block {bi} ({len(block)}x{len(block)}):")
        for row in block:
            lines.append("  [" + ", ".join(format_expr(e) for e in row) + "]")
    return "\n".join(lines) + "\n"
