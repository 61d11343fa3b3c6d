"""Sparse systems, Krylov solvers and algebraic-multigrid preconditioning.

The potential system is symmetric positive semi-definite with the constant
vector in its kernel; it is solved by conjugate gradients with the iterates
projected onto the orthogonal complement of the nullspace.  The transport
systems are nonsymmetric but definite (the mass term from the time
discretization) and are solved with restarted GMRES.  Both accept warm
starts and report iteration counts and residuals.

Preconditioning is a single V-cycle of smoothed-aggregation AMG (built via
pyamg) with weighted-Jacobi smoothing; the singular potential matrix is
shifted by a scaled mass matrix before the hierarchy is built.
"""

import time
from dataclasses import dataclass, field

import numpy as np
import pyamg
import scipy.io
import scipy.sparse as sp
import scipy.sparse.linalg  # noqa: F401  (sp.linalg.splu)

from .errors import ConfigurationError, SolverError


@dataclass
class SparseSystem:
    """CSR matrix, right-hand side and optional nullspace vector."""

    matrix: sp.csr_matrix
    rhs: np.ndarray
    nullspace: np.ndarray = None

    def __post_init__(self):
        if self.matrix.shape[0] != self.matrix.shape[1]:
            raise ConfigurationError("system matrix must be square")
        if self.rhs.shape != (self.matrix.shape[0],):
            raise ConfigurationError("rhs length does not match matrix size")

    @property
    def size(self):
        return self.matrix.shape[0]


@dataclass
class SolveReport:
    iterations: int
    residual: float          # final relative residual
    converged: bool
    wall_time: float = 0.0
    subsystem: str = ""

    def csv_row(self, step):
        return (f"{step},{self.subsystem},{self.iterations},"
                f"{self.residual:.6e},{self.wall_time:.6e}")


def _project_out(x, unit_null):
    x -= (unit_null @ x) * unit_null
    return x


def cg_nullspace(system, preconditioner=None, rtol=1e-5, maxit=1000, x0=None):
    """Preconditioned CG, iterates kept orthogonal to the nullspace.

    Requires a symmetric PSD matrix and an rhs already orthogonal to the
    nullspace (assembly guarantees this for the potential system).  Returns
    (solution, SolveReport); non-convergence is reported, not raised, so the
    caller decides whether to abort.
    """
    A = system.matrix
    b = system.rhs
    null = system.nullspace
    unit_null = None
    if null is not None:
        unit_null = null / np.linalg.norm(null)

    t_start = time.perf_counter()
    b_norm = np.linalg.norm(b)
    if b_norm == 0.0:
        x = np.zeros_like(b)
        return x, SolveReport(0, 0.0, True, time.perf_counter() - t_start)

    x = np.zeros_like(b) if x0 is None else x0.astype(float).copy()
    if unit_null is not None:
        _project_out(x, unit_null)
    r = b - A @ x
    if unit_null is not None:
        _project_out(r, unit_null)

    apply_prec = preconditioner if preconditioner is not None else (lambda v: v)
    res = np.linalg.norm(r) / b_norm
    if res <= rtol:
        return x, SolveReport(0, float(res), True, time.perf_counter() - t_start)

    z = apply_prec(r)
    if unit_null is not None:
        _project_out(z, unit_null)
    p = z.copy()
    rz = r @ z
    for it in range(1, maxit + 1):
        Ap = A @ p
        pAp = p @ Ap
        if pAp <= 0.0:
            return x, SolveReport(it, float(res), False,
                                  time.perf_counter() - t_start)
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        if unit_null is not None:
            _project_out(x, unit_null)
            _project_out(r, unit_null)
        res = np.linalg.norm(r) / b_norm
        if res <= rtol:
            return x, SolveReport(it, float(res), True,
                                  time.perf_counter() - t_start)
        z = apply_prec(r)
        if unit_null is not None:
            _project_out(z, unit_null)
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, SolveReport(maxit, float(res), False, time.perf_counter() - t_start)


def gmres(system, preconditioner=None, rtol=1e-7, maxit=1000, restart=30,
          x0=None):
    """Right-preconditioned restarted GMRES.

    The least-squares residual equals the true residual under right
    preconditioning, so the reported relative residual is honest.  Returns
    (solution, SolveReport).
    """
    A = system.matrix
    b = system.rhs
    n = b.shape[0]
    apply_prec = preconditioner if preconditioner is not None else (lambda v: v)

    t_start = time.perf_counter()
    b_norm = np.linalg.norm(b)
    if b_norm == 0.0:
        return np.zeros_like(b), SolveReport(0, 0.0, True,
                                             time.perf_counter() - t_start)

    x = np.zeros_like(b) if x0 is None else x0.astype(float).copy()
    total_it = 0
    res = np.linalg.norm(b - A @ x) / b_norm
    if res <= rtol:
        return x, SolveReport(0, float(res), True, time.perf_counter() - t_start)

    stagnated = False
    while total_it < maxit and not stagnated:
        r = b - A @ x
        beta = np.linalg.norm(r)
        V = np.zeros((restart + 1, n))
        Z = np.zeros((restart, n))
        H = np.zeros((restart + 1, restart))
        cs = np.zeros(restart)
        sn = np.zeros(restart)
        g = np.zeros(restart + 1)
        g[0] = beta
        V[0] = r / beta
        k_used = 0
        for k in range(restart):
            if total_it >= maxit:
                break
            Z[k] = apply_prec(V[k])
            w = A @ Z[k]
            for i in range(k + 1):
                H[i, k] = w @ V[i]
                w -= H[i, k] * V[i]
            h_next = np.linalg.norm(w)
            H[k + 1, k] = h_next
            # accumulated Givens rotations, then the new one
            for i in range(k):
                t = cs[i] * H[i, k] + sn[i] * H[i + 1, k]
                H[i + 1, k] = -sn[i] * H[i, k] + cs[i] * H[i + 1, k]
                H[i, k] = t
            denom = np.hypot(H[k, k], H[k + 1, k])
            if denom == 0.0:
                stagnated = True
                break
            cs[k] = H[k, k] / denom
            sn[k] = H[k + 1, k] / denom
            H[k, k] = denom
            H[k + 1, k] = 0.0
            g[k + 1] = -sn[k] * g[k]
            g[k] = cs[k] * g[k]
            total_it += 1
            k_used = k + 1
            res = abs(g[k + 1]) / b_norm
            if res <= rtol or h_next == 0.0:
                break
            if k + 1 < restart:
                V[k + 1] = w / h_next

        if k_used:
            y = np.linalg.solve(np.triu(H[:k_used, :k_used]), g[:k_used])
            x = x + Z[:k_used].T @ y
        new_res = np.linalg.norm(b - A @ x) / b_norm
        if new_res >= res * (1 + 1e-12) and new_res >= rtol and k_used == restart:
            stagnated = True
        res = new_res
        if res <= rtol:
            return x, SolveReport(total_it, float(res), True,
                                  time.perf_counter() - t_start)
    return x, SolveReport(total_it, float(res), False,
                          time.perf_counter() - t_start)


# ---------------------------------------------------------------------------
# smoothed-aggregation AMG (pyamg-backed)
# ---------------------------------------------------------------------------

@dataclass
class AmgHierarchy:
    """Smoothed-aggregation hierarchy applied as a single V-cycle.

    Level sizes decrease strictly; the coarsest level is solved densely
    (pseudo-inverse, so tiny shifts of singular matrices stay harmless).
    """

    ml: object
    level_sizes: list = field(init=False)

    def __post_init__(self):
        self.level_sizes = [lvl.A.shape[0] for lvl in self.ml.levels]
        self._op = self.ml.aspreconditioner(cycle="V")

    def apply(self, r):
        return self._op @ r

    def __call__(self, r):
        return self._op @ r


def amg_build(matrix, strength=0.08, max_coarse=200, max_levels=20):
    """Build a smoothed-aggregation hierarchy with weighted-Jacobi smoothing
    (one pre/post sweep) and the constant vector as the near-nullspace."""
    A = matrix.tocsr()
    n = A.shape[0]
    try:
        ml = pyamg.smoothed_aggregation_solver(
            A,
            B=np.ones((n, 1)),
            strength=("symmetric", {"theta": strength}),
            smooth=("jacobi", {"omega": 4.0 / 3.0}),
            presmoother=("jacobi", {"omega": 2.0 / 3.0, "iterations": 1}),
            postsmoother=("jacobi", {"omega": 2.0 / 3.0, "iterations": 1}),
            max_coarse=max_coarse,
            max_levels=max_levels,
            coarse_solver="pinv",
        )
    except Exception as exc:  # aggregation failure on degenerate input
        raise SolverError(f"AMG hierarchy construction failed: {exc}") from exc
    return AmgHierarchy(ml=ml)


def shifted_emi_preconditioner(A_phi, mass, alpha):
    """AMG V-cycle on the definite shift A_phi + alpha * M.

    alpha should scale like (mean conductivity) / (domain diameter)^2 so the
    shift matches the lowest elliptic eigenvalue; it must be positive.
    """
    if alpha <= 0:
        raise ConfigurationError(f"preconditioner shift must be positive, "
                                 f"got {alpha}")
    P = (A_phi + alpha * mass).tocsr()
    return amg_build(P)


def solve_singular_direct(system):
    """Exact solve of a consistent singular system via a bordered sparse LU.

    Appends the nullspace vector as a Lagrange-multiplier row/column, which
    pins the free constant and keeps elimination backward stable; used by the
    verification studies where the Krylov accuracy floor (condition number
    ~ C_M/(dt kappa h^2) at the tiny study time step) sits above the
    discretization error being measured.
    """
    A = system.matrix
    n = A.shape[0]
    null = (system.nullspace if system.nullspace is not None
            else np.ones(n))
    col = sp.csc_matrix(null.reshape(-1, 1))
    bordered = sp.bmat([[A, col], [col.T, None]], format="csc")
    rhs = np.concatenate([system.rhs, [0.0]])
    lu = sp.linalg.splu(bordered)
    x = lu.solve(rhs)[:n]
    return x


def solve_emi_system(system, mass=None, alpha=None, rtol=1e-5, maxit=1000,
                     x0=None, jacobi_scale=False, hierarchy=None):
    """Solve the singular potential system with preconditioned nullspace CG.

    The matrix mixes entry scales (conductivity vs. the membrane Robin weight
    C_M/dt), so the system is symmetrically Jacobi-scaled before the Krylov
    loop; the nullspace vector transforms accordingly.  The preconditioner is
    one AMG V-cycle on the definite shift A + alpha M (built on the scaled
    matrix).  Returns (solution, report, hierarchy); pass `hierarchy` back in
    to reuse a previously built preconditioner.
    """
    A = system.matrix
    b = system.rhs
    null = (system.nullspace if system.nullspace is not None
            else np.ones(A.shape[0]))

    if jacobi_scale:
        d = A.diagonal()
        if np.any(d <= 0):
            raise SolverError("non-positive diagonal in the potential matrix")
        s = 1.0 / np.sqrt(d)
        S = sp.diags(s)
        A_s = (S @ A @ S).tocsr()
        b_s = s * b
        null_s = null / s  # D^{1/2} null spans ker(A_s)
        x0_s = None if x0 is None else x0 / s
        mass_s = None if mass is None else (S @ mass @ S).tocsr()
    else:
        A_s, b_s, null_s, x0_s, mass_s = A, b, null, x0, mass

    if hierarchy is None:
        if mass_s is not None and alpha is not None:
            hierarchy = shifted_emi_preconditioner(A_s, mass_s, alpha)
        else:
            hierarchy = amg_build(A_s)

    scaled = SparseSystem(matrix=A_s, rhs=b_s, nullspace=null_s)
    x_s, report = cg_nullspace(scaled, preconditioner=hierarchy.apply,
                               rtol=rtol, maxit=maxit, x0=x0_s)
    x = s * x_s if jacobi_scale else x_s
    return x, report, hierarchy


# ---------------------------------------------------------------------------
# I/O for offline solver experiments
# ---------------------------------------------------------------------------

def write_matrix_market(system, path):
    scipy.io.mmwrite(str(path), system.matrix)


def read_matrix_market(path):
    return sp.csr_matrix(scipy.io.mmread(str(path)))
