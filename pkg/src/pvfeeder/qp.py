"""Primal-dual interior-point method for small convex quadratically constrained QPs.

    minimise    1/2 x'Hx + c'x
    subject to  A x = b
                G x <= h
                lb <= x <= ub
                1/2 x'Q_k x + g_k'x + r_k <= 0      (Q_k positive semidefinite)

Bounds and linear inequalities are converted to slack-form rows; variables with
``lb == ub`` are substituted out before solving. Search directions come from the
reduced KKT system with a Mehrotra predictor-corrector centring rule.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, lu_factor, lu_solve

from .errors import AssemblyError


@dataclass
class QuadraticConstraint:
    q: np.ndarray  # (n, n) PSD
    g: np.ndarray  # (n,)
    r: float = 0.0

    def value(self, x):
        return 0.5 * x @ self.q @ x + self.g @ x + self.r


@dataclass
class ConvexProgram:
    h_mat: np.ndarray
    c: np.ndarray
    a_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    g_ineq: np.ndarray | None = None
    h_ineq: np.ndarray | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None
    quadratic: list = field(default_factory=list)
    const: float = 0.0

    @property
    def n(self) -> int:
        return len(self.c)

    def objective(self, x) -> float:
        return float(0.5 * x @ self.h_mat @ x + self.c @ x + self.const)

    def max_violation(self, x) -> float:
        """Largest constraint violation at ``x`` (0 when feasible)."""
        v = [0.0]
        if self.a_eq is not None and len(self.a_eq):
            v.append(np.max(np.abs(self.a_eq @ x - self.b_eq)))
        if self.g_ineq is not None and len(self.g_ineq):
            v.append(np.max(self.g_ineq @ x - self.h_ineq))
        if self.lb is not None:
            v.append(np.max(self.lb - x))
        if self.ub is not None:
            v.append(np.max(x - self.ub))
        v.extend(qc.value(x) for qc in self.quadratic)
        return float(max(max(v), 0.0))


@dataclass
class IpmResult:
    x: np.ndarray
    status: str  # optimal | not_converged | infeasible
    iterations: int
    objective: float
    primal_residual: float
    dual_residual: float
    gap: float
    eq_dual: np.ndarray | None = None


def _check_shapes(p: ConvexProgram) -> None:
    n = p.n
    if p.h_mat.shape != (n, n):
        raise AssemblyError(f"Hessian shape {p.h_mat.shape} does not match {n} variables")
    for name, mat, rhs in (("equality", p.a_eq, p.b_eq), ("inequality", p.g_ineq, p.h_ineq)):
        if mat is None:
            continue
        if mat.ndim != 2 or mat.shape[1] != n or rhs is None or rhs.shape != (mat.shape[0],):
            raise AssemblyError(f"{name} block has inconsistent dimensions")
    for name, vec in (("lb", p.lb), ("ub", p.ub)):
        if vec is not None and vec.shape != (n,):
            raise AssemblyError(f"{name} must have length {n}")
    if p.lb is not None and p.ub is not None and np.any(p.lb > p.ub):
        raise AssemblyError("lower bound exceeds upper bound")
    for qc in p.quadratic:
        if qc.q.shape != (n, n) or qc.g.shape != (n,):
            raise AssemblyError("quadratic constraint has inconsistent dimensions")


def _eliminate_fixed(p: ConvexProgram):
    """Substitute variables with lb == ub; return the reduced program and a lift function."""
    n = p.n
    lb = np.full(n, -np.inf) if p.lb is None else p.lb
    ub = np.full(n, np.inf) if p.ub is None else p.ub
    fixed = np.isfinite(lb) & (ub - lb <= 1e-12 * np.maximum(1.0, np.abs(lb)))
    free = ~fixed
    x_fix = np.where(fixed, lb, 0.0)
    xf = x_fix[fixed]

    def lift(y):
        x = x_fix.copy()
        x[free] = y
        return x

    hf = p.h_mat[np.ix_(free, free)]
    c = p.c[free] + p.h_mat[np.ix_(free, fixed)] @ xf
    const = p.const + p.c[fixed] @ xf + 0.5 * xf @ p.h_mat[np.ix_(fixed, fixed)] @ xf
    rows, rhs = [], []
    if p.g_ineq is not None and len(p.g_ineq):
        rows.append(p.g_ineq[:, free])
        rhs.append(p.h_ineq - p.g_ineq[:, fixed] @ xf)
    lbf, ubf = lb[free], ub[free]
    eye = np.eye(int(free.sum()))
    fin = np.isfinite(ubf)
    rows.append(eye[fin])
    rhs.append(ubf[fin])
    fin = np.isfinite(lbf)
    rows.append(-eye[fin])
    rhs.append(-lbf[fin])
    g = np.vstack(rows) if rows else np.zeros((0, free.sum()))
    h = np.concatenate(rhs) if rhs else np.zeros(0)
    if p.a_eq is not None and len(p.a_eq):
        a = p.a_eq[:, free]
        b = p.b_eq - p.a_eq[:, fixed] @ xf
    else:
        a, b = np.zeros((0, free.sum())), np.zeros(0)
    quad = []
    for qc in p.quadratic:
        quad.append(
            QuadraticConstraint(
                qc.q[np.ix_(free, free)],
                qc.g[free] + qc.q[np.ix_(free, fixed)] @ xf,
                qc.r + qc.g[fixed] @ xf + 0.5 * xf @ qc.q[np.ix_(fixed, fixed)] @ xf,
            )
        )
    return hf, c, const, a, b, g, h, quad, lift


def _scale_rows(mat, rhs):
    norms = np.linalg.norm(mat, axis=1) if mat.size else np.zeros(len(rhs))
    norms = np.where(norms > 0, norms, 1.0)
    return mat / norms[:, None], rhs / norms


def _max_step(v, dv, frac=0.99) -> float:
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, frac * np.min(-v[neg] / dv[neg])))


def _initial_point(hmat, c, a, b, g, h):
    """Minimiser of the objective plus a unit quadratic pull onto the linear rows, ignoring signs."""
    n = len(c)
    k = hmat + g.T @ g + 1e-8 * np.eye(n)
    rhs = -c + g.T @ h
    if len(b):
        kkt = np.block([[k, a.T], [a, np.zeros((len(b), len(b)))]])
        try:
            return np.linalg.solve(kkt, np.concatenate([rhs, b]))[:n]
        except np.linalg.LinAlgError:
            return np.zeros(n)
    try:
        return np.linalg.solve(k, rhs)
    except np.linalg.LinAlgError:
        return np.zeros(n)


def interior_point(program: ConvexProgram, tol: float = 1e-8, max_iter: int = 200) -> IpmResult:
    """Solve ``program``; the result is deterministic for identical inputs."""
    _check_shapes(program)
    hmat, c, _, a, b, g, h, quad, lift = _eliminate_fixed(program)
    n = len(c)
    a, b = _scale_rows(a, b)
    g, h = _scale_rows(g, h)
    ml, me, mq = len(h), len(b), len(quad)
    m = ml + mq

    if n == 0:
        x = lift(np.zeros(0))
        viol = program.max_violation(x)
        status = "optimal" if viol <= tol else "infeasible"
        return IpmResult(x, status, 0, program.objective(x), viol, 0.0, 0.0)

    if mq:
        q_stack = np.array([qc.q for qc in quad])
        g_stack = np.array([qc.g for qc in quad])
        r_stack = np.array([qc.r for qc in quad])

    def ineq(x):
        vals = g @ x - h
        if mq:
            qx = q_stack @ x
            vals = np.concatenate([vals, 0.5 * qx @ x + g_stack @ x + r_stack])
        return vals

    def jac(x):
        if not mq:
            return g
        return np.vstack([g, q_stack @ x + g_stack])

    # normalise the objective; the minimiser is unchanged
    obj_scale = max(1.0, np.max(np.abs(c), initial=0.0), np.max(np.abs(hmat), initial=0.0))
    hmat, c = hmat / obj_scale, c / obj_scale

    x = _initial_point(hmat, c, a, b, g, h)
    f = ineq(x)
    s = np.maximum(-f, 0.0) + 1.0
    z = np.ones(m)
    y = np.zeros(me)
    c_norm = 1.0 + np.max(np.abs(c), initial=0.0)
    b_norm = 1.0 + np.max(np.abs(b), initial=0.0)
    h_norm = 1.0 + np.max(np.abs(h), initial=0.0)

    status, it = "not_converged", 0
    rp = rd = gap = np.inf
    for it in range(1, max_iter + 1):
        f = ineq(x)
        j = jac(x)
        r_dual = hmat @ x + c + a.T @ y + j.T @ z
        r_eq = a @ x - b
        r_in = f + s
        mu = s @ z / m if m else 0.0
        obj = 0.5 * x @ hmat @ x + c @ x
        rd = np.max(np.abs(r_dual), initial=0.0) / c_norm
        rp = max(np.max(np.abs(r_eq), initial=0.0) / b_norm, np.max(np.abs(r_in), initial=0.0) / h_norm)
        gap = s @ z * obj_scale
        if rd <= tol and rp <= tol and gap <= tol * (1.0 + abs(obj * obj_scale)):
            status = "optimal"
            it -= 1
            break
        if np.max(np.abs(z), initial=0.0) > 1e13 or not np.all(np.isfinite(x)):
            status = "infeasible"
            break

        k_mat = hmat.copy()
        if mq:
            k_mat += np.tensordot(z[ml:], q_stack, axes=1)
        w = z / s
        k_mat += j.T @ (w[:, None] * j)
        kkt = np.block([[k_mat, a.T], [a, np.zeros((me, me))]]) if me else k_mat
        kkt = kkt + 1e-12 * np.eye(len(kkt))
        try:
            lu = lu_factor(kkt)
        except (LinAlgError, ValueError):
            status = "not_converged"
            break

        def direction(r_comp):
            # r_comp is the complementarity residual s*z - target
            rhs_x = -r_dual - j.T @ (w * r_in - r_comp / s)
            sol = lu_solve(lu, np.concatenate([rhs_x, -r_eq]) if me else rhs_x)
            dx, dy = sol[:n], sol[n:]
            dz = w * (j @ dx + r_in) - r_comp / s
            ds = -r_in - j @ dx
            return dx, dy, ds, dz

        dx, dy, ds, dz = direction(s * z)
        a_aff = min(_max_step(s, ds, 1.0), _max_step(z, dz, 1.0))
        mu_aff = (s + a_aff * ds) @ (z + a_aff * dz) / m if m else 0.0
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
        dx, dy, ds, dz = direction(s * z + ds * dz - sigma * mu)
        alpha = min(_max_step(s, ds), _max_step(z, dz))
        x = x + alpha * dx
        y = y + alpha * dy
        s = s + alpha * ds
        z = z + alpha * dz
    else:
        status = "not_converged"

    if status != "optimal" and rp > max(np.sqrt(tol), 1e-4):
        status = "infeasible"
    full = lift(x)
    return IpmResult(full, status, it, program.objective(full), float(rp), float(rd), float(gap), y)
