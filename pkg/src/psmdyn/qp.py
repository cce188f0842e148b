"""Dense convex QP solver: operator splitting (ADMM) with solution polish.

Solves
    minimize   0.5 x' P x + q' x
    subject to l <= A x <= u

in the style of the OSQP splitting: one KKT factorization per rho setting,
per-row rho (large on equality rows), over-relaxed updates, and a final
polish step that re-solves the KKT system on the detected active set to
machine precision. Sizes here are small (hundreds of variables), so dense
LU factorization is the right tool.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import NumericalError


@dataclass
class QPResult:
    x: np.ndarray
    y: np.ndarray              # multipliers, one per constraint row
    iterations: int
    primal_residual: float
    dual_residual: float
    kkt_residual: float        # ||P x + q + A' y||_inf after polish
    polished: bool
    active_lower: np.ndarray   # boolean masks per row
    active_upper: np.ndarray
    converged: bool


def solve_qp(P, q, A, l, u,
             eps_abs: float = 1e-9,
             eps_rel: float = 1e-9,
             max_iter: int = 200_000,
             sigma: float = 1e-6,
             alpha: float = 1.6,
             rho0: float = 0.1,
             check_every: int = 25,
             adapt_every: int = 2000,
             raise_on_failure: bool = True) -> QPResult:
    P = np.asarray(P, dtype=float)
    q = np.asarray(q, dtype=float)
    A = np.atleast_2d(np.asarray(A, dtype=float))
    l = np.asarray(l, dtype=float)
    u = np.asarray(u, dtype=float)
    n = P.shape[0]
    m = A.shape[0]

    eq = (u - l) < 1e-12
    rho = np.where(eq, 1e3 * rho0, rho0)

    def factor(rho_vec):
        K = np.zeros((n + m, n + m))
        K[:n, :n] = P + sigma * np.eye(n)
        K[:n, n:] = A.T
        K[n:, :n] = A
        K[n:, n:] = -np.diag(1.0 / rho_vec)
        return scipy.linalg.lu_factor(K)

    lu = factor(rho)
    x = np.zeros(n)
    z = np.zeros(m)
    y = np.zeros(m)

    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        rhs = np.concatenate([sigma * x - q, z - y / rho])
        sol = scipy.linalg.lu_solve(lu, rhs)
        x_t = sol[:n]
        z_t = z + (sol[n:] - y) / rho
        x_new = alpha * x_t + (1.0 - alpha) * x
        z_relax = alpha * z_t + (1.0 - alpha) * z
        z_new = np.clip(z_relax + y / rho, l, u)
        y = y + rho * (z_relax - z_new)
        x, z = x_new, z_new

        if it % check_every == 0:
            Ax = A @ x
            r_prim = np.max(np.abs(Ax - z)) if m else 0.0
            r_dual = np.max(np.abs(P @ x + q + A.T @ y))
            e_prim = eps_abs + eps_rel * max(np.max(np.abs(Ax)) if m else 0.0,
                                             np.max(np.abs(z)) if m else 0.0)
            e_dual = eps_abs + eps_rel * max(np.max(np.abs(P @ x)),
                                             np.max(np.abs(A.T @ y)) if m else 0.0,
                                             np.max(np.abs(q)))
            if r_prim <= e_prim and r_dual <= e_dual:
                converged = True
                break
            if it % adapt_every == 0 and r_dual > 0:
                ratio = np.sqrt(max(r_prim, 1e-16) / max(r_dual, 1e-16))
                if ratio > 5.0 or ratio < 0.2:
                    rho = np.clip(rho * ratio, 1e-6, 1e6)
                    rho[eq] = np.maximum(rho[eq], 1e3 * rho0)
                    lu = factor(rho)

    Ax = A @ x
    r_prim = np.max(np.abs(Ax - z)) if m else 0.0
    r_dual = np.max(np.abs(P @ x + q + A.T @ y))

    x_p, y_p, polished = _polish(P, q, A, l, u, x, y, sigma)
    if polished:
        x, y = x_p, y_p
        Ax = A @ x if m else Ax
        r_prim = float(max(np.max(np.maximum(l - Ax, 0.0), initial=0.0),
                           np.max(np.maximum(Ax - u, 0.0), initial=0.0))) if m else 0.0

    kkt = float(np.max(np.abs(P @ x + q + (A.T @ y if m else 0.0))))
    act_l = (np.abs(Ax - l) < 1e-7) if m else np.zeros(0, dtype=bool)
    act_u = (np.abs(Ax - u) < 1e-7) if m else np.zeros(0, dtype=bool)

    result = QPResult(x=x, y=y, iterations=it, primal_residual=float(r_prim),
                      dual_residual=float(r_dual), kkt_residual=kkt,
                      polished=polished, active_lower=act_l, active_upper=act_u,
                      converged=converged or polished)
    if not result.converged and raise_on_failure:
        err = NumericalError(
            f"QP did not converge in {max_iter} iterations "
            f"(primal {r_prim:.2e}, dual {r_dual:.2e})")
        err.best_iterate = result
        raise err
    return result


def _polish(P, q, A, l, u, x, y, sigma, tol_active: float = 1e-6):
    """Re-solve on the active set detected from the ADMM iterate.

    Active rows keep their bound as an equality; the reduced KKT system is
    solved with small regularization and one step of iterative refinement.
    Returns (x, y, ok); ok is False when the polish is infeasible or worse.
    """
    n = P.shape[0]
    m = A.shape[0]
    if m == 0:
        x_p = np.linalg.solve(P + 1e-12 * np.eye(n), -q)
        return x_p, y, True
    Ax = A @ x
    low = (y < -tol_active) | (Ax - l < tol_active * (1.0 + np.abs(l)))
    upp = (y > tol_active) | (u - Ax < tol_active * (1.0 + np.abs(u)))
    eq = (u - l) < 1e-12
    low = low | eq
    upp = (upp | eq) & ~(low & ~eq)  # prefer lower when ambiguous, except equalities
    active = low | upp
    idx = np.where(active)[0]
    if idx.size == 0:
        try:
            x_p = np.linalg.solve(P + 1e-12 * np.eye(n), -q)
        except np.linalg.LinAlgError:
            return x, y, False
        ok = _feasible(A, l, u, x_p)
        return (x_p, np.zeros(m), True) if ok else (x, y, False)

    bounds = np.where(low[idx], l[idx], u[idx])
    Aa = A[idx]
    k = idx.size
    K = np.zeros((n + k, n + k))
    delta = 1e-9
    K[:n, :n] = P + delta * np.eye(n)
    K[:n, n:] = Aa.T
    K[n:, :n] = Aa
    K[n:, n:] = -delta * np.eye(k)
    rhs = np.concatenate([-q, bounds])
    try:
        lu = scipy.linalg.lu_factor(K)
    except (np.linalg.LinAlgError, ValueError):
        return x, y, False
    sol = scipy.linalg.lu_solve(lu, rhs)
    # iterative refinement against the unregularized system
    K0 = K.copy()
    K0[:n, :n] -= delta * np.eye(n)
    K0[n:, n:] += delta * np.eye(k)
    for _ in range(8):
        resid = rhs - K0 @ sol
        if np.max(np.abs(resid)) < 1e-14 * (1.0 + np.max(np.abs(rhs))):
            break
        sol = sol + scipy.linalg.lu_solve(lu, resid)
    x_p = sol[:n]
    y_p = np.zeros(m)
    y_p[idx] = sol[n:]
    # sign sanity: lower-active multipliers <= 0, upper-active >= 0
    y_chk = y_p[idx]
    sign_ok = np.all(y_chk[low[idx] & ~eq[idx]] <= 1e-7) and \
        np.all(y_chk[upp[idx] & ~eq[idx]] >= -1e-7)
    if not sign_ok or not _feasible(A, l, u, x_p):
        return x, y, False
    old_kkt = np.max(np.abs(P @ x + q + A.T @ y))
    new_kkt = np.max(np.abs(P @ x_p + q + A.T @ y_p))
    scale = 1.0 + np.max(np.abs(q))
    if new_kkt > old_kkt and new_kkt > 1e-12 * scale:
        return x, y, False
    return x_p, y_p, True


def _feasible(A, l, u, x, tol: float = 1e-7) -> bool:
    Ax = A @ x
    scale = 1.0 + np.maximum(np.abs(l), np.abs(u))
    scale[~np.isfinite(scale)] = 1.0
    below = np.maximum(l - Ax, 0.0)
    above = np.maximum(Ax - u, 0.0)
    return bool(np.all(below <= tol * scale) and np.all(above <= tol * scale))
