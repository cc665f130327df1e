"""M-estimation engine: stacked estimating equations, numerical Jacobians,
and the empirical sandwich covariance.

A stack is a per-observation, vector-valued estimating function evaluated for
all observations at once: ``psi(data, theta)`` returns a ``(dim, n)`` matrix
whose column i is the contribution of observation i. Roots of the summed
system are found by damped Newton iterations, and the sandwich covariance is
assembled from a numerically differentiated bread and the empirical outer
product of the contributions.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np
from scipy import linalg as sla

from .errors import ConvergenceError, EstimationError, SingularMatrixError

#: two-sided 95% normal critical value, pinned for exact reproducibility
Z95 = 1.9599639845

#: default root tolerance, scaled by the number of observations
ROOT_TOL_SCALE = 1e-9

#: warn when the bread's condition number exceeds this
COND_WARN = 1e12

_MAX_NEWTON_ITER = 200


@dataclass(frozen=True)
class EstimatingStack:
    """A block-structured stack of per-observation estimating functions.

    ``psi(data, theta)`` must return a ``(dim, n)`` float matrix that is
    finite for every admissible ``theta``. Nuisance (score) blocks precede
    the target blocks (means and contrasts).
    """

    psi: Callable[[Any, np.ndarray], np.ndarray]
    dim: int
    labels: tuple[str, ...]

    def __post_init__(self):
        if len(self.labels) != self.dim:
            raise EstimationError(
                f"numerics: stack has {self.dim} parameters but "
                f"{len(self.labels)} labels")

    def summed(self, data, theta: np.ndarray) -> np.ndarray:
        return self.psi(data, np.asarray(theta, dtype=np.float64)).sum(axis=1)


@dataclass
class SandwichResult:
    """Point estimates with the empirical sandwich covariance.

    ``covariance`` is the estimated covariance of theta-hat itself (the
    asymptotic covariance already divided by n).
    """

    theta: np.ndarray
    covariance: np.ndarray
    bread: np.ndarray
    meat: np.ndarray
    labels: tuple[str, ...]
    n_obs: int

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance))

    def ci95(self) -> np.ndarray:
        """(dim, 2) Wald intervals, estimate +/- Z95 * SE."""
        half = Z95 * self.se
        return np.column_stack([self.theta - half, self.theta + half])

    def index_of(self, label: str) -> int:
        return self.labels.index(label)


def numerical_jacobian(f: Callable[[np.ndarray], np.ndarray], x) -> np.ndarray:
    """Central-difference Jacobian of a p-vector-valued map at x.

    Per-coordinate step ``h_j = eps^(1/3) * max(1, |x_j|)`` with eps machine
    precision; entry (i, j) approximates df_i/dx_j.
    """
    x = np.asarray(x, dtype=np.float64)
    h = np.finfo(np.float64).eps ** (1.0 / 3.0) * np.maximum(1.0, np.abs(x))
    p = x.shape[0]
    cols = []
    for j in range(p):
        xp, xm = x.copy(), x.copy()
        xp[j] += h[j]
        xm[j] -= h[j]
        fp = np.asarray(f(xp), dtype=np.float64)
        fm = np.asarray(f(xm), dtype=np.float64)
        if not (np.isfinite(fp).all() and np.isfinite(fm).all()):
            raise EstimationError(
                f"numerics: non-finite function value when perturbing "
                f"coordinate {j}")
        cols.append((fp - fm) / (2.0 * h[j]))
    return np.column_stack(cols)


def solve_stack(stack: EstimatingStack, data, init,
                tol_scale: float = ROOT_TOL_SCALE,
                max_iter: int = _MAX_NEWTON_ITER) -> np.ndarray:
    """Solve sum_i psi(O_i; theta) = 0 by Newton with step-halving.

    Converges when the summed system's infinity norm falls below
    ``tol_scale * n``. Raises ConvergenceError (carrying the last residual)
    after ``max_iter`` iterations, or SingularMatrixError when the Jacobian
    cannot be factorized.
    """
    theta = np.asarray(init, dtype=np.float64).copy()
    if theta.shape != (stack.dim,):
        raise EstimationError(
            f"numerics: init has shape {theta.shape}, stack expects ({stack.dim},)")
    if not np.isfinite(theta).all():
        raise EstimationError("numerics: init contains non-finite values")

    g = stack.summed(data, theta)
    n = stack.psi(data, theta).shape[1]
    if n == 0:
        raise EstimationError("numerics: empty observation sequence")
    tol = tol_scale * n
    res = float(np.abs(g).max())

    for _ in range(max_iter):
        if res <= tol:
            return theta
        jac = numerical_jacobian(lambda t: stack.summed(data, t), theta)
        try:
            delta = np.linalg.solve(jac, -g)
        except np.linalg.LinAlgError:
            raise SingularMatrixError(
                f"numerics: singular Jacobian at residual {res:.3e}") from None

        step = 1.0
        while True:
            cand = theta + step * delta
            g_cand = stack.summed(data, cand)
            res_cand = float(np.abs(g_cand).max()) if np.isfinite(g_cand).all() else np.inf
            if res_cand < res or step <= 2.0 ** -30:
                break
            step /= 2.0
        if not res_cand < res:
            raise ConvergenceError(
                f"numerics: Newton stalled (residual {res:.3e}, tolerance {tol:.3e})",
                residual=res)
        theta, g, res = cand, g_cand, res_cand

    if res <= tol:
        return theta
    raise ConvergenceError(
        f"numerics: no convergence in {max_iter} iterations "
        f"(residual {res:.3e}, tolerance {tol:.3e})", residual=res)


def sandwich(stack: EstimatingStack, data, theta_hat,
             tol_scale: float = ROOT_TOL_SCALE) -> SandwichResult:
    """Empirical sandwich covariance at a verified root of the stack.

    Bread ``B = -(1/n) * d/dtheta sum_i psi_i`` via central differences,
    meat ``M = (1/n) * sum_i psi_i psi_i^T``, and
    ``covariance = B^-1 M B^-T / n``.
    """
    theta = np.asarray(theta_hat, dtype=np.float64)
    mat = stack.psi(data, theta)
    if mat.shape[0] != stack.dim:
        raise EstimationError(
            f"numerics: psi returned {mat.shape[0]} rows, expected {stack.dim}")
    n = mat.shape[1]
    resid = float(np.abs(mat.sum(axis=1)).max())
    if resid > tol_scale * n:
        raise EstimationError(
            f"numerics: theta does not solve the stack (residual {resid:.3e} "
            f"exceeds {tol_scale * n:.3e}); solve before computing the sandwich")

    jac = numerical_jacobian(lambda t: stack.summed(data, t), theta)
    bread = -jac / n
    meat = (mat @ mat.T) / n

    cond = np.linalg.cond(bread)
    if not np.isfinite(cond) or cond > COND_WARN:
        warnings.warn(
            f"numerics: bread condition number {cond:.3e} exceeds {COND_WARN:.0e}; "
            "variance estimates may be unstable", RuntimeWarning, stacklevel=2)
    try:
        lu, piv = sla.lu_factor(bread)
    except (sla.LinAlgError, ValueError) as exc:
        raise SingularMatrixError(f"numerics: bread cannot be factorized ({exc})") from None
    udiag = np.abs(np.diag(lu))
    if udiag.min() == 0.0 or not np.isfinite(udiag).all():
        worst = stack.labels[int(np.argmin(udiag))]
        raise SingularMatrixError(
            f"numerics: bread is singular near parameter block '{worst}'")

    binv_m = sla.lu_solve((lu, piv), meat)            # B^-1 M
    cov = sla.lu_solve((lu, piv), binv_m.T).T / n     # (B^-1 (B^-1 M)^T)^T = B^-1 M B^-T
    cov = (cov + cov.T) / 2.0
    return SandwichResult(theta=theta, covariance=cov, bread=bread, meat=meat,
                          labels=stack.labels, n_obs=n)
