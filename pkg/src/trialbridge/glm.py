"""Binary-outcome logistic regression by maximum likelihood.

Plain (unpenalized) IRLS with step-halving, exposing coefficients, fitted
probabilities, and per-observation score contributions so fits can be stacked
into larger estimating-equation systems.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla

from .errors import (
    DegenerateOutcomeError,
    RankDeficientDesignError,
    SeparationError,
    ValidationError,
)

# Separation heuristic: a coefficient this large with a non-vanishing Newton
# step means the likelihood is still climbing toward the boundary.
_SEPARATION_COEF_BOUND = 30.0
_SEPARATION_STEP_FLOOR = 1e-3

_MAX_ITER = 100
_COEF_TOL = 1e-10


def expit(x):
    """Numerically stable inverse logit."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class LogisticFit:
    """Result of a converged logistic maximum-likelihood fit."""

    coefficients: np.ndarray
    design_labels: tuple[str, ...]
    converged: bool
    n_used: int

    def linear_predictor(self, design: np.ndarray) -> np.ndarray:
        return np.asarray(design, dtype=np.float64) @ self.coefficients

    def predict_proba(self, design: np.ndarray) -> np.ndarray:
        return expit(self.linear_predictor(design))


def _check_design(design: np.ndarray, labels: tuple[str, ...]):
    n, k = design.shape
    if n < k:
        raise ValidationError(f"glm: need at least as many rows ({n}) as columns ({k})")
    if not np.isfinite(design).all():
        raise ValidationError("glm: design matrix contains non-finite values")
    # Rank check via pivoted QR; report the columns that pivot in last.
    _, r, piv = sla.qr(design, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = max(n, k) * np.finfo(np.float64).eps * (diag[0] if diag.size else 0.0)
    rank = int((diag > tol).sum())
    if rank < k:
        dependent = [labels[j] for j in sorted(piv[rank:])]
        raise RankDeficientDesignError(
            f"glm: design matrix is rank deficient (rank {rank} < {k}); "
            f"collinear columns: {dependent}")


def _loglik(lp: np.ndarray, z: np.ndarray) -> float:
    # sum z*lp - log(1 + exp(lp)), computed stably
    return float(z @ lp - np.logaddexp(0.0, lp).sum())


def fit_logistic(design, outcome, labels=None) -> LogisticFit:
    """Fit logit{P(z=1 | x)} = x @ beta by maximum likelihood.

    IRLS (Newton) with step-halving so the log-likelihood never decreases;
    convergence is declared when the coefficient update falls below 1e-10 in
    the infinity norm.

    Raises
    ------
    DegenerateOutcomeError
        All outcomes equal; the MLE does not exist.
    SeparationError
        Coefficients exceed a fixed bound while steps are not vanishing,
        the finite-sample signature of (quasi-)complete separation.
    RankDeficientDesignError
        Collinear design columns (duplicated columns included).
    """
    design = np.asarray(design, dtype=np.float64)
    if design.ndim != 2:
        raise ValidationError("glm: design must be a 2-d matrix")
    z = np.asarray(outcome, dtype=np.float64)
    n, k = design.shape
    if z.shape[0] != n:
        raise ValidationError(f"glm: outcome length {z.shape[0]} != design rows {n}")
    if not np.isin(z, (0.0, 1.0)).all():
        raise ValidationError("glm: outcome must be binary (0/1)")
    if labels is None:
        labels = tuple(f"x{j}" for j in range(k))
    labels = tuple(labels)

    if z.min() == z.max():
        raise DegenerateOutcomeError(
            f"glm: all outcomes equal {int(z[0])}; logistic MLE does not exist")
    _check_design(design, labels)

    beta = np.zeros(k)
    lp = design @ beta
    ll = _loglik(lp, z)
    converged = False
    for _ in range(_MAX_ITER):
        p = expit(lp)
        w = p * (1.0 - p)
        score = design.T @ (z - p)
        hess = design.T @ (design * w[:, None])
        try:
            delta = np.linalg.solve(hess, score)
        except np.linalg.LinAlgError:
            raise SeparationError(
                "glm: singular weighted information matrix; fitted probabilities "
                "have collapsed toward 0/1 (separation)") from None

        # Step-halving keeps the log-likelihood non-decreasing.
        step = 1.0
        while True:
            cand = beta + step * delta
            lp_cand = design @ cand
            ll_cand = _loglik(lp_cand, z)
            if ll_cand >= ll - 1e-12 * max(1.0, abs(ll)) or step <= 2.0 ** -30:
                break
            step /= 2.0
        step_size = float(np.abs(step * delta).max())
        beta, lp, ll = cand, lp_cand, ll_cand
        if np.abs(beta).max() > _SEPARATION_COEF_BOUND and step_size > _SEPARATION_STEP_FLOOR:
            raise SeparationError(
                "glm: coefficient magnitude exceeds "
                f"{_SEPARATION_COEF_BOUND} with non-vanishing steps; data are "
                "(quasi-)completely separated")
        if step_size < _COEF_TOL:
            converged = True
            break

    if not converged:
        raise SeparationError(
            f"glm: IRLS did not converge in {_MAX_ITER} iterations "
            f"(last step {step_size:.3e})")
    return LogisticFit(coefficients=beta, design_labels=labels,
                       converged=True, n_used=n)


def score_contributions(fit: LogisticFit, design, outcome) -> np.ndarray:
    """Per-observation score rows x_i * (z_i - p_i), an (n, k) matrix.

    Column sums vanish at the MLE, which is what makes these rows stackable
    as nuisance estimating functions.
    """
    design = np.asarray(design, dtype=np.float64)
    z = np.asarray(outcome, dtype=np.float64)
    if design.ndim != 2 or design.shape[1] != fit.coefficients.shape[0]:
        raise ValidationError(
            f"glm: design has {design.shape} columns, fit expects "
            f"{fit.coefficients.shape[0]}")
    if z.shape[0] != design.shape[0]:
        raise ValidationError("glm: outcome length does not match design rows")
    p = fit.predict_proba(design)
    return design * (z - p)[:, None]
