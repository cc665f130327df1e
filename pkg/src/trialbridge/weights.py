"""Weight construction for bridged trial comparisons.

Three weight families per participant: inverse probability of observing the
outcome (one logistic model per arm-by-trial stratum), inverse odds of
membership in the target trial (one logistic model on span-selected rows),
and inverse probability of assigned treatment (known randomization
probabilities). Span selection determines which strata are modeled: the
multi-span route models all four strata, the single-span route only the two
arms being contrasted and never reads shared-arm rows.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .data import ARM_STRATA, TrialDataset
from .errors import (
    DegenerateOutcomeError,
    PositivityError,
    SeparationError,
    ValidationError,
)
from .features import Design, ModelSpec, build_design
from .glm import LogisticFit, fit_logistic

SINGLE = "single"
MULTI = "multi"

#: stratum ids modeled per span (stratum = (arm, trial) cell)
MODELED_STRATA = {MULTI: (1, 2, 3, 4), SINGLE: (1, 4)}

#: arms whose rows enter the sampling model per span
SAMPLING_ARMS = {MULTI: (1, 2, 3), SINGLE: (1, 3)}


def _check_span(span: str):
    if span not in (SINGLE, MULTI):
        raise ValidationError(f"weights: span must be '{SINGLE}' or '{MULTI}', got {span!r}")


@dataclass
class StratumModel:
    """Missingness model for one arm-by-trial stratum.

    ``fit`` is None exactly when the stratum had no missing outcomes, in
    which case the weight is identically 1 and the stratum contributes no
    score block to stacked inference.
    """

    stratum: int
    arm: int
    trial: int
    rows: np.ndarray
    design: Design | None
    fit: LogisticFit | None

    @property
    def degenerate(self) -> bool:
        return self.fit is None


@dataclass
class MissingnessWeights:
    """Per-row inverse probability of observation, with the fitted models.

    Rows outside the modeled strata carry weight 0, flagging exclusion.
    """

    w: np.ndarray
    span: str
    models: dict[int, StratumModel]


@dataclass
class SamplingWeights:
    """Per-row inverse odds of target-trial membership, with the fitted model.

    Weight is exp(linear predictor) for trial-1 rows inside the span, 1 for
    trial-2 rows inside the span, and 0 outside the span.
    """

    w: np.ndarray
    span: str
    fit: LogisticFit
    design: Design


@dataclass
class WeightSet:
    """The three weight columns; excluded rows hold zeros."""

    w_missing: np.ndarray
    w_sampling: np.ndarray
    w_assign: np.ndarray

    @property
    def product(self) -> np.ndarray:
        return self.w_missing * self.w_sampling * self.w_assign

    @property
    def included(self) -> np.ndarray:
        return self.w_missing > 0

    @classmethod
    def all_ones(cls, n: int) -> "WeightSet":
        one = np.ones(n)
        return cls(w_missing=one.copy(), w_sampling=one.copy(), w_assign=one.copy())


def _spec_for(spec, stratum: int, arm: int, trial: int) -> ModelSpec:
    if isinstance(spec, ModelSpec):
        return spec
    if isinstance(spec, Mapping):
        for key in (stratum, (arm, trial)):
            if key in spec:
                return spec[key]
        if "default" in spec:
            return spec["default"]
        raise ValidationError(
            f"weights: no missingness model for stratum {stratum} "
            f"(arm {arm}, trial {trial}) and no default supplied")
    raise ValidationError("weights: missingness spec must be a ModelSpec or a mapping")


def missingness_weights(data: TrialDataset, spec, span: str) -> MissingnessWeights:
    """Fit one observation model per modeled stratum and invert its fitted
    probabilities.

    ``spec`` is a ModelSpec applied to every stratum, or a mapping keyed by
    stratum id (or (arm, trial) pair, with optional "default") for per-arm
    overrides. A stratum with no missing outcomes gets weight 1 without a
    fit; a stratum whose model separates is a positivity failure for that
    arm.
    """
    _check_span(span)
    w = np.zeros(data.n)
    models: dict[int, StratumModel] = {}
    for q, arm, trial in ARM_STRATA:
        if q not in MODELED_STRATA[span]:
            continue
        rows = np.flatnonzero(data.stratum_mask(arm, trial))
        if rows.size == 0:
            raise PositivityError(
                f"weights: arm {arm} in trial {trial} has no rows; cannot model "
                "missingness")
        observed = 1.0 - data.missing[rows]
        if observed.min() == 1.0:
            # no missing outcomes: the MLE degenerates but the weight's limit is 1
            w[rows] = 1.0
            models[q] = StratumModel(q, arm, trial, rows, design=None, fit=None)
            continue
        if observed.max() == 0.0:
            raise PositivityError(
                f"weights: arm {arm} in trial {trial} has no observed outcomes; "
                "missingness positivity is violated")
        design = build_design(_spec_for(spec, q, arm, trial), data, rows)
        try:
            fit = fit_logistic(design.matrix, observed, labels=design.labels)
        except SeparationError as exc:
            raise SeparationError(
                f"weights: missingness model separates in arm {arm}, trial {trial} "
                f"({exc})") from None
        except DegenerateOutcomeError:  # pragma: no cover - guarded above
            raise
        w[rows] = 1.0 / fit.predict_proba(design.matrix)
        models[q] = StratumModel(q, arm, trial, rows, design=design, fit=fit)
    return MissingnessWeights(w=w, span=span, models=models)


def sampling_odds_weights(data: TrialDataset, spec: ModelSpec, span: str) -> SamplingWeights:
    """Regress target-trial membership on covariates over span-selected rows
    and exponentiate the linear predictor.

    The multi-span model uses all rows; the single-span model uses only rows
    from the two contrasted arms. Trial-1 rows get the fitted odds of being
    in trial 2; trial-2 rows get weight 1.
    """
    _check_span(span)
    rows = np.flatnonzero(np.isin(data.arm, SAMPLING_ARMS[span]))
    if rows.size == 0:
        raise PositivityError("weights: no rows available for the sampling model")
    in_target = (data.trial[rows] == 2).astype(np.float64)
    if in_target.min() == in_target.max():
        raise PositivityError(
            "weights: sampling model needs rows from both trials; only trial "
            f"{int(data.trial[rows][0])} present")
    design = build_design(spec, data, rows)
    try:
        fit = fit_logistic(design.matrix, in_target, labels=design.labels)
    except SeparationError as exc:
        raise SeparationError(
            "weights: sampling model separates; sampling positivity "
            f"(non-focal support everywhere the target has mass) fails ({exc})"
        ) from None
    w = np.zeros(data.n)
    lp = fit.linear_predictor(design.matrix)
    trial1 = data.trial[rows] == 1
    w[rows[trial1]] = np.exp(lp[trial1])
    w[rows[~trial1]] = 1.0
    return SamplingWeights(w=w, span=span, fit=fit, design=design)


def treatment_weights(data: TrialDataset,
                      assignment_probs: Mapping[tuple[int, int], float]) -> np.ndarray:
    """Reciprocal of the known assignment probability per (arm, trial).

    Probabilities must lie in (0, 1]; probability 1 (a single-arm stratum)
    yields weight 1. Every (arm, trial) pair present in the data must have a
    probability.
    """
    w = np.zeros(data.n)
    seen = set(zip(data.arm.tolist(), data.trial.tolist()))
    for pair in sorted(seen):
        if pair not in assignment_probs:
            raise ValidationError(
                f"weights: no assignment probability for arm {pair[0]}, "
                f"trial {pair[1]}")
    for (arm, trial), p in assignment_probs.items():
        if not (0.0 < p <= 1.0):
            raise ValidationError(
                f"weights: assignment probability for arm {arm}, trial {trial} "
                f"must be in (0, 1], got {p}")
        mask = data.stratum_mask(arm, trial)
        w[mask] = 1.0 / p
    return w


def build_weight_set(data: TrialDataset, miss: MissingnessWeights,
                     samp: SamplingWeights, w_assign: np.ndarray) -> WeightSet:
    return WeightSet(w_missing=miss.w, w_sampling=samp.w, w_assign=w_assign)
