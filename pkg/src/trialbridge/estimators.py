"""Bridged treatment-effect estimators and the shared-arm diagnostic.

Point estimates are self-normalizing (Hajek) weighted means per arm-by-trial
cell. The multi-span estimator routes the contrast through the shared arm,
the single-span estimator contrasts the two arms of interest directly, and
the diagnostic is the difference between the two standardized shared-arm
means. Inference comes from stacking the weight-model score equations with
the mean and contrast equations and applying the empirical sandwich; the
diagnostic is stacked onto the multi-span system so both come from one fit.
Naive variants force every weight to 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .data import STRATUM_OF, TrialDataset
from .errors import EstimationError, PositivityError, ValidationError
from .glm import expit
from .numerics import Z95, EstimatingStack, SandwichResult, sandwich
from .weights import (
    MULTI,
    SINGLE,
    MissingnessWeights,
    SamplingWeights,
    WeightSet,
    missingness_weights,
    sampling_odds_weights,
    treatment_weights,
)

#: (arm, trial) cells entering each span's estimator, in parameter order
CELLS = {
    MULTI: ((2, 2), (3, 2), (1, 1), (2, 1)),
    SINGLE: ((3, 2), (1, 1)),
}


@dataclass(frozen=True)
class AteEstimate:
    """A bridged average-treatment-effect estimate with Wald inference."""

    span: str
    ate: float
    se: float
    ci95: tuple[float, float]
    components: dict[str, tuple[float, float]]

    def to_dict(self) -> dict:
        return {
            "span": self.span,
            "ate": self.ate,
            "se": self.se,
            "ci": [self.ci95[0], self.ci95[1]],
            "components": {
                k: {"estimate": v[0], "se": v[1]} for k, v in self.components.items()
            },
        }


@dataclass(frozen=True)
class DiagnosticResult:
    """Difference between the standardized shared-arm means.

    A 95% interval excluding zero is evidence against the multi-span route's
    identification conditions.
    """

    d_hat: float
    se: float
    ci95: tuple[float, float]
    includes_zero: bool

    def to_dict(self) -> dict:
        return {
            "d_hat": self.d_hat,
            "se": self.se,
            "ci": [self.ci95[0], self.ci95[1]],
            "includes_zero": self.includes_zero,
        }


@dataclass
class SpanFit:
    """Full result of one bridged fit (estimate plus stacked inference)."""

    ate: AteEstimate
    diagnostic: DiagnosticResult | None
    sandwich: SandwichResult
    weights: WeightSet
    stack: EstimatingStack
    stack_data: "StackContext"
    theta: np.ndarray


@dataclass
class NaiveVariants:
    """Unweighted analogues of both estimators and the diagnostic."""

    single: AteEstimate
    multi: AteEstimate
    diagnostic: DiagnosticResult


# ---------------------------------------------------------------------------
# Hajek cell means


def _cell_weights(data: TrialDataset, arm: int, trial: int,
                  weights: WeightSet, with_sampling: bool):
    mask = data.cell_mask(arm, trial)
    if not mask.any():
        raise PositivityError(
            f"estimators: no observed outcomes in arm {arm} of trial {trial}; "
            "positivity fails for this cell")
    w = weights.w_missing[mask] * weights.w_assign[mask]
    if with_sampling:
        w = w * weights.w_sampling[mask]
    total = float(w.sum())
    if not total > 0:
        raise EstimationError(
            f"estimators: weights vanish over arm {arm}, trial {trial}; the cell "
            "is not covered by this weight set")
    return w, data.outcome[mask], total


def hajek_mean_target(data: TrialDataset, arm: int, weights: WeightSet) -> float:
    """Weighted mean outcome in a target-trial arm (arm 2 or 3), using
    missingness and assignment weights; the ratio form cancels any common
    weight scale."""
    if arm not in (2, 3):
        raise ValidationError(f"estimators: target-trial arms are 2 and 3, got {arm}")
    w, y, total = _cell_weights(data, arm, 2, weights, with_sampling=False)
    return float(w @ y) / total


def hajek_mean_nonfocal(data: TrialDataset, arm: int, weights: WeightSet) -> float:
    """Weighted mean outcome in a non-focal-trial arm (arm 1 or 2),
    standardized to the target population by the sampling-odds weight."""
    if arm not in (1, 2):
        raise ValidationError(f"estimators: non-focal-trial arms are 1 and 2, got {arm}")
    w, y, total = _cell_weights(data, arm, 1, weights, with_sampling=True)
    return float(w @ y) / total


# ---------------------------------------------------------------------------
# Stacked estimating equations


@dataclass
class _ScoreBlock:
    sl: slice
    rows: np.ndarray
    design: np.ndarray
    z: np.ndarray


@dataclass
class _CellBlock:
    arm: int
    trial: int
    rows: np.ndarray
    y: np.ndarray
    w_assign: np.ndarray
    miss_design: np.ndarray | None
    miss_sl: slice | None
    samp_design: np.ndarray | None


@dataclass
class StackContext:
    """Preprocessed observation views consumed by the stacked psi."""

    n_obs: int
    dim: int
    span: str
    score_blocks: list[_ScoreBlock]
    gamma_sl: slice | None
    cells: list[_CellBlock]
    alpha_offset: int
    ate_row: int
    d_row: int | None


def _bridge_psi(ctx: StackContext, theta: np.ndarray) -> np.ndarray:
    out = np.zeros((ctx.dim, ctx.n_obs))
    for blk in ctx.score_blocks:
        p = expit(blk.design @ theta[blk.sl])
        out[blk.sl][:, blk.rows] = (blk.design * (blk.z - p)[:, None]).T
    for i, cell in enumerate(ctx.cells):
        alpha = theta[ctx.alpha_offset + i]
        w = cell.w_assign
        if cell.miss_design is not None:
            w = w / expit(cell.miss_design @ theta[cell.miss_sl])
        if cell.samp_design is not None:
            w = w * np.exp(cell.samp_design @ theta[ctx.gamma_sl])
        out[ctx.alpha_offset + i, cell.rows] = w * (cell.y - alpha)
    a = theta[ctx.alpha_offset:ctx.alpha_offset + len(ctx.cells)]
    if ctx.span == MULTI:
        combo = (a[1] - a[0]) + (a[3] - a[2])
    else:
        combo = a[0] - a[1]
    out[ctx.ate_row, :] = combo - theta[ctx.ate_row]
    if ctx.d_row is not None:
        out[ctx.d_row, :] = (a[0] - a[3]) - theta[ctx.d_row]
    return out


def _positions(sorted_rows: np.ndarray, wanted: np.ndarray) -> np.ndarray:
    pos = np.searchsorted(sorted_rows, wanted)
    if not (sorted_rows[pos] == wanted).all():  # pragma: no cover - internal invariant
        raise EstimationError("estimators: cell rows not contained in model rows")
    return pos


def _build_stack(data: TrialDataset, span: str,
                 miss: MissingnessWeights | None,
                 samp: SamplingWeights | None,
                 w_assign: np.ndarray | None,
                 weights: WeightSet):
    """Assemble the stack context, labels, and the dependency-ordered
    solution vector for one span. ``miss``/``samp``/``w_assign`` of None
    builds the naive (all-weights-one) variant."""
    naive = miss is None
    score_blocks: list[_ScoreBlock] = []
    labels: list[str] = []
    theta_parts: list[np.ndarray] = []
    miss_slices: dict[int, slice] = {}
    offset = 0

    if not naive:
        observed = 1.0 - data.missing
        for q in sorted(miss.models):
            model = miss.models[q]
            if model.degenerate:
                continue
            k = model.fit.coefficients.shape[0]
            sl = slice(offset, offset + k)
            miss_slices[q] = sl
            score_blocks.append(_ScoreBlock(
                sl=sl, rows=model.rows, design=model.design.matrix,
                z=observed[model.rows]))
            labels.extend(f"lambda_q{q}[{j}]" for j in range(k))
            theta_parts.append(model.fit.coefficients)
            offset += k
        k = samp.fit.coefficients.shape[0]
        gamma_sl = slice(offset, offset + k)
        samp_rows = samp.design.row_index
        score_blocks.append(_ScoreBlock(
            sl=gamma_sl, rows=samp_rows, design=samp.design.matrix,
            z=(data.trial[samp_rows] == 2).astype(np.float64)))
        labels.extend(f"gamma[{j}]" for j in range(k))
        theta_parts.append(samp.fit.coefficients)
        offset += k
    else:
        gamma_sl = None

    alpha_offset = offset
    cells: list[_CellBlock] = []
    alphas = []
    for arm, trial in CELLS[span]:
        rows = np.flatnonzero(data.cell_mask(arm, trial))
        if rows.size == 0:
            raise PositivityError(
                f"estimators: no observed outcomes in arm {arm} of trial {trial}; "
                "positivity fails for this cell")
        miss_design = miss_sl = samp_design = None
        if not naive:
            q = STRATUM_OF[(arm, trial)]
            model = miss.models[q]
            if not model.degenerate:
                miss_design = model.design.matrix[_positions(model.rows, rows)]
                miss_sl = miss_slices[q]
            if trial == 1:
                samp_design = samp.design.matrix[_positions(samp.design.row_index, rows)]
        w_a = np.ones(rows.size) if naive else w_assign[rows]
        cells.append(_CellBlock(
            arm=arm, trial=trial, rows=rows, y=data.outcome[rows],
            w_assign=w_a, miss_design=miss_design, miss_sl=miss_sl,
            samp_design=samp_design))
        labels.append(f"alpha_{trial}_{arm}")
        if trial == 2:
            alphas.append(hajek_mean_target(data, arm, weights))
        else:
            alphas.append(hajek_mean_nonfocal(data, arm, weights))
        offset += 1

    ate_row = offset
    labels.append("ATE")
    offset += 1
    d_row = None
    if span == MULTI:
        d_row = offset
        labels.append("D_m")
        offset += 1

    if span == MULTI:
        ate = (alphas[1] - alphas[0]) + (alphas[3] - alphas[2])
    else:
        ate = alphas[0] - alphas[1]
    theta_parts.append(np.asarray(alphas))
    theta_parts.append(np.asarray([ate]))
    if d_row is not None:
        theta_parts.append(np.asarray([alphas[0] - alphas[3]]))

    ctx = StackContext(n_obs=data.n, dim=offset, span=span,
                       score_blocks=score_blocks, gamma_sl=gamma_sl,
                       cells=cells, alpha_offset=alpha_offset,
                       ate_row=ate_row, d_row=d_row)
    stack = EstimatingStack(psi=_bridge_psi, dim=offset, labels=tuple(labels))
    theta = np.concatenate(theta_parts)
    return stack, ctx, theta


def initial_guess(ctx: StackContext) -> np.ndarray:
    """Cold-start vector for solving a bridged stack from scratch: zero
    coefficients, unweighted cell means, and the implied contrasts."""
    theta = np.zeros(ctx.dim)
    means = [float(cell.y.mean()) for cell in ctx.cells]
    theta[ctx.alpha_offset:ctx.alpha_offset + len(means)] = means
    if ctx.span == MULTI:
        theta[ctx.ate_row] = (means[1] - means[0]) + (means[3] - means[2])
    else:
        theta[ctx.ate_row] = means[0] - means[1]
    if ctx.d_row is not None:
        theta[ctx.d_row] = means[0] - means[3]
    return theta


def _package(span_tag: str, span: str, sw: SandwichResult, theta: np.ndarray,
             ctx: StackContext, weights: WeightSet,
             stack: EstimatingStack) -> SpanFit:
    se = sw.se
    components = {}
    for i, cell in enumerate(ctx.cells):
        label = f"alpha_{cell.trial}_{cell.arm}"
        components[label] = (float(theta[ctx.alpha_offset + i]),
                             float(se[ctx.alpha_offset + i]))
    ate = float(theta[ctx.ate_row])
    ate_se = float(se[ctx.ate_row])
    estimate = AteEstimate(
        span=span_tag, ate=ate, se=ate_se,
        ci95=(ate - Z95 * ate_se, ate + Z95 * ate_se),
        components=components)
    diag = None
    if ctx.d_row is not None:
        d = float(theta[ctx.d_row])
        d_se = float(se[ctx.d_row])
        lo, hi = d - Z95 * d_se, d + Z95 * d_se
        diag = DiagnosticResult(d_hat=d, se=d_se, ci95=(lo, hi),
                                includes_zero=bool(lo <= 0.0 <= hi))
    return SpanFit(ate=estimate, diagnostic=diag, sandwich=sw, weights=weights,
                   stack=stack, stack_data=ctx, theta=theta)


def fit_single_span(data: TrialDataset, miss_spec, samp_spec,
                    assignment_probs: Mapping[tuple[int, int], float]) -> SpanFit:
    """Bridged contrast of arm 3 (target trial) vs arm 1 (non-focal trial),
    ignoring the shared arm entirely."""
    w_a = treatment_weights(data, assignment_probs)
    miss = missingness_weights(data, miss_spec, SINGLE)
    samp = sampling_odds_weights(data, samp_spec, SINGLE)
    weights = WeightSet(w_missing=miss.w, w_sampling=samp.w, w_assign=w_a)
    stack, ctx, theta = _build_stack(data, SINGLE, miss, samp, w_a, weights)
    sw = sandwich(stack, ctx, theta)
    return _package("single", SINGLE, sw, theta, ctx, weights, stack)


def fit_multi_span(data: TrialDataset, miss_spec, samp_spec,
                   assignment_probs: Mapping[tuple[int, int], float]) -> SpanFit:
    """Bridged contrast routed through the shared arm, with the shared-arm
    diagnostic stacked into the same system."""
    w_a = treatment_weights(data, assignment_probs)
    miss = missingness_weights(data, miss_spec, MULTI)
    samp = sampling_odds_weights(data, samp_spec, MULTI)
    weights = WeightSet(w_missing=miss.w, w_sampling=samp.w, w_assign=w_a)
    stack, ctx, theta = _build_stack(data, MULTI, miss, samp, w_a, weights)
    sw = sandwich(stack, ctx, theta)
    return _package("multi", MULTI, sw, theta, ctx, weights, stack)


def estimate_single_span(data, miss_spec, samp_spec, assignment_probs) -> AteEstimate:
    return fit_single_span(data, miss_spec, samp_spec, assignment_probs).ate


def estimate_multi_span(data, miss_spec, samp_spec, assignment_probs) -> AteEstimate:
    return fit_multi_span(data, miss_spec, samp_spec, assignment_probs).ate


def diagnostic(data, miss_spec, samp_spec, assignment_probs) -> DiagnosticResult:
    return fit_multi_span(data, miss_spec, samp_spec, assignment_probs).diagnostic


def _fit_naive(data: TrialDataset, span: str) -> SpanFit:
    weights = WeightSet.all_ones(data.n)
    stack, ctx, theta = _build_stack(data, span, None, None, None, weights)
    sw = sandwich(stack, ctx, theta)
    return _package(f"naive_{span}", span, sw, theta, ctx, weights, stack)


def naive_variants(data: TrialDataset) -> NaiveVariants:
    """Both estimators and the diagnostic with every weight forced to 1."""
    ms = _fit_naive(data, MULTI)
    ss = _fit_naive(data, SINGLE)
    return NaiveVariants(single=ss.ate, multi=ms.ate, diagnostic=ms.diagnostic)
