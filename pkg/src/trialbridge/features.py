"""Declarative design-matrix construction.

A ModelSpec lists covariate terms (raw numeric columns, reference-coded
categoricals, or restricted cubic splines with percentile-placed knots) plus
an optional intercept. Knots and categorical level sets are always learned
from the rows actually entering a model fit, and the fitted state can be
re-applied to new rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .data import TrialDataset
from .errors import ValidationError

DEFAULT_RCS_PERCENTILES = {4: (5.0, 35.0, 65.0, 95.0)}


@dataclass(frozen=True)
class Term:
    """One covariate term of a model specification.

    ``transform`` is one of "identity", "categorical", or "rcs". Categorical
    terms may carry a ``collapse`` mapping that merges raw levels before
    dummy coding (e.g. pooling sparse score categories for one arm's model).
    """

    column: str
    transform: str = "identity"
    n_knots: int | None = None
    percentiles: tuple[float, ...] | None = None
    collapse: Mapping[str, str] | None = None

    def __post_init__(self):
        if self.transform not in ("identity", "categorical", "rcs"):
            raise ValidationError(
                f"features: unknown transform '{self.transform}' for column "
                f"'{self.column}'")
        if self.transform == "rcs":
            pct = self.percentiles
            if pct is None:
                pct = DEFAULT_RCS_PERCENTILES.get(self.n_knots or 4)
                if pct is None:
                    raise ValidationError(
                        f"features: rcs term '{self.column}' needs explicit "
                        "percentiles when n_knots != 4")
                object.__setattr__(self, "percentiles", pct)
            if self.n_knots is None:
                object.__setattr__(self, "n_knots", len(self.percentiles))
            if len(self.percentiles) != self.n_knots:
                raise ValidationError(
                    f"features: rcs term '{self.column}' has {self.n_knots} knots "
                    f"but {len(self.percentiles)} percentiles")
            if self.n_knots < 3:
                raise ValidationError(
                    f"features: rcs term '{self.column}' needs at least 3 knots")
            p = np.asarray(self.percentiles, dtype=float)
            if not ((p > 0).all() and (p < 100).all() and (np.diff(p) > 0).all()):
                raise ValidationError(
                    f"features: rcs percentiles for '{self.column}' must be "
                    "strictly increasing inside (0, 100)")


@dataclass(frozen=True)
class ModelSpec:
    """Ordered covariate terms plus an intercept flag."""

    terms: tuple[Term, ...]
    include_intercept: bool = True

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))


@dataclass(frozen=True)
class KnotSet:
    """Strictly increasing knot locations in the source covariate's units."""

    values: tuple[float, ...]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.size and not (np.diff(v) > 0).all():
            raise ValidationError("features: knots must be strictly increasing")
        object.__setattr__(self, "values", tuple(float(x) for x in v))

    def __len__(self):
        return len(self.values)


def compute_knots(x, percentiles) -> KnotSet:
    """Empirical quantiles at the requested percentiles.

    Uses the linear-interpolation quantile definition, so e.g. 1..100 at the
    5th percentile gives 5.95. Ties that collapse two knots are an error.
    """
    x = np.asarray(x, dtype=np.float64)
    pct = np.asarray(percentiles, dtype=np.float64)
    if np.unique(x).size < pct.size:
        raise ValidationError(
            f"features: need at least {pct.size} distinct values to place "
            f"{pct.size} knots; got {np.unique(x).size}")
    knots = np.percentile(x, pct, method="linear")
    if not (np.diff(knots) > 0).all():
        raise ValidationError(
            f"features: duplicate knots {np.round(knots, 6).tolist()}; "
            "use fewer knots or wider percentiles")
    return KnotSet(values=tuple(knots))


def rcs_basis(x, knots: KnotSet) -> np.ndarray:
    """Restricted cubic spline basis: n x (K-1) for K knots.

    Column 1 is the raw covariate; the remaining K-2 columns are truncated
    cubic terms constrained so the implied function is linear below the first
    and above the last knot, with continuous second derivatives at the knots.
    """
    x = np.asarray(x, dtype=np.float64)
    t = np.asarray(knots.values, dtype=np.float64)
    k = t.size
    if k < 3:
        raise ValidationError("features: rcs basis needs at least 3 knots")

    def cube(u):
        return np.maximum(u, 0.0) ** 3

    denom = t[-1] - t[-2]
    cols = [x]
    for j in range(k - 2):
        cols.append(
            cube(x - t[j])
            - cube(x - t[-2]) * (t[-1] - t[j]) / denom
            + cube(x - t[-1]) * (t[-2] - t[j]) / denom
        )
    return np.column_stack(cols)


@dataclass
class Design:
    """A built design matrix plus the fitted state needed to rebuild it.

    ``matrix`` covers the filtered rows only; ``row_index`` maps its rows back
    into the parent dataset. ``transform`` applies the state learned at build
    time (knots, level sets) to other rows, failing on unseen categorical
    levels.
    """

    matrix: np.ndarray
    labels: tuple[str, ...]
    row_index: np.ndarray
    spec: ModelSpec
    fitted: dict = field(default_factory=dict)

    @property
    def n_columns(self) -> int:
        return self.matrix.shape[1]

    def transform(self, data: TrialDataset, rows=None) -> np.ndarray:
        rows = _resolve_rows(data, rows)
        blocks = []
        if self.spec.include_intercept:
            blocks.append(np.ones((rows.size, 1)))
        for term in self.spec.terms:
            col = _column(data, term.column)[rows]
            blocks.append(_apply_term(term, col, self.fitted[_key(term)]))
        return np.hstack(blocks) if blocks else np.empty((rows.size, 0))


def _key(term: Term) -> str:
    return f"{term.transform}:{term.column}"


def _column(data: TrialDataset, name: str) -> np.ndarray:
    try:
        return data.covariates[name]
    except KeyError:
        raise ValidationError(
            f"features: covariate '{name}' not found; available: "
            f"{sorted(data.covariates)}") from None


def _resolve_rows(data: TrialDataset, rows) -> np.ndarray:
    if rows is None:
        return np.arange(data.n)
    rows = np.asarray(rows)
    if rows.dtype == bool:
        return np.flatnonzero(rows)
    return rows.astype(np.int64)


def _numeric(term: Term, col: np.ndarray) -> np.ndarray:
    try:
        return np.asarray(col, dtype=np.float64)
    except (TypeError, ValueError):
        raise ValidationError(
            f"features: column '{term.column}' is not numeric; declare it "
            "categorical") from None


def _fit_term(term: Term, col: np.ndarray):
    if term.transform == "identity":
        _numeric(term, col)
        return None
    if term.transform == "rcs":
        return compute_knots(_numeric(term, col), term.percentiles)
    # categorical: collapse, then sorted levels with the first as reference
    lv = _collapsed(term, col)
    levels = tuple(sorted(np.unique(lv).tolist()))
    if len(levels) < 2:
        raise ValidationError(
            f"features: categorical '{term.column}' has a single level "
            f"{levels} in the fitted rows")
    return levels


def _collapsed(term: Term, col: np.ndarray) -> np.ndarray:
    lv = np.asarray(col).astype(str)
    if term.collapse:
        mapped = {str(k): str(v) for k, v in term.collapse.items()}
        lv = np.asarray([mapped.get(v, v) for v in lv])
    return lv


def _apply_term(term: Term, col: np.ndarray, state) -> np.ndarray:
    if term.transform == "identity":
        return _numeric(term, col)[:, None]
    if term.transform == "rcs":
        return rcs_basis(_numeric(term, col), state)
    lv = _collapsed(term, col)
    unseen = sorted(set(lv.tolist()) - set(state))
    if unseen:
        raise ValidationError(
            f"features: unseen level(s) {unseen} for categorical "
            f"'{term.column}'; fitted levels {list(state)}")
    return np.column_stack([(lv == level).astype(np.float64)
                            for level in state[1:]])


def _term_labels(term: Term, state) -> list[str]:
    if term.transform == "identity":
        return [term.column]
    if term.transform == "rcs":
        return [f"{term.column}_rcs{j + 1}" for j in range(len(state) - 1)]
    return [f"{term.column}[{level}]" for level in state[1:]]


def build_design(spec: ModelSpec, data: TrialDataset, rows=None) -> Design:
    """Build the design matrix for the given rows of a dataset.

    Deterministic column order: intercept first, then terms in spec order.
    Knots and categorical levels are learned from exactly the rows supplied,
    so per-subset fits get subset-specific state.
    """
    rows = _resolve_rows(data, rows)
    if rows.size == 0:
        raise ValidationError("features: no rows selected for design construction")
    blocks, labels, fitted = [], [], {}
    if spec.include_intercept:
        blocks.append(np.ones((rows.size, 1)))
        labels.append("intercept")
    for term in spec.terms:
        col = _column(data, term.column)[rows]
        state = _fit_term(term, col)
        fitted[_key(term)] = state
        blocks.append(_apply_term(term, col, state))
        labels.extend(_term_labels(term, state))
    matrix = np.hstack(blocks) if blocks else np.empty((rows.size, 0))
    return Design(matrix=matrix, labels=tuple(labels), row_index=rows,
                  spec=spec, fitted=fitted)
