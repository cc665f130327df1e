"""Two-trial dataset container and arm/trial bookkeeping.

The data layout is one row per participant: a trial indicator (1 = non-focal
trial, 2 = target trial), an assigned arm (trial 1 randomizes arms {1, 2},
trial 2 randomizes arms {2, 3}), a missingness flag for the outcome, the
outcome itself (NaN exactly when flagged missing), and named baseline
covariates. Arm 2 is the arm shared by both trials.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

# (stratum id, arm, trial) for the four arm-by-trial cells, in fitting order.
ARM_STRATA = ((1, 1, 1), (2, 2, 1), (3, 2, 2), (4, 3, 2))

#: stratum id keyed by (arm, trial)
STRATUM_OF = {(arm, trial): q for q, arm, trial in ARM_STRATA}

VALID_ARMS_BY_TRIAL = {1: (1, 2), 2: (2, 3)}


@dataclass
class TrialDataset:
    """Stacked observations from the two trials.

    Parameters
    ----------
    trial : ndarray of int
        Trial membership, 1 or 2.
    arm : ndarray of int
        Assigned arm, in {1, 2} for trial 1 and {2, 3} for trial 2.
    missing : ndarray of int
        1 if the outcome is missing, 0 if observed.
    outcome : ndarray of float
        Observed outcome; NaN exactly where ``missing == 1``.
    covariates : dict of str -> ndarray
        Named baseline covariate columns (numeric or string-valued). No
        missing values are allowed; rows with missing covariates must be
        excluded before construction.
    potential_outcomes : dict of int -> ndarray, optional
        Simulation-only: potential outcome under each arm, for truth checks.
    """

    trial: np.ndarray
    arm: np.ndarray
    missing: np.ndarray
    outcome: np.ndarray
    covariates: dict[str, np.ndarray] = field(default_factory=dict)
    potential_outcomes: dict[int, np.ndarray] | None = None

    def __post_init__(self):
        self.trial = np.asarray(self.trial, dtype=np.int64)
        self.arm = np.asarray(self.arm, dtype=np.int64)
        self.missing = np.asarray(self.missing, dtype=np.int64)
        self.outcome = np.asarray(self.outcome, dtype=np.float64)
        self._validate()

    def _validate(self):
        n = self.trial.shape[0]
        for name, arr in (("arm", self.arm), ("missing", self.missing),
                          ("outcome", self.outcome)):
            if arr.shape[0] != n:
                raise ValidationError(
                    f"data: column '{name}' has length {arr.shape[0]}, expected {n}")

        bad_trial = ~np.isin(self.trial, (1, 2))
        if bad_trial.any():
            raise ValidationError(
                f"data: trial codes must be 1 or 2; offending rows {_rows(bad_trial)}")
        bad_arm = np.zeros(n, dtype=bool)
        for t, arms in VALID_ARMS_BY_TRIAL.items():
            bad_arm |= (self.trial == t) & ~np.isin(self.arm, arms)
        if bad_arm.any():
            raise ValidationError(
                "data: arm/trial incompatible (trial 1 allows arms {1,2}, trial 2 "
                f"allows arms {{2,3}}); offending rows {_rows(bad_arm)}")
        if not np.isin(self.missing, (0, 1)).all():
            raise ValidationError("data: missing flag must be 0 or 1")

        y_nan = np.isnan(self.outcome)
        mism = y_nan != (self.missing == 1)
        if mism.any():
            raise ValidationError(
                "data: outcome must be absent exactly when the missing flag is 1; "
                f"offending rows {_rows(mism)}")

        for name, col in self.covariates.items():
            col = np.asarray(col)
            if col.shape[0] != n:
                raise ValidationError(
                    f"data: covariate '{name}' has length {col.shape[0]}, expected {n}")
            if col.dtype.kind == "f" and np.isnan(col).any():
                raise ValidationError(
                    f"data: covariate '{name}' contains missing values; exclude those "
                    "rows before constructing the dataset")
            self.covariates[name] = col

    @property
    def n(self) -> int:
        return self.trial.shape[0]

    @property
    def n_trial1(self) -> int:
        return int((self.trial == 1).sum())

    @property
    def n_trial2(self) -> int:
        return int((self.trial == 2).sum())

    def stratum_mask(self, arm: int, trial: int) -> np.ndarray:
        return (self.arm == arm) & (self.trial == trial)

    def cell_mask(self, arm: int, trial: int) -> np.ndarray:
        """Rows in the (arm, trial) cell with an observed outcome."""
        return self.stratum_mask(arm, trial) & (self.missing == 0)

    def subset(self, mask: np.ndarray) -> "TrialDataset":
        mask = np.asarray(mask, dtype=bool)
        po = None
        if self.potential_outcomes is not None:
            po = {a: v[mask] for a, v in self.potential_outcomes.items()}
        return TrialDataset(
            trial=self.trial[mask],
            arm=self.arm[mask],
            missing=self.missing[mask],
            outcome=self.outcome[mask],
            covariates={k: v[mask] for k, v in self.covariates.items()},
            potential_outcomes=po,
        )


def _rows(mask: np.ndarray, limit: int = 10) -> str:
    idx = np.flatnonzero(mask)
    head = ", ".join(str(i) for i in idx[:limit])
    more = f", ... ({idx.size} total)" if idx.size > limit else ""
    return f"[{head}{more}]"
