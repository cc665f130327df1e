"""Five-scenario simulation study: data generation, replication runner,
summary metrics, and the Monte Carlo truth.

Each replication draws two covariates, a randomized arm, three potential
outcomes (continuous or dichotomized), and a missingness flag, then runs the
four estimators (naive and bridging, single- and multi-span) plus both
diagnostics. Random streams are counter-based (Philox) so replication k is
the same whether run serially or in parallel.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import TrialDataset
from .errors import EstimationError, ValidationError
from .estimators import fit_multi_span, fit_single_span, naive_variants
from .features import ModelSpec, Term
from .glm import expit

#: assignment is 1:1 in both trials
ASSIGNMENT_PROBS = {(1, 1): 0.5, (2, 1): 0.5, (2, 2): 0.5, (3, 2): 0.5}

#: observation model: X1 within each arm; sampling model: X1 and X2
MISSINGNESS_SPEC = ModelSpec(terms=(Term("X1"),))
SAMPLING_SPEC = ModelSpec(terms=(Term("X1"), Term("X2")))

ESTIMATORS = ("naive_ms", "naive_ss", "bridging_ms", "bridging_ss")

_STREAM_REPLICATION = 1
_STREAM_TRUTH = 2

_TRUTH_CHUNK = 1_000_000


@dataclass(frozen=True)
class ScenarioConfig:
    """Configuration of one simulation study."""

    scenario: int
    n1: int = 1000
    n2: int = 400
    outcome_kind: str = "continuous"
    n_reps: int = 2000
    seed: int = 42
    truth_reps: int = 20_000_000

    def __post_init__(self):
        if self.scenario not in (1, 2, 3, 4, 5):
            raise ValidationError(f"sim: scenario must be 1..5, got {self.scenario}")
        if self.n1 < 2 or self.n2 < 2:
            raise ValidationError("sim: both trial sizes must be at least 2")
        if self.n_reps < 1:
            raise ValidationError("sim: need at least one replication")
        if self.outcome_kind not in ("continuous", "binary"):
            raise ValidationError(
                f"sim: outcome_kind must be 'continuous' or 'binary', got "
                f"{self.outcome_kind!r}")
        if self.truth_reps < 100_000:
            raise ValidationError("sim: truth_reps must be at least 1e5")


def substream(seed: int, stream: int, index: int) -> np.random.Generator:
    """Independent generator for (stream, index): disjoint 2^128-draw blocks
    of one keyed Philox counter space, so parallel and serial runs agree."""
    counter = [0, 0, int(index), int(stream)]
    return np.random.Generator(np.random.Philox(key=int(seed), counter=counter))


def conditional_outcome_mean(scenario: int, arm: int, x1, x2, trial) -> np.ndarray:
    """Mean of the latent outcome draw for an arm given covariates and trial."""
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    t1 = np.asarray(trial) == 1
    if scenario == 1:
        base = {1: 50.0, 2: 80.0, 3: 110.0}[arm]
        return base - 5.0 * x1 + 1.1 * x2
    if scenario == 2:
        if arm == 1:
            return 35.0 - 80.0 * x1 + 1.0 * x2
        if arm == 2:
            return 30.0 - 10.0 * x1 + 1.1 * x2
        return 40.0 + 20.0 * x1 + 1.2 * x2
    if scenario == 3:
        if arm == 1:
            return 35.0 - 80.0 * x1 + 1.0 * x2
        if arm == 2:
            return np.where(t1, 45.0 - 10.0 * x1 + 1.1 * x2,
                            40.0 + 10.0 * x1 + 1.0 * x2)
        return 40.0 + 20.0 * x1 + 1.2 * x2
    # scenarios 4 and 5 share arms 1 and 3
    if arm == 1:
        return 45.0 - 80.0 * x1 + 1.0 * x2 - 30.0 * t1
    if arm == 3:
        return 30.0 + 20.0 * x1 + 1.2 * x2 + 20.0 * (~t1)
    if scenario == 4:
        return 30.0 - 10.0 * x1 + 1.1 * x2
    return 30.0 - 10.0 * x1 + 1.1 * x2 + 10.0 * t1


def _covariates(scenario: int, trial: np.ndarray, rng) -> tuple[np.ndarray, np.ndarray]:
    n = trial.shape[0]
    if scenario == 1:
        x1 = rng.binomial(1, 0.25, n).astype(np.float64)
        theta = 175.0 - 10.0 * x1
    else:
        p = np.where(trial == 1, 0.5, 0.2)
        x1 = rng.binomial(1, p).astype(np.float64)
        theta = 175.0 - 20.0 * x1 + 10.0 * (trial == 2)
    x2 = np.maximum(0.0, rng.normal(theta, 30.0))
    return x1, x2


def missingness_probability(scenario: int, x1, trial) -> np.ndarray:
    """True probability the outcome is missing, given covariates and trial."""
    x1 = np.asarray(x1, dtype=np.float64)
    if scenario == 1:
        return np.full(x1.shape, 0.15)
    return expit(0.5 * x1 - 2.0 * (np.asarray(trial) == 1)
                 - 2.1 * (np.asarray(trial) == 2))


def sampling_log_odds(cfg: ScenarioConfig, x1, x2) -> np.ndarray:
    """True log odds of target-trial membership given covariates, from the
    covariate laws and the trial sizes (Bayes' rule)."""
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    prior = math.log(cfg.n2 / cfg.n1)
    if cfg.scenario == 1:
        return np.full(x1.shape, prior)
    # X1 ~ Bernoulli(0.5 | trial 1, 0.2 | trial 2); X2 normal with sd 30
    # and trial-specific mean (zero-truncation mass is negligible here)
    lr_x1 = x1 * math.log(0.2 / 0.5) + (1 - x1) * math.log(0.8 / 0.5)
    t1_mean = 175.0 - 20.0 * x1
    t2_mean = t1_mean + 10.0
    lr_x2 = ((x2 - t1_mean) ** 2 - (x2 - t2_mean) ** 2) / (2.0 * 30.0 ** 2)
    return prior + lr_x1 + lr_x2


def generate_dataset(cfg: ScenarioConfig, rep_index: int) -> TrialDataset:
    """One replication's dataset; deterministic given (seed, rep_index).

    Potential outcomes under all three arms are retained for truth checks.
    """
    rng = substream(cfg.seed, _STREAM_REPLICATION, rep_index)
    n = cfg.n1 + cfg.n2
    trial = np.concatenate([np.ones(cfg.n1, dtype=np.int64),
                            np.full(cfg.n2, 2, dtype=np.int64)])
    x1, x2 = _covariates(cfg.scenario, trial, rng)
    b = rng.binomial(1, 0.5, n)
    arm = np.where(trial == 1, b + 1, b + 2)

    potential = {}
    for a in (1, 2, 3):
        mu = conditional_outcome_mean(cfg.scenario, a, x1, x2, trial)
        u = np.maximum(0.0, rng.normal(mu, 20.0))
        potential[a] = (u > 250.0).astype(np.float64) if cfg.outcome_kind == "binary" else u

    missing = rng.binomial(1, missingness_probability(cfg.scenario, x1, trial))
    outcome = np.select([arm == a for a in (1, 2, 3)],
                        [potential[a] for a in (1, 2, 3)])
    outcome = np.where(missing == 1, np.nan, outcome)

    return TrialDataset(trial=trial, arm=arm, missing=missing, outcome=outcome,
                        covariates={"X1": x1, "X2": x2},
                        potential_outcomes=potential)


def true_ate(cfg: ScenarioConfig) -> tuple[float, float]:
    """Monte Carlo truth: mean of (arm-3 minus arm-1 potential outcome) under
    the target population's covariate laws. Returns (estimate, MC standard
    error)."""
    total = 0.0
    total_sq = 0.0
    count = 0
    remaining = cfg.truth_reps
    chunk_index = 0
    while remaining > 0:
        m = min(_TRUTH_CHUNK, remaining)
        rng = substream(cfg.seed, _STREAM_TRUTH, chunk_index)
        trial = np.full(m, 2, dtype=np.int64)
        x1, x2 = _covariates(cfg.scenario, trial, rng)
        vals = {}
        for a in (3, 1):
            mu = conditional_outcome_mean(cfg.scenario, a, x1, x2, trial)
            u = np.maximum(0.0, rng.normal(mu, 20.0))
            vals[a] = (u > 250.0).astype(np.float64) if cfg.outcome_kind == "binary" else u
        diffs = vals[3] - vals[1]
        total += float(diffs.sum())
        total_sq += float((diffs ** 2).sum())
        count += m
        remaining -= m
        chunk_index += 1
    mean = total / count
    var = max(total_sq / count - mean ** 2, 0.0)
    return mean, math.sqrt(var / count)


# ---------------------------------------------------------------------------
# Replication runner


@dataclass
class EstimatorSummary:
    """Replication-level metrics for one estimator."""

    bias: float
    ase: float
    ese: float | None
    ser: float | None
    rmse: float | None
    coverage_pct: float
    mc_se_coverage: float
    n_used: int
    n_failed: int
    mean_d: float | None = None
    pct_ci_includes_zero: float | None = None


@dataclass
class SimSummary:
    """Study-level results: per-estimator metrics plus the Monte Carlo truth."""

    config: ScenarioConfig
    truth: float
    truth_mc_se: float
    estimators: dict[str, EstimatorSummary]
    warning: bool = False
    failure_notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        cfg = self.config
        return {
            "scenario": cfg.scenario,
            "n1": cfg.n1,
            "n2": cfg.n2,
            "outcome_kind": cfg.outcome_kind,
            "n_reps": cfg.n_reps,
            "seed": cfg.seed,
            "truth": self.truth,
            "truth_mc_se": self.truth_mc_se,
            "warning": self.warning,
            "failure_notes": self.failure_notes,
            "estimators": {k: vars(v) for k, v in self.estimators.items()},
        }

    def to_csv_rows(self) -> list[dict]:
        """Rows in the familiar summary-table layout, one per estimator."""
        pretty = {"naive_ms": "Naive MS", "naive_ss": "Naive SS",
                  "bridging_ms": "Bridging MS", "bridging_ss": "Bridging SS"}
        rows = []
        for key in ESTIMATORS:
            s = self.estimators[key]
            rows.append({
                "Scenario": self.config.scenario,
                "Estimator": pretty[key],
                "Bias": s.bias,
                "ASE": s.ase,
                "ESE": s.ese,
                "SER": s.ser,
                "RMSE": s.rmse,
                "Coverage": s.coverage_pct,
                "MeanDiag": s.mean_d,
                "DiagIncludesZero%": s.pct_ci_includes_zero,
            })
        return rows


def _replicate(cfg: ScenarioConfig, rep: int) -> dict:
    """Fit all four estimators (and both diagnostics) on one replication.

    Returns, per estimator, (estimate, se, lo, hi) or an error string; the
    multi-span entries also carry the diagnostic interval.
    """
    data = generate_dataset(cfg, rep)
    out: dict = {"rep": rep}
    try:
        nv = naive_variants(data)
        out["naive_ms"] = (nv.multi.ate, nv.multi.se, *nv.multi.ci95)
        out["naive_ss"] = (nv.single.ate, nv.single.se, *nv.single.ci95)
        out["naive_d"] = (nv.diagnostic.d_hat, *nv.diagnostic.ci95)
    except EstimationError as exc:
        out["naive_ms"] = out["naive_ss"] = out["naive_d"] = str(exc)
    try:
        ms = fit_multi_span(data, MISSINGNESS_SPEC, SAMPLING_SPEC, ASSIGNMENT_PROBS)
        out["bridging_ms"] = (ms.ate.ate, ms.ate.se, *ms.ate.ci95)
        out["bridging_d"] = (ms.diagnostic.d_hat, *ms.diagnostic.ci95)
    except EstimationError as exc:
        out["bridging_ms"] = out["bridging_d"] = str(exc)
    try:
        ss = fit_single_span(data, MISSINGNESS_SPEC, SAMPLING_SPEC, ASSIGNMENT_PROBS)
        out["bridging_ss"] = (ss.ate.ate, ss.ate.se, *ss.ate.ci95)
    except EstimationError as exc:
        out["bridging_ss"] = str(exc)
    return out


def _replicate_batch(args) -> list[dict]:
    cfg, reps = args
    return [_replicate(cfg, r) for r in reps]


def _summarize_estimator(records: list, truth: float, n_reps: int,
                         diag_records: list | None) -> EstimatorSummary:
    good = [r for r in records if not isinstance(r, str)]
    n_used, n_failed = len(good), n_reps - len(good)
    if n_used == 0:
        raise EstimationError("sim: every replication failed for an estimator")
    est = np.array([g[0] for g in good])
    ses = np.array([g[1] for g in good])
    lo = np.array([g[2] for g in good])
    hi = np.array([g[3] for g in good])
    bias = float(est.mean() - truth)
    ase = float(ses.mean())
    if n_used >= 2:
        ese = float(est.std(ddof=1))
        ser = ase / ese
        rmse = math.sqrt(bias ** 2 + ese ** 2)
    else:
        ese = ser = rmse = None
    covered = (lo <= truth) & (truth <= hi)
    p_hat = float(covered.mean())
    mean_d = pct_zero = None
    if diag_records is not None:
        dg = [r for r in diag_records if not isinstance(r, str)]
        if dg:
            d = np.array([g[0] for g in dg])
            inc = np.array([(g[1] <= 0.0 <= g[2]) for g in dg])
            mean_d = float(d.mean())
            pct_zero = float(inc.mean() * 100.0)
    return EstimatorSummary(
        bias=bias, ase=ase, ese=ese, ser=ser, rmse=rmse,
        coverage_pct=p_hat * 100.0,
        mc_se_coverage=math.sqrt(p_hat * (1.0 - p_hat) / n_used) * 100.0,
        n_used=n_used, n_failed=n_failed,
        mean_d=mean_d, pct_ci_includes_zero=pct_zero)


def run_study(cfg: ScenarioConfig, n_workers: int | None = None,
              truth: tuple[float, float] | None = None) -> SimSummary:
    """Run the full replication study for one scenario.

    Replications that fail to converge are counted, reported, and excluded
    from the aggregates; more than 1% failures for any estimator raises the
    study-level warning flag. ``truth`` can be supplied to reuse a
    previously computed Monte Carlo truth.
    """
    if n_workers is None:
        n_workers = int(os.environ.get("TRIALBRIDGE_WORKERS", "1"))
    if truth is None:
        truth = true_ate(cfg)
    truth_value, truth_se = truth

    reps = list(range(cfg.n_reps))
    if n_workers > 1 and cfg.n_reps > 1:
        chunks = [(cfg, reps[i::n_workers]) for i in range(n_workers)]
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            batches = list(pool.map(_replicate_batch, chunks))
        records = [r for batch in batches for r in batch]
        records.sort(key=lambda r: r["rep"])
    else:
        records = [_replicate(cfg, r) for r in reps]

    summaries = {}
    notes = []
    warning = False
    diag_key = {"naive_ms": "naive_d", "bridging_ms": "bridging_d"}
    for name in ESTIMATORS:
        recs = [r[name] for r in records]
        diag = [r[diag_key[name]] for r in records] if name in diag_key else None
        summaries[name] = _summarize_estimator(recs, truth_value, cfg.n_reps, diag)
        if summaries[name].n_failed > 0:
            notes.append(f"{name}: {summaries[name].n_failed} failed replication(s)")
        if summaries[name].n_failed > 0.01 * cfg.n_reps:
            warning = True
    return SimSummary(config=cfg, truth=truth_value, truth_mc_se=truth_se,
                      estimators=summaries, warning=warning, failure_notes=notes)
