"""Command-line interface: analyze / diagnose / simulate / truth.

Analyses are driven by a JSON config describing the input CSV, column
mapping, model terms, assignment probabilities, and an optional restriction
rule; selected flags override config values. Reports are emitted as
versioned JSON plus a human-readable table.

Exit codes: 0 success, 2 validation failure, 3 convergence/estimation
failure, 4 study-level warning.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np
import pandas as pd

from .data import TrialDataset, VALID_ARMS_BY_TRIAL
from .errors import EstimationError, TrialBridgeError, ValidationError
from .estimators import fit_multi_span, fit_single_span, naive_variants
from .features import ModelSpec, Term
from .sim import ScenarioConfig, run_study, true_ate

SCHEMA_VERSION = 1

_RESTRICTION_OPS = {
    "<=": np.less_equal,
    "<": np.less,
    ">=": np.greater_equal,
    ">": np.greater,
}


# ---------------------------------------------------------------------------
# Config handling


def load_config(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ValidationError(f"cli: cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"cli: config {path} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ValidationError("cli: config must be a JSON object")
    return cfg


def parse_term(d: dict) -> Term:
    if "column" not in d:
        raise ValidationError(f"cli: model term missing 'column': {d}")
    kwargs = {}
    if "n_knots" in d:
        kwargs["n_knots"] = int(d["n_knots"])
    if "percentiles" in d:
        kwargs["percentiles"] = tuple(float(p) for p in d["percentiles"])
    if "collapse" in d:
        kwargs["collapse"] = dict(d["collapse"])
    return Term(column=d["column"], transform=d.get("transform", "identity"), **kwargs)


def parse_model_spec(d: dict) -> ModelSpec:
    if "terms" not in d:
        raise ValidationError(f"cli: model spec missing 'terms': {d}")
    terms = tuple(parse_term(t) for t in d["terms"])
    return ModelSpec(terms=terms, include_intercept=bool(d.get("intercept", True)))


def parse_restriction(value) -> dict | None:
    """Accepts a config object or a compact flag string like 'cd4<=200'."""
    if value is None:
        return None
    if isinstance(value, dict):
        rule = value
    else:
        for op in ("<=", ">=", "<", ">"):
            if op in value:
                col, thr = value.split(op, 1)
                rule = {"covariate": col.strip(), "op": op, "threshold": float(thr)}
                break
        else:
            raise ValidationError(
                f"cli: restriction '{value}' must look like 'column<=threshold'")
    if rule.get("op") not in _RESTRICTION_OPS:
        raise ValidationError(
            f"cli: restriction op must be one of {sorted(_RESTRICTION_OPS)}")
    for key in ("covariate", "threshold"):
        if key not in rule:
            raise ValidationError(f"cli: restriction missing '{key}'")
    return {"covariate": rule["covariate"], "op": rule["op"],
            "threshold": float(rule["threshold"])}


def parse_assignment_probs(entries) -> dict[tuple[int, int], float]:
    if not entries:
        raise ValidationError("cli: config requires 'assignment_probabilities'")
    probs = {}
    for e in entries:
        try:
            probs[(int(e["arm"]), int(e["trial"]))] = float(e["probability"])
        except (KeyError, TypeError, ValueError):
            raise ValidationError(
                f"cli: assignment probability entries need arm/trial/probability: {e}"
            ) from None
    return probs


# ---------------------------------------------------------------------------
# Ingestion


def _recode(series: pd.Series, mapping: dict | None, allowed: set[int],
            what: str) -> np.ndarray:
    if mapping:
        mapped = series.astype(str).map({str(k): int(v) for k, v in mapping.items()})
    else:
        mapped = pd.to_numeric(series, errors="coerce")
    bad = mapped.isna() | ~mapped.isin(list(allowed))
    if bad.any():
        offending = sorted(set(series[bad].astype(str)))
        raise ValidationError(
            f"cli: unknown {what} codes {offending}; expected codes mapping onto "
            f"{sorted(allowed)}")
    return mapped.to_numpy(dtype=np.int64)


def ingest(path: str, columns: dict, recode: dict | None = None
           ) -> tuple[TrialDataset, dict]:
    """Read a CSV into a typed dataset.

    Rows with missing baseline covariates are rejected (reported, not fatal);
    an outcome present where the missing flag is 1, or absent where it is 0,
    is a hard failure listing the offending rows (1-based CSV line numbers).
    """
    recode = recode or {}
    for key in ("trial", "arm", "missing", "outcome", "covariates"):
        if key not in columns:
            raise ValidationError(f"cli: column mapping missing '{key}'")
    try:
        frame = pd.read_csv(path)
    except OSError as exc:
        raise ValidationError(f"cli: cannot read input {path}: {exc}") from None
    for col in [columns["trial"], columns["arm"], columns["missing"],
                columns["outcome"], *columns["covariates"]]:
        if col not in frame.columns:
            raise ValidationError(
                f"cli: column '{col}' not in {path}; found {list(frame.columns)}")

    # reject rows with missing covariates, with a per-row report
    cov_frame = frame[columns["covariates"]]
    bad_cov = cov_frame.isna().any(axis=1)
    rejected = []
    for idx in frame.index[bad_cov]:
        cols = [c for c in columns["covariates"] if pd.isna(frame.at[idx, c])]
        rejected.append({"line": int(idx) + 2, "missing_covariates": cols})
    frame = frame[~bad_cov].reset_index(drop=False).rename(columns={"index": "_row"})

    trial = _recode(frame[columns["trial"]], recode.get("trial"), {1, 2}, "trial")
    arm = _recode(frame[columns["arm"]], recode.get("arm"), {1, 2, 3}, "arm")
    missing = pd.to_numeric(frame[columns["missing"]], errors="coerce")
    if missing.isna().any() or ~missing.isin([0, 1]).all():
        raise ValidationError("cli: missing-flag column must contain only 0/1")
    missing = missing.to_numpy(dtype=np.int64)
    outcome = pd.to_numeric(frame[columns["outcome"]], errors="coerce").to_numpy()

    mism = np.isnan(outcome) != (missing == 1)
    if mism.any():
        lines = (frame["_row"].to_numpy()[mism] + 2).tolist()
        raise ValidationError(
            "cli: outcome must be present exactly when the missing flag is 0; "
            f"offending CSV lines {lines[:10]}{'...' if len(lines) > 10 else ''}")

    covariates = {}
    for c in columns["covariates"]:
        col = frame[c]
        if pd.api.types.is_numeric_dtype(col):
            covariates[c] = col.to_numpy(dtype=np.float64)
        else:
            covariates[c] = col.astype(str).to_numpy()

    data = TrialDataset(trial=trial, arm=arm, missing=missing, outcome=outcome,
                        covariates=covariates)
    report = {"n_read": int(bad_cov.shape[0]), "n_used": data.n,
              "rejected_rows": rejected}
    return data, report


def dataset_to_frame(data: TrialDataset, columns: dict | None = None) -> pd.DataFrame:
    """Canonical CSV form of a dataset (outcome blank where missing)."""
    columns = columns or {"trial": "trial", "arm": "arm", "missing": "missing",
                          "outcome": "outcome",
                          "covariates": list(data.covariates)}
    out = pd.DataFrame({
        columns["trial"]: data.trial,
        columns["arm"]: data.arm,
        columns["missing"]: data.missing,
        columns["outcome"]: data.outcome,
    })
    for name in columns["covariates"]:
        out[name] = data.covariates[name]
    return out


def apply_restriction(data: TrialDataset, rule: dict | None) -> TrialDataset:
    if rule is None:
        return data
    if rule["covariate"] not in data.covariates:
        raise ValidationError(
            f"cli: restriction covariate '{rule['covariate']}' not in dataset")
    col = np.asarray(data.covariates[rule["covariate"]], dtype=np.float64)
    mask = _RESTRICTION_OPS[rule["op"]](col, rule["threshold"])
    if not mask.any():
        raise ValidationError("cli: restriction removed every row")
    return data.subset(mask)


# ---------------------------------------------------------------------------
# Analysis


def _build_missingness_spec(cfg: dict):
    base = parse_model_spec(cfg["missingness_model"])
    overrides = cfg.get("missingness_overrides") or []
    if not overrides:
        return base
    spec: dict = {"default": base}
    for entry in overrides:
        try:
            key = (int(entry["arm"]), int(entry["trial"]))
        except (KeyError, TypeError, ValueError):
            raise ValidationError(
                f"cli: missingness override needs arm/trial/model: {entry}") from None
        spec[key] = parse_model_spec(entry["model"])
    return spec


def _apply_binary_cutoff(data: TrialDataset, cfg: dict) -> TrialDataset:
    cutoff = cfg.get("binary_cutoff")
    if cfg.get("outcome_kind", "continuous") != "binary" or cutoff is None:
        return data
    y = np.where(np.isnan(data.outcome), np.nan,
                 (data.outcome > float(cutoff)).astype(np.float64))
    return TrialDataset(trial=data.trial, arm=data.arm, missing=data.missing,
                        outcome=y, covariates=data.covariates)


def analyze(cfg: dict) -> dict:
    """Run the configured analysis and return the JSON-ready report."""
    span = cfg.get("span", "both")
    if span not in ("single", "multi", "both"):
        raise ValidationError(f"cli: span must be single, multi, or both; got {span!r}")
    data, ingest_report = ingest(cfg["input"], cfg["columns"], cfg.get("recode"))
    restriction = parse_restriction(cfg.get("restriction"))
    data = apply_restriction(data, restriction)
    data = _apply_binary_cutoff(data, cfg)

    miss_spec = _build_missingness_spec(cfg)
    samp_spec = parse_model_spec(cfg["sampling_model"])
    probs = parse_assignment_probs(cfg.get("assignment_probabilities"))

    report = {
        "schema_version": SCHEMA_VERSION,
        "input": cfg["input"],
        "outcome_kind": cfg.get("outcome_kind", "continuous"),
        "binary_cutoff": cfg.get("binary_cutoff"),
        "restriction": restriction,
        "ingest": ingest_report,
        "n_analyzed": data.n,
        "estimates": [],
        "diagnostic": None,
        "naive": None,
    }

    weight_rows = []
    if span in ("single", "both"):
        fit = fit_single_span(data, miss_spec, samp_spec, probs)
        report["estimates"].append(fit.ate.to_dict())
        weight_rows.append(("single", fit.weights))
    if span in ("multi", "both"):
        fit = fit_multi_span(data, miss_spec, samp_spec, probs)
        report["estimates"].append(fit.ate.to_dict())
        report["diagnostic"] = fit.diagnostic.to_dict()
        weight_rows.append(("multi", fit.weights))
    if cfg.get("include_naive"):
        nv = naive_variants(data)
        report["naive"] = {
            "single": nv.single.to_dict(),
            "multi": nv.multi.to_dict(),
            "diagnostic": nv.diagnostic.to_dict(),
        }

    weights_out = cfg.get("weights_out")
    if weights_out:
        _export_weights(weights_out, data, weight_rows)
        report["weights_out"] = weights_out
    return report


def _export_weights(path: str, data: TrialDataset, weight_rows) -> None:
    frames = []
    for span, ws in weight_rows:
        frames.append(pd.DataFrame({
            "span": span,
            "trial": data.trial,
            "arm": data.arm,
            "missing": data.missing,
            "w_missing": ws.w_missing,
            "w_sampling": ws.w_sampling,
            "w_assign": ws.w_assign,
            "w_product": ws.product,
            "used": ws.included.astype(int),
        }))
    pd.concat(frames, ignore_index=True).to_csv(path, index=False)


def _format_table(report: dict) -> str:
    lines = []
    head = f"{'span':<14}{'ATE':>12}{'SE':>10}{'95% CI':>26}"
    lines.append(head)
    lines.append("-" * len(head))
    rows = list(report["estimates"])
    if report.get("naive"):
        rows += [report["naive"]["single"], report["naive"]["multi"]]
    for est in rows:
        ci = f"({est['ci'][0]:.3f}, {est['ci'][1]:.3f})"
        lines.append(f"{est['span']:<14}{est['ate']:>12.4f}{est['se']:>10.4f}{ci:>26}")
    diag = report.get("diagnostic")
    if diag:
        ci = f"({diag['ci'][0]:.3f}, {diag['ci'][1]:.3f})"
        verdict = "includes 0" if diag["includes_zero"] else "EXCLUDES 0"
        lines.append(f"shared-arm diagnostic: {diag['d_hat']:.4f} "
                     f"SE {diag['se']:.4f} CI {ci} [{verdict}]")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Subcommands


def _override(cfg: dict, args, *names):
    for name in names:
        val = getattr(args, name, None)
        if val is not None:
            cfg[name.replace("_", "-") if False else name] = val


def _cmd_analyze(args) -> int:
    cfg = load_config(args.config)
    if args.input:
        cfg["input"] = args.input
    if args.span:
        cfg["span"] = args.span
    if args.restriction:
        cfg["restriction"] = args.restriction
    if args.weights_out:
        cfg["weights_out"] = args.weights_out
    if args.naive:
        cfg["include_naive"] = True
    report = analyze(cfg)
    payload = json.dumps(report, indent=2)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(payload + "\n")
    print(_format_table(report))
    if not args.out:
        print(payload)
    return 0


def _cmd_diagnose(args) -> int:
    cfg = load_config(args.config)
    if args.input:
        cfg["input"] = args.input
    if args.restriction:
        cfg["restriction"] = args.restriction
    cfg["span"] = "multi"
    cfg.pop("weights_out", None)
    report = analyze(cfg)
    out = {
        "schema_version": SCHEMA_VERSION,
        "input": report["input"],
        "restriction": report["restriction"],
        "diagnostic": report["diagnostic"],
    }
    payload = json.dumps(out, indent=2)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(payload + "\n")
    print(payload)
    return 0


def _cmd_simulate(args) -> int:
    cfg = ScenarioConfig(scenario=args.scenario, n1=args.n1, n2=args.n2,
                         outcome_kind=args.outcome, n_reps=args.reps,
                         seed=args.seed, truth_reps=args.truth_reps)
    summary = run_study(cfg, n_workers=args.workers)
    out = summary.to_dict()
    payload = json.dumps(out, indent=2)
    if args.out_prefix:
        with open(args.out_prefix + ".json", "w", encoding="utf-8") as fh:
            fh.write(payload + "\n")
        pd.DataFrame(summary.to_csv_rows()).to_csv(args.out_prefix + ".csv",
                                                   index=False)
    frame = pd.DataFrame(summary.to_csv_rows())
    with pd.option_context("display.float_format", lambda v: f"{v:.2f}"):
        print(frame.to_string(index=False))
    print(f"truth: {summary.truth:.4f} (MC SE {summary.truth_mc_se:.5f})")
    if summary.failure_notes:
        print("failures: " + "; ".join(summary.failure_notes), file=sys.stderr)
    if summary.warning:
        print("warning: more than 1% of replications failed", file=sys.stderr)
        return 4
    return 0


def _cmd_truth(args) -> int:
    cfg = ScenarioConfig(scenario=args.scenario, outcome_kind=args.outcome,
                         seed=args.seed, truth_reps=args.reps)
    value, mc_se = true_ate(cfg)
    print(json.dumps({"scenario": args.scenario, "outcome_kind": args.outcome,
                      "reps": args.reps, "value": value, "mc_se": mc_se}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trialbridge",
        description="Bridged treatment comparisons across two randomized trials")
    sub = parser.add_subparsers(dest="command", required=True)

    pa = sub.add_parser("analyze", help="run the configured bridged analysis")
    pa.add_argument("--config", required=True, help="JSON analysis config")
    pa.add_argument("--input", help="override the config's input CSV")
    pa.add_argument("--span", choices=["single", "multi", "both"])
    pa.add_argument("--restriction", help="e.g. 'cd4_base<=200'")
    pa.add_argument("--weights-out", dest="weights_out",
                    help="write per-row weights to this CSV")
    pa.add_argument("--naive", action="store_true",
                    help="also report unweighted variants")
    pa.add_argument("--out", help="write the JSON report here")

    pd_ = sub.add_parser("diagnose", help="shared-arm diagnostic only")
    pd_.add_argument("--config", required=True)
    pd_.add_argument("--input")
    pd_.add_argument("--restriction")
    pd_.add_argument("--out")

    ps = sub.add_parser("simulate", help="run a scenario replication study")
    ps.add_argument("--scenario", type=int, required=True, choices=[1, 2, 3, 4, 5])
    ps.add_argument("--n1", type=int, default=1000)
    ps.add_argument("--n2", type=int, default=400)
    ps.add_argument("--reps", type=int, default=2000)
    ps.add_argument("--seed", type=int, default=42)
    ps.add_argument("--outcome", choices=["continuous", "binary"],
                    default="continuous")
    ps.add_argument("--truth-reps", dest="truth_reps", type=int,
                    default=1_000_000)
    ps.add_argument("--workers", type=int, default=None,
                    help="defaults to $TRIALBRIDGE_WORKERS or 1")
    ps.add_argument("--out-prefix", dest="out_prefix",
                    help="write <prefix>.json and <prefix>.csv")

    pt = sub.add_parser("truth", help="Monte Carlo the true treatment effect")
    pt.add_argument("--scenario", type=int, required=True, choices=[1, 2, 3, 4, 5])
    pt.add_argument("--reps", type=int, default=1_000_000)
    pt.add_argument("--outcome", choices=["continuous", "binary"],
                    default="continuous")
    pt.add_argument("--seed", type=int, default=42)
    return parser


_HANDLERS = {
    "analyze": _cmd_analyze,
    "diagnose": _cmd_diagnose,
    "simulate": _cmd_simulate,
    "truth": _cmd_truth,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except EstimationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except TrialBridgeError as exc:  # pragma: no cover - safety net
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
