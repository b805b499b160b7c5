"""Command-line entry point: ``trialcea <command> --config run.toml``.

Exit codes: 0 success, 2 invalid input or configuration, 3 estimation did
not converge, 4 file or I/O problem.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import pandas as pd

from . import __version__
from .config import RunConfig, RunManifest
from .decision import run_scenarios, scenario_rows, scenario_table
from .errors import TrialCeaError
from .mice import ImputedSets
from .missingness import choose_imputation_count, fit_missingness_model
from .outcomes import UnitCostTable, illustrative_unit_costs, load_valueset
from .parallel import default_workers
from .pipeline import analyse_imputed, dumps, impute, prepare, threshold_key
from .synth import Mechanism, SimConfig, apply_missingness, generate_trial, write_trial_csvs
from .trial_data import FOLLOW_UP, baseline_summary, load_merged, write_merged_csv
from .uncertainty import ce_plane_export, write_ceac_csv
from .svg import ce_plane_svg, ceac_svg

log = logging.getLogger("trialcea")

COMMANDS = ("ingest", "missing", "impute", "analyze", "ceac", "mnar", "simulate", "report")


# ---------------------------------------------------------------- shared steps

def _workers(cfg):
    return cfg.workers if cfg.workers > 0 else default_workers()


def _merged(cfg):
    cfg.require("routine", "crf", "wards")
    return load_merged(cfg.inputs["routine"], cfg.inputs["crf"], cfg.inputs["wards"], strict=cfg.strict,
                       include_decedents=cfg.analysis.include_decedents)


def _unit_costs(cfg):
    if "unit_costs" in cfg.inputs:
        cfg.require("unit_costs")
        return UnitCostTable.from_toml(cfg.inputs["unit_costs"])
    log.warning("no unit cost table configured; using the illustrative placeholder prices")
    return illustrative_unit_costs()


def _valueset(cfg):
    if "valueset" in cfg.inputs:
        cfg.require("valueset")
        return load_valueset(cfg.inputs["valueset"])
    return load_valueset()


def _prepared(cfg):
    return prepare(_merged(cfg), _unit_costs(cfg), cfg.analysis, _valueset(cfg), cfg.imputation)


def _imputations(cfg, prep, manifest):
    """Reuse imputation files written by ``impute`` under the same config
    hash; otherwise impute inline.  Both routes give identical datasets."""
    path = cfg.out / "imputations"
    mask = path / "mask.json"
    if mask.exists():
        meta = json.loads(mask.read_text(encoding="utf-8"))
        if meta.get("config_hash") == cfg.hash() and meta.get("M") == prep.M:
            log.info("using imputations from %s", path)
            return ImputedSets.from_dir(path)
    imputed = impute(prep, _workers(cfg))
    manifest.stage("impute")
    return imputed


def _write(path, text):
    Path(path).write_text(text, encoding="utf-8")
    return Path(path)


def _stamp(cfg, payload):
    return {"config_hash": cfg.hash(), "seed": cfg.analysis.seed, "engine_version": __version__, **payload}


# ---------------------------------------------------------------- commands

def cmd_ingest(cfg, manifest):
    merged = _merged(cfg)
    manifest.stage("ingest")
    out = cfg.out / "merged.csv"
    write_merged_csv(merged, out)
    report = _stamp(cfg, {"join": merged.report.to_dict(), "arm_sizes": {str(k): v for k, v in merged.arm_sizes().items()}})
    _write(cfg.out / "report.json", dumps(report))
    baseline_summary(merged).to_csv(cfg.out / "baseline.csv", index=False)
    for p in ("merged.csv", "report.json", "baseline.csv"):
        manifest.add_output(cfg.out / p)
    r = merged.report
    print(f"routine {r.n_routine}  crf {r.n_crf}  merged {r.n_merged}  wards {r.n_wards}")


def cmd_missing(cfg, manifest):
    prep = _prepared(cfg)
    rep = prep.report
    models = {}
    for t in FOLLOW_UP:
        models[str(t)] = fit_missingness_model(prep.frame, t).to_dict()
    manifest.stage("missingness")
    payload = _stamp(cfg, {
        "report": rep.to_dict(),
        "imputable": sorted(prep.classes["imputable"]),
        "complete_case_only": sorted(prep.classes["complete_case_only"]),
        "incomplete_case_pct": rep.incomplete_case_pct(list(prep.spec.variables[:3]) + sorted(prep.imputable)),
        "M_suggested": choose_imputation_count(rep, list(prep.spec.variables[:3]) + sorted(prep.imputable)),
        "missingness_models": models,
    })
    _write(cfg.out / "missingness.json", dumps(payload))
    table = rep.table.copy()
    table["percent"] = table["percent"].round(2)
    table.to_csv(cfg.out / "missingness_table.csv", index=False)
    manifest.add_output(cfg.out / "missingness.json")
    manifest.add_output(cfg.out / "missingness_table.csv")
    print(table.to_string(index=False))


def cmd_impute(cfg, manifest):
    prep = _prepared(cfg)
    manifest.stage("prepare")
    imputed = impute(prep, _workers(cfg))
    manifest.stage("impute")
    path = imputed.to_dir(cfg.out / "imputations", extra={"config_hash": cfg.hash()})
    manifest.add_output(path)
    print(f"wrote {imputed.M} imputed datasets to {path}")


def _analysis(cfg, manifest):
    prep = _prepared(cfg)
    manifest.stage("prepare")
    imputed = _imputations(cfg, prep, manifest)
    res = analyse_imputed(imputed, prep, _workers(cfg))
    manifest.stage("estimate_and_bootstrap")
    return prep, imputed, res


def _write_cloud_outputs(cfg, manifest, res):
    extra = {"config_hash": cfg.hash()}
    csv_path, sidecar = ce_plane_export(res.cloud, cfg.out / "ce_plane.csv", extra)
    write_ceac_csv(res.curve, cfg.out / "ceac.csv")
    lam = cfg.analysis.thresholds[0]
    ce_plane_svg(res.cloud.delta_e, res.cloud.delta_c, cfg.out / "ce_plane.svg", threshold=lam)
    ceac_svg(res.curve.thresholds, res.curve.probabilities, cfg.out / "ceac.svg")
    for p in (csv_path, sidecar, cfg.out / "ceac.csv", cfg.out / "ce_plane.svg", cfg.out / "ceac.svg"):
        manifest.add_output(p)


def format_table(pooled, res, thresholds):
    lines = []
    for est, p in pooled.items():
        lines.append(f"[{est}]")
        lines.append(f"{'':12}{'control':>12}{'intervention':>14}{'difference':>12}{'SE':>10}   95% CI")
        for ep, label, fmt in (("cost", "Cost (GBP)", "{:.2f}"), ("qaly", "QALYs", "{:.4f}")):
            e = p[ep]
            d = e["difference"]
            lines.append(f"{label:12}{fmt.format(e['adjusted_mean_control']):>12}"
                         f"{fmt.format(e['adjusted_mean_intervention']):>14}{fmt.format(d['estimate']):>12}"
                         f"{fmt.format(d['se']):>10}   {fmt.format(d['ci_low'])} to {fmt.format(d['ci_high'])}")
        icer = p["icer"]
        lines.append(f"ICER: {icer if isinstance(icer, str) else f'{icer:.2f} GBP/QALY'}")
        for lam in thresholds:
            k = threshold_key(lam)
            nh, nm = p["nhb"][k], p["nmb"][k]
            lines.append(f"lambda {lam:,.0f}: NHB {nh['estimate']:.4f} ({nh['ci_low']:.4f} to {nh['ci_high']:.4f})"
                         f"  NMB {nm['estimate']:.2f}")
        lines.append("")
    for lam in thresholds:
        lines.append(f"probability cost-effective at {lam:,.0f}: {res.probability(lam):.3f}")
    return "\n".join(lines) + "\n"


def cmd_analyze(cfg, manifest):
    _, _, res = _analysis(cfg, manifest)
    payload = _stamp(cfg, res.to_dict())
    _write(cfg.out / "pooled_estimates.json", dumps(payload))
    text = format_table(res.pooled, res, cfg.analysis.thresholds)
    _write(cfg.out / "pooled_estimates.txt", text)
    _write_cloud_outputs(cfg, manifest, res)
    manifest.add_output(cfg.out / "pooled_estimates.json")
    manifest.add_output(cfg.out / "pooled_estimates.txt")
    print(text, end="")


def cmd_ceac(cfg, manifest):
    _, _, res = _analysis(cfg, manifest)
    _write_cloud_outputs(cfg, manifest, res)
    for lam in cfg.analysis.thresholds:
        print(f"{lam:>10,.0f}  {res.probability(lam):.3f}")


def cmd_mnar(cfg, manifest):
    prep = _prepared(cfg)
    manifest.stage("prepare")
    imputed = _imputations(cfg, prep, manifest)
    chosen = [s for s in scenario_table() if s.id in cfg.scenarios]
    results = run_scenarios(imputed, prep, chosen, workers=_workers(cfg))
    manifest.stage("scenarios")
    lam = cfg.analysis.thresholds[0]
    rows = scenario_rows(results, lam, cfg.analysis.primary_estimator)
    _write(cfg.out / "scenarios.json", dumps(_stamp(cfg, {"threshold": lam, "scenarios": rows})))
    ce_plane_export([r.cloud for _, r in results], cfg.out / "ce_plane_scenarios.csv", {"config_hash": cfg.hash()})
    for p in ("scenarios.json", "ce_plane_scenarios.csv", "ce_plane_scenarios.quadrants.json"):
        manifest.add_output(cfg.out / p)
    table = pd.DataFrame(rows)
    print(table.to_string(index=False))


def cmd_simulate(cfg, manifest):
    sim = dict(cfg.simulate)
    mech = Mechanism.from_dict(sim.pop("missingness", {}))
    sim.setdefault("seed", cfg.analysis.seed)
    scfg = SimConfig.from_dict(sim)
    data, truth = generate_trial(scfg, _unit_costs(cfg) if "unit_costs" in cfg.inputs else None)
    holed, deleted = apply_missingness(data, mech, seed=scfg.seed)
    manifest.stage("simulate")
    paths = write_trial_csvs(holed, cfg.out)
    meta = {"simulate": scfg.to_dict(), "missingness": mech.__dict__, "truth": {
        "delta_c": truth.delta_c, "delta_e": truth.delta_e, "utility_effect": truth.utility_effect,
        "readm_rate_intervention": truth.readm_rate_intervention,
        "nhb_15000": truth.nhb(15000.0)}, "deleted_cells": int(deleted.to_numpy().sum())}
    _write(cfg.out / "truth.json", dumps(_stamp(cfg, meta)))
    for p in [*paths.values(), cfg.out / "truth.json"]:
        manifest.add_output(p)
    print(f"wrote {holed.n} patients in {holed.patients['ward_id'].nunique()} wards to {cfg.out}")


def cmd_report(cfg, manifest):
    parts = []
    sources = {"pooled_estimates.txt": "Cost-effectiveness results", "scenarios.json": "MNAR scenarios",
               "missingness_table.csv": "Missing values"}
    found = False
    for name, title in sources.items():
        p = cfg.out / name
        if not p.exists():
            continue
        found = True
        parts.append(f"## {title}\n")
        if name.endswith(".json"):
            rows = json.loads(p.read_text(encoding="utf-8"))["scenarios"]
            parts.append("```\n" + pd.DataFrame(rows).to_string(index=False) + "\n```\n")
        elif name.endswith(".csv"):
            parts.append("```\n" + pd.read_csv(p).to_string(index=False) + "\n```\n")
        else:
            parts.append("```\n" + p.read_text(encoding="utf-8") + "```\n")
    if not found:
        raise FileNotFoundError(f"file not found: no analysis outputs in {cfg.out}; run analyze or mnar first")
    text = f"# Analysis report\n\nconfig hash {cfg.hash()}, seed {cfg.analysis.seed}\n\n" + "\n".join(parts)
    _write(cfg.out / "report.md", text)
    manifest.add_output(cfg.out / "report.md")
    print(text, end="")


HANDLERS = {"ingest": cmd_ingest, "missing": cmd_missing, "impute": cmd_impute, "analyze": cmd_analyze,
            "ceac": cmd_ceac, "mnar": cmd_mnar, "simulate": cmd_simulate, "report": cmd_report}


HELP = {
    "ingest": "merge routine, CRF and ward files into merged.csv",
    "missing": "missing-data profile, 60%% rule and missingness models",
    "impute": "write M imputed datasets by arm",
    "analyze": "pooled cost-effectiveness estimates, CE plane and CEAC",
    "ceac": "bootstrap cloud and acceptability curve only",
    "mnar": "pattern-mixture scenario sweep",
    "simulate": "write a synthetic trial in the input schemas",
    "report": "collect existing outputs into report.md",
}


def build_parser():
    p = argparse.ArgumentParser(prog="trialcea", description="Cost-effectiveness analysis of a cluster trial "
                                "with multiple imputation, mixed models and a ward bootstrap.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, type=Path, help="TOML run configuration")
    common.add_argument("--seed", type=int, help="override analysis.seed")
    common.add_argument("--out", type=Path, help="override run.out")
    common.add_argument("--serial", action="store_true", help="run every task in this process")
    common.add_argument("--workers", type=int, help="worker processes (default: all cores)")
    common.add_argument("--strict", dest="strict", action="store_true", default=None,
                        help="reject malformed rows (default from config)")
    common.add_argument("--lenient", dest="strict", action="store_false", help="skip malformed rows with a warning")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=HELP[name])
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config)
        workers = 1 if args.serial else args.workers
        cfg = cfg.override(seed=args.seed, out=args.out, workers=workers, strict=args.strict)
        cfg.out.mkdir(parents=True, exist_ok=True)
        manifest = RunManifest(args.command, cfg)
        HANDLERS[args.command](cfg, manifest)
        manifest.write()
    except TrialCeaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, PermissionError, IsADirectoryError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
