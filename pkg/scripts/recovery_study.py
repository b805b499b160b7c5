"""Repeated simulate-and-analyse study: how well does the pipeline recover the configured effects?

Example:  python scripts/recovery_study.py --trials 20 --B 100 --M 10 --out out/recovery.csv
"""

import argparse
import math
from pathlib import Path

import numpy as np
import pandas as pd

from trialcea.config import AnalysisConfig
from trialcea.outcomes import illustrative_unit_costs
from trialcea.pipeline import analyse_imputed, impute, prepare
from trialcea.synth import Mechanism, SimConfig, apply_missingness, generate_trial


def one_trial(i, args, unit_costs):
    cfg = SimConfig(wards_per_arm=args.wards, patients_per_ward=(args.patients, args.patients),
                    delta_c=args.delta_c, delta_e=args.delta_e, seed=args.seed + i)
    ds, truth = generate_trial(cfg, unit_costs)
    mech = Mechanism(args.mechanism, args.p, hosp_p=0.005, resource_p=0.65)
    holed, _ = apply_missingness(ds, mech, seed=args.seed + i)
    settings = AnalysisConfig(seed=args.seed + 10_000 + i, B=args.B, M=args.M, estimators=("lmm",),
                              thresholds=tuple(args.thresholds))
    prep = prepare(holed, unit_costs, settings)
    res = analyse_imputed(impute(prep), prep)
    p = res.pooled["lmm"]
    row = {"trial": i, "delta_c": p["cost"]["difference"]["estimate"],
           "delta_e": p["qaly"]["difference"]["estimate"]}
    for key, ep, target in (("e_covered", "qaly", truth.delta_e), ("c_covered", "cost", truth.delta_c)):
        d = p[ep]["difference"]
        row[key] = d["ci_low"] <= target <= d["ci_high"]
    for lam in args.thresholds:
        row[f"prob_ce_{int(lam)}"] = res.probability(lam)
    return row, truth


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--trials", type=int, default=10)
    ap.add_argument("--wards", type=int, default=20, help="wards per arm")
    ap.add_argument("--patients", type=int, default=15, help="patients per ward")
    ap.add_argument("--delta-c", type=float, default=-250.0)
    ap.add_argument("--delta-e", type=float, default=0.006)
    ap.add_argument("--mechanism", choices=("MCAR", "MAR", "MNAR"), default="MAR")
    ap.add_argument("--p", type=float, default=0.30, help="target utility missingness rate")
    ap.add_argument("--B", type=int, default=200)
    ap.add_argument("--M", type=int, default=20)
    ap.add_argument("--thresholds", type=float, nargs="+", default=[15000.0, 40000.0])
    ap.add_argument("--seed", type=int, default=1000)
    ap.add_argument("--out", type=Path, default=None, help="optional CSV of per-trial results")
    args = ap.parse_args(argv)

    unit_costs = illustrative_unit_costs()
    rows = []
    for i in range(args.trials):
        row, truth = one_trial(i, args, unit_costs)
        rows.append(row)
        print(f"trial {i:3d}  dC {row['delta_c']:9.2f}  dE {row['delta_e']:.5f}", flush=True)
    df = pd.DataFrame(rows)
    n = len(df)
    for col, target in (("delta_c", truth.delta_c), ("delta_e", truth.delta_e)):
        half = 1.96 * df[col].std(ddof=1) / math.sqrt(n) if n > 1 else math.nan
        print(f"{col}: mean {df[col].mean():.5g} (truth {target}, MC half-width {half:.3g})")
    print(f"CI coverage: cost {df['c_covered'].mean():.2f}  qaly {df['e_covered'].mean():.2f}")
    for lam in args.thresholds:
        print(f"mean P(CE at {lam:g}) {df[f'prob_ce_{int(lam)}'].mean():.3f}  true NMB {truth.nmb(lam):.1f}")
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        df.to_csv(args.out, index=False)
        print(f"wrote {args.out}")
    return 0 if np.isfinite(df[["delta_c", "delta_e"]].to_numpy()).all() else 1


if __name__ == "__main__":
    raise SystemExit(main())
