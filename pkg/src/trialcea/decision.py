"""Incremental decision metrics and the MNAR pattern-mixture scenario sweep."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ValidationError
from .mice import ImputedSets
from .trial_data import FOLLOW_UP, utility_col

DOMINANT = "Dominant"
DOMINATED = "Dominated"
UNDEFINED = "Undefined (ΔE=0)"


def icer(dc, de):
    """ICER as a number, or a label when it carries no ranking information."""
    if not (math.isfinite(dc) and math.isfinite(de)):
        raise ValidationError("ICER inputs must be finite")
    if de == 0:
        return UNDEFINED
    if dc < 0 and de > 0:
        return DOMINANT
    if dc > 0 and de < 0:
        return DOMINATED
    return dc / de


def _check_lambda(lam):
    if not (math.isfinite(lam) and lam > 0):
        raise ValidationError(f"threshold must be positive and finite, got {lam}")


def nhb(dc, de, lam):
    """Net health benefit in QALYs."""
    _check_lambda(lam)
    return de - dc / lam


def nmb(dc, de, lam):
    """Net monetary benefit in currency units."""
    _check_lambda(lam)
    return lam * de - dc


def nhb_variance(var_c, var_e, cov_ce, lam):
    return var_e + var_c / lam ** 2 - 2 * cov_ce / lam


@dataclass(frozen=True)
class DecisionSummary:
    delta_c: float
    delta_e: float
    threshold: float
    prob_ce: float | None = None

    @property
    def icer(self):
        return icer(self.delta_c, self.delta_e)

    @property
    def nhb(self):
        return nhb(self.delta_c, self.delta_e, self.threshold)

    @property
    def nmb(self):
        return nmb(self.delta_c, self.delta_e, self.threshold)

    def to_dict(self):
        return {"delta_c": self.delta_c, "delta_e": self.delta_e, "icer": self.icer,
                "threshold": self.threshold, "nhb": self.nhb, "nmb": self.nmb, "prob_ce": self.prob_ce}


# ---------------------------------------------------------------- MNAR scenarios

FACTORS = (1.0, 0.95, 0.90)


@dataclass(frozen=True)
class MnarScenario:
    id: int
    c_control: float
    c_intervention: float

    def __post_init__(self):
        if self.c_control not in FACTORS or self.c_intervention not in FACTORS:
            raise ValidationError(f"rescaling factors must be in {FACTORS}")

    def factor(self, arm):
        return self.c_intervention if arm == 1 else self.c_control


_PAIRS = ((1.0, 1.0), (1.0, 0.95), (0.95, 1.0), (0.95, 0.95), (0.95, 0.90), (0.90, 0.95), (0.90, 0.90))


def scenario_table():
    """The seven (control, intervention) factor pairs; scenario 1 is MAR."""
    return [MnarScenario(i + 1, c, t) for i, (c, t) in enumerate(_PAIRS)]


UTILITY_VARIABLES = tuple(utility_col(t) for t in FOLLOW_UP)


def apply_mnar_rescale(imputed: ImputedSets, scenario: MnarScenario) -> ImputedSets:
    """Multiply every MI-imputed follow-up utility by its arm's factor; all
    observed cells and every cost cell are left as they are."""
    if imputed is None or imputed.mask is None:
        raise ValidationError("rescaling needs the imputation mask")
    targets = [v for v in imputed.variables if v in UTILITY_VARIABLES]
    out = []
    for df in imputed.datasets:
        df = df.copy()
        arm = df["arm"].to_numpy()
        for v in targets:
            mask = imputed.mask[v].to_numpy()
            col = df[v].to_numpy(float, copy=True)
            for a in (0, 1):
                f = scenario.factor(a)
                if f != 1.0:
                    sel = mask & (arm == a)
                    col[sel] = col[sel] * f
            df[v] = col
        out.append(df)
    return ImputedSets(out, imputed.mask, imputed.variables, imputed.seed, imputed.seeds, imputed.baseline_mask)


def run_scenarios(imputed: ImputedSets, context, scenarios=None, workers=1):
    """Rescale, re-estimate, pool and summarise each scenario.  ``context``
    is a ``pipeline.Prepared``.  Bootstrap streams are
    shared across scenarios, so scenario 1 reproduces the base case."""
    from .pipeline import analyse_imputed

    results = []
    for sc in scenarios or scenario_table():
        res = analyse_imputed(apply_mnar_rescale(imputed, sc), context, workers=workers, scenario=sc.id)
        results.append((sc, res))
    return results


def scenario_rows(results, lam=15000.0, estimator="lmm"):
    rows = []
    for sc, res in results:
        p = res.pooled[estimator]
        rows.append({
            "id": sc.id, "c_control": sc.c_control, "c_intervention": sc.c_intervention,
            "delta_c": p["cost"]["difference"]["estimate"],
            "delta_c_ci": [p["cost"]["difference"]["ci_low"], p["cost"]["difference"]["ci_high"]],
            "delta_e": p["qaly"]["difference"]["estimate"],
            "delta_e_ci": [p["qaly"]["difference"]["ci_low"], p["qaly"]["difference"]["ci_high"]],
            "nhb": p["nhb"][_key(lam)]["estimate"],
            "nhb_ci": [p["nhb"][_key(lam)]["ci_low"], p["nhb"][_key(lam)]["ci_high"]],
            "prob_ce_15000": res.probability(lam),
        })
    return rows


def _key(lam):
    return str(int(lam)) if float(lam).is_integer() else repr(float(lam))

