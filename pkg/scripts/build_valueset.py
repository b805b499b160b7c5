"""Write the packaged placeholder EQ-5D value set (3,125 profiles)."""

from pathlib import Path

import pandas as pd

from trialcea.outcomes import illustrative_valueset_table
from trialcea.trial_data import DIMS

OUT = Path(__file__).resolve().parents[1] / "src" / "trialcea" / "data" / "valueset_illustrative.csv"

if __name__ == "__main__":
    table = illustrative_valueset_table()
    rows = [(*p, u) for p, u in sorted(table.items())]
    pd.DataFrame(rows, columns=[*DIMS, "utility"]).to_csv(OUT, index=False)
    print(f"wrote {len(rows)} profiles to {OUT}")
