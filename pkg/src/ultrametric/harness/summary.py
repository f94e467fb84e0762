"""Aggregate result rows into per-cell tables and scaling fits."""
from __future__ import annotations

import csv
import json
from collections import defaultdict
from pathlib import Path

import numpy as np

from ..statistics import InsufficientDataError, domination_exponent
from .runner import load_manifest, load_rows

PHASE_COLUMNS = [
    "epsilon", "n", "realizations", "mean_r", "mean_r_se", "sup_norm_q90", "holder_slope",
    "local_law_min_im", "local_law_max_abs_over_log", "unfolded_mean_gap", "flow_fraction_C10", "failures",
]


class EmptyResultsError(ValueError):
    pass


def collect(rows: list[dict]) -> dict:
    """``{(epsilon, n): {observable: [value per realization]}}``."""
    out: dict = defaultdict(lambda: defaultdict(list))
    for r in rows:
        out[(r["epsilon"], r["n"])][r["observable"]].append(r["value"])
    return out


def _mean(vals):
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


def phase_table(rows: list[dict]) -> list[dict]:
    table = []
    for (eps, n), obs in sorted(collect(rows).items()):
        r = [v for v in obs.get("spectrum.mean_r", []) if v is not None]
        sup = [v for v in obs.get("vectors.sup_norm_scaled_max", []) if v is not None]
        table.append({
            "epsilon": eps, "n": n,
            "realizations": max((len(v) for v in obs.values()), default=0),
            "mean_r": _mean(r),
            "mean_r_se": float(np.std(r, ddof=1) / np.sqrt(len(r))) if len(r) > 1 else None,
            "sup_norm_q90": float(np.quantile(sup, 0.9)) if sup else None,
            "holder_slope": _mean(obs.get("green.holder_slope", [])),
            "local_law_min_im": min(obs["green.local_law_min_im"]) if "green.local_law_min_im" in obs else None,
            "local_law_max_abs_over_log": max(obs["green.local_law_max_abs_over_log"]) if "green.local_law_max_abs_over_log" in obs else None,
            "unfolded_mean_gap": _mean(obs.get("stats.unfolded_mean_gap", [])),
            "flow_fraction_C10": _mean(obs.get("flow.fraction_C10", [])),
            "failures": sum(len(v) for k, v in obs.items() if k.endswith(".failure")),
        })
    return table


def domination_fits(rows: list[dict], quantile: float = 0.9) -> dict:
    """Per-epsilon slope of the log2 quantile of per-realization ``N |psi|_inf^2`` maxima against ``n``."""
    fits = {}
    by_eps: dict = defaultdict(dict)
    for (eps, n), obs in collect(rows).items():
        vals = [v for v in obs.get("vectors.sup_norm_scaled_max", []) if v is not None]
        if vals:
            by_eps[eps][n] = np.asarray(vals)
    for eps, samples in sorted(by_eps.items()):
        try:
            fits[eps] = domination_exponent(samples, quantile).slope
        except InsufficientDataError:
            fits[eps] = None
    return fits


def summarize(output_dir: str | Path) -> dict:
    """Write ``phase.csv`` and ``summary.json`` into ``output_dir`` and return the summary."""
    out = Path(output_dir)
    rows = load_rows(out)
    if not rows:
        raise EmptyResultsError(f"{out} contains no result rows")
    manifest = load_manifest(out)
    table = phase_table(rows)
    with open(out / "phase.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=PHASE_COLUMNS)
        w.writeheader()
        for row in table:
            w.writerow({k: "" if row[k] is None else row[k] for k in PHASE_COLUMNS})
    summary = {
        "config_hash": manifest["config_hash"],
        "phase": table,
        "domination_slope": {repr(k): v for k, v in domination_fits(rows).items()},
        "failures": len(manifest["failures"]),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return summary
