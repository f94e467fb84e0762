"""Static figures with CSV sidecars holding exactly the plotted numbers."""
from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ..spectral import kolmogorov_distance, semicircle_cdf, semicircle_density  # noqa: E402
from ..statistics import POISSON_MEAN_R, ReferenceStatistics, wigner_surmise_pdf  # noqa: E402
from .runner import load_manifest, load_rows  # noqa: E402
from .summary import EmptyResultsError, phase_table  # noqa: E402

PLOT_KINDS = ("dos", "spacing", "phase", "flow", "holder")


class MissingObservableError(ValueError):
    pass


def _pooled(rows, observable):
    pooled = defaultdict(list)
    for r in rows:
        if r["observable"] == observable and r["value"] is not None:
            pooled[(r["epsilon"], r["n"])].append(np.asarray(r["value"], float))
    if not pooled:
        raise MissingObservableError(f"no '{observable}' rows in the result set")
    return dict(sorted(pooled.items()))


def _write_csv(path: Path, header, rows, provenance: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# {provenance}\n")
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _dos(rows, ax, manifest):
    data, out = _pooled(rows, "spectrum.eigenvalues"), []
    goe = manifest["config"]["ensemble"] == "goe"
    for (eps, n), arrs in data.items():
        eigs = np.concatenate(arrs)
        hist, edges = np.histogram(eigs, bins=60, density=True)
        mid = (edges[1:] + edges[:-1]) / 2
        label = "GOE" if goe else f"eps={eps:g}"
        ks = kolmogorov_distance(eigs, semicircle_cdf) if goe else float("nan")
        ax.step(mid, hist, where="mid", label=f"{label}, n={n}" + (f" (K-S {ks:.3f})" if goe else ""))
        ref = semicircle_density(mid) if goe else np.full(len(mid), np.nan)
        out += [(eps, n, m, h, s, ks) for m, h, s in zip(mid, hist, ref)]
    if goe:
        x = np.linspace(-2.2, 2.2, 400)
        ax.plot(x, semicircle_density(x), "k--", lw=1, label="semicircle")
    ax.set_xlabel("E")
    ax.set_ylabel("density")
    return ["epsilon", "n", "E", "density", "semicircle", "ks_distance"], out


def _spacing(rows, ax, references):
    data, out = _pooled(rows, "stats.spacings"), []
    bins = np.linspace(0, 4, 41)
    mid = (bins[1:] + bins[:-1]) / 2
    surmise = wigner_surmise_pdf(mid)
    ref = np.full(len(mid), np.nan)
    if references is not None:
        ref = np.diff(references.spacing_cdf(bins)) / np.diff(bins)
        ax.plot(mid, ref, "k:", lw=1, label="GOE reference")
    for (eps, n), arrs in data.items():
        s = np.concatenate(arrs)
        hist, _ = np.histogram(s / s.mean(), bins=bins, density=True)
        ax.step(mid, hist, where="mid", label=f"eps={eps:g}, n={n}")
        out += [(eps, n, m, h, w, g) for m, h, w, g in zip(mid, hist, surmise, ref)]
    ax.plot(mid, surmise, "k--", lw=1, label="Wigner surmise")
    ax.plot(mid, np.exp(-mid), "k-.", lw=1, label="Poisson")
    ax.set_xlabel("unfolded spacing s")
    ax.set_ylabel("p(s)")
    return ["epsilon", "n", "s", "density", "wigner_surmise", "goe_reference"], out


def _phase(rows, ax, references):
    table = [t for t in phase_table(rows) if t["mean_r"] is not None]
    if not table:
        raise MissingObservableError("no 'spectrum.mean_r' rows in the result set")
    by_eps = defaultdict(list)
    for t in table:
        by_eps[t["epsilon"]].append(t)
    for eps, ts in sorted(by_eps.items()):
        ax.errorbar([t["n"] for t in ts], [t["mean_r"] for t in ts], yerr=[t["mean_r_se"] or 0 for t in ts], marker="o", capsize=3, label=f"eps={eps:g}")
    goe = references.goe_mean_r if references is not None else float("nan")
    if references is not None:
        ax.axhline(goe, color="k", ls="--", lw=1, label="GOE reference")
    ax.axhline(POISSON_MEAN_R, color="k", ls="-.", lw=1, label="Poisson")
    ax.set_xlabel("n")
    ax.set_ylabel("mean gap ratio")
    return ["epsilon", "n", "mean_r", "mean_r_se", "goe_mean_r", "poisson_mean_r"], [
        (t["epsilon"], t["n"], t["mean_r"], t["mean_r_se"], goe, POISSON_MEAN_R) for t in table
    ]


def _flow(rows, ax):
    data, out = _pooled(rows, "flow.residual_scaled"), []
    for (eps, n), arrs in data.items():
        c = np.sort(np.concatenate(arrs))
        frac = np.arange(1, len(c) + 1) / len(c)
        ax.step(c, frac, where="post", label=f"eps={eps:g}, n={n}")
        out += [(eps, n, ci, fi) for ci, fi in zip(c, frac)]
    ax.axvline(10, color="k", ls="--", lw=1, label="C = 10")
    ax.axhline(0.95, color="grey", ls=":", lw=1)
    ax.set_xscale("log")
    ax.set_xlabel("residual * sqrt(N eta)")
    ax.set_ylabel("fraction of trajectories")
    return ["epsilon", "n", "scaled_residual", "cumulative_fraction"], out


def _holder(rows, ax):
    etas = _pooled(rows, "green.holder_etas")
    greens = _pooled(rows, "green.holder_im_green")
    out = []
    for key, G in greens.items():
        eps, n = key
        eta = etas[key][0]
        mu = np.mean([np.mean(2 * eta[:, None] * g, axis=1) for g in G], axis=0)
        ax.loglog(eta, mu, marker="o", label=f"eps={eps:g}, n={n}")
        out += [(eps, n, e, m) for e, m in zip(eta, mu)]
    ax.set_xlabel("eta")
    ax.set_ylabel("mean 2 eta Im G")
    return ["epsilon", "n", "eta", "mean_2eta_im_green"], out


def emit_plots(output_dir: str | Path, kind: str, dest: str | Path | None = None, references: ReferenceStatistics | None = None) -> tuple[Path, Path]:
    """Render ``kind`` from the results in ``output_dir`` as ``<kind>.svg`` plus ``<kind>.csv``.

    Raises
    ------
    EmptyResultsError
        The directory holds no rows.
    MissingObservableError
        The rows lack the observable ``kind`` needs.
    """
    if kind not in PLOT_KINDS:
        raise ValueError(f"unknown plot kind {kind!r}; choose from {PLOT_KINDS}")
    out = Path(output_dir)
    rows = load_rows(out)
    if not rows:
        raise EmptyResultsError(f"{out} contains no result rows")
    manifest = load_manifest(out)
    dest = Path(dest) if dest is not None else out / "plots"
    dest.mkdir(parents=True, exist_ok=True)
    provenance = f"config {manifest['config_hash'][:12]}, code {manifest['code_version']}"
    fig, ax = plt.subplots(figsize=(6, 4))
    try:
        if kind == "dos":
            header, data = _dos(rows, ax, manifest)
        elif kind == "spacing":
            header, data = _spacing(rows, ax, references)
        elif kind == "phase":
            header, data = _phase(rows, ax, references)
        elif kind == "flow":
            header, data = _flow(rows, ax)
        else:
            header, data = _holder(rows, ax)
        ax.set_title(kind, fontsize=10)
        ax.legend(fontsize=7)
        fig.text(0.99, 0.01, provenance, ha="right", va="bottom", fontsize=6, color="grey")
        svg = dest / f"{kind}.svg"
        fig.savefig(svg, format="svg", metadata={"Description": provenance, "Date": None})
    finally:
        plt.close(fig)
    sidecar = dest / f"{kind}.csv"
    _write_csv(sidecar, header, data, provenance)
    return svg, sidecar

