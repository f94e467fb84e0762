"""Sweep execution: one independent cell per ``(epsilon, n, realization)``.

Output layout of ``output_dir``::

    rows.ndjson      one JSON object per result row, cells in grid order
    results.csv      the scalar rows, flattened
    arrays/*.npy     payloads above ``INLINE_LIMIT`` entries
    manifest.json    config, hash, code version, per-cell seeds, progress, timings

Everything except ``manifest.json`` is a pure function of the config.
"""
from __future__ import annotations

import csv
import json
import logging
import os
import struct
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import __version__
from ..ensemble import EnsembleParams, coupling_weight, sample_dbm_path, sample_direct, sample_goe, split_top_layer, substream
from ..flow import FlowDomain, FlowError, PathSpectra, coverage_constant, integrate_characteristics, invariance_event_check, measure_local_bounds, propagate_bound
from ..meanfield import ConvergenceError, FreeConvolutionInput
from ..spectral import EigensolverError, bulk_window, eig_sym, eigenvector_profiles, local_law_check, spectral_scale
from ..statistics import InsufficientDataError, bump, gap_ratios, holder_exponent, semicircle_input, two_point_statistic, unfold
from .config import ConfigError, ExperimentConfig

log = logging.getLogger(__name__)

INLINE_LIMIT = 2**14
MANIFEST_FORMAT = 1
NUMERICAL_ERRORS = (EigensolverError, ConvergenceError, FlowError, InsufficientDataError, np.linalg.LinAlgError, FloatingPointError, ValueError)

# substream keys below the per-cell seed; layers use keys (0, r) with r <= 14
_GOE_KEY = (0, 2**32 + 1)
_HOLDER_KEY = (0, 2**33)
_PATH_KEY = (0, 2**34)


class NumericalFailureError(RuntimeError):
    """More per-cell numerical failures than ``max_failures`` allows."""


@dataclass(frozen=True)
class Cell:
    epsilon: float
    n: int
    realization: int
    seed: int

    @property
    def key(self) -> str:
        return f"eps{self.epsilon:+.6g}_n{self.n}_r{self.realization}"


def cell_seed(master_seed: int, epsilon: float, n: int, realization: int) -> int:
    """64-bit seed keyed by the exact bits of ``epsilon``, ``n`` and the realization index."""
    (eps_bits,) = struct.unpack("<Q", struct.pack("<d", float(epsilon)))
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(eps_bits, int(n), int(realization)))
    return int(ss.generate_state(1, np.uint64)[0])


def plan_cells(config: ExperimentConfig) -> list[Cell]:
    return [
        Cell(float(e), int(n), r, cell_seed(config.master_seed, e, n, r))
        for e in config.epsilons for n in config.levels for r in range(config.realizations)
    ]


@dataclass
class CellResult:
    cell: Cell
    rows: list[tuple[str, object]] = field(default_factory=list)  # (observable, payload)
    failures: list[dict] = field(default_factory=list)
    wall_time: float = 0.0


def flow_time(config: ExperimentConfig, epsilon: float, n: int) -> float:
    """``t_n`` for the ultrametric ensemble, ``N**-1/2`` for GOE, or the configured number."""
    if config.flow_time != "top_layer":
        return float(config.flow_time)
    return coupling_weight(n, epsilon) if config.ensemble == "ultrametric" else 2.0 ** (-n / 2)


def _sample(config: ExperimentConfig, cell: Cell, split: bool):
    """Return ``(H, base, t_top)``; ``base`` is ``None`` unless ``split``."""
    dim = 2**cell.n
    if config.ensemble == "goe":
        H = sample_goe(dim, substream(cell.seed, *_GOE_KEY))
        return H, (H if split else None), None
    params = EnsembleParams(cell.epsilon, cell.n, config.normalization, seed=cell.seed)
    if split:
        base, top = split_top_layer(params)
        return base + top, base, coupling_weight(cell.n, cell.epsilon)
    return sample_direct(params), None, None


def _holder_rows(config, cell, dec, window, eta_n):
    rng = substream(cell.seed, *_HOLDER_KEY)
    inside = np.flatnonzero(window.contains(dec.eigenvalues))
    if len(inside) == 0:
        raise InsufficientDataError("no eigenvalues in the bulk window")
    pick = np.sort(rng.choice(inside, size=min(config.holder_energies, len(inside)), replace=False))
    E = dec.eigenvalues[pick]
    vecs = dec.require_vectors()
    sites = np.abs(vecs[:, pick]).argmax(axis=0)
    etas = np.geomspace(eta_n, max(config.holder_eta_max, eta_n * 1.01), config.holder_eta_points)
    W = vecs[sites, :] ** 2  # (energies, eigenvalues): |psi_j(x_k)|^2
    d = dec.eigenvalues[None, :] - E[:, None]
    G = np.stack([(W * (eta / (d * d + eta * eta))).sum(axis=1) for eta in etas])  # Im G(x_k, E_k + i eta)
    rows = [("green.holder_energies", E), ("green.holder_sites", sites + 1), ("green.holder_etas", etas), ("green.holder_im_green", G)]
    try:
        slope = holder_exponent(etas, G, min_decades=config.holder_min_decades).slope
    except InsufficientDataError:
        slope = None
    rows.append(("green.holder_slope", slope))
    return rows


def _flow_rows(config, cell, base, dim, window_q):
    T = flow_time(config, cell.epsilon, cell.n)
    times = np.linspace(0.0, T, config.flow_path_intervals + 1)
    path = sample_dbm_path(dim, times, substream(cell.seed, *_PATH_KEY))
    base_eigs = eig_sym(base).eigenvalues
    fine = FlowDomain.at_scale(dim, bulk_window(base_eigs, window_q), config.alpha, eta_high=9.0)
    coarse = FlowDomain.at_scale(dim, bulk_window(base_eigs, window_q / 2), config.alpha_tilde, eta_high=10.0)
    K_l, K_u = measure_local_bounds(base_eigs, coarse, fine)
    spectra = PathSpectra.compute(base, path)
    side = max(1, int(round(np.sqrt(config.flow_grid_points))))
    z = fine.grid(side, side)
    trajs = integrate_characteristics(spectra, z, fine.eta_low, max(K_l, 1e-12))
    scaled = np.array([tr.residual * np.sqrt(dim * fine.eta_low) for tr in trajs])
    agree = [
        (a.stopped_at is None) == (b is None) and (a.stopped_at is None or abs(a.stopped_at - b) <= 1)
        for a, b in ((tr, tr.integral_stopped_at) for tr in trajs)
    ]
    rep = propagate_bound(base, path, coarse, fine, T, K_l, K_u, spectra=spectra, n_E=15, n_eta=9, enforce=False)
    return [
        ("flow.T", T),
        ("flow.eta", fine.eta_low),
        ("flow.coarse_eta", coarse.eta_low),
        ("flow.K_l", K_l),
        ("flow.K_u", K_u),
        ("flow.residual_scaled", scaled),
        ("flow.fraction_C10", invariance_event_check(trajs, 10.0)),
        ("flow.coverage_C95", coverage_constant(trajs, 0.95)),
        ("flow.stopped_fraction", float(np.mean([tr.stopped_at is not None for tr in trajs]))),
        ("flow.stop_agreement", float(np.mean(agree))),
        ("flow.reachability", rep.reachability),
        ("flow.min_im_S_T", rep.min_im_S_T),
        ("flow.round_trip_error", rep.round_trip_error),
        ("flow.compatibility_violations", list(rep.violations)),
    ]


def _stats_rows(config, cell, eigs, base, t_top, window, eta_n, dim):
    if config.ensemble == "goe":
        inp = semicircle_input()
    else:
        inp = FreeConvolutionInput(eig_sym(base).eigenvalues, t_top)
    unfolded = unfold(eigs, inp, window, eta_limit=eta_n, N=dim)
    pair = two_point_statistic(unfolded, lambda x: bump(x, 0.5), config.pair_scales, support=0.5)
    return [
        ("stats.unfolded_mean_gap", unfolded.mean_gap),
        ("stats.spacings", unfolded.spacings),
        ("stats.pair_scales", np.asarray(config.pair_scales, float)),
        ("stats.pair_statistic", pair),
    ]


def run_cell(config: ExperimentConfig, cell: Cell) -> CellResult:
    """Sample one matrix and evaluate every requested observable; failures are recorded per observable."""
    t0 = time.perf_counter()
    res = CellResult(cell)
    obs = set(config.observables)
    dim = 2**cell.n
    eta_n = spectral_scale(dim, config.alpha)

    def guarded(name, fn):
        try:
            res.rows.extend(fn())
        except NUMERICAL_ERRORS as exc:
            log.warning("cell %s observable %s failed: %s", cell.key, name, exc)
            res.failures.append({"cell": cell.key, "observable": name, "error": f"{type(exc).__name__}: {exc}"})
            res.rows.append((f"{name}.failure", f"{type(exc).__name__}: {exc}"))

    state = {}

    def decompose():
        H, base, t_top = _sample(config, cell, split=bool({"flow", "stats"} & obs))
        dec = eig_sym(H, want_vectors=bool({"vectors", "green"} & obs))
        state.update(dec=dec, base=base, t_top=t_top, window=bulk_window(dec.eigenvalues, config.window_quantile))
        return []

    guarded("decomposition", decompose)
    if "dec" not in state:
        res.wall_time = time.perf_counter() - t0
        return res
    dec, window = state["dec"], state["window"]
    eigs = dec.eigenvalues

    if "spectrum" in obs:
        def spectrum():
            gr = gap_ratios(eigs, window)
            return [
                ("spectrum.eigenvalues", eigs),
                ("spectrum.window", [window.lo, window.hi]),
                ("spectrum.mean_r", gr.mean),
                ("spectrum.degenerate_gaps", gr.degenerate),
            ]
        guarded("spectrum", spectrum)
    if "vectors" in obs:
        def vectors():
            prof = eigenvector_profiles(dec, window)
            scaled = dim * prof.sup_norm**2
            return [
                ("vectors.sup_norm_scaled", scaled),
                ("vectors.sup_norm_scaled_max", float(scaled.max()) if len(scaled) else None),
                ("vectors.ipr_mean", float(prof.ipr.mean()) if len(scaled) else None),
            ]
        guarded("vectors", vectors)
    if "green" in obs:
        def green():
            rep = local_law_check(eigs, window, config.alpha, K_l=0.0, K_u=np.inf)
            rows = [("green.local_law_min_im", rep.min_im), ("green.local_law_max_abs_over_log", rep.max_abs_over_log)]
            return rows + _holder_rows(config, cell, dec, window, eta_n)
        guarded("green", green)
    if "stats" in obs:
        guarded("stats", lambda: _stats_rows(config, cell, eigs, state["base"], state["t_top"], window, eta_n, dim))
    if "flow" in obs:
        guarded("flow", lambda: _flow_rows(config, cell, state["base"], dim, config.window_quantile))
    res.wall_time = time.perf_counter() - t0
    return res


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if np.isfinite(v) else None
    return v


class _Appender:
    """Single writer for rows and array payloads."""

    def __init__(self, out: Path, experiment: str):
        self.out = out
        self.experiment = experiment
        (out / "arrays").mkdir(parents=True, exist_ok=True)

    def write(self, res: CellResult) -> int:
        cell = res.cell
        lines = []
        for name, payload in res.rows:
            value = payload
            if isinstance(payload, np.ndarray) and payload.size > INLINE_LIMIT:
                rel = f"arrays/{cell.key}_{name}.npy"
                np.save(self.out / rel, payload)
                value = {"npy": rel, "shape": list(payload.shape)}
            row = {
                "experiment": self.experiment, "epsilon": cell.epsilon, "n": cell.n, "seed": cell.seed,
                "realization": cell.realization, "observable": name, "value": _jsonable(value),
            }
            lines.append(json.dumps(row, sort_keys=True))
        with open(self.out / "rows.ndjson", "a", encoding="utf-8") as fh:
            fh.write("".join(line + "\n" for line in lines))
            fh.flush()
            os.fsync(fh.fileno())
            return fh.tell()


def _write_json_atomic(path: Path, data: dict) -> None:
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(data, indent=1, sort_keys=True))
    os.replace(tmp, path)


def _worker_cap(config: ExperimentConfig) -> int:
    dim = 2 ** max(config.levels)
    copies = 4 if {"vectors", "green"} & set(config.observables) else 3
    per_cell = dim * dim * 8 * copies
    return max(1, min(config.workers, int(config.memory_budget_gb * 2**30 // per_cell)))


def _run_one(args):
    config, cell = args
    return run_cell(config, cell)


def run(config: ExperimentConfig, output_dir: str | Path | None = None) -> Path:
    """Run (or resume) the sweep described by ``config`` and return the output directory.

    Raises
    ------
    ConfigError
        Invalid config, or the output directory holds a different experiment.
    NumericalFailureError
        When more than ``config.max_failures`` observables failed.
    """
    config.validate()
    out = Path(output_dir if output_dir is not None else config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    digest = config.config_hash()
    cells = plan_cells(config)
    manifest_path = out / "manifest.json"
    rows_path = out / "rows.ndjson"
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
        if manifest.get("config_hash") != digest:
            raise ConfigError([f"{out} holds results of a different configuration ({manifest.get('config_hash', '?')[:12]})"])
        offset = max((c["offset"] for c in manifest["completed"].values()), default=0)
        with open(rows_path, "a+b") as fh:
            fh.truncate(offset)
        log.info("resuming %s: %d of %d cells done", out, len(manifest["completed"]), len(cells))
    else:
        manifest = {
            "format": MANIFEST_FORMAT, "config": config.to_dict(), "config_hash": digest,
            "code_version": __version__, "numpy": np.__version__, "created": time.time(),
            "cells": {c.key: {"epsilon": c.epsilon, "n": c.n, "realization": c.realization, "seed": c.seed} for c in cells},
            "completed": {}, "failures": [],
        }
        rows_path.write_bytes(b"")
        _write_json_atomic(manifest_path, manifest)
    pending = [c for c in cells if c.key not in manifest["completed"]]
    appender = _Appender(out, digest[:12])

    def record(res: CellResult):
        offset = appender.write(res)
        manifest["completed"][res.cell.key] = {"offset": offset, "wall_time": res.wall_time, "failures": len(res.failures)}
        manifest["failures"].extend(res.failures)
        manifest["updated"] = time.time()
        _write_json_atomic(manifest_path, manifest)
        log.info("cell %s done in %.1fs", res.cell.key, res.wall_time)

    workers = _worker_cap(config)
    if workers == 1 or len(pending) <= 1:
        for c in pending:
            record(run_cell(config, c))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            # map yields in submission order, so file contents do not depend on scheduling
            for res in pool.map(_run_one, [(config, c) for c in pending]):
                record(res)
    export_csv(out)
    if len(manifest["failures"]) > config.max_failures:
        raise NumericalFailureError(f"{len(manifest['failures'])} numerical failure(s) exceed max_failures={config.max_failures}")
    return out


def load_rows(output_dir: str | Path, resolve_arrays: bool = True) -> list[dict]:
    out = Path(output_dir)
    path = out / "rows.ndjson"
    if not path.exists():
        return []
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            v = row["value"]
            if resolve_arrays and isinstance(v, dict) and "npy" in v:
                row["value"] = np.load(out / v["npy"])
            rows.append(row)
    return rows


def export_csv(output_dir: str | Path) -> Path:
    """Flatten the scalar rows into ``results.csv``."""
    out = Path(output_dir)
    path = out / "results.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["experiment", "epsilon", "n", "seed", "realization", "observable", "value"])
        for row in load_rows(out, resolve_arrays=False):
            v = row["value"]
            if isinstance(v, (int, float, str)) or v is None:
                w.writerow([row["experiment"], repr(row["epsilon"]), row["n"], row["seed"], row["realization"], row["observable"], "" if v is None else v])
    return path


def load_manifest(output_dir: str | Path) -> dict:
    path = Path(output_dir) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found")
    return json.loads(path.read_text())

