"""Command line entry point.

Exit codes: 0 success, 2 configuration error, 3 numerical failures above the
configured threshold.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..ensemble import EnsembleParams, sample_direct, sample_recursive, write_matrix
from ..spectral import EigensolverError
from ..statistics import generate_references
from .config import OBSERVABLES, ConfigError, ExperimentConfig
from .plots import PLOT_KINDS, MissingObservableError, emit_plots
from .runner import NumericalFailureError, run
from .summary import EmptyResultsError, summarize

log = logging.getLogger("ultrametric")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3

# flag name -> config field
_FLAG_FIELDS = {
    "epsilon": "epsilons",
    "n": "levels",
    "reps": "realizations",
    "alpha": "alpha",
    "alpha_tilde": "alpha_tilde",
    "seed": "master_seed",
    "out": "output_dir",
    "observables": "observables",
    "window_quantile": "window_quantile",
    "ensemble": "ensemble",
    "normalization": "normalization",
    "workers": "workers",
    "max_failures": "max_failures",
}


def _observables(text: str) -> list[str]:
    return [s.strip() for s in text.split(",") if s.strip()]


def _add_grid_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML file mirroring the flags; flags override it")
    p.add_argument("--epsilon", type=float, nargs="+", help="decay exponent(s)")
    p.add_argument("--n", type=int, nargs="+", help="level(s), N = 2**n")
    p.add_argument("--reps", type=int, help="realizations per (epsilon, n)")
    p.add_argument("--alpha", type=float, help="fine spectral scale exponent, eta = N**(alpha - 1)")
    p.add_argument("--alpha-tilde", type=float, help="coarse scale exponent for flow propagation")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--observables", type=_observables, help=f"comma separated subset of {','.join(OBSERVABLES)}")
    p.add_argument("--window-quantile", type=float, help="bulk window drops this eigenvalue fraction at each edge")
    p.add_argument("--ensemble", choices=["ultrametric", "goe"])
    p.add_argument("--normalization", choices=["raw", "mean_field"])
    p.add_argument("--workers", type=int)
    p.add_argument("--max-failures", type=int)


def build_config(args: argparse.Namespace, **defaults) -> ExperimentConfig:
    """Defaults, then the YAML file, then explicit flags."""
    data = dict(defaults)
    if getattr(args, "config", None) is not None:
        data.update(ExperimentConfig.from_yaml(args.config).to_dict())
    for flag, name in _FLAG_FIELDS.items():
        v = getattr(args, flag, None)
        if v is not None:
            data[name] = v
    return ExperimentConfig.from_dict(data).validate()


def cmd_sample(args) -> int:
    params = EnsembleParams(args.epsilon, args.n, args.normalization, seed=args.seed)
    H = sample_recursive(params, args.realization) if args.method == "recursive" else sample_direct(params, args.realization)
    write_matrix(args.out, H)
    print(f"wrote {H.shape[0]}x{H.shape[0]} matrix to {args.out}")
    return EXIT_OK


def _run_and_report(config: ExperimentConfig) -> int:
    out = run(config)
    print(json.dumps(summarize(out)["phase"], indent=1))
    return EXIT_OK


def cmd_spectrum(args) -> int:
    return _run_and_report(build_config(args, realizations=1, observables=["spectrum", "vectors", "green"]))


def cmd_flow(args) -> int:
    return _run_and_report(build_config(args, realizations=1, observables=["flow"], alpha_tilde=0.6))


def cmd_sweep(args) -> int:
    return _run_and_report(build_config(args))


def cmd_stats(args) -> int:
    summary = summarize(args.results)
    print(json.dumps({k: summary[k] for k in ("domination_slope", "failures")}, indent=1))
    print(f"phase table written to {Path(args.results) / 'phase.csv'}")
    return EXIT_OK


def cmd_refs(args) -> int:
    ref = generate_references(args.seed, sizes=args.sizes, samples=args.samples)
    ref.save(args.out)
    print(f"goe_mean_r={ref.goe_mean_r:.5f} poisson_mean_r={ref.poisson_mean_r:.5f} -> {args.out}")
    return EXIT_OK


def cmd_plot(args) -> int:
    from ..statistics import ReferenceStatistics

    refs = ReferenceStatistics.load(args.references) if args.references else None
    for kind in args.kind:
        svg, sidecar = emit_plots(args.results, kind, args.dest, refs)
        print(f"{svg} ({sidecar.name})")
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ultrametric", description="Ultrametric random matrix experiments")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample", help="dump one matrix in the binary matrix format")
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--realization", type=int, default=0)
    p.add_argument("--normalization", choices=["raw", "mean_field"], default="raw")
    p.add_argument("--method", choices=["direct", "recursive"], default="direct")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    for name, func, text in (
        ("spectrum", cmd_spectrum, "one decomposition and its observables"),
        ("flow", cmd_flow, "characteristic-flow experiments"),
        ("sweep", cmd_sweep, "grid run over epsilon, n and realizations"),
    ):
        p = sub.add_parser(name, help=text)
        _add_grid_flags(p)
        p.set_defaults(func=func)

    p = sub.add_parser("stats", help="aggregate statistics from a results directory")
    p.add_argument("results")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("refs", help="regenerate GOE and Poisson reference statistics")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sizes", type=int, nargs="+", default=[2048])
    p.add_argument("--samples", type=int, default=10)
    p.add_argument("--out", default="references.json")
    p.set_defaults(func=cmd_refs)

    p = sub.add_parser("plot", help="SVG figures with CSV sidecars")
    p.add_argument("results")
    p.add_argument("--kind", nargs="+", choices=PLOT_KINDS, default=list(PLOT_KINDS))
    p.add_argument("--dest")
    p.add_argument("--references", help="reference JSON from 'refs' for the overlays")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, EmptyResultsError, MissingObservableError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalFailureError, EigensolverError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
