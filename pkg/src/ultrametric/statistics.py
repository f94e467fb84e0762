"""Local eigenvalue statistics and scaling-law fits."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import __version__
from .ensemble import sample_goe, substream
from .meanfield import FreeConvolutionInput, rho_fc
from .spectral import SpectralWindow, bulk_window, eig_sym

log = logging.getLogger(__name__)

POISSON_MEAN_R = 2 * np.log(2) - 1
REFERENCE_FORMAT = 1


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class GapRatios:
    values: np.ndarray
    mean: float
    degenerate: int


def gap_ratios(eigs, window: SpectralWindow | None = None) -> GapRatios:
    """Consecutive-gap ratios ``min(s_i, s_{i+1}) / max(s_i, s_{i+1})``.

    Zero gaps give ``r = 0`` and are counted in ``degenerate``.
    """
    eigs = np.sort(np.asarray(eigs, dtype=float))
    if window is not None:
        eigs = eigs[window.contains(eigs)]
    if len(eigs) < 3:
        raise InsufficientDataError("gap ratios need at least 3 eigenvalues")
    s = np.diff(eigs)
    lo, hi = np.minimum(s[:-1], s[1:]), np.maximum(s[:-1], s[1:])
    degenerate = int(np.count_nonzero(lo == 0))
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(hi > 0, lo / hi, 0.0)
    if degenerate:
        log.warning("%d degenerate gaps among %d eigenvalues", degenerate, len(eigs))
    return GapRatios(r, float(r.mean()), degenerate)


@dataclass(frozen=True)
class UnfoldedSpectrum:
    raw: np.ndarray
    unfolded: np.ndarray
    window: SpectralWindow

    @property
    def spacings(self) -> np.ndarray:
        return np.diff(self.unfolded)

    @property
    def mean_gap(self) -> float:
        return float(np.mean(self.spacings))


def unfold_with_density(eigs, window: SpectralWindow, grid, density, N: int) -> UnfoldedSpectrum:
    """``u_k = N int_lo^{lambda_k} rho`` for a density tabulated on an ascending grid covering the window."""
    grid = np.asarray(grid, float)
    density = np.asarray(density, float)
    if np.any(density <= 0):
        raise ValueError("density must be positive on the unfolding window")
    cum = np.concatenate([[0.0], np.cumsum(np.diff(grid) * (density[1:] + density[:-1]) / 2)])
    eigs = np.sort(np.asarray(eigs, float))
    raw = eigs[window.contains(eigs)]
    return UnfoldedSpectrum(raw, N * np.interp(raw, grid, cum), window)


def unfold(eigs, inp: FreeConvolutionInput, window: SpectralWindow, eta_limit: float, N: int | None = None, points_per_eta: float = 2.0) -> UnfoldedSpectrum:
    """Unfold the eigenvalues in ``window`` with the free-convolution density.

    ``N`` defaults to the size of the reference spectrum.
    """
    N = len(inp.reference_spectrum) if N is None else N
    n = max(64, int(np.ceil(window.width / eta_limit * points_per_eta)) + 1)
    grid = np.linspace(window.lo, window.hi, n)
    dens = rho_fc(inp, grid, eta_limit)
    if np.any(dens <= 0):
        raise ValueError("rho_fc vanishes inside the unfolding window")
    return unfold_with_density(eigs, window, grid, dens, N)


def semicircle_input() -> FreeConvolutionInput:
    """Free convolution of a point mass at 0 with ``t = 1``: the radius-2 semicircle."""
    return FreeConvolutionInput(np.array([0.0]), 1.0)


def bump(x, width: float = 0.5):
    """Smooth bump ``exp(1 - 1 / (1 - (x/width)^2))`` on ``|x| < width``, with peak value 1."""
    x = np.asarray(x, float) / width
    out = np.zeros_like(x)
    inside = np.abs(x) < 1
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - x[inside] ** 2))
    return out


def two_point_statistic(unfolded: UnfoldedSpectrum | np.ndarray, kernel: Callable, scales, support: float) -> np.ndarray:
    """``(1/N) sum_{i != j} O(|u_i - u_j| - s)`` for each scale ``s``.

    ``kernel`` must vanish outside ``[-support, support]``.
    """
    u = unfolded.unfolded if isinstance(unfolded, UnfoldedSpectrum) else np.sort(np.asarray(unfolded, float))
    scales = np.atleast_1d(np.asarray(scales, float))
    N = len(u)
    reach = scales.max() + support
    out = np.zeros(len(scales))
    for k in range(1, N):
        d = u[k:] - u[:-k]
        if d.min() > reach:
            break
        d = d[d <= reach]
        # each unordered pair counted for (i, j) and (j, i)
        out += 2 * kernel(d[None, :] - scales[:, None]).sum(axis=1)
    return out / N


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    intercept: float
    x: np.ndarray
    y: np.ndarray
    flagged: bool = False
    note: str = ""


def _lsq(x, y) -> tuple[float, float]:
    slope, intercept = np.polyfit(np.asarray(x, float), np.asarray(y, float), 1)
    return float(slope), float(intercept)


def domination_exponent(samples: Mapping[int, np.ndarray], quantile: float = 0.9) -> SlopeFit:
    """Slope of ``log2(quantile of N |psi|_inf^2)`` against the level ``n``.

    ``samples`` maps each level ``n`` to an array of ``N |psi|_inf^2`` values.
    """
    levels = sorted(samples)
    if len(levels) < 3:
        raise InsufficientDataError("domination exponent needs at least 3 levels")
    y = [np.log2(np.quantile(np.asarray(samples[n], float), quantile)) for n in levels]
    s, b = _lsq(levels, y)
    return SlopeFit(s, b, np.array(levels, float), np.array(y))


def fluctuation_scaling(values: Mapping[int, np.ndarray], min_samples: int = 100, label: str = "") -> SlopeFit:
    """Slope of ``log std S(z)`` against ``log N`` for realizations of ``S(z)`` at fixed ``z``.

    ``label`` names the model that produced the values (``"A+V"``, ``"full"``, ...).
    A vanishing standard deviation gives a NaN slope with ``flagged`` set.
    """
    dims = sorted(values)
    if len(dims) < 3:
        raise InsufficientDataError("fluctuation scaling needs at least 3 dimensions")
    for d in dims:
        if len(values[d]) < min_samples:
            raise InsufficientDataError(f"dimension {d}: {len(values[d])} < {min_samples} realizations")
    std = np.array([np.std(np.asarray(values[d]), ddof=1) for d in dims])
    if any(np.all(np.asarray(values[d]) == np.asarray(values[d])[0]) for d in dims):
        return SlopeFit(float("nan"), float("nan"), np.log(dims), np.full(len(dims), -np.inf), True, f"{label}: zero variance")
    s, b = _lsq(np.log(dims), np.log(std))
    return SlopeFit(s, b, np.log(np.array(dims, float)), np.log(std), note=label)


def holder_exponent(etas, green, eta_min: float | None = None, min_decades: float = 2.0) -> SlopeFit:
    """Average log-log slope of ``eta -> 2 eta Im G(E + i eta)``.

    Parameters
    ----------
    etas : array, shape (k,)
        Ascending grid of heights.
    green : array, shape (k,) or (k, m)
        ``Im G(E + i eta)`` for ``m`` energies (or energy/site pairs).
    eta_min : float, optional
        Lower end of the fit range; defaults to ``etas[0]``.
    min_decades : float
        Required span of the fit range in decades.
    """
    etas = np.asarray(etas, float)
    G = np.asarray(green, float)
    if G.ndim == 1:
        G = G[:, None]
    eta_min = etas[0] if eta_min is None else eta_min
    use = etas >= eta_min * (1 - 1e-12)
    if use.sum() < 3 or np.log10(etas[use].max() / etas[use].min()) < min_decades - 1e-9:
        raise InsufficientDataError(f"eta grid must span at least {min_decades} decades above {eta_min:.3g}")
    x = np.log(etas[use])
    y = np.log(2 * etas[use, None] * G[use])
    slopes = np.polyfit(x, y, 1)[0]
    return SlopeFit(float(np.mean(slopes)), float("nan"), x, slopes)


def wigner_surmise_pdf(s):
    s = np.asarray(s, float)
    return np.pi * s / 2 * np.exp(-np.pi * s * s / 4)


def wigner_surmise_cdf(s):
    s = np.asarray(s, float)
    return 1 - np.exp(-np.pi * s * s / 4)


@dataclass
class ReferenceStatistics:
    goe_mean_r: float
    poisson_mean_r: float
    goe_spacing_cdf: dict  # {"s": [...], "cdf": [...]}
    source: dict = field(default_factory=dict)

    def spacing_cdf(self, s):
        return np.interp(s, self.goe_spacing_cdf["s"], self.goe_spacing_cdf["cdf"], left=0.0, right=1.0)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps({"format": REFERENCE_FORMAT, **asdict(self)}, indent=1, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "ReferenceStatistics":
        data = json.loads(Path(path).read_text())
        if data.pop("format", None) != REFERENCE_FORMAT:
            raise ValueError(f"{path}: unsupported reference format")
        return cls(**data)


def goe_bulk_eigenvalues(dim: int, seed: int, index: int, q: float = 0.25) -> tuple[np.ndarray, SpectralWindow]:
    eigs = eig_sym(sample_goe(dim, substream(seed, 1, dim, index))).eigenvalues
    return eigs, bulk_window(eigs, q)


def generate_references(seed: int, sizes: Sequence[int] = (2048,), samples: int = 10, poisson_gaps: int = 10**6, q: float = 0.25) -> ReferenceStatistics:
    """Monte Carlo GOE and Poisson references with provenance.

    GOE values pool ``samples`` matrices per size, restricted to the inner
    ``1 - 2q`` eigenvalue window; spacings are unfolded with the semicircle.
    Poisson values use ``poisson_gaps`` i.i.d. exponential gaps.
    """
    ratios, spacings = [], []
    sc = semicircle_input()
    for dim in sizes:
        for i in range(samples):
            eigs, win = goe_bulk_eigenvalues(dim, seed, i, q)
            ratios.append(gap_ratios(eigs, win).values)
            # GOE with entry variance 1/dim has the radius-2 semicircle as its limit
            spacings.append(unfold(eigs, sc, win, eta_limit=1e-3, N=dim).spacings)
    r = np.concatenate(ratios)
    s = np.sort(np.concatenate(spacings))
    s = s / s.mean()
    grid = np.linspace(0, 4, 401)
    cdf = np.searchsorted(s, grid, side="right") / len(s)
    gaps = substream(seed, 2).exponential(size=poisson_gaps + 1)
    pr = np.minimum(gaps[:-1], gaps[1:]) / np.maximum(gaps[:-1], gaps[1:])
    return ReferenceStatistics(
        goe_mean_r=float(r.mean()),
        poisson_mean_r=float(pr.mean()),
        goe_spacing_cdf={"s": grid.tolist(), "cdf": cdf.tolist()},
        source={
            "seed": int(seed), "sizes": [int(d) for d in sizes], "samples": int(samples),
            "window_quantile": q, "goe_ratio_count": int(len(r)), "goe_spacing_count": int(len(s)),
            "poisson_gaps": int(poisson_gaps), "numpy": np.__version__, "package": __version__,
            "goe_mean_r_stderr": float(r.std(ddof=1) / np.sqrt(len(r))),
        },
    )
