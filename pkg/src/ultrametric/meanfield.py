"""Self-consistent Stieltjes transform of a Gaussian-perturbed spectrum.

For a reference spectrum ``lambda_1..lambda_N`` and time ``t`` the transform
``M(z)`` solves

    M = F(M),    F(M) = (1/N) sum_k 1 / (lambda_k - z - t M),

and ``rho_fc(E) = Im M(E + i eta) / pi`` is the density used for unfolding.
The solver is a damped fixed-point iteration, vectorized over ``z``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .spectral import stieltjes, _check_z

log = logging.getLogger(__name__)

_THETA_CAP = 64.0


class ConvergenceError(RuntimeError):
    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class FreeConvolutionInput:
    """Reference spectrum (ascending) and perturbation time ``t >= 0``.

    ``weights`` optionally turns the spectrum into a weighted point mass
    approximation of a smoothed density; they must sum to one.
    """

    reference_spectrum: np.ndarray
    t: float
    weights: np.ndarray | None = None

    def __post_init__(self):
        spec = np.asarray(self.reference_spectrum, dtype=float)
        if spec.ndim != 1 or len(spec) == 0 or not np.all(np.isfinite(spec)):
            raise ValueError("reference spectrum must be a finite, non-empty 1-d array")
        if np.any(np.diff(spec) < 0):
            raise ValueError("reference spectrum must be sorted ascending")
        if not self.t >= 0:
            raise ValueError("t must be non-negative")
        object.__setattr__(self, "reference_spectrum", spec)
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if w.shape != spec.shape or np.any(w < 0) or abs(w.sum() - 1) > 1e-12:
                raise ValueError("weights must be non-negative, match the spectrum and sum to 1")
            object.__setattr__(self, "weights", w)

    @classmethod
    def from_density(cls, grid, density, t: float) -> "FreeConvolutionInput":
        """Discretize a smoothed density on an ascending grid (trapezoid weights)."""
        grid = np.asarray(grid, dtype=float)
        dens = np.clip(np.asarray(density, dtype=float), 0, None)
        dx = np.diff(grid)
        w = np.zeros_like(grid)
        w[:-1] += dens[:-1] * dx / 2
        w[1:] += dens[1:] * dx / 2
        return cls(grid, t, w / w.sum())


def _field(inp: FreeConvolutionInput, z: np.ndarray, M: np.ndarray) -> np.ndarray:
    w = z + inp.t * M
    lam = inp.reference_spectrum
    out = np.empty_like(w)
    step = max(1, 2**22 // len(lam))
    for i in range(0, len(w), step):
        kern = 1.0 / (lam[None, :] - w[i : i + step, None])
        out[i : i + step] = kern.mean(axis=1) if inp.weights is None else kern @ inp.weights
    return out


def solve_M(inp: FreeConvolutionInput, z, tol: float = 1e-12, max_iter: int = 10_000, return_residual: bool = False):
    """Solve ``M = F(M)`` at every ``z`` in the upper half-plane.

    Each sweep sets ``M <- (1 - theta) M + theta F(M)``.  ``theta`` starts at 1,
    is re-estimated per point as ``1 / (1 - F')`` from a secant estimate of the
    derivative of ``F`` (capped at modulus 64), and is halved whenever the
    residual ``|M - F(M)|`` grows.  The iteration starts from the plain
    Stieltjes transform of the reference spectrum.

    Raises
    ------
    ConvergenceError
        When some point has not reached ``tol`` after ``max_iter`` sweeps.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    z = _check_z(z)
    shape = z.shape
    zf = z.ravel()
    M = _field(FreeConvolutionInput(inp.reference_spectrum, 0.0, inp.weights), zf, np.zeros_like(zf))
    if inp.t == 0:
        res = np.zeros(zf.shape)
        return (M.reshape(shape)[()], res.reshape(shape)[()]) if return_residual else M.reshape(shape)[()]
    theta = np.ones(zf.shape, dtype=complex)
    F = _field(inp, zf, M)
    res = np.abs(M - F)
    active = np.flatnonzero(res > tol)
    for _ in range(max_iter):
        if len(active) == 0:
            break
        za, Ma, Fa, th = zf[active], M[active], F[active], theta[active]
        cand = (1 - th) * Ma + th * Fa
        bad = cand.imag <= 0
        while np.any(bad):
            th[bad] /= 2
            cand[bad] = (1 - th[bad]) * Ma[bad] + th[bad] * Fa[bad]
            bad = cand.imag <= 0
        Fc = _field(inp, za, cand)
        rc = np.abs(cand - Fc)
        # secant estimate of F'; relaxation 1/(1 - F') cancels the linear part of the error
        dM = cand - Ma
        with np.errstate(divide="ignore", invalid="ignore"):
            slope = np.where(np.abs(dM) > 0, (Fc - Fa) / dM, 0.0)
            nxt = 1.0 / (1.0 - slope)
        nxt = np.where(np.isfinite(nxt), nxt, 1.0)
        big = np.abs(nxt) > _THETA_CAP
        nxt[big] *= _THETA_CAP / np.abs(nxt[big])
        worse = rc > res[active]
        nxt[worse] = th[worse] / 2
        M[active], F[active], res[active], theta[active] = cand, Fc, rc, nxt
        active = active[rc > tol]
    else:
        if len(active):
            worst = float(res.max())
            raise ConvergenceError(f"{len(active)} point(s) not converged after {max_iter} iterations; max residual {worst:.3g}", worst)
    M = M.reshape(shape)[()]
    res = res.reshape(shape)[()]
    return (M, res) if return_residual else M


def rho_fc(inp: FreeConvolutionInput, E, eta_limit: float, tol: float = 1e-12):
    """``Im M(E + i eta_limit) / pi``."""
    if not eta_limit > 0:
        raise ValueError("eta_limit must be positive")
    E = np.asarray(E, dtype=float)
    M = solve_M(inp, E + 1j * eta_limit, tol=tol)
    return np.clip(np.asarray(M).imag / np.pi, 0.0, None)[()]


def support_hint(inp: FreeConvolutionInput) -> tuple[float, float]:
    """Interval containing essentially all of the free-convolution mass."""
    spread = 2.0 * np.sqrt(inp.t) + 1e-12
    return float(inp.reference_spectrum[0] - spread), float(inp.reference_spectrum[-1] + spread)


def quadrature_grid(inp: FreeConvolutionInput, eta_limit: float, tail: float = 1e4, points_per_eta: float = 4.0) -> np.ndarray:
    """Integration grid: uniform (spacing ``eta/points_per_eta``) over the support, geometric tails out to ``tail``."""
    lo, hi = support_hint(inp)
    lo, hi = lo - 10 * eta_limit, hi + 10 * eta_limit
    h = eta_limit / points_per_eta
    core = np.linspace(lo, hi, int(np.ceil((hi - lo) / h)) + 1)
    right = hi + np.geomspace(h, tail, 400)
    left = lo - np.geomspace(h, tail, 400)[::-1]
    return np.concatenate([left, core, right])


def stieltjes_of_reference(inp: FreeConvolutionInput, z):
    if inp.weights is None:
        return stieltjes(inp.reference_spectrum, z)
    z = _check_z(z)
    return _field(FreeConvolutionInput(inp.reference_spectrum, 0.0, inp.weights), z.ravel(), np.zeros(z.size, complex)).reshape(z.shape)[()]
