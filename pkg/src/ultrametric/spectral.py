"""Eigendecomposition and resolvent observables.

All resolvent quantities are evaluated from an eigendecomposition, which
amortizes the cubic eigensolve over many spectral parameters.  Spectral
parameters are plain complex numbers (or arrays of them) with strictly
positive imaginary part; site labels are 1-based.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

# complex entries per chunk when forming (z, lambda) kernels
_CHUNK = 2**22


class EigensolverError(RuntimeError):
    """The dense eigensolver failed or returned a decomposition outside tolerance."""


@dataclass(frozen=True)
class SpectralDecomposition:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return len(self.eigenvalues)

    def require_vectors(self) -> np.ndarray:
        if self.eigenvectors is None:
            raise ValueError("decomposition was computed without eigenvectors")
        return self.eigenvectors


@dataclass(frozen=True)
class SpectralWindow:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"empty window ({self.lo}, {self.hi})")

    def contains(self, x):
        x = np.asarray(x)
        return (x >= self.lo) & (x <= self.hi)

    @property
    def width(self) -> float:
        return self.hi - self.lo


def _diagnostics(H: np.ndarray) -> str:
    finite = bool(np.all(np.isfinite(H)))
    norm = float(np.linalg.norm(H)) if finite else float("nan")
    sym = float(np.max(np.abs(H - H.T))) if finite else float("nan")
    return f"dim={H.shape[0]}, finite={finite}, frobenius={norm:.6g}, asymmetry={sym:.3g}"


def eig_sym(H: np.ndarray, want_vectors: bool = False, check_columns: int = 8) -> SpectralDecomposition:
    """Full dense eigendecomposition of a real symmetric matrix.

    Residuals ``|H v - lambda v|`` and orthonormality are verified on
    ``check_columns`` evenly spaced eigenpairs (all of them when the matrix is
    small) against the tolerance ``1e-10 * dim * (|H| + 1)``.
    """
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise ValueError("expected a square matrix")
    dim = H.shape[0]
    if not np.all(np.isfinite(H)):
        raise ValueError(f"matrix has non-finite entries ({_diagnostics(H)})")
    scale = np.max(np.abs(H)) if dim else 0.0
    if np.max(np.abs(H - H.T), initial=0.0) > 1e-12 * (scale + 1.0):
        raise ValueError(f"matrix is not symmetric ({_diagnostics(H)})")
    try:
        if want_vectors:
            vals, vecs = np.linalg.eigh(H)
        else:
            vals, vecs = np.linalg.eigvalsh(H), None
    except np.linalg.LinAlgError as exc:
        raise EigensolverError(f"eigensolver did not converge ({_diagnostics(H)})") from exc
    if not np.all(np.isfinite(vals)):
        raise EigensolverError(f"non-finite eigenvalues ({_diagnostics(H)})")
    if vecs is not None and dim:
        cols = np.arange(dim) if dim <= 64 else np.unique(np.linspace(0, dim - 1, check_columns).astype(int))
        tol = 1e-10 * dim * (np.max(np.abs(vals)) + 1.0)
        v = vecs[:, cols]
        resid = np.linalg.norm(H @ v - v * vals[cols], axis=0).max()
        gram = np.abs(v.T @ v - np.eye(len(cols))).max()
        if resid > tol or gram > 1e-10 * dim:
            raise EigensolverError(f"residual {resid:.3g} / orthonormality {gram:.3g} over tolerance ({_diagnostics(H)})")
    return SpectralDecomposition(vals, vecs)


def _eigs(spec) -> np.ndarray:
    return spec.eigenvalues if isinstance(spec, SpectralDecomposition) else np.asarray(spec, dtype=float)


def _check_z(z) -> np.ndarray:
    z = np.asarray(z, dtype=complex)
    if np.any(~(z.imag > 0)):
        raise ValueError("spectral parameters need a strictly positive imaginary part")
    return z


def _weighted_resolvent_sum(eigs: np.ndarray, weights: np.ndarray | None, z: np.ndarray) -> np.ndarray:
    flat = z.ravel()
    out = np.empty(flat.shape, dtype=complex)
    step = max(1, _CHUNK // max(1, len(eigs)))
    for i in range(0, len(flat), step):
        kern = 1.0 / (eigs[None, :] - flat[i : i + step, None])
        out[i : i + step] = kern.mean(axis=1) if weights is None else kern @ weights
    return out.reshape(z.shape)


def stieltjes(spec, z):
    """Normalized trace of the resolvent, ``(1/N) sum_k 1/(lambda_k - z)``.

    ``spec`` is a :class:`SpectralDecomposition` or a plain eigenvalue array;
    ``z`` a complex scalar or array in the upper half-plane.
    """
    z = _check_z(z)
    eigs = _eigs(spec)
    if len(eigs) == 0:
        return np.zeros(z.shape, dtype=complex)[()]
    return _weighted_resolvent_sum(eigs, None, z)[()]


def local_green(dec: SpectralDecomposition, x: int, z):
    """Diagonal resolvent entry ``<delta_x, (H - z)^-1 delta_x>`` at 1-based site ``x``."""
    vecs = dec.require_vectors()
    if not 1 <= x <= dec.dim:
        raise ValueError(f"site {x} outside 1..{dec.dim}")
    z = _check_z(z)
    return _weighted_resolvent_sum(dec.eigenvalues, vecs[x - 1] ** 2, z)[()]


def local_green_weights(eigs: np.ndarray, weights: np.ndarray, z):
    """``sum_k w_k / (lambda_k - z)`` for spectral weights ``w_k = |psi_k(x)|^2``."""
    return _weighted_resolvent_sum(np.asarray(eigs, float), np.asarray(weights, float), _check_z(z))[()]


def dos_estimate(spec, E, eta: float):
    """Cauchy-smoothed density of states ``Im S(E + i eta) / pi``."""
    if not eta > 0:
        raise ValueError("eta must be positive")
    E = np.asarray(E, dtype=float)
    return (stieltjes(spec, E + 1j * eta).imag / np.pi)[()]


def bulk_window(spec, q: float = 0.25) -> SpectralWindow:
    """Window between the ``q`` and ``1 - q`` eigenvalue quantiles.

    Convention: with ``m = floor(q N)`` (0-based, ascending order) the window
    is ``[lambda_m, lambda_{N-1-m}]``.  For ``(1, 2, 3, 4)`` and ``q = 0.25``
    this gives ``(2, 3)``.
    """
    if not 0 < q < 0.5:
        raise ValueError("q must lie in (0, 0.5)")
    eigs = np.sort(_eigs(spec))
    if len(eigs) < 4:
        raise ValueError("bulk window needs at least 4 eigenvalues")
    m = int(np.floor(q * len(eigs)))
    return SpectralWindow(float(eigs[m]), float(eigs[len(eigs) - 1 - m]))


@dataclass(frozen=True)
class EigenvectorProfiles:
    """Localization measures of the eigenvectors with eigenvalues in a window."""

    eigenvalues: np.ndarray
    sup_norm: np.ndarray
    ipr: np.ndarray
    peak_site: np.ndarray  # 1-based argmax |psi(x)|
    empty: bool = field(default=False)

    def __len__(self):
        return len(self.eigenvalues)


def eigenvector_profiles(dec: SpectralDecomposition, window: SpectralWindow) -> EigenvectorProfiles:
    vecs = dec.require_vectors()
    sel = np.flatnonzero(window.contains(dec.eigenvalues))
    if len(sel) == 0:
        log.warning("no eigenvalues inside window (%g, %g)", window.lo, window.hi)
        e = np.empty(0)
        return EigenvectorProfiles(e, e, e, np.empty(0, dtype=int), empty=True)
    v = vecs[:, sel]
    a = np.abs(v)
    sq = v * v
    return EigenvectorProfiles(
        eigenvalues=dec.eigenvalues[sel].copy(),
        sup_norm=a.max(axis=0),
        ipr=(sq * sq).sum(axis=0),
        peak_site=a.argmax(axis=0) + 1,
    )


def geometric_eta_grid(eta_low: float, eta_high: float = 10.0, ratio: float = 2**0.25) -> np.ndarray:
    """Geometric grid from ``eta_low`` up to (and including) ``eta_high``."""
    if not 0 < eta_low < eta_high:
        raise ValueError("need 0 < eta_low < eta_high")
    k = int(np.ceil(np.log(eta_high / eta_low) / np.log(ratio)))
    return np.geomspace(eta_low, eta_high, k + 1)


def spectral_scale(dim: int, alpha: float) -> float:
    """``eta = N**(-1 + alpha)``."""
    return float(dim) ** (-1.0 + alpha)


@dataclass(frozen=True)
class LocalLawReport:
    passed: bool
    min_im: float
    max_im: float
    max_abs_over_log: float
    eta_low: float
    window: SpectralWindow
    grid_shape: tuple[int, int]


def local_law_grid(window: SpectralWindow, eta_low: float, eta_high: float = 10.0):
    """Energies spaced by at most ``eta_low / 4`` and a geometric ``eta`` grid."""
    nE = int(np.ceil(window.width / (eta_low / 4))) + 1
    return np.linspace(window.lo, window.hi, nE), geometric_eta_grid(eta_low, eta_high)


def local_law_check(spec, window: SpectralWindow, alpha: float, K_l: float, K_u: float) -> LocalLawReport:
    """Measure ``Im S`` and ``|S|`` over ``window + i(eta_N, 10)`` with ``eta_N = N**(-1 + alpha)``.

    Passes when ``K_l <= Im S <= K_u`` and ``|S| / log N <= K_u`` on the whole
    grid (and ``|S| > K_l``).
    """
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    eigs = _eigs(spec)
    dim = len(eigs)
    eta_low = spectral_scale(dim, alpha)
    Es, etas = local_law_grid(window, eta_low)
    S = stieltjes(eigs, Es[None, :] + 1j * etas[:, None])
    im, ab = S.imag, np.abs(S)
    logN = np.log(dim) if dim > 1 else 1.0
    passed = bool(im.min() >= K_l and im.max() <= K_u and ab.min() > K_l and ab.max() / logN <= K_u)
    return LocalLawReport(passed, float(im.min()), float(im.max()), float(ab.max() / logN), eta_low, window, S.shape)


def eigenfunction_green_gap(dec: SpectralDecomposition, window: SpectralWindow, eta: float) -> float:
    """Largest value of ``|psi_E(x)|^2 - 2 eta Im G(x, E + 2 i eta)`` over bulk eigenpairs and sites.

    Non-positive up to roundoff.
    """
    vecs = dec.require_vectors()
    sel = np.flatnonzero(window.contains(dec.eigenvalues))
    if len(sel) == 0:
        return -np.inf
    lam = dec.eigenvalues
    w = vecs * vecs  # w[x, k] = |psi_k(x)|^2
    # kernel[k, j] = (2 eta)^2 / ((lam_j - lam_k)^2 + (2 eta)^2)
    kern = (2 * eta) ** 2 / ((lam[None, :] - lam[sel, None]) ** 2 + (2 * eta) ** 2)
    bound = w @ kern.T  # (sites, selected) = 2 eta Im G(x, lam_k + 2 i eta)
    return float((w[:, sel] - bound).max())


def semicircle_density(E, radius: float = 2.0):
    E = np.asarray(E, dtype=float)
    R2 = radius * radius
    return (2.0 / (np.pi * R2) * np.sqrt(np.clip(R2 - E * E, 0.0, None)))[()]


def semicircle_cdf(E, radius: float = 2.0):
    x = np.clip(np.asarray(E, dtype=float) / radius, -1.0, 1.0)
    return (0.5 + (x * np.sqrt(1 - x * x) + np.arcsin(x)) / np.pi)[()]


def semicircle_stieltjes(z, variance: float = 1.0):
    """Stieltjes transform ``(1/N) Tr (H - z)^-1`` limit for a semicircle of radius ``2 sqrt(variance)``."""
    z = np.asarray(z, dtype=complex)
    s = np.sqrt(z * z - 4 * variance)
    # branch with Im m > 0 on the upper half-plane
    s = np.where((s.imag * z.imag) < 0, -s, s)
    return ((-z + s) / (2 * variance))[()]


def kolmogorov_distance(samples, cdf) -> float:
    x = np.sort(np.asarray(samples, dtype=float))
    n = len(x)
    F = cdf(x)
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - F), np.max(F - (i - 1) / n)))
