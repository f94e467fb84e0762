"""Characteristic curves of the Stieltjes transform along a matrix Brownian path.

Given a base matrix ``A`` and a path ``Phi(t)``, ``S_t`` denotes the
normalized resolvent trace of ``A + Phi(t)``.  The characteristic through
``z`` solves ``d gamma / dt = -S_t(gamma)``; ``xi_t`` is the characteristic
frozen once ``Im gamma`` reaches ``eta / 2`` (time ``tau_z``).  A second
stopping time ``tau(z) <= tau_z`` fires when ``int ds / (Im xi_s)^2`` reaches
``5 / (K_l eta)``.

``S_t`` is evaluated exactly at the path grid times (one eigendecomposition
each) and interpolated linearly in ``t`` in between.  A convex combination of
two Stieltjes transforms is again one, so the interpolated field keeps every
structural property the flow relies on.  Integration is explicit Euler with
substeps aligned to the path grid.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .ensemble import DbmPath
from .spectral import SpectralWindow, eig_sym, local_green_weights, spectral_scale, stieltjes


class FlowError(RuntimeError):
    pass


class CompatibilityError(FlowError):
    """Domains, time and bounds violate the hypotheses of bound propagation."""

    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = violations


@dataclass(frozen=True)
class FlowDomain:
    """``window + i(eta_low, eta_high)``."""

    window: SpectralWindow
    eta_low: float
    eta_high: float = 10.0
    alpha: float | None = None

    def __post_init__(self):
        if not 0 < self.eta_low < self.eta_high:
            raise ValueError("need 0 < eta_low < eta_high")

    @classmethod
    def at_scale(cls, dim: int, window: SpectralWindow, alpha: float, eta_high: float = 10.0) -> "FlowDomain":
        return cls(window, spectral_scale(dim, alpha), eta_high, alpha)

    def contains(self, z) -> np.ndarray:
        z = np.asarray(z)
        return (z.real > self.window.lo) & (z.real < self.window.hi) & (z.imag > self.eta_low) & (z.imag < self.eta_high)

    def grid(self, n_E: int, n_eta: int, inset: float = 0.0) -> np.ndarray:
        """Rectangular grid, energies linear and heights geometric; ``inset`` trims the closure."""
        lo, hi = self.window.lo + inset, self.window.hi - inset
        Es = np.linspace(lo, hi, n_E)
        etas = np.geomspace(self.eta_low * (1 + inset), self.eta_high * (1 - inset), n_eta)
        return (Es[None, :] + 1j * etas[:, None]).ravel()

    def random_points(self, count: int, rng: np.random.Generator) -> np.ndarray:
        E = rng.uniform(self.window.lo, self.window.hi, count)
        eta = np.exp(rng.uniform(np.log(self.eta_low), np.log(self.eta_high), count))
        return E + 1j * eta


class PathSpectra:
    """Eigenvalues (and optional site weights) of ``base + Phi(t_j)`` at each grid time."""

    def __init__(self, times, eigenvalues: Sequence[np.ndarray], site_weights: dict[int, list[np.ndarray]] | None = None):
        self.times = np.asarray(times, dtype=float)
        self.eigenvalues = [np.asarray(e, dtype=float) for e in eigenvalues]
        if len(self.eigenvalues) != len(self.times):
            raise ValueError("one spectrum per grid time required")
        self.site_weights = site_weights or {}

    @classmethod
    def compute(cls, base: np.ndarray, path: DbmPath, sites: Sequence[int] = ()) -> "PathSpectra":
        if path.dim != base.shape[0]:
            raise ValueError("path and base dimensions differ")
        eigs, weights = [], {x: [] for x in sites}
        H = np.array(base, dtype=float, copy=True)
        for j in range(len(path.times)):
            if j:
                H += path.increments[j - 1]
            dec = eig_sym(H, want_vectors=bool(sites))
            eigs.append(dec.eigenvalues)
            for x in sites:
                weights[x].append(dec.eigenvectors[x - 1] ** 2)
        return cls(path.times, eigs, weights)

    @classmethod
    def zero_field(cls, times) -> "PathSpectra":
        """Empty spectrum at every time: ``S_t == 0``."""
        times = np.asarray(times, dtype=float)
        return cls(times, [np.empty(0)] * len(times))

    @property
    def dim(self) -> int:
        return len(self.eigenvalues[0])

    @property
    def T(self) -> float:
        return float(self.times[-1])

    def exact(self, j: int, w) -> np.ndarray:
        return np.asarray(stieltjes(self.eigenvalues[j], w))

    def green(self, j: int, x: int, w) -> np.ndarray:
        return np.asarray(local_green_weights(self.eigenvalues[j], self.site_weights[x][j], w))

    def interpolated(self, j: int, theta: float, w) -> np.ndarray:
        """``(1 - theta) S_{t_j}(w) + theta S_{t_{j+1}}(w)``."""
        out = (1 - theta) * self.exact(j, w)
        if theta:
            out = out + theta * self.exact(j + 1, w)
        return out

    def reversed(self) -> "PathSpectra":
        """Field ``t -> S_{T - t}`` on the mirrored grid."""
        times = self.T - self.times[::-1]
        weights = {x: w[::-1] for x, w in self.site_weights.items()}
        return PathSpectra(times, self.eigenvalues[::-1], weights)


@dataclass
class FlowTrajectory:
    """One stopped characteristic sampled at the path grid times."""

    z0: complex
    times: np.ndarray
    gamma: np.ndarray
    s_values: np.ndarray
    stopped_at: int | None
    integral_stopped_at: int | None
    residual: float
    stop_time: float | None = None
    integral_stop_time: float | None = None
    xi_at_integral_stop: complex | None = None
    dim: int = 0
    eta_floor: float = 0.0
    dt: float = 0.0
    blew_up: bool = False
    extras: dict = field(default_factory=dict)

    def to_rows(self):
        """Rows ``(t, Re gamma, Im gamma, Re S, Im S, stopped, integral_stopped)`` for CSV dumps."""
        rows = []
        for k, t in enumerate(self.times):
            rows.append((
                float(t), float(self.gamma[k].real), float(self.gamma[k].imag),
                float(self.s_values[k].real), float(self.s_values[k].imag),
                int(self.stopped_at is not None and k >= self.stopped_at),
                int(self.integral_stopped_at is not None and k >= self.integral_stopped_at),
            ))
        return rows


def default_step(eta_floor: float, T: float) -> float:
    """``min(eta^2 / 10, T / 1000)``."""
    return min(eta_floor**2 / 10.0, T / 1000.0) if T > 0 else eta_floor**2 / 10.0


def _substeps(times: np.ndarray, dt: float) -> list[int]:
    return [max(1, int(np.ceil(d / dt - 1e-9))) for d in np.diff(times)]


def integrate_characteristics(
    spectra: PathSpectra,
    z0,
    eta_floor: float,
    K_l: float,
    dt: float | None = None,
) -> list[FlowTrajectory]:
    """Integrate the stopped characteristics from every point of ``z0`` at once.

    Parameters
    ----------
    spectra : PathSpectra
        Field evaluator along the path.
    z0 : complex or array
        Starting points, ``Im z0 >= eta_floor``.
    eta_floor : float
        Spectral scale ``eta``: ``tau_z`` fires at ``Im gamma = eta / 2``.
    K_l : float
        Lower bound on ``Im S`` entering the integral stopping time.
    dt : float, optional
        Maximal Euler step; defaults to :func:`default_step` and must not
        exceed ``eta_floor**2 / 10``.
    """
    z0 = np.atleast_1d(np.asarray(z0, dtype=complex))
    if np.any(z0.imag < eta_floor * (1 - 1e-12)):
        raise FlowError("starting points must satisfy Im z0 >= eta_floor")
    if not K_l > 0:
        raise FlowError("K_l must be positive")
    times = spectra.times
    dt = default_step(eta_floor, spectra.T) if dt is None else dt
    if not 0 < dt <= eta_floor**2 / 10 * (1 + 1e-12):
        raise FlowError(f"step {dt:.3g} exceeds eta^2/10 = {eta_floor**2 / 10:.3g}")
    nz, nt = len(z0), len(times)
    integral_cap = 5.0 / (K_l * eta_floor)

    gamma = z0.copy()
    S0 = spectra.exact(0, z0)
    rec_gamma = np.empty((nt, nz), complex)
    rec_S = np.empty((nt, nz), complex)
    rec_gamma[0], rec_S[0] = gamma, S0
    residual = np.zeros(nz)
    running = np.ones(nz, bool)          # before tau_z
    integral_open = np.ones(nz, bool)    # before tau(z)
    stop_time = np.full(nz, np.nan)
    istop_time = np.full(nz, np.nan)
    xi_istop = np.full(nz, np.nan + 0j)
    blew = np.zeros(nz, bool)
    im_integral = np.zeros(nz)
    steps = _substeps(times, dt)

    for j, m in enumerate(steps):
        h = (times[j + 1] - times[j]) / m
        for s in range(m):
            act = np.flatnonzero(running)
            if len(act) == 0:
                break
            g = gamma[act]
            Sg = spectra.interpolated(j, s / m, g)
            new = g - h * Sg
            t_new = times[j] + (s + 1) * h
            im_old, im_new = g.imag, new.imag
            crossed = im_new <= eta_floor / 2
            frac = np.ones(len(act))
            frac[crossed] = (im_old[crossed] - eta_floor / 2) / (im_old[crossed] - im_new[crossed])
            blew[act[crossed & (im_new <= 0) & (im_old > eta_floor)]] = True
            new[crossed] = g[crossed] + frac[crossed] * (new[crossed] - g[crossed])
            # trapezoid increment of int ds / (Im xi)^2
            inc = frac * h * 0.5 * (1 / im_old**2 + 1 / new.imag**2)
            io = integral_open[act]
            fire = io & (im_integral[act] + inc >= integral_cap)
            if np.any(fire):
                need = integral_cap - im_integral[act[fire]]
                f2 = np.clip(need / inc[fire], 0, 1)
                istop_time[act[fire]] = times[j] + (s + f2 * frac[fire]) * h
                xi_istop[act[fire]] = g[fire] + f2 * (new[fire] - g[fire])
                integral_open[act[fire]] = False
            im_integral[act] += inc
            gamma[act] = new
            if np.any(crossed):
                hit = act[crossed]
                t_hit = times[j] + (s + frac[crossed]) * h
                stop_time[hit] = t_hit
                # value at the stopping time itself belongs to sup_{t <= tau_z}
                theta_hit = (s + frac[crossed]) / m
                S_hit = (1 - theta_hit) * spectra.exact(j, new[crossed]) + theta_hit * spectra.exact(j + 1, new[crossed])
                residual[hit] = np.maximum(residual[hit], np.abs(S_hit - S0[hit]))
                open_hit = integral_open[hit]
                istop_time[hit[open_hit]] = t_hit[open_hit]
                xi_istop[hit[open_hit]] = new[crossed][open_hit]
                integral_open[hit] = False
                running[hit] = False
        rec_gamma[j + 1] = gamma
        rec_S[j + 1] = spectra.exact(j + 1, gamma)
        live = running
        residual[live] = np.maximum(residual[live], np.abs(rec_S[j + 1][live] - S0[live]))

    def first_index(tstop):
        return None if np.isnan(tstop) else int(np.searchsorted(times, tstop - 1e-15))

    out = []
    for i in range(nz):
        out.append(FlowTrajectory(
            z0=complex(z0[i]), times=times, gamma=rec_gamma[:, i].copy(), s_values=rec_S[:, i].copy(),
            stopped_at=first_index(stop_time[i]), integral_stopped_at=first_index(istop_time[i]),
            residual=float(residual[i]),
            stop_time=None if np.isnan(stop_time[i]) else float(stop_time[i]),
            integral_stop_time=None if np.isnan(istop_time[i]) else float(istop_time[i]),
            xi_at_integral_stop=None if np.isnan(xi_istop[i].real) else complex(xi_istop[i]),
            dim=spectra.dim, eta_floor=eta_floor, dt=dt, blew_up=bool(blew[i]),
            extras={"im_integral": float(im_integral[i])},
        ))
    return out


def integrate_characteristic(
    base: np.ndarray,
    path: DbmPath,
    z0: complex,
    eta_floor: float,
    K_l: float,
    dt: float | None = None,
    spectra: PathSpectra | None = None,
) -> FlowTrajectory:
    """Single stopped characteristic through ``z0`` for ``base + Phi(t)``."""
    spectra = spectra if spectra is not None else PathSpectra.compute(base, path)
    return integrate_characteristics(spectra, [z0], eta_floor, K_l, dt)[0]


def integrate_reverse(spectra: PathSpectra, w, dt: float) -> np.ndarray:
    """Endpoint ``lambda(T, w)`` of ``d lambda / dt = S_{T - t}(lambda)``."""
    rev = spectra.reversed()
    lam = np.atleast_1d(np.asarray(w, dtype=complex)).copy()
    for j, m in enumerate(_substeps(rev.times, dt)):
        h = (rev.times[j + 1] - rev.times[j]) / m
        for s in range(m):
            lam = lam + h * rev.interpolated(j, s / m, lam)
    if np.any(~np.isfinite(lam)) or np.any(lam.imag <= 0):
        raise FlowError("reverse flow left the upper half-plane")
    return lam


def lipschitz_check(traj1: FlowTrajectory, traj2: FlowTrajectory) -> float:
    """``max_t (|gamma_1 - gamma_2| - bound)`` over grid times before either stop.

    The bound is ``sqrt(Im z1 Im z2 / (Im gamma_1 Im gamma_2)) |z1 - z2|``.
    """
    if len(traj1.times) != len(traj2.times) or not np.array_equal(traj1.times, traj2.times):
        raise FlowError("trajectories live on different time grids")
    last = len(traj1.times)
    for tr in (traj1, traj2):
        if tr.stopped_at is not None:
            last = min(last, tr.stopped_at)
    if last == 0:
        return -np.inf
    g1, g2 = traj1.gamma[:last], traj2.gamma[:last]
    bound = np.sqrt(traj1.z0.imag * traj2.z0.imag / (g1.imag * g2.imag)) * abs(traj1.z0 - traj2.z0)
    return float(np.max(np.abs(g1 - g2) - bound))


def invariance_event_check(trajectories: Sequence[FlowTrajectory], C: float) -> float:
    """Fraction of trajectories with residual at most ``C / sqrt(N eta)``."""
    if not trajectories:
        raise ValueError("no trajectories given")
    res = np.array([tr.residual for tr in trajectories])
    scale = np.array([np.sqrt(max(tr.dim, 1) * tr.eta_floor) for tr in trajectories])
    return float(np.mean(res <= C / scale))


def coverage_constant(trajectories: Sequence[FlowTrajectory], coverage: float = 0.95) -> float:
    """Smallest ``C`` for which :func:`invariance_event_check` reaches ``coverage``."""
    c = np.array([tr.residual * np.sqrt(max(tr.dim, 1) * tr.eta_floor) for tr in trajectories])
    return float(np.quantile(c, coverage, method="higher"))


def measure_local_bounds(eigs: np.ndarray, coarse: FlowDomain, fine: FlowDomain, n_E: int = 64, n_eta: int = 24) -> tuple[float, float]:
    """``K_l = inf Im S`` over the coarse domain and ``K_u = sup |S| / log N`` over the fine one."""
    dim = len(eigs)
    K_l = float(np.min(np.asarray(stieltjes(eigs, coarse.grid(n_E, n_eta))).imag))
    K_u = float(np.max(np.abs(stieltjes(eigs, fine.grid(n_E, n_eta)))) / np.log(dim))
    return K_l, K_u


def compatibility_violations(dim: int, coarse: FlowDomain, fine: FlowDomain, T: float, K_l: float, K_u: float) -> list[str]:
    out = []
    if not T * K_l > 2 * coarse.eta_low:
        out.append(f"T*K_l = {T * K_l:.4g} does not exceed 2*coarse.eta_low = {2 * coarse.eta_low:.4g}")
    drift = 2 * K_u * T * np.log(dim)
    margin = min(fine.window.lo - coarse.window.lo, coarse.window.hi - fine.window.hi, coarse.eta_high - fine.eta_high)
    if not drift <= margin:
        out.append(f"2*K_u*T*log N = {drift:.4g} exceeds the domain margin {margin:.4g}")
    return out


@dataclass(frozen=True)
class PropagationReport:
    reachability: float
    min_im_S_T: float
    K_l: float
    K_u: float
    round_trip_error: float
    forward_stopped_fraction: float
    violations: tuple[str, ...]
    n_points: int


def propagate_bound(
    base: np.ndarray,
    path: DbmPath,
    coarse: FlowDomain,
    fine: FlowDomain,
    T: float,
    K_l: float,
    K_u: float,
    spectra: PathSpectra | None = None,
    n_E: int = 41,
    n_eta: int = 25,
    dt: float | None = None,
    enforce: bool = True,
) -> PropagationReport:
    """Pull the fine grid back through the time-reversed flow and test where it lands.

    Reports the fraction of fine-grid points ``z`` whose preimage
    ``w = lambda(T, z)`` lies in the coarse domain, the round-trip error
    ``|xi_T(w) - z|``, the fraction of those forward characteristics stopped
    before ``T``, and ``min Im S_T`` over the fine grid.

    With ``enforce`` the compatibility conditions ``T K_l > 2 coarse.eta_low``
    and ``2 K_u T log N <= margins`` are checked first and a violation raises
    :class:`CompatibilityError`; otherwise violations are only reported.
    """
    if not np.isclose(path.times[-1], T, rtol=1e-12, atol=0):
        raise FlowError("path must end at T")
    dim = base.shape[0]
    violations = compatibility_violations(dim, coarse, fine, T, K_l, K_u)
    if violations and enforce:
        raise CompatibilityError(violations)
    spectra = spectra if spectra is not None else PathSpectra.compute(base, path)
    z = fine.grid(n_E, n_eta)
    S_T = np.asarray(stieltjes(spectra.eigenvalues[-1], z))
    if T == 0:
        w = z.copy()
        round_trip, stopped = 0.0, 0.0
    else:
        dt = default_step(fine.eta_low, T) if dt is None else dt
        w = integrate_reverse(spectra, z, dt)
        ok = coarse.contains(w)
        round_trip, stopped = 0.0, 0.0
        if np.any(ok):
            fwd = integrate_characteristics(spectra, w[ok], fine.eta_low, K_l=max(K_l, 1e-12), dt=dt)
            ends = np.array([tr.gamma[-1] for tr in fwd])
            round_trip = float(np.max(np.abs(ends - z[ok])))
            stopped = float(np.mean([tr.stopped_at is not None for tr in fwd]))
    return PropagationReport(
        reachability=float(np.mean(coarse.contains(w))),
        min_im_S_T=float(S_T.imag.min()),
        K_l=K_l,
        K_u=K_u,
        round_trip_error=round_trip,
        forward_stopped_fraction=stopped,
        violations=tuple(violations),
        n_points=len(z),
    )


@dataclass(frozen=True)
class GreenMomentReport:
    times: np.ndarray
    ratio: np.ndarray        # (times, z): E|Im G_{t^tau}(x, xi)|^q / |Im G_0(x, z)|^q
    max_ratio: np.ndarray    # max over z, per time
    q: int
    fitted_c: float
    dim: int
    eta: float

    def envelope(self, c: float) -> float:
        """``(1 - c q / sqrt(N eta))^{-q}``; infinite when the base is non-positive."""
        b = 1 - c * self.q / np.sqrt(self.dim * self.eta)
        return float(b ** -self.q) if b > 0 else np.inf


def _stopped_green(spectra: PathSpectra, tr: FlowTrajectory, x: int) -> np.ndarray:
    """``Im G_{t ^ tau(z)}(x, xi_{t ^ tau(z)})`` at the grid times."""
    out = np.empty(len(tr.times))
    for j, t in enumerate(tr.times):
        if tr.integral_stop_time is not None and t >= tr.integral_stop_time:
            ts = tr.integral_stop_time
            k = min(int(np.searchsorted(spectra.times, ts, side="right")) - 1, len(spectra.times) - 2)
            th = (ts - spectra.times[k]) / (spectra.times[k + 1] - spectra.times[k])
            w = tr.xi_at_integral_stop
            g = (1 - th) * spectra.green(k, x, w) + th * spectra.green(k + 1, x, w)
        else:
            g = spectra.green(j, x, tr.gamma[j])
        out[j] = np.imag(g)
    return out


def green_moment_check(
    base: np.ndarray,
    paths: Sequence[DbmPath],
    x: int,
    z_grid,
    q: int,
    K_l: float,
    eta_floor: float,
    dt: float | None = None,
) -> GreenMomentReport:
    """Monte Carlo moment ratio of the stopped diagonal Green function along characteristics."""
    if not 2 <= q <= 32:
        raise ValueError("q must lie in [2, 32]")
    if not paths:
        raise ValueError("at least one path is required")
    z_grid = np.atleast_1d(np.asarray(z_grid, dtype=complex))
    acc = None
    g0 = None
    for path in paths:
        spectra = PathSpectra.compute(base, path, sites=(x,))
        trajs = integrate_characteristics(spectra, z_grid, eta_floor, K_l, dt)
        vals = np.stack([_stopped_green(spectra, tr, x) for tr in trajs], axis=1)
        if g0 is None:
            g0 = vals[0]
        term = np.abs(vals) ** q
        acc = term if acc is None else acc + term
    ratio = acc / len(paths) / np.abs(g0) ** q
    dim = base.shape[0]
    # smallest c with ratio <= (1 - c q / sqrt(N eta))^{-q}
    excess = np.clip(1 - ratio ** (-1.0 / q), 0, None)
    fitted = float(excess.max() * np.sqrt(dim * eta_floor) / q)
    return GreenMomentReport(paths[0].times, ratio, ratio.max(axis=1), q, fitted, dim, eta_floor)
