import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import semicircle_density as sc_density
from ultrametric.ensemble import EnsembleParams, sample_direct, sample_goe, substream
from ultrametric.spectral import (
    EigensolverError, SpectralDecomposition, SpectralWindow, bulk_window, dos_estimate, eig_sym, eigenfunction_green_gap,
    eigenvector_profiles, geometric_eta_grid, kolmogorov_distance, local_green, local_law_check, semicircle_cdf,
    semicircle_stieltjes, stieltjes,
)

finite = st.floats(-10, 10, allow_nan=False)


def test_eig_diagonal():
    dec = eig_sym(np.diag([1.0, 2.0, 3.0]), want_vectors=True)
    assert np.allclose(dec.eigenvalues, [1, 2, 3])
    assert np.allclose(np.abs(dec.eigenvectors), np.eye(3))


def test_eig_two_by_two():
    assert np.allclose(eig_sym(np.array([[0.0, 1.0], [1.0, 0.0]])).eigenvalues, [-1, 1])


def test_eig_rejects_asymmetric_and_nonfinite():
    with pytest.raises((ValueError, EigensolverError)):
        eig_sym(np.array([[0.0, 1.0], [0.0, 0.0]]))
    with pytest.raises((ValueError, EigensolverError)):
        eig_sym(np.array([[np.nan]]))


def test_eig_invariants_goe():
    H = sample_goe(300, substream(0, 3))
    dec = eig_sym(H, want_vectors=True)
    V, lam = dec.eigenvectors, dec.eigenvalues
    tol = 1e-10 * 300
    assert np.all(np.diff(lam) >= 0)
    assert np.max(np.abs(H @ V - V * lam)) <= tol * (np.abs(lam).max() + 1)
    assert np.max(np.abs(V.T @ V - np.eye(300))) <= tol


def test_goe_semicircle_kolmogorov():
    eigs = eig_sym(sample_goe(512, substream(1, 0))).eigenvalues
    assert kolmogorov_distance(eigs, semicircle_cdf) < 0.05


@pytest.mark.parametrize("eigs, z, s", [([0.0], 1j, 1j), ([-1.0, 1.0], 1j, 0.5j)])
def test_stieltjes_examples(eigs, z, s):
    assert stieltjes(np.array(eigs), z) == pytest.approx(s, abs=1e-15)


def test_stieltjes_rejects_real_axis():
    with pytest.raises(ValueError):
        stieltjes(np.array([0.0]), 1.0 + 0j)


@given(arrays(float, st.integers(1, 30), elements=finite), finite, st.floats(1e-3, 10))
def test_stieltjes_herglotz_and_bound(eigs, E, eta):
    s = stieltjes(eigs, E + 1j * eta)
    assert 0 < s.imag <= 1 / eta * (1 + 1e-12)


def test_local_green_dim1():
    dec = eig_sym(np.array([[0.7]]), want_vectors=True)
    z = 0.2 + 0.3j
    assert local_green(dec, 1, z) == pytest.approx(1 / (0.7 - z))
    assert local_green(dec, 1, 0.7 + 0.01j).imag == pytest.approx(100)


def test_local_green_requires_vectors():
    with pytest.raises(ValueError):
        local_green(eig_sym(np.eye(2)), 1, 1j)


def test_trace_identity():
    H = sample_direct(EnsembleParams(-0.75, 6, seed=2))
    dec = eig_sym(H, want_vectors=True)
    z = np.array([0.1 + 0.05j, -0.5 + 1e-3j, 2 + 3j])
    avg = np.mean([local_green(dec, x, z) for x in range(1, 65)], axis=0)
    assert np.max(np.abs(avg - stieltjes(dec, z))) < 1e-12


def test_dos_atom():
    eta = 0.01
    assert dos_estimate(np.array([0.0]), 0.0, eta) == pytest.approx(1 / (np.pi * eta))
    assert dos_estimate(np.array([0.0]), eta, eta) == pytest.approx(1 / (2 * np.pi * eta))


def test_dos_goe_center():
    eigs = eig_sym(sample_goe(1024, substream(2, 0))).eigenvalues
    assert dos_estimate(eigs, 0.0, 0.05) == pytest.approx(1 / np.pi, rel=0.1)


def test_dos_integrates_to_one():
    eigs = eig_sym(sample_direct(EnsembleParams(0.5, 7, seed=3))).eigenvalues
    eta = 0.05
    L = np.abs(eigs).max() + 20 * eta
    E = np.linspace(-L, L, 40001)
    mass = np.trapezoid(dos_estimate(eigs, E, eta), E)
    # exact Cauchy mass on [-L, L]; the tails beyond L hold about 2 eta / (pi L)
    exact = np.mean(np.arctan((L - eigs) / eta) + np.arctan((L + eigs) / eta)) / np.pi
    assert mass == pytest.approx(exact, abs=1e-6)
    wide = np.abs(eigs).max() + 2000 * eta
    E = np.concatenate([np.linspace(-wide, -L, 20001), np.linspace(-L, L, 40001)[1:-1], np.linspace(L, wide, 20001)])
    assert abs(np.trapezoid(dos_estimate(eigs, E, eta), E) - 1) < 1e-3


def test_bulk_window_examples():
    w = bulk_window(np.array([1.0, 2.0, 3.0, 4.0]), 0.25)
    assert (w.lo, w.hi) == (2.0, 3.0)
    with pytest.raises(ValueError):
        bulk_window(np.array([1.0, 2.0, 3.0]))


def test_bulk_window_symmetric_spectrum():
    eigs = np.linspace(-1, 1, 101)
    w = bulk_window(eigs)
    assert w.lo == pytest.approx(-w.hi)


def test_bulk_window_goe_density():
    eigs = eig_sym(sample_goe(2048, substream(5, 0))).eigenvalues
    w = bulk_window(eigs, 0.25)
    E = np.linspace(w.lo, w.hi, 200)
    assert np.min(dos_estimate(eigs, E, 0.02)) >= 0.05


def test_profiles_extremes():
    N = 16
    basis = SpectralDecomposition(np.arange(N, dtype=float), np.eye(N))
    p = eigenvector_profiles(basis, SpectralWindow(-1, N))
    assert np.allclose(p.sup_norm, 1) and np.allclose(p.ipr, 1)
    had = np.array([[1.0]])
    for _ in range(4):
        had = np.kron(had, np.array([[1.0, 1.0], [1.0, -1.0]]))
    flat = SpectralDecomposition(np.arange(N, dtype=float), had / np.sqrt(N))
    p = eigenvector_profiles(flat, SpectralWindow(-1, N))
    assert np.allclose(p.sup_norm, N**-0.5) and np.allclose(p.ipr, 1 / N)


def test_profiles_empty_window_flagged():
    dec = eig_sym(np.diag([1.0, 2.0]), want_vectors=True)
    p = eigenvector_profiles(dec, SpectralWindow(5, 6))
    assert p.empty and len(p) == 0


def test_profile_bounds_and_ultrametric_delocalization():
    dec = eig_sym(sample_direct(EnsembleParams(-0.75, 10, seed=7)), want_vectors=True)
    p = eigenvector_profiles(dec, bulk_window(dec.eigenvalues))
    N = 1024
    assert np.all(p.ipr >= 1 / N - 1e-15) and np.all(p.ipr <= 1)
    assert np.all(p.sup_norm >= N**-0.5 - 1e-15) and np.all(p.sup_norm <= 1)
    assert np.all(p.ipr <= p.sup_norm**2 + 1e-15)
    assert np.median(p.ipr) < 10 * 2.0**-10


def test_eigenfunction_green_inequality():
    dec = eig_sym(sample_direct(EnsembleParams(0.5, 7, seed=1)), want_vectors=True)
    for eta in (1e-3, 1e-2, 0.1):
        assert eigenfunction_green_gap(dec, bulk_window(dec.eigenvalues), eta) <= 1e-10


def test_local_law_goe():
    from ultrametric.spectral import local_law_grid

    eigs = eig_sym(sample_goe(2048, substream(6, 0))).eigenvalues
    window = SpectralWindow(-1, 1)
    rep = local_law_check(eigs, window, 0.5, K_l=0.09, K_u=1.2)
    Es, etas = local_law_grid(window, rep.eta_low)
    m = semicircle_stieltjes(Es[None, :] + 1j * etas[:, None]).imag
    # oracle extremes: Im m_sc(+-1 + 10i) ~ 0.098 at the top of the domain, ~ 0.87 near the axis
    assert rep.min_im == pytest.approx(m.min(), rel=0.02)
    assert rep.max_im == pytest.approx(m.max(), rel=0.1)
    assert rep.passed and rep.max_im <= 1.2


def test_local_law_atom_fails_outside_bulk():
    mins = [local_law_check(np.array([0.0]), SpectralWindow(-w, w), 0.5, 0.01, 100).min_im for w in (1, 10, 100)]
    assert mins[0] > mins[1] > mins[2]
    assert mins[2] < 1e-3


def test_local_law_grid_spacing():
    from ultrametric.spectral import local_law_grid

    Es, etas = local_law_grid(SpectralWindow(-1, 1), 0.01)
    assert np.max(np.diff(Es)) <= 0.01 / 4 + 1e-15
    assert etas[0] == pytest.approx(0.01) and etas[-1] == pytest.approx(10)


def test_geometric_eta_grid_ratio():
    g = geometric_eta_grid(1e-3)
    assert np.all(g[1:] / g[:-1] <= 2**0.25 + 1e-12)


def test_semicircle_stieltjes_branch():
    z = np.array([0.3 + 1e-9j, -1.5 + 0.2j, 5 + 1j])
    m = semicircle_stieltjes(z)
    assert np.all(m.imag > 0)
    assert np.allclose(m * m + z * m + 1, 0, atol=1e-12)
    assert m[0].imag == pytest.approx(np.pi * sc_density(0.3), rel=1e-6)


@pytest.mark.slow
def test_wegner_tail_bound_stable_in_n():
    """99th percentile of Im S over the bulk grid against C (1 + log(1 + 1/eta)), fitted per level."""
    etas = geometric_eta_grid(1e-3, 1.0, 2.0)
    fits = {}
    for eps in (-0.75, 0.5):
        for n in (8, 10):
            vals = []
            for k in range(200):
                eigs = eig_sym(sample_direct(EnsembleParams(eps, n, seed=99), k)).eigenvalues
                w = bulk_window(eigs)
                E = np.linspace(w.lo, w.hi, 33)
                vals.append(stieltjes(eigs, E[None, :] + 1j * etas[:, None]).imag.max(axis=1))
            q99 = np.quantile(np.array(vals), 0.99, axis=0)
            fits[eps, n] = np.max(q99 / (1 + np.log1p(1 / etas)))
        assert fits[eps, 10] <= 1.25 * fits[eps, 8]
