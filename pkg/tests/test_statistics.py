import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import poisson_mean_gap_ratio
from ultrametric.ensemble import EnsembleParams, coupling_weight, sample_goe, split_top_layer, substream
from ultrametric.meanfield import FreeConvolutionInput
from ultrametric.spectral import SpectralWindow, bulk_window, eig_sym, kolmogorov_distance
from ultrametric.statistics import (
    POISSON_MEAN_R, InsufficientDataError, ReferenceStatistics, bump, domination_exponent, fluctuation_scaling,
    gap_ratios, generate_references, holder_exponent, semicircle_input, two_point_statistic, unfold,
    unfold_with_density, wigner_surmise_cdf, wigner_surmise_pdf,
)


@pytest.fixture(scope="module")
def references():
    return generate_references(seed=2024, sizes=(2048,), samples=10)


def test_poisson_constant_matches_integral():
    assert POISSON_MEAN_R == pytest.approx(poisson_mean_gap_ratio(), abs=1e-12)
    assert POISSON_MEAN_R == pytest.approx(0.38629, abs=1e-5)


def test_equal_spacing():
    gr = gap_ratios(np.arange(20.0))
    assert np.all(gr.values == 1) and gr.mean == 1 and gr.degenerate == 0


def test_degenerate_gaps_flagged():
    gr = gap_ratios(np.array([0.0, 1.0, 1.0, 2.5, 3.0]))
    assert gr.degenerate == 2
    assert gr.values[0] == 0 and gr.values[1] == 0


def test_gap_ratio_needs_three():
    with pytest.raises(InsufficientDataError):
        gap_ratios(np.array([0.0, 1.0, 2.0, 3.0]), SpectralWindow(0.5, 2.5))


@given(arrays(float, st.integers(3, 60), elements=st.floats(-100, 100)))
def test_gap_ratio_range(x):
    gr = gap_ratios(x)
    assert np.all((gr.values >= 0) & (gr.values <= 1)) and 0 <= gr.mean <= 1


def test_poisson_points():
    x = substream(3).uniform(size=400_000)
    assert gap_ratios(x).mean == pytest.approx(POISSON_MEAN_R, abs=3e-3)


def test_references_poisson_and_goe(references):
    assert references.poisson_mean_r == pytest.approx(POISSON_MEAN_R, abs=1e-3)
    se = references.source["goe_mean_r_stderr"]
    assert abs(references.goe_mean_r - 0.5307) <= max(0.002, 3 * se)
    assert references.source["seed"] == 2024 and references.source["samples"] == 10


def test_references_spacing_cdf_close_to_surmise(references):
    s = np.asarray(references.goe_spacing_cdf["s"])
    # surmise is the 2x2 approximation; large-N GOE differs by about 0.006 in sup norm
    assert np.max(np.abs(references.spacing_cdf(s) - wigner_surmise_cdf(s))) < 0.01


def test_references_bit_identical(tmp_path):
    a = generate_references(7, sizes=(128,), samples=2, poisson_gaps=1000)
    b = generate_references(7, sizes=(128,), samples=2, poisson_gaps=1000)
    a.save(tmp_path / "a.json")
    b.save(tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    c = ReferenceStatistics.load(tmp_path / "a.json")
    assert c.goe_mean_r == a.goe_mean_r and c.source == a.source


def test_surmise_pdf_integrates_to_cdf():
    s = np.linspace(0, 5, 5001)
    cdf = np.concatenate([[0], np.cumsum((wigner_surmise_pdf(s[1:]) + wigner_surmise_pdf(s[:-1])) / 2 * np.diff(s))])
    assert np.allclose(cdf, wigner_surmise_cdf(s), atol=1e-6)


def test_unfold_constant_density_is_affine():
    L, N = 4.0, 100
    eigs = np.sort(substream(4).uniform(-1, 3, size=N))
    win = SpectralWindow(-1, 3)
    grid = np.linspace(-1, 3, 11)
    u = unfold_with_density(eigs, win, grid, np.full(11, 1 / L), N)
    assert np.allclose(u.unfolded, N / L * (eigs + 1))
    assert np.allclose(u.spacings, N / L * np.diff(eigs))


def test_unfold_rejects_vanishing_density():
    grid = np.linspace(0, 10, 11)
    dens = np.where(grid < 5, 0.1, 0.0)
    with pytest.raises(ValueError):
        unfold_with_density(np.array([0.0, 5.0, 10.0]), SpectralWindow(0, 10), grid, dens, 3)


def test_goe_unfolded_spacings_match_surmise():
    dim = 2048
    eigs = eig_sym(sample_goe(dim, substream(5, 0))).eigenvalues
    u = unfold(eigs, semicircle_input(), bulk_window(eigs), 1e-3, N=dim)
    assert u.mean_gap == pytest.approx(1, abs=0.02)
    assert kolmogorov_distance(u.spacings, wigner_surmise_cdf) < 0.03


@pytest.mark.slow
def test_ultrametric_unfolding_mean_gap():
    n, eps = 12, -0.75
    base, top = split_top_layer(EnsembleParams(eps, n, seed=31))
    eigs = eig_sym(base + top).eigenvalues
    inp = FreeConvolutionInput(eig_sym(base).eigenvalues, coupling_weight(n, eps))
    u = unfold(eigs, inp, bulk_window(eigs), eta_limit=2.0**(-n / 2))
    assert u.mean_gap == pytest.approx(1, abs=0.02)


def test_pair_statistic_arithmetic_progression():
    u = np.arange(1000.0)
    stat = two_point_statistic(u, bump, [1.0], support=0.5)
    assert stat[0] == pytest.approx(2, abs=0.01)


def test_pair_statistic_poisson():
    N = 20_000
    u = np.sort(substream(6).uniform(0, N, size=N))
    s = np.linspace(-0.5, 0.5, 10001)
    integral = np.trapezoid(bump(s), s)
    stat = two_point_statistic(u, bump, [1.5, 2.5], support=0.5)
    assert np.allclose(stat, 2 * integral, rtol=0.05)


@pytest.mark.parametrize("level", [0.0, 1.0])
def test_domination_trivial(level):
    samples = {n: np.full(10, 2.0 ** (level * n)) for n in (6, 8, 10)}
    assert domination_exponent(samples).slope == pytest.approx(level, abs=1e-12)


@given(st.floats(-1, 2), st.integers(0, 2**32))
def test_domination_recovers_synthetic_slope(s, seed):
    rng = substream(seed)
    samples = {n: 2.0 ** (s * n) * rng.lognormal(0, 0.01, size=200) for n in (6, 8, 10, 12)}
    assert domination_exponent(samples).slope == pytest.approx(s, abs=0.02)


def test_domination_needs_three_levels():
    with pytest.raises(InsufficientDataError):
        domination_exponent({8: np.ones(3), 10: np.ones(3)})


def test_fluctuation_deterministic_flagged():
    fit = fluctuation_scaling({d: np.full(100, 0.3 + 0.1j) for d in (64, 128, 256)}, label="A+V")
    assert fit.flagged and np.isnan(fit.slope)


def test_fluctuation_iid_clt():
    rng = substream(7)
    vals = {}
    for d in (256, 512, 1024, 2048):
        v = rng.normal(0, np.sqrt(2), size=(200, d))
        vals[d] = (1 / (v - 1j)).mean(axis=1)
    fit = fluctuation_scaling(vals, label="A+V, A=0")
    assert -0.6 <= fit.slope <= -0.4 and fit.note == "A+V, A=0"


def test_fluctuation_needs_samples():
    with pytest.raises(InsufficientDataError):
        fluctuation_scaling({d: np.ones(50) for d in (64, 128, 256)})


def test_holder_atom_slope_zero():
    etas = np.geomspace(1e-4, 1e-1, 10)
    assert holder_exponent(etas, 1 / etas).slope == pytest.approx(0, abs=1e-12)


def test_holder_bounded_density_slope_one():
    etas = np.geomspace(1e-5, 1e-2, 10)
    E = 0.2
    im_g = 0.5 * (np.arctan((1 - E) / etas) + np.arctan((1 + E) / etas))  # uniform density 1/2 on [-1, 1]
    assert holder_exponent(etas, im_g).slope == pytest.approx(1, abs=0.01)


def test_holder_grid_too_narrow():
    etas = np.geomspace(1e-2, 1e-1, 8)
    with pytest.raises(InsufficientDataError):
        holder_exponent(etas, 1 / etas)
    assert holder_exponent(etas, 1 / etas, min_decades=1).slope == pytest.approx(0, abs=1e-12)
