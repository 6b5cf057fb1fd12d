import warnings

import numpy as np
import pytest
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from hypothesis import given, settings, strategies as st

from sail.discretize import (beam_transfer, biharmonic_clamped, laplacian_neumann, neumann_map,
                             normal_flux, trace_and_flux)
from sail.errors import CompatibilityWarning, ValidationError
from sail.geometry import build_reference_domain


def fitted_order(hs, errs):
    return float(np.polyfit(np.log(hs), np.log(errs), 1)[0])


def laplacian_error(n):
    """Solve Lap z = f for u = y^2 + 2(x^2 - x) + cos(pi x) cos(pi y).

    The Gamma0 flux of u is 2 everywhere (continuous through the corners,
    which a single-valued beam flux requires) and its Gamma1 flux is 0.
    """
    g = build_reference_domain(n, n)
    lap = laplacian_neumann(g)
    X, Y = g.mesh
    cc = np.cos(np.pi * X) * np.cos(np.pi * Y)
    u = Y**2 + 2 * (X**2 - X) + cc
    f = 6 - 2 * np.pi**2 * cc
    flux = np.full(g.beam_nodes, 2.0)
    m = lap.mass[:, None]
    A = sp.bmat([[lap.stiffness, sp.csr_matrix(m)], [sp.csr_matrix(m.T), None]]).tocsc()
    rhs = np.r_[lap.injection @ flux - lap.mass * f.ravel(), 0.0]
    z = spla.spsolve(A, rhs)[:-1].reshape(g.shape)
    exact = u - np.sum(lap.mass * u.ravel()) / lap.mass.sum()
    return g.hx, np.abs(z - exact).max()


def biharmonic_error(n):
    g = build_reference_domain(n, n)
    D4 = biharmonic_clamped(g).matrix
    s, L = g.arclength[1:-1], g.beam_length
    k = 2 * np.pi / L
    v = 1 - np.cos(k * s)
    sol = spla.spsolve(D4.tocsc(), -k**4 * np.cos(k * s))
    return g.hs, np.abs(sol - v).max()


def test_laplacian_convergence_order():
    hs, errs = zip(*(laplacian_error(n) for n in (17, 33, 65)))
    assert 1.8 <= fitted_order(hs, errs) <= 2.2


def test_biharmonic_convergence_order():
    hs, errs = zip(*(biharmonic_error(n) for n in (17, 33, 65)))
    assert 1.8 <= fitted_order(hs, errs) <= 2.2


def test_constant_in_kernel(g17):
    lap = laplacian_neumann(g17)
    assert np.abs(lap.apply(np.full(g17.shape, 3.7))).max() < 1e-10
    assert np.abs(lap.matrix @ np.ones(g17.size)).max() < 1e-12


def test_quadratic_interior_laplacian(g17):
    lap = laplacian_neumann(g17)
    X, Y = g17.mesh
    z = X**2 + Y**2
    flux = normal_flux(g17, z).ravel()[g17.gamma0]
    # Gamma1 flux of x^2 + y^2 is -2y = 0 on y = 0, so the operator form applies
    out = lap.apply(z, flux)
    assert np.abs(out[1:-1, 1:-1] - 4).max() < 1e-9


def test_operators_symmetric(g17):
    A = laplacian_neumann(g17).matrix
    B = biharmonic_clamped(g17).matrix
    assert abs(A - A.T).max() == 0.0
    assert abs(B - B.T).max() == 0.0


def test_laplacian_negative_semidefinite(g17):
    ev = np.linalg.eigvalsh(laplacian_neumann(g17).matrix.toarray())
    assert ev.max() < 1e-10 and np.sum(np.abs(ev) < 1e-10) == 1


def test_biharmonic_spd(g33, rng):
    B = biharmonic_clamped(g33).matrix.toarray()
    np.linalg.cholesky(B)
    V = rng.standard_normal((B.shape[0], 100))
    assert np.all(np.einsum("ik,ik->k", V, B @ V) > 0)
    assert np.linalg.eigvalsh(B).min() > 0


def test_quartic_exact_away_from_clamps(g33):
    s, L = g33.arclength[1:-1], g33.beam_length
    v = s**2 * (L - s) ** 2
    out = biharmonic_clamped(g33).matrix @ v
    # stencils that do not reach the reflected ghost nodes
    assert np.abs(out[2:-2] - 24).max() < 1e-6


def test_beam_needs_uniform_spacing():
    with pytest.raises(ValidationError, match="nonuniform"):
        biharmonic_clamped(build_reference_domain(17, 9))


def test_divergence_theorem(g33, rng):
    lap = laplacian_neumann(g33)
    for _ in range(5):
        z = rng.standard_normal(g33.shape)
        flux = rng.standard_normal(g33.beam_nodes)
        lhs = np.sum(lap.mass * lap.apply(z, flux).ravel())
        rhs = g33.arc_weights @ flux
        assert abs(lhs - rhs) <= 1e-12 * max(1.0, np.abs(lap.mass * lap.apply(z, flux).ravel()).sum())


def test_neumann_map_zero_and_linear(g17, rng):
    assert np.abs(neumann_map(g17, np.zeros(g17.beam_nodes))).max() == 0.0
    s, L = g17.arclength, g17.beam_length
    g1 = np.sin(2 * np.pi * s / L)
    g2 = np.cos(2 * np.pi * s / L) - (g17.arc_weights @ np.cos(2 * np.pi * s / L)) / L
    lhs = neumann_map(g17, g1 + g2)
    assert np.abs(lhs - neumann_map(g17, g1) - neumann_map(g17, g2)).max() < 1e-12


def test_neumann_map_residual_and_mean(g33):
    s, L = g33.arclength, g33.beam_length
    g = np.exp(-40 * (s - 0.8) ** 2) - np.exp(-40 * (s - 2.2) ** 2)
    g -= (g33.arc_weights @ g) / L
    lap = laplacian_neumann(g33)
    z = neumann_map(g33, g, lap)
    assert abs(np.sum(lap.mass * z.ravel())) < 1e-12
    assert np.abs(lap.apply(z, g)).max() <= 1e-10 * max(1.0, np.abs(z).max() / g33.hx**2)


def test_neumann_map_incompatible_warns(g17):
    with pytest.warns(CompatibilityWarning):
        neumann_map(g17, np.ones(g17.beam_nodes))


def test_flux_of_constant_and_linear(g33):
    tf = trace_and_flux(g33, np.full(g33.shape, 2.0))
    assert np.abs(tf.flux_gamma0).max() < 1e-10 and np.abs(tf.flux_gamma1).max() < 1e-10
    X, Y = g33.mesh
    nf = normal_flux(g33, Y)
    assert np.allclose(nf[1:-1, -1], 1.0) and np.allclose(nf[1:-1, 0], -1.0)
    assert np.allclose(trace_and_flux(g33, Y).trace_gamma0, Y.ravel()[g33.gamma0])


def test_flux_recovers_neumann_data(g33):
    s, L = g33.arclength, g33.beam_length
    g = np.sin(np.pi * s / L) ** 2 * (s - L / 2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CompatibilityWarning)
        z = neumann_map(g33, g)
    nf = normal_flux(g33, z).ravel()[g33.gamma0]
    assert np.abs(nf - g).max() < 1e-8


def test_beam_transfer(g17):
    to_b, to_beam = beam_transfer(g17)
    assert abs(to_beam @ to_b - sp.identity(g17.beam_nodes)).max() == 0
    for k in (0, 5, g17.beam_nodes - 1):
        e = np.zeros(g17.beam_nodes)
        e[k] = 1
        pos = np.sort(g17.gamma0)
        assert pos[np.argmax(to_b @ e)] == g17.gamma0[k]
    with pytest.raises(ValidationError, match="mismatched"):
        beam_transfer(g17, g17.beam_nodes + 1)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(5, 30), c=st.floats(-5, 5))
def test_row_sums_zero(n, c):
    g = build_reference_domain(n, n)
    lap = laplacian_neumann(g)
    assert np.abs(lap.apply(np.full(g.shape, c))).max() <= 1e-9 * (1 + abs(c)) / g.hx**2
