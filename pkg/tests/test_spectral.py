import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qpns.spectral import (
    LatticeMismatch, SpectralField, from_coords, inner_product, leray_project, make_lattice,
    norm_fractional, onb_basis, random_coeffs, random_field, stokes_apply, to_coords,
)


def test_eigenvalue_examples():
    lat = make_lattice(8, 2 * math.pi)
    i, j, _ = lat.index((1, 0))
    assert lat.eigenvalues[i, j] == pytest.approx(1.0)
    i, j, _ = lat.index((2, 1))
    assert lat.eigenvalues[i, j] == pytest.approx(5.0)
    assert make_lattice(4, 1.0).lambda1 == pytest.approx(4 * math.pi ** 2)


def test_eigenvalue_matches_discrete_laplacian():
    # physical-grid oracle: spectral Laplacian of a sampled Fourier mode
    lat = make_lattice(8)
    x, y = lat.grid()
    f = np.cos(2 * x + y)
    k = (2 * np.pi / lat.l) * np.fft.fftfreq(8, 1 / 8)
    lap = np.real(np.fft.ifft2(-(k[:, None] ** 2 + k[None, :] ** 2) * np.fft.fft2(f)))
    assert np.allclose(-lap, 5.0 * f, atol=1e-12)


def test_lattice_invariants(lat16):
    assert not lat16.mask[0, 0]
    assert np.all(lat16.eigenvalues[lat16.mask] > 0)
    assert lat16.lambda1 == pytest.approx(lat16.eigenvalues[lat16.mask].min())
    # Nyquist rows and columns are never retained
    assert not lat16.mask[8].any() and not lat16.mask[:, 8].any()


@pytest.mark.parametrize("n", [3, 7, 2])
def test_make_lattice_rejects_bad_n(n):
    with pytest.raises(ValueError):
        make_lattice(n)


def test_random_field_divergence_free_and_symmetric(lat16, rng):
    u = random_field(lat16, rng)
    kap = lat16.kappa
    div = np.abs(kap[0] * u.coeffs[0] + kap[1] * u.coeffs[1])
    assert div.max() <= 1e-12 * np.abs(u.coeffs).max()
    # conjugate symmetry: the grid field is real and round-trips exactly
    back = SpectralField.from_physical(lat16, u.physical())
    assert back.allclose(u, atol=1e-13)


def test_parseval(lat16, rng):
    u = random_field(lat16, rng)
    vals = u.physical()
    integral = np.sum(vals ** 2) * (lat16.l / lat16.n) ** 2
    assert u.norm() ** 2 == pytest.approx(integral, rel=1e-12)


def test_leray_examples(lat8):
    i, j, _ = lat8.index((1, 0))
    raw = np.zeros(lat8.shape, complex)
    raw[:, i, j] = [3.0, 4.0]
    out = leray_project(raw, lat8).coeffs[:, i, j]
    assert np.allclose(out, [0.0, 4.0])
    grad = np.zeros(lat8.shape, complex)
    grad[:, i, j] = [2.0, 0.0]
    assert np.allclose(leray_project(grad, lat8).coeffs, 0)
    u = SpectralField.mode(lat8, (2, 1), 0.7)
    assert leray_project(u).allclose(u, atol=1e-15)


def test_leray_idempotent(lat16, rng):
    raw = rng.standard_normal(lat16.shape) + 1j * rng.standard_normal(lat16.shape)
    raw[:, 0, 0] = 0
    once = leray_project(raw, lat16).coeffs
    twice = leray_project(once, lat16).coeffs
    assert np.max(np.abs(twice - once)) <= 1e-15 * np.max(np.abs(once))


def test_leray_rejects_mean_mode(lat8):
    raw = np.zeros(lat8.shape, complex)
    raw[0, 0, 0] = 1.0
    with pytest.raises(ValueError):
        leray_project(raw, lat8)


def test_stokes_apply_examples(lat8):
    u = SpectralField.mode(lat8, (1, 0), 0.3)
    assert stokes_apply(u, 1.0).allclose(u, 1e-15)
    v = SpectralField.mode(lat8, (2, 1), 0.3)
    assert stokes_apply(v, 1.0).allclose(v * 5.0, 1e-15)
    assert stokes_apply(SpectralField.zeros(lat8), 0.37).norm() == 0


@pytest.mark.parametrize("k", [(1, 0), (2, 1), (1, -3)])
@pytest.mark.parametrize("theta", [0.0, 0.5, 1.25])
def test_norm_fractional_single_mode(lat8, k, theta):
    u = SpectralField.mode(lat8, k)
    lam = lat8.eigenvalue(k)
    assert norm_fractional(u, theta) == pytest.approx(lam ** theta, rel=1e-12)
    assert norm_fractional(u, theta) == pytest.approx(stokes_apply(u, theta).norm(), rel=1e-12)


def test_norm_fractional_definition_chase(lat16, rng):
    u = random_field(lat16, rng)
    assert norm_fractional(u, 0.0) == pytest.approx(u.norm(), rel=1e-14)
    assert norm_fractional(u, 0.5) == pytest.approx(norm_fractional(stokes_apply(u, 0.5), 0.0), rel=1e-12)


def test_inner_product_examples(lat16, rng):
    u, v = random_field(lat16, rng), random_field(lat16, rng)
    assert inner_product(u, u) == pytest.approx(u.norm() ** 2, rel=1e-14)
    a, b = SpectralField.mode(lat16, (1, 0)), SpectralField.mode(lat16, (0, 2))
    assert abs(inner_product(a, b)) < 1e-15
    quad = np.sum(u.physical() * v.physical()) * (lat16.l / lat16.n) ** 2
    assert inner_product(u, v) == pytest.approx(quad, rel=1e-10)


def test_lattice_mismatch(lat8, lat16):
    with pytest.raises(LatticeMismatch):
        inner_product(SpectralField.zeros(lat8), SpectralField.zeros(lat16))


def test_coercivity(lat16, rng):
    c = random_coeffs(lat16, rng, (100,), slope=0.0)
    for u in c:
        f = SpectralField(lat16, u)
        assert inner_product(stokes_apply(f), f) >= lat16.lambda1 * f.norm() ** 2 * (1 - 1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 31), theta=st.floats(0.01, 0.99), slope=st.floats(-1.0, 3.0))
def test_fractional_log_convexity(seed, theta, slope):
    lat = make_lattice(8)
    u = random_field(lat, np.random.default_rng(seed), slope=slope)
    lhs = norm_fractional(u, theta)
    rhs = norm_fractional(u, 0) ** (1 - theta) * norm_fractional(u, 1) ** theta
    assert lhs <= rhs * (1 + 1e-12)


def test_onb_is_orthonormal_and_complete(lat8, rng):
    basis = onb_basis(lat8)
    assert basis.shape[0] == lat8.dim
    gram = to_coords(basis, basis, lat8)
    assert np.allclose(gram, np.eye(lat8.dim), atol=1e-13)
    u = random_field(lat8, rng)
    z = to_coords(u.coeffs, basis, lat8)
    assert np.allclose(from_coords(z, basis), u.coeffs, atol=1e-14)
    assert np.dot(z, z) == pytest.approx(u.norm() ** 2, rel=1e-13)
