"""Three-mode Galerkin system: independent oracle against the package."""

import numpy as np
import pytest

import triad_oracle as tri
from qpns.action import NoiseSpec
from qpns.nonlinear import bilinear_B
from qpns.quasipotential import MamProblem, mam_minimize, ou_quasipotential
from qpns.spectral import SpectralField, make_lattice


@pytest.fixture(scope="module")
def triad():
    lat = make_lattice(8, modes=tri.MODES)
    return lat, NoiseSpec(lat, 2.0)


def test_symbolic_coefficients():
    out, (a, b, c) = tri.derive_coefficients()
    quad = [b * c, a * c, a * b]
    for expr, coef, qd in zip(out, tri.NL, quad):
        assert float((expr / qd).simplify()) == pytest.approx(coef)


def test_oracle_conserves_energy_and_enstrophy():
    assert abs(np.sum(tri.LAM * tri.NL)) < 1e-15
    assert abs(np.sum(tri.LAM ** 2 * tri.NL)) < 1e-15


def test_scale_is_h_norm(triad):
    lat, _ = triad
    for i in range(3):
        e = np.zeros(3)
        e[i] = 1.0
        u = SpectralField.from_physical(lat, tri.velocity(e, 8))
        assert u.norm() == pytest.approx(tri.SCALE[i], rel=1e-12)


def test_package_B_matches_oracle(triad, rng):
    lat, _ = triad
    for _ in range(5):
        z = rng.standard_normal(3)
        u = SpectralField.from_physical(lat, tri.velocity(z, 8))
        quad = np.array([z[1] * z[2], z[0] * z[2], z[0] * z[1]])
        # the oracle writes the stream rate as -lam z + NL quad, so -B(u,u) <-> NL quad
        expect = SpectralField.from_physical(lat, tri.velocity(-tri.NL * quad, 8))
        assert bilinear_B(u, u).allclose(expect, atol=1e-12 * max(1.0, expect.norm()))


def test_brute_force_linear_sanity():
    # with the nonlinearity switched off the oracle must land near the linear closed form
    saved = tri.NL.copy()
    try:
        tri.NL[:] = 0.0
        target = (0.2, 0.1, -0.05)
        U, _, _ = tri.brute_force(target, sweeps=60)
    finally:
        tri.NL[:] = saved
    exact = float(np.sum(tri.LAM * (np.array(target) * tri.SCALE) ** 2 / tri.LAM ** -2))
    assert exact <= U <= 1.05 * exact


def test_mam_within_five_percent_of_brute_force(triad):
    lat, spec = triad
    target = (0.5, 0.5, -0.1)
    x = SpectralField.from_physical(lat, tri.velocity(target, 8))
    res = mam_minimize(MamProblem(x, spec, 8.0, 256))
    assert res.converged
    U_bf, _, _ = tri.brute_force(target)
    assert abs(res.action - U_bf) <= 0.05 * U_bf
    # the nonlinearity is not negligible for this target
    assert abs(res.action - ou_quasipotential(x, spec, 8.0)) > 0.01 * res.action
