import math
from types import SimpleNamespace

import numpy as np
import pytest

from qpns.action import NoiseSpec
from qpns.ldp import gaussian_ball_log_probability, stationary_variances
from qpns.modal import ModalSystem
from qpns.skeleton import step_imex
from qpns.spectral import SpectralField, h_inner, make_lattice, onb_basis, random_field
from qpns.stochastic import (
    SdeConfig, batch_means, convolution_std, exponential_moment_estimate, gamma_bar, long_run,
    sample_noise_increment, simulate_norms, step_sde, tail_probability, tail_thresholds, trajectory_rng,
    write_moment_csv, write_tail_csv,
)


def stub(lam1=1.0, op=1.0, trace=2.5):
    return SimpleNamespace(lattice=SimpleNamespace(lambda1=lam1), op_norm_sq=op, trace=trace)


def test_noise_trace(spec8):
    rng = trajectory_rng(3, 0)
    dt = 0.01
    sq = [sample_noise_increment(spec8, dt, rng).norm() ** 2 / dt for _ in range(10_000)]
    assert np.mean(sq) == pytest.approx(spec8.trace, rel=0.05)


def test_noise_shrinks_with_dt(spec8):
    means = []
    for dt in (1e-2, 1e-4, 1e-6):
        rng = trajectory_rng(0, 0)
        means.append(np.mean([sample_noise_increment(spec8, dt, rng).norm() for _ in range(200)]))
    assert means[0] > means[1] > means[2]
    assert means[2] < 1e-2


def test_noise_deterministic(spec8):
    a = sample_noise_increment(spec8, 0.1, trajectory_rng(11, 4)).coeffs
    b = sample_noise_increment(spec8, 0.1, trajectory_rng(11, 4)).coeffs
    c = sample_noise_increment(spec8, 0.1, trajectory_rng(11, 5)).coeffs
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_noise_modes_uncorrelated(spec8, lat8):
    rng = trajectory_rng(1, 0)
    e1, e2 = SpectralField.mode(lat8, (1, 0)).coeffs, SpectralField.mode(lat8, (1, 1)).coeffs
    n = 5000
    xs = np.empty((n, 2))
    for i in range(n):
        w = sample_noise_increment(spec8, 1.0, rng).coeffs
        xs[i] = h_inner(w, e1, lat8), h_inner(w, e2, lat8)
    corr = np.corrcoef(xs.T)[0, 1]
    assert abs(corr) <= 3 / math.sqrt(n)


def test_zero_eps_is_deterministic_step(spec8, lat8, rng):
    u = random_field(lat8, rng)
    cfg = SdeConfig(spec8, 0.0, dt=0.01)
    out = step_sde(u, cfg, trajectory_rng(0, 0))
    assert np.array_equal(out.coeffs, step_imex(u, None, 0.01).coeffs)


def test_convolution_std_small_dt(spec8):
    dt = 1e-6
    assert np.allclose(convolution_std(spec8, dt), spec8.multipliers * math.sqrt(dt), rtol=1e-5)


def test_linear_stationary_variance(lat8):
    spec = NoiseSpec(lat8, 2.0)
    eps, dt = 0.5, 0.05
    cfg = SdeConfig(spec, eps, dt=dt, nonlinear=False)
    basis = onb_basis(lat8)
    lam = np.array([h_inner(lat8.eigenvalues * b, b, lat8) for b in basis])
    first = basis[np.isclose(lam, 1.0)]           # the four lambda = 1 coordinates
    rng = trajectory_rng(7, 0)
    u = SpectralField.zeros(lat8)
    vals = []
    for k in range(100_000):
        u = step_sde(u, cfg, rng)
        if k >= 200:
            vals.append(h_inner(first, u.coeffs, lat8))
    var = np.var(np.array(vals))
    assert var == pytest.approx(eps * 1.0 / 2.0, rel=0.05)


def test_full_B_trajectory_finite(spec8):
    cfg = SdeConfig(spec8, 0.5, dt=0.01, burn_in=0.0)
    run = long_run(cfg, 1000.0, stride=10)
    assert np.all(np.isfinite(run.norm_sq))
    assert run.count == 10_000


def test_gamma_bar_examples():
    assert gamma_bar(stub()) == pytest.approx(0.2)
    base = gamma_bar(NoiseSpec(make_lattice(8), 2.0, 1.0))
    for s in (0.5, 0.1):
        assert gamma_bar(NoiseSpec(make_lattice(8), 2.0, s)) == pytest.approx(base / s ** 2)


def test_gamma_bar_refinement():
    s8, s16 = NoiseSpec(make_lattice(8)), NoiseSpec(make_lattice(16))
    assert s8.op_norm_sq == s16.op_norm_sq
    assert gamma_bar(s8) == pytest.approx(1 / (2 * s8.trace))
    assert gamma_bar(s16) == pytest.approx(1 / (2 * s16.trace))


def test_tail_thresholds_examples():
    R, eps_s = tail_thresholds(stub(), 1.0)
    assert R == pytest.approx(math.sqrt(10))
    assert eps_s == pytest.approx(10 * 0.2 / (2 * math.log(2)))
    R4, _ = tail_thresholds(stub(), 4.0)
    assert R4 == pytest.approx(2 * R)


def test_moment_bound_shape(spec8):
    rows = exponential_moment_estimate(SdeConfig(spec8, 0.5), [1.0, 2.0, 4.0], samples=200)
    for r in rows:
        assert r.bound <= 3 and r.bound == pytest.approx(math.exp(-r.t / 2) + 2)
        assert r.holds
    assert exponential_moment_estimate(SdeConfig(spec8, 0.5), [50.0], samples=100)[0].bound == pytest.approx(2, abs=1e-10)


def test_simulation_independent_of_workers(spec8):
    cfg = SdeConfig(spec8, 0.5, seed=42)
    a = simulate_norms(cfg, [0.5, 1.0], 150, workers=1)
    b = simulate_norms(cfg, [0.5, 1.0], 150, workers=4)
    assert np.array_equal(a, b)


def test_simulate_rejects_off_grid_time(spec8):
    with pytest.raises(ValueError):
        simulate_norms(SdeConfig(spec8, 0.5, dt=0.01), [0.005], 10)


def test_tail_R_zero(spec8):
    est = tail_probability(SdeConfig(spec8, 0.5), 0.0, 50.0)
    assert est.p_hat == 1.0


def test_tail_matches_gaussian_when_linear(spec8):
    eps = 0.5
    cfg = SdeConfig(spec8, eps, dt=0.02, nonlinear=False, seed=5)
    var = stationary_variances(spec8, eps)
    R = math.sqrt(1.3 * var.sum())
    exact = 1 - math.exp(gaussian_ball_log_probability(var, np.zeros_like(var), R))
    est = tail_probability(cfg, R, 4000.0, stride=5)
    assert abs(est.p_hat - exact) <= est.ci
    assert 0 <= est.ci_lo <= est.p_hat <= est.ci_hi <= 1


def test_tail_zero_hits_rule_of_three(spec8):
    est = tail_probability(SdeConfig(spec8, 0.1), 50.0, 100.0)
    assert est.p_hat == 0 and est.ci == pytest.approx(0.03)


def test_batch_means_iid_coverage():
    rng = np.random.default_rng(0)
    covered = 0
    for _ in range(200):
        bm = batch_means(rng.standard_normal(2000))
        covered += bm.lo <= 0 <= bm.hi
    assert covered >= 180


def test_batch_means_widened_for_short_series():
    bm = batch_means(np.ones(5))
    assert bm.widened and bm.halfwidth >= 1


def test_csv_writers(tmp_path, spec8):
    rows = exponential_moment_estimate(SdeConfig(spec8, 0.5), [1.0], samples=100)
    write_moment_csv(rows, tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "t,estimate,stderr,bound"
    write_tail_csv([tail_probability(SdeConfig(spec8, 0.5), 1.0, 20.0)], tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "R,p_hat,ci_lo,ci_hi,bound"


def test_config_validation(spec8):
    with pytest.raises(ValueError):
        SdeConfig(spec8, -1.0)
    with pytest.raises(ValueError):
        SdeConfig(spec8, 0.5, dt=0)
    assert SdeConfig(spec8, 0.5).burn == pytest.approx(10.0)


def test_modal_noise_coordinates_match_fields(spec8, lat8):
    # the batched stepper and the field stepper use the same per-coordinate law
    ms = ModalSystem(lat8)
    q = ms.diagonal(spec8.multipliers)
    lam = ms.eigenvalues
    assert np.allclose(q, lam ** -1)


def test_stationary_energy_stable_under_refinement():
    # the truncated invariant measures at n and 2n agree on the mean energy
    means = []
    for n in (8, 16):
        cfg = SdeConfig(NoiseSpec(make_lattice(n), 2.0), 0.5, dt=0.01, seed=11)
        run = long_run(cfg, 600.0, stride=5)
        bm = batch_means(run.norm_sq, 20)
        means.append((bm.estimate, bm.halfwidth))
    (m8, c8), (m16, c16) = means
    assert abs(m8 - m16) <= max(c8 + c16, 0.03 * m16)
