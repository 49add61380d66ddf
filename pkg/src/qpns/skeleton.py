"""Exponential-Euler solver for the controlled equation u' + Au + B(u, u) = f."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterator

import numpy as np

from .nonlinear import DealiasRule, convection, default_rule
from .spectral import SpectralField, WaveLattice, h_inner, h_norm_sq

log = logging.getLogger(__name__)

BLOWUP_NORM = 1e6


class BlowUpError(RuntimeError):
    """The trajectory left every reasonable bound (or produced NaN)."""


@dataclass(frozen=True)
class TimeGrid:
    a: float
    b: float
    steps: int

    def __post_init__(self):
        if not self.b > self.a:
            raise ValueError(f"need a < b, got [{self.a}, {self.b}]")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError(f"steps must be a positive integer, got {self.steps!r}")

    @property
    def dt(self) -> float:
        return (self.b - self.a) / self.steps

    @property
    def times(self) -> np.ndarray:
        return self.a + self.dt * np.arange(self.steps + 1)

    def trapezoid_weights(self) -> np.ndarray:
        w = np.full(self.steps + 1, self.dt)
        w[0] = w[-1] = 0.5 * self.dt
        return w


@dataclass(frozen=True, eq=False)
class Path:
    """Nodal values of a trajectory; ``states[j]`` is the coefficient array at t_j."""

    grid: TimeGrid
    lattice: WaveLattice
    states: np.ndarray = field(repr=False)

    def __post_init__(self):
        s = np.array(self.states, dtype=complex)
        if s.shape != (self.grid.steps + 1,) + self.lattice.shape:
            raise ValueError(f"states shape {s.shape} does not match grid and lattice")
        s.flags.writeable = False
        object.__setattr__(self, "states", s)

    @classmethod
    def from_fields(cls, grid: TimeGrid, fields: list[SpectralField]):
        lat = fields[0].lattice
        if any(f.lattice != lat for f in fields):
            raise ValueError("all states must share one lattice")
        return cls(grid, lat, np.stack([f.coeffs for f in fields]))

    @classmethod
    def zeros(cls, grid: TimeGrid, lattice: WaveLattice):
        return cls(grid, lattice, np.zeros((grid.steps + 1,) + lattice.shape, dtype=complex))

    @classmethod
    def constant(cls, grid: TimeGrid, value: SpectralField):
        return cls(grid, value.lattice, np.broadcast_to(value.coeffs, (grid.steps + 1,) + value.coeffs.shape))

    def __len__(self) -> int:
        return self.grid.steps + 1

    def __getitem__(self, j: int) -> SpectralField:
        return SpectralField(self.lattice, self.states[j])

    def __iter__(self) -> Iterator[SpectralField]:
        return (self[j] for j in range(len(self)))

    def norms(self, theta: float = 0.0) -> np.ndarray:
        """|A^theta u(t_j)|_H at every node."""
        return frac_norms(self.states, self.lattice, theta)

    def scaled(self, c: float):
        return type(self)(self.grid, self.lattice, self.states * c)


class ForcingPath(Path):
    """Nodal values f(t_j) of a forcing term."""


def frac_norms(states: np.ndarray, lattice: WaveLattice, theta: float) -> np.ndarray:
    scale = np.where(lattice.mask, lattice.safe_eigenvalues ** (2.0 * theta), 0.0)
    return np.sqrt(np.sum(lattice.weights * scale * np.abs(states) ** 2, axis=(-3, -2, -1)))


@lru_cache(maxsize=128)
def linear_factors(lattice: WaveLattice, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-mode e^{-lambda dt} and dt * phi1(-lambda dt) = (1 - e^{-lambda dt}) / lambda."""
    lam = lattice.safe_eigenvalues
    decay = np.where(lattice.mask, np.exp(-lam * dt), 0.0)
    gain = np.where(lattice.mask, -np.expm1(-lam * dt) / lam, 0.0)
    decay.flags.writeable = False
    gain.flags.writeable = False
    return decay, gain


def imex_raw(u: np.ndarray, f_mid: np.ndarray | None, dt: float, lattice: WaveLattice,
             rule: DealiasRule, nonlinear: bool = True) -> np.ndarray:
    decay, gain = linear_factors(lattice, dt)
    rhs = np.zeros_like(u) if f_mid is None else f_mid
    if nonlinear:
        bu = convection(u, u, lattice, rule)
        if not np.all(np.isfinite(bu)):
            raise BlowUpError("non-finite value in the convection term")
        rhs = rhs - bu
    return decay * u + gain * rhs


def step_imex(u: SpectralField, f_mid: SpectralField | None, dt: float,
              rule: DealiasRule | None = None, nonlinear: bool = True) -> SpectralField:
    """One exponential-Euler step: exact linear propagator, B frozen at the left node."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    lat = u.lattice
    f = None if f_mid is None else f_mid.coeffs
    return SpectralField(lat, imex_raw(u.coeffs, f, dt, lat, default_rule(lat, rule), nonlinear))


def integrate(u0: np.ndarray, f_mids: np.ndarray | None, grid: TimeGrid, lattice: WaveLattice,
              rule: DealiasRule, nonlinear: bool = True, midpoint: bool = False) -> np.ndarray:
    """Raw forward sweep; ``f_mids[j]`` is the forcing used on step j -> j+1."""
    dt = grid.dt
    out = np.empty((grid.steps + 1,) + u0.shape, dtype=complex)
    out[0] = u0
    u = u0
    for j in range(grid.steps):
        f = None if f_mids is None else f_mids[j]
        if midpoint and nonlinear:
            half = imex_raw(u, f, 0.5 * dt, lattice, rule, nonlinear)
            decay, gain = linear_factors(lattice, dt)
            bu = convection(half, half, lattice, rule)
            rhs = -bu if f is None else f - bu
            u = decay * u + gain * rhs
        else:
            u = imex_raw(u, f, dt, lattice, rule, nonlinear)
        nrm = np.sqrt(h_norm_sq(u, lattice))
        if not np.isfinite(nrm) or nrm > BLOWUP_NORM:
            raise BlowUpError(f"|u|_H = {nrm:.3e} at t = {grid.a + (j + 1) * dt:.6g}")
        out[j + 1] = u
    return out


def midpoint_values(f: Path) -> np.ndarray:
    return 0.5 * (f.states[:-1] + f.states[1:])


def solve_skeleton(u0: SpectralField, f: ForcingPath | TimeGrid, rule: DealiasRule | None = None,
                   nonlinear: bool = True, midpoint: bool = False) -> Path:
    """Integrate u' + Au + B(u,u) = f over the grid of ``f``.

    Passing a bare TimeGrid means f = 0.  Forcing enters each step as the
    average of its two nodal values.
    """
    lat = u0.lattice
    if isinstance(f, TimeGrid):
        grid, f_mids = f, None
    else:
        if f.lattice != lat:
            raise ValueError("forcing and initial state live on different lattices")
        grid, f_mids = f.grid, midpoint_values(f)
    states = integrate(u0.coeffs, f_mids, grid, lat, default_rule(lat, rule), nonlinear, midpoint)
    path = Path(grid, lat, states)
    log.debug("skeleton run on [%g, %g]: |u(b)|_H = %.4e", grid.a, grid.b, path.norms()[-1])
    return path


def _cumtrapz(y: np.ndarray, dt: float) -> np.ndarray:
    out = np.zeros_like(y, dtype=float)
    out[1:] = np.cumsum(0.5 * dt * (y[1:] + y[:-1]))
    return out


@dataclass
class EnergyReport:
    times: np.ndarray
    norm_H: np.ndarray
    norm_V: np.ndarray
    sup_H_sq: float
    int_V_sq: float
    cb4_lhs: np.ndarray        # |u(t)|^2 + int_a^t |u|_V^2
    cb4_rhs: np.ndarray        # |u(a)|^2 + (1/lambda1) int_a^t |f|^2
    cb4_lhs_literal: float     # sup_t |u|^2 + int_a^b |u|_V^2
    cb24_rhs: np.ndarray
    slack: float
    cb4_ok: bool
    cb24_ok: bool
    cb24_violations: np.ndarray
    balance_residual: float
    quadrature_consistent: bool

    def rows(self) -> list[tuple[float, ...]]:
        return [tuple(float(v) for v in r) for r in zip(
            self.times, self.norm_H, self.norm_V, self.cb24_rhs, self.cb4_lhs, self.cb4_rhs)]

    def write_csv(self, dest) -> None:
        with open(dest, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "norm_H", "norm_V", "cb24_rhs", "cb4_lhs", "cb4_rhs"])
            for r in self.rows():
                w.writerow([repr(v) for v in r])


def energy_report(path: Path, f: ForcingPath | None = None) -> EnergyReport:
    """A-priori energy diagnostics for a skeleton trajectory.

    The energy inequality is checked in its running form
    |u(t)|^2 + int_a^t |u|_V^2 <= |u(a)|^2 + (1/lambda1) int_a^t |f|^2 for every t,
    and the decay bound as |u(t)| <= e^{-lambda1 (t-a)} |u(a)| + int_a^t e^{-lambda1 (t-s)} |f(s)| ds
    with multiplicative slack 1 + 10 dt.
    """
    grid, lat = path.grid, path.lattice
    dt, lam1 = grid.dt, lat.lambda1
    t = grid.times
    nh = path.norms(0.0)
    nv = path.norms(0.5)
    if f is None:
        fn = np.zeros_like(nh)
        fu = np.zeros_like(nh)
    else:
        if f.grid != grid:
            raise ValueError("path and forcing use different time grids")
        fn = f.norms(0.0)
        fu = h_inner(f.states, path.states, lat)
    int_v = _cumtrapz(nv ** 2, dt)
    lhs = nh ** 2 + int_v
    rhs = nh[0] ** 2 + _cumtrapz(fn ** 2, dt) / lam1
    # int_a^t e^{-lam1 (t-s)} |f(s)| ds by trapezoid on the running convolution
    conv = np.zeros_like(nh)
    e = np.exp(-lam1 * dt)
    for j in range(1, len(t)):
        conv[j] = e * conv[j - 1] + 0.5 * dt * (e * fn[j - 1] + fn[j])
    cb24 = np.exp(-lam1 * (t - t[0])) * nh[0] + conv
    slack = 1.0 + 10.0 * dt
    viol = np.nonzero(nh > slack * cb24 + 1e-300)[0]
    balance = nh[-1] ** 2 - nh[0] ** 2 + 2 * int_v[-1] - 2 * _cumtrapz(fu, dt)[-1]
    scale = max(nh[0] ** 2, float(np.max(nh ** 2)), 1e-300)
    return EnergyReport(
        times=t, norm_H=nh, norm_V=nv, sup_H_sq=float(np.max(nh ** 2)), int_V_sq=float(int_v[-1]),
        cb4_lhs=lhs, cb4_rhs=rhs, cb4_lhs_literal=float(np.max(nh ** 2) + int_v[-1]), cb24_rhs=cb24,
        slack=slack, cb4_ok=bool(np.all(lhs <= rhs)), cb24_ok=viol.size == 0, cb24_violations=viol,
        balance_residual=float(balance), quadrature_consistent=abs(balance) <= 10 * dt * scale,
    )


@dataclass
class RegularityReport:
    times: np.ndarray
    sup_weighted_V_sq: float          # sup_{t>a} (t-a) |u(t)|_V^2
    int_weighted_A_sq: float          # int (t-a) |Au|_H^2 dt
    weighted_V: np.ndarray            # sqrt(t-a) |u(t)|_V
    norm_high: np.ndarray             # |u(t)|_{D(A^{(alpha+1)/2})}
    alpha: float


def regularity_report(path: Path, alpha: float) -> RegularityReport:
    """Parabolic smoothing diagnostics for a skeleton trajectory."""
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    t = path.grid.times
    s = t - t[0]
    nv = path.norms(0.5)
    na = path.norms(1.0)
    return RegularityReport(
        times=t,
        sup_weighted_V_sq=float(np.max(s[1:] * nv[1:] ** 2)),
        int_weighted_A_sq=float(_cumtrapz(s * na ** 2, path.grid.dt)[-1]),
        weighted_V=np.sqrt(s) * nv,
        norm_high=path.norms((alpha + 1) / 2),
        alpha=alpha,
    )
