"""Noise operator Q = sigma A^{-alpha/2}, the residual map and the action functional."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .nonlinear import DealiasRule, convection, default_rule
from .skeleton import ForcingPath, Path, solve_skeleton
from .spectral import LatticeMismatch, SpectralField, WaveLattice

OVERFLOW_GUARD = 1e150


@dataclass(frozen=True, eq=False)
class NoiseSpec:
    """Diagonal noise q_k = scale * lambda_k^{-alpha/2} on every retained mode."""

    lattice: WaveLattice
    alpha: float = 2.0
    scale: float = 1.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("noise scale must be positive")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")

    @property
    def trace_class(self) -> bool:
        """True when alpha > 1, i.e. QQ* is trace class in infinite dimensions."""
        return self.alpha > 1

    @cached_property
    def multipliers(self) -> np.ndarray:
        lat = self.lattice
        return np.where(lat.mask, self.scale * lat.safe_eigenvalues ** (-self.alpha / 2), 0.0)

    @cached_property
    def inverse_multipliers(self) -> np.ndarray:
        lat = self.lattice
        return np.where(lat.mask, lat.safe_eigenvalues ** (self.alpha / 2) / self.scale, 0.0)

    @property
    def op_norm_sq(self) -> float:
        return float(np.max(self.multipliers) ** 2)

    @property
    def trace(self) -> float:
        """Tr[QQ*]: q_k^2 summed over every retained wavenumber (k and -k both counted)."""
        lat = self.lattice
        return float(np.sum(lat.weights / lat.l ** 2 * self.multipliers ** 2))


class ControlPath(Path):
    """Nodal values phi(t_j) of a control; the forcing is Q phi."""


def _same(lattice: WaveLattice, spec: NoiseSpec):
    if lattice != spec.lattice:
        raise LatticeMismatch("field and noise spec live on different lattices")


def q_apply(phi: SpectralField, spec: NoiseSpec) -> SpectralField:
    _same(phi.lattice, spec)
    return SpectralField(phi.lattice, phi.coeffs * spec.multipliers)


def q_inverse(f: SpectralField, spec: NoiseSpec) -> SpectralField:
    _same(f.lattice, spec)
    return SpectralField(f.lattice, f.coeffs * spec.inverse_multipliers)


def time_derivative(states: np.ndarray, dt: float) -> np.ndarray:
    """Centered differences inside, second-order one-sided stencils at the ends."""
    m = states.shape[0] - 1
    if m < 1:
        raise ValueError("a path needs at least two nodes")
    d = np.empty_like(states)
    if m == 1:
        d[:] = (states[1] - states[0]) / dt
        return d
    d[1:-1] = (states[2:] - states[:-2]) / (2 * dt)
    d[0] = (-3 * states[0] + 4 * states[1] - states[2]) / (2 * dt)
    d[-1] = (3 * states[-1] - 4 * states[-2] + states[-3]) / (2 * dt)
    return d


def residual_H(path: Path, rule: DealiasRule | None = None, nonlinear: bool = True) -> ForcingPath:
    """H(u) = u' + Au + B(u, u) at every node of the path."""
    lat = path.lattice
    s = path.states
    out = time_derivative(s, path.grid.dt) + lat.eigenvalues * s
    if nonlinear:
        out = out + convection(s, s, lat, default_rule(lat, rule))
    return ForcingPath(path.grid, lat, out)


def _nodal_weighted(path: Path, spec: NoiseSpec, rule, nonlinear) -> np.ndarray:
    _same(path.lattice, spec)
    h = residual_H(path, rule, nonlinear)
    weighted = h.states * spec.inverse_multipliers
    return np.sqrt(np.sum(path.lattice.weights * np.abs(weighted) ** 2, axis=(-3, -2, -1)))


def action_S(path: Path, spec: NoiseSpec, rule: DealiasRule | None = None,
             nonlinear: bool = True) -> float:
    """S(u) = 1/2 int |Q^{-1} H(u)|_H^2 dt by the trapezoidal rule (inf on overflow)."""
    r = _nodal_weighted(path, spec, rule, nonlinear)
    if not np.all(np.isfinite(r)) or np.max(r) > OVERFLOW_GUARD:
        return math.inf
    return float(0.5 * np.sum(path.grid.trapezoid_weights() * r ** 2))


def action_row(path: Path, spec: NoiseSpec, rule: DealiasRule | None = None,
               nonlinear: bool = True) -> dict:
    """One record of the action report: t0, t1, dt, S, max_nodal_residual."""
    h = residual_H(path, rule, nonlinear)
    g = path.grid
    return {"t0": g.a, "t1": g.b, "dt": g.dt, "S": action_S(path, spec, rule, nonlinear),
            "max_nodal_residual": float(np.max(h.norms()))}


def write_action_csv(rows: list[dict], dest) -> None:
    with open(dest, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["t0", "t1", "dt", "S", "max_nodal_residual"])
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(float(v)) for k, v in r.items()})


def control_to_path(x0: SpectralField, phi: ControlPath, spec: NoiseSpec,
                    rule: DealiasRule | None = None, nonlinear: bool = True) -> Path:
    """Solve the skeleton equation started at x0 with forcing Q phi."""
    _same(phi.lattice, spec)
    f = ForcingPath(phi.grid, phi.lattice, phi.states * spec.multipliers)
    return solve_skeleton(x0, f, rule, nonlinear)


def l2_norm_sq(path: Path) -> float:
    """|phi|^2_{L^2(a,b;H)} by the trapezoidal rule."""
    return float(np.sum(path.grid.trapezoid_weights() * path.norms() ** 2))
