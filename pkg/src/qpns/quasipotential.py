"""Minimum-action computation of the quasi-potential.

The control phi is the unknown: z' + Az + B(z, z) = Q phi, z(0) = 0 is solved
forward with the exponential-Euler scheme, and the endpoint constraint
z(T) = x is imposed with a quadratic penalty whose weight is raised until the
endpoint error is below tolerance.  Gradients are the exact discrete adjoint
of the forward sweep.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from .action import ControlPath, NoiseSpec, residual_H
from .modal import ModalSystem
from .nonlinear import DealiasRule, default_rule
from .optimize import lbfgs
from .skeleton import BLOWUP_NORM, BlowUpError, Path, TimeGrid, solve_skeleton
from .spectral import SpectralField, h_inner, h_norm_sq, norm_fractional

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class MamProblem:
    """Settings of one minimum-action solve on [0, horizon] with ``steps`` steps.

    ``grad_tol`` is relative: an inner solve stops once
    |grad J| <= grad_tol * max(1, J), which keeps the test meaningful when
    the penalty weight mu is large.  ``endpoint_tol`` defaults to 1e-3 |x|_H.
    """

    target: SpectralField
    spec: NoiseSpec
    horizon: float = 8.0
    steps: int = 256
    max_iters: int = 400
    grad_tol: float = 1e-6
    memory: int = 10
    armijo: float = 1e-4
    shrink: float = 0.5
    init: str = "seed"
    mu0: float = 10.0
    mu_factor: float = 10.0
    max_outer: int = 10
    endpoint_tol: float | None = None
    rule: DealiasRule | None = None
    nonlinear: bool = True
    backend: str = "auto"

    def __post_init__(self):
        if self.backend not in ("auto", "tensor", "fft"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if self.steps < 8:
            raise ValueError("need at least 8 time steps")
        if self.init not in ("zero", "seed"):
            raise ValueError(f"unknown initialization {self.init!r}")
        if self.target.lattice != self.spec.lattice:
            raise ValueError("target and noise spec live on different lattices")

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(0.0, self.horizon, self.steps)

    @property
    def lattice(self):
        return self.spec.lattice

    @property
    def dealias(self) -> DealiasRule:
        return default_rule(self.lattice, self.rule)

    @cached_property
    def dynamics(self) -> _Dynamics:
        return _Dynamics(self)

    @property
    def tolerance(self) -> float:
        if self.endpoint_tol is not None:
            return self.endpoint_tol
        return 1e-3 * self.target.norm()


@dataclass
class MamResult:
    control: ControlPath
    path: Path
    action: float
    grad_norm: float
    iterations: int
    converged: bool
    endpoint_error: float
    mu: float = 0.0
    history: list[dict] = field(default_factory=list, repr=False)
    message: str = ""

    def record(self, prob: MamProblem) -> dict:
        """JSON-ready run record."""
        return {
            "problem": {
                "n": prob.lattice.n, "l": prob.lattice.l, "alpha": prob.spec.alpha,
                "scale": prob.spec.scale, "horizon": prob.horizon, "steps": prob.steps,
                "nonlinear": prob.nonlinear, "rule": prob.dealias.kind, "init": prob.init,
                "target_norm": prob.target.norm(), "endpoint_tol": prob.tolerance,
            },
            "history": self.history,
            "action": self.action,
            "endpoint_error": self.endpoint_error,
            "grad_norm": self.grad_norm,
            "iterations": self.iterations,
            "converged": self.converged,
            "mu": self.mu,
            "message": self.message,
        }


# -- discrete objective and adjoint ------------------------------------------

class _Dynamics:
    """The forward sweep and its adjoint in real orthonormal coordinates."""

    def __init__(self, prob: MamProblem):
        self.grid = prob.grid
        self.nonlinear = prob.nonlinear
        self.sys = ModalSystem(prob.lattice, prob.rule, prob.backend)
        self.basis = self.sys.basis
        lam = self.sys.eigenvalues
        self.q = self.sys.diagonal(prob.spec.multipliers)
        self.decay = np.exp(-lam * self.grid.dt)
        self.gain = -np.expm1(-lam * self.grid.dt) / lam
        self.b = self.sys.b
        self.b_adjoint = self.sys.b_adjoint
        self.coords = self.sys.coords
        self.array = self.sys.array
        self.target = self.coords(prob.target.coeffs)
        self.w = self.grid.trapezoid_weights()

    def forward(self, a: np.ndarray) -> np.ndarray:
        f = 0.5 * self.q * (a[:-1] + a[1:])
        z = np.zeros_like(a)
        for j in range(self.grid.steps):
            rhs = f[j] - self.b(z[j]) if self.nonlinear else f[j]
            z[j + 1] = self.decay * z[j] + self.gain * rhs
            if not np.all(np.abs(z[j + 1]) < BLOWUP_NORM):
                raise BlowUpError(f"controlled path left the ball of radius {BLOWUP_NORM:g}")
        return z

    def objective(self, a: np.ndarray, mu: float) -> tuple[float, np.ndarray]:
        z = self.forward(a)
        miss = z[-1] - self.target
        return 0.5 * float(self.w @ np.sum(a * a, axis=1)) + 0.5 * mu * float(miss @ miss), z

    def gradient(self, a: np.ndarray, z: np.ndarray, mu: float,
                 states: np.ndarray | None = None) -> np.ndarray:
        """dJ/da_j by the backward sweep; adjoint variables dJ/dz_j go to ``states``."""
        m = self.grid.steps
        lam = mu * (z[-1] - self.target)
        grad = self.w[:, None] * a
        if states is not None:
            states[m] = lam
        for j in range(m - 1, -1, -1):
            # step j maps (z_j, a_j, a_{j+1}) to z_{j+1}; lam holds dJ/dz_{j+1}
            g = self.gain * lam
            src = 0.5 * self.q * g
            grad[j] += src
            grad[j + 1] += src
            lam = self.decay * lam
            if self.nonlinear:
                lam = lam - self.b_adjoint(z[j], g)
            if states is not None:
                states[j] = lam
        return grad


def _check_grid(phi: ControlPath, prob: MamProblem):
    if phi.grid != prob.grid or phi.lattice != prob.lattice:
        raise ValueError("control grid/lattice does not match the problem")


def mam_objective(phi: ControlPath, prob: MamProblem, mu: float = 1.0) -> tuple[float, float]:
    """J(phi) = 1/2 |phi|^2_{L^2} + mu/2 |z_phi(T) - x|^2; returns (J, penalty term).

    The L^2 norm uses the trapezoidal rule and z_phi is forced by
    Q (phi_j + phi_{j+1}) / 2 on step j.
    """
    _check_grid(phi, prob)
    dyn = prob.dynamics
    value, z = dyn.objective(dyn.coords(phi.states), mu)
    miss = z[-1] - dyn.target
    return value, 0.5 * mu * float(miss @ miss)


def mam_gradient(phi: ControlPath, prob: MamProblem, mu: float = 1.0) -> ControlPath:
    """L^2(0,T;H) gradient of the discrete objective.

    ``dJ[d] = sum_j w_j <g_j, d_j>_H`` with trapezoid weights w_j; g_j is
    phi_j plus Q applied to the step-averaged adjoint state.
    """
    _check_grid(phi, prob)
    dyn = prob.dynamics
    a = dyn.coords(phi.states)
    _, z = dyn.objective(a, mu)
    g = dyn.gradient(a, z, mu) / dyn.w[:, None]
    return ControlPath(phi.grid, phi.lattice, dyn.array(g))


def mam_adjoint(phi: ControlPath, prob: MamProblem, mu: float = 1.0) -> Path:
    """Adjoint states p_j = dJ/dz_j of the backward sweep, p_m = mu (z(T) - x)."""
    _check_grid(phi, prob)
    dyn = prob.dynamics
    a = dyn.coords(phi.states)
    _, z = dyn.objective(a, mu)
    p = np.empty_like(z)
    dyn.gradient(a, z, mu, p)
    return Path(prob.grid, prob.lattice, dyn.array(p))


# -- initial guesses ---------------------------------------------------------

def heteroclinic_seed(prob: MamProblem) -> np.ndarray:
    """Control that drives the time-reversed free decay from the target.

    The free decay from x over [0, T], run backwards, starts near 0, idles
    there and climbs to x at t = T; its residual Q^{-1} H(z) is the seed.
    """
    grid = prob.grid
    decay = solve_skeleton(prob.target, grid, prob.rule, prob.nonlinear)
    reversed_path = Path(grid, prob.lattice, decay.states[::-1].copy())
    h = residual_H(reversed_path, prob.rule, prob.nonlinear)
    return h.states * prob.spec.inverse_multipliers


def initial_control(prob: MamProblem) -> np.ndarray:
    if prob.init == "zero":
        return np.zeros((prob.steps + 1,) + prob.lattice.shape, dtype=complex)
    return heteroclinic_seed(prob)


# -- minimisation ------------------------------------------------------------

def mam_minimize(prob: MamProblem) -> MamResult:
    """Minimise the penalised action with penalty continuation.

    The optimiser works on y_j = sqrt(w_j) a_j (a_j the orthonormal
    coordinates of phi_j), for which the Euclidean and discrete L^2 geometries
    agree.
    """
    lat, grid = prob.lattice, prob.grid
    tol = prob.tolerance
    if prob.target.norm() == 0.0:
        zero = np.zeros((grid.steps + 1,) + lat.shape, dtype=complex)
        return MamResult(ControlPath(grid, lat, zero), Path(grid, lat, zero), 0.0, 0.0, 0, True, 0.0,
                         message="zero target")
    dyn = prob.dynamics
    root = np.sqrt(dyn.w)[:, None]
    shape = (grid.steps + 1, dyn.basis.shape[0])

    def fun_for(mu):
        def fun(y):
            a = y.reshape(shape) / root
            try:
                value, z = dyn.objective(a, mu)
            except BlowUpError:
                return math.inf, np.zeros_like(y)
            return value, (dyn.gradient(a, z, mu) / root).ravel()
        return fun

    y = (dyn.coords(initial_control(prob)) * root).ravel()
    mu = prob.mu0
    history: list[dict] = []
    iterations = 0
    for outer in range(prob.max_outer):
        res = lbfgs(fun_for(mu), y, memory=prob.memory, max_iters=prob.max_iters,
                    grad_tol=prob.grad_tol, armijo=prob.armijo, shrink=prob.shrink, relative=True)
        for h in res.history:
            history.append(dict(h, mu=mu, outer=outer))
        iterations += res.iterations
        y = res.x
        a = y.reshape(shape) / root
        z = dyn.forward(a)
        err = float(np.linalg.norm(z[-1] - dyn.target))
        log.debug("mu=%g: J=%.6g |grad|=%.2e endpoint=%.2e (%s)", mu, res.f, res.grad_norm, err, res.message)
        if err <= tol:
            break
        mu *= prob.mu_factor
    action = 0.5 * float(dyn.w @ np.sum(a * a, axis=1))
    converged = bool(res.converged and err <= tol)
    msg = res.message if err <= tol else f"endpoint error {err:.3e} above tolerance {tol:.3e}"
    return MamResult(ControlPath(grid, lat, dyn.array(a)), Path(grid, lat, dyn.array(z)), action,
                     res.grad_norm, iterations, converged, err, mu, history, msg)


# -- closed forms for the linear (B-free) system -----------------------------

def ou_quasipotential(x: SpectralField, spec: NoiseSpec, horizon: float = math.inf) -> float:
    """Minimal control energy of the linear system; sum over modes of lambda x^2 / q^2.

    With a finite horizon T each mode is divided by (1 - exp(-2 lambda T)).
    """
    lat = x.lattice
    lam = lat.safe_eigenvalues
    qi = spec.inverse_multipliers
    dens = lat.weights * lam * qi ** 2 * np.abs(x.coeffs) ** 2
    if math.isfinite(horizon):
        dens = dens / -np.expm1(-2 * lam * horizon)
    return float(np.sum(np.where(lat.mask, dens, 0.0)))


def ou_minimizer(x: SpectralField, grid: TimeGrid) -> Path:
    """Exact finite-horizon linear minimiser, x sinh(lambda t) / sinh(lambda T) per mode."""
    lat = x.lattice
    lam = lat.safe_eigenvalues
    t = grid.times[:, None, None]
    T = grid.b
    ratio = np.exp(lam * (t - T)) * -np.expm1(-2 * lam * t) / -np.expm1(-2 * lam * T)
    return Path(grid, lat, ratio[:, None] * x.coeffs)


# -- quasi-potential and level sets ------------------------------------------

@dataclass
class QuasiPotential:
    value: float
    table: list[dict]
    regularity_proxy: float
    best: MamResult | None = None

    def nonincreasing(self, atol: float = 1e-3) -> bool:
        vals = [r["action"] for r in self.table if r["converged"]]
        return all(b <= a + atol for a, b in zip(vals, vals[1:]))


def quasipotential_U(x: SpectralField, spec: NoiseSpec, T_list: Sequence[float] = (1, 2, 4, 8, 16), *,
                     dt: float = 1 / 32, workers: int = 1, **settings) -> QuasiPotential:
    """Minimum over the horizons in ``T_list`` of the minimum-action value.

    Every horizon uses the same time step ``dt``; ``settings`` are passed to
    :class:`MamProblem`.  Horizons whose solve fails to converge are dropped
    with a warning.
    """
    T_list = [float(T) for T in T_list]
    if not T_list:
        raise ValueError("T_list must not be empty")
    if any(b <= a for a, b in zip(T_list, T_list[1:])):
        raise ValueError("T_list must be strictly ascending")
    proxy = norm_fractional(x, (spec.alpha + 1) / 2)
    if x.norm() == 0.0:
        return QuasiPotential(0.0, [{"T": T, "action": 0.0, "converged": True, "endpoint_error": 0.0,
                                     "grad_norm": 0.0, "iterations": 0} for T in T_list], proxy)
    probs = [MamProblem(x, spec, T, max(8, int(round(T / dt))), **settings) for T in T_list]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(mam_minimize, probs))
    else:
        results = [mam_minimize(p) for p in probs]
    table, best = [], None
    for T, r in zip(T_list, results):
        table.append({"T": T, "action": r.action, "converged": r.converged,
                      "endpoint_error": r.endpoint_error, "grad_norm": r.grad_norm,
                      "iterations": r.iterations})
        if not r.converged:
            warnings.warn(f"MAM solve at T={T} did not converge: {r.message}", RuntimeWarning)
            continue
        if best is None or r.action < best.action:
            best = r
    value = best.action if best is not None else math.nan
    return QuasiPotential(value, table, proxy, best)


@dataclass
class LevelSet:
    """Star-shaped sample of the boundary of {U <= s}."""

    s: float
    directions: list[SpectralField]
    radii: np.ndarray                  # nan where the direction was excluded
    values: np.ndarray                 # U at the boundary point
    flags: list[str]

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.radii)

    def points(self) -> list[SpectralField]:
        return [d * r for d, r in zip(self.directions, self.radii) if np.isfinite(r)]

    def distance(self, x: SpectralField | np.ndarray) -> float | np.ndarray:
        """Distance from x to the union of the segments [0, rho(d) d].

        Accepts a single field or a raw coefficient array with leading batch axes.
        """
        if isinstance(x, SpectralField):
            return float(self.distance(x.coeffs))
        lat = self.directions[0].lattice
        xx = h_norm_sq(x, lat)
        best = np.sqrt(xx)  # the origin always belongs to the level set
        for d, r in zip(self.directions, self.radii):
            if not np.isfinite(r):
                continue
            proj = np.clip(h_inner(x, d.coeffs, lat), 0.0, r)
            dist_sq = np.maximum(xx - 2 * proj * h_inner(x, d.coeffs, lat) + proj ** 2, 0.0)
            best = np.minimum(best, np.sqrt(dist_sq))
        return best


def level_set_sample(s: float, directions: Sequence[SpectralField], spec: NoiseSpec,
                     evaluate: Callable[[SpectralField], float] | None = None, *,
                     rel_tol: float = 0.02, max_evals: int = 40, **settings) -> LevelSet:
    """Solve U(rho d) = s along each unit direction d by bracketing and bisection.

    ``evaluate`` defaults to :func:`quasipotential_U` with ``settings``.  Rays
    along which the computed U is not increasing are flagged and excluded.
    """
    if not s > 0:
        raise ValueError("level must be positive")
    if evaluate is None:
        def evaluate(y):
            return quasipotential_U(y, spec, **settings).value
    radii, values, flags = [], [], []
    for d in directions:
        if abs(d.norm() - 1.0) > 1e-8:
            raise ValueError("directions must have unit H norm")
        rho, val, flag = _ray_root(lambda r: evaluate(d * r), s, rel_tol, max_evals)
        radii.append(rho)
        values.append(val)
        flags.append(flag)
    return LevelSet(s, list(directions), np.array(radii), np.array(values), flags)


def _ray_root(U: Callable[[float], float], s: float, rel_tol: float, max_evals: int):
    seen: list[tuple[float, float]] = []

    def ev(r):
        v = float(U(r))
        seen.append((r, v))
        return v

    def monotone():
        pts = sorted(seen)
        return all(b[1] >= a[1] - 1e-9 * max(1.0, abs(a[1])) for a, b in zip(pts, pts[1:]))

    r = 1.0
    v = ev(r)
    lo, hi = (0.0, 0.0), None
    # U grows roughly like rho^2 near the origin; use that to jump towards the level
    for _ in range(max_evals):
        if not math.isfinite(v):
            hi = (r, v)
            break
        if abs(v - s) <= 0.5 * rel_tol * s:
            return (r, v, "ok") if monotone() else (math.nan, v, "non-monotone")
        if v < s:
            lo = (r, v)
            r = r * min(4.0, math.sqrt(s / v)) if v > 0 else 2 * r
        else:
            hi = (r, v)
            break
        v = ev(r)
    if hi is None:
        return math.nan, v, "no bracket"
    for _ in range(max_evals - len(seen)):
        (a, fa), (b, fb) = lo, hi
        if math.isfinite(fb) and fb > fa:
            # interpolate in rho^2, where U is close to linear
            t = (s - fa) / (fb - fa)
            r2 = a * a + t * (b * b - a * a)
            r = math.sqrt(r2)
            if not (a + 0.05 * (b - a) <= r <= b - 0.05 * (b - a)):
                r = 0.5 * (a + b)
        else:
            r = 0.5 * (a + b)
        v = ev(r)
        if not monotone():
            return math.nan, v, "non-monotone"
        if abs(v - s) <= 0.5 * rel_tol * s:
            return r, v, "ok"
        if v < s:
            lo = (r, v)
        else:
            hi = (r, v)
    return math.nan, v, "bisection limit"


@dataclass
class DecayReport:
    times: np.ndarray
    norms: np.ndarray
    target_norm: float
    left_half_max: float
    monotone: bool

    @property
    def left_ratio(self) -> float:
        return self.left_half_max / self.target_norm if self.target_norm > 0 else 0.0


def minimizer_decay_report(result: MamResult, alpha: float) -> DecayReport:
    """Trajectory of |z*(t)|_{D(A^{(alpha+1)/2})}; its left part should be near 0."""
    path = result.path
    norms = path.norms((alpha + 1) / 2)
    t = path.grid.times
    half = t <= 0.5 * (t[0] + t[-1])
    return DecayReport(t, norms, float(norms[-1]) if norms.size else 0.0,
                       float(np.max(norms[half])), bool(np.all(np.diff(norms) >= -1e-12 * max(1.0, norms.max()))))


def write_record(result: MamResult, prob: MamProblem, dest) -> None:
    with open(dest, "w") as fh:
        json.dump(result.record(prob), fh, indent=2, sort_keys=True)
