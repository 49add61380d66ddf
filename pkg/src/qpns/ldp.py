"""Large-deviation checks for the invariant measure at finite eps.

Ball and far-set frequencies come from ergodic time averages of one long
trajectory per eps; quasi-potentials come from the minimum-action solver.
For the linear (B-disabled) system the stationary law is an explicit
Gaussian, and exact counterparts of every estimate are provided.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import integrate, optimize

from .action import NoiseSpec
from .modal import ModalSystem
from .quasipotential import level_set_sample, ou_quasipotential, quasipotential_U
from .spectral import SpectralField, WaveLattice, make_lattice
from .stochastic import SdeConfig, batch_means, long_run

log = logging.getLogger(__name__)

MIN_DIRECTIONS = 8


@dataclass(frozen=True)
class ExperimentConfig:
    n: int = 8
    l: float = 2 * math.pi
    alpha: float = 2.0
    scale: float = 1.0
    eps_grid: tuple[float, ...] = (0.4, 0.2, 0.1, 0.05)
    target: tuple[tuple[int, int, float], ...] = ((1, 0, 0.2),)   # (k1, k2, amplitude)
    delta: float = 0.1
    s: float = 1.0
    gamma_lower: float | None = None     # default 0.3 U(x)
    gamma_upper: float | None = None     # default 0.3 s
    budget: float = 2000.0               # averaging time per eps
    dt: float = 0.01
    burn_in: float | None = None
    stride: int = 5
    batches: int = 20
    nonlinear: bool = True
    t_list: tuple[float, ...] = (1.0, 2.0, 4.0, 8.0, 16.0)
    mam_dt: float = 1 / 32
    level_horizon: float = 4.0
    level_dt: float = 1 / 16
    level_directions: int | None = None  # None: +/- every coordinate axis
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        eps = tuple(float(e) for e in self.eps_grid)
        if not eps or any(e <= 0 for e in eps) or any(b >= a for a, b in zip(eps, eps[1:])):
            raise ValueError("eps grid must be positive and strictly descending")
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if not self.s > 0:
            raise ValueError("level s must be positive")
        if not self.budget > 0:
            raise ValueError("budget must be positive")
        object.__setattr__(self, "eps_grid", eps)
        object.__setattr__(self, "target", tuple((int(a), int(b), float(c)) for a, b, c in self.target))
        object.__setattr__(self, "t_list", tuple(float(t) for t in self.t_list))

    @property
    def lattice(self) -> WaveLattice:
        return make_lattice(self.n, self.l)

    @property
    def spec(self) -> NoiseSpec:
        return NoiseSpec(self.lattice, self.alpha, self.scale)

    def target_field(self) -> SpectralField:
        lat = self.lattice
        x = SpectralField.zeros(lat)
        for k1, k2, amp in self.target:
            x = x + SpectralField.mode(lat, (k1, k2), amp)
        return x

    def sde(self, eps: float) -> SdeConfig:
        return SdeConfig(self.spec, eps, self.dt, self.budget, self.seed, self.burn_in,
                         nonlinear=self.nonlinear)


# -- exact Gaussian side (linear system) ---------------------------------------

def stationary_variances(spec: NoiseSpec, eps: float, system: ModalSystem | None = None) -> np.ndarray:
    """Per-coordinate variances eps q^2 / (2 lambda) of the linear stationary law."""
    system = system or ModalSystem(spec.lattice, backend="fft")
    return eps * system.diagonal(spec.multipliers) ** 2 / (2 * system.eigenvalues)


def gaussian_ball_log_probability(variances: np.ndarray, center: np.ndarray, radius: float) -> float:
    """log P(|G - c| < r) for G ~ N(0, diag(variances)), by Laplace inversion.

    P(X <= r^2) = (1 / pi) int_0^inf Re[exp(s r^2) L(s) / s] dy with
    s = a + i y, L the Laplace transform of X = |G - c|^2, and a the real
    saddle point; evaluating around the saddle keeps tiny probabilities
    accurate in relative terms.
    """
    v = np.asarray(variances, dtype=float)
    m2 = np.asarray(center, dtype=float) ** 2
    c = float(radius) ** 2

    def logint(s):
        d = 1 + 2 * s * v
        return s * c - 0.5 * np.sum(np.log(d)) - np.sum(s * m2 / d) - np.log(s)

    mean = float(np.sum(v + m2))
    if c >= 50 * mean:
        return 0.0
    # saddle point of the real log-integrand on a > 0
    res = optimize.minimize_scalar(lambda a: float(np.real(logint(a))), bounds=(1e-12, 1e12),
                                   method="bounded", options={"xatol": 1e-12})
    a = float(res.x)
    k0 = float(np.real(logint(a)))

    def f(y):
        return float(np.real(np.exp(logint(a + 1j * y) - k0)))

    # truncate where the integrand is negligible, then integrate panel by panel
    Y = 1.0 / max(c, 1e-300)
    while abs(math.exp(float(np.real(logint(a + 1j * Y))) - k0)) > 1e-17 and Y < 1e12:
        Y *= 2
    period = 2 * math.pi / max(c, 1e-300)
    edges = np.linspace(0.0, Y, int(min(4000, max(8, 2 * Y / period))) + 1)
    total = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        part, _ = integrate.quad(f, lo, hi, limit=200, epsabs=1e-18, epsrel=1e-10)
        total += part
    p = total / math.pi
    if not p > 0:
        return -math.inf
    return k0 + math.log(p)


def ellipsoid_distance(points: np.ndarray, weights: np.ndarray, s: float, iters: int = 100) -> np.ndarray:
    """Euclidean distance from each point to {x : sum_i w_i x_i^2 <= s}.

    ``weights`` is one row shared by all points or one row per point; an
    infinite weight pins that coordinate to 0.  Outside points project to
    x_i = p_i / (1 + mu w_i) with mu > 0 the root of the secular equation
    g(mu) = sum_i w_i x_i^2 - s, which is convex and decreasing, so Newton
    started left of the root climbs monotonically to it.
    """
    p = np.atleast_2d(np.asarray(points, dtype=float))
    w = np.broadcast_to(np.asarray(weights, dtype=float), p.shape)
    pinned = np.isinf(w)
    pinned_sq = np.sum(np.where(pinned, p * p, 0.0), axis=-1)
    p = np.where(pinned, 0.0, p)
    w = np.where(pinned, 0.0, w)
    wp2 = w * p * p
    total = np.sum(wp2, axis=-1)
    active = total > s
    # (1 + mu w_i) <= (1 + mu max w) gives a starting point left of the root
    wmax = np.max(w, axis=-1)
    mu = np.where(active & (wmax > 0), (np.sqrt(np.maximum(total, s) / s) - 1) / np.maximum(wmax, 1e-300), 0.0)
    for _ in range(iters):
        if not active.any():
            break
        q = 1 + mu[active, None] * w[active]
        g = np.sum(wp2[active] / q ** 2, axis=-1) - s
        dg = -2 * np.sum(wp2[active] * w[active] / q ** 3, axis=-1)
        step = -g / dg
        mu[active] += step
        done = step <= 1e-15 * np.maximum(mu[active], 1e-300)
        active[np.flatnonzero(active)[done]] = False
    x = p / (1 + mu[:, None] * w)
    return np.sqrt(np.sum((p - x) ** 2, axis=-1) + pinned_sq)


def gaussian_far_probability(variances: np.ndarray, weights: np.ndarray, s: float, delta: float,
                             samples: int = 200_000, seed: int = 0) -> tuple[float, float]:
    """Monte Carlo P(dist(G, K_s) >= delta) for the Gaussian law and ellipsoidal K_s; (p, stderr)."""
    rng = np.random.Generator(np.random.Philox(seed))
    g = rng.standard_normal((samples, len(variances))) * np.sqrt(variances)
    hit = ellipsoid_distance(g, weights, s) >= delta
    p = float(hit.mean())
    return p, math.sqrt(max(p * (1 - p), 1.0 / samples) / samples)


# -- ergodic estimates ----------------------------------------------------------

@dataclass
class Probability:
    p_hat: float
    ci: float
    ci_lo: float
    ci_hi: float
    hits: int
    samples: int
    zero_hits: bool
    widened: bool


def _probability(hits: np.ndarray, batches: int, eff_samples: float) -> Probability:
    bm = batch_means(hits, batches)
    n_hit = int(hits.sum())
    if n_hit == 0:
        # only a one-sided bound is meaningful: rule of three on decorrelated samples
        upper = min(1.0, 3.0 / max(eff_samples, 1.0))
        return Probability(0.0, 0.0, 0.0, upper, 0, bm.samples, True, bm.widened)
    return Probability(bm.estimate, bm.halfwidth, max(0.0, bm.lo), min(1.0, bm.hi), n_hit, bm.samples,
                       False, bm.widened)


def estimate_ball_probability(cfg: SdeConfig, center: SpectralField, delta: float, T_avg: float,
                              stride: int = 5, batches: int = 20) -> Probability:
    """Ergodic frequency of |u(t) - center|_H < delta after burn-in."""
    if not delta > 0:
        raise ValueError("delta must be positive")
    system = ModalSystem(cfg.lattice, cfg.rule, cfg.backend)
    c = system.coords(center.coeffs)
    run = long_run(cfg, T_avg, events={"ball": lambda z: float(np.sum((z - c) ** 2)) < delta * delta},
                   stride=stride)
    return _probability(run.indicators["ball"], batches, T_avg * cfg.lattice.lambda1)


class GaugeSet:
    """Orthant-wise ellipsoid through radii sampled on +/- every coordinate axis.

    In orthonormal coordinates K = {z : sum_i (z_i / rho_i(sign z_i))^2 <= 1},
    which passes through every sampled point rho e_i and is exact for the
    ellipsoidal level sets of the linear system.  Axes without a usable radius
    get radius 0, which only enlarges the far set.
    """

    def __init__(self, dim: int, axes: np.ndarray, signs: np.ndarray, radii: np.ndarray):
        self.pos = np.zeros(dim)
        self.neg = np.zeros(dim)
        r = np.where(np.isfinite(radii), radii, 0.0)
        for i, sg, rho in zip(axes, signs, r):
            (self.pos if sg > 0 else self.neg)[i] = rho
        self.used = int(np.count_nonzero(np.isfinite(radii)))

    def _weights(self, z: np.ndarray) -> np.ndarray:
        rho = np.where(z >= 0, self.pos, self.neg)
        with np.errstate(divide="ignore"):
            return np.where(rho > 0, 1.0 / (rho * rho), np.inf)

    def distance(self, z: np.ndarray) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=float))
        # the projection stays in the orthant of z, where the weights are constant
        return ellipsoid_distance(z, self._weights(z), 1.0)


# -- the experiment -------------------------------------------------------------

@dataclass
class EpsRow:
    eps: float
    p_ball: float
    ci_lo: float
    ci_hi: float
    ci: float
    hits: int
    samples: int
    zero_hits: bool
    slope: float | None
    U_target: float
    gamma_lower: float
    lower_bound_rhs: float
    lower_ok: bool
    p_far: float
    far_ci: float
    far_ci_lo: float
    far_ci_hi: float
    gamma_upper: float
    upper_bound_rhs: float
    upper_ok: bool
    exact_log_p_ball: float | None = None
    exact_slope: float | None = None
    exact_p_far: float | None = None


@dataclass
class LdpReport:
    config: dict
    U_target: float
    U_table: list[dict]
    U_linear: float
    regularity_proxy: float
    level_radii: list[float]
    level_flags: list[str]
    directions: int
    rows: list[EpsRow] = field(default_factory=list)

    @property
    def lower_ok(self) -> bool:
        return all(r.lower_ok for r in self.rows)

    @property
    def upper_ok(self) -> bool:
        return all(r.upper_ok for r in self.rows)

    def slope_trend(self) -> bool:
        """|slope - U| does not grow as eps decreases (over rows with finite slopes)."""
        gaps = [abs(r.slope - self.U_target) for r in self.rows if r.slope is not None]
        if len(gaps) < len(self.rows):
            return False
        return all(b <= a for a, b in zip(gaps, gaps[1:]))

    def to_json(self) -> str:
        return json.dumps(_clean(asdict(self)), indent=2, sort_keys=True)

    def write(self, out_dir) -> None:
        from pathlib import Path
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(self.to_json() + "\n")
        with open(out / "curves.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            cols = ["eps", "p_ball", "ci_lo", "ci_hi", "slope", "U_target", "lower_bound_rhs"]
            w.writerow(cols)
            for r in self.rows:
                w.writerow([_fmt(getattr(r, c)) for c in cols])
        with open(out / "tails.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["eps", "p_far", "ci_lo", "ci_hi", "bound"])
            for r in self.rows:
                w.writerow([_fmt(v) for v in (r.eps, r.p_far, r.far_ci_lo, r.far_ci_hi, r.upper_bound_rhs)])


def _fmt(v) -> str:
    if v is None:
        return ""
    return repr(float(v))


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def monitored_directions(system: ModalSystem, count: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """(axis, sign) pairs for +/- the coordinate axes, lowest modes first.

    ``count`` keeps only that many of them; None keeps all 2 * dim.
    """
    order = np.argsort(system.eigenvalues, kind="stable")
    axes = np.repeat(order, 2)
    signs = np.tile([1.0, -1.0], order.size)
    if count is not None:
        axes, signs = axes[:count], signs[:count]
    return axes, signs


def _eps_task(cfg: ExperimentConfig, eps: float, U: float, center: np.ndarray, gauge: GaugeSet,
              system: ModalSystem) -> EpsRow:
    run = long_run(cfg.sde(eps), cfg.budget, stride=cfg.stride, keep=True)
    z = run.states
    eff = cfg.budget * cfg.lattice.lambda1
    ball = _probability(np.sum((z - center) ** 2, axis=1) < cfg.delta ** 2, cfg.batches, eff)
    far = _probability(gauge.distance(z) >= cfg.delta, cfg.batches, eff)
    g_lo = 0.3 * U if cfg.gamma_lower is None else cfg.gamma_lower
    g_up = 0.3 * cfg.s if cfg.gamma_upper is None else cfg.gamma_upper
    lower_rhs = math.exp(-(U + g_lo) / eps)
    upper_rhs = math.exp(-(cfg.s - g_up) / eps)
    slope = -eps * math.log(ball.p_hat) if ball.p_hat > 0 else None
    row = EpsRow(
        eps=eps, p_ball=ball.p_hat, ci_lo=ball.ci_lo, ci_hi=ball.ci_hi, ci=ball.ci, hits=ball.hits,
        samples=ball.samples, zero_hits=ball.zero_hits, slope=slope, U_target=U, gamma_lower=g_lo,
        lower_bound_rhs=lower_rhs, lower_ok=(not ball.zero_hits) and ball.p_hat + ball.ci >= lower_rhs,
        p_far=far.p_hat, far_ci=far.ci, far_ci_lo=far.ci_lo, far_ci_hi=far.ci_hi, gamma_upper=g_up,
        upper_bound_rhs=upper_rhs, upper_ok=far.p_hat - far.ci <= upper_rhs,
    )
    if not cfg.nonlinear:
        var = stationary_variances(cfg.spec, eps, system)
        lp = gaussian_ball_log_probability(var, center, cfg.delta)
        row.exact_log_p_ball = lp
        row.exact_slope = -eps * lp
        weights = system.eigenvalues / system.diagonal(cfg.spec.multipliers) ** 2
        row.exact_p_far = gaussian_far_probability(var, weights, cfg.s, cfg.delta, seed=cfg.seed)[0]
    log.info("eps=%g: p_ball=%.3g (%d hits) p_far=%.3g", eps, ball.p_hat, ball.hits, far.p_hat)
    return row


def run_experiment(cfg: ExperimentConfig, U_override: float | None = None) -> LdpReport:
    """Quasi-potential of the target, level-set sample, then one ergodic run per eps."""
    spec = cfg.spec
    x = cfg.target_field()
    system = ModalSystem(cfg.lattice)
    if U_override is None:
        qp = quasipotential_U(x, spec, cfg.t_list, dt=cfg.mam_dt, workers=cfg.workers, nonlinear=cfg.nonlinear)
        U, table, proxy = qp.value, qp.table, qp.regularity_proxy
    else:
        U, table, proxy = U_override, [], float("nan")
    axes, signs = monitored_directions(system, cfg.level_directions)
    fields = []
    for i, sg in zip(axes, signs):
        e = np.zeros(system.dim)
        e[i] = sg
        fields.append(SpectralField(cfg.lattice, system.array(e)))
    steps = max(8, int(round(cfg.level_horizon / cfg.level_dt)))
    ls = level_set_sample(cfg.s, fields, spec, T_list=(cfg.level_horizon,), dt=cfg.level_horizon / steps,
                          nonlinear=cfg.nonlinear)
    gauge = GaugeSet(system.dim, axes, signs, ls.radii)
    if gauge.used < MIN_DIRECTIONS:
        warnings.warn(f"only {gauge.used} directions sample the level set", RuntimeWarning)
    center = system.coords(x.coeffs)
    job = lambda e: _eps_task(cfg, e, U, center, gauge, system)  # noqa: E731
    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            rows = list(pool.map(job, cfg.eps_grid))
    else:
        rows = [job(e) for e in cfg.eps_grid]
    return LdpReport(
        # the worker count changes how the run executes, not what it computes
        config=_clean({k: v for k, v in asdict(cfg).items() if k != "workers"}),
        U_target=U, U_table=table, U_linear=ou_quasipotential(x, spec),
        regularity_proxy=proxy, level_radii=[float(r) for r in ls.radii], level_flags=list(ls.flags),
        directions=gauge.used, rows=rows,
    )


def ldp_lower_check(report: LdpReport) -> list[tuple[float, bool, float | None]]:
    """(eps, verdict, slope) per eps for p_hat + CI >= exp(-(U + gamma) / eps)."""
    return [(r.eps, r.lower_ok, r.slope) for r in report.rows]


def ldp_upper_check(report: LdpReport) -> list[tuple[float, bool]]:
    """(eps, verdict) per eps for p_far - CI <= exp(-(s - gamma) / eps)."""
    return [(r.eps, r.upper_ok) for r in report.rows]
