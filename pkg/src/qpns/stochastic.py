"""Stochastic forcing: du + Au dt + B(u, u) dt = sqrt(eps) dw with w a Q-Wiener process.

The linear part, noise included, is integrated exactly (Ornstein-Uhlenbeck
transition per mode) and B is frozen at the left node.  Every trajectory owns
a counter-based Philox stream keyed by (seed, trajectory index), so results do
not depend on how trajectories are scheduled.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy import stats

from .action import NoiseSpec
from .modal import ModalSystem
from .nonlinear import DealiasRule, default_rule
from .skeleton import BLOWUP_NORM, BlowUpError, imex_raw
from .spectral import SpectralField, WaveLattice, hermitize

CHUNK_STEPS = 2048
CHUNK_TRAJ = 64


@dataclass(frozen=True, eq=False)
class SdeConfig:
    spec: NoiseSpec
    eps: float
    dt: float = 0.01
    horizon: float = 10.0
    seed: int = 0
    burn_in: float | None = None     # defaults to 10 / lambda_1
    rule: DealiasRule | None = None
    nonlinear: bool = True
    backend: str = "auto"

    def __post_init__(self):
        if not self.eps >= 0:
            raise ValueError("eps must be nonnegative")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if self.burn_in is not None and self.burn_in < 0:
            raise ValueError("burn_in must be nonnegative")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @property
    def lattice(self) -> WaveLattice:
        return self.spec.lattice

    @property
    def burn(self) -> float:
        return 10.0 / self.lattice.lambda1 if self.burn_in is None else self.burn_in

    def steps_for(self, t: float) -> int:
        k = round(t / self.dt)
        if abs(k * self.dt - t) > 1e-9 * max(1.0, t):
            raise ValueError(f"time {t} is not a multiple of dt = {self.dt}")
        return int(k)


def trajectory_rng(seed: int, index: int) -> np.random.Generator:
    """Independent Philox stream for trajectory ``index``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=(int(index),))))


# -- noise -------------------------------------------------------------------

def _gaussian_field(lattice: WaveLattice, std: np.ndarray, rng: np.random.Generator,
                    size: tuple[int, ...] = ()) -> np.ndarray:
    """Coefficients with independent N(0, std^2) coordinates along every orthonormal mode."""
    shape = size + lattice.shape[1:]
    xi = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    amp = np.where(lattice.independent, std, 0.0) * xi / (np.sqrt(2.0) * lattice.l)
    return hermitize(lattice.perp * amp[..., None, :, :], lattice)


def sample_noise_increment(spec: NoiseSpec, dt: float, rng: np.random.Generator) -> SpectralField:
    """Delta w over a step dt: E |Delta w|_H^2 = Tr[QQ*] dt."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    lat = spec.lattice
    return SpectralField(lat, _gaussian_field(lat, spec.multipliers * math.sqrt(dt), rng))


def convolution_std(spec: NoiseSpec, dt: float) -> np.ndarray:
    """Per-mode std of int_0^dt e^{-A(dt-s)} Q dw(s): q sqrt((1 - e^{-2 lambda dt}) / (2 lambda))."""
    lam = spec.lattice.safe_eigenvalues
    return spec.multipliers * np.sqrt(-np.expm1(-2 * lam * dt) / (2 * lam))


def step_sde(u: SpectralField, cfg: SdeConfig, rng: np.random.Generator) -> SpectralField:
    """One exponential-Euler step with the exact stochastic convolution."""
    lat = u.lattice
    if lat != cfg.lattice:
        raise ValueError("state and noise spec live on different lattices")
    out = imex_raw(u.coeffs, None, cfg.dt, lat, default_rule(lat, cfg.rule), cfg.nonlinear)
    if cfg.eps > 0:
        out = out + math.sqrt(cfg.eps) * _gaussian_field(lat, convolution_std(cfg.spec, cfg.dt), rng)
    nrm = float(np.sqrt(np.sum(lat.weights * np.abs(out) ** 2)))
    if not np.isfinite(nrm) or nrm > BLOWUP_NORM:
        raise BlowUpError(f"|u|_H = {nrm:.3e} after a stochastic step")
    return SpectralField(lat, out)


# -- batched integration in orthonormal coordinates ---------------------------

class _Stepper:
    def __init__(self, cfg: SdeConfig):
        self.cfg = cfg
        self.sys = ModalSystem(cfg.lattice, cfg.rule, cfg.backend)
        lam = self.sys.eigenvalues
        self.decay = np.exp(-lam * cfg.dt)
        self.gain = -np.expm1(-lam * cfg.dt) / lam
        q = self.sys.diagonal(cfg.spec.multipliers)
        self.noise = math.sqrt(cfg.eps) * q * np.sqrt(-np.expm1(-2 * lam * cfg.dt) / (2 * lam))

    def run(self, z: np.ndarray, xi: np.ndarray, record: Callable[[int, np.ndarray], None], offset: int):
        """Advance over the leading-step axis of ``xi`` (shape (steps, ..., dim))."""
        for s in range(xi.shape[0]):
            nxt = self.decay * z + self.noise * xi[s]
            if self.cfg.nonlinear:
                nxt -= self.gain * self.sys.b(z)
            z = nxt
            if not np.all(np.abs(z) < BLOWUP_NORM):
                raise BlowUpError(f"stochastic trajectory left the ball of radius {BLOWUP_NORM:g}")
            record(offset + s + 1, z)
        return z


def _initial_coords(stepper: _Stepper, x0: SpectralField | None) -> np.ndarray:
    if x0 is None:
        return np.zeros(stepper.sys.dim)
    if x0.lattice != stepper.cfg.lattice:
        raise ValueError("initial state and noise spec live on different lattices")
    return stepper.sys.coords(x0.coeffs)


def _norms_at(cfg: SdeConfig, x0: SpectralField | None, first: int, count: int,
              record_steps: list[int]) -> np.ndarray:
    """|u|_H^2 at the recorded steps for trajectories first .. first+count-1."""
    st = _Stepper(cfg)
    rngs = [trajectory_rng(cfg.seed, first + i) for i in range(count)]
    z = np.broadcast_to(_initial_coords(st, x0), (count, st.sys.dim)).copy()
    out = np.empty((count, len(record_steps)))
    where = {k: j for j, k in enumerate(record_steps)}

    def record(step, zz):
        j = where.get(step)
        if j is not None:
            out[:, j] = np.sum(zz * zz, axis=-1)

    total = max(record_steps)
    done = 0
    while done < total:
        block = min(CHUNK_STEPS, total - done)
        xi = np.stack([r.standard_normal((block, st.sys.dim)) for r in rngs], axis=1)
        z = st.run(z, xi, record, done)
        done += block
    return out


def simulate_norms(cfg: SdeConfig, t_list, samples: int, x0: SpectralField | None = None,
                   workers: int = 1) -> np.ndarray:
    """|u(t)|_H^2 for ``samples`` independent trajectories at each t in ``t_list``."""
    steps = [cfg.steps_for(t) for t in t_list]
    chunks = [(i, min(CHUNK_TRAJ, samples - i)) for i in range(0, samples, CHUNK_TRAJ)]
    job = lambda c: _norms_at(cfg, x0, c[0], c[1], steps)  # noqa: E731
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(job, chunks))
    else:
        parts = [job(c) for c in chunks]
    return np.concatenate(parts, axis=0)


# -- exponential moments -----------------------------------------------------

def gamma_bar(spec: NoiseSpec) -> float:
    """min(lambda_1 / (2 |Q|^2), lambda_1 / (2 Tr QQ*))."""
    lam1 = spec.lattice.lambda1
    return min(lam1 / (2 * spec.op_norm_sq), lam1 / (2 * spec.trace))


def tail_thresholds(spec: NoiseSpec, s: float) -> tuple[float, float]:
    """(R_s, eps_s) = (sqrt(2 s / gamma_bar), R_s^2 gamma_bar / (2 ln 2))."""
    if not s > 0:
        raise ValueError("s must be positive")
    g = gamma_bar(spec)
    r = math.sqrt(2 * s / g)
    return r, r * r * g / (2 * math.log(2))


@dataclass
class MomentRow:
    t: float
    estimate: float
    stderr: float
    bound: float
    censored: int
    samples: int

    @property
    def holds(self) -> bool:
        return self.censored == 0 and self.estimate + 2 * self.stderr <= self.bound


EXP_LIMIT = 700.0


def exponential_moment_estimate(cfg: SdeConfig, t_list, samples: int = 500,
                                x0: SpectralField | None = None, workers: int = 1) -> list[MomentRow]:
    """Monte Carlo E exp((gamma_bar / eps) |u(t)|_H^2) against e^{-lambda_1 t / 2} e^{(gamma_bar/eps)|x|^2} + 2.

    Samples whose exponent exceeds EXP_LIMIT are counted as censored; any
    censoring makes the estimate infinite rather than silently biased.
    """
    if samples < 100:
        raise ValueError("need at least 100 samples")
    if not cfg.eps > 0:
        raise ValueError("eps must be positive")
    g = gamma_bar(cfg.spec) / cfg.eps
    x_sq = 0.0 if x0 is None else x0.norm() ** 2
    norms = simulate_norms(cfg, t_list, samples, x0, workers)
    rows = []
    lam1 = cfg.lattice.lambda1
    for j, t in enumerate(t_list):
        e = g * norms[:, j]
        cens = int(np.sum(e > EXP_LIMIT))
        vals = np.exp(np.minimum(e, EXP_LIMIT))
        est = math.inf if cens else float(vals.mean())
        se = math.inf if cens else float(vals.std(ddof=1) / math.sqrt(samples))
        bound = math.exp(-lam1 * t / 2 + min(g * x_sq, EXP_LIMIT)) + 2
        rows.append(MomentRow(float(t), est, se, bound, cens, samples))
    return rows


def write_moment_csv(rows: list[MomentRow], dest) -> None:
    with open(dest, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "estimate", "stderr", "bound"])
        for r in rows:
            w.writerow([repr(r.t), repr(r.estimate), repr(r.stderr), repr(r.bound)])


# -- ergodic averages ----------------------------------------------------------

@dataclass
class TrajectoryStats:
    """Recorded samples of one long trajectory after burn-in."""

    sample_dt: float
    norm_sq: np.ndarray
    indicators: dict[str, np.ndarray] = field(default_factory=dict)
    states: np.ndarray | None = None   # recorded coordinates when requested

    @property
    def count(self) -> int:
        return int(self.norm_sq.size)

    def hits(self, name: str) -> int:
        return int(self.indicators[name].sum())


def long_run(cfg: SdeConfig, T_avg: float, x0: SpectralField | None = None,
             events: Mapping[str, Callable[[np.ndarray], bool]] | None = None,
             stride: int = 1, index: int = 0, keep: bool = False) -> TrajectoryStats:
    """One trajectory: discard ``cfg.burn`` time units, then record every ``stride`` steps.

    ``events`` map names to predicates on the orthonormal coordinates of the
    state; with ``keep`` the recorded coordinates themselves are returned.
    """
    st = _Stepper(cfg)
    burn = cfg.steps_for(round(cfg.burn / cfg.dt) * cfg.dt)
    n_avg = int(round(T_avg / cfg.dt))
    if n_avg < stride:
        raise ValueError("averaging window shorter than one sample")
    total = burn + n_avg
    n_rec = n_avg // stride
    norms = np.empty(n_rec)
    events = dict(events or {})
    ind = {k: np.zeros(n_rec, dtype=bool) for k in events}
    states = np.empty((n_rec, st.sys.dim)) if keep else None
    rng = trajectory_rng(cfg.seed, index)

    def record(step, z):
        k = step - burn
        if k > 0 and k % stride == 0 and k // stride <= n_rec:
            j = k // stride - 1
            norms[j] = z @ z
            if states is not None:
                states[j] = z
            for name, pred in events.items():
                ind[name][j] = pred(z)

    z = _initial_coords(st, x0)
    done = 0
    while done < total:
        block = min(CHUNK_STEPS, total - done)
        z = st.run(z, rng.standard_normal((block, st.sys.dim)), record, done)
        done += block
    return TrajectoryStats(cfg.dt * stride, norms, ind, states)


@dataclass
class BatchMeans:
    estimate: float
    halfwidth: float
    lo: float
    hi: float
    batches: int
    samples: int
    widened: bool


def batch_means(series: np.ndarray, batches: int = 20, level: float = 0.95) -> BatchMeans:
    """Mean of a correlated series with a t-interval from non-overlapping batch means.

    Fewer than 10 usable batches widens the interval to the whole of [0, 1]
    for indicator series (and flags it).
    """
    x = np.asarray(series, dtype=float)
    n = x.size
    size = n // batches
    if size == 0:
        usable = n
        means = x
    else:
        usable = size * batches
        means = x[:usable].reshape(batches, size).mean(axis=1)
    est = float(x.mean()) if n else math.nan
    k = means.size
    widened = k < 10
    if k >= 2:
        half = float(stats.t.ppf(0.5 + level / 2, k - 1) * means.std(ddof=1) / math.sqrt(k))
    else:
        half = math.inf
    if widened:
        half = max(half, 1.0)
    return BatchMeans(est, half, est - half, est + half, k, n, widened)


@dataclass
class TailEstimate:
    R: float
    p_hat: float
    ci: float
    ci_lo: float
    ci_hi: float
    bound: float
    batches: int
    samples: int
    widened: bool

    @property
    def holds(self) -> bool:
        return self.p_hat + 2 * self.ci <= self.bound

    def row(self) -> dict:
        return {"R": self.R, "p_hat": self.p_hat, "ci_lo": self.ci_lo, "ci_hi": self.ci_hi, "bound": self.bound}


def tail_probability(cfg: SdeConfig, R: float, T_avg: float, bound: float = math.nan,
                     batches: int = 20, stride: int = 1) -> TailEstimate:
    """Ergodic estimate of nu_eps(|u|_H >= R) from one trajectory started at 0."""
    if R < 0:
        raise ValueError("R must be nonnegative")
    if not T_avg > cfg.burn:
        raise ValueError("averaging window must exceed the burn-in")
    run = long_run(cfg, T_avg, stride=stride)
    hit = run.norm_sq >= R * R
    bm = batch_means(hit, batches)
    if not hit.any():
        # batch means collapse to zero width; fall back to the rule of three
        # on roughly T_avg * lambda_1 decorrelated samples
        ci = min(1.0, 3.0 / max(T_avg * cfg.lattice.lambda1, 1.0))
        return TailEstimate(R, 0.0, ci, 0.0, ci, bound, bm.batches, bm.samples, bm.widened)
    return TailEstimate(R, bm.estimate, bm.halfwidth, max(0.0, bm.lo), min(1.0, bm.hi), bound,
                        bm.batches, bm.samples, bm.widened)


def write_tail_csv(rows: list[TailEstimate], dest) -> None:
    with open(dest, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["R", "p_hat", "ci_lo", "ci_hi", "bound"])
        for r in rows:
            w.writerow([repr(float(v)) for v in r.row().values()])
