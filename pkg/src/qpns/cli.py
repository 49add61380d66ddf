"""Command line entry point: validate, skeleton, mam, sample, ldp.

Each subcommand reads an optional TOML config (``--config``), applies
``--set section.key=value`` overrides, writes its artifacts into the output
directory and exits 0 when every check it performs passes, 1 when one fails,
2 on configuration errors.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import platform
import sys
import time
from importlib import metadata
from pathlib import Path as FsPath

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .action import ControlPath, NoiseSpec
from .checkpoint import save_checkpoint
from .ldp import ExperimentConfig, run_experiment
from .nonlinear import DealiasRule, bilinear_B, convection, convection_adjoint, trilinear_b
from .quasipotential import MamProblem, mam_gradient, mam_objective, quasipotential_U
from .skeleton import ForcingPath, TimeGrid, energy_report, solve_skeleton
from .spectral import SpectralField, h_inner, inner_product, make_lattice, random_coeffs, random_field, stokes_apply
from .stochastic import (
    SdeConfig,
    exponential_moment_estimate,
    gamma_bar,
    tail_probability,
    tail_thresholds,
    write_moment_csv,
    write_tail_csv,
)

log = logging.getLogger("qpns")

DEFAULTS: dict[str, dict] = {
    "lattice": {"n": 16, "l": 2 * math.pi},
    "noise": {"alpha": 2.0, "scale": 1.0},
    "run": {"out_dir": "out", "workers": 1, "seed": 0, "nonlinear": True},
    "validate": {"fields": 20, "tol": 1e-10, "gradient_n": 8, "gradient_steps": 64, "gradient_tol": 1e-4},
    "skeleton": {"horizon": 2.0, "dt": 1e-3, "forcing": [], "initial_norm": 1.0},
    "mam": {"target": [[1, 0, 0.2]], "t_list": [1.0, 2.0, 4.0, 8.0, 16.0], "dt": 1 / 32,
            "init": "seed", "max_iters": 400, "grad_tol": 1e-6, "save_path": False},
    "sde": {"eps": 0.5, "dt": 0.01, "seed": 0, "burn_in": None, "horizon": 200.0,
            "samples": 500, "t_list": [1.0, 2.0, 4.0], "s": 1.0},
    "ldp": {"eps_grid": [0.4, 0.2, 0.1, 0.05], "target": [[1, 0, 0.2]], "delta": 0.1, "s": 1.0,
            "gamma_lower": None, "gamma_upper": None, "budget": 2000.0, "dt": 0.01, "stride": 5,
            "t_list": [1.0, 2.0, 4.0, 8.0, 16.0], "n": 8, "level_horizon": 4.0, "level_dt": 1 / 16,
            "level_directions": None},
}


class ConfigError(ValueError):
    pass


# -- configuration ---------------------------------------------------------------

def _parse_scalar(text: str):
    text = text.strip()
    if text.lower() in ("none", "null"):
        return None
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def parse_override(item: str) -> tuple[list[str], object]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, value = item.split("=", 1)
    path = key.strip().split(".")
    if len(path) != 2 or not all(path):
        raise ConfigError(f"override key {key!r} must be section.key")
    if "," in value and not value.strip().startswith("["):
        return path, [_parse_scalar(v) for v in value.split(",")]
    return path, _parse_scalar(value)


def load_config(path: str | None, overrides: list[str]) -> dict:
    cfg = {sec: dict(vals) for sec, vals in DEFAULTS.items()}
    if path:
        try:
            with open(path, "rb") as fh:
                user = tomllib.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
        _merge(cfg, user)
    for item in overrides:
        (sec, key), value = parse_override(item)
        _merge(cfg, {sec: {key: value}})
    return cfg


def _merge(cfg: dict, user: dict) -> None:
    for sec, vals in user.items():
        if sec not in cfg:
            raise ConfigError(f"unknown config section [{sec}]")
        if not isinstance(vals, dict):
            raise ConfigError(f"section [{sec}] must be a table")
        for key, value in vals.items():
            if key not in cfg[sec]:
                raise ConfigError(f"unknown key {sec}.{key}")
            cfg[sec][key] = value


def _get(cfg, sec, key, kind):
    value = cfg[sec][key]
    try:
        if kind is list:
            return list(value) if isinstance(value, (list, tuple)) else [value]
        if kind is bool and isinstance(value, str):
            return value.lower() in ("1", "true", "yes")
        return value if value is None else kind(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{sec}.{key} = {value!r} is not a valid {kind.__name__}") from exc


def _target(lattice, items) -> SpectralField:
    x = SpectralField.zeros(lattice)
    for item in items:
        if not isinstance(item, (list, tuple)) or len(item) != 3:
            raise ConfigError(f"target entries are [k1, k2, amplitude], got {item!r}")
        x = x + SpectralField.mode(lattice, (int(item[0]), int(item[1])), float(item[2]))
    return x


# -- outputs -------------------------------------------------------------------------

def _json_default(obj):
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not serializable: {type(obj).__name__}")


def _finite(obj):
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    if isinstance(obj, (float, np.floating)) and not math.isfinite(obj):
        return repr(float(obj))
    return obj


def write_json(path: FsPath, data) -> None:
    path.write_text(json.dumps(_finite(data), indent=2, sort_keys=True, default=_json_default) + "\n")


def _versions() -> dict:
    out = {"python": platform.python_version(), "numpy": np.__version__, "qpns": __version__}
    for pkg in ("scipy",):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = "unknown"
    return out


# keys that change how a run executes but not what it computes
EXECUTION_KEYS = {("run", "workers"), ("run", "out_dir")}


def write_manifest(out: FsPath, command: str, cfg: dict, seed: int, ok: bool) -> None:
    cfg = {sec: {k: v for k, v in vals.items() if (sec, k) not in EXECUTION_KEYS} for sec, vals in cfg.items()}
    canon = json.dumps(cfg, sort_keys=True, default=_json_default)
    write_json(out / "manifest.json", {
        "command": command,
        "config": cfg,
        "config_sha256": hashlib.sha256(canon.encode()).hexdigest(),
        "seed": seed,
        "versions": _versions(),
        "passed": ok,
    })


# -- subcommands -------------------------------------------------------------------

def cmd_validate(cfg: dict, out: FsPath) -> bool:
    lat = make_lattice(_get(cfg, "lattice", "n", int), _get(cfg, "lattice", "l", float))
    rng = np.random.default_rng(_get(cfg, "run", "seed", int))
    tol = _get(cfg, "validate", "tol", float)
    count = _get(cfg, "validate", "fields", int)
    worst = {"antisymmetry": 0.0, "orthogonality": 0.0, "torus_identity": 0.0, "adjoint": 0.0}
    rule = DealiasRule.two_thirds(lat.n)
    for _ in range(count):
        u, v, w = (random_field(lat, rng) for _ in range(3))
        buv = bilinear_B(u, v)
        scale = buv.norm() * w.norm() + 1e-300
        worst["antisymmetry"] = max(worst["antisymmetry"],
                                    abs(trilinear_b(u, v, w) + trilinear_b(u, w, v)) / scale)
        worst["orthogonality"] = max(worst["orthogonality"], abs(trilinear_b(u, v, v)) / (buv.norm() * v.norm()))
        au = stokes_apply(u)
        buu = bilinear_B(u, u)
        worst["torus_identity"] = max(worst["torus_identity"],
                                      abs(inner_product(au, buu)) / (au.norm() * buu.norm() + 1e-300))
        dv = convection(u.coeffs, v.coeffs, lat, rule) + convection(v.coeffs, u.coeffs, lat, rule)
        lhs = h_inner(dv, w.coeffs, lat)
        rhs = h_inner(v.coeffs, convection_adjoint(u.coeffs, w.coeffs, lat, rule), lat)
        worst["adjoint"] = max(worst["adjoint"], abs(lhs - rhs) / (abs(lhs) + 1e-300))
    # adjoint gradient against central differences on a small MAM problem
    gl = make_lattice(_get(cfg, "validate", "gradient_n", int), lat.l)
    spec = NoiseSpec(gl, _get(cfg, "noise", "alpha", float), _get(cfg, "noise", "scale", float))
    prob = MamProblem(random_field(gl, rng) * 0.5, spec, 2.0, _get(cfg, "validate", "gradient_steps", int))
    grid = prob.grid
    wts = grid.trapezoid_weights()
    grad_err = 0.0
    for _ in range(5):
        phi = ControlPath(grid, gl, random_coeffs(gl, rng, (grid.steps + 1,)))
        d = random_coeffs(gl, rng, (grid.steps + 1,))
        g = mam_gradient(phi, prob, 10.0)
        h = 1e-6
        jp = mam_objective(ControlPath(grid, gl, phi.states + h * d), prob, 10.0)[0]
        jm = mam_objective(ControlPath(grid, gl, phi.states - h * d), prob, 10.0)[0]
        fd = (jp - jm) / (2 * h)
        an = float(np.sum(wts * h_inner(g.states, d, gl)))
        grad_err = max(grad_err, abs(fd - an) / abs(fd))
    checks = {k: {"value": v, "tol": tol if k != "torus_identity" else 1e-8} for k, v in worst.items()}
    checks["adjoint"]["tol"] = 1e-10
    checks["gradient_fd"] = {"value": grad_err, "tol": _get(cfg, "validate", "gradient_tol", float)}
    for c in checks.values():
        c["ok"] = bool(c["value"] <= c["tol"])
    ok = all(c["ok"] for c in checks.values())
    write_json(out / "report.json", {"n": lat.n, "fields": count, "checks": checks, "passed": ok})
    return ok


def cmd_skeleton(cfg: dict, out: FsPath) -> bool:
    lat = make_lattice(_get(cfg, "lattice", "n", int), _get(cfg, "lattice", "l", float))
    rng = np.random.default_rng(_get(cfg, "run", "seed", int))
    horizon = _get(cfg, "skeleton", "horizon", float)
    dt = _get(cfg, "skeleton", "dt", float)
    steps = int(round(horizon / dt))
    grid = TimeGrid(0.0, horizon, steps)
    u0 = random_field(lat, rng) * _get(cfg, "skeleton", "initial_norm", float)
    f_items = _get(cfg, "skeleton", "forcing", list)
    forcing = None
    if f_items:
        f0 = _target(lat, f_items)
        forcing = ForcingPath(grid, lat, np.broadcast_to(f0.coeffs, (steps + 1,) + lat.shape))
    path = solve_skeleton(u0, forcing if forcing is not None else grid,
                          nonlinear=_get(cfg, "run", "nonlinear", bool))
    rep = energy_report(path, forcing)
    rep.write_csv(out / "curves.csv")
    ok = rep.cb4_ok and rep.cb24_ok
    write_json(out / "report.json", {
        "n": lat.n, "steps": steps, "dt": dt, "energy_inequality": rep.cb4_ok, "decay_bound": rep.cb24_ok,
        "decay_violations": len(rep.cb24_violations), "sup_H_sq": rep.sup_H_sq, "int_V_sq": rep.int_V_sq,
        "balance_residual": rep.balance_residual, "quadrature_consistent": rep.quadrature_consistent,
        "final_norm": float(rep.norm_H[-1]), "passed": ok,
    })
    return ok


def cmd_mam(cfg: dict, out: FsPath) -> bool:
    lat = make_lattice(_get(cfg, "lattice", "n", int), _get(cfg, "lattice", "l", float))
    spec = NoiseSpec(lat, _get(cfg, "noise", "alpha", float), _get(cfg, "noise", "scale", float))
    x = _target(lat, _get(cfg, "mam", "target", list))
    t_list = [float(t) for t in _get(cfg, "mam", "t_list", list)]
    qp = quasipotential_U(
        x, spec, t_list, dt=_get(cfg, "mam", "dt", float), workers=_get(cfg, "run", "workers", int),
        init=_get(cfg, "mam", "init", str), max_iters=_get(cfg, "mam", "max_iters", int),
        grad_tol=_get(cfg, "mam", "grad_tol", float), nonlinear=_get(cfg, "run", "nonlinear", bool))
    with open(out / "curves.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        cols = ["T", "action", "converged", "endpoint_error", "grad_norm", "iterations"]
        w.writerow(cols)
        for row in qp.table:
            w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in cols])
    monotone = qp.nonincreasing()
    any_conv = any(r["converged"] for r in qp.table)
    ok = monotone and any_conv
    record = None
    if qp.best is not None:
        best_T = min((r for r in qp.table if r["converged"]), key=lambda r: r["action"])["T"]
        record = {"T": best_T, "history": qp.best.history, "endpoint_error": qp.best.endpoint_error,
                  "grad_norm": qp.best.grad_norm, "iterations": qp.best.iterations}
        if _get(cfg, "mam", "save_path", bool):
            save_checkpoint(out / "minimizer.qpns", qp.best.path)
    write_json(out / "report.json", {
        "U": qp.value, "per_T": qp.table, "nonincreasing": monotone, "regularity_proxy": qp.regularity_proxy,
        "target_norm": x.norm(), "best": record, "passed": ok,
    })
    return ok


def cmd_sample(cfg: dict, out: FsPath) -> bool:
    lat = make_lattice(_get(cfg, "lattice", "n", int), _get(cfg, "lattice", "l", float))
    spec = NoiseSpec(lat, _get(cfg, "noise", "alpha", float), _get(cfg, "noise", "scale", float))
    sde = SdeConfig(spec, _get(cfg, "sde", "eps", float), _get(cfg, "sde", "dt", float),
                    _get(cfg, "sde", "horizon", float), _get(cfg, "sde", "seed", int),
                    _get(cfg, "sde", "burn_in", float), nonlinear=_get(cfg, "run", "nonlinear", bool))
    t_list = [float(t) for t in _get(cfg, "sde", "t_list", list)]
    rows = exponential_moment_estimate(sde, t_list, _get(cfg, "sde", "samples", int),
                                       workers=_get(cfg, "run", "workers", int))
    write_moment_csv(rows, out / "moments.csv")
    s = _get(cfg, "sde", "s", float)
    R, eps_s = tail_thresholds(spec, s)
    tails = []
    if sde.eps <= eps_s:
        tails.append(tail_probability(sde, R, sde.horizon, bound=math.exp(-s / sde.eps)))
    write_tail_csv(tails, out / "tails.csv")
    ok = all(r.holds for r in rows) and all(t.holds for t in tails)
    write_json(out / "report.json", {
        "gamma_bar": gamma_bar(spec), "R_s": R, "eps_s": eps_s, "eps": sde.eps,
        "moments": [{"t": r.t, "estimate": r.estimate, "stderr": r.stderr, "bound": r.bound,
                     "censored": r.censored, "holds": r.holds} for r in rows],
        "tails": [dict(t.row(), holds=t.holds, batches=t.batches, samples=t.samples) for t in tails],
        "tail_skipped": sde.eps > eps_s, "passed": ok,
    })
    return ok


def cmd_ldp(cfg: dict, out: FsPath) -> bool:
    c = cfg["ldp"]
    exp = ExperimentConfig(
        n=_get(cfg, "ldp", "n", int), l=_get(cfg, "lattice", "l", float),
        alpha=_get(cfg, "noise", "alpha", float), scale=_get(cfg, "noise", "scale", float),
        eps_grid=tuple(float(e) for e in _get(cfg, "ldp", "eps_grid", list)),
        target=tuple(tuple(t) for t in c["target"]), delta=float(c["delta"]), s=float(c["s"]),
        gamma_lower=_get(cfg, "ldp", "gamma_lower", float), gamma_upper=_get(cfg, "ldp", "gamma_upper", float),
        budget=float(c["budget"]), dt=float(c["dt"]), stride=int(c["stride"]),
        nonlinear=_get(cfg, "run", "nonlinear", bool), t_list=tuple(float(t) for t in c["t_list"]),
        level_horizon=_get(cfg, "ldp", "level_horizon", float), level_dt=_get(cfg, "ldp", "level_dt", float),
        level_directions=_get(cfg, "ldp", "level_directions", int),
        seed=_get(cfg, "run", "seed", int), workers=_get(cfg, "run", "workers", int))
    rep = run_experiment(exp)
    rep.write(out)
    return rep.lower_ok and rep.upper_ok


COMMANDS = {"validate": cmd_validate, "skeleton": cmd_skeleton, "mam": cmd_mam,
            "sample": cmd_sample, "ldp": cmd_ldp}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qpns", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="TOML configuration file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")
    p.add_argument("--out", help="output directory (overrides run.out_dir)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run_cli(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        out = FsPath(args.out or cfg["run"]["out_dir"])
        out.mkdir(parents=True, exist_ok=True)
        start = time.perf_counter()
        ok = COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    seed = cfg["run"]["seed"] if args.command != "sample" else cfg["sde"]["seed"]
    write_manifest(out, args.command, cfg, seed, ok)
    print(f"{args.command}: {'passed' if ok else 'FAILED'} in {time.perf_counter() - start:.2f} s "
          f"(artifacts in {out})", file=sys.stderr)
    return 0 if ok else 1


def main() -> None:
    sys.exit(run_cli())
