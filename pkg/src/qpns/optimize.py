"""Limited-memory BFGS with Armijo backtracking on flat real vectors."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


@dataclass
class LbfgsResult:
    x: np.ndarray
    f: float
    grad: np.ndarray
    grad_norm: float
    iterations: int
    converged: bool
    message: str
    history: list[dict] = field(default_factory=list)


def lbfgs(fun: Callable[[np.ndarray], tuple[float, np.ndarray]], x0: np.ndarray, *,
          memory: int = 10, max_iters: int = 500, grad_tol: float = 1e-6,
          armijo: float = 1e-4, shrink: float = 0.5, max_backtracks: int = 60,
          relative: bool = False) -> LbfgsResult:
    """Minimise ``fun`` (returning value and gradient) from ``x0``.

    Every accepted step satisfies the Armijo condition, so the objective
    decreases strictly along the recorded history.  With ``relative`` the
    stopping test is |grad| <= grad_tol * max(1, |f|).
    """
    def small(gn, fv):
        return gn <= grad_tol * (max(1.0, abs(fv)) if relative else 1.0)

    x = np.array(x0, dtype=float)
    f, g = fun(x)
    gnorm = float(np.linalg.norm(g))
    pairs: deque[tuple[np.ndarray, np.ndarray, float]] = deque(maxlen=memory)
    history = [{"iter": 0, "J": float(f), "grad_norm": gnorm, "step": 0.0}]
    for it in range(1, max_iters + 1):
        if small(gnorm, f):
            return LbfgsResult(x, f, g, gnorm, it - 1, True, "gradient tolerance reached", history)
        d = -_two_loop(g, pairs)
        slope = float(d @ g)
        if slope >= 0:
            pairs.clear()
            d, slope = -g, -gnorm ** 2
        step, accepted = 1.0, False
        for _ in range(max_backtracks):
            x_new = x + step * d
            f_new, g_new = fun(x_new)
            if np.isfinite(f_new) and f_new <= f + armijo * step * slope and f_new < f:
                accepted = True
                break
            step *= shrink
        if not accepted:
            if pairs:
                pairs.clear()
                continue
            return LbfgsResult(x, f, g, gnorm, it - 1, False, "line search failed", history)
        s, y = x_new - x, g_new - g
        sy = float(s @ y)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            pairs.append((s, y, 1.0 / sy))
        else:
            # negative curvature along s: the stored model is stale, restart it
            pairs.clear()
        x, f, g = x_new, f_new, g_new
        gnorm = float(np.linalg.norm(g))
        history.append({"iter": it, "J": float(f), "grad_norm": gnorm, "step": step})
    converged = small(gnorm, f)
    return LbfgsResult(x, f, g, gnorm, max_iters, converged,
                       "gradient tolerance reached" if converged else "iteration limit", history)


def _two_loop(g: np.ndarray, pairs) -> np.ndarray:
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * float(s @ q)
        alphas.append(a)
        q -= a * y
    if pairs:
        s, y, _ = pairs[-1]
        q *= float(s @ y) / float(y @ y)
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * float(y @ q)
        q += (a - b) * s
    return q
