"""L-BFGS minimizer and a finite-difference gradient checker.

The two-loop recursion with a strong-Wolfe line search is implemented here
rather than borrowed from scipy so that the termination reporting, the
monotone-descent guarantee, and the best-so-far fallback behave exactly as
the rest of the toolkit expects (and stay deterministic across scipy
versions).
"""

from dataclasses import dataclass, field

import numpy as np

__all__ = ["LbfgsConfig", "OptimReport", "minimize", "grad_check"]


@dataclass
class LbfgsConfig:
    history: int = 10
    max_iters: int = 200
    grad_tol: float = 1e-8       # relative to the initial gradient norm
    step_tol: float = 1e-12
    initial_step: float = 1.0    # first trial step of every line search
    c1: float = 1e-4
    c2: float = 0.9

    def __post_init__(self):
        if self.history < 1:
            raise ValueError("history must be >= 1")
        if self.grad_tol <= 0 or self.step_tol <= 0:
            raise ValueError("tolerances must be positive")
        if not 0.0 < self.c1 < self.c2 < 1.0:
            raise ValueError("need 0 < c1 < c2 < 1")


@dataclass
class OptimReport:
    iterations: int
    final_value: float
    grad_norm: float
    reason: str  # grad_tol | step_tol | max_iters | line_search_failure
    trace: list = field(default_factory=list)


def _wolfe_line_search(fun, x, f0, g0, p, cfg, max_evals=25):
    """Strong-Wolfe line search (bracket + zoom, Nocedal & Wright alg. 3.5).

    Returns (step, f_new, g_new, x_new) or None on failure. Non-finite
    objective values are treated as +inf so the bracket backs off.
    """
    d0 = float(np.dot(g0, p))
    if d0 >= 0:
        return None

    def phi(a):
        xa = x + a * p
        f, g = fun(xa)
        f = float(f)
        if not np.isfinite(f):
            return np.inf, g, xa
        return f, g, xa

    def zoom(lo, f_lo, g_lo, hi, f_hi, evals):
        for _ in range(max_evals - evals):
            a = 0.5 * (lo + hi)
            f, g, xa = phi(a)
            d = np.inf if not np.all(np.isfinite(g)) else float(np.dot(g, p))
            if f > f0 + cfg.c1 * a * d0 or f >= f_lo:
                hi, f_hi = a, f
            else:
                if abs(d) <= -cfg.c2 * d0:
                    return a, f, g, xa
                if d * (hi - lo) >= 0:
                    hi, f_hi = lo, f_lo
                lo, f_lo, g_lo = a, f, g
            if abs(hi - lo) < 1e-16:
                break
        if f_lo < f0:  # sufficient-decrease-only fallback
            xa = x + lo * p
            f, g = fun(xa)
            return lo, float(f), g, xa
        return None

    a_prev, f_prev, g_prev = 0.0, f0, g0
    a = cfg.initial_step
    for i in range(max_evals):
        f, g, xa = phi(a)
        d = np.inf if not np.all(np.isfinite(g)) else float(np.dot(g, p))
        if f > f0 + cfg.c1 * a * d0 or (i > 0 and f >= f_prev):
            return zoom(a_prev, f_prev, g_prev, a, f, i + 1)
        if abs(d) <= -cfg.c2 * d0:
            return a, f, g, xa
        if d >= 0:
            return zoom(a, f, g, a_prev, f_prev, i + 1)
        a_prev, f_prev, g_prev = a, f, g
        a *= 2.0
    return None


def minimize(objective, x0, config=None):
    """Minimize a smooth objective returning (value, gradient).

    Two-loop-recursion L-BFGS; every accepted step strictly decreases the
    objective, and the returned x is always the best iterate seen.
    """
    cfg = config or LbfgsConfig()
    x = np.asarray(x0, dtype=float).ravel().copy()
    f, g = objective(x)
    f = float(f)
    g = np.asarray(g, dtype=float).ravel().copy()
    if not (np.isfinite(f) and np.all(np.isfinite(g))):
        raise ValueError("objective is non-finite at x0")

    g0_norm = float(np.linalg.norm(g))
    gtol = cfg.grad_tol * max(1.0, g0_norm)
    trace = [f]
    s_hist, y_hist, rho_hist = [], [], []
    reason = "max_iters"
    it = 0
    for it in range(1, cfg.max_iters + 1):
        gnorm = float(np.linalg.norm(g))
        if gnorm <= gtol:
            reason = "grad_tol"
            it -= 1
            break
        # two-loop recursion
        q = g.copy()
        alphas = []
        for s, y, rho in zip(reversed(s_hist), reversed(y_hist),
                             reversed(rho_hist)):
            a = rho * np.dot(s, q)
            alphas.append(a)
            q -= a * y
        if s_hist:
            gamma = np.dot(s_hist[-1], y_hist[-1]) / np.dot(y_hist[-1],
                                                            y_hist[-1])
            q *= gamma
        for (s, y, rho), a in zip(zip(s_hist, y_hist, rho_hist),
                                  reversed(alphas)):
            q += (a - rho * np.dot(y, q)) * s
        p = -q

        ls = _wolfe_line_search(objective, x, f, g, p, cfg)
        if ls is None:
            # retry once along steepest descent before giving up
            ls = _wolfe_line_search(objective, x, f, g, -g, cfg)
            if ls is None:
                reason = "line_search_failure"
                break
            s_hist, y_hist, rho_hist = [], [], []
        step, f_new, g_new, x_new = ls
        g_new = np.asarray(g_new, dtype=float).ravel()
        s = x_new - x
        y = g_new - g
        sy = float(np.dot(s, y))
        if sy > 1e-16:
            s_hist.append(s)
            y_hist.append(y)
            rho_hist.append(1.0 / sy)
            if len(s_hist) > cfg.history:
                s_hist.pop(0)
                y_hist.pop(0)
                rho_hist.pop(0)
        step_norm = float(np.linalg.norm(s))
        x, f, g = x_new, f_new, g_new
        trace.append(f)
        if step_norm <= cfg.step_tol * max(1.0, float(np.linalg.norm(x))):
            reason = "step_tol"
            break
    return x, OptimReport(it, f, float(np.linalg.norm(g)), reason, trace)


def grad_check(objective, x, step=1e-6, n_coords=16, seed=0):
    """Max relative error between the analytic gradient and central
    differences on a random subset of coordinates."""
    x = np.asarray(x, dtype=float).ravel()
    _, g = objective(x)
    g = np.asarray(g, dtype=float).ravel()
    rng = np.random.default_rng(seed)
    n = min(n_coords, x.size)
    coords = rng.choice(x.size, size=n, replace=False)
    worst = 0.0
    for k in coords:
        e = np.zeros_like(x)
        e[k] = step
        fp, _ = objective(x + e)
        fm, _ = objective(x - e)
        g_fd = (float(fp) - float(fm)) / (2.0 * step)
        err = abs(g_fd - g[k]) / max(1.0, abs(g_fd), abs(g[k]))
        worst = max(worst, err)
    return worst
