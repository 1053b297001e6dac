"""Slow reference solvers used to cross-check the scaling solver and model.

The transport oracle minimises the entropic sink-augmented objective by
exponentiated-gradient (mirror) descent directly on the primal plan.  Each
row lives on a simplex scaled to ``1/N``; the sink column's stiff penalty is
treated as the exact constraint ``sum_i Q[i, sink] = beta_sink`` and enforced
by a KL (Bregman) projection whose only unknown is a scalar found by Newton's
method.  Nothing here shares the fixed-point structure of matrix scaling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ot_core import AugmentedProblem, OtError, TransportPlan

MAX_ORACLE_INSTANCES = 16
MAX_ORACLE_TOKENS = 8
MAX_ORACLE_KL_WEIGHT = 1e3


class OracleError(RuntimeError):
    """The oracle diverged or was misconfigured."""


@dataclass(frozen=True)
class OracleConfig:
    iterations: int = 200_000
    step: float | None = None  # default 1 / (epsilon + max token KL weight)
    seed: int = 0
    window: int = 1000
    stall: float = 1e-16


def _objective(q, cost_hat, beta, lam, epsilon) -> float:
    m = q.sum(axis=0)[:-1]
    b = beta[:-1]
    kl = np.sum(lam[:-1] * (np.where(m > 0, m * np.log(np.where(m > 0, m, 1.0) / b), 0.0) - m + b))
    pos = q > 0
    ent = np.sum(q[pos] * np.log(q[pos])) - q.sum()
    return float(np.sum(q * cost_hat) + kl + epsilon * ent)


def _project(p: np.ndarray, alpha: np.ndarray, sink_target: float, log_y: float):
    """KL projection onto {rows sum to alpha, sink column sums to sink_target}.

    The minimiser rescales row ``i`` by ``x_i`` and the sink column by a
    common factor ``y``; ``y`` solves a scalar monotone equation.
    """
    rest = p[:, :-1].sum(axis=1)
    sink = p[:, -1]

    def excess(ly):
        # sink mass minus target and its derivative in log y; monotone increasing
        w = 1.0 / (1.0 + rest * np.exp(-ly) / sink)
        share = alpha * w
        return share.sum() - sink_target, float(np.sum(share * (1.0 - w)))

    lo = hi = log_y
    width = 1.0
    while excess(lo)[0] > 0:
        lo -= width
        width *= 2.0
    width = 1.0
    while excess(hi)[0] < 0:
        hi += width
        width *= 2.0
    log_y = min(max(log_y, lo), hi)
    for _ in range(500):
        g, dg = excess(log_y)
        if g == 0.0:
            break
        if g > 0:
            hi = log_y
        else:
            lo = log_y
        trial = log_y - g / dg if dg > 0 else np.nan
        log_y = trial if lo < trial < hi else 0.5 * (lo + hi)
        if hi - lo < 1e-15 * max(1.0, abs(log_y)) or abs(g) < 1e-17:
            break
    y = np.exp(log_y)
    x = alpha / (rest + y * sink)
    q = p * x[:, None]
    q[:, -1] *= y
    return q, log_y


def oracle_solve(aug: AugmentedProblem, epsilon: float, cfg: OracleConfig = OracleConfig()) -> TransportPlan:
    """Mirror-descent minimiser of the entropic objective; returns the best iterate."""
    n, k1 = aug.cost_hat.shape
    if n > MAX_ORACLE_INSTANCES or k1 - 1 > MAX_ORACLE_TOKENS:
        raise OtError(f"oracle limited to N<={MAX_ORACLE_INSTANCES}, K<={MAX_ORACLE_TOKENS}")
    lam = aug.lambda_hat
    if np.max(lam[:-1]) > MAX_ORACLE_KL_WEIGHT:
        raise OtError("oracle step size is impractical for near-equality token constraints")
    cost_hat, beta, alpha = aug.cost_hat, aug.beta, aug.alpha
    step = cfg.step if cfg.step is not None else 1.0 / (epsilon + float(np.max(lam[:-1])))

    q, log_y = _project(np.tile(beta, (n, 1)), alpha, beta[-1], 0.0)
    value = _objective(q, cost_hat, beta, lam, epsilon)
    best_q, best_value = q, value
    window_start = value
    it = 0
    for it in range(1, cfg.iterations + 1):
        eta = step / (1.0 + (it - 1) / 10_000)
        m = q.sum(axis=0)
        if np.any(q <= 0) or not np.isfinite(value):
            raise OracleError(f"iterate left the positive orthant at iteration {it}; step too large")
        grad = cost_hat + epsilon * np.log(q)
        grad[:, :-1] += lam[:-1] * np.log(m[:-1] / beta[:-1])
        grad -= grad.min(axis=1, keepdims=True)
        q_new, log_y = _project(q * np.exp(-eta * grad), alpha, beta[-1], log_y)
        moved = np.max(np.abs(q_new - q))
        q = q_new
        value = _objective(q, cost_hat, beta, lam, epsilon)
        if value < best_value:
            best_q, best_value = q, value
        if it % cfg.window == 0:
            if value > window_start + 1e-12 * max(1.0, abs(window_start)):
                raise OracleError(f"objective rose over window ending at iteration {it}")
            window_start = value
        if moved < cfg.stall:
            break

    k = k1 - 1
    residual = float(np.max(np.abs(best_q.sum(axis=1) - alpha)))
    return TransportPlan(
        mass=best_q[:, :k].copy(),
        sink_mass=best_q[:, k].copy(),
        iterations=it,
        residual=residual,
        rho=aug.rho,
    )


def finite_diff_gradient(f, point, h: float = 1e-5) -> np.ndarray:
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h`` per coordinate."""
    x = np.array(point, dtype=np.float64, copy=True)
    flat = x.reshape(-1)
    grad = np.zeros(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(x.copy())
        flat[i] = orig - h
        down = f(x.copy())
        flat[i] = orig
        grad[i] = (up - down) / (2.0 * h)
    return grad.reshape(x.shape)
