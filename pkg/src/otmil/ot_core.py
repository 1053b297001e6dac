"""Heterogeneity-aware optimal transport with a virtual mass-sink token.

The problem transports ``N`` instances (uniform mass ``1/N`` each) onto ``K``
tokens.  Only a fraction ``rho`` of the total mass may reach the real tokens;
their column masses are softly pulled toward ``rho / K`` by a KL penalty of
weight ``kl_weight``.  Appending a zero-cost sink column that must absorb the
remaining ``1 - rho`` turns this into a semi-relaxed unbalanced problem that
alternating matrix scaling solves:

    a <- alpha / (M b)
    b <- (beta / (M^T a)) ** (lambda / (lambda + epsilon))

with ``M = exp(-C_hat / epsilon)``.  The sink's KL weight ``iota`` is a large
finite stand-in for an exact constraint.

Besides the single-problem solvers this module exposes a batched, recorded
variant (:func:`unrolled_scaling`) together with its reverse-mode pass
(:func:`unrolled_scaling_backward`) so a model can differentiate through the
sweeps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_IOTA = 1e8
DEFAULT_EPSILON = 0.05
DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 5000
SINK_FLOOR = 1e-12
LOG_DOMAIN_RATIO = 500.0


class OtError(ValueError):
    """Invalid transport problem."""


class KernelUnderflowError(OtError):
    """``exp(-C / epsilon)`` vanished on a whole row or column."""


class ConvergenceError(RuntimeError):
    """Scaling stopped at ``max_iter`` with an unacceptable residual."""

    def __init__(self, message: str, plan: "TransportPlan | None" = None):
        super().__init__(message)
        self.plan = plan


@dataclass(frozen=True)
class OtProblem:
    """Cost matrix plus the mass ratio and penalty weights.

    ``global_constraint="equality"`` replaces the KL weight on the real tokens
    by ``iota`` (balanced columns).  ``token_prior`` optionally replaces the
    uniform target over the real tokens; it is renormalised to sum to one.
    """

    cost: np.ndarray
    rho: float = 1.0
    kl_weight: float = 0.1
    epsilon: float = DEFAULT_EPSILON
    iota: float = DEFAULT_IOTA
    global_constraint: str = "kl"
    token_prior: np.ndarray | None = None

    def __post_init__(self):
        cost = np.array(self.cost, dtype=np.float64, copy=True)
        if cost.ndim != 2 or cost.size == 0:
            raise OtError(f"cost must be a non-empty 2-D matrix, got shape {cost.shape}")
        if not np.all(np.isfinite(cost)):
            bad = tuple(int(i) for i in np.argwhere(~np.isfinite(cost))[0])
            raise OtError(f"cost entry {bad} is not finite")
        if np.any(cost < 0):
            raise OtError("cost entries must be nonnegative")
        if not (0.0 < self.rho <= 1.0):
            raise OtError(f"rho must lie in (0, 1], got {self.rho}")
        if self.kl_weight <= 0 or self.epsilon <= 0:
            raise OtError("kl_weight and epsilon must be positive")
        if self.iota < 1e6 * self.kl_weight:
            raise OtError(f"iota={self.iota:g} must be at least 1e6 * kl_weight")
        if self.global_constraint not in ("kl", "equality"):
            raise OtError(f"unknown global constraint {self.global_constraint!r}")
        cost.setflags(write=False)
        object.__setattr__(self, "cost", cost)
        if self.token_prior is not None:
            prior = np.asarray(self.token_prior, dtype=np.float64)
            if prior.shape != (cost.shape[1],) or np.any(prior <= 0):
                raise OtError("token_prior must be a positive vector of length K")
            object.__setattr__(self, "token_prior", prior / prior.sum())

    @property
    def n_instances(self) -> int:
        return self.cost.shape[0]

    @property
    def n_tokens(self) -> int:
        return self.cost.shape[1]


@dataclass(frozen=True)
class AugmentedProblem:
    """The sink-augmented problem: ``cost_hat = [C, 0]`` and its marginals."""

    cost_hat: np.ndarray
    beta: np.ndarray
    lambda_hat: np.ndarray
    alpha: np.ndarray

    @property
    def n_instances(self) -> int:
        return self.cost_hat.shape[0]

    @property
    def n_tokens(self) -> int:
        return self.cost_hat.shape[1] - 1

    @property
    def rho(self) -> float:
        return float(self.beta[:-1].sum())


@dataclass
class TransportPlan:
    mass: np.ndarray
    sink_mass: np.ndarray
    iterations: int
    residual: float
    rho: float
    converged: bool = True
    log_domain: bool = False

    @property
    def full(self) -> np.ndarray:
        """The ``N x (K+1)`` plan including the sink column."""
        return np.column_stack([self.mass, self.sink_mass])

    @property
    def n_instances(self) -> int:
        return self.mass.shape[0]


@dataclass
class ScalingState:
    """Scaling vectors and the fixed kernel/exponent of one solve."""

    a: np.ndarray
    b: np.ndarray
    kernel: np.ndarray
    exponent: np.ndarray


def build_augmented(problem: OtProblem) -> AugmentedProblem:
    n, k = problem.cost.shape
    cost_hat = np.zeros((n, k + 1))
    cost_hat[:, :k] = problem.cost
    if problem.token_prior is None:
        token_target = np.full(k, problem.rho / k)
    else:
        token_target = problem.rho * problem.token_prior
    beta = np.append(token_target, max(1.0 - problem.rho, SINK_FLOOR))
    token_weight = problem.iota if problem.global_constraint == "equality" else problem.kl_weight
    lambda_hat = np.append(np.full(k, token_weight), problem.iota)
    alpha = np.full(n, 1.0 / n)
    return AugmentedProblem(cost_hat, beta, lambda_hat, alpha)


def weighted_kl(marginal, beta, lambda_hat, generalized: bool = False) -> float:
    """Weighted KL ``sum_i lambda_i m_i log(m_i / beta_i)`` with ``0 log 0 = 0``.

    With ``generalized=True`` the mass-correction ``- m_i + beta_i`` is added
    per entry; that is the divergence whose minimiser the scaling iteration
    computes.
    """
    m = np.asarray(marginal, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    lam = np.broadcast_to(np.asarray(lambda_hat, dtype=np.float64), m.shape)
    if m.shape != beta.shape:
        raise OtError("marginal and beta differ in length")
    if np.any(beta <= 0):
        raise OtError("beta entries must be positive")
    if np.any(m < 0):
        raise OtError("marginal entries must be nonnegative")
    pos = m > 0
    terms = np.zeros_like(m)
    terms[pos] = m[pos] * np.log(m[pos] / beta[pos])
    if generalized:
        terms += beta - m
    return float(np.sum(lam * terms))


def entropic_objective(plan: TransportPlan, aug: AugmentedProblem, epsilon: float) -> float:
    """Objective of the entropic sink-augmented problem at ``plan``.

    ``<Q, C_hat> + sum_j lambda_j KLgen(Q^T 1 | beta) + epsilon sum Q (log Q - 1)``.
    """
    q = plan.full
    if q.shape != aug.cost_hat.shape:
        raise OtError(f"plan shape {q.shape} does not match cost {aug.cost_hat.shape}")
    linear = float(np.sum(q * aug.cost_hat))
    kl = weighted_kl(q.sum(axis=0), aug.beta, aug.lambda_hat, generalized=True)
    pos = q > 0
    ent = float(np.sum(q[pos] * np.log(q[pos])) - q.sum())
    return linear + kl + epsilon * ent


def marginal_residuals(plan: TransportPlan) -> tuple[float, float]:
    """``(max_i |row_sum_i - 1/N|, |total real mass - rho|)``."""
    n = plan.n_instances
    rows = plan.mass.sum(axis=1) + plan.sink_mass
    row_residual = float(np.max(np.abs(rows - 1.0 / n)))
    mass_residual = float(abs(plan.mass.sum() - plan.rho))
    return row_residual, mass_residual


# ---------------------------------------------------------------------------
# batched scaling kernel


@dataclass
class ScalingTrace:
    """Recorded sweeps of a batched solve, shape ``(B, N, K+1)`` throughout.

    ``a_hist[t]`` / ``b_hist[t]`` are the iterates after sweep ``t`` (``b_hist``
    has the initial ones prepended).  In log-domain mode they hold logarithms.
    ``active[t]`` marks the batch members that performed sweep ``t``.
    ``a_final`` is the closing row update that defines ``plan``; ``change``
    is each member's last convergence measure.
    """

    cost_hat: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    exponent: np.ndarray
    epsilon: float
    log_domain: bool
    a_hist: list = field(default_factory=list)
    b_hist: list = field(default_factory=list)
    active: list = field(default_factory=list)
    iterations: np.ndarray | None = None
    converged: np.ndarray | None = None
    change: np.ndarray | None = None
    a_final: np.ndarray | None = None
    plan: np.ndarray | None = None

    @property
    def kernel(self) -> np.ndarray:
        return np.exp(-self.cost_hat / self.epsilon)

    def state(self, index: int = 0) -> ScalingState:
        a, b = self.a_final[index], self.b_hist[-1][index]
        if self.log_domain:
            a, b = np.exp(a), np.exp(b)
        return ScalingState(a, b, self.kernel[index], self.exponent[index])


def use_log_domain(cost_hat: np.ndarray, epsilon: float, n_real: int | None = None) -> bool:
    """Auto-select rule: real costs or some whole row too large for ``exp``."""
    real = cost_hat[..., :n_real] if n_real is not None else cost_hat[..., :-1]
    if real.size and real.min() / epsilon > LOG_DOMAIN_RATIO:
        return True
    return bool(np.max(cost_hat.min(axis=-1)) / epsilon > LOG_DOMAIN_RATIO)


def _logsumexp(x: np.ndarray, axis: int) -> np.ndarray:
    top = np.max(x, axis=axis, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(x - top), axis=axis, keepdims=True)) + top
    return np.squeeze(out, axis=axis)


def unrolled_scaling(
    cost_hat: np.ndarray,
    alpha: np.ndarray,
    beta: np.ndarray,
    lambda_hat: np.ndarray,
    epsilon: float,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    log_domain: bool | None = None,
    record: bool = True,
) -> ScalingTrace:
    """Run the scaling sweeps on a batch of problems.

    Shapes: ``cost_hat (B, N, K+1)``, ``alpha (B, N)``, ``beta`` and
    ``lambda_hat (B, K+1)``.  Zero entries of ``alpha`` mark padding rows,
    which receive no mass.  Each batch member stops sweeping once the spread
    ``max_j - min_j`` of ``log(b_new / b)`` drops below ``tol``.  A common
    rescaling of ``b`` is ignored because the returned plan (built with a
    closing row update) does not depend on it.  Finished members are frozen
    so the recorded trace matches an individual solve.
    """
    if tol <= 0 or max_iter < 1:
        raise OtError("tol must be positive and max_iter at least 1")
    cost_hat = np.asarray(cost_hat, dtype=np.float64)
    bsz, _, k1 = cost_hat.shape
    exponent = lambda_hat / (lambda_hat + epsilon)
    if log_domain is None:
        log_domain = use_log_domain(cost_hat, epsilon)
    trace = ScalingTrace(cost_hat, alpha, beta, exponent, epsilon, log_domain)
    active = np.ones(bsz, dtype=bool)
    iterations = np.zeros(bsz, dtype=np.int64)
    last_change = np.full(bsz, np.inf)

    if log_domain:
        log_kernel = -cost_hat / epsilon
        with np.errstate(divide="ignore"):
            log_alpha = np.log(alpha)
        log_beta = np.log(beta)
        a = np.zeros_like(alpha)
        b = np.zeros((bsz, k1))
    else:
        kernel = np.exp(-cost_hat / epsilon)
        real_rows = alpha > 0
        if np.any(~np.any(kernel > 0, axis=2) & real_rows) or np.any(
            ~np.any(kernel * real_rows[:, :, None] > 0, axis=1)
        ):
            raise KernelUnderflowError(
                "exp(-C/epsilon) underflows on an entire row or column; "
                "raise epsilon or use log-domain mode"
            )
        a = np.zeros_like(alpha)
        b = np.ones((bsz, k1))
    if record:
        trace.b_hist.append(b.copy())

    for _ in range(max_iter):
        if log_domain:
            a_new = log_alpha - _logsumexp(log_kernel + b[:, None, :], axis=2)
            b_new = exponent * (log_beta - _logsumexp(log_kernel + a_new[:, :, None], axis=1))
            step = b_new - b
            change = step.max(axis=1) - step.min(axis=1)
        else:
            a_new = alpha / np.einsum("bnk,bk->bn", kernel, b)
            b_new = (beta / np.einsum("bnk,bn->bk", kernel, a_new)) ** exponent
            with np.errstate(divide="ignore", invalid="ignore"):
                step = np.log(b_new / b)
            step = np.where(np.isfinite(step), step, 0.0)
            change = step.max(axis=1) - step.min(axis=1)
        a = np.where(active[:, None], a_new, a)
        b = np.where(active[:, None], b_new, b)
        iterations += active
        if record:
            trace.a_hist.append(a)
            trace.b_hist.append(b)
            trace.active.append(active.copy())
        last_change = np.where(active, change, last_change)
        active = active & ~(change < tol)
        if not active.any():
            break

    if not record:
        trace.a_hist.append(a)
        trace.b_hist.append(b)
    trace.iterations = iterations
    trace.converged = ~active
    trace.change = last_change
    # closing row update: the returned plan meets the row marginal exactly
    if log_domain:
        a = log_alpha - _logsumexp(log_kernel + b[:, None, :], axis=2)
        trace.plan = np.exp(a[:, :, None] + log_kernel + b[:, None, :])
    else:
        a = alpha / np.einsum("bnk,bk->bn", kernel, b)
        trace.plan = a[:, :, None] * kernel * b[:, None, :]
    trace.a_final = a
    return trace


def unrolled_scaling_backward(trace: ScalingTrace, grad_plan: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of the recorded sweeps w.r.t. ``cost_hat``.

    ``grad_plan`` is the loss gradient w.r.t. the full ``(B, N, K+1)`` plan.
    Marginals and exponents are treated as constants.
    """
    if not trace.a_hist or len(trace.b_hist) != len(trace.a_hist) + 1:
        raise OtError("backward needs a trace recorded with record=True")
    eps = trace.epsilon
    f = trace.exponent
    grad_plan = np.asarray(grad_plan, dtype=np.float64)
    a_T, b_T = trace.a_final, trace.b_hist[-1]

    if trace.log_domain:
        log_kernel = -trace.cost_hat / eps
        gq = grad_plan * trace.plan
        g_kern = gq.copy()
        g_b = gq.sum(axis=1)
        # closing row update a_T = log alpha - LSE_k(K + b_T)
        z = log_kernel + b_T[:, None, :]
        w = -gq.sum(axis=2)[:, :, None] * np.exp(z - _logsumexp(z, axis=2)[:, :, None])
        g_kern += w
        g_b = g_b + w.sum(axis=1)
        g_a = np.zeros_like(a_T)
        for t in range(len(trace.a_hist) - 1, -1, -1):
            live = trace.active[t]
            a_t, b_prev = trace.a_hist[t], trace.b_hist[t]
            gb = np.where(live[:, None], g_b, 0.0)
            # b_t = f * (log beta - LSE_n(K + a_t))
            z = log_kernel + a_t[:, :, None]
            col = np.exp(z - _logsumexp(z, axis=1)[:, None, :])
            w = -(f * gb)[:, None, :] * col
            g_kern += w
            ga = np.where(live[:, None], g_a + w.sum(axis=2), g_a)
            # a_t = log alpha - LSE_k(K + b_prev)
            z = log_kernel + b_prev[:, None, :]
            row = np.exp(z - _logsumexp(z, axis=2)[:, :, None])
            ga_live = np.where(live[:, None], ga, 0.0)
            w = -ga_live[:, :, None] * row
            g_kern += w
            g_b = np.where(live[:, None], w.sum(axis=1), g_b)
            g_a = np.where(live[:, None], 0.0, ga)
        return -g_kern / eps

    kernel = trace.kernel
    g_kern = grad_plan * a_T[:, :, None] * b_T[:, None, :]
    g_a = np.einsum("bnk,bnk,bk->bn", grad_plan, kernel, b_T)
    g_b = np.einsum("bnk,bn,bnk->bk", grad_plan, a_T, kernel)
    # closing row update a_T = alpha / (M b_T)
    u = np.einsum("bnk,bk->bn", kernel, b_T)
    g_u = -g_a * a_T / u
    g_kern += g_u[:, :, None] * b_T[:, None, :]
    g_b = g_b + np.einsum("bnk,bn->bk", kernel, g_u)
    g_a = np.zeros_like(a_T)
    for t in range(len(trace.a_hist) - 1, -1, -1):
        live = trace.active[t][:, None]
        a_t, b_t, b_prev = trace.a_hist[t], trace.b_hist[t + 1], trace.b_hist[t]
        # b_t = (beta / v) ** f,  v = M^T a_t
        v = np.einsum("bnk,bn->bk", kernel, a_t)
        g_v = np.where(live, -g_b * b_t * f / v, 0.0)
        g_kern += a_t[:, :, None] * g_v[:, None, :]
        g_a = g_a + np.einsum("bnk,bk->bn", kernel, g_v)
        # a_t = alpha / u,  u = M b_prev
        u = np.einsum("bnk,bk->bn", kernel, b_prev)
        g_u = np.where(live, -g_a * a_t / u, 0.0)
        g_kern += g_u[:, :, None] * b_prev[:, None, :]
        g_b = np.where(live, np.einsum("bnk,bn->bk", kernel, g_u), g_b)
        g_a = np.where(live, 0.0, g_a)
    return -g_kern * kernel / eps


# ---------------------------------------------------------------------------
# single-problem entry points


def scaling_solve(
    aug: AugmentedProblem,
    epsilon: float,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    log_domain: bool | None = None,
) -> TransportPlan:
    """Solve one augmented problem by matrix scaling.

    Raises :class:`KernelUnderflowError` when the kernel vanishes on a row
    and :class:`ConvergenceError` when ``max_iter`` is exhausted while the
    convergence measure is still above ``100 * tol``.
    """
    if epsilon <= 0:
        raise OtError("epsilon must be positive")
    if log_domain is None:
        log_domain = use_log_domain(aug.cost_hat, epsilon, aug.n_tokens)
    trace = unrolled_scaling(
        aug.cost_hat[None],
        aug.alpha[None],
        aug.beta[None],
        aug.lambda_hat[None],
        epsilon,
        tol=tol,
        max_iter=max_iter,
        log_domain=log_domain,
        record=False,
    )
    q = trace.plan[0]
    k = aug.n_tokens
    residual = float(np.max(np.abs(q.sum(axis=1) - aug.alpha)))
    plan = TransportPlan(
        mass=q[:, :k].copy(),
        sink_mass=q[:, k].copy(),
        iterations=int(trace.iterations[0]),
        residual=residual,
        rho=aug.rho,
        converged=bool(trace.converged[0]),
        log_domain=log_domain,
    )
    if not np.all(np.isfinite(q)):
        raise ConvergenceError("scaling produced non-finite entries", plan)
    change = float(trace.change[0])
    if not plan.converged and change > 100 * tol:
        raise ConvergenceError(
            f"no convergence after {max_iter} sweeps (last change {change:.3g})", plan
        )
    return plan


def solve_heterogeneity_ot(
    problem: OtProblem,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    log_domain: bool | None = None,
) -> TransportPlan:
    aug = build_augmented(problem)
    plan = scaling_solve(aug, problem.epsilon, tol=tol, max_iter=max_iter, log_domain=log_domain)
    plan.rho = problem.rho
    return plan


def solve_semi_relaxed(
    cost,
    kl_weight: float = 0.1,
    epsilon: float = DEFAULT_EPSILON,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> TransportPlan:
    """All mass goes to the real tokens (``rho = 1``)."""
    problem = OtProblem(cost, rho=1.0, kl_weight=kl_weight, epsilon=epsilon)
    return solve_heterogeneity_ot(problem, tol=tol, max_iter=max_iter)
