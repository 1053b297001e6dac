"""OT-aggregated multiple-instance risk model.

Pipeline per bag::

    Z = F W_proj + b_proj                      (N x d)
    C_ij = || z_i/|z_i| - s_j/|s_j| ||         (N x K, entries in [0, 2])
    Q = heterogeneity-aware OT plan of C       (N x K, total mass rho)
    E = sum_j w_agg[j] (Q^T Z)_j + b_agg       (d)
    r = w_pred . E + b_pred

Bags in a batch are zero-padded to a common ``N``; padding rows carry no
source mass so they never receive transport.  Gradients are computed in
reverse mode through every recorded scaling sweep.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, fields

import numpy as np

from .data_io import Bag
from .ot_core import (
    DEFAULT_IOTA,
    SINK_FLOOR,
    ConvergenceError,
    ScalingTrace,
    TransportPlan,
    unrolled_scaling,
    unrolled_scaling_backward,
)


class ModelError(RuntimeError):
    pass


class GradientError(ModelError):
    """Non-finite gradient entries."""


PARAM_DIMS = {
    "proj_weight": ("feature", "latent"),
    "proj_bias": ("latent",),
    "tokens": ("token", "latent"),
    "agg_weight": ("token",),
    "agg_bias": ("one",),
    "pred_weight": ("latent",),
    "pred_bias": ("one",),
}


@dataclass
class ModelParams:
    proj_weight: np.ndarray
    proj_bias: np.ndarray
    tokens: np.ndarray
    agg_weight: np.ndarray
    agg_bias: np.ndarray
    pred_weight: np.ndarray
    pred_bias: np.ndarray

    def __post_init__(self):
        for f in fields(self):
            setattr(self, f.name, np.asarray(getattr(self, f.name), dtype=np.float64))
        d_in, d = self.proj_weight.shape
        if d > d_in:
            raise ModelError(f"latent width {d} exceeds feature width {d_in}")
        if self.tokens.shape[1] != d or self.pred_weight.shape != (d,) or self.proj_bias.shape != (d,):
            raise ModelError("parameter shapes disagree on the latent width")
        if self.agg_weight.shape != (self.tokens.shape[0],):
            raise ModelError("agg_weight must have one entry per token")

    @classmethod
    def initialize(cls, feature_dim: int, latent_dim: int, n_tokens: int, rng,
                   agg_init: str = "uniform") -> "ModelParams":
        """Random parameters.  ``agg_init="zero"`` starts every token weight at 0."""
        if agg_init not in ("uniform", "zero"):
            raise ModelError(f"unknown agg_init {agg_init!r}")

        def uniform(fan_in, shape):
            bound = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape)

        tokens = rng.normal(size=(n_tokens, latent_dim))
        tokens /= np.linalg.norm(tokens, axis=1, keepdims=True)
        agg = uniform(n_tokens, (n_tokens,))
        if agg_init == "zero":
            agg = np.zeros(n_tokens)
        return cls(
            proj_weight=uniform(feature_dim, (feature_dim, latent_dim)),
            proj_bias=uniform(feature_dim, (latent_dim,)),
            tokens=tokens,
            agg_weight=agg,
            agg_bias=np.zeros(1),
            pred_weight=uniform(latent_dim, (latent_dim,)),
            pred_bias=np.zeros(1),
        )

    def as_dict(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def copy(self) -> "ModelParams":
        return ModelParams(**{k: v.copy() for k, v in self.as_dict().items()})

    def flatten(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.as_dict().values()])

    def unflatten(self, flat) -> "ModelParams":
        out, pos = {}, 0
        for k, v in self.as_dict().items():
            out[k] = np.asarray(flat[pos: pos + v.size], dtype=np.float64).reshape(v.shape)
            pos += v.size
        return ModelParams(**out)

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]


@dataclass(frozen=True)
class SolverConfig:
    epsilon: float = 0.05
    kl_weight: float = 0.1
    iota: float = DEFAULT_IOTA
    tol: float = 1e-8
    max_iter: int = 5000
    global_constraint: str = "kl"
    log_domain: bool | None = None


# ---------------------------------------------------------------------------
# building blocks


def rho_schedule(t: float, ramp_epochs: int, iters_per_epoch: int, rho0: float,
                 shape: str = "sigmoid", fixed_rho: float = 0.8) -> float:
    """Mass ratio at iteration ``t``; reaches exactly 1.0 at ``t = T * I``."""
    if shape == "fixed":
        return float(fixed_rho)
    horizon = ramp_epochs * iters_per_epoch
    if horizon <= 0 or t >= horizon:
        return 1.0
    frac = t / horizon
    if shape == "sigmoid":
        return float(rho0 + (1.0 - rho0) * np.exp(-5.0 * (1.0 - frac) ** 2))
    if shape == "linear":
        return float(rho0 + (1.0 - rho0) * frac)
    raise ValueError(f"unknown ramp shape {shape!r}")


def project(features, params: ModelParams) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.shape[-1] != params.proj_weight.shape[0]:
        raise ModelError(
            f"feature width {features.shape[-1]} != projection input {params.proj_weight.shape[0]}"
        )
    return features @ params.proj_weight + params.proj_bias


def _unit_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    safe = np.where(norm > 0, norm, 1.0)
    return np.where(norm > 0, x / safe, 0.0), norm


def cost_matrix(z, tokens) -> np.ndarray:
    """Euclidean distance between L2-normalised rows; zero rows stay zero."""
    zhat, _ = _unit_rows(np.asarray(z, dtype=np.float64))
    shat, _ = _unit_rows(np.asarray(tokens, dtype=np.float64))
    return np.linalg.norm(zhat[..., :, None, :] - shat[..., None, :, :], axis=-1)


def aggregate(plan: TransportPlan | np.ndarray, z, params: ModelParams) -> np.ndarray:
    mass = plan.mass if isinstance(plan, TransportPlan) else np.asarray(plan)
    z = np.asarray(z, dtype=np.float64)
    if mass.shape[0] != z.shape[0] or mass.shape[1] != params.n_tokens:
        raise ModelError(f"plan {mass.shape} incompatible with Z {z.shape}")
    pooled = mass.T @ z
    return params.agg_weight @ pooled + params.agg_bias[0]


def attention_scores(plan: TransportPlan | np.ndarray, params: ModelParams) -> np.ndarray:
    mass = plan.mass if isinstance(plan, TransportPlan) else np.asarray(plan)
    return mass @ np.abs(params.agg_weight)


def cox_loss_and_grad(risks, times, events) -> tuple[float, np.ndarray]:
    """Breslow negative partial log-likelihood averaged over events, and d/d risks."""
    r = np.asarray(risks, dtype=np.float64)
    t = np.asarray(times, dtype=np.float64)
    e = np.asarray(events, dtype=bool)
    n_events = int(e.sum())
    if n_events == 0:
        return 0.0, np.zeros_like(r)
    at_risk = t[None, :] >= t[e][:, None]  # (events, B)
    shifted = r - r.max()
    weights = np.where(at_risk, np.exp(shifted)[None, :], 0.0)
    denom = weights.sum(axis=1)
    loss = np.sum(np.log(denom) + r.max() - r[e]) / n_events
    grad = (weights / denom[:, None]).sum(axis=0)
    grad[e] -= 1.0
    return float(loss), grad / n_events


def cox_loss(risks, times, events) -> float:
    return cox_loss_and_grad(risks, times, events)[0]


# ---------------------------------------------------------------------------
# batched forward / backward


def subsample(bag: Bag, max_patches: int | None, seed: int) -> Bag:
    """Deterministic per-bag instance subsample (keyed by seed and bag id)."""
    if max_patches is None or bag.n_instances <= max_patches:
        return bag
    rng = np.random.default_rng([seed, zlib.crc32(bag.bag_id.encode())])
    keep = np.sort(rng.choice(bag.n_instances, size=max_patches, replace=False))
    return Bag(bag.features[keep], bag.time, bag.event, bag.bag_id,
               [bag.instance_ids[i] for i in keep])


@dataclass
class ForwardTrace:
    features: np.ndarray  # (B, N, D) zero padded
    mask: np.ndarray  # (B, N)
    z: np.ndarray
    zhat: np.ndarray
    znorm: np.ndarray
    shat: np.ndarray
    snorm: np.ndarray
    cost: np.ndarray  # (B, N, K)
    scaling: ScalingTrace
    mass: np.ndarray  # (B, N, K)
    pooled: np.ndarray  # (B, K, d)
    embedding: np.ndarray  # (B, d)
    risks: np.ndarray  # (B,)
    rho: float
    bag_ids: list[str]

    def plan(self, i: int) -> TransportPlan:
        n = int(self.mask[i].sum())
        full = self.scaling.plan[i, :n]
        rows = full.sum(axis=1)
        return TransportPlan(
            mass=full[:, :-1].copy(),
            sink_mass=full[:, -1].copy(),
            iterations=int(self.scaling.iterations[i]),
            residual=float(np.max(np.abs(rows - 1.0 / n))),
            rho=self.rho,
            converged=bool(self.scaling.converged[i]),
            log_domain=self.scaling.log_domain,
        )


def forward_batch(bags, params: ModelParams, rho: float, solver: SolverConfig = SolverConfig(),
                  record: bool = True) -> ForwardTrace:
    bags = list(bags)
    bsz = len(bags)
    k = params.n_tokens
    n_max = max(b.n_instances for b in bags)
    d_in = params.proj_weight.shape[0]
    feats = np.zeros((bsz, n_max, d_in))
    mask = np.zeros((bsz, n_max), dtype=bool)
    for i, bag in enumerate(bags):
        if bag.dim != d_in:
            raise ModelError(f"bag {bag.bag_id!r}: feature width {bag.dim} != {d_in}")
        feats[i, : bag.n_instances] = bag.features
        mask[i, : bag.n_instances] = True

    z = project(feats, params) * mask[:, :, None]
    zhat, znorm = _unit_rows(z)
    shat, snorm = _unit_rows(params.tokens)
    cost = np.linalg.norm(zhat[:, :, None, :] - shat[None, None, :, :], axis=-1) * mask[:, :, None]

    counts = mask.sum(axis=1)
    alpha = mask / counts[:, None]
    cost_hat = np.concatenate([cost, np.zeros((bsz, n_max, 1))], axis=2)
    token_w = solver.iota if solver.global_constraint == "equality" else solver.kl_weight
    beta = np.tile(np.append(np.full(k, rho / k), max(1.0 - rho, SINK_FLOOR)), (bsz, 1))
    lam = np.tile(np.append(np.full(k, token_w), solver.iota), (bsz, 1))
    scaling = unrolled_scaling(cost_hat, alpha, beta, lam, solver.epsilon, tol=solver.tol,
                               max_iter=solver.max_iter, log_domain=solver.log_domain, record=record)
    plan = scaling.plan
    if not np.all(np.isfinite(plan)):
        bad = [bags[i].bag_id for i in range(bsz) if not np.all(np.isfinite(plan[i]))]
        raise ConvergenceError(f"non-finite transport plan for bags {bad}")
    unconverged = ~scaling.converged
    if unconverged.any():
        bad = [bags[i].bag_id for i in np.flatnonzero(unconverged & (scaling.change > 100 * solver.tol))]
        if bad:
            raise ConvergenceError(f"scaling did not converge for bags {bad}")
    mass = plan[:, :, :k]
    pooled = np.einsum("bnk,bnd->bkd", mass, z)
    embedding = np.einsum("k,bkd->bd", params.agg_weight, pooled) + params.agg_bias[0]
    risks = embedding @ params.pred_weight + params.pred_bias[0]
    return ForwardTrace(feats, mask, z, zhat, znorm, shat, snorm, cost, scaling, mass,
                        pooled, embedding, risks, rho, [b.bag_id for b in bags])


def forward(bag: Bag, params: ModelParams, rho: float, solver: SolverConfig = SolverConfig()):
    """Single-bag forward: ``(risk, plan, trace)``."""
    trace = forward_batch([bag], params, rho, solver)
    return float(trace.risks[0]), trace.plan(0), trace


def _unit_rows_backward(g_unit, unit, norm):
    radial = np.sum(g_unit * unit, axis=-1, keepdims=True)
    safe = np.where(norm > 0, norm, 1.0)
    return np.where(norm > 0, (g_unit - unit * radial) / safe, 0.0)


def backward(trace: ForwardTrace, params: ModelParams, grad_risks) -> ModelParams:
    """Gradients of ``sum_b grad_risks[b] * risk_b`` w.r.t. every parameter."""
    g_r = np.asarray(grad_risks, dtype=np.float64)
    mask3 = trace.mask[:, :, None]

    g_pred_weight = g_r @ trace.embedding
    g_pred_bias = np.array([g_r.sum()])
    g_embed = g_r[:, None] * params.pred_weight[None, :]

    g_agg_weight = np.einsum("bd,bkd->k", g_embed, trace.pooled)
    g_agg_bias = np.array([g_embed.sum()])
    g_pooled = params.agg_weight[None, :, None] * g_embed[:, None, :]

    g_mass = np.einsum("bkd,bnd->bnk", g_pooled, trace.z)
    g_z = np.einsum("bnk,bkd->bnd", trace.mass, g_pooled)

    g_plan = np.concatenate([g_mass, np.zeros(g_mass.shape[:2] + (1,))], axis=2)
    g_cost = unrolled_scaling_backward(trace.scaling, g_plan)[:, :, :-1] * mask3

    diff = trace.zhat[:, :, None, :] - trace.shat[None, None, :, :]
    cost = trace.cost
    safe = np.where(cost > 0, cost, 1.0)
    coef = np.where(cost > 0, g_cost / safe, 0.0) * mask3
    g_zhat = np.einsum("bnk,bnkd->bnd", coef, diff)
    g_shat = -np.einsum("bnk,bnkd->kd", coef, diff)

    g_z = (g_z + _unit_rows_backward(g_zhat, trace.zhat, trace.znorm)) * mask3
    g_proj_weight = np.einsum("bni,bnd->id", trace.features, g_z)
    g_proj_bias = g_z.sum(axis=(0, 1))
    g_tokens = _unit_rows_backward(g_shat, trace.shat, trace.snorm)

    grads = ModelParams(
        proj_weight=g_proj_weight, proj_bias=g_proj_bias, tokens=g_tokens,
        agg_weight=g_agg_weight, agg_bias=g_agg_bias,
        pred_weight=g_pred_weight, pred_bias=g_pred_bias,
    )
    for name, g in grads.as_dict().items():
        if not np.all(np.isfinite(g)):
            raise GradientError(
                f"non-finite gradient in {name} (bags {trace.bag_ids}, rho={trace.rho:.4g}, "
                f"sweeps={trace.scaling.iterations.tolist()})"
            )
    return grads


def batch_loss_and_grad(bags, params: ModelParams, rho: float, solver: SolverConfig = SolverConfig()):
    """Cox loss of one batch and its parameter gradient."""
    trace = forward_batch(bags, params, rho, solver)
    times = np.array([b.time for b in bags])
    events = np.array([b.event for b in bags])
    loss, g_r = cox_loss_and_grad(trace.risks, times, events)
    return loss, backward(trace, params, g_r), trace


def batch_loss(bags, params: ModelParams, rho: float, solver: SolverConfig = SolverConfig()) -> float:
    trace = forward_batch(bags, params, rho, solver, record=False)
    return cox_loss(trace.risks, [b.time for b in bags], [b.event for b in bags])
