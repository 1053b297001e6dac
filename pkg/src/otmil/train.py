"""Cox training loop with the mass-ratio curriculum."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, asdict

import numpy as np

from .model import (
    ModelError,
    ModelParams,
    SolverConfig,
    batch_loss_and_grad,
    forward_batch,
    rho_schedule,
    subsample,
)
from .survival import Cohort, SurvivalError, c_index

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    rho0: float = 0.1
    ramp_epochs: int = 10
    epochs: int = 50
    lr: float = 1e-4
    weight_decay: float = 1e-5
    batch_size: int = 16
    n_tokens: int = 16
    kl_weight: float = 0.1
    epsilon: float = 0.05
    latent_dim: int = 256
    ramp_shape: str = "sigmoid"
    fixed_rho: float = 0.8
    global_constraint: str = "kl"
    max_patches: int | None = None
    iota: float = 1e8
    solver_tol: float = 1e-6
    solver_max_iter: int = 2000
    agg_init: str = "zero"
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.rho0 <= 1.0):
            raise ValueError("rho0 must lie in (0, 1]")
        if self.epochs < 0 or self.ramp_epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.epochs > 0 and self.ramp_epochs > self.epochs:
            raise ValueError("ramp_epochs cannot exceed epochs")
        if self.ramp_shape not in ("sigmoid", "linear", "fixed"):
            raise ValueError(f"unknown ramp shape {self.ramp_shape!r}")
        if not (0.0 < self.fixed_rho <= 1.0):
            raise ValueError("fixed_rho must lie in (0, 1]")
        if self.global_constraint not in ("kl", "equality"):
            raise ValueError(f"unknown global constraint {self.global_constraint!r}")
        if self.batch_size < 1 or self.n_tokens < 1 or self.latent_dim < 1:
            raise ValueError("batch_size, n_tokens and latent_dim must be positive")
        if self.max_patches is not None and self.max_patches < 1:
            raise ValueError("max_patches must be positive")
        if self.agg_init not in ("zero", "uniform"):
            raise ValueError(f"unknown agg_init {self.agg_init!r}")

    @property
    def solver(self) -> SolverConfig:
        return SolverConfig(
            epsilon=self.epsilon, kl_weight=self.kl_weight, iota=self.iota,
            tol=self.solver_tol, max_iter=self.solver_max_iter,
            global_constraint=self.global_constraint,
        )

    def rho_at(self, iteration: int, iters_per_epoch: int) -> float:
        return rho_schedule(iteration, self.ramp_epochs, iters_per_epoch, self.rho0,
                            self.ramp_shape, self.fixed_rho)

    def final_rho(self) -> float:
        return 1.0 if self.ramp_shape != "fixed" else self.fixed_rho

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    rho: float
    val_cindex: float


class AdamW:
    """Adam with decoupled weight decay over a dict of arrays."""

    def __init__(self, params: dict, lr: float, weight_decay: float,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.step_count += 1
        c1 = 1.0 - self.b1 ** self.step_count
        c2 = 1.0 - self.b2 ** self.step_count
        for k, p in params.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            p *= 1.0 - lr * self.weight_decay
            p -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def cosine_lr(base: float, step: int, total: int) -> float:
    if total <= 0:
        return base
    return 0.5 * base * (1.0 + math.cos(math.pi * min(step, total) / total))


def predict_risks(bags, params: ModelParams, rho: float, solver: SolverConfig,
                  batch_size: int = 16, max_patches: int | None = None, seed: int = 0):
    """Risks for ``bags`` (in order) plus the per-bag transport plans."""
    risks, plans = [], []
    for start in range(0, len(bags), batch_size):
        chunk = [subsample(b, max_patches, seed) for b in bags[start: start + batch_size]]
        trace = forward_batch(chunk, params, rho, solver, record=False)
        risks.extend(trace.risks.tolist())
        plans.extend(trace.plan(i) for i in range(len(chunk)))
    return np.array(risks), plans


def evaluate_cindex(bags, params, rho, solver, batch_size=16, max_patches=None, seed=0) -> float:
    risks, _ = predict_risks(bags, params, rho, solver, batch_size, max_patches, seed)
    try:
        return c_index(Cohort(risks, [b.time for b in bags], [b.event for b in bags]))
    except SurvivalError:
        return float("nan")


def train(bags, cfg: TrainConfig, val_bags=None, params: ModelParams | None = None):
    """Fit the model; returns ``(params, history)``.  Deterministic given ``cfg.seed``."""
    bags = list(bags)
    if not bags:
        raise TrainingError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    feature_dim = bags[0].dim
    if cfg.latent_dim > feature_dim:
        raise ModelError(f"latent_dim {cfg.latent_dim} exceeds feature width {feature_dim}")
    if params is None:
        params = ModelParams.initialize(feature_dim, cfg.latent_dim, cfg.n_tokens, rng,
                                        cfg.agg_init)
    history: list[EpochRecord] = []
    if cfg.epochs == 0:
        return params, history

    bags = [subsample(b, cfg.max_patches, cfg.seed) for b in bags]
    solver = cfg.solver
    iters_per_epoch = math.ceil(len(bags) / cfg.batch_size)
    total = cfg.epochs * iters_per_epoch
    opt = AdamW(params.as_dict(), cfg.lr, cfg.weight_decay)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(bags))
        losses, rho = [], cfg.rho_at(step, iters_per_epoch)
        for start in range(0, len(bags), cfg.batch_size):
            batch = [bags[i] for i in order[start: start + cfg.batch_size]]
            rho = cfg.rho_at(step, iters_per_epoch)
            if any(b.event for b in batch):
                loss, grads, _ = batch_loss_and_grad(batch, params, rho, solver)
                if not math.isfinite(loss):
                    raise TrainingError(f"non-finite loss at epoch {epoch}")
                opt.step(params.as_dict(), grads.as_dict(), cosine_lr(cfg.lr, step, total))
                losses.append(loss)
            step += 1
        if not losses:
            raise TrainingError(f"every batch in epoch {epoch} lacks events")
        val = float("nan")
        if val_bags:
            val = evaluate_cindex(val_bags, params, rho, solver, cfg.batch_size,
                                  cfg.max_patches, cfg.seed)
        history.append(EpochRecord(epoch, float(np.mean(losses)), rho, val))
        log.info("epoch %d loss %.5f rho %.4f val_c %.4f", epoch, history[-1].train_loss, rho, val)
    return params, history
