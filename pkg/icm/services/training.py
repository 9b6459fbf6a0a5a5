"""
Equilibrium loss, Muon/AdamW optimization with a warmup-cosine schedule, and the
training loop over sampled contexts.
"""
import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Literal, Optional, Tuple

import numpy as np
import pandas as pd
import torch
from pydantic import BaseModel, Field, field_validator

from icm.errors import DegeneratePrediction, NonFiniteActivation, ShapeMismatch, TrainingAborted
from icm.services.materials import material_rng
from icm.services.network import DTYPE, ICMNetwork, NetworkConfig, build_network, context_tensors
from icm.services.tokenizer import Context, SamplingBounds, TokenDataset, sample_training_context

logger = logging.getLogger(__name__)

ADAMW_BETAS = (0.9, 0.999)
ADAMW_EPS = 1e-8
MAX_BAD_STEPS = 10
_TRAINING_STREAM = 0x5452414E

NS_COEFFICIENTS = {
    "cubic": (1.5, -0.5, 0.0),
    "quintic": (3.4445, -4.7750, 2.0315),
}
# cubic needs ~log1.5(1/sigma_min) steps to lift small singular values
NS_DEFAULT_ITERATIONS = {"cubic": 25, "quintic": 5}


# --- Loss ---

@dataclass
class LossBreakdown:
    numerator: float
    denominator: float
    value: float
    tensor: Optional[torch.Tensor] = None


def equilibrium_loss(predictions: torch.Tensor, A: torch.Tensor, owners: torch.Tensor, token_count: int) -> LossBreakdown:
    """
    Mean squared predicted interior nodal force over mean squared element contribution.

    Args:
        predictions: (S, 2) predicted gradients at each subtoken's invariants.
        A: (S, 2, 2) raw coefficient matrices.
        owners: (S,) token index of each subtoken.
        token_count: number of tokens T.

    Raises:
        DegeneratePrediction: if the denominator is below 1e-300.
    """
    element = torch.einsum("sim,sm->si", A, predictions)
    nodal = torch.zeros((token_count, 2), dtype=element.dtype).index_add(0, owners, element)
    numerator = (nodal ** 2).sum(dim=1).mean()
    denominator = (element ** 2).sum(dim=1).mean()
    if not float(denominator) >= 1e-300:
        raise DegeneratePrediction(f"Loss denominator {float(denominator):.3e} vanishes.")
    value = numerator / denominator
    return LossBreakdown(float(numerator), float(denominator), float(value), value)


def context_loss(model: ICMNetwork, context: Context) -> LossBreakdown:
    """Loss of the network evaluated at the context's own subtoken states."""
    subtokens, mask = context_tensors(context)
    tokens = context.tokens
    predictions = model(subtokens, mask, torch.from_numpy(context.I_hat))
    return equilibrium_loss(
        predictions,
        torch.from_numpy(tokens.A),
        torch.from_numpy(tokens.owners),
        len(tokens),
    )


def provider_loss(context: Context, gradients: np.ndarray) -> LossBreakdown:
    """Loss of externally supplied gradients at the context's subtoken states."""
    tokens = context.tokens
    return equilibrium_loss(
        torch.as_tensor(np.asarray(gradients, dtype=float)),
        torch.from_numpy(tokens.A),
        torch.from_numpy(tokens.owners),
        len(tokens),
    )


# --- Newton-Schulz and Muon ---

def newton_schulz_orthogonalize(M: torch.Tensor, iterations: Optional[int] = None, coefficients: str = "cubic") -> torch.Tensor:
    """
    Approximates the polar factor U V^T of M. The input is pre-scaled by its Frobenius
    norm so every singular value starts in (0, 1]. "cubic" converges to the exact polar
    factor; "quintic" pushes singular values into a band around 1 in few iterations.
    `iterations` defaults to NS_DEFAULT_ITERATIONS[coefficients].
    """
    a, b, c = NS_COEFFICIENTS[coefficients]
    if iterations is None:
        iterations = NS_DEFAULT_ITERATIONS[coefficients]
    M = torch.as_tensor(M, dtype=DTYPE)
    if M.ndim != 2:
        raise ShapeMismatch(f"Newton-Schulz needs a matrix, got shape {tuple(M.shape)}.")
    norm = torch.linalg.matrix_norm(M)
    if norm == 0:
        return torch.zeros_like(M)
    X = M / norm
    tall = X.shape[0] > X.shape[1]
    if tall:
        X = X.T
    for _ in range(iterations):
        gram = X @ X.T
        X = a * X + (b * gram + c * gram @ gram) @ X
    if not torch.isfinite(X).all():
        raise NonFiniteActivation("Newton-Schulz iteration overflowed.", layer="newton_schulz")
    return X.T if tall else X


class MuonAdamW(torch.optim.Optimizer):
    """
    Groups flagged `muon` get momentum followed by quintic Newton-Schulz and an update
    scaled to AdamW-like RMS (0.2 sqrt(max(rows, cols))); every other group is AdamW.
    Weight decay is decoupled in both.
    """

    def __init__(self, param_groups: List[Dict], lr: float = 5e-4, weight_decay: float = 0.01,
                 momentum: float = 0.95, ns_iterations: int = 5, betas=ADAMW_BETAS, eps: float = ADAMW_EPS):
        defaults = dict(lr=lr, weight_decay=weight_decay, momentum=momentum, ns_iterations=ns_iterations,
                        betas=betas, eps=eps, muon=False)
        super().__init__(param_groups, defaults)

    @torch.no_grad()
    def step(self, closure: Optional[Callable] = None):
        loss = closure() if closure is not None else None
        for group in self.param_groups:
            lr, wd = group["lr"], group["weight_decay"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                g = p.grad
                if g.shape != p.shape:
                    raise ShapeMismatch(f"Gradient {tuple(g.shape)} does not match parameter {tuple(p.shape)}.")
                state = self.state[p]
                if group["muon"]:
                    if "momentum_buffer" not in state:
                        state["momentum_buffer"] = torch.zeros_like(g)
                    buf = state["momentum_buffer"]
                    buf.mul_(group["momentum"]).add_(g)
                    direction = newton_schulz_orthogonalize(
                        g.add(buf, alpha=group["momentum"]), group["ns_iterations"], "quintic"
                    )
                    p.mul_(1.0 - lr * wd)
                    p.add_(direction, alpha=-lr * 0.2 * math.sqrt(max(p.shape)))
                    continue

                if "step" not in state:
                    state["step"] = 0
                    state["exp_avg"] = torch.zeros_like(g)
                    state["exp_avg_sq"] = torch.zeros_like(g)
                beta1, beta2 = group["betas"]
                state["step"] += 1
                t = state["step"]
                state["exp_avg"].mul_(beta1).add_(g, alpha=1.0 - beta1)
                state["exp_avg_sq"].mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
                m_hat = state["exp_avg"] / (1.0 - beta1 ** t)
                v_hat = state["exp_avg_sq"] / (1.0 - beta2 ** t)
                p.mul_(1.0 - lr * wd)
                p.addcdiv_(m_hat, v_hat.sqrt().add_(group["eps"]), value=-lr)
        return loss


def build_optimizer(model: torch.nn.Module, mode: str = "muon", lr: float = 5e-4,
                    weight_decay: float = 0.01, momentum: float = 0.95) -> MuonAdamW:
    """2D weight matrices go to Muon in "muon" mode; biases, norms and everything in "adamw" mode go to AdamW."""
    matrices = [p for p in model.parameters() if p.ndim == 2]
    others = [p for p in model.parameters() if p.ndim != 2]
    if mode == "muon":
        groups = [{"params": matrices, "muon": True}, {"params": others, "muon": False}]
    elif mode == "adamw":
        groups = [{"params": matrices + others, "muon": False}]
    else:
        raise ValueError(f"Unknown optimizer mode '{mode}'.")
    return MuonAdamW([g for g in groups if g["params"]], lr=lr, weight_decay=weight_decay, momentum=momentum)


# --- Schedule ---

class ScheduleConfig(BaseModel):
    total_steps: int = Field(ge=1)
    warmup_fraction: float = 0.10
    peak_lr: float = 5e-4
    floor_fraction: float = 0.10

    @field_validator("warmup_fraction")
    @classmethod
    def _warmup_inside(cls, value: float) -> float:
        if not 0.0 < value < 1.0:
            raise ValueError("warmup_fraction must lie in (0, 1).")
        return value

    @field_validator("floor_fraction")
    @classmethod
    def _floor_below_peak(cls, value: float) -> float:
        if not 0.0 <= value <= 1.0:
            raise ValueError("floor_fraction must lie in [0, 1].")
        return value


def learning_rate(schedule: ScheduleConfig, step: int) -> float:
    """Linear warmup from 0 to the peak over the first warmup_fraction of steps, then cosine to floor_fraction * peak."""
    T = schedule.total_steps
    warmup = schedule.warmup_fraction * T
    peak, floor = schedule.peak_lr, schedule.floor_fraction * schedule.peak_lr
    if step < warmup:
        return peak * step / warmup
    progress = min(max((step - warmup) / (T - warmup), 0.0), 1.0)
    return floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


class WarmupCosineScheduler(torch.optim.lr_scheduler.LambdaLR):
    def __init__(self, optimizer: torch.optim.Optimizer, schedule: ScheduleConfig, last_epoch: int = -1):
        self.schedule = schedule
        super().__init__(optimizer=optimizer, lr_lambda=self.scale_lr, last_epoch=last_epoch)

    def scale_lr(self, step: int) -> float:
        return learning_rate(self.schedule, step) / self.schedule.peak_lr


# --- Training loop ---

class TrainConfig(BaseModel):
    dataset: Optional[str] = None
    network: NetworkConfig = Field(default_factory=NetworkConfig)
    steps: int = Field(1000, ge=1)
    peak_lr: float = 5e-4
    warmup_fraction: float = 0.10
    floor_fraction: float = 0.10
    seed: int = 0
    optimizer: Literal["adamw", "muon"] = "muon"
    weight_decay: float = 0.01
    momentum: float = 0.95
    accumulation: int = Field(1, ge=1)
    sampling: SamplingBounds = Field(default_factory=SamplingBounds)

    def schedule(self) -> ScheduleConfig:
        return ScheduleConfig(
            total_steps=self.steps,
            warmup_fraction=self.warmup_fraction,
            peak_lr=self.peak_lr,
            floor_fraction=self.floor_fraction,
        )


@dataclass
class TrainResult:
    model: ICMNetwork
    curve: pd.DataFrame


CheckpointFn = Callable[[int, ICMNetwork], None]


def checkpoint_interval(steps: int) -> int:
    return max(1, steps // 20)


def train(dataset: TokenDataset, config: TrainConfig, checkpoint_fn: Optional[CheckpointFn] = None) -> TrainResult:
    """
    Each step samples a material uniformly, builds a training context, evaluates the
    equilibrium loss and updates the parameters. Steps whose loss is non-finite or
    degenerate are skipped and leave no row in the loss curve; more than 10 in a row
    abort the run.

    Raises:
        TrainingAborted: after too many consecutive bad steps.
    """
    if len(dataset) == 0:
        raise ValueError("Training dataset is empty.")
    model = build_network(config.network)
    optimizer = build_optimizer(model, config.optimizer, config.peak_lr, config.weight_decay, config.momentum)
    scheduler = WarmupCosineScheduler(optimizer, config.schedule())
    rng = material_rng(config.seed, _TRAINING_STREAM)
    every = checkpoint_interval(config.steps)

    rows: List[Tuple[int, float, float, float, float]] = []
    bad_steps = 0
    for step in range(config.steps):
        lr = optimizer.param_groups[0]["lr"]
        optimizer.zero_grad(set_to_none=True)
        numerator = denominator = value = 0.0
        try:
            for _ in range(config.accumulation):
                material_id = int(rng.integers(len(dataset)))
                context, _ = sample_training_context(dataset, material_id, rng, config.sampling)
                breakdown = context_loss(model, context)
                if not math.isfinite(breakdown.value):
                    raise NonFiniteActivation("Non-finite loss.", layer="loss")
                (breakdown.tensor / config.accumulation).backward()
                numerator += breakdown.numerator / config.accumulation
                denominator += breakdown.denominator / config.accumulation
                value += breakdown.value / config.accumulation
        except (NonFiniteActivation, DegeneratePrediction) as exc:
            bad_steps += 1
            logger.warning("bad training step step=%d consecutive=%d reason=%s", step, bad_steps, exc.detail)
            if bad_steps > MAX_BAD_STEPS:
                raise TrainingAborted(f"{bad_steps} consecutive bad steps, last at step {step}: {exc.detail}")
            scheduler.step()
            continue

        bad_steps = 0
        optimizer.step()
        scheduler.step()
        rows.append((step, lr, value, numerator, denominator))
        if step % max(1, config.steps // 10) == 0:
            logger.info("train step=%d lr=%.3e loss=%.6e", step, lr, value)
        if checkpoint_fn is not None and (step + 1) % every == 0 and step + 1 < config.steps:
            checkpoint_fn(step + 1, model)

    if checkpoint_fn is not None:
        checkpoint_fn(config.steps, model)
    curve = pd.DataFrame(rows, columns=["step", "lr", "loss", "numerator", "denominator"])
    return TrainResult(model=model, curve=curve)
