"""
Equilibrium-based neural network baseline: a per-material energy MLP psi(I1, I3)
trained on interior equilibrium and boundary resultants of that material's fields.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F_nn
from pydantic import BaseModel, Field
from torch import nn

from icm.errors import NonFiniteActivation, ZeroForceScale
from icm.services.discretization import BoundaryCondition, Mesh, StrainField, coefficient_matrices, element_invariants
from icm.services.materials import MaterialModel, finite_difference_hessian

logger = logging.getLogger(__name__)

DTYPE = torch.float64

# name -> (hidden-to-hidden layers, hidden width)
ENN_PRESETS: Dict[str, Tuple[int, int]] = {
    "tiny": (2, 32),
    "small": (2, 256),
    "medium": (8, 768),
    "large": (8, 1024),
}


class EnnConfig(BaseModel):
    layers: int = Field(2, ge=1)
    hidden: int = Field(32, ge=1)
    boundary_weight: float = Field(0.1, gt=0)
    lr: float = 1e-3
    lr_decay: float = 0.95
    decay_every: int = 100
    steps: int = Field(2000, ge=1)
    seed: int = 0

    @classmethod
    def preset(cls, name: str, **overrides) -> "EnnConfig":
        if name not in ENN_PRESETS:
            raise ValueError(f"Unknown ENN preset '{name}'; expected one of {sorted(ENN_PRESETS)}.")
        layers, hidden = ENN_PRESETS[name]
        return cls(layers=layers, hidden=hidden, **overrides)


def parameter_count(layers: int, hidden: int) -> int:
    return (2 * hidden + hidden) + layers * (hidden * hidden + hidden) + (hidden + 1)


class EnergyMLP(nn.Module):
    """tanh MLP on standardized invariants; input statistics are stored as buffers."""

    def __init__(self, config: EnnConfig, mean: Optional[np.ndarray] = None, std: Optional[np.ndarray] = None):
        super().__init__()
        widths = [2] + [config.hidden] * (config.layers + 1)
        layers: List[nn.Module] = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            layers += [nn.Linear(fan_in, fan_out, dtype=DTYPE), nn.Tanh()]
        layers.append(nn.Linear(config.hidden, 1, dtype=DTYPE))
        self.net = nn.Sequential(*layers)
        self.register_buffer("input_mean", torch.as_tensor(np.zeros(2) if mean is None else mean, dtype=DTYPE))
        self.register_buffer("input_std", torch.as_tensor(np.ones(2) if std is None else std, dtype=DTYPE))

        generator = torch.Generator().manual_seed(config.seed)
        with torch.no_grad():
            for module in self.net:
                if isinstance(module, nn.Linear):
                    bound = 1.0 / np.sqrt(module.in_features)
                    for p in (module.weight, module.bias):
                        p.copy_((2.0 * torch.rand(p.shape, generator=generator, dtype=DTYPE) - 1.0) * bound)

    def normalize(self, inv: torch.Tensor) -> torch.Tensor:
        return (inv - self.input_mean) / self.input_std

    def denormalize(self, z: torch.Tensor) -> torch.Tensor:
        return z * self.input_std + self.input_mean

    def forward(self, inv: torch.Tensor) -> torch.Tensor:
        return self.net(self.normalize(inv)).squeeze(-1)


def enn_forward(model: EnergyMLP, I1, I3, create_graph: bool = False) -> Tuple[torch.Tensor, torch.Tensor]:
    """Energy and its exact gradient with respect to the raw invariants (I1, I3)."""
    inv = torch.stack([torch.as_tensor(I1, dtype=DTYPE), torch.as_tensor(I3, dtype=DTYPE)], dim=-1)
    if not inv.requires_grad:
        inv = inv.detach().requires_grad_(True)
    with torch.enable_grad():
        psi = model(inv)
        (grad,) = torch.autograd.grad(psi.sum(), inv, create_graph=create_graph)
    if not (torch.isfinite(psi).all() and torch.isfinite(grad).all()):
        raise NonFiniteActivation("Non-finite ENN energy or gradient.", layer="enn")
    return psi, grad


class EnnGradient:
    """Gradient provider backed by a trained energy network."""

    def __init__(self, model: EnergyMLP):
        self.model = model

    def gradient(self, inv: np.ndarray) -> np.ndarray:
        inv = np.asarray(inv, dtype=float)
        _, grad = enn_forward(self.model, inv[..., 0], inv[..., 1])
        return grad.detach().numpy()

    def hessian(self, inv: np.ndarray) -> np.ndarray:
        return finite_difference_hessian(self.gradient, inv)


def huber(x, y) -> torch.Tensor:
    """0.5 (x - y)^2 where |x - y| < 1, |x - y| - 0.5 elsewhere; summed over components."""
    x, y = torch.as_tensor(x, dtype=DTYPE), torch.as_tensor(y, dtype=DTYPE)
    return F_nn.smooth_l1_loss(x, y, reduction="sum", beta=1.0)


# --- Loss ---

@dataclass
class EnnSample:
    """Fixed kinematics of one training field."""
    A: torch.Tensor
    invariants: torch.Tensor
    triangles: torch.Tensor
    node_count: int
    interior: torch.Tensor
    # (node ids, measured target, loading direction or None when the target is the full vector)
    boundaries: List[Tuple[torch.Tensor, torch.Tensor, Optional[torch.Tensor]]]


def _boundary_target(bc: BoundaryCondition) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
    if bc.resultant is not None:
        return torch.tensor(bc.resultant, dtype=DTYPE), None
    return torch.tensor(bc.force, dtype=DTYPE), torch.tensor(bc.direction, dtype=DTYPE)


def prepare_samples(fields: Sequence[Tuple[Mesh, StrainField]]) -> List[EnnSample]:
    samples = []
    for mesh, strain in fields:
        boundaries = [(torch.from_numpy(mesh.boundary_set(bc.set_name)), *_boundary_target(bc)) for bc in strain.bcs]
        samples.append(EnnSample(
            A=torch.from_numpy(coefficient_matrices(mesh, strain)),
            invariants=torch.from_numpy(element_invariants(mesh, strain)),
            triangles=torch.from_numpy(mesh.triangles),
            node_count=mesh.node_count,
            interior=torch.from_numpy(mesh.interior_nodes),
            boundaries=boundaries,
        ))
    return samples


def force_scale(samples: Sequence[EnnSample]) -> float:
    """Mean magnitude of the measured boundary forces over all training boundary conditions."""
    forces = [float(torch.linalg.vector_norm(target)) for s in samples for _, target, _ in s.boundaries]
    scale = float(np.mean(forces)) if forces else 0.0
    if not scale > 0.0:
        raise ZeroForceScale("Measured boundary forces are all zero; force scale undefined.")
    return scale


GradientFn = Callable[[torch.Tensor], torch.Tensor]


def enn_loss(
    gradient_fn: GradientFn,
    samples: Sequence[EnnSample],
    s_f: float,
    boundary_weight: float = 0.1,
) -> Tuple[torch.Tensor, float, float]:
    """
    L = L_in + w_b L_b. L_in averages the Huber norm of interior nodal forces / s_f over
    interior nodes; L_b averages, over boundary conditions, the Huber distance between
    predicted and measured resultant vectors (projections when only the magnitude was
    recorded), both divided by N_b s_f.

    Returns:
        (loss tensor, interior part, boundary part)
    """
    if not s_f > 0.0:
        raise ZeroForceScale(f"Force scale must be positive, got {s_f}.")
    interior_terms, boundary_terms = [], []
    interior_count = 0
    for sample in samples:
        g = gradient_fn(sample.invariants)
        contributions = torch.einsum("eaim,em->eai", sample.A, g)
        nodal = torch.zeros((sample.node_count, 2), dtype=DTYPE).index_add(
            0, sample.triangles.reshape(-1), contributions.reshape(-1, 2)
        )
        interior = nodal[sample.interior] / s_f
        interior_terms.append(huber(interior, torch.zeros_like(interior)))
        interior_count += len(sample.interior)
        for ids, target, direction in sample.boundaries:
            scale = len(ids) * s_f
            predicted = nodal[ids].sum(dim=0)
            if direction is not None:
                predicted = predicted @ direction
            boundary_terms.append(huber(predicted / scale, target / scale))

    L_in = torch.stack(interior_terms).sum() / max(interior_count, 1)
    L_b = torch.stack(boundary_terms).mean() if boundary_terms else torch.zeros((), dtype=DTYPE)
    loss = L_in + boundary_weight * L_b if boundary_weight else L_in
    return loss, float(L_in), float(L_b)


def material_gradient_fn(material: MaterialModel) -> GradientFn:
    """Ground-truth gradient as a loss input, for oracle checks."""
    def gradient(inv: torch.Tensor) -> torch.Tensor:
        return torch.from_numpy(material.gradient(inv.detach().numpy()))
    return gradient


def network_gradient_fn(model: EnergyMLP) -> GradientFn:
    def gradient(inv: torch.Tensor) -> torch.Tensor:
        return enn_forward(model, inv[:, 0], inv[:, 1], create_graph=True)[1]
    return gradient


# --- Training ---

@dataclass
class EnnResult:
    model: EnergyMLP
    curve: pd.DataFrame
    force_scale: float


def enn_train(fields: Sequence[Tuple[Mesh, StrainField]], config: EnnConfig) -> EnnResult:
    """Adam with StepLR(decay_every, lr_decay) on one material's fields."""
    samples = prepare_samples(fields)
    s_f = force_scale(samples)
    inv = torch.cat([s.invariants for s in samples]).numpy()
    std = inv.std(axis=0)
    model = EnergyMLP(config, mean=inv.mean(axis=0), std=np.where(std > 1e-12, std, 1.0))
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    scheduler = torch.optim.lr_scheduler.StepLR(optimizer, step_size=config.decay_every, gamma=config.lr_decay)
    gradient_fn = network_gradient_fn(model)

    rows = []
    for step in range(config.steps):
        lr = optimizer.param_groups[0]["lr"]
        optimizer.zero_grad(set_to_none=True)
        loss, interior, boundary = enn_loss(gradient_fn, samples, s_f, config.boundary_weight)
        loss.backward()
        optimizer.step()
        scheduler.step()
        rows.append((step, lr, float(loss), interior, boundary))
        if step % max(1, config.steps // 10) == 0:
            logger.debug("enn step=%d lr=%.3e loss=%.6e", step, lr, float(loss))
    curve = pd.DataFrame(rows, columns=["step", "lr", "loss", "interior", "boundary"])
    logger.info("enn trained steps=%d final_loss=%.6e", config.steps, curve["loss"].iloc[-1])
    return EnnResult(model=model, curve=curve, force_scale=s_f)
