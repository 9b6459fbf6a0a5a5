"""
Deployment side of ICM: gradient predictors, post-scaling from boundary
resultants, stress recovery and evaluation metrics.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import optimize, stats

from icm.errors import DegenerateRange, DomainViolation, NonPositiveJacobian, ZeroAlpha, ZeroTrueForce
from icm.services.discretization import Mesh, StrainField, deformation_gradients, nodal_forces
from icm.services.materials import (
    GradientProvider,
    MaterialModel,
    ScaledGradient,
    StressTensor2D,
    finite_difference_hessian,
    invariants_from_F,
    stress_from_gradient,
)
from icm.services.network import ICMNetwork, predict
from icm.services.tokenizer import Context, TokenSet, full_context, tokenize_field

logger = logging.getLogger(__name__)

MeshField = Tuple[Mesh, StrainField]


# --- Predictors ---

class NetworkPredictor:
    """g_theta conditioned on a context; accepts raw invariants and normalizes them with the context scale."""

    def __init__(self, model: ICMNetwork, context: Context, chunk: Optional[int] = None):
        self.model = model
        self.context = context
        self.chunk = chunk

    def gradient(self, inv: np.ndarray) -> np.ndarray:
        inv = np.asarray(inv, dtype=float)
        flat = predict(self.model, self.context, self.context.normalize_queries(inv.reshape(-1, 2)), chunk=self.chunk)
        return flat.reshape(inv.shape)

    def hessian(self, inv: np.ndarray) -> np.ndarray:
        return finite_difference_hessian(self.gradient, inv)


class OraclePredictor:
    """Ground-truth gradient times a constant; stands in for the network in plumbing checks."""

    def __init__(self, material: MaterialModel, factor: float = 1.0):
        self.material = material
        self.factor = float(factor)

    def gradient(self, inv: np.ndarray) -> np.ndarray:
        return self.factor * self.material.gradient(inv)

    def hessian(self, inv: np.ndarray) -> np.ndarray:
        return self.factor * self.material.hessian(inv)


PredictorFactory = Callable[[Context], GradientProvider]


# --- Post-scaling ---

@dataclass
class ScalingReport:
    alpha: float
    per_bc: List[Tuple[int, int, float]]
    coefficient_of_variation: float


def post_scale(predictor: GradientProvider, fields: Sequence[MeshField], geometric: bool = False) -> ScalingReport:
    """
    alpha_{j,k} = (predicted resultant of boundary j of field k . d_{j,k}) / f_{j,k};
    alpha is their arithmetic mean (signed geometric mean with `geometric`).

    Raises:
        ZeroTrueForce: if a measured resultant is zero.
        ZeroAlpha: if |alpha| < 1e-12.
    """
    per_bc: List[Tuple[int, int, float]] = []
    for k, (mesh, strain) in enumerate(fields):
        if not strain.bcs:
            continue
        forces = nodal_forces(mesh, strain, predictor)
        for j, bc in enumerate(strain.bcs):
            if abs(bc.force) < 1e-300:
                raise ZeroTrueForce(f"Field {k} boundary '{bc.set_name}' has zero measured force.")
            predicted = float(forces[mesh.boundary_set(bc.set_name)].sum(axis=0) @ np.asarray(bc.direction))
            per_bc.append((j, k, predicted / bc.force))
    if not per_bc:
        raise ZeroTrueForce("No boundary conditions with measured forces to post-scale against.")

    alphas = np.array([a for _, _, a in per_bc])
    if geometric:
        sign = np.sign(alphas.mean()) or 1.0
        alpha = float(sign * np.exp(np.mean(np.log(np.abs(alphas) + 1e-300))))
    else:
        alpha = float(alphas.mean())
    if abs(alpha) < 1e-12:
        raise ZeroAlpha(f"Post-scaling factor {alpha:.3e} signals collapsed predictions.")
    cov = float(np.std(alphas) / abs(alphas.mean()))
    return ScalingReport(alpha=alpha, per_bc=per_bc, coefficient_of_variation=cov)


def scaled_predictor(predictor: GradientProvider, report: ScalingReport) -> ScaledGradient:
    return ScaledGradient(predictor, 1.0 / report.alpha)


def predict_stress(predictor: GradientProvider, alpha: float, F_query: np.ndarray, kind: str = "S") -> StressTensor2D:
    """Stress from the post-scaled prediction alpha^-1 g at the invariants of F_query."""
    F_query = np.asarray(F_query, dtype=float)
    grad = predictor.gradient(invariants_from_F(F_query)) / alpha
    return stress_from_gradient(F_query, grad, kind=kind)


# --- Errors ---

@dataclass
class ErrorReport:
    S_err: List[float] = field(default_factory=list)
    P_err: List[float] = field(default_factory=list)

    @property
    def S_geo_mean(self) -> float:
        return geometric_mean(self.S_err)

    @property
    def P_geo_mean(self) -> float:
        return geometric_mean(self.P_err)


def geometric_mean(values: Sequence[float]) -> float:
    """Geometric mean over strictly positive finite entries; nan when there are none."""
    positive = np.array([v for v in values if np.isfinite(v) and v > 0.0])
    return float(stats.gmean(positive)) if positive.size else float("nan")


def stress_error(predicted: np.ndarray, true: np.ndarray) -> float:
    """
    Mean over elements of the root-sum-square of component errors, each normalized by
    the range of the true component over the mesh. Components with a range below
    1e-14 are skipped with a warning.

    Raises:
        DegenerateRange: if every component is skipped.
    """
    predicted = np.asarray(predicted, dtype=float).reshape(-1, 4)
    true = np.asarray(true, dtype=float).reshape(-1, 4)
    ranges = true.max(axis=0) - true.min(axis=0)
    usable = ranges >= 1e-14
    if not np.all(usable):
        logger.warning("degenerate stress range components=%s skipped", np.flatnonzero(~usable).tolist())
    if not np.any(usable):
        raise DegenerateRange("Every stress component has a range below 1e-14.")
    scaled = (predicted[:, usable] - true[:, usable]) / ranges[usable]
    return float(np.mean(np.sqrt(np.sum(scaled ** 2, axis=1))))


def field_errors(mesh: Mesh, strain: StrainField, predictor: GradientProvider, material: MaterialModel) -> Tuple[float, float]:
    """(S_err, P_err) of a post-scaled predictor over one field's elements."""
    F = deformation_gradients(mesh, strain)
    inv = invariants_from_F(F)
    S_pred = stress_from_gradient(F, predictor.gradient(inv), kind="S").values
    S_true = stress_from_gradient(F, material.gradient(inv), kind="S").values
    P_pred = np.einsum("eij,ejk->eik", F, S_pred)
    P_true = np.einsum("eij,ejk->eik", F, S_true)
    return stress_error(S_pred, S_true), stress_error(P_pred, P_true)


@dataclass
class MaterialEvaluation:
    material_id: str
    alpha: float
    coefficient_of_variation: float
    S_err: float
    P_err: float


def evaluate_material(
    material_id: str,
    material: MaterialModel,
    fields: Sequence[MeshField],
    predictor_factory: PredictorFactory,
    test_fields: Optional[Sequence[MeshField]] = None,
) -> MaterialEvaluation:
    """Post-scales on `fields` (the context) and measures stress errors on `test_fields` (default: the same)."""
    tokens = [tokenize_field(mesh, strain, k) for k, (mesh, strain) in enumerate(fields)]
    context = full_context(tokens, provenance={"material": material_id})
    predictor = predictor_factory(context)
    report = post_scale(predictor, fields)
    scaled = scaled_predictor(predictor, report)
    errors = [field_errors(mesh, strain, scaled, material) for mesh, strain in (test_fields or fields)]
    S_err = float(np.mean([e[0] for e in errors]))
    P_err = float(np.mean([e[1] for e in errors]))
    return MaterialEvaluation(material_id, report.alpha, report.coefficient_of_variation, S_err, P_err)


# --- Test-time context scaling ---

def context_scaling_curve(
    ordered_fields: Sequence[MeshField],
    material: MaterialModel,
    predictor_factory: PredictorFactory,
    prefix_sizes: Optional[Sequence[int]] = None,
    resamplings: int = 5,
    rng: Optional[np.random.Generator] = None,
) -> pd.DataFrame:
    """
    For each prefix size k, R random field orders are drawn; the context is the first k
    fields of each order, the predictor is post-scaled on those fields and P_err is
    measured on all fields. Rows: token_count, geo_mean, q25, q75.
    """
    if len(ordered_fields) < 2:
        raise ValueError("Context scaling needs at least two fields.")
    rng = rng or np.random.default_rng(0)
    prefix_sizes = list(prefix_sizes or range(1, len(ordered_fields) + 1))
    tokens: List[TokenSet] = [tokenize_field(mesh, strain, k) for k, (mesh, strain) in enumerate(ordered_fields)]

    rows = []
    orders = [np.arange(len(ordered_fields))] + [rng.permutation(len(ordered_fields)) for _ in range(resamplings - 1)]
    for size in prefix_sizes:
        errors, counts = [], []
        for order in orders:
            chosen = [int(i) for i in order[:size]]
            context = full_context([tokens[i] for i in chosen])
            predictor = predictor_factory(context)
            try:
                scaled = scaled_predictor(predictor, post_scale(predictor, [ordered_fields[i] for i in chosen]))
                P_err = float(np.mean([field_errors(m, s, scaled, material)[1] for m, s in ordered_fields]))
            except (ZeroAlpha, DomainViolation, NonPositiveJacobian) as exc:
                logger.warning("context scaling sample failed size=%d reason=%s", size, exc.detail)
                P_err = float("nan")
            errors.append(P_err)
            counts.append(len(context))
        finite = np.array([e for e in errors if np.isfinite(e)])
        rows.append({
            "token_count": int(np.mean(counts)),
            "geo_mean": geometric_mean(finite),
            "q25": float(np.percentile(finite, 25)) if finite.size else float("nan"),
            "q75": float(np.percentile(finite, 75)) if finite.size else float("nan"),
        })
    return pd.DataFrame(rows, columns=["token_count", "geo_mean", "q25", "q75"])


# --- Uniaxial stress-stretch curves ---

def uniaxial_stress_curve(provider: GradientProvider, stretches: Sequence[float], alpha: float = 1.0) -> pd.DataFrame:
    """
    P11 under in-plane uniaxial stress: for each stretch the transverse stretch is found
    from P22 = 0 by bracketing root search. Rows whose root cannot be bracketed are nan.
    """
    rows = []
    for lam in stretches:
        def p22(mu: float) -> float:
            F = np.diag([lam, mu])[None]
            return float(predict_stress(provider, alpha, F, kind="P").values[0, 1, 1])

        try:
            transverse = optimize.brentq(p22, 0.2, 1.5, xtol=1e-12)
            P11 = float(predict_stress(provider, alpha, np.diag([lam, transverse])[None], kind="P").values[0, 0, 0])
        except (ValueError, DomainViolation, NonPositiveJacobian):
            transverse, P11 = float("nan"), float("nan")
        rows.append({"stretch": float(lam), "transverse": transverse, "P11": P11})
    return pd.DataFrame(rows, columns=["stretch", "transverse", "P11"])
