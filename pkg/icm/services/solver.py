"""
Newton-Raphson solver for displacement-controlled hyperelastic equilibrium on
linear-triangle meshes. The constitutive law enters only through a gradient
provider, so ground-truth materials and learned predictors are interchangeable.
"""
import logging
import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field
from scipy import sparse
from scipy.sparse.linalg import spsolve

from config import settings
from icm.errors import (
    DomainViolation,
    ExtrapolationWarning,
    LineSearchFailure,
    NonConvergence,
    NonPositiveJacobian,
)
from icm.services.discretization import (
    BoundaryCondition,
    Mesh,
    StrainField,
    affine_residual,
    coefficient_matrices,
    deformation_gradients,
)
from icm.services.materials import GradientProvider, invariants_from_F

logger = logging.getLogger(__name__)

_INADMISSIBLE = (DomainViolation, NonPositiveJacobian)


class LoadMode(str, Enum):
    UNIAXIAL = "uniaxial"
    BIAXIAL = "biaxial"
    SHEAR = "shear"
    PROPORTIONAL_BIAXIAL = "proportional-biaxial"
    EQUAL_BIAXIAL = "equal-biaxial"


class LoadProgram(BaseModel):
    """
    Displacement ladder: step k of `steps` prescribes k/steps of the final boundary
    displacement ratios (u1_ratio, u2_ratio) = (u1/L, u2/L). Shear uses u2_ratio as the
    tangential top-edge displacement.
    """
    mode: LoadMode
    u1_ratio: float = 0.0
    u2_ratio: float = 0.0
    steps: int = Field(10, ge=1)

    def final_ratios(self) -> Tuple[float, float]:
        if self.mode is LoadMode.EQUAL_BIAXIAL:
            return self.u1_ratio, self.u1_ratio
        if self.mode is LoadMode.UNIAXIAL:
            return self.u1_ratio, 0.0
        if self.mode is LoadMode.SHEAR:
            return 0.0, self.u2_ratio
        return self.u1_ratio, self.u2_ratio

    def magnitudes(self) -> np.ndarray:
        return np.arange(1, self.steps + 1) / self.steps

    def scaled(self, factor: float) -> "LoadProgram":
        return self.model_copy(update={"u1_ratio": self.u1_ratio * factor, "u2_ratio": self.u2_ratio * factor})


@dataclass
class SolveReport:
    converged: bool
    residual_history: List[float]
    field: StrainField
    characteristic_force: float = 0.0
    bisections: int = 0
    extra: Dict[str, float] = field(default_factory=dict)

    @property
    def iterations(self) -> int:
        return max(len(self.residual_history) - 1, 0)


# --- Boundary conditions ---

def _is_biaxial(mode: LoadMode) -> bool:
    return mode in (LoadMode.BIAXIAL, LoadMode.PROPORTIONAL_BIAXIAL, LoadMode.EQUAL_BIAXIAL)


def displacement_gradient(mode: LoadMode, r1: float, r2: float) -> np.ndarray:
    """Affine displacement gradient consistent with the prescribed edge displacements."""
    if mode is LoadMode.SHEAR:
        return np.array([[0.0, r2], [0.0, 0.0]])
    if _is_biaxial(mode):
        return np.array([[r1, 0.0], [0.0, r2]])
    return np.array([[r1, 0.0], [0.0, 0.0]])


def dirichlet_conditions(mesh: Mesh, mode: LoadMode, r1: float, r2: float) -> Dict[int, float]:
    """
    Prescribed degrees of freedom (2 * node + component) for one load level.

    uniaxial: left u1 = 0, bottom-left corner u2 = 0, right u1 = r1 L.
    biaxial variants: additionally bottom u2 = 0 and top u2 = r2 L.
    shear: bottom fixed, top u = (r2 L, 0).
    """
    L = mesh.length_scale
    prescribed: Dict[int, float] = {}

    def put(name: str, component: int, value: float) -> None:
        for n in mesh.boundary_set(name):
            prescribed[2 * int(n) + component] = value

    if mode is LoadMode.SHEAR:
        put("bottom", 0, 0.0)
        put("bottom", 1, 0.0)
        put("top", 0, r2 * L)
        put("top", 1, 0.0)
        return prescribed

    put("left", 0, 0.0)
    put("right", 0, r1 * L)
    if _is_biaxial(mode):
        put("bottom", 1, 0.0)
        put("top", 1, r2 * L)
    else:
        left = mesh.boundary_set("left")
        corner = left[np.argmin(mesh.nodes[left, 1])]
        prescribed[2 * int(corner) + 1] = 0.0
    return prescribed


def recorded_conditions(mode: LoadMode) -> List[Tuple[str, Tuple[float, float]]]:
    """Boundary sets whose resultants are recorded, with their loading directions."""
    if mode is LoadMode.SHEAR:
        return [("top", (1.0, 0.0))]
    if _is_biaxial(mode):
        return [("right", (1.0, 0.0)), ("top", (0.0, 1.0))]
    return [("right", (1.0, 0.0))]


# --- Residual and tangent ---

def _residual(mesh: Mesh, provider: GradientProvider, u: np.ndarray) -> Tuple[np.ndarray, float, np.ndarray]:
    F = deformation_gradients(mesh, u)
    g = provider.gradient(invariants_from_F(F))
    A = coefficient_matrices(mesh, u, F)
    contributions = np.einsum("eaim,em->eai", A, g)
    forces = affine_residual(mesh.triangles, A, g, mesh.node_count)
    char = float(np.mean(np.linalg.norm(contributions, axis=-1)))
    floor = 1e-13 * float(np.mean(np.linalg.norm(A, axis=(-2, -1)))) * float(np.mean(np.linalg.norm(g, axis=-1)))
    return forces.ravel(), max(char, floor), F


def characteristic_force(mesh: Mesh, provider: GradientProvider, u: np.ndarray) -> float:
    return _residual(mesh, provider, u)[1]


def equilibrium_ratio(mesh: Mesh, provider: GradientProvider, u: np.ndarray) -> float:
    """max over interior nodes of the nodal force norm divided by the RMS of all A^{n,e} grad psi contributions."""
    F = deformation_gradients(mesh, u)
    g = provider.gradient(invariants_from_F(F))
    A = coefficient_matrices(mesh, u, F)
    contributions = np.einsum("eaim,em->eai", A, g)
    forces = affine_residual(mesh.triangles, A, g, mesh.node_count)
    rms = float(np.sqrt(np.mean(np.sum(contributions ** 2, axis=-1))))
    interior = mesh.interior_nodes
    if interior.size == 0:
        return 0.0
    return float(np.linalg.norm(forces[interior], axis=1).max() / max(rms, 1e-300))


def material_tangent(F: np.ndarray, grad: np.ndarray, hess: np.ndarray) -> np.ndarray:
    """dP_ij/dF_kl for every element, shape (E, 2, 2, 2, 2)."""
    det = F[:, 0, 0] * F[:, 1, 1] - F[:, 0, 1] * F[:, 1, 0]
    I3 = det * det
    B = np.empty(F.shape)
    B[:, 0, 0], B[:, 1, 1] = F[:, 1, 1] / det, F[:, 0, 0] / det
    B[:, 0, 1], B[:, 1, 0] = -F[:, 1, 0] / det, -F[:, 0, 1] / det
    G = np.stack([2.0 * F, 2.0 * I3[:, None, None] * B], axis=1)
    eye = np.eye(2)
    tangent = np.einsum("emn,emij,enkl->eijkl", hess, G, G)
    tangent += 2.0 * grad[:, 0, None, None, None, None] * np.einsum("ik,jl->ijkl", eye, eye)
    tangent += (2.0 * grad[:, 1] * I3)[:, None, None, None, None] * (
        2.0 * np.einsum("eij,ekl->eijkl", B, B) - np.einsum("eil,ekj->eijkl", B, B)
    )
    return tangent


def _dof_indices(mesh: Mesh) -> np.ndarray:
    return (2 * mesh.triangles[:, :, None] + np.arange(2)).reshape(mesh.element_count, 6)


def assemble_tangent(mesh: Mesh, provider: GradientProvider, u: np.ndarray) -> sparse.csr_matrix:
    F = deformation_gradients(mesh, u)
    inv = invariants_from_F(F)
    tangent = material_tangent(F, provider.gradient(inv), provider.hessian(inv))
    grads = mesh.shape_gradients
    Ke = mesh.areas[:, None, None, None, None] * np.einsum("eaj,eijkl,ebl->eaibk", grads, tangent, grads)
    Ke = Ke.reshape(mesh.element_count, 6, 6)
    dofs = _dof_indices(mesh)
    rows = np.repeat(dofs, 6, axis=1).ravel()
    cols = np.tile(dofs, (1, 6)).ravel()
    size = 2 * mesh.node_count
    return sparse.coo_matrix((Ke.ravel(), (rows, cols)), shape=(size, size)).tocsr()


def finite_difference_tangent(mesh: Mesh, provider: GradientProvider, u: np.ndarray, free: np.ndarray, step: float = 1e-7) -> sparse.csr_matrix:
    """Column-wise central differencing of the residual over the free dofs; for verifying the analytic tangent."""
    size = 2 * mesh.node_count
    flat = u.ravel()
    columns = []
    for dof in free:
        plus, minus = flat.copy(), flat.copy()
        plus[dof] += step
        minus[dof] -= step
        r_plus = _residual(mesh, provider, plus.reshape(-1, 2))[0]
        r_minus = _residual(mesh, provider, minus.reshape(-1, 2))[0]
        columns.append((r_plus - r_minus) / (2.0 * step))
    K = np.zeros((size, size))
    K[:, free] = np.stack(columns, axis=1) if columns else 0.0
    return sparse.csr_matrix(K)


# --- Newton iteration ---

def solve_step(
    mesh: Mesh,
    provider: GradientProvider,
    dirichlet: Dict[int, float],
    init: np.ndarray,
    rel_tol: Optional[float] = None,
    max_iterations: Optional[int] = None,
    tangent: str = "analytic",
) -> SolveReport:
    """
    Drives the free-dof residual below rel_tol times the characteristic force.

    Raises:
        NonConvergence: iteration cap reached or singular tangent.
        LineSearchFailure: no step length reduced the residual.
    """
    rel_tol = settings.SOLVER_REL_TOL if rel_tol is None else rel_tol
    max_iterations = settings.SOLVER_MAX_ITERATIONS if max_iterations is None else max_iterations

    size = 2 * mesh.node_count
    fixed = np.array(sorted(dirichlet), dtype=np.int64)
    free = np.setdiff1d(np.arange(size), fixed)
    u = np.asarray(init, dtype=float).ravel().copy()
    u[fixed] = [dirichlet[d] for d in fixed]

    r, char, _ = _residual(mesh, provider, u.reshape(-1, 2))
    norm = float(np.linalg.norm(r[free]))
    history = [norm]
    for iteration in range(max_iterations + 1):
        logger.debug("newton iteration=%d residual=%.3e char=%.3e", iteration, norm, char)
        if norm <= rel_tol * char:
            field = StrainField(mesh_ref=mesh.mesh_id, displacements=u.reshape(-1, 2))
            return SolveReport(converged=True, residual_history=history, field=field, characteristic_force=char)
        if iteration == max_iterations:
            break

        if tangent == "fd":
            K = finite_difference_tangent(mesh, provider, u.reshape(-1, 2), free)
        else:
            K = assemble_tangent(mesh, provider, u.reshape(-1, 2))
        du = np.zeros(size)
        du[free] = spsolve(K[free][:, free].tocsc(), -r[free])
        if not np.all(np.isfinite(du)):
            raise NonConvergence("Singular tangent stiffness.", report=history)

        alpha = 1.0
        for _ in range(settings.LINE_SEARCH_HALVINGS + 1):
            trial = u + alpha * du
            try:
                r_trial, char_trial, _ = _residual(mesh, provider, trial.reshape(-1, 2))
            except _INADMISSIBLE:
                alpha *= 0.5
                continue
            trial_norm = float(np.linalg.norm(r_trial[free]))
            if trial_norm < norm or trial_norm <= rel_tol * char_trial:
                u, r, char, norm = trial, r_trial, char_trial, trial_norm
                break
            alpha *= 0.5
        else:
            raise LineSearchFailure(f"Line search failed after {settings.LINE_SEARCH_HALVINGS} halvings.", report=history)
        history.append(norm)

    raise NonConvergence(f"No convergence in {max_iterations} iterations, residual {norm:.3e}.", report=history)


def _record_resultants(mesh: Mesh, provider: GradientProvider, u: np.ndarray, mode: LoadMode) -> Tuple[BoundaryCondition, ...]:
    forces = _residual(mesh, provider, u)[0].reshape(-1, 2)
    bcs = []
    for name, direction in recorded_conditions(mode):
        resultant = forces[mesh.boundary_set(name)].sum(axis=0)
        bcs.append(BoundaryCondition(
            set_name=name,
            direction=direction,
            force=float(resultant @ np.asarray(direction)),
            resultant=(float(resultant[0]), float(resultant[1])),
        ))
    return tuple(bcs)


def solve_load_program(mesh: Mesh, provider: GradientProvider, program: LoadProgram, tangent: str = "analytic") -> List[SolveReport]:
    """
    One converged report per load step, each warm-started from the previous step plus the
    affine increment of the boundary data. Failed steps are bisected up to
    settings.LOAD_BISECTIONS levels deep.
    """
    r1, r2 = program.final_ratios()
    X = mesh.nodes - mesh.nodes.min(axis=0)
    reports: List[SolveReport] = []

    if r1 == 0.0 and r2 == 0.0:
        for k in range(program.steps):
            u = np.zeros((mesh.node_count, 2))
            field = StrainField(mesh.mesh_id, u, _record_resultants(mesh, provider, u, program.mode), program.mode.value, k + 1)
            reports.append(SolveReport(converged=True, residual_history=[0.0], field=field))
        return reports

    def attempt(t_from: float, t_to: float, u: np.ndarray, depth: int) -> Tuple[np.ndarray, SolveReport]:
        dG = displacement_gradient(program.mode, r1 * (t_to - t_from), r2 * (t_to - t_from))
        guess = u + X @ dG.T
        dirichlet = dirichlet_conditions(mesh, program.mode, r1 * t_to, r2 * t_to)
        try:
            report = solve_step(mesh, provider, dirichlet, guess, tangent=tangent)
            return report.field.displacements, report
        except (NonConvergence,) + _INADMISSIBLE as exc:
            if depth >= settings.LOAD_BISECTIONS:
                raise NonConvergence(
                    f"Load step to {t_to:.6f} failed after {depth} bisections: {exc}",
                    report=getattr(exc, "report", None),
                )
            logger.info("bisecting load step t_from=%.6f t_to=%.6f depth=%d", t_from, t_to, depth + 1)
            middle = 0.5 * (t_from + t_to)
            u_mid, first = attempt(t_from, middle, u, depth + 1)
            u_end, second = attempt(middle, t_to, u_mid, depth + 1)
            second.bisections = first.bisections + second.bisections + 1
            return u_end, second

    u = np.zeros((mesh.node_count, 2))
    previous = 0.0
    for k, t in enumerate(program.magnitudes(), start=1):
        try:
            u, report = attempt(previous, float(t), u, 0)
        except NonConvergence as exc:
            raise NonConvergence(f"{program.mode.value} step {k}/{program.steps}: {exc.detail}", report=exc.report)
        report.field = StrainField(
            mesh.mesh_id, u, _record_resultants(mesh, provider, u, program.mode), program.mode.value, k
        )
        reports.append(report)
        logger.info(
            "load step mode=%s step=%d/%d iterations=%d residual=%.3e",
            program.mode.value, k, program.steps, report.iterations, report.residual_history[-1],
        )
        previous = float(t)
    return reports


def run_load_program(mesh: Mesh, provider: GradientProvider, program: LoadProgram) -> List[StrainField]:
    return [report.field for report in solve_load_program(mesh, provider, program)]


# --- ICM-driven simulation ---

class RangeMonitor:
    """Wraps a provider and warns once when queried invariants leave a covered box."""

    def __init__(self, provider: GradientProvider, lower: np.ndarray, upper: np.ndarray):
        self.provider = provider
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)
        self.extrapolated = False

    def _check(self, inv: np.ndarray) -> None:
        outside = np.any(inv < self.lower) or np.any(inv > self.upper)
        if outside and not self.extrapolated:
            self.extrapolated = True
            warnings.warn(
                f"Invariants outside the context range [{self.lower}, {self.upper}].",
                ExtrapolationWarning,
                stacklevel=3,
            )

    def gradient(self, inv: np.ndarray) -> np.ndarray:
        self._check(inv)
        return self.provider.gradient(inv)

    def hessian(self, inv: np.ndarray) -> np.ndarray:
        return self.provider.hessian(inv)


def icm_driven_fem(
    mesh: Mesh,
    provider: GradientProvider,
    program: LoadProgram,
    covered_range: Optional[Tuple[np.ndarray, np.ndarray]] = None,
) -> List[StrainField]:
    """Forward simulation with a learned constitutive law; leaving `covered_range` issues ExtrapolationWarning."""
    if covered_range is not None:
        provider = RangeMonitor(provider, *covered_range)
    return run_load_program(mesh, provider, program)


def displacement_error(fields: List[StrainField], reference: List[StrainField]) -> float:
    """Relative displacement error accumulated over all steps."""
    num = sum(float(np.sum((a.displacements - b.displacements) ** 2)) for a, b in zip(fields, reference))
    den = sum(float(np.sum(b.displacements ** 2)) for b in reference)
    return float(np.sqrt(num / den)) if den > 0 else float(np.sqrt(num))
