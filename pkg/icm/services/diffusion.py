"""
Nonlinear diffusion on linear triangles: backward-Euler simulation of
dc/dt = div(D(c) grad c) and tokenization into the affine constraints
sum_e A^{n,e,m} : D(c^{e,m}) = b^{n,m}, the same pattern as deformation tokens.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, field_validator
from scipy import sparse
from scipy.sparse.linalg import spsolve

from config import settings
from icm.errors import DomainViolation, NonConvergence
from icm.services.discretization import Mesh, scatter_to_nodes, token_residual

logger = logging.getLogger(__name__)


class DiffusivityModel(BaseModel):
    """Symmetric D(c) whose components are polynomials in c, coefficients in ascending order."""
    model_config = {"frozen": True}

    d11: Tuple[float, ...] = (0.1,)
    d12: Tuple[float, ...] = (0.0,)
    d22: Tuple[float, ...] = (0.1,)

    @field_validator("d11", "d12", "d22")
    @classmethod
    def _finite(cls, value: Tuple[float, ...]) -> Tuple[float, ...]:
        if not value or not np.all(np.isfinite(value)):
            raise ValueError("Diffusivity coefficients must be a non-empty list of finite numbers.")
        return tuple(float(v) for v in value)

    @classmethod
    def isotropic(cls, D0: float) -> "DiffusivityModel":
        return cls(d11=(D0,), d12=(0.0,), d22=(D0,))

    def _tensor(self, c: np.ndarray, derivative: bool) -> np.ndarray:
        c = np.asarray(c, dtype=float)
        polys = [np.polynomial.Polynomial(coef) for coef in (self.d11, self.d12, self.d22)]
        if derivative:
            polys = [p.deriv() for p in polys]
        d11, d12, d22 = (p(c) for p in polys)
        return np.stack([np.stack([d11, d12], axis=-1), np.stack([d12, d22], axis=-1)], axis=-2)

    def D(self, c) -> np.ndarray:
        """D(c), shape c.shape + (2, 2)."""
        return self._tensor(c, derivative=False)

    def dD(self, c) -> np.ndarray:
        return self._tensor(c, derivative=True)

    def scaled(self, factor: float) -> "DiffusivityModel":
        return DiffusivityModel(
            d11=tuple(factor * v for v in self.d11),
            d12=tuple(factor * v for v in self.d12),
            d22=tuple(factor * v for v in self.d22),
        )

    def check_positive_definite(self, c) -> None:
        """
        Raises:
            DomainViolation: if D(c) is not positive definite somewhere on `c`.
        """
        eigenvalues = np.linalg.eigvalsh(self.D(np.ravel(c)))
        if np.any(eigenvalues <= 0.0):
            raise DomainViolation(f"Diffusivity not positive definite (min eigenvalue {eigenvalues.min():.3e}).")


# --- Assembly ---

def mass_matrix(mesh: Mesh) -> sparse.csr_matrix:
    """Consistent mass, element block w/12 (1 + delta_ab)."""
    local = (np.ones((3, 3)) + np.eye(3)) / 12.0
    values = mesh.areas[:, None, None] * local[None]
    rows = np.repeat(mesh.triangles, 3, axis=1).ravel()
    cols = np.tile(mesh.triangles, (1, 3)).ravel()
    return sparse.csr_matrix((values.ravel(), (rows, cols)), shape=(mesh.node_count, mesh.node_count))


def element_concentrations(mesh: Mesh, c: np.ndarray) -> np.ndarray:
    """Centroid values c^e."""
    return np.asarray(c, dtype=float)[mesh.triangles].mean(axis=1)


def concentration_gradients(mesh: Mesh, c: np.ndarray) -> np.ndarray:
    return np.einsum("ea,eai->ei", np.asarray(c, dtype=float)[mesh.triangles], mesh.shape_gradients)


def _diffusive_contributions(mesh: Mesh, model: DiffusivityModel, c: np.ndarray) -> np.ndarray:
    """w grad N_a . D(c^e) grad c^e, shape (E, 3)."""
    flux = np.einsum("eij,ej->ei", model.D(element_concentrations(mesh, c)), concentration_gradients(mesh, c))
    return mesh.areas[:, None] * np.einsum("eai,ei->ea", mesh.shape_gradients, flux)


def diffusion_residual(
    mesh: Mesh,
    model: DiffusivityModel,
    c: np.ndarray,
    c_prev: np.ndarray,
    dt: float,
    M: Optional[sparse.csr_matrix] = None,
) -> np.ndarray:
    """Nodal backward-Euler residual M (c - c_prev) / dt + sum_e w grad N . D grad c."""
    M = mass_matrix(mesh) if M is None else M
    transient = M @ (np.asarray(c, dtype=float) - c_prev) / dt
    return transient + scatter_to_nodes(mesh.triangles, _diffusive_contributions(mesh, model, c), mesh.node_count)


def _jacobian(mesh: Mesh, model: DiffusivityModel, c: np.ndarray, M: sparse.csr_matrix, dt: float, method: str) -> sparse.csr_matrix:
    G, w = mesh.shape_gradients, mesh.areas
    c_e = element_concentrations(mesh, c)
    local = w[:, None, None] * np.einsum("eai,eij,ebj->eab", G, model.D(c_e), G)
    if method == "newton":
        dflux = np.einsum("eij,ej->ei", model.dD(c_e), concentration_gradients(mesh, c))
        column = w[:, None] * np.einsum("eai,ei->ea", G, dflux) / 3.0
        local = local + column[:, :, None]
    rows = np.repeat(mesh.triangles, 3, axis=1).ravel()
    cols = np.tile(mesh.triangles, (1, 3)).ravel()
    K = sparse.csr_matrix((local.ravel(), (rows, cols)), shape=(mesh.node_count, mesh.node_count))
    return (M / dt + K).tocsr()


def boundary_dirichlet(mesh: Mesh, values) -> Dict[int, float]:
    """Dirichlet data on every outer boundary node; `values` is a scalar or a nodal array."""
    values = np.asarray(values, dtype=float)
    if values.ndim == 0:
        values = np.full(mesh.node_count, float(values))
    return {int(n): float(values[n]) for n in mesh.boundary_nodes}


def diffusion_step(
    mesh: Mesh,
    model: DiffusivityModel,
    c_prev: np.ndarray,
    dirichlet: Dict[int, float],
    dt: float,
    method: str = "newton",
    rel_tol: Optional[float] = None,
    max_iterations: Optional[int] = None,
) -> np.ndarray:
    """
    One backward-Euler step, solved by Newton (consistent Jacobian) or Picard (D frozen
    at the previous iterate).

    Raises:
        NonConvergence: iteration cap reached or singular system.
    """
    if dt <= 0.0:
        raise ValueError(f"Time step must be positive, got {dt}.")
    if method not in ("newton", "picard"):
        raise ValueError(f"Unknown diffusion solver '{method}'; expected 'newton' or 'picard'.")
    rel_tol = settings.SOLVER_REL_TOL if rel_tol is None else rel_tol
    if max_iterations is None:
        max_iterations = settings.SOLVER_MAX_ITERATIONS * (4 if method == "picard" else 1)

    c_prev = np.asarray(c_prev, dtype=float)
    M = mass_matrix(mesh)
    fixed = np.array(sorted(dirichlet), dtype=np.int64)
    free = np.setdiff1d(np.arange(mesh.node_count), fixed)
    c = c_prev.copy()
    c[fixed] = [dirichlet[n] for n in fixed]

    D_max = float(np.max(np.abs(model.D(element_concentrations(mesh, c_prev)))))
    floor = 1e-13 * np.sqrt(mesh.node_count) * float(np.max(np.abs(c))) * (float(mesh.areas.mean()) / dt + D_max)
    history = []
    for iteration in range(max_iterations + 1):
        r = diffusion_residual(mesh, model, c, c_prev, dt, M)
        transient = np.abs(M) @ np.abs(c - c_prev) / dt
        diffusive = scatter_to_nodes(mesh.triangles, np.abs(_diffusive_contributions(mesh, model, c)), mesh.node_count)
        char = float(np.linalg.norm(transient[free] + diffusive[free]))
        norm = float(np.linalg.norm(r[free]))
        history.append(norm)
        logger.debug("diffusion iteration=%d method=%s residual=%.3e char=%.3e", iteration, method, norm, char)
        if norm <= max(rel_tol * char, floor):
            return c
        if iteration == max_iterations:
            break
        J = _jacobian(mesh, model, c, M, dt, method)
        dc = spsolve(J[free][:, free].tocsc(), -r[free])
        if not np.all(np.isfinite(dc)):
            raise NonConvergence("Singular diffusion system.", report=history)
        c[free] += dc
    raise NonConvergence(f"Diffusion step did not converge in {max_iterations} iterations.", report=history)


def simulate_diffusion(
    mesh: Mesh,
    model: DiffusivityModel,
    c0: np.ndarray,
    dt_series: Sequence[float],
    dirichlet: Optional[Dict[int, float]] = None,
    method: str = "newton",
) -> np.ndarray:
    """Concentration series, shape (len(dt_series) + 1, N). Dirichlet data defaults to c0 on the boundary."""
    dirichlet = boundary_dirichlet(mesh, c0) if dirichlet is None else dirichlet
    series = [np.asarray(c0, dtype=float)]
    for dt in dt_series:
        series.append(diffusion_step(mesh, model, series[-1], dirichlet, float(dt), method=method))
    logger.info("diffusion simulated mesh=%s steps=%d method=%s", mesh.mesh_id, len(dt_series), method)
    return np.stack(series)


def boundary_flux(mesh: Mesh, model: DiffusivityModel, c: np.ndarray, c_prev: np.ndarray, dt: float) -> float:
    """Net inflow rate through the Dirichlet boundary: the summed residual reactions there."""
    return float(diffusion_residual(mesh, model, c, c_prev, dt)[mesh.boundary_nodes].sum())


def content_rate(mesh: Mesh, c: np.ndarray, c_prev: np.ndarray, dt: float) -> float:
    """d/dt of the total content, integral of (c - c_prev) / dt."""
    return float((mass_matrix(mesh) @ (np.asarray(c, dtype=float) - c_prev)).sum() / dt)


# --- Tokens ---

@dataclass(frozen=True)
class DiffusionSubtoken:
    A: np.ndarray
    c: float


@dataclass(frozen=True)
class DiffusionToken:
    node_id: int
    step: int
    subtokens: List[DiffusionSubtoken]
    b: float


@dataclass(frozen=True, eq=False)
class DiffusionTokenSet:
    """Flat diffusion tokens; token t owns subtokens offsets[t]:offsets[t + 1]."""
    node_ids: np.ndarray
    steps: np.ndarray
    offsets: np.ndarray
    A: np.ndarray
    concentrations: np.ndarray
    element_ids: np.ndarray
    b: np.ndarray

    def __len__(self) -> int:
        return len(self.node_ids)

    @property
    def owners(self) -> np.ndarray:
        return np.repeat(np.arange(len(self)), np.diff(self.offsets))

    def __getitem__(self, t: int) -> DiffusionToken:
        lo, hi = int(self.offsets[t]), int(self.offsets[t + 1])
        subtokens = [DiffusionSubtoken(A=self.A[s], c=float(self.concentrations[s])) for s in range(lo, hi)]
        return DiffusionToken(node_id=int(self.node_ids[t]), step=int(self.steps[t]), subtokens=subtokens, b=float(self.b[t]))

    def residual(self, model: DiffusivityModel) -> np.ndarray:
        """sum_e A : D(c^e) - b per token."""
        A = self.A.reshape(-1, 1, 4)
        g = model.D(self.concentrations).reshape(-1, 4)
        return token_residual(A, g, self.owners, len(self), self.b[:, None])[:, 0]

    def relative_residual(self, model: DiffusivityModel) -> np.ndarray:
        """Residual over the magnitude sum_e |A : D| + |b| of each token."""
        terms = np.einsum("sij,sij->s", self.A, model.D(self.concentrations))
        scale = np.zeros(len(self))
        np.add.at(scale, self.owners, np.abs(terms))
        scale += np.abs(self.b)
        return np.abs(self.residual(model)) / np.where(scale > 0.0, scale, 1.0)


def tokenize_diffusion(
    mesh: Mesh,
    c_series: np.ndarray,
    dt_series: Sequence[float],
    nodes: Optional[np.ndarray] = None,
) -> DiffusionTokenSet:
    """
    Tokens for every interior node and every step m >= 1:
    A^{n,e,m} = w^e grad N^n (x) grad c^m, c^{e,m} the centroid value and
    b^{n,m} = -(M (c^m - c^{m-1}))_n / dt^m with the simulator's consistent mass.
    """
    c_series = np.asarray(c_series, dtype=float)
    if c_series.ndim != 2 or len(c_series) < 2:
        raise ValueError("Diffusion tokenization needs at least two time levels.")
    if len(dt_series) != len(c_series) - 1:
        raise ValueError(f"Expected {len(c_series) - 1} time steps, got {len(dt_series)}.")
    nodes = np.setdiff1d(np.arange(mesh.node_count), mesh.boundary_nodes) if nodes is None else np.asarray(nodes)

    adjacency = mesh.node_elements[nodes]
    adjacency.sort_indices()
    elements = adjacency.indices.astype(np.int64)
    local = adjacency.data.astype(np.int64) - 1
    counts = np.diff(adjacency.indptr)
    M = mass_matrix(mesh)
    weighted = mesh.areas[elements, None] * mesh.shape_gradients[elements, local]

    node_ids, steps, offsets, A, conc, element_ids, b = [], [], [0], [], [], [], []
    for m in range(1, len(c_series)):
        grad_c = concentration_gradients(mesh, c_series[m])[elements]
        A.append(np.einsum("si,sj->sij", weighted, grad_c))
        conc.append(element_concentrations(mesh, c_series[m])[elements])
        element_ids.append(elements)
        b.append(-(M @ (c_series[m] - c_series[m - 1]))[nodes] / float(dt_series[m - 1]))
        node_ids.append(nodes)
        steps.append(np.full(len(nodes), m))
        offsets.extend(offsets[-1] + np.cumsum(counts))

    return DiffusionTokenSet(
        node_ids=np.concatenate(node_ids).astype(np.int64),
        steps=np.concatenate(steps).astype(np.int64),
        offsets=np.asarray(offsets, dtype=np.int64),
        A=np.concatenate(A),
        concentrations=np.concatenate(conc),
        element_ids=np.concatenate(element_ids),
        b=np.concatenate(b),
    )


def sine_initial_field(mesh: Mesh, amplitude: float = 1.0) -> np.ndarray:
    """amplitude sin(pi x / L) sin(pi y / L), zero on the outer boundary of a square plate."""
    X = mesh.nodes - mesh.nodes.min(axis=0)
    L = float(X.max())
    return amplitude * np.sin(np.pi * X[:, 0] / L) * np.sin(np.pi * X[:, 1] / L)
