"""
Linear-triangle discretization of perforated plates: meshes, shape-function
gradients, element kinematics, coefficient matrices A^{n,e} and nodal-force
assembly.
"""
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, field_validator
from scipy import sparse
from scipy.spatial import Delaunay

from icm.errors import (
    DegenerateElement,
    MeshGenerationFailure,
    NodeNotInElement,
    UnknownBoundarySet,
)
from icm.services.materials import GradientProvider, invariants_from_F, stress_from_gradient

logger = logging.getLogger(__name__)

OUTER_EDGES = ("left", "right", "bottom", "top")
DEGENERATE_AREA = 1e-14


# --- Domain types ---

@dataclass(frozen=True, eq=False)
class Mesh:
    """
    Immutable triangle mesh. Derived quantities (areas, shape gradients, node to element
    adjacency, interior nodes) are computed once on first access.
    """
    nodes: np.ndarray
    triangles: np.ndarray
    boundary_sets: Dict[str, np.ndarray]
    mesh_id: str = "mesh"

    def __post_init__(self):
        object.__setattr__(self, "nodes", np.ascontiguousarray(self.nodes, dtype=float))
        object.__setattr__(self, "triangles", np.ascontiguousarray(self.triangles, dtype=np.int64))
        object.__setattr__(
            self, "boundary_sets", {name: np.asarray(ids, dtype=np.int64) for name, ids in self.boundary_sets.items()}
        )
        n = len(self.nodes)
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise MeshGenerationFailure("Triangles must be index triples.")
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= n):
            raise MeshGenerationFailure("Triangle references a node index out of range.")
        for name, ids in self.boundary_sets.items():
            if ids.size and (ids.min() < 0 or ids.max() >= n):
                raise MeshGenerationFailure(f"Boundary set '{name}' references a node index out of range.")
        threshold = DEGENERATE_AREA * self.length_scale ** 2
        bad = np.flatnonzero(self.signed_areas <= threshold)
        if bad.size:
            raise DegenerateElement(f"{bad.size} element(s) with area <= {threshold:.3e}, first is {bad[0]}.")

    @property
    def node_count(self) -> int:
        return len(self.nodes)

    @property
    def element_count(self) -> int:
        return len(self.triangles)

    @cached_property
    def length_scale(self) -> float:
        extent = self.nodes.max(axis=0) - self.nodes.min(axis=0)
        return float(max(extent.max(), 1e-300))

    @cached_property
    def signed_areas(self) -> np.ndarray:
        x = self.nodes[self.triangles]
        e1, e2 = x[:, 1] - x[:, 0], x[:, 2] - x[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e2[:, 0] * e1[:, 1])

    @property
    def areas(self) -> np.ndarray:
        return self.signed_areas

    @cached_property
    def shape_gradients(self) -> np.ndarray:
        """Constant gradients dN_a/dX of the three vertex shape functions, shape (E, 3, 2)."""
        x = self.nodes[self.triangles]
        twice = 2.0 * self.signed_areas
        grads = np.empty((self.element_count, 3, 2))
        for a in range(3):
            b, c = (a + 1) % 3, (a + 2) % 3
            grads[:, a, 0] = (x[:, b, 1] - x[:, c, 1]) / twice
            grads[:, a, 1] = (x[:, c, 0] - x[:, b, 0]) / twice
        return grads

    @cached_property
    def node_elements(self) -> sparse.csr_matrix:
        """Incidence (node, element) -> local vertex index + 1, as CSR."""
        rows = self.triangles.ravel()
        cols = np.repeat(np.arange(self.element_count), 3)
        local = np.tile(np.arange(1, 4), self.element_count)
        return sparse.csr_matrix((local, (rows, cols)), shape=(self.node_count, self.element_count))

    def elements_of(self, n: int) -> np.ndarray:
        """Element indices E(n) adjacent to node n."""
        adjacency = self.node_elements
        return adjacency.indices[adjacency.indptr[n]:adjacency.indptr[n + 1]]

    @cached_property
    def boundary_nodes(self) -> np.ndarray:
        if not self.boundary_sets:
            return np.zeros(0, dtype=np.int64)
        return np.unique(np.concatenate(list(self.boundary_sets.values())))

    @cached_property
    def interior_nodes(self) -> np.ndarray:
        """Nodes outside every boundary set; hole boundaries are traction free and count as interior."""
        mask = np.ones(self.node_count, dtype=bool)
        mask[self.boundary_nodes] = False
        return np.flatnonzero(mask)

    def boundary_set(self, name: str) -> np.ndarray:
        try:
            return self.boundary_sets[name]
        except KeyError:
            raise UnknownBoundarySet(f"Unknown boundary set '{name}'; mesh has {sorted(self.boundary_sets)}.")


@dataclass(frozen=True)
class BoundaryCondition:
    """
    Measured resultant magnitude `force` of boundary set `set_name` along unit `direction`.
    `resultant` is the full measured 2-vector when it was recorded.
    """
    set_name: str
    direction: Tuple[float, float]
    force: float = 0.0
    resultant: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        norm = math.hypot(*self.direction)
        if abs(norm - 1.0) > 1e-12:
            raise ValueError(f"Loading direction of '{self.set_name}' must be a unit vector, norm is {norm}.")


@dataclass(frozen=True, eq=False)
class StrainField:
    mesh_ref: str
    displacements: np.ndarray
    bcs: Tuple[BoundaryCondition, ...] = field(default_factory=tuple)
    mode: str = ""
    step: int = 0

    def __post_init__(self):
        object.__setattr__(self, "displacements", np.asarray(self.displacements, dtype=float))
        object.__setattr__(self, "bcs", tuple(self.bcs))

    def check_against(self, mesh: Mesh) -> None:
        if self.displacements.shape != (mesh.node_count, 2):
            raise ValueError(
                f"Displacement array {self.displacements.shape} does not match {mesh.node_count} nodes."
            )


def _displacements(field_or_u: Union[StrainField, np.ndarray]) -> np.ndarray:
    if isinstance(field_or_u, StrainField):
        return field_or_u.displacements
    return np.asarray(field_or_u, dtype=float)


# --- Kinematics ---

def deformation_gradients(mesh: Mesh, u: Union[StrainField, np.ndarray]) -> np.ndarray:
    """F^e = I + sum_a u^a (x) dN_a/dX for every element, shape (E, 2, 2)."""
    u = _displacements(u)
    return np.eye(2) + np.einsum("eai,eaj->eij", u[mesh.triangles], mesh.shape_gradients)


def element_invariants(mesh: Mesh, u: Union[StrainField, np.ndarray]) -> np.ndarray:
    return invariants_from_F(deformation_gradients(mesh, u))


def element_kinematics(mesh: Mesh, field: Union[StrainField, np.ndarray], e: int) -> Tuple[np.ndarray, np.ndarray, float]:
    """(F^e, per-vertex dN/dX, w^e) of a single element."""
    u = _displacements(field)
    grads = mesh.shape_gradients[e]
    F = np.eye(2) + np.einsum("ai,aj->ij", u[mesh.triangles[e]], grads)
    return F, grads, float(mesh.areas[e])


def _cofactor(F: np.ndarray) -> np.ndarray:
    cof = np.empty(F.shape)
    cof[..., 0, 0] = F[..., 1, 1]
    cof[..., 1, 1] = F[..., 0, 0]
    cof[..., 0, 1] = -F[..., 1, 0]
    cof[..., 1, 0] = -F[..., 0, 1]
    return cof


def coefficient_matrices(mesh: Mesh, u: Union[StrainField, np.ndarray], F: Optional[np.ndarray] = None) -> np.ndarray:
    """
    A^{n,e} for every (element, local vertex), shape (E, 3, 2, 2) indexed [e, a, i, m]
    with m = 0 for I1 and m = 1 for I3.

    Column I1 is 2 w F dN/dX; column I3 is 2 w I3 F^-T dN/dX = 2 w det(F) cof(F) dN/dX.
    """
    if F is None:
        F = deformation_gradients(mesh, u)
    det = F[:, 0, 0] * F[:, 1, 1] - F[:, 0, 1] * F[:, 1, 0]
    w2 = 2.0 * mesh.areas
    grads = mesh.shape_gradients
    A = np.empty((mesh.element_count, 3, 2, 2))
    A[..., 0] = w2[:, None, None] * np.einsum("eij,eaj->eai", F, grads)
    A[..., 1] = (w2 * det)[:, None, None] * np.einsum("eij,eaj->eai", _cofactor(F), grads)
    return A


def coefficient_matrix(mesh: Mesh, field: Union[StrainField, np.ndarray], n: int, e: int) -> np.ndarray:
    local = np.flatnonzero(mesh.triangles[e] == n)
    if local.size == 0:
        raise NodeNotInElement(f"Node {n} is not a vertex of element {e}.")
    F, grads, w = element_kinematics(mesh, field, e)
    I3 = np.linalg.det(F) ** 2
    g = grads[local[0]]
    return np.stack([2.0 * w * F @ g, 2.0 * w * I3 * np.linalg.inv(F).T @ g], axis=-1)


# --- Assembly ---

def scatter_to_nodes(triangles: np.ndarray, contributions: np.ndarray, node_count: int) -> np.ndarray:
    """Sums per-(element, vertex) contributions of shape (E, 3, ...) into per-node totals."""
    out = np.zeros((node_count,) + contributions.shape[2:])
    np.add.at(out, triangles, contributions)
    return out


def affine_residual(
    triangles: np.ndarray,
    A: np.ndarray,
    g: np.ndarray,
    node_count: int,
    offsets: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    Nodal residual sum_e A^{n,e} g^e (+ b^n) for an operator affine in a per-element
    vector g. A has shape (E, 3, d, M), g (E, M), offsets (N, d).
    """
    residual = scatter_to_nodes(triangles, np.einsum("eaim,em->eai", A, g), node_count)
    if offsets is not None:
        residual = residual + offsets
    return residual


def token_residual(
    A: np.ndarray,
    g: np.ndarray,
    owners: np.ndarray,
    token_count: int,
    b: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    Per-token residual sum_{s in t} A_s g_s - b_t over flat subtokens. A has shape
    (S, d, M), g (S, M), owners (S,) the token index of each subtoken, b (T, d).
    Deformation tokens pass b = None.
    """
    residual = np.zeros((token_count, A.shape[1]))
    np.add.at(residual, owners, np.einsum("sim,sm->si", A, g))
    if b is not None:
        residual = residual - np.asarray(b, dtype=float).reshape(token_count, -1)
    return residual


def nodal_forces(mesh: Mesh, field: Union[StrainField, np.ndarray], provider: GradientProvider) -> np.ndarray:
    """f^n = sum_{e in E(n)} A^{n,e} grad psi(I^e) for all nodes, shape (N, 2)."""
    F = deformation_gradients(mesh, field)
    g = provider.gradient(invariants_from_F(F))
    return affine_residual(mesh.triangles, coefficient_matrices(mesh, field, F), g, mesh.node_count)


def nodal_forces_quadrature(mesh: Mesh, field: Union[StrainField, np.ndarray], provider: GradientProvider) -> np.ndarray:
    """Same forces through one-point quadrature of w P : dN/dX."""
    F = deformation_gradients(mesh, field)
    P = stress_from_gradient(F, provider.gradient(invariants_from_F(F)), kind="P").values
    contributions = mesh.areas[:, None, None] * np.einsum("eij,eaj->eai", P, mesh.shape_gradients)
    return scatter_to_nodes(mesh.triangles, contributions, mesh.node_count)


def nodal_force(mesh: Mesh, field: Union[StrainField, np.ndarray], provider: GradientProvider, n: int) -> np.ndarray:
    if not 0 <= n < mesh.node_count:
        raise IndexError(f"Node {n} out of range.")
    elements = mesh.elements_of(n)
    u = _displacements(field)
    F = np.eye(2) + np.einsum("eai,eaj->eij", u[mesh.triangles[elements]], mesh.shape_gradients[elements])
    g = provider.gradient(invariants_from_F(F))
    force = np.zeros(2)
    for k, e in enumerate(elements):
        force += coefficient_matrix(mesh, u, n, int(e)) @ g[k]
    return force


def boundary_resultant(
    mesh: Mesh,
    field: Union[StrainField, np.ndarray],
    provider: GradientProvider,
    bc: Union[BoundaryCondition, str],
    forces: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Sum of nodal forces over a boundary set. Pass precomputed `forces` to skip assembly."""
    name = bc.set_name if isinstance(bc, BoundaryCondition) else bc
    ids = mesh.boundary_set(name)
    if forces is None:
        forces = nodal_forces(mesh, field, provider)
    return forces[ids].sum(axis=0)


def min_angles(mesh: Mesh) -> np.ndarray:
    """Smallest interior angle of each triangle, degrees."""
    return _min_angles(mesh.nodes, mesh.triangles)


def _min_angles(nodes: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    x = nodes[triangles]
    angles = []
    for a in range(3):
        p, q = x[:, (a + 1) % 3] - x[:, a], x[:, (a + 2) % 3] - x[:, a]
        cos = np.einsum("ei,ei->e", p, q) / (np.linalg.norm(p, axis=1) * np.linalg.norm(q, axis=1))
        angles.append(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))
    return np.min(angles, axis=0)


# --- Plate geometry and mesh generation ---

class HoleSpec(BaseModel):
    center: Tuple[float, float]
    shape: Literal["circle", "ellipse", "square"] = "circle"
    # circle: [radius]; ellipse: [semi_axis_x, semi_axis_y]; square: [side]
    size: List[float]
    angle: float = 0.0

    @field_validator("size")
    @classmethod
    def _positive(cls, value: List[float]) -> List[float]:
        if not value or any(s <= 0 for s in value):
            raise ValueError("Hole sizes must be positive.")
        return value

    def _local(self, points: np.ndarray) -> np.ndarray:
        c, s = math.cos(self.angle), math.sin(self.angle)
        d = points - np.asarray(self.center)
        return np.stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1]], axis=1)

    def contains(self, points: np.ndarray, pad: float = 0.0) -> np.ndarray:
        """Points strictly inside the hole grown by `pad`."""
        p = self._local(np.atleast_2d(points))
        if self.shape == "circle":
            return np.hypot(p[:, 0], p[:, 1]) < self.size[0] + pad
        if self.shape == "ellipse":
            a, b = self.size[0] + pad, self.size[-1] + pad
            return (p[:, 0] / a) ** 2 + (p[:, 1] / b) ** 2 < 1.0
        half = 0.5 * self.size[0] + pad
        return (np.abs(p[:, 0]) < half) & (np.abs(p[:, 1]) < half)

    def boundary_points(self, h: float) -> np.ndarray:
        """Counter-clockwise polygon resolving the hole by at least 16 segments."""
        if self.shape == "square":
            per_side = max(4, math.ceil(self.size[0] / h))
            half = 0.5 * self.size[0]
            t = np.linspace(-half, half, per_side + 1)[:-1]
            local = np.concatenate([
                np.stack([t, np.full_like(t, -half)], axis=1),
                np.stack([np.full_like(t, half), t], axis=1),
                np.stack([-t, np.full_like(t, half)], axis=1),
                np.stack([np.full_like(t, -half), -t], axis=1),
            ])
        else:
            a, b = self.size[0], self.size[-1]
            count = max(16, math.ceil(2.0 * math.pi * max(a, b) / h))
            theta = np.linspace(0.0, 2.0 * math.pi, count, endpoint=False)
            local = np.stack([a * np.cos(theta), b * np.sin(theta)], axis=1)
        c, s = math.cos(self.angle), math.sin(self.angle)
        rotated = np.stack([c * local[:, 0] - s * local[:, 1], s * local[:, 0] + c * local[:, 1]], axis=1)
        return rotated + np.asarray(self.center)


class GeometrySpec(BaseModel):
    name: str = "plate"
    side_length: float = Field(1.0, gt=0)
    holes: List[HoleSpec] = Field(default_factory=list)
    h: float = Field(0.1, gt=0)


def _polygon_area(points: np.ndarray) -> float:
    x, y = points[:, 0], points[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _outer_boundary_sets(nodes: np.ndarray, L: float) -> Dict[str, np.ndarray]:
    tol = 1e-9 * L
    x, y = nodes[:, 0], nodes[:, 1]
    return {
        "left": np.flatnonzero(np.abs(x) < tol),
        "right": np.flatnonzero(np.abs(x - L) < tol),
        "bottom": np.flatnonzero(np.abs(y) < tol),
        "top": np.flatnonzero(np.abs(y - L) < tol),
    }


def _structured_mesh(spec: GeometrySpec) -> Mesh:
    L = spec.side_length
    n = max(1, round(L / spec.h))
    ticks = np.linspace(0.0, L, n + 1)
    X, Y = np.meshgrid(ticks, ticks, indexing="xy")
    nodes = np.stack([X.ravel(), Y.ravel()], axis=1)
    idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
    a, b = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()
    c, d = idx[1:, 1:].ravel(), idx[1:, :-1].ravel()
    triangles = np.concatenate([np.stack([a, b, c], axis=1), np.stack([a, c, d], axis=1)])
    return Mesh(nodes=nodes, triangles=triangles, boundary_sets=_outer_boundary_sets(nodes, L), mesh_id=spec.name)


def _check_holes(spec: GeometrySpec, loops: List[np.ndarray]) -> None:
    L, pad = spec.side_length, 0.25 * spec.h
    for k, (hole, loop) in enumerate(zip(spec.holes, loops)):
        if np.any(loop < pad) or np.any(loop > L - pad):
            raise MeshGenerationFailure(f"Hole {k} touches or crosses the outer boundary.")
        for j in range(k):
            if np.any(spec.holes[j].contains(loop, pad)) or np.any(hole.contains(loops[j], pad)):
                raise MeshGenerationFailure(f"Holes {j} and {k} overlap or touch.")


def _hex_lattice(spec: GeometrySpec) -> np.ndarray:
    L, h = spec.side_length, spec.h
    dy = h * math.sqrt(3.0) / 2.0
    rows = int(math.floor((L - h) / dy)) + 1 if L > h else 0
    cols = int(math.floor((L - h) / h)) + 1 if L > h else 0
    if rows <= 0 or cols <= 0:
        return np.zeros((0, 2))
    y0 = 0.5 * (L - (rows - 1) * dy)
    x0 = 0.5 * (L - (cols - 1) * h)
    points = []
    for j in range(rows):
        xs = x0 + h * np.arange(cols) + (0.5 * h if j % 2 else 0.0)
        xs = xs[xs <= L - 0.5 * h]
        points.append(np.stack([xs, np.full_like(xs, y0 + j * dy)], axis=1))
    return np.concatenate(points)


def _smooth(nodes: np.ndarray, triangles: np.ndarray, free: np.ndarray, iterations: int = 3) -> np.ndarray:
    """Laplacian smoothing of free nodes; a sweep is kept only if it keeps areas positive and does not lower the min angle."""
    n = len(nodes)
    edges = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    adjacency = sparse.coo_matrix((np.ones(len(edges)), (edges[:, 0], edges[:, 1])), shape=(n, n)).tocsr()
    adjacency = ((adjacency + adjacency.T) > 0).astype(float)
    degree = np.asarray(adjacency.sum(axis=1)).ravel()
    best = _min_angles(nodes, triangles).min()
    for _ in range(iterations):
        trial = nodes.copy()
        trial[free] = (adjacency @ nodes)[free] / degree[free, None]
        x = trial[triangles]
        e1, e2 = x[:, 1] - x[:, 0], x[:, 2] - x[:, 0]
        if np.any(e1[:, 0] * e2[:, 1] - e2[:, 0] * e1[:, 1] <= 0.0):
            break
        angle = _min_angles(trial, triangles).min()
        if angle < best:
            break
        nodes, best = trial, angle
    return nodes


def generate_plate_mesh(spec: GeometrySpec) -> Mesh:
    """
    Meshes a square plate of side L with holes.

    Without holes a structured grid with a consistent diagonal is returned. With holes,
    points are placed on the outer edges (spacing ~h), on each hole boundary (>= 16
    segments) and on a hexagonal lattice kept clear of all boundaries, then triangulated
    with Delaunay; triangles inside holes are discarded and the free nodes smoothed.

    Raises:
        MeshGenerationFailure: if holes overlap or touch the outer boundary, or the
            triangulation does not reproduce the perforated plate area.
    """
    if not spec.holes:
        return _structured_mesh(spec)

    L, h = spec.side_length, spec.h
    loops = [hole.boundary_points(h) for hole in spec.holes]
    _check_holes(spec, loops)

    per_side = max(1, math.ceil(L / h))
    t = np.linspace(0.0, L, per_side + 1)[:-1]
    outer = np.concatenate([
        np.stack([t, np.zeros_like(t)], axis=1),
        np.stack([np.full_like(t, L), t], axis=1),
        np.stack([L - t, np.full_like(t, L)], axis=1),
        np.stack([np.zeros_like(t), L - t], axis=1),
    ])
    lattice = _hex_lattice(spec)
    keep = np.ones(len(lattice), dtype=bool)
    for hole in spec.holes:
        keep &= ~hole.contains(lattice, pad=0.6 * h)
    lattice = lattice[keep]
    fixed_count = len(outer) + sum(len(loop) for loop in loops)
    nodes = np.concatenate([outer] + loops + [lattice])

    triangles = Delaunay(nodes).simplices.astype(np.int64)
    x = nodes[triangles]
    centroids = x.mean(axis=1)
    inside = np.zeros(len(triangles), dtype=bool)
    for hole in spec.holes:
        inside |= hole.contains(centroids)
    triangles = triangles[~inside]
    x = nodes[triangles]
    e1, e2 = x[:, 1] - x[:, 0], x[:, 2] - x[:, 0]
    signed = 0.5 * (e1[:, 0] * e2[:, 1] - e2[:, 0] * e1[:, 1])
    triangles = triangles[np.abs(signed) > DEGENERATE_AREA * L * L]
    signed = signed[np.abs(signed) > DEGENERATE_AREA * L * L]
    flip = signed < 0
    triangles[flip] = triangles[flip][:, [0, 2, 1]]

    used = np.zeros(len(nodes), dtype=bool)
    used[triangles] = True
    if not used[:fixed_count].all():
        raise MeshGenerationFailure("Triangulation dropped boundary points.")
    renumber = np.cumsum(used) - 1
    nodes, triangles = nodes[used], renumber[triangles]
    free = np.arange(fixed_count, len(nodes))
    nodes = _smooth(nodes, triangles, free)

    expected = L * L - sum(abs(_polygon_area(loop)) for loop in loops)
    mesh = Mesh(nodes=nodes, triangles=triangles, boundary_sets=_outer_boundary_sets(nodes, L), mesh_id=spec.name)
    total = float(mesh.areas.sum())
    if abs(total - expected) > 1e-9 * L * L:
        raise MeshGenerationFailure(f"Meshed area {total:.12f} differs from plate area {expected:.12f}.")
    logger.debug("mesh generated name=%s nodes=%d elements=%d", spec.name, mesh.node_count, mesh.element_count)
    return mesh


def _circle(cx: float, cy: float, r: float) -> HoleSpec:
    return HoleSpec(center=(cx, cy), shape="circle", size=[r])


def _ellipse(cx: float, cy: float, a: float, b: float, angle: float = 0.0) -> HoleSpec:
    return HoleSpec(center=(cx, cy), shape="ellipse", size=[a, b], angle=angle)


def _square(cx: float, cy: float, side: float, angle: float = 0.0) -> HoleSpec:
    return HoleSpec(center=(cx, cy), shape="square", size=[side], angle=angle)


def training_geometries(h: float = 0.1) -> List[GeometrySpec]:
    """Twelve perforated plates with circular and elliptical holes."""
    layouts: List[Sequence[HoleSpec]] = [
        [_circle(0.5, 0.5, 0.2)],
        [_circle(0.5, 0.5, 0.3)],
        [_ellipse(0.5, 0.5, 0.3, 0.15)],
        [_ellipse(0.5, 0.5, 0.15, 0.3)],
        [_circle(0.3, 0.5, 0.15), _circle(0.7, 0.5, 0.15)],
        [_circle(0.5, 0.3, 0.15), _circle(0.5, 0.7, 0.15)],
        [_circle(0.3, 0.3, 0.12), _circle(0.7, 0.7, 0.12)],
        [_ellipse(0.5, 0.5, 0.25, 0.12, angle=math.pi / 4)],
        [_circle(0.3, 0.3, 0.1), _circle(0.7, 0.3, 0.1), _circle(0.5, 0.7, 0.12)],
        [_circle(0.28, 0.28, 0.1), _circle(0.72, 0.28, 0.1), _circle(0.28, 0.72, 0.1), _circle(0.72, 0.72, 0.1)],
        [_ellipse(0.3, 0.5, 0.1, 0.25), _ellipse(0.7, 0.5, 0.1, 0.25)],
        [_circle(0.5, 0.5, 0.15), _ellipse(0.2, 0.2, 0.08, 0.05), _ellipse(0.8, 0.8, 0.08, 0.05)],
    ]
    return [GeometrySpec(name=f"geometry-{k + 1:02d}", holes=list(holes), h=h) for k, holes in enumerate(layouts)]


def unseen_geometries(h: float = 0.1) -> List[GeometrySpec]:
    """Held-out plates, including square holes."""
    layouts: List[Sequence[HoleSpec]] = [
        [_square(0.5, 0.5, 0.35)],
        [_square(0.5, 0.5, 0.3, angle=math.pi / 4)],
        [_square(0.3, 0.5, 0.2), _square(0.7, 0.5, 0.2)],
        [_square(0.5, 0.3, 0.2), _circle(0.5, 0.72, 0.12)],
    ]
    return [GeometrySpec(name=f"unseen-{k + 1:02d}", holes=list(holes), h=h) for k, holes in enumerate(layouts)]
