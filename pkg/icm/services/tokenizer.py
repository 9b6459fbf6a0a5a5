"""
Deformation tokens: one token per interior node, one subtoken (A^{n,e}, I^e) per
adjacent element. Tokens are stored flat (CSR-style offsets) so contexts of
thousands of tokens stay cheap to slice, concatenate and feed to the network.
"""
import logging
import warnings
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, field_validator

from icm.errors import InsufficientTokensWarning, ZeroRowNorm
from icm.services.discretization import Mesh, StrainField, coefficient_matrices, element_invariants

logger = logging.getLogger(__name__)

INVARIANT_CENTER = np.array([2.0, 1.0])
ZERO_ROW_NORM = 1e-300
DEGENERATE_SCALE = 1e-12


@dataclass(frozen=True)
class DeformationSubtoken:
    A_bar: np.ndarray
    I_hat: Optional[np.ndarray]
    raw_I: np.ndarray
    A: np.ndarray


@dataclass(frozen=True)
class DeformationToken:
    node_id: int
    subtokens: List[DeformationSubtoken]


@dataclass(frozen=True, eq=False)
class TokenSet:
    """
    Tokens of one or more fields. Token t owns subtokens offsets[t]:offsets[t + 1].
    Raw coefficient matrices A and invariants are kept next to the normalized A_bar.
    """
    node_ids: np.ndarray
    offsets: np.ndarray
    A: np.ndarray
    A_bar: np.ndarray
    invariants: np.ndarray
    element_ids: np.ndarray
    field_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.node_ids)

    @property
    def subtoken_count(self) -> int:
        return int(self.offsets[-1])

    @property
    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    @property
    def owners(self) -> np.ndarray:
        """Token index of every subtoken."""
        return np.repeat(np.arange(len(self)), self.counts)

    def __getitem__(self, t: int) -> DeformationToken:
        lo, hi = int(self.offsets[t]), int(self.offsets[t + 1])
        subtokens = [
            DeformationSubtoken(A_bar=self.A_bar[s], I_hat=None, raw_I=self.invariants[s], A=self.A[s])
            for s in range(lo, hi)
        ]
        return DeformationToken(node_id=int(self.node_ids[t]), subtokens=subtokens)

    def select(self, tokens: np.ndarray) -> "TokenSet":
        tokens = np.asarray(tokens, dtype=np.int64)
        counts = self.counts[tokens]
        offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        if len(tokens):
            index = np.concatenate([np.arange(self.offsets[t], self.offsets[t + 1]) for t in tokens])
        else:
            index = np.zeros(0, dtype=np.int64)
        return TokenSet(
            node_ids=self.node_ids[tokens],
            offsets=offsets,
            A=self.A[index],
            A_bar=self.A_bar[index],
            invariants=self.invariants[index],
            element_ids=self.element_ids[index],
            field_ids=self.field_ids[tokens],
        )

    def with_field_id(self, field_id: int) -> "TokenSet":
        return TokenSet(
            node_ids=self.node_ids,
            offsets=self.offsets,
            A=self.A,
            A_bar=self.A_bar,
            invariants=self.invariants,
            element_ids=self.element_ids,
            field_ids=np.full(len(self), field_id, dtype=np.int64),
        )

    @staticmethod
    def concatenate(sets: Sequence["TokenSet"]) -> "TokenSet":
        if not sets:
            raise ValueError("Cannot concatenate an empty list of token sets.")
        shifts = np.cumsum([0] + [s.subtoken_count for s in sets[:-1]])
        offsets = np.concatenate([[0]] + [s.offsets[1:] + shift for s, shift in zip(sets, shifts)])
        return TokenSet(
            node_ids=np.concatenate([s.node_ids for s in sets]),
            offsets=offsets.astype(np.int64),
            A=np.concatenate([s.A for s in sets]),
            A_bar=np.concatenate([s.A_bar for s in sets]),
            invariants=np.concatenate([s.invariants for s in sets]),
            element_ids=np.concatenate([s.element_ids for s in sets]),
            field_ids=np.concatenate([s.field_ids for s in sets]),
        )


@dataclass(frozen=True, eq=False)
class Context:
    """Tokens plus the shared invariant normalization (I - I0) / scale."""
    tokens: TokenSet
    invariant_scale: float
    invariant_center: np.ndarray = field(default_factory=lambda: INVARIANT_CENTER.copy())
    provenance: Dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def I_hat(self) -> np.ndarray:
        return self.normalize_queries(self.tokens.invariants)

    def normalize_queries(self, inv: np.ndarray) -> np.ndarray:
        return (np.asarray(inv, dtype=float) - self.invariant_center) / self.invariant_scale

    def __getitem__(self, t: int) -> DeformationToken:
        token = self.tokens[t]
        subtokens = [
            DeformationSubtoken(A_bar=s.A_bar, I_hat=self.normalize_queries(s.raw_I), raw_I=s.raw_I, A=s.A)
            for s in token.subtokens
        ]
        return DeformationToken(node_id=token.node_id, subtokens=subtokens)

    def invariant_range(self) -> Tuple[np.ndarray, np.ndarray]:
        inv = self.tokens.invariants
        return inv.min(axis=0), inv.max(axis=0)


# --- Tokenization and normalization ---

def normalize_A(A: np.ndarray) -> np.ndarray:
    """
    Row-wise root-sum-square normalization of one token's subtoken matrices, shape
    (k, 2, 2): A_bar_im = A_im / eta_i with eta_i over all subtokens and columns.

    Raises:
        ZeroRowNorm: if a row norm is <= 1e-300.
    """
    A = np.asarray(A, dtype=float)
    eta = np.sqrt(np.sum(A ** 2, axis=(0, 2)))
    if np.any(eta <= ZERO_ROW_NORM):
        raise ZeroRowNorm(f"Token row norms {eta} vanish.")
    return A / eta[None, :, None]


def tokenize_field(mesh: Mesh, field: StrainField, field_id: int = 0) -> TokenSet:
    """One token per interior node; tokens whose A rows vanish are dropped with a warning."""
    field.check_against(mesh)
    u = field.displacements
    A_all = coefficient_matrices(mesh, u)
    inv_all = element_invariants(mesh, u)

    adjacency = mesh.node_elements[mesh.interior_nodes]
    adjacency.sort_indices()
    node_ids = mesh.interior_nodes
    offsets = adjacency.indptr.astype(np.int64)
    elements = adjacency.indices.astype(np.int64)
    local = adjacency.data.astype(np.int64) - 1
    counts = np.diff(offsets)

    A = A_all[elements, local]
    eta = np.zeros((len(node_ids), 2))
    occupied = counts > 0
    if np.any(occupied):
        eta[occupied] = np.sqrt(np.add.reduceat(np.sum(A ** 2, axis=2), offsets[:-1][occupied], axis=0))
    valid = occupied & np.all(eta > ZERO_ROW_NORM, axis=1)
    if not np.all(valid):
        dropped = int(np.sum(~valid))
        logger.warning("zero row norm tokens dropped count=%d field=%d", dropped, field_id)

    A_bar = A / np.repeat(np.where(eta > 0, eta, 1.0), counts, axis=0)[:, :, None]
    tokens = TokenSet(
        node_ids=node_ids.astype(np.int64),
        offsets=offsets,
        A=A,
        A_bar=A_bar,
        invariants=inv_all[elements],
        element_ids=elements,
        field_ids=np.full(len(node_ids), field_id, dtype=np.int64),
    )
    return tokens if np.all(valid) else tokens.select(np.flatnonzero(valid))


def invariant_scale(invariants: np.ndarray, center: np.ndarray = INVARIANT_CENTER) -> float:
    """RMS deviation from the undeformed invariants; 1 when the cloud is degenerate."""
    if len(invariants) == 0:
        raise ValueError("Invariant scale of an empty collection.")
    scale = float(np.sqrt(np.mean(np.sum((invariants - center) ** 2, axis=1))))
    return scale if scale >= DEGENERATE_SCALE else 1.0


def normalize_invariants(tokens: TokenSet, provenance: Optional[Dict[str, Any]] = None) -> Context:
    return Context(tokens=tokens, invariant_scale=invariant_scale(tokens.invariants), provenance=dict(provenance or {}))


def full_context(fields: Sequence[TokenSet], provenance: Optional[Dict[str, Any]] = None) -> Context:
    """Every token of every field, in field order."""
    if not fields:
        raise ValueError("full_context needs at least one field.")
    return normalize_invariants(TokenSet.concatenate(list(fields)), provenance)


# --- Hierarchical context sampling ---

class SamplingBounds(BaseModel):
    geometries: Tuple[int, int] = (1, 7)
    modes: Tuple[int, int] = (1, 3)
    steps: Tuple[int, int] = (1, 10)
    fields: Tuple[int, int] = (1, 5)
    tokens: Tuple[int, int] = (100, 400)

    @field_validator("geometries", "modes", "steps", "fields", "tokens")
    @classmethod
    def _ordered(cls, value: Tuple[int, int]) -> Tuple[int, int]:
        lo, hi = value
        if lo < 1 or hi < lo:
            raise ValueError(f"Bounds must satisfy 1 <= lo <= hi, got {value}.")
        return value


@dataclass(frozen=True)
class FieldRecord:
    geometry: str
    mode: str
    step: int
    tokens: TokenSet
    field_id: int = 0


@dataclass
class MaterialRecord:
    material_id: str
    fields: List[FieldRecord]
    extra: Dict[str, Any] = field(default_factory=dict)


@dataclass
class TokenDataset:
    materials: List[MaterialRecord]

    def __len__(self) -> int:
        return len(self.materials)


def _uniform(rng: np.random.Generator, bounds: Tuple[int, int]) -> int:
    return int(rng.integers(bounds[0], bounds[1] + 1))


def draw_field_count(rng: np.random.Generator, bounds: SamplingBounds) -> int:
    return _uniform(rng, bounds.fields)


def sample_field_selection(
    catalog: Sequence[Tuple[str, str, int]],
    bounds: SamplingBounds,
    rng: np.random.Generator,
) -> Tuple[List[int], int]:
    """
    Hierarchical draw over (geometry, mode, step) keys: geometries, then modes per
    geometry, then the loading magnitude (steps 1..k), then the fields themselves.
    Returns the selected catalog indices and the drawn field count before capping.
    """
    geometries = sorted({key[0] for key in catalog})
    chosen_geo = rng.choice(len(geometries), size=min(_uniform(rng, bounds.geometries), len(geometries)), replace=False)
    magnitude = _uniform(rng, bounds.steps)
    pool: List[int] = []
    for g in sorted(chosen_geo):
        geometry = geometries[g]
        modes = sorted({key[1] for key in catalog if key[0] == geometry})
        chosen_modes = rng.choice(len(modes), size=min(_uniform(rng, bounds.modes), len(modes)), replace=False)
        picked_modes = {modes[m] for m in chosen_modes}
        pool.extend(
            i for i, key in enumerate(catalog)
            if key[0] == geometry and key[1] in picked_modes and key[2] <= magnitude
        )
    drawn = draw_field_count(rng, bounds)
    if not pool:
        return [], drawn
    picked = rng.choice(len(pool), size=min(drawn, len(pool)), replace=False)
    return sorted(pool[p] for p in picked), drawn


def sample_training_context(
    dataset: TokenDataset,
    material_id: int,
    rng: np.random.Generator,
    bounds: Optional[SamplingBounds] = None,
) -> Tuple[Context, np.ndarray]:
    """
    Samples a training context for one material. Queries are the normalized invariants of
    the context's own subtokens.
    """
    bounds = bounds or SamplingBounds()
    material = dataset.materials[material_id]
    catalog = [(f.geometry, f.mode, f.step) for f in material.fields]
    selection, _ = sample_field_selection(catalog, bounds, rng)
    if not selection:
        selection = [int(rng.integers(len(catalog)))]
    tokens = TokenSet.concatenate([material.fields[i].tokens.with_field_id(material.fields[i].field_id) for i in selection])

    available = len(tokens)
    target = _uniform(rng, bounds.tokens)
    if available < bounds.tokens[0]:
        warnings.warn(
            f"Selected fields hold {available} tokens, fewer than the lower bound {bounds.tokens[0]}.",
            InsufficientTokensWarning,
            stacklevel=2,
        )
        logger.warning("insufficient tokens available=%d lower_bound=%d", available, bounds.tokens[0])
    if target < available:
        tokens = tokens.select(np.sort(rng.choice(available, size=target, replace=False)))

    context = normalize_invariants(
        tokens,
        provenance={"material": material.material_id, "fields": [material.fields[i].field_id for i in selection]},
    )
    return context, context.I_hat
