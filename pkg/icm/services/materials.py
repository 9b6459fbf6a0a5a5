"""
Isotropic hyperelastic strain-energy families under plane strain.

Every family is evaluated as a function of the 2D invariants I = (I1, I3) of
C = F^T F. The 3D forms are closed with a unit out-of-plane stretch:
I1_3D = I1 + 1, I2_3D = I3 + I1, J = sqrt(I3). Invariant arrays have shape
(..., 2) with columns (I1, I3); deformation gradients have shape (..., 2, 2).
"""
import logging
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Callable, Dict, List, Optional, Protocol, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from icm.errors import (
    DegenerateBasis,
    DomainViolation,
    InvalidConfiguration,
    NonPositiveJacobian,
    UnknownSubsetRule,
)

logger = logging.getLogger(__name__)

REFERENCE_INVARIANTS = np.array([2.0, 1.0])

# Polynomial basis: C_ij (Ib1 - 3)^i (Ib2 - 3)^j for 1 <= i + j <= 6, plus D_m (J - 1)^(2m)
POLYNOMIAL_TERMS: List[Tuple[int, int]] = [(i, k - i) for k in range(1, 7) for i in range(k, -1, -1)]
VOLUMETRIC_ORDERS = (1, 2, 3, 4)
OGDEN_TERMS = 6


class MaterialFamily(str, Enum):
    POLYNOMIAL = "Polynomial"
    OGDEN = "Ogden"
    PUCCI_SACCOMANDI = "PucciSaccomandi"
    EXP_LN = "ExpLn"
    VAN_DER_WAALS = "VanDerWaals"


def _polynomial_names() -> List[str]:
    return [f"C{i}{j}" for i, j in POLYNOMIAL_TERMS] + [f"D{m}" for m in VOLUMETRIC_ORDERS]


PARAMETER_NAMES: Dict[MaterialFamily, List[str]] = {
    MaterialFamily.POLYNOMIAL: _polynomial_names(),
    MaterialFamily.OGDEN: [f"mu{k}" for k in range(1, OGDEN_TERMS + 1)]
    + [f"alpha{k}" for k in range(1, OGDEN_TERMS + 1)]
    + [f"D{m}" for m in VOLUMETRIC_ORDERS],
    MaterialFamily.PUCCI_SACCOMANDI: ["mu", "J_m", "C2", "D"],
    MaterialFamily.EXP_LN: ["mu", "a", "b", "D"],
    MaterialFamily.VAN_DER_WAALS: ["mu", "lambda_m", "a", "beta", "D"],
}

# Parameters carrying stress units; scaling all of them scales psi, grad psi and S.
_DIMENSIONLESS = {"J_m", "a", "b", "beta", "lambda_m"} | {f"alpha{k}" for k in range(1, OGDEN_TERMS + 1)}


# --- Domain types ---

@dataclass(frozen=True)
class StressTensor2D:
    """Second (kind "S", symmetric) or first (kind "P") Piola-Kirchhoff stress, shape (..., 2, 2)."""
    kind: str
    values: np.ndarray


class GradientProvider(Protocol):
    """Anything that supplies the invariant gradient (dpsi/dI1, dpsi/dI3) of an energy."""

    def gradient(self, inv: np.ndarray) -> np.ndarray:
        ...

    def hessian(self, inv: np.ndarray) -> np.ndarray:
        ...


class MaterialModel(BaseModel):
    """
    One strain-energy family with its coefficients. Immutable; every evaluation is a
    pure vectorized function of an invariant array.
    """
    model_config = ConfigDict(frozen=True)

    family: MaterialFamily
    params: Dict[str, float]
    normalized: bool = False

    @field_validator("params")
    @classmethod
    def _finite_params(cls, value: Dict[str, float]) -> Dict[str, float]:
        for name, number in value.items():
            if not np.isfinite(number):
                raise ValueError(f"Parameter {name} is not finite: {number}")
        return value

    @model_validator(mode="after")
    def _known_params(self) -> "MaterialModel":
        allowed = set(PARAMETER_NAMES[self.family])
        unknown = set(self.params) - allowed
        if unknown:
            raise ValueError(f"Unknown parameters for {self.family.value}: {sorted(unknown)}")
        return self

    def p(self, name: str) -> float:
        return float(self.params.get(name, 0.0))

    def evaluate(self, inv: np.ndarray, order: int = 1) -> Tuple[np.ndarray, Optional[np.ndarray], Optional[np.ndarray]]:
        """
        Returns (psi, grad, hess) at invariants `inv`; grad has shape (..., 2) and hess
        (..., 2, 2). Entries above `order` are None.
        """
        inv = np.asarray(inv, dtype=float)
        I1, I3 = inv[..., 0], inv[..., 1]
        if np.any(I3 <= 0.0):
            raise DomainViolation("I3 must be positive.")
        law = _FAMILY_LAWS[self.family]
        return law(self, I1, I3, order)

    def energy(self, inv: np.ndarray) -> np.ndarray:
        return self.evaluate(inv, order=0)[0]

    def gradient(self, inv: np.ndarray) -> np.ndarray:
        return self.evaluate(inv, order=1)[1]

    def hessian(self, inv: np.ndarray) -> np.ndarray:
        if self.family is MaterialFamily.OGDEN:
            return finite_difference_hessian(self.gradient, inv)
        return self.evaluate(inv, order=2)[2]

    def scaled(self, factor: float) -> "MaterialModel":
        """Copy with every stress-like parameter multiplied by `factor`."""
        params = {
            name: (value if name in _DIMENSIONLESS else value * factor)
            for name, value in self.params.items()
        }
        return MaterialModel(family=self.family, params=params, normalized=self.normalized)


class ScaledGradient:
    """Gradient provider returning `factor` times another provider's gradient."""

    def __init__(self, base: GradientProvider, factor: float):
        self.base = base
        self.factor = float(factor)

    def gradient(self, inv: np.ndarray) -> np.ndarray:
        return self.factor * self.base.gradient(inv)

    def hessian(self, inv: np.ndarray) -> np.ndarray:
        return self.factor * self.base.hessian(inv)


def finite_difference_hessian(gradient: Callable[[np.ndarray], np.ndarray], inv: np.ndarray, rel_step: float = 1e-6) -> np.ndarray:
    """Central differences of an invariant gradient, symmetrized. Shape (..., 2, 2)."""
    inv = np.asarray(inv, dtype=float)
    columns = []
    for m in range(2):
        step = rel_step * np.maximum(1.0, np.abs(inv[..., m]))
        offset = np.zeros(inv.shape)
        offset[..., m] = step
        columns.append((gradient(inv + offset) - gradient(inv - offset)) / (2.0 * step[..., None]))
    hess = np.stack(columns, axis=-1)
    return 0.5 * (hess + np.swapaxes(hess, -1, -2))


# --- Kinematics ---

def _det2(M: np.ndarray) -> np.ndarray:
    return M[..., 0, 0] * M[..., 1, 1] - M[..., 0, 1] * M[..., 1, 0]


def _adjugate2(M: np.ndarray) -> np.ndarray:
    adj = np.empty(M.shape)
    adj[..., 0, 0] = M[..., 1, 1]
    adj[..., 1, 1] = M[..., 0, 0]
    adj[..., 0, 1] = -M[..., 0, 1]
    adj[..., 1, 0] = -M[..., 1, 0]
    return adj


def right_cauchy_green(F: np.ndarray) -> np.ndarray:
    return np.einsum("...ki,...kj->...ij", F, F)


def invariants_from_F(F: np.ndarray) -> np.ndarray:
    """
    Invariants (I1, I3) = (tr C, det C) of C = F^T F.

    Raises:
        NonPositiveJacobian: if any det F <= 0.
    """
    F = np.asarray(F, dtype=float)
    if np.any(_det2(F) <= 0.0):
        raise NonPositiveJacobian("Deformation gradient with det F <= 0.")
    C = right_cauchy_green(F)
    return np.stack([C[..., 0, 0] + C[..., 1, 1], _det2(C)], axis=-1)


def stress_from_gradient(F: np.ndarray, grad: np.ndarray, kind: str = "S") -> StressTensor2D:
    """
    S = 2 (dpsi/dI1 * Id + dpsi/dI3 * I3 C^-1) and P = F S, for any gradient provider's
    output. I3 C^-1 is the adjugate of C, so no inversion is needed.
    """
    F = np.asarray(F, dtype=float)
    C = right_cauchy_green(F)
    grad = np.asarray(grad, dtype=float)
    g1 = grad[..., 0][..., None, None]
    g3 = grad[..., 1][..., None, None]
    S = 2.0 * (g1 * np.eye(2) + g3 * _adjugate2(C))
    if kind == "S":
        return StressTensor2D(kind="S", values=S)
    if kind == "P":
        return StressTensor2D(kind="P", values=np.einsum("...ij,...jk->...ik", F, S))
    raise ValueError(f"Unknown stress kind: {kind}")


def energy(m: MaterialModel, inv: np.ndarray) -> np.ndarray:
    return m.energy(inv)


def grad_energy(m: MaterialModel, inv: np.ndarray) -> np.ndarray:
    return m.gradient(inv)


def second_pk_stress(m: MaterialModel, F: np.ndarray) -> StressTensor2D:
    return stress_from_gradient(F, m.gradient(invariants_from_F(F)), kind="S")


def first_pk_stress(m: MaterialModel, F: np.ndarray) -> StressTensor2D:
    return stress_from_gradient(F, m.gradient(invariants_from_F(F)), kind="P")


# --- Energy families ---

def _isochoric_map(I1: np.ndarray, I3: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    q = (Ib1, Ib2, J) with its first (3, 2, ...) and second (3, 2, 2, ...) derivatives
    with respect to (I1, I3).
    """
    r13 = I3 ** (-1.0 / 3.0)
    r23 = r13 * r13
    Ib1 = r13 * (I1 + 1.0)
    Ib2 = r23 * (I3 + I1)
    J = np.sqrt(I3)
    zero = np.zeros_like(I1)

    dq = np.empty((3, 2) + I1.shape)
    dq[0, 0] = r13
    dq[0, 1] = -(1.0 / 3.0) * Ib1 / I3
    dq[1, 0] = r23
    dq[1, 1] = (1.0 / 3.0) * r23 - (2.0 / 3.0) * I1 * r23 / I3
    dq[2, 0] = zero
    dq[2, 1] = 0.5 / J

    d2q = np.zeros((3, 2, 2) + I1.shape)
    d2q[0, 0, 1] = d2q[0, 1, 0] = -(1.0 / 3.0) * r13 / I3
    d2q[0, 1, 1] = (4.0 / 9.0) * Ib1 / (I3 * I3)
    d2q[1, 0, 1] = d2q[1, 1, 0] = -(2.0 / 3.0) * r23 / I3
    d2q[1, 1, 1] = -(2.0 / 9.0) * r23 / I3 + (10.0 / 9.0) * I1 * r23 / (I3 * I3)
    d2q[2, 1, 1] = -0.25 / (J * I3)
    return np.stack([Ib1, Ib2, J]), dq, d2q


def _chain_to_invariants(psi, dpsi, d2psi, dq, d2q, order):
    grad = np.moveaxis(np.einsum("k...,km...->m...", dpsi, dq), 0, -1) if order >= 1 else None
    hess = None
    if order >= 2:
        hess = np.einsum("kl...,km...,ln...->mn...", d2psi, dq, dq) + np.einsum("k...,kmn...->mn...", dpsi, d2q)
        hess = np.moveaxis(hess, (0, 1), (-2, -1))
    return psi, grad, hess


def _log_volumetric(D: float, J: np.ndarray):
    """D ((J^2 - 1)/2 - ln J) with its first and second J-derivatives."""
    return D * (0.5 * (J * J - 1.0) - np.log(J)), D * (J - 1.0 / J), D * (1.0 + 1.0 / (J * J))


def _polynomial_volumetric(m: MaterialModel, J: np.ndarray):
    v = J - 1.0
    value, first, second = np.zeros_like(J), np.zeros_like(J), np.zeros_like(J)
    for order in VOLUMETRIC_ORDERS:
        coef = m.p(f"D{order}")
        if coef == 0.0:
            continue
        n = 2 * order
        value += coef * v ** n
        first += coef * n * v ** (n - 1)
        second += coef * n * (n - 1) * v ** (n - 2)
    return value, first, second


def _polynomial(m: MaterialModel, I1, I3, order):
    q, dq, d2q = _isochoric_map(I1, I3)
    x, y = q[0] - 3.0, q[1] - 3.0
    psi = np.zeros_like(I1)
    dpsi = np.zeros((3,) + I1.shape)
    d2psi = np.zeros((3, 3) + I1.shape)
    for i, j in POLYNOMIAL_TERMS:
        coef = m.p(f"C{i}{j}")
        if coef == 0.0:
            continue
        psi += coef * x ** i * y ** j
        if i >= 1:
            dpsi[0] += coef * i * x ** (i - 1) * y ** j
        if j >= 1:
            dpsi[1] += coef * j * x ** i * y ** (j - 1)
        if i >= 2:
            d2psi[0, 0] += coef * i * (i - 1) * x ** (i - 2) * y ** j
        if i >= 1 and j >= 1:
            d2psi[0, 1] += coef * i * j * x ** (i - 1) * y ** (j - 1)
        if j >= 2:
            d2psi[1, 1] += coef * j * (j - 1) * x ** i * y ** (j - 2)
    d2psi[1, 0] = d2psi[0, 1]
    vol, dvol, d2vol = _polynomial_volumetric(m, q[2])
    psi = psi + vol
    dpsi[2] = dvol
    d2psi[2, 2] = d2vol
    return _chain_to_invariants(psi, dpsi, d2psi, dq, d2q, order)


def _pucci_saccomandi(m: MaterialModel, I1, I3, order):
    q, dq, d2q = _isochoric_map(I1, I3)
    mu, Jm, C2 = m.p("mu"), m.p("J_m"), m.p("C2")
    if Jm <= 0.0:
        raise DomainViolation("Pucci-Saccomandi requires J_m > 0.")
    arg = 1.0 - (q[0] - 3.0) / Jm
    if np.any(arg <= 0.0):
        raise DomainViolation("Pucci-Saccomandi log argument 1 - (Ib1 - 3)/J_m is not positive.")
    vol, dvol, d2vol = _log_volumetric(m.p("D"), q[2])
    psi = -0.5 * mu * Jm * np.log(arg) + C2 * np.log(q[1] / 3.0) + vol
    dpsi = np.stack([0.5 * mu / arg, C2 / q[1], dvol])
    d2psi = np.zeros((3, 3) + I1.shape)
    d2psi[0, 0] = 0.5 * mu / (Jm * arg * arg)
    d2psi[1, 1] = -C2 / (q[1] * q[1])
    d2psi[2, 2] = d2vol
    return _chain_to_invariants(psi, dpsi, d2psi, dq, d2q, order)


def _exp_ln(m: MaterialModel, I1, I3, order):
    q, dq, d2q = _isochoric_map(I1, I3)
    mu, a, b = m.p("mu"), m.p("a"), m.p("b")
    if a <= 0.0:
        raise DomainViolation("Exp-ln requires a > 0.")
    c = 1.0 / a + b
    y = q[0] - 2.0
    if np.any(y <= 0.0):
        raise DomainViolation("Exp-ln requires Ib1 > 2.")
    e = np.exp(a * (q[0] - 3.0))
    log_y = np.log(y)
    vol, dvol, d2vol = _log_volumetric(m.p("D"), q[2])
    psi = 0.5 * mu * (e / a + b * y * (1.0 - log_y) - c) + vol
    dpsi = np.stack([0.5 * mu * (e - b * log_y), np.zeros_like(I1), dvol])
    d2psi = np.zeros((3, 3) + I1.shape)
    d2psi[0, 0] = 0.5 * mu * (a * e - b / y)
    d2psi[2, 2] = d2vol
    return _chain_to_invariants(psi, dpsi, d2psi, dq, d2q, order)


# Floor on (I~ - 3) in the van der Waals curvature, which is unbounded at the reference state
_VDW_CURVATURE_FLOOR = 1e-12


def _van_der_waals(m: MaterialModel, I1, I3, order):
    q, dq, d2q = _isochoric_map(I1, I3)
    mu, lam, a, beta = m.p("mu"), m.p("lambda_m"), m.p("a"), m.p("beta")
    M = lam * lam - 3.0
    if M <= 0.0:
        raise DomainViolation("van der Waals requires lambda_m^2 > 3.")
    z = np.maximum((1.0 - beta) * q[0] + beta * q[1] - 3.0, 0.0)
    eta = np.sqrt(z / M)
    if np.any(eta >= 1.0):
        raise DomainViolation("van der Waals locking: eta >= 1.")
    vol, dvol, d2vol = _log_volumetric(m.p("D"), q[2])
    half = np.sqrt(0.5 * z)
    psi = mu * (-M * (np.log1p(-eta) + eta) - (2.0 * a / 3.0) * half ** 3) + vol
    df = 0.5 / (1.0 - eta) - 0.5 * a * half
    weights = np.array([1.0 - beta, beta])
    dpsi = np.stack([mu * df * weights[0], mu * df * weights[1], dvol])
    d2psi = np.zeros((3, 3) + I1.shape)
    if order >= 2:
        zf = np.maximum(z, _VDW_CURVATURE_FLOOR)
        ef = np.sqrt(zf / M)
        d2f = 1.0 / (4.0 * M * ef * (1.0 - ef) ** 2) - (a / 8.0) / np.sqrt(0.5 * zf)
        for k in range(2):
            for l in range(2):
                d2psi[k, l] = mu * d2f * weights[k] * weights[l]
        d2psi[2, 2] = d2vol
    return _chain_to_invariants(psi, dpsi, d2psi, dq, d2q, order)


_DEGENERATE_STRETCH = 1e-8


def _principal_stretches(I1: np.ndarray, I3: np.ndarray):
    """Principal stretches a >= b of the in-plane block, plus s - t = a^2 - b^2."""
    gap = np.sqrt(np.maximum(I1 * I1 - 4.0 * I3, 0.0))
    s = 0.5 * (I1 + gap)
    t = I3 / s
    return np.sqrt(s), np.sqrt(t), gap


def _divided_power(a: np.ndarray, b: np.ndarray, gap: np.ndarray, k: float) -> np.ndarray:
    """(a^k - b^k) / (a^2 - b^2), replaced by its limit (k/2) a^(k-2) when a ~ b."""
    diff = gap / (a + b)
    degenerate = diff < _DEGENERATE_STRETCH
    safe_gap = np.where(degenerate, 1.0, gap)
    ratio = np.expm1(k * np.log1p(diff / b)) * b ** k / safe_gap
    return np.where(degenerate, 0.5 * k * a ** (k - 2.0), ratio)


def _ogden(m: MaterialModel, I1, I3, order):
    a, b, gap = _principal_stretches(I1, I3)
    J = np.sqrt(I3)
    psi = np.zeros_like(I1)
    grad = np.zeros(I1.shape + (2,))
    for k in range(1, OGDEN_TERMS + 1):
        mu = m.p(f"mu{k}")
        if mu == 0.0:
            continue
        alpha = m.p(f"alpha{k}")
        if alpha == 0.0:
            raise DomainViolation(f"Ogden term {k} has mu != 0 and alpha = 0.")
        pref = 2.0 * mu / (alpha * alpha)
        iso = I3 ** (-alpha / 6.0)
        total = a ** alpha + b ** alpha + 1.0
        psi += pref * (iso * total - 3.0)
        grad[..., 0] += pref * iso * 0.5 * alpha * _divided_power(a, b, gap, alpha)
        grad[..., 1] += pref * (
            -(alpha / 6.0) * iso / I3 * total - iso * 0.5 * alpha * _divided_power(a, b, gap, alpha - 2.0)
        )
    vol, dvol, _ = _polynomial_volumetric(m, J)
    psi = psi + vol
    grad[..., 1] += dvol * 0.5 / J
    return psi, (grad if order >= 1 else None), None


_FAMILY_LAWS = {
    MaterialFamily.POLYNOMIAL: _polynomial,
    MaterialFamily.OGDEN: _ogden,
    MaterialFamily.PUCCI_SACCOMANDI: _pucci_saccomandi,
    MaterialFamily.EXP_LN: _exp_ln,
    MaterialFamily.VAN_DER_WAALS: _van_der_waals,
}


# --- Sampling ---

def material_rng(seed: int, index: int = 0) -> np.random.Generator:
    """Counter-based stream for one (dataset seed, material index) pair."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(index)])))


_SUBSET_RULES = {
    MaterialFamily.POLYNOMIAL: ("A", "B", "C"),
    MaterialFamily.OGDEN: ("A", "B"),
    MaterialFamily.PUCCI_SACCOMANDI: ("default",),
    MaterialFamily.EXP_LN: ("default",),
    MaterialFamily.VAN_DER_WAALS: ("default",),
}


def _sample_volumetric(rng: np.random.Generator, params: Dict[str, float], chosen: Optional[int]) -> None:
    orders = list(VOLUMETRIC_ORDERS)
    picked = orders if chosen is None else list(rng.choice(orders, size=chosen, replace=False))
    for order in orders:
        params[f"D{order}"] = float(rng.uniform(0.0, 100.0)) if order in picked else 0.0


def _sample_polynomial(rng: np.random.Generator, rule: str) -> Dict[str, float]:
    names = [f"C{i}{j}" for i, j in POLYNOMIAL_TERMS]
    params = {name: 0.0 for name in names}
    if rule == "A":
        low_order = [f"C{i}{j}" for i, j in POLYNOMIAL_TERMS if i + j <= 3]
        picked = list(rng.choice(low_order, size=2, replace=False))
    elif rule == "B":
        picked = list(rng.choice(names, size=4, replace=False))
    else:
        picked = names
    for name in names:
        if name in picked:
            params[name] = float(rng.uniform(0.0, 100.0))
    _sample_volumetric(rng, params, chosen=None if rule == "C" else 2)
    params["C10"] += 1.0
    params["D1"] += 1.0
    return params


def _sample_ogden(rng: np.random.Generator, rule: str) -> Dict[str, float]:
    active = 2 if rule == "A" else OGDEN_TERMS
    spread = 2.0 if rule == "A" else 10.0
    params: Dict[str, float] = {}
    for k in range(1, OGDEN_TERMS + 1):
        mu = float(rng.uniform(1.0, 101.0))
        alpha = float(np.clip(spread * abs(rng.standard_normal()) + 1.0, 1.2, 20.0))
        params[f"mu{k}"] = mu if k <= active else 0.0
        params[f"alpha{k}"] = alpha
    _sample_volumetric(rng, params, chosen=None)
    params["D1"] += 1.0
    return params


def sample_material(
    family: Union[MaterialFamily, str],
    rng_seed: int,
    subset_rule: Optional[str] = None,
    index: int = 0,
) -> MaterialModel:
    """
    Draws one material of `family` from the dataset distributions.

    Args:
        family: Strain-energy family.
        rng_seed: Dataset seed.
        subset_rule: "A"/"B"/"C" for Polynomial, "A"/"B" for Ogden, "default" otherwise.
            None selects the first rule of the family.
        index: Material index; together with the seed it selects the random stream.

    Raises:
        UnknownSubsetRule: if the rule does not exist for the family.
    """
    family = MaterialFamily(family)
    rules = _SUBSET_RULES[family]
    rule = subset_rule or rules[0]
    if rule not in rules:
        raise UnknownSubsetRule(f"Subset rule '{rule}' is not defined for {family.value}; expected one of {rules}.")
    rng = material_rng(rng_seed, index)

    if family is MaterialFamily.POLYNOMIAL:
        params = _sample_polynomial(rng, rule)
    elif family is MaterialFamily.OGDEN:
        params = _sample_ogden(rng, rule)
    elif family is MaterialFamily.PUCCI_SACCOMANDI:
        params = {
            "mu": float(rng.uniform(1.0, 101.0)),
            "J_m": float(rng.uniform(4.0, 6.0)) ** 2,
            "C2": float(rng.uniform(0.0, 100.0)),
            "D": float(rng.uniform(1.0, 501.0)),
        }
    elif family is MaterialFamily.EXP_LN:
        params = {
            "mu": float(rng.uniform(1.0, 101.0)),
            "a": float(rng.uniform(0.1, 3.1)),
            "b": float(rng.uniform(0.0, 1.0)),
            "D": float(rng.uniform(1.0, 501.0)),
        }
    else:
        params = {
            "mu": float(rng.uniform(1.0, 101.0)),
            "lambda_m": float(rng.uniform(4.0, 6.0)),
            "a": float(rng.uniform(0.0, 0.5)),
            "beta": float(rng.uniform(0.0, 1.0)),
            "D": float(rng.uniform(1.0, 501.0)),
        }
    return MaterialModel(family=family, params=params)


# --- Polynomial coefficient normalization ---

NORMALIZATION_SAMPLES = 1000
_NORMALIZATION_STREAM = 0x4E4F524D


def random_deformation_gradients(seed: int, count: int = NORMALIZATION_SAMPLES) -> np.ndarray:
    """Identity plus U(-0.5, 0.5) entries, resampled until det F > 0.2."""
    rng = material_rng(seed, _NORMALIZATION_STREAM)
    accepted: List[np.ndarray] = []
    total = 0
    while total < count:
        F = np.eye(2) + rng.uniform(-0.5, 0.5, size=(count, 2, 2))
        F = F[_det2(F) > 0.2]
        accepted.append(F)
        total += len(F)
    return np.concatenate(accepted)[:count]


@lru_cache(maxsize=8)
def basis_stress_deviations(seed: int, count: int = NORMALIZATION_SAMPLES) -> Tuple[Tuple[str, float], ...]:
    """Standard deviation of each polynomial basis function's first PK stress components."""
    F = random_deformation_gradients(seed, count)
    deviations = []
    for name in PARAMETER_NAMES[MaterialFamily.POLYNOMIAL]:
        unit = MaterialModel(family=MaterialFamily.POLYNOMIAL, params={name: 1.0})
        deviations.append((name, float(np.std(first_pk_stress(unit, F).values))))
    return tuple(deviations)


def tangent_stiffness(m: MaterialModel) -> float:
    """dP11/dF11 estimated from F11 = 0.9 and F11 = 1.1 with F22 = 1."""
    F = np.array([np.diag([1.1, 1.0]), np.diag([0.9, 1.0])])
    P = first_pk_stress(m, F).values
    return float((P[0, 0, 0] - P[1, 0, 0]) / 0.2)


def normalize_polynomial_coefficients(m: MaterialModel, rng_seed: int, count: int = NORMALIZATION_SAMPLES) -> MaterialModel:
    """
    Two-step normalization: divide each coefficient by its basis stress deviation,
    then divide all coefficients by the resulting tangent stiffness. Already
    normalized models are returned unchanged.

    Raises:
        InvalidConfiguration: if `m` is not a polynomial model.
        DegenerateBasis: if the tangent stiffness after step one vanishes.
    """
    if m.family is not MaterialFamily.POLYNOMIAL:
        raise InvalidConfiguration(f"Coefficient normalization applies to Polynomial models, got {m.family.value}.")
    if m.normalized:
        return m

    params: Dict[str, float] = {}
    for name, sigma in basis_stress_deviations(rng_seed, count):
        value = m.p(name)
        if sigma < 1e-12:
            if value != 0.0:
                logger.warning("degenerate basis name=%s sigma=%.3e coefficient zeroed", name, sigma)
            params[name] = 0.0
        else:
            params[name] = value / sigma
    step_one = MaterialModel(family=m.family, params=params)

    k = tangent_stiffness(step_one)
    if not abs(k) > 1e-300:
        raise DegenerateBasis("Tangent stiffness of the basis-normalized model vanishes.")
    return MaterialModel(
        family=m.family,
        params={name: value / k for name, value in params.items()},
        normalized=True,
    )
