import numpy as np
import pytest

from icm.services.discretization import GeometrySpec, generate_plate_mesh, training_geometries
from icm.services.materials import MaterialFamily, normalize_polynomial_coefficients, sample_material
from icm.services.solver import LoadMode, LoadProgram, run_load_program


@pytest.fixture(scope="session")
def plate_mesh():
    """Structured unit plate, 5 x 5 nodes."""
    return generate_plate_mesh(GeometrySpec(name="plate", h=0.25))


@pytest.fixture(scope="session")
def hole_mesh():
    return generate_plate_mesh(training_geometries(0.2)[0])


@pytest.fixture(scope="session")
def polynomial_material():
    return normalize_polynomial_coefficients(sample_material(MaterialFamily.POLYNOMIAL, 7, "A"), 7)


@pytest.fixture(scope="session")
def family_materials(polynomial_material):
    """One sampled material per family."""
    materials = {MaterialFamily.POLYNOMIAL: polynomial_material}
    for family in MaterialFamily:
        if family is not MaterialFamily.POLYNOMIAL:
            materials[family] = sample_material(family, 11, index=3)
    return materials


@pytest.fixture(scope="session")
def solved_fields(hole_mesh, polynomial_material):
    """Two biaxial steps on the perforated plate, as (mesh, field) pairs."""
    program = LoadProgram(mode=LoadMode.BIAXIAL, u1_ratio=0.06, u2_ratio=0.03, steps=2)
    return [(hole_mesh, field) for field in run_load_program(hole_mesh, polynomial_material, program)]


def random_gradients(seed: int, count: int, spread: float = 0.2) -> np.ndarray:
    rng = np.random.default_rng(seed)
    F = np.eye(2) + rng.uniform(-spread, spread, size=(count, 2, 2))
    return F[np.linalg.det(F) > 0.5]


def random_displacements(mesh, seed: int, amplitude: float = 0.02) -> np.ndarray:
    rng = np.random.default_rng(seed)
    X = mesh.nodes
    affine = X @ rng.uniform(-0.1, 0.1, size=(2, 2)).T
    return affine + amplitude * mesh.length_scale * 0.1 * rng.standard_normal(X.shape)
