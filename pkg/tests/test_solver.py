import warnings

import numpy as np
import pytest

from conftest import random_displacements
from icm.errors import ExtrapolationWarning, NonConvergence
from icm.services.discretization import nodal_forces
from icm.services.inference import OraclePredictor
from icm.services.materials import MaterialFamily
from icm.services.solver import (
    LoadMode,
    LoadProgram,
    assemble_tangent,
    dirichlet_conditions,
    displacement_error,
    equilibrium_ratio,
    finite_difference_tangent,
    icm_driven_fem,
    recorded_conditions,
    run_load_program,
    solve_load_program,
    solve_step,
)


def test_load_program_ratios():
    assert LoadProgram(mode=LoadMode.EQUAL_BIAXIAL, u1_ratio=0.14).final_ratios() == (0.14, 0.14)
    assert LoadProgram(mode=LoadMode.UNIAXIAL, u1_ratio=0.3, u2_ratio=0.1).final_ratios() == (0.3, 0.0)
    assert LoadProgram(mode=LoadMode.SHEAR, u1_ratio=0.3, u2_ratio=0.1).final_ratios() == (0.0, 0.1)
    np.testing.assert_allclose(LoadProgram(mode=LoadMode.UNIAXIAL, steps=4).magnitudes(), [0.25, 0.5, 0.75, 1.0])
    scaled = LoadProgram(mode=LoadMode.BIAXIAL, u1_ratio=0.3, u2_ratio=0.15).scaled(1.1)
    assert scaled.final_ratios() == pytest.approx((0.33, 0.165))


def test_uniaxial_dirichlet_data(plate_mesh):
    prescribed = dirichlet_conditions(plate_mesh, LoadMode.UNIAXIAL, 0.2, 0.0)
    for n in plate_mesh.boundary_set("right"):
        assert prescribed[2 * int(n)] == pytest.approx(0.2)
    for n in plate_mesh.boundary_set("left"):
        assert prescribed[2 * int(n)] == 0.0
    vertical = [dof for dof in prescribed if dof % 2 == 1]
    assert len(vertical) == 1


def test_recorded_conditions():
    assert [name for name, _ in recorded_conditions(LoadMode.UNIAXIAL)] == ["right"]
    assert [name for name, _ in recorded_conditions(LoadMode.PROPORTIONAL_BIAXIAL)] == ["right", "top"]
    assert recorded_conditions(LoadMode.SHEAR) == [("top", (1.0, 0.0))]


@pytest.mark.parametrize("family", [MaterialFamily.POLYNOMIAL, MaterialFamily.EXP_LN, MaterialFamily.VAN_DER_WAALS])
def test_analytic_tangent_matches_finite_differences(hole_mesh, family_materials, family):
    material = family_materials[family]
    u = random_displacements(hole_mesh, 12)
    free = np.arange(0, 2 * hole_mesh.node_count, 7)
    K = assemble_tangent(hole_mesh, material, u).toarray()[:, free]
    K_fd = finite_difference_tangent(hole_mesh, material, u, free, step=1e-6).toarray()[:, free]
    assert np.max(np.abs(K - K_fd)) <= 1e-5 * np.max(np.abs(K))


def test_tangent_is_symmetric(hole_mesh, polynomial_material):
    K = assemble_tangent(hole_mesh, polynomial_material, random_displacements(hole_mesh, 3)).toarray()
    np.testing.assert_allclose(K, K.T, atol=1e-10 * np.max(np.abs(K)))


def test_converged_fields_are_in_equilibrium(solved_fields, polynomial_material):
    for mesh, field in solved_fields:
        forces = nodal_forces(mesh, field, polynomial_material)
        assert equilibrium_ratio(mesh, polynomial_material, field.displacements) < 1e-8
        assert np.max(np.abs(forces[mesh.interior_nodes])) < 1e-8 * np.max(np.abs(forces))


def test_fields_record_boundary_resultants(solved_fields):
    steps = [field.step for _, field in solved_fields]
    assert steps == [1, 2]
    for _, field in solved_fields:
        assert field.mode == "biaxial"
        assert [bc.set_name for bc in field.bcs] == ["right", "top"]
        assert all(bc.force > 0.0 for bc in field.bcs)
    # the resultant grows with the load
    assert solved_fields[1][1].bcs[0].force > solved_fields[0][1].bcs[0].force


def test_homogeneous_plate_stays_homogeneous(plate_mesh, polynomial_material):
    program = LoadProgram(mode=LoadMode.EQUAL_BIAXIAL, u1_ratio=0.05, steps=1)
    field = run_load_program(plate_mesh, polynomial_material, program)[0]
    np.testing.assert_allclose(field.displacements, 0.05 * (plate_mesh.nodes - plate_mesh.nodes.min(axis=0)), atol=1e-10)


def test_newton_converges_quadratically(plate_mesh, polynomial_material):
    program = LoadProgram(mode=LoadMode.UNIAXIAL, u1_ratio=0.1, steps=1)
    report = solve_load_program(plate_mesh, polynomial_material, program)[0]
    assert report.converged
    assert report.iterations <= 8


def test_zero_load_program_is_trivial(plate_mesh, polynomial_material):
    reports = solve_load_program(plate_mesh, polynomial_material, LoadProgram(mode=LoadMode.UNIAXIAL, steps=3))
    assert len(reports) == 3
    assert all(np.all(r.field.displacements == 0.0) for r in reports)


def test_iteration_cap_raises(plate_mesh, polynomial_material):
    dirichlet = dirichlet_conditions(plate_mesh, LoadMode.UNIAXIAL, 0.2, 0.0)
    with pytest.raises(NonConvergence):
        solve_step(plate_mesh, polynomial_material, dirichlet, np.zeros((plate_mesh.node_count, 2)), max_iterations=0)


def test_oracle_driven_fem_reproduces_reference(plate_mesh, polynomial_material):
    program = LoadProgram(mode=LoadMode.SHEAR, u2_ratio=0.08, steps=2)
    reference = run_load_program(plate_mesh, polynomial_material, program)
    simulated = icm_driven_fem(plate_mesh, OraclePredictor(polynomial_material), program)
    assert displacement_error(simulated, reference) < 1e-8


def test_leaving_the_covered_range_warns(plate_mesh, polynomial_material):
    program = LoadProgram(mode=LoadMode.UNIAXIAL, u1_ratio=0.1, steps=1)
    narrow = (np.array([2.0, 1.0]), np.array([2.0 + 1e-6, 1.0 + 1e-6]))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ExtrapolationWarning)
        icm_driven_fem(plate_mesh, OraclePredictor(polynomial_material), program, covered_range=narrow)
    assert any(issubclass(w.category, ExtrapolationWarning) for w in caught)
