import numpy as np
import pytest

from conftest import random_displacements
from icm.errors import DegenerateElement, MeshGenerationFailure, NodeNotInElement, UnknownBoundarySet
from icm.services.discretization import (
    BoundaryCondition,
    GeometrySpec,
    HoleSpec,
    Mesh,
    StrainField,
    affine_residual,
    boundary_resultant,
    coefficient_matrices,
    coefficient_matrix,
    deformation_gradients,
    generate_plate_mesh,
    min_angles,
    nodal_force,
    nodal_forces,
    nodal_forces_quadrature,
    token_residual,
    training_geometries,
    unseen_geometries,
)
from icm.services.materials import MaterialFamily, invariants_from_F


def test_structured_plate(plate_mesh):
    assert plate_mesh.node_count == 25
    assert plate_mesh.element_count == 32
    assert plate_mesh.areas.sum() == pytest.approx(1.0)
    assert len(plate_mesh.interior_nodes) == 9
    assert sorted(plate_mesh.boundary_sets) == ["bottom", "left", "right", "top"]


def test_shape_gradients_sum_to_zero(hole_mesh):
    np.testing.assert_allclose(hole_mesh.shape_gradients.sum(axis=1), 0.0, atol=1e-9)


def test_affine_displacement_gives_uniform_gradient(hole_mesh):
    G = np.array([[0.1, 0.05], [-0.02, 0.2]])
    F = deformation_gradients(hole_mesh, hole_mesh.nodes @ G.T)
    np.testing.assert_allclose(F, np.broadcast_to(np.eye(2) + G, F.shape), atol=1e-12)


@pytest.mark.parametrize("spec", training_geometries(0.2) + unseen_geometries(0.2), ids=lambda s: s.name)
def test_plate_geometries_mesh(spec):
    mesh = generate_plate_mesh(spec)
    holes = sum(_hole_area(h) for h in spec.holes)
    assert np.all(mesh.areas > 0.0)
    # polygonal holes are inscribed, so the meshed area is slightly larger
    assert mesh.areas.sum() == pytest.approx(1.0 - holes, rel=0.05)
    assert len(mesh.interior_nodes) > 0
    assert min_angles(mesh).min() > 1.0


def _hole_area(hole: HoleSpec) -> float:
    if hole.shape == "circle":
        return np.pi * hole.size[0] ** 2
    if hole.shape == "ellipse":
        return np.pi * hole.size[0] * hole.size[1]
    return hole.size[0] ** 2


def test_hole_boundary_nodes_count_as_interior(hole_mesh):
    centre = np.array([0.5, 0.5])
    on_hole = np.flatnonzero(np.abs(np.linalg.norm(hole_mesh.nodes - centre, axis=1) - 0.2) < 1e-9)
    assert on_hole.size >= 16
    assert np.all(np.isin(on_hole, hole_mesh.interior_nodes))


def test_overlapping_holes_are_rejected():
    spec = GeometrySpec(holes=[HoleSpec(center=(0.4, 0.5), shape="circle", size=[0.2]),
                               HoleSpec(center=(0.6, 0.5), shape="circle", size=[0.2])], h=0.1)
    with pytest.raises(MeshGenerationFailure):
        generate_plate_mesh(spec)


def test_hole_touching_the_edge_is_rejected():
    spec = GeometrySpec(holes=[HoleSpec(center=(0.1, 0.5), shape="circle", size=[0.2])], h=0.1)
    with pytest.raises(MeshGenerationFailure):
        generate_plate_mesh(spec)


def test_degenerate_element_is_rejected():
    nodes = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    with pytest.raises(DegenerateElement):
        Mesh(nodes=nodes, triangles=np.array([[0, 1, 2]]), boundary_sets={})


def test_unknown_boundary_set(plate_mesh):
    with pytest.raises(UnknownBoundarySet):
        plate_mesh.boundary_set("hole")


def test_boundary_condition_direction_must_be_unit():
    with pytest.raises(ValueError):
        BoundaryCondition(set_name="right", direction=(2.0, 0.0))


def test_field_shape_is_checked(plate_mesh):
    with pytest.raises(ValueError):
        StrainField("plate", np.zeros((3, 2))).check_against(plate_mesh)


def test_coefficient_matrix_matches_batch(hole_mesh):
    u = random_displacements(hole_mesh, 1)
    A = coefficient_matrices(hole_mesh, u)
    e = 7
    n = int(hole_mesh.triangles[e, 2])
    np.testing.assert_allclose(coefficient_matrix(hole_mesh, u, n, e), A[e, 2], rtol=1e-12, atol=1e-14)
    outsider = int(np.setdiff1d(np.arange(hole_mesh.node_count), hole_mesh.triangles[e])[0])
    with pytest.raises(NodeNotInElement):
        coefficient_matrix(hole_mesh, u, outsider, e)


def test_dual_path_assembly_identity(hole_mesh, family_materials):
    for seed, material in enumerate(list(family_materials.values()) * 20):
        u = random_displacements(hole_mesh, seed)
        tokens = nodal_forces(hole_mesh, u, material)
        quadrature = nodal_forces_quadrature(hole_mesh, u, material)
        scale = np.max(np.abs(quadrature))
        assert np.max(np.abs(tokens - quadrature)) <= 1e-12 * scale


def test_single_node_force_matches_assembly(hole_mesh, polynomial_material):
    u = random_displacements(hole_mesh, 4)
    forces = nodal_forces(hole_mesh, u, polynomial_material)
    for n in hole_mesh.interior_nodes[:5]:
        np.testing.assert_allclose(nodal_force(hole_mesh, u, polynomial_material, int(n)), forces[n], rtol=1e-10, atol=1e-12)
    with pytest.raises(IndexError):
        nodal_force(hole_mesh, u, polynomial_material, hole_mesh.node_count)


def test_resultants_of_a_rigid_translation_vanish(plate_mesh, family_materials):
    u = np.tile([0.05, -0.02], (plate_mesh.node_count, 1))
    material = family_materials[MaterialFamily.PUCCI_SACCOMANDI]
    bc = BoundaryCondition(set_name="right", direction=(1.0, 0.0))
    np.testing.assert_allclose(boundary_resultant(plate_mesh, u, material, bc), 0.0, atol=1e-10)


def test_token_residual_sums_subtokens():
    A = np.array([[[1.0, 0.0]], [[0.0, 2.0]], [[3.0, 1.0]]])
    g = np.array([[1.0, 1.0], [1.0, 1.0], [2.0, 0.0]])
    owners = np.array([0, 0, 1])
    np.testing.assert_allclose(token_residual(A, g, owners, 2), [[3.0], [6.0]])
    np.testing.assert_allclose(token_residual(A, g, owners, 2, b=np.array([3.0, 1.0])), [[0.0], [5.0]])


def test_affine_residual_reproduces_nodal_forces(hole_mesh, polynomial_material):
    u = random_displacements(hole_mesh, 2)
    F = deformation_gradients(hole_mesh, u)
    g = polynomial_material.gradient(invariants_from_F(F))
    generic = affine_residual(hole_mesh.triangles, coefficient_matrices(hole_mesh, u), g, hole_mesh.node_count)
    np.testing.assert_allclose(generic, nodal_forces(hole_mesh, u, polynomial_material), rtol=1e-13, atol=1e-13)
