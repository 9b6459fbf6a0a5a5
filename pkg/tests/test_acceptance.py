"""Desk-scale end-to-end runs. Deselected by default; run with `pytest -m slow`."""
import numpy as np
import pytest
from scipy import stats

from icm.commands.datagen import DatagenConfig, generate_dataset
from icm.errors import NumericalError
from icm.services.discretization import generate_plate_mesh, unseen_geometries
from icm.services.enn import EnnConfig, EnnGradient, enn_train
from icm.services.inference import (
    NetworkPredictor,
    context_scaling_curve,
    evaluate_material,
    geometric_mean,
    post_scale,
    scaled_predictor,
    uniaxial_stress_curve,
)
from icm.services.materials import MaterialFamily
from icm.services.network import NetworkConfig, field_embeddings
from icm.services.solver import LoadMode, LoadProgram, displacement_error, icm_driven_fem, run_load_program
from icm.services.storage import load_material_fields, load_token_dataset
from icm.services.tokenizer import full_context, tokenize_field
from icm.services.training import TrainConfig, train

pytestmark = pytest.mark.slow

UNIAXIAL_ONLY = dict(geometry_count=1, modes=[LoadMode.UNIAXIAL], steps=5, h=0.1)


@pytest.fixture(scope="module")
def datasets(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    _, train_path = generate_dataset(DatagenConfig(preset="custom", materials=20, seed=0, **UNIAXIAL_ONLY), root / "train")
    _, id_path = generate_dataset(DatagenConfig(preset="test-id", materials=5, seed=0, **UNIAXIAL_ONLY), root / "test-id")
    _, m_path = generate_dataset(
        DatagenConfig(preset="custom", families=[MaterialFamily.OGDEN, MaterialFamily.EXP_LN], materials=10, seed=1, **UNIAXIAL_ONLY),
        root / "test-m",
    )
    _, scaling_path = generate_dataset(
        DatagenConfig(preset="test-id", materials=1, seed=3, geometry_count=3, modes=[LoadMode.UNIAXIAL], steps=5, h=0.1),
        root / "scaling",
    )
    return {"train": train_path, "test-id": id_path, "test-m": m_path, "scaling": scaling_path}


@pytest.fixture(scope="module")
def trained_model(datasets):
    config = TrainConfig(network=NetworkConfig(embed_dim=64, head_count=4), steps=5000, seed=0)
    return train(load_token_dataset(datasets["train"]), config).model


def _set_errors(model, manifest_path):
    errors = []
    for material_id, (material, fields) in load_material_fields(manifest_path).items():
        try:
            evaluation = evaluate_material(material_id, material, fields, lambda context: NetworkPredictor(model, context))
            errors.append(evaluation.S_err)
        except NumericalError:
            errors.append(float("nan"))
    return errors


def test_held_out_polynomial_materials(trained_model, datasets):
    assert geometric_mean(_set_errors(trained_model, datasets["test-id"])) <= 0.15


def test_cross_family_trend(trained_model, datasets):
    in_distribution = geometric_mean(_set_errors(trained_model, datasets["test-id"]))
    errors = _set_errors(trained_model, datasets["test-m"])
    assert np.mean(np.isfinite(errors)) >= 0.9
    assert geometric_mean(errors) <= 3.0 * in_distribution


def test_learned_law_drives_a_held_out_geometry(trained_model, datasets):
    material, fields = next(iter(load_material_fields(datasets["test-id"]).values()))
    context = full_context([tokenize_field(mesh, field, k) for k, (mesh, field) in enumerate(fields)])
    predictor = NetworkPredictor(trained_model, context)
    provider = scaled_predictor(predictor, post_scale(predictor, fields))

    mesh = generate_plate_mesh(unseen_geometries(0.1)[0])
    program = LoadProgram(mode=LoadMode.UNIAXIAL, u1_ratio=0.3, steps=5)
    reference = run_load_program(mesh, material, program)
    simulated = icm_driven_fem(mesh, provider, program, covered_range=context.invariant_range())
    assert displacement_error(simulated, reference) <= 0.1


def test_tiny_enn_reproduces_the_uniaxial_curve(datasets):
    material, fields = next(iter(load_material_fields(datasets["test-id"]).values()))
    result = enn_train(fields[-1:], EnnConfig.preset("tiny", steps=2000, seed=0))
    stretches = np.linspace(1.05, 1.3, 6)
    predicted = uniaxial_stress_curve(EnnGradient(result.model), stretches)["P11"].to_numpy()
    truth = uniaxial_stress_curve(material, stretches)["P11"].to_numpy()
    assert np.max(np.abs(predicted - truth)) <= 0.05 * np.max(np.abs(truth))


def test_more_context_lowers_the_error(trained_model, datasets):
    material, fields = next(iter(load_material_fields(datasets["scaling"]).values()))
    assert len(fields) == 15
    curve = context_scaling_curve(
        fields,
        material,
        lambda context: NetworkPredictor(trained_model, context),
        prefix_sizes=[1, 2, 3, 5, 8, 12, 15],
        resamplings=5,
        rng=np.random.default_rng(0),
    )
    counts = curve["token_count"].to_numpy()
    assert counts[-1] >= 10 * counts[0]
    assert stats.spearmanr(counts, curve["geo_mean"].to_numpy()).statistic <= -0.7
    iqr = (curve["q75"] - curve["q25"]).to_numpy()
    assert iqr[-1] <= iqr[0]


def _cosine(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def test_field_embeddings_cluster_by_material(trained_model, datasets):
    grouped = list(load_material_fields(datasets["test-id"]).values())[:3]
    embeddings = [
        list(field_embeddings(trained_model, [tokenize_field(mesh, field, k) for k, (mesh, field) in enumerate(fields)]).values())
        for _, fields in grouped
    ]
    same = [_cosine(a, b) for group in embeddings for i, a in enumerate(group) for b in group[i + 1:]]
    different = [
        _cosine(a, b)
        for g, group in enumerate(embeddings)
        for other in embeddings[g + 1:]
        for a in group
        for b in other
    ]
    assert np.mean(same) > np.mean(different)
