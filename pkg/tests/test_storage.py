import json

import numpy as np
import pandas as pd
import pytest
import torch

from icm.errors import MissingArtifact, ShapeMismatch, UsageError
from icm.services.diffusion import DiffusivityModel, simulate_diffusion, sine_initial_field, tokenize_diffusion
from icm.services.enn import EnergyMLP, EnnConfig
from icm.services.network import NetworkConfig, build_network
from icm.services.storage import (
    DatasetManifest,
    FieldEntry,
    SampleEntry,
    load_enn_checkpoint,
    load_field,
    load_icm_checkpoint,
    load_material,
    load_material_fields,
    load_mesh,
    load_series,
    load_token_dataset,
    read_diffusion_dump,
    read_json,
    read_token_dump,
    save_checkpoint,
    save_field,
    save_manifest,
    save_material,
    save_mesh,
    save_series,
    write_curve,
    write_diffusion_dump,
    write_report,
    write_token_dump,
)
from icm.services.tokenizer import full_context, tokenize_field
from icm.services.training import TrainConfig

SMALL = NetworkConfig(embed_dim=8, head_count=2, subtoken_blocks=1, main_blocks=1, ffn_hidden=16, seed=9)


@pytest.fixture
def dataset_dir(tmp_path, solved_fields, polynomial_material):
    mesh = solved_fields[0][0]
    save_mesh(tmp_path / "meshes" / "geometry-01.json", mesh)
    save_material(tmp_path / "materials" / "m0.json", polynomial_material)
    entries = []
    for k, (_, field) in enumerate(solved_fields):
        relative = f"fields/m0/geometry-01/biaxial_{k + 1}.json"
        save_field(tmp_path / relative, field)
        entries.append(FieldEntry(path=relative, mode=field.mode, step=field.step))
    sample = SampleEntry(
        material_id="m0",
        material="materials/m0.json",
        family="Polynomial",
        geometry="geometry-01",
        mesh="meshes/geometry-01.json",
        fields=entries,
    )
    save_manifest(tmp_path / "manifest.json", DatasetManifest(seed=3, attempted=1, samples=[sample]))
    return tmp_path


def test_material_and_mesh_files(tmp_path, polynomial_material, hole_mesh):
    assert load_material(save_material(tmp_path / "m.json", polynomial_material)) == polynomial_material
    mesh = load_mesh(save_mesh(tmp_path / "mesh.json", hole_mesh))
    np.testing.assert_array_equal(mesh.triangles, hole_mesh.triangles)
    np.testing.assert_array_equal(mesh.boundary_set("right"), hole_mesh.boundary_set("right"))
    assert mesh.mesh_id == hole_mesh.mesh_id


def test_field_file_keeps_conditions(tmp_path, solved_fields):
    _, field = solved_fields[1]
    loaded = load_field(save_field(tmp_path / "f.json", field))
    np.testing.assert_array_equal(loaded.displacements, field.displacements)
    assert loaded.bcs == field.bcs
    assert all(len(bc.resultant) == 2 for bc in loaded.bcs)
    assert (loaded.mode, loaded.step) == (field.mode, field.step)


def test_json_is_written_with_sorted_keys(tmp_path, polynomial_material):
    text = save_material(tmp_path / "m.json", polynomial_material).read_text()
    keys = list(json.loads(text))
    assert keys == sorted(keys)


def test_missing_files_raise(tmp_path):
    with pytest.raises(MissingArtifact):
        read_json(tmp_path / "absent.json")
    with pytest.raises(MissingArtifact):
        load_material_fields(tmp_path / "manifest.json")


def test_manifest_loading(dataset_dir, polynomial_material):
    grouped = load_material_fields(dataset_dir / "manifest.json")
    material, pairs = grouped["m0"]
    assert material == polynomial_material
    assert len(pairs) == 2
    dataset = load_token_dataset(dataset_dir / "manifest.json")
    assert len(dataset) == 1
    assert [f.step for f in dataset.materials[0].fields] == [1, 2]
    assert DatasetManifest.model_validate_json((dataset_dir / "manifest.json").read_text()).field_count == 2


def test_token_dump_layout(tmp_path, solved_fields):
    mesh, field = solved_fields[0]
    context = full_context([tokenize_field(mesh, field)])
    node_ids, offsets, records = read_token_dump(write_token_dump(tmp_path / "tokens.icmt", context))
    np.testing.assert_array_equal(node_ids, context.tokens.node_ids)
    np.testing.assert_array_equal(offsets, context.tokens.offsets)
    np.testing.assert_array_equal(records[:, :4], context.tokens.A_bar.reshape(-1, 4))
    np.testing.assert_array_equal(records[:, 4:6], context.I_hat)
    np.testing.assert_array_equal(records[:, 6:], context.tokens.invariants)


def test_diffusion_dump_layout(tmp_path, plate_mesh):
    c = simulate_diffusion(plate_mesh, DiffusivityModel.isotropic(0.1), sine_initial_field(plate_mesh), [0.05])
    tokens = tokenize_diffusion(plate_mesh, c, [0.05])
    path = write_diffusion_dump(tmp_path / "d.dift", tokens)
    _, offsets, records = read_diffusion_dump(path)
    assert records.shape == (tokens.offsets[-1], 6)
    np.testing.assert_array_equal(records[offsets[:-1], 5], tokens.b)
    with pytest.raises(UsageError):
        read_token_dump(path)


def test_icm_checkpoint(tmp_path, solved_fields):
    model = build_network(SMALL)
    path = save_checkpoint(tmp_path / "model.json", model, TrainConfig(network=SMALL, steps=1), "icm")
    loaded, header = load_icm_checkpoint(path)
    assert header["model_kind"] == "icm"
    for (name, p), (_, q) in zip(model.state_dict().items(), loaded.state_dict().items()):
        assert torch.equal(p, q), name
    with pytest.raises(UsageError):
        load_enn_checkpoint(path)


def test_enn_checkpoint_keeps_buffers(tmp_path):
    config = EnnConfig(seed=2)
    model = EnergyMLP(config, mean=np.array([2.1, 1.2]), std=np.array([0.3, 0.4]))
    loaded, _ = load_enn_checkpoint(save_checkpoint(tmp_path / "enn.json", model, config, "enn"))
    np.testing.assert_array_equal(loaded.input_mean.numpy(), [2.1, 1.2])
    inv = torch.tensor([[2.0, 1.0]], dtype=torch.float64)
    assert torch.equal(loaded(inv), model(inv))


def test_truncated_blob_is_rejected(tmp_path):
    path = save_checkpoint(tmp_path / "model.json", build_network(SMALL), TrainConfig(network=SMALL, steps=1), "icm")
    blob = path.with_suffix(".bin")
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(ShapeMismatch):
        load_icm_checkpoint(path)


def test_series_files(tmp_path):
    c = np.arange(12, dtype=float).reshape(3, 4)
    mesh_ref, loaded, dt = load_series(save_series(tmp_path / "c.json", "plate", c, [0.1, 0.2]))
    assert mesh_ref == "plate"
    np.testing.assert_array_equal(loaded, c)
    assert dt == [0.1, 0.2]


def test_reports_replace_non_finite_values(tmp_path):
    path = write_report(tmp_path / "r.json", {"a": float("nan"), "b": np.float64(2.0), "c": np.array([1.0, np.inf])})
    assert read_json(path) == {"a": None, "b": 2.0, "c": [1.0, None]}


def test_curve_writes_plot_spec(tmp_path):
    frame = pd.DataFrame({"stretch": [1.0, 1.1], "P11": [0.0, 0.2]})
    path = write_curve(tmp_path / "curve.csv", frame, x="stretch", y=["P11"])
    spec = read_json(tmp_path / "curve.plot.json")
    assert spec["csv"] == "curve.csv"
    assert spec["y"] == ["P11"]
    pd.testing.assert_frame_equal(pd.read_csv(path), frame)
