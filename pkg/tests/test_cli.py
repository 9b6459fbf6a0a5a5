import json

import pandas as pd
import pytest

from icm.services.storage import (
    DatasetManifest,
    FieldEntry,
    SampleEntry,
    read_json,
    read_token_dump,
    save_field,
    save_manifest,
    save_material,
    save_mesh,
)
from main import main

TINY_NETWORK = {"embed_dim": 8, "head_count": 2, "subtoken_blocks": 1, "main_blocks": 1, "ffn_hidden": 16}


@pytest.fixture
def manifest(tmp_path, solved_fields, polynomial_material):
    root = tmp_path / "data"
    mesh = solved_fields[0][0]
    save_mesh(root / "meshes" / f"{mesh.mesh_id}.json", mesh)
    save_material(root / "materials" / "m00000.json", polynomial_material)
    entries = []
    for _, field in solved_fields:
        relative = f"fields/m00000/{mesh.mesh_id}/{field.mode}-{field.step:02d}.json"
        save_field(root / relative, field)
        entries.append(FieldEntry(path=relative, mode=field.mode, step=field.step))
    sample = SampleEntry(
        material_id="m00000",
        material="materials/m00000.json",
        family="Polynomial",
        geometry="geometry-01",
        mesh=f"meshes/{mesh.mesh_id}.json",
        fields=entries,
    )
    return save_manifest(root / "manifest.json", DatasetManifest(preset="custom", samples=[sample]))


def _config(path, payload):
    path.write_text(json.dumps(payload))
    return str(path)


def test_train_needs_a_dataset(tmp_path):
    assert main(["--out", str(tmp_path), "train"]) == 1


def test_missing_config_file(tmp_path):
    assert main(["--out", str(tmp_path), "--config", str(tmp_path / "absent.json"), "train"]) == 1


def test_malformed_config_file(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["--out", str(tmp_path), "--config", str(bad), "diffusion-demo"]) == 1


def test_invalid_config_values(tmp_path):
    config = _config(tmp_path / "c.json", {"h": -1.0})
    assert main(["--out", str(tmp_path), "--config", config, "diffusion-demo"]) == 1


def test_eval_needs_a_dataset(tmp_path):
    assert main(["--out", str(tmp_path), "--oracle", "eval"]) == 1


def test_infer_needs_a_checkpoint_without_oracle(tmp_path, manifest):
    assert main(["--out", str(tmp_path / "run"), "infer", "--context", str(manifest)]) == 1


def test_diffusion_demo(tmp_path):
    out = tmp_path / "run"
    assert main(["--out", str(out), "diffusion-demo", "--h", "0.25", "--dt", "0.05", "--steps", "2"]) == 0
    report = read_json(out / "diffusion_report.json")
    assert report["tokens"] == 18
    assert report["max_relative_token_residual"] <= 1e-8
    assert report["max_mass_balance_error"] <= 1e-6
    assert report["shared_evaluator_gap"] <= 1e-12
    assert (out / "concentration.bin").is_file()
    assert (out / "diffusion_tokens.dift").is_file()


def test_oracle_eval_has_no_error(tmp_path, manifest):
    out = tmp_path / "run"
    assert main(["--out", str(out), "--oracle", "eval", "--dataset", str(manifest)]) == 0
    report = read_json(out / "eval_report.json")
    entry = report["sets"]["custom:data"]["per_material"]["m00000"]
    assert entry["S_err"] < 1e-8
    assert entry["alpha"] == pytest.approx(1.0, abs=1e-8)


def test_oracle_infer_reproduces_the_true_curve(tmp_path, manifest):
    out = tmp_path / "run"
    queries = tmp_path / "queries.csv"
    pd.DataFrame({"F11": [1.1, 1.0], "F12": [0.0, 0.1], "F21": [0.0, 0.0], "F22": [0.95, 1.0]}).to_csv(queries, index=False)
    assert main(["--out", str(out), "--oracle", "infer", "--context", str(manifest), "--queries", str(queries)]) == 0
    curve = pd.read_csv(out / "uniaxial_curve.csv")
    assert len(curve) == 26
    pd.testing.assert_series_equal(curve["P11"], curve["P11_true"], check_names=False, rtol=1e-8, atol=1e-10)
    stress = pd.read_csv(out / "query_stress.csv")
    assert list(stress.columns[:4]) == ["F11", "F12", "F21", "F22"]
    assert len(stress) == 2
    assert read_json(out / "infer_report.json")["oracle"] is True


def test_oracle_fem_demo(tmp_path, manifest):
    out = tmp_path / "run"
    config = _config(tmp_path / "fem.json", {"geometry": "geometry-01", "h": 0.2, "u1_ratio": 0.05, "steps": 1})
    assert main(["--out", str(out), "--config", config, "--oracle", "fem-demo", "--context", str(manifest)]) == 0
    report = read_json(out / "fem_demo_report.json")
    assert report["max_nodal_relative_error"] < 1e-8
    assert (out / "fem_stress.csv").is_file()


def test_dump_tokens(tmp_path, manifest):
    out = tmp_path / "run"
    assert main(["--out", str(out), "dump-tokens", "--manifest", str(manifest)]) == 0
    _, _, records = read_token_dump(out / "m00000.icmt")
    assert records.shape[1] == 8


def test_train_then_use_the_checkpoint(tmp_path, manifest):
    out = tmp_path / "run"
    config = _config(tmp_path / "train.json", {"network": TINY_NETWORK, "steps": 2, "sampling": {"tokens": [5, 10]}})
    assert main(["--out", str(out), "--seed", "4", "--config", config, "train", "--dataset", str(manifest)]) == 0
    assert (out / "model.bin").is_file()
    assert len(pd.read_csv(out / "loss.csv")) == 2
    header = read_json(out / "model.json")
    assert header["config"]["seed"] == 4
    assert header["model_kind"] == "icm"

    checkpoint = str(out / "model.json")
    assert main(["--out", str(out / "eval"), "eval", "--checkpoint", checkpoint, "--dataset", str(manifest)]) == 0
    assert main(["--out", str(out / "emb"), "dump-embeddings", "--manifest", str(manifest), "--checkpoint", checkpoint]) == 0
    embeddings = pd.read_csv(out / "emb" / "m00000_embeddings.csv")
    assert list(embeddings["field_id"]) == [0, 1]


def test_training_reruns_are_byte_identical(tmp_path, manifest):
    config = _config(tmp_path / "train.json", {"network": TINY_NETWORK, "steps": 2, "sampling": {"tokens": [5, 10]}})
    for name in ("a", "b"):
        assert main(["--out", str(tmp_path / name), "--config", config, "train", "--dataset", str(manifest)]) == 0
    for artifact in ("model.json", "model.bin", "loss.csv"):
        assert (tmp_path / "a" / artifact).read_bytes() == (tmp_path / "b" / artifact).read_bytes()


@pytest.mark.slow
def test_generated_dataset_evaluates_exactly_under_the_oracle(tmp_path):
    args = ["datagen", "--preset", "custom", "--materials", "2", "--geometries", "1", "--mode", "uniaxial",
            "--mode", "shear", "--steps", "2", "--h", "0.2", "--name", "tiny"]
    assert main(["--out", str(tmp_path / "a"), "--seed", "1"] + args) == 0
    assert main(["--out", str(tmp_path / "b"), "--seed", "1"] + args) == 0
    first, second = tmp_path / "a" / "tiny", tmp_path / "b" / "tiny"
    assert (first / "manifest.json").read_bytes() == (second / "manifest.json").read_bytes()
    for path in first.rglob("*.json"):
        if not path.name.endswith(".meta.json"):
            assert path.read_bytes() == (second / path.relative_to(first)).read_bytes(), path

    manifest = DatasetManifest.model_validate_json((first / "manifest.json").read_text())
    assert manifest.failed == 0
    assert manifest.field_count == 2 * 2 * 2

    out = tmp_path / "eval"
    assert main(["--out", str(out), "--oracle", "eval", "--dataset", str(first / "manifest.json")]) == 0
    per_material = read_json(out / "eval_report.json")["sets"]["custom:tiny"]["per_material"]
    assert sorted(per_material) == ["m00000", "m00001"]
    assert all(entry["S_err"] < 1e-8 for entry in per_material.values())
