"""
On-disk formats: material, mesh and field JSON, dataset manifests, token dumps,
checkpoints, concentration series and curve CSVs. JSON is written with sorted keys
so reruns are byte-identical; wall-clock timestamps only go to *.meta.json sidecars.
"""
import hashlib
import json
import logging
import struct
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from pydantic import BaseModel, Field

from icm.errors import MissingArtifact, ShapeMismatch, UsageError
from icm.services.diffusion import DiffusionTokenSet
from icm.services.discretization import BoundaryCondition, Mesh, StrainField
from icm.services.enn import EnergyMLP, EnnConfig
from icm.services.materials import MaterialModel
from icm.services.network import ICMNetwork, NetworkConfig
from icm.services.tokenizer import Context, FieldRecord, MaterialRecord, TokenDataset, tokenize_field

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

FORMAT_VERSION = 1
TOKEN_MAGIC = b"ICMT"
DIFFUSION_MAGIC = b"DIFT"
_HEADER = struct.Struct("<4sII")
_TOKEN_HEADER = struct.Struct("<II")
_F8 = np.dtype("<f8")


# --- JSON helpers ---

def write_json(path: PathLike, payload: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")
    return path


def read_json(path: PathLike, what: str = "file") -> Any:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifact(str(path), what)
    return json.loads(path.read_text())


def write_meta(path: PathLike, **extra: Any) -> Path:
    """Timestamp sidecar `<stem>.meta.json` next to an artifact."""
    path = Path(path)
    payload = {"artifact": path.name, "created": datetime.now(timezone.utc).isoformat(), **extra}
    return write_json(path.with_name(path.stem + ".meta.json"), payload)


def file_hash(path: PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --- Materials, meshes, fields ---

def save_material(path: PathLike, material: MaterialModel) -> Path:
    return write_json(path, {"family": material.family.value, "params": material.params, "normalized": material.normalized})


def load_material(path: PathLike) -> MaterialModel:
    return MaterialModel.model_validate(read_json(path, "material file"))


def save_mesh(path: PathLike, mesh: Mesh) -> Path:
    return write_json(path, {
        "mesh_id": mesh.mesh_id,
        "nodes": mesh.nodes.tolist(),
        "triangles": mesh.triangles.tolist(),
        "boundary_sets": {name: ids.tolist() for name, ids in mesh.boundary_sets.items()},
    })


def load_mesh(path: PathLike) -> Mesh:
    data = read_json(path, "mesh file")
    return Mesh(
        nodes=np.asarray(data["nodes"], dtype=float),
        triangles=np.asarray(data["triangles"], dtype=np.int64),
        boundary_sets={name: np.asarray(ids, dtype=np.int64) for name, ids in data.get("boundary_sets", {}).items()},
        mesh_id=data.get("mesh_id", Path(path).stem),
    )


def _bc_payload(bc: BoundaryCondition) -> Dict[str, Any]:
    payload = {"set": bc.set_name, "direction": list(bc.direction), "force": bc.force}
    if bc.resultant is not None:
        payload["resultant"] = list(bc.resultant)
    return payload


def save_field(path: PathLike, field: StrainField) -> Path:
    return write_json(path, {
        "mesh": field.mesh_ref,
        "displacements": field.displacements.tolist(),
        "bcs": [_bc_payload(bc) for bc in field.bcs],
        "mode": field.mode,
        "step": field.step,
    })


def load_field(path: PathLike) -> StrainField:
    data = read_json(path, "field file")
    bcs = tuple(
        BoundaryCondition(
            set_name=bc["set"],
            direction=tuple(bc["direction"]),
            force=float(bc["force"]),
            resultant=tuple(bc["resultant"]) if "resultant" in bc else None,
        )
        for bc in data.get("bcs", [])
    )
    return StrainField(
        mesh_ref=data["mesh"],
        displacements=np.asarray(data["displacements"], dtype=float),
        bcs=bcs,
        mode=data.get("mode", ""),
        step=int(data.get("step", 0)),
    )


# --- Dataset manifests ---

class FieldEntry(BaseModel):
    path: str
    mode: str
    step: int


class SampleEntry(BaseModel):
    material_id: str
    material: str
    family: str
    geometry: str
    mesh: str
    fields: List[FieldEntry] = Field(default_factory=list)


class DatasetManifest(BaseModel):
    format_version: int = FORMAT_VERSION
    preset: str = "custom"
    seed: int = 0
    attempted: int = 0
    failed: int = 0
    samples: List[SampleEntry] = Field(default_factory=list)

    @property
    def field_count(self) -> int:
        return sum(len(s.fields) for s in self.samples)


def save_manifest(path: PathLike, manifest: DatasetManifest) -> Path:
    return write_json(path, manifest.model_dump(mode="json"))


def load_manifest(path: PathLike) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifact(str(path), "dataset manifest")
    return DatasetManifest.model_validate_json(path.read_text())


def _resolve(root: Path, relative: str) -> Path:
    return root / relative


def load_sample_fields(manifest_path: PathLike, sample: SampleEntry) -> List[Tuple[Mesh, StrainField]]:
    root = Path(manifest_path).parent
    mesh = load_mesh(_resolve(root, sample.mesh))
    pairs = []
    for entry in sample.fields:
        field = load_field(_resolve(root, entry.path))
        field.check_against(mesh)
        pairs.append((mesh, field))
    return pairs


def load_material_fields(manifest_path: PathLike) -> Dict[str, Tuple[MaterialModel, List[Tuple[Mesh, StrainField]]]]:
    """Material id -> (material, all its (mesh, field) pairs) in manifest order."""
    manifest = load_manifest(manifest_path)
    root = Path(manifest_path).parent
    grouped: Dict[str, Tuple[MaterialModel, List[Tuple[Mesh, StrainField]]]] = {}
    for sample in manifest.samples:
        if sample.material_id not in grouped:
            grouped[sample.material_id] = (load_material(_resolve(root, sample.material)), [])
        grouped[sample.material_id][1].extend(load_sample_fields(manifest_path, sample))
    return grouped


def load_token_dataset(manifest_path: PathLike) -> TokenDataset:
    """Tokenizes every field of a manifest, grouped per material."""
    manifest = load_manifest(manifest_path)
    records: Dict[str, MaterialRecord] = {}
    for sample in manifest.samples:
        record = records.setdefault(sample.material_id, MaterialRecord(material_id=sample.material_id, fields=[]))
        for (mesh, field), entry in zip(load_sample_fields(manifest_path, sample), sample.fields):
            field_id = len(record.fields)
            record.fields.append(FieldRecord(
                geometry=sample.geometry,
                mode=entry.mode,
                step=entry.step,
                tokens=tokenize_field(mesh, field, field_id),
                field_id=field_id,
            ))
    dataset = TokenDataset(materials=[records[k] for k in sorted(records)])
    logger.info("token dataset loaded materials=%d fields=%d", len(dataset), manifest.field_count)
    return dataset


# --- Token dumps ---

def _write_records(path: PathLike, magic: bytes, node_ids: np.ndarray, offsets: np.ndarray, records: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as handle:
        handle.write(_HEADER.pack(magic, FORMAT_VERSION, len(node_ids)))
        for t, node in enumerate(node_ids):
            lo, hi = int(offsets[t]), int(offsets[t + 1])
            handle.write(_TOKEN_HEADER.pack(int(node), hi - lo))
            handle.write(np.ascontiguousarray(records[lo:hi], dtype=_F8).tobytes())
    return path


def _read_records(path: PathLike, magic: bytes, width: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifact(str(path), "token dump")
    blob = path.read_bytes()
    found, version, count = _HEADER.unpack_from(blob, 0)
    if found != magic:
        raise UsageError(f"'{path}' is not a {magic.decode()} dump (magic {found!r}).")
    if version != FORMAT_VERSION:
        raise UsageError(f"Unsupported dump version {version} in '{path}'.")
    position = _HEADER.size
    node_ids, offsets, chunks = [], [0], []
    for _ in range(count):
        node, subtokens = _TOKEN_HEADER.unpack_from(blob, position)
        position += _TOKEN_HEADER.size
        chunks.append(np.frombuffer(blob, dtype=_F8, count=subtokens * width, offset=position).reshape(subtokens, width))
        position += subtokens * width * _F8.itemsize
        node_ids.append(node)
        offsets.append(offsets[-1] + subtokens)
    records = np.concatenate(chunks) if chunks else np.zeros((0, width))
    return np.asarray(node_ids, dtype=np.int64), np.asarray(offsets, dtype=np.int64), records


def write_token_dump(path: PathLike, context: Context) -> Path:
    """ICMT: per subtoken A_bar (row-major), normalized invariants, raw invariants."""
    tokens = context.tokens
    records = np.concatenate([tokens.A_bar.reshape(-1, 4), context.I_hat, tokens.invariants], axis=1)
    return _write_records(path, TOKEN_MAGIC, tokens.node_ids, tokens.offsets, records)


def read_token_dump(path: PathLike) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (node ids, offsets, records of shape (S, 8))."""
    return _read_records(path, TOKEN_MAGIC, 8)


def write_diffusion_dump(path: PathLike, tokens: DiffusionTokenSet) -> Path:
    """DIFT: per subtoken A (row-major), centroid concentration, the owning token's b."""
    b = np.repeat(tokens.b, np.diff(tokens.offsets))
    records = np.concatenate([tokens.A.reshape(-1, 4), tokens.concentrations[:, None], b[:, None]], axis=1)
    return _write_records(path, DIFFUSION_MAGIC, tokens.node_ids, tokens.offsets, records)


def read_diffusion_dump(path: PathLike) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (node ids, offsets, records of shape (S, 6))."""
    return _read_records(path, DIFFUSION_MAGIC, 6)


# --- Checkpoints ---

def _blob_path(header: Path) -> Path:
    return header.with_suffix(".bin")


def save_checkpoint(path: PathLike, model: torch.nn.Module, config: BaseModel, model_kind: str) -> Path:
    """
    JSON header {config, manifest, format_version, model_kind} plus a `.bin` blob of
    little-endian doubles in manifest order.
    """
    path = Path(path)
    state = model.state_dict()
    write_json(path, {
        "config": config.model_dump(mode="json"),
        "manifest": [[name, list(tensor.shape)] for name, tensor in state.items()],
        "format_version": FORMAT_VERSION,
        "model_kind": model_kind,
    })
    flat = [tensor.detach().cpu().numpy().astype(_F8).ravel() for tensor in state.values()]
    _blob_path(path).write_bytes(np.concatenate(flat).tobytes() if flat else b"")
    return path


def read_checkpoint(path: PathLike) -> Tuple[Dict[str, Any], Dict[str, torch.Tensor]]:
    """Header plus the state dict rebuilt from the blob."""
    path = Path(path)
    header = read_json(path, "checkpoint")
    blob = _blob_path(path)
    if not blob.is_file():
        raise MissingArtifact(str(blob), "checkpoint blob")
    values = np.frombuffer(blob.read_bytes(), dtype=_F8)
    expected = sum(int(np.prod(shape)) for _, shape in header["manifest"])
    if values.size != expected:
        raise ShapeMismatch(f"Checkpoint blob holds {values.size} doubles, manifest needs {expected}.")
    state, position = {}, 0
    for name, shape in header["manifest"]:
        size = int(np.prod(shape))
        state[name] = torch.from_numpy(values[position:position + size].reshape(shape).copy())
        position += size
    return header, state


def _load_into(model: torch.nn.Module, state: Dict[str, torch.Tensor]) -> None:
    own = model.state_dict()
    if list(own) != list(state):
        raise ShapeMismatch(f"Checkpoint entries {list(state)[:4]}... do not match the model's {list(own)[:4]}...")
    for name, tensor in state.items():
        if tuple(own[name].shape) != tuple(tensor.shape):
            raise ShapeMismatch(f"Parameter '{name}' has shape {tuple(tensor.shape)}, config implies {tuple(own[name].shape)}.")
    model.load_state_dict(state)


def load_icm_checkpoint(path: PathLike) -> Tuple[ICMNetwork, Dict[str, Any]]:
    header, state = read_checkpoint(path)
    if header.get("model_kind") != "icm":
        raise UsageError(f"'{path}' holds a '{header.get('model_kind')}' model, expected 'icm'.")
    model = ICMNetwork(NetworkConfig.model_validate(header["config"]["network"]))
    _load_into(model, state)
    model.eval()
    return model, header


def load_enn_checkpoint(path: PathLike) -> Tuple[EnergyMLP, Dict[str, Any]]:
    header, state = read_checkpoint(path)
    if header.get("model_kind") != "enn":
        raise UsageError(f"'{path}' holds a '{header.get('model_kind')}' model, expected 'enn'.")
    model = EnergyMLP(EnnConfig.model_validate(header["config"]))
    _load_into(model, state)
    return model, header


# --- Concentration series ---

def save_series(path: PathLike, mesh_ref: str, c_series: np.ndarray, dt_series: Sequence[float]) -> Path:
    path = Path(path)
    c_series = np.asarray(c_series, dtype=_F8)
    write_json(path, {
        "mesh": mesh_ref,
        "node_count": int(c_series.shape[1]),
        "levels": int(c_series.shape[0]),
        "dt": [float(dt) for dt in dt_series],
        "format_version": FORMAT_VERSION,
    })
    _blob_path(path).write_bytes(c_series.tobytes())
    return path


def load_series(path: PathLike) -> Tuple[str, np.ndarray, List[float]]:
    path = Path(path)
    header = read_json(path, "concentration series")
    blob = _blob_path(path)
    if not blob.is_file():
        raise MissingArtifact(str(blob), "concentration series blob")
    values = np.frombuffer(blob.read_bytes(), dtype=_F8)
    shape = (header["levels"], header["node_count"])
    if values.size != shape[0] * shape[1]:
        raise ShapeMismatch(f"Series blob holds {values.size} values, header needs {shape}.")
    return header["mesh"], values.reshape(shape).copy(), list(header["dt"])


# --- Curves and reports ---

def write_csv(path: PathLike, frame: pd.DataFrame) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.17g")
    return path


def write_curve(path: PathLike, frame: pd.DataFrame, x: str, y: Sequence[str], kind: str = "line", title: str = "") -> Path:
    """CSV plus a `<stem>.plot.json` spec for external plotting."""
    path = write_csv(path, frame)
    write_json(path.with_name(path.stem + ".plot.json"), {"csv": path.name, "x": x, "y": list(y), "kind": kind, "title": title})
    return path


def write_report(path: PathLike, payload: Dict[str, Any]) -> Path:
    return write_json(path, _plain(payload))


def _plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, np.generic):
        return _plain(value.item())
    if isinstance(value, float) and not np.isfinite(value):
        return None
    return value
