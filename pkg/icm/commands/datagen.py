"""
`icm datagen`: samples materials, meshes plate geometries, solves load programs and
writes field files plus a manifest. Presets reproduce the training set and the four
nested test regimes.
"""
import logging
from collections import OrderedDict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

import click
from pydantic import BaseModel, Field

from config import settings
from icm.commands.common import RunContext, load_config, pass_run
from icm.errors import DatasetFailure, IcmError, NumericalError
from icm.services.discretization import GeometrySpec, Mesh, generate_plate_mesh, training_geometries, unseen_geometries
from icm.services.materials import MaterialFamily, MaterialModel, normalize_polynomial_coefficients, sample_material
from icm.services.solver import LoadMode, LoadProgram, run_load_program
from icm.services.storage import (
    DatasetManifest,
    FieldEntry,
    SampleEntry,
    file_hash,
    save_field,
    save_manifest,
    save_material,
    save_mesh,
    write_meta,
)

logger = logging.getLogger(__name__)

Preset = Literal["train", "test-id", "test-m", "test-mgl", "test-mgl+", "custom"]

# Final (u1/L, u2/L) per loading mode
MODE_RATIOS: Dict[LoadMode, Tuple[float, float]] = {
    LoadMode.UNIAXIAL: (0.3, 0.0),
    LoadMode.BIAXIAL: (0.3, 0.15),
    LoadMode.SHEAR: (0.0, 0.15),
    LoadMode.PROPORTIONAL_BIAXIAL: (0.18, 0.09),
    LoadMode.EQUAL_BIAXIAL: (0.14, 0.14),
}
TRAINING_MODES = [LoadMode.UNIAXIAL, LoadMode.BIAXIAL, LoadMode.SHEAR]

# Material streams of held-out sets start here so they never repeat training draws
HELD_OUT_OFFSET = 1_000_000

_POLYNOMIAL_PLAN = [(MaterialFamily.POLYNOMIAL, rule) for rule in ("A", "B", "C")]
_OTHER_FAMILIES_PLAN = [
    (MaterialFamily.OGDEN, "A"),
    (MaterialFamily.OGDEN, "B"),
    (MaterialFamily.PUCCI_SACCOMANDI, "default"),
    (MaterialFamily.EXP_LN, "default"),
    (MaterialFamily.VAN_DER_WAALS, "default"),
]


class DatagenConfig(BaseModel):
    preset: Preset = "train"
    name: Optional[str] = None
    materials: int = Field(20, ge=1)
    families: Optional[List[MaterialFamily]] = None
    subset_rule: Optional[str] = None
    geometry_count: Optional[int] = Field(None, ge=1)
    h: float = Field(0.1, gt=0)
    modes: Optional[List[LoadMode]] = None
    steps: int = Field(10, ge=1)
    magnitude_factor: float = Field(1.0, gt=0)
    seed: int = Field(0, ge=0, lt=2**64)


@dataclass
class DatasetPlan:
    materials: List[Tuple[str, MaterialFamily, str, int]]
    geometries: List[GeometrySpec]
    programs: List[LoadProgram]


def build_plan(config: DatagenConfig) -> DatasetPlan:
    """Materials (id, family, rule, stream index), geometries and load programs of a preset."""
    preset = config.preset
    if preset in ("train", "test-id"):
        plan = _POLYNOMIAL_PLAN
    elif preset == "custom" and config.families:
        plan = [(family, config.subset_rule or "") for family in config.families]
    elif preset == "custom":
        plan = _POLYNOMIAL_PLAN
    else:
        plan = _OTHER_FAMILIES_PLAN
    offset = 0 if preset in ("train", "custom") else HELD_OUT_OFFSET

    materials = []
    for i in range(config.materials):
        family, rule = plan[i % len(plan)]
        materials.append((f"m{i:05d}", family, config.subset_rule or rule or None, offset + i))

    unseen = preset in ("test-mgl", "test-mgl+")
    catalog = unseen_geometries(config.h) if unseen else training_geometries(config.h)
    count = config.geometry_count or (len(catalog) if unseen else 7)
    geometries = catalog[:count]

    modes = config.modes or (list(MODE_RATIOS) if unseen else TRAINING_MODES)
    factor = config.magnitude_factor * (1.1 if preset == "test-mgl+" else 1.0)
    programs = [
        LoadProgram(mode=mode, u1_ratio=MODE_RATIOS[mode][0], u2_ratio=MODE_RATIOS[mode][1], steps=config.steps).scaled(factor)
        for mode in modes
    ]
    return DatasetPlan(materials=materials, geometries=geometries, programs=programs)


def make_material(family: MaterialFamily, rule: Optional[str], seed: int, index: int) -> MaterialModel:
    material = sample_material(family, seed, rule, index=index)
    if family is MaterialFamily.POLYNOMIAL:
        material = normalize_polynomial_coefficients(material, seed)
    return material


@dataclass
class SolveJob:
    material_id: str
    material: MaterialModel
    geometry: str
    mesh: Mesh
    program: LoadProgram
    root: Path


@dataclass
class JobResult:
    material_id: str
    geometry: str
    fields: List[FieldEntry]
    error: Optional[str] = None


def solve_job(job: SolveJob) -> JobResult:
    """Runs one (material, geometry, mode) load program and writes its field files."""
    try:
        fields = run_load_program(job.mesh, job.material, job.program)
    except NumericalError as exc:
        logger.error(
            "solve failed material=%s geometry=%s mode=%s reason=%s",
            job.material_id, job.geometry, job.program.mode.value, exc.detail,
        )
        return JobResult(job.material_id, job.geometry, [], error=exc.detail)
    entries = []
    for field in fields:
        relative = Path("fields") / job.material_id / job.geometry / f"{field.mode}-{field.step:02d}.json"
        save_field(job.root / relative, field)
        entries.append(FieldEntry(path=relative.as_posix(), mode=field.mode, step=field.step))
    return JobResult(job.material_id, job.geometry, entries)


def generate_dataset(config: DatagenConfig, root: Path, threads: int = 1) -> Tuple[DatasetManifest, Path]:
    """
    Writes materials, meshes, fields and `manifest.json` under `root`.

    Raises:
        DatasetFailure: if more than settings.DATASET_FAILURE_THRESHOLD of the solves fail.
    """
    plan = build_plan(config)
    root.mkdir(parents=True, exist_ok=True)

    meshes: Dict[str, Mesh] = {}
    for spec in plan.geometries:
        meshes[spec.name] = generate_plate_mesh(spec)
        save_mesh(root / "meshes" / f"{spec.name}.json", meshes[spec.name])

    materials: Dict[str, Tuple[MaterialModel, MaterialFamily]] = {}
    for material_id, family, rule, index in plan.materials:
        materials[material_id] = (make_material(family, rule, config.seed, index), family)
        save_material(root / "materials" / f"{material_id}.json", materials[material_id][0])

    jobs = [
        SolveJob(material_id, materials[material_id][0], spec.name, meshes[spec.name], program, root)
        for material_id, _, _, _ in plan.materials
        for spec in plan.geometries
        for program in plan.programs
    ]
    logger.info("datagen preset=%s materials=%d geometries=%d solves=%d", config.preset, len(materials), len(meshes), len(jobs))
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(solve_job, jobs))
    else:
        results = [solve_job(job) for job in jobs]

    grouped: "OrderedDict[Tuple[str, str], SampleEntry]" = OrderedDict()
    for result in results:
        key = (result.material_id, result.geometry)
        if key not in grouped:
            grouped[key] = SampleEntry(
                material_id=result.material_id,
                material=f"materials/{result.material_id}.json",
                family=materials[result.material_id][1].value,
                geometry=result.geometry,
                mesh=f"meshes/{result.geometry}.json",
            )
        grouped[key].fields.extend(result.fields)

    failed = sum(1 for r in results if r.error is not None)
    manifest = DatasetManifest(
        preset=config.preset,
        seed=config.seed,
        attempted=len(results),
        failed=failed,
        samples=[sample for sample in grouped.values() if sample.fields],
    )
    path = save_manifest(root / "manifest.json", manifest)
    write_meta(path, preset=config.preset, manifest_sha256=file_hash(path))
    logger.info("datagen finished fields=%d failed=%d/%d", manifest.field_count, failed, len(results))

    if results and failed / len(results) > settings.DATASET_FAILURE_THRESHOLD:
        raise DatasetFailure(f"{failed} of {len(results)} solves failed, above the {settings.DATASET_FAILURE_THRESHOLD:.0%} threshold.")
    return manifest, path


@click.command("datagen")
@click.option("--preset", type=click.Choice(["train", "test-id", "test-m", "test-mgl", "test-mgl+", "custom"]), default=None)
@click.option("--materials", type=click.IntRange(min=1), default=None, help="Number of materials to sample.")
@click.option("--geometries", "geometry_count", type=click.IntRange(min=1), default=None, help="Number of plate geometries.")
@click.option("--mode", "modes", type=click.Choice([m.value for m in LoadMode]), multiple=True, help="Loading mode (repeatable).")
@click.option("--steps", type=click.IntRange(min=1), default=None, help="Load steps per program.")
@click.option("--h", type=float, default=None, help="Target element size.")
@click.option("--name", default=None, help="Dataset directory under --out (default: the preset).")
@pass_run
def command(run: RunContext, preset, materials, geometry_count, modes, steps, h, name):
    """
    Generates a synthetic dataset of solved strain fields and its manifest.

    Exits with code 3 when too many solves fail.
    """
    try:
        config = load_config(
            DatagenConfig, run,
            preset=preset, materials=materials, geometry_count=geometry_count,
            modes=list(modes) or None, steps=steps, h=h, name=name,
        )
        root = run.out / (config.name or config.preset)
        _, path = generate_dataset(config, root, threads=run.threads)
        click.echo(str(path))
    except IcmError as e:
        raise e
    except Exception as e:
        raise NumericalError(f"An unexpected error occurred: {e}")
