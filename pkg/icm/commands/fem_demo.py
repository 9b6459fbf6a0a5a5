import logging
import warnings
from typing import Optional

import click
import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from icm.commands.common import RunContext, load_config, pass_run, predictor_factory, require
from icm.errors import ExtrapolationWarning, IcmError, InvalidConfiguration, NumericalError
from icm.services.discretization import GeometrySpec, deformation_gradients, generate_plate_mesh, training_geometries, unseen_geometries
from icm.services.inference import post_scale, scaled_predictor
from icm.services.materials import stress_from_gradient, invariants_from_F
from icm.services.solver import LoadMode, LoadProgram, displacement_error, icm_driven_fem, run_load_program
from icm.services.storage import load_icm_checkpoint, load_material_fields, write_csv, write_meta, write_report
from icm.services.tokenizer import full_context, tokenize_field

logger = logging.getLogger(__name__)


class FemDemoConfig(BaseModel):
    checkpoint: Optional[str] = None
    context: Optional[str] = None
    material_id: Optional[str] = None
    geometry: str = "unseen-01"
    h: float = Field(0.1, gt=0)
    mode: LoadMode = LoadMode.UNIAXIAL
    u1_ratio: float = 0.3
    u2_ratio: float = 0.0
    steps: int = Field(5, ge=1)


def _geometry(name: str, h: float) -> GeometrySpec:
    for spec in training_geometries(h) + unseen_geometries(h):
        if spec.name == name:
            return spec
    raise InvalidConfiguration(f"Unknown geometry '{name}'.")


def _von_mises(S: np.ndarray) -> np.ndarray:
    s11, s22, s12 = S[:, 0, 0], S[:, 1, 1], S[:, 0, 1]
    return np.sqrt(s11 ** 2 - s11 * s22 + s22 ** 2 + 3.0 * s12 ** 2)


@click.command("fem-demo")
@click.option("--checkpoint", default=None, help="ICM checkpoint header (model.json).")
@click.option("--context", default=None, help="Manifest whose fields form the context.")
@click.option("--material-id", default=None)
@click.option("--geometry", default=None, help="Geometry name, e.g. unseen-01.")
@click.option("--u1-ratio", type=float, default=None)
@click.option("--steps", type=click.IntRange(min=1), default=None)
@pass_run
def command(run: RunContext, checkpoint, context, material_id, geometry, u1_ratio, steps):
    """
    Runs a forward simulation with the in-context constitutive law and with the true
    material, and writes both displacement and stress fields for comparison.
    """
    try:
        config = load_config(
            FemDemoConfig, run,
            checkpoint=checkpoint, context=context, material_id=material_id,
            geometry=geometry, u1_ratio=u1_ratio, steps=steps,
        )
        grouped = load_material_fields(require(config.context, "context manifest"))
        chosen = config.material_id or next(iter(grouped))
        if chosen not in grouped:
            raise InvalidConfiguration(f"Material '{chosen}' is not in the context manifest.")
        material, fields = grouped[chosen]

        model = None if run.oracle else load_icm_checkpoint(require(config.checkpoint, "checkpoint"))[0]
        ctx = full_context([tokenize_field(mesh, field, k) for k, (mesh, field) in enumerate(fields)], {"material": chosen})
        predictor = predictor_factory(run, material, model)(ctx)
        provider = scaled_predictor(predictor, post_scale(predictor, fields))

        mesh = generate_plate_mesh(_geometry(config.geometry, config.h))
        program = LoadProgram(mode=config.mode, u1_ratio=config.u1_ratio, u2_ratio=config.u2_ratio, steps=config.steps)
        reference = run_load_program(mesh, material, program)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", ExtrapolationWarning)
            simulated = icm_driven_fem(mesh, provider, program, covered_range=ctx.invariant_range())
        extrapolated = any(issubclass(w.category, ExtrapolationWarning) for w in caught)
        if extrapolated:
            logger.warning("fem demo queried invariants outside the context range")

        u_icm, u_true = simulated[-1].displacements, reference[-1].displacements
        nodal_error = float(np.max(np.linalg.norm(u_icm - u_true, axis=1)) / max(np.max(np.linalg.norm(u_true, axis=1)), 1e-300))
        write_csv(run.output("fem_displacements.csv"), pd.DataFrame({
            "x": mesh.nodes[:, 0], "y": mesh.nodes[:, 1],
            "u1_icm": u_icm[:, 0], "u2_icm": u_icm[:, 1],
            "u1_true": u_true[:, 0], "u2_true": u_true[:, 1],
        }))

        F_icm, F_true = deformation_gradients(mesh, u_icm), deformation_gradients(mesh, u_true)
        S_icm = stress_from_gradient(F_icm, provider.gradient(invariants_from_F(F_icm))).values
        S_true = stress_from_gradient(F_true, material.gradient(invariants_from_F(F_true))).values
        centroids = mesh.nodes[mesh.triangles].mean(axis=1)
        write_csv(run.output("fem_stress.csv"), pd.DataFrame({
            "x": centroids[:, 0], "y": centroids[:, 1],
            "von_mises_icm": _von_mises(S_icm), "von_mises_true": _von_mises(S_true),
        }))

        path = write_report(run.output("fem_demo_report.json"), {
            "material_id": chosen,
            "geometry": config.geometry,
            "max_nodal_relative_error": nodal_error,
            "displacement_error": displacement_error(simulated, reference),
            "extrapolated": extrapolated,
            "oracle": run.oracle,
        })
        write_meta(path)
        logger.info("fem demo material=%s geometry=%s max_nodal_error=%.3e", chosen, config.geometry, nodal_error)
        click.echo(str(path))
    except IcmError as e:
        raise e
    except Exception as e:
        raise NumericalError(f"An unexpected error occurred: {e}")
