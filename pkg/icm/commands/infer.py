import logging
from pathlib import Path
from typing import Optional, Tuple

import click
import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from icm.commands.common import RunContext, load_config, pass_run, predictor_factory, require
from icm.errors import IcmError, InvalidConfiguration, NumericalError
from icm.services.inference import post_scale, predict_stress, uniaxial_stress_curve
from icm.services.storage import load_icm_checkpoint, load_material_fields, write_csv, write_curve, write_meta, write_report
from icm.services.tokenizer import full_context, tokenize_field

logger = logging.getLogger(__name__)

QUERY_COLUMNS = ["F11", "F12", "F21", "F22"]


class InferConfig(BaseModel):
    checkpoint: Optional[str] = None
    context: Optional[str] = None
    material_id: Optional[str] = None
    context_fields: Optional[int] = Field(None, ge=1)
    queries: Optional[str] = None
    stretch_range: Tuple[float, float] = (1.0, 1.5)
    stretch_count: int = Field(26, ge=2)


@click.command("infer")
@click.option("--checkpoint", default=None, help="ICM checkpoint header (model.json).")
@click.option("--context", default=None, help="Manifest whose fields form the context.")
@click.option("--material-id", default=None, help="Material of the manifest to use (default: the first).")
@click.option("--context-fields", type=click.IntRange(min=1), default=None, help="Use only the first k fields.")
@click.option("--queries", default=None, help="CSV of deformation gradients with columns F11,F12,F21,F22.")
@pass_run
def command(run: RunContext, checkpoint, context, material_id, context_fields, queries):
    """
    Predicts stresses for a context and emits CSVs.

    Always writes the uniaxial P-lambda curve (`uniaxial_curve.csv`, with the true
    curve alongside); with --queries also writes S and P for every query row.
    """
    try:
        config = load_config(
            InferConfig, run,
            checkpoint=checkpoint, context=context, material_id=material_id,
            context_fields=context_fields, queries=queries,
        )
        grouped = load_material_fields(require(config.context, "context manifest"))
        chosen = config.material_id or next(iter(grouped))
        if chosen not in grouped:
            raise InvalidConfiguration(f"Material '{chosen}' is not in the context manifest.")
        material, fields = grouped[chosen]
        fields = fields[:config.context_fields] if config.context_fields else fields

        model = None if run.oracle else load_icm_checkpoint(require(config.checkpoint, "checkpoint"))[0]
        ctx = full_context([tokenize_field(mesh, field, k) for k, (mesh, field) in enumerate(fields)], {"material": chosen})
        predictor = predictor_factory(run, material, model)(ctx)
        scaling = post_scale(predictor, fields)
        logger.info("inference material=%s tokens=%d alpha=%.6e cov=%.3e", chosen, len(ctx), scaling.alpha, scaling.coefficient_of_variation)

        stretches = np.linspace(*config.stretch_range, config.stretch_count)
        predicted = uniaxial_stress_curve(predictor, stretches, alpha=scaling.alpha)
        truth = uniaxial_stress_curve(material, stretches)
        curve = predicted.assign(P11_true=truth["P11"], transverse_true=truth["transverse"])
        write_curve(run.output("uniaxial_curve.csv"), curve, x="stretch", y=["P11", "P11_true"], title=f"Uniaxial P-lambda, {chosen}")

        if config.queries:
            frame = pd.read_csv(require(config.queries, "query file"))
            missing = [c for c in QUERY_COLUMNS if c not in frame.columns]
            if missing:
                raise InvalidConfiguration(f"Query file lacks columns {missing}.")
            F = frame[QUERY_COLUMNS].to_numpy(dtype=float).reshape(-1, 2, 2)
            S = predict_stress(predictor, scaling.alpha, F, kind="S").values.reshape(-1, 4)
            P = predict_stress(predictor, scaling.alpha, F, kind="P").values.reshape(-1, 4)
            out = frame[QUERY_COLUMNS].copy()
            for k, name in enumerate(["11", "12", "21", "22"]):
                out[f"S{name}"] = S[:, k]
                out[f"P{name}"] = P[:, k]
            write_csv(run.output("query_stress.csv"), out)

        path = write_report(run.output("infer_report.json"), {
            "material_id": chosen,
            "tokens": len(ctx),
            "alpha": scaling.alpha,
            "CoV": scaling.coefficient_of_variation,
            "oracle": run.oracle,
        })
        write_meta(path)
        click.echo(str(Path(path)))
    except IcmError as e:
        raise e
    except Exception as e:
        raise NumericalError(f"An unexpected error occurred: {e}")
