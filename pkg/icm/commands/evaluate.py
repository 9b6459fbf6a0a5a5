"""
`icm eval`: post-scaled stress errors per material and per test set, the optional
ENN deployment-cost comparison and the test-time context scaling curve.
"""
import logging
import time
from pathlib import Path
from typing import Any, Dict, List, Optional

import click
import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, field_validator

from icm.commands.common import RunContext, load_config, pass_run, predictor_factory, require
from icm.errors import IcmError, NumericalError
from icm.services.enn import ENN_PRESETS, EnnConfig, EnnGradient, enn_train
from icm.services.inference import context_scaling_curve, evaluate_material, field_errors, geometric_mean
from icm.services.storage import load_icm_checkpoint, load_manifest, load_material_fields, write_csv, write_curve, write_meta, write_report

logger = logging.getLogger(__name__)


class EvalConfig(BaseModel):
    checkpoint: Optional[str] = None
    datasets: List[str] = Field(default_factory=list)
    context_fields: Optional[int] = Field(None, ge=1)
    scaling_curve: bool = False
    resamplings: int = Field(5, ge=1)
    enn: bool = False
    enn_preset: str = "tiny"
    enn_steps: int = Field(2000, ge=1)
    enn_materials: int = Field(3, ge=1)
    seed: int = Field(0, ge=0, lt=2**64)

    @field_validator("enn_preset")
    @classmethod
    def _known_preset(cls, value: str) -> str:
        if value not in ENN_PRESETS:
            raise ValueError(f"Unknown ENN preset '{value}'; expected one of {sorted(ENN_PRESETS)}.")
        return value


def _set_name(manifest_path: Path) -> str:
    return f"{load_manifest(manifest_path).preset}:{manifest_path.parent.name}"


def evaluate_dataset(run: RunContext, config: EvalConfig, manifest_path: Path, model) -> Dict[str, Any]:
    per_material: Dict[str, Any] = {}
    for material_id, (material, fields) in load_material_fields(manifest_path).items():
        context_fields = fields[:config.context_fields] if config.context_fields else fields
        try:
            evaluation = evaluate_material(
                material_id, material, context_fields,
                predictor_factory(run, material, model),
                test_fields=fields,
            )
            per_material[material_id] = {
                "S_err": evaluation.S_err,
                "P_err": evaluation.P_err,
                "alpha": evaluation.alpha,
                "CoV": evaluation.coefficient_of_variation,
            }
        except NumericalError as exc:
            logger.warning("evaluation failed material=%s reason=%s", material_id, exc.detail)
            per_material[material_id] = {"S_err": None, "P_err": None, "alpha": None, "CoV": None, "error": exc.detail}

    S = [m["S_err"] for m in per_material.values() if m["S_err"] is not None]
    P = [m["P_err"] for m in per_material.values() if m["P_err"] is not None]
    return {
        "per_material": per_material,
        "aggregates": {
            "S_err_geo_mean": geometric_mean(S),
            "P_err_geo_mean": geometric_mean(P),
            "finite_fraction": len(S) / max(len(per_material), 1),
        },
    }


def deployment_cost(run: RunContext, config: EvalConfig, manifest_path: Path, model) -> pd.DataFrame:
    """Measured ICM inference time against per-material ENN training plus inference."""
    rows = []
    grouped = list(load_material_fields(manifest_path).items())[:config.enn_materials]
    for material_id, (material, fields) in grouped:
        start = time.perf_counter()
        icm = evaluate_material(material_id, material, fields, predictor_factory(run, material, model))
        icm_seconds = time.perf_counter() - start

        start = time.perf_counter()
        enn = enn_train(fields, EnnConfig.preset(config.enn_preset, steps=config.enn_steps, seed=config.seed))
        provider = EnnGradient(enn.model)
        enn_S = float(np.mean([field_errors(mesh, strain, provider, material)[0] for mesh, strain in fields]))
        enn_seconds = time.perf_counter() - start

        rows.append({
            "material_id": material_id,
            "icm_seconds": icm_seconds,
            "icm_S_err": icm.S_err,
            "enn_seconds": enn_seconds,
            "enn_S_err": enn_S,
        })
        logger.info("deployment cost material=%s icm=%.3fs enn=%.3fs", material_id, icm_seconds, enn_seconds)
    return pd.DataFrame(rows, columns=["material_id", "icm_seconds", "icm_S_err", "enn_seconds", "enn_S_err"])


def scaling_curve(run: RunContext, config: EvalConfig, manifest_path: Path, model) -> pd.DataFrame:
    material_id, (material, fields) = next(iter(load_material_fields(manifest_path).items()))
    sizes = sorted({max(1, int(round(s))) for s in np.geomspace(1, len(fields), num=min(len(fields), 6))})
    logger.info("context scaling material=%s prefix_sizes=%s", material_id, sizes)
    return context_scaling_curve(
        fields, material, predictor_factory(run, material, model),
        prefix_sizes=sizes, resamplings=config.resamplings, rng=np.random.default_rng(config.seed),
    )


@click.command("eval")
@click.option("--checkpoint", default=None, help="ICM checkpoint header (model.json).")
@click.option("--dataset", "datasets", multiple=True, help="Test-set manifest (repeatable).")
@click.option("--context-fields", type=click.IntRange(min=1), default=None, help="Use only the first k fields as context.")
@click.option("--scaling-curve", is_flag=True, help="Also emit the context scaling curve.")
@click.option("--enn", is_flag=True, help="Compare against per-material ENN training.")
@pass_run
def command(run: RunContext, checkpoint, datasets, context_fields, scaling_curve, enn):
    """
    Evaluates post-scaled stress errors on one or more test sets.

    Writes `eval_report.json` with per-material S_err, P_err, alpha and CoV and per-set
    geometric means.
    """
    try:
        config = load_config(
            EvalConfig, run,
            checkpoint=checkpoint, datasets=list(datasets) or None,
            context_fields=context_fields, scaling_curve=scaling_curve or None, enn=enn or None,
        )
        model = None if run.oracle else load_icm_checkpoint(require(config.checkpoint, "checkpoint"))[0]
        manifests = [require(path, "dataset manifest") for path in config.datasets]
        if not manifests:
            raise click.UsageError("At least one --dataset is required.")

        report: Dict[str, Any] = {"oracle": run.oracle, "checkpoint": config.checkpoint, "sets": {}}
        for manifest_path in manifests:
            name = _set_name(manifest_path)
            report["sets"][name] = evaluate_dataset(run, config, manifest_path, model)
            logger.info("evaluated set=%s S_err_geo_mean=%.4e", name, report["sets"][name]["aggregates"]["S_err_geo_mean"])

        if config.enn:
            cost = deployment_cost(run, config, manifests[0], model)
            write_csv(run.output("deployment_cost.csv"), cost)
            report["deployment_cost"] = cost.to_dict(orient="records")
        if config.scaling_curve:
            curve = scaling_curve(run, config, manifests[0], model)
            write_curve(run.output("context_scaling.csv"), curve, x="token_count", y=["geo_mean", "q25", "q75"],
                        kind="loglog", title="P_err against context size")

        path = write_report(run.output("eval_report.json"), report)
        write_meta(path)
        click.echo(str(path))
    except (IcmError, click.ClickException) as e:
        raise e
    except Exception as e:
        raise NumericalError(f"An unexpected error occurred: {e}")
