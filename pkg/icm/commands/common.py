import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Type, TypeVar

import click
from pydantic import BaseModel, ValidationError

from config import settings
from icm.errors import InvalidConfiguration, MissingArtifact
from icm.services.materials import GradientProvider, MaterialModel
from icm.services.inference import NetworkPredictor, OraclePredictor, PredictorFactory
from icm.services.network import ICMNetwork

logger = logging.getLogger(__name__)

ConfigT = TypeVar("ConfigT", bound=BaseModel)


@dataclass
class RunContext:
    """Global flags shared by every subcommand."""
    seed: Optional[int] = None
    config_path: Optional[Path] = None
    out: Path = field(default_factory=lambda: Path(settings.OUTPUT_DIR))
    threads: int = settings.THREADS
    oracle: bool = False

    def output(self, *parts: str) -> Path:
        path = self.out.joinpath(*parts)
        path.parent.mkdir(parents=True, exist_ok=True)
        return path


pass_run = click.make_pass_decorator(RunContext, ensure=True)


def load_config(model_cls: Type[ConfigT], run: RunContext, **flags: Any) -> ConfigT:
    """
    Builds a run configuration. Precedence: command-line flags, then the --config file,
    then ICM_* settings, then the model's defaults.

    Raises:
        MissingArtifact: if --config points to a missing file.
        InvalidConfiguration: if the merged values fail validation.
    """
    data: Dict[str, Any] = {}
    if "seed" in model_cls.model_fields:
        data["seed"] = settings.SEED
    if run.config_path is not None:
        path = Path(run.config_path)
        if not path.is_file():
            raise MissingArtifact(str(path), "config file")
        try:
            data.update(json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise InvalidConfiguration(f"Config file '{path}' is not valid JSON: {exc}")
    if run.seed is not None and "seed" in model_cls.model_fields:
        data["seed"] = run.seed
    data.update({name: value for name, value in flags.items() if value is not None})
    try:
        return model_cls.model_validate(data)
    except ValidationError as exc:
        raise InvalidConfiguration(f"Invalid {model_cls.__name__}: {exc}")


def require(path: Optional[str], what: str) -> Path:
    if not path:
        raise InvalidConfiguration(f"A {what} path is required.")
    resolved = Path(path)
    if not resolved.exists():
        raise MissingArtifact(str(resolved), what)
    return resolved


def predictor_factory(run: RunContext, material: MaterialModel, model: Optional[ICMNetwork]) -> PredictorFactory:
    """--oracle swaps the network for the true gradient."""
    if run.oracle:
        return lambda context: OraclePredictor(material)
    if model is None:
        raise InvalidConfiguration("A checkpoint is required unless --oracle is given.")

    def build(context) -> GradientProvider:
        return NetworkPredictor(model, context, chunk=settings.ATTENTION_CHUNK)
    return build
