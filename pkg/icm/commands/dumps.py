import logging

import click
import pandas as pd

from icm.commands.common import RunContext, pass_run, require
from icm.errors import IcmError, InvalidConfiguration, NumericalError
from icm.services.network import field_embeddings
from icm.services.storage import load_icm_checkpoint, load_material_fields, write_csv, write_token_dump
from icm.services.tokenizer import full_context, tokenize_field

logger = logging.getLogger(__name__)


def _material_fields(manifest: str, material_id):
    grouped = load_material_fields(require(manifest, "dataset manifest"))
    chosen = material_id or next(iter(grouped))
    if chosen not in grouped:
        raise InvalidConfiguration(f"Material '{chosen}' is not in the manifest.")
    _, fields = grouped[chosen]
    return chosen, [tokenize_field(mesh, field, k) for k, (mesh, field) in enumerate(fields)]


@click.command("dump-tokens")
@click.option("--manifest", required=True, help="Dataset manifest.")
@click.option("--material-id", default=None)
@pass_run
def dump_tokens(run: RunContext, manifest, material_id):
    """
    Writes every token of one material as a binary ICMT dump.
    """
    try:
        chosen, tokens = _material_fields(manifest, material_id)
        context = full_context(tokens, {"material": chosen})
        path = write_token_dump(run.output(f"{chosen}.icmt"), context)
        logger.info("tokens dumped material=%s tokens=%d", chosen, len(context))
        click.echo(str(path))
    except IcmError as e:
        raise e
    except Exception as e:
        raise NumericalError(f"An unexpected error occurred: {e}")


@click.command("dump-embeddings")
@click.option("--manifest", required=True, help="Dataset manifest.")
@click.option("--checkpoint", required=True, help="ICM checkpoint header (model.json).")
@click.option("--material-id", default=None)
@pass_run
def dump_embeddings(run: RunContext, manifest, checkpoint, material_id):
    """
    Writes the mean final-layer embedding of each field of one material, each field
    encoded as its own context.
    """
    try:
        model, _ = load_icm_checkpoint(require(checkpoint, "checkpoint"))
        chosen, tokens = _material_fields(manifest, material_id)
        embeddings = field_embeddings(model, tokens)
        rows = [{"field_id": k, **{f"e{i}": float(v) for i, v in enumerate(vec)}} for k, vec in sorted(embeddings.items())]
        path = write_csv(run.output(f"{chosen}_embeddings.csv"), pd.DataFrame(rows))
        click.echo(str(path))
    except IcmError as e:
        raise e
    except Exception as e:
        raise NumericalError(f"An unexpected error occurred: {e}")
