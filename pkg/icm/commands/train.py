import logging

import click

from icm.commands.common import RunContext, load_config, pass_run, require
from icm.errors import IcmError, NumericalError
from icm.services.storage import load_token_dataset, save_checkpoint, write_curve, write_meta
from icm.services.training import TrainConfig, train

logger = logging.getLogger(__name__)


@click.command("train")
@click.option("--dataset", default=None, help="Path to a dataset manifest.json.")
@click.option("--steps", type=click.IntRange(min=1), default=None)
@click.option("--optimizer", type=click.Choice(["adamw", "muon"]), default=None)
@click.option("--lr", "peak_lr", type=float, default=None, help="Peak learning rate.")
@pass_run
def command(run: RunContext, dataset, steps, optimizer, peak_lr):
    """
    Trains the in-context network on a tokenized dataset.

    Writes `model.json`/`model.bin`, periodic checkpoints and `loss.csv` under --out.
    """
    try:
        config = load_config(TrainConfig, run, dataset=dataset, steps=steps, optimizer=optimizer, peak_lr=peak_lr)
        tokens = load_token_dataset(require(config.dataset, "dataset manifest"))

        def checkpoint(step: int, model) -> None:
            save_checkpoint(run.output("checkpoints", f"step-{step:07d}.json"), model, config, "icm")

        result = train(tokens, config, checkpoint_fn=checkpoint)
        path = save_checkpoint(run.output("model.json"), result.model, config, "icm")
        write_meta(path, steps=config.steps, seed=config.seed)
        write_curve(run.output("loss.csv"), result.curve, x="step", y=["loss"], kind="line", title="Training loss")
        final_loss = float(result.curve["loss"].iloc[-1]) if len(result.curve) else float("nan")
        logger.info("training finished steps=%d recorded=%d final_loss=%.6e", config.steps, len(result.curve), final_loss)
        click.echo(str(path))
    except IcmError as e:
        raise e
    except Exception as e:
        raise NumericalError(f"An unexpected error occurred: {e}")
