"""``train``: fit the SDF adversarially and write the best checkpoint."""
from pathlib import Path
from typing import Optional

import click

from app.cli.common import (CHECKPOINT_FILE, RUN_CONFIG_FILE,
                            TRAINING_LOG_FILE, config_option, data_option,
                            force_option, out_option, prepare_out_dir,
                            provenance, resolve_config, resolve_split,
                            seed_option)
from app.core.errors import NumericalError
from app.data.checkpoint import save_checkpoint
from app.data.panel import load_dataset
from app.services.training_service import (build_model, prepare_inputs,
                                           train, write_training_log)
from config.run_config import dump_config


@click.command("train")
@config_option
@data_option
@out_option
@force_option
@seed_option
def train_command(
    config_path: Optional[str],
    data_dir: str,
    out_dir: str,
    force: bool,
    seed_override: Optional[int],
) -> None:
    """Run the minimax training loop and keep the best validation checkpoint."""
    config = resolve_config(config_path, seed_override)
    out = prepare_out_dir(out_dir, force)
    dataset = load_dataset(data_dir)
    spec = resolve_split(Path(data_dir), config)

    inputs = prepare_inputs(dataset, config.feature_config(), spec)
    model = build_model(dataset, config.feature_config(), config.network_config(), inputs["train"])
    (out / RUN_CONFIG_FILE).write_text(dump_config(config), encoding="utf-8")
    try:
        result = train(
            model,
            inputs["train"],
            inputs["val"],
            config.loss_config(),
            config_digest=config.digest,
            data_digest=dataset.digest,
        )
    except NumericalError as e:
        if e.last_good is not None:
            path = out / CHECKPOINT_FILE
            save_checkpoint(e.last_good, path)
            provenance("train").warning(
                f"config={config.digest} data={dataset.digest} diverged; last good "
                f"checkpoint (iteration {e.last_good.iteration}) at {path}"
            )
        raise

    write_training_log(result.history, out / TRAINING_LOG_FILE)
    file_digest = save_checkpoint(result.checkpoint, out / CHECKPOINT_FILE)
    provenance("train").info(
        f"config={config.digest} data={dataset.digest} checkpoint={out / CHECKPOINT_FILE} "
        f"sha256={file_digest} iteration={result.checkpoint.iteration} "
        f"val_loss={result.checkpoint.val_loss}"
    )
    click.echo(
        f"best checkpoint at iteration {result.checkpoint.iteration} "
        f"(val loss {result.checkpoint.val_loss:.6g}), sha256 {file_digest}"
    )
