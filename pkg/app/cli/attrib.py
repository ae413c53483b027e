"""``attrib``: feature sensitivity or Shapley importance of a checkpoint."""
from pathlib import Path
from typing import Optional

import click

from app.cli.common import (RUN_CONFIG_FILE, checkpoint_option, config_option,
                            data_option, force_option, out_option,
                            prepare_out_dir, provenance, resolve_config,
                            resolve_split, seed_option, split_option)
from app.cli.evaluate import load_verified_checkpoint
from app.core.errors import ConfigError
from app.data.panel import load_dataset
from app.services.attribution_service import (model_sensitivity,
                                              shapley_importance,
                                              write_sensitivity, write_shapley)
from app.services.feature_service import build_inputs
from app.services.training_service import restore_model


@click.command("attrib")
@checkpoint_option
@config_option
@data_option
@out_option
@split_option
@force_option
@seed_option
@click.option(
    "--mode", type=click.Choice(["sensitivity", "shapley"]), default="sensitivity",
    show_default=True,
)
@click.option("--allow-digest-mismatch", is_flag=True, default=False)
def attrib_command(
    checkpoint_path: Optional[str],
    config_path: Optional[str],
    data_dir: str,
    out_dir: str,
    split_name: str,
    force: bool,
    seed_override: Optional[int],
    mode: str,
    allow_digest_mismatch: bool,
) -> None:
    """Attribute the SDF weight map to its input features."""
    if checkpoint_path is None:
        raise ConfigError("attrib needs --checkpoint")
    config = resolve_config(
        config_path, seed_override, fallback=Path(checkpoint_path).parent / RUN_CONFIG_FILE
    )
    out = prepare_out_dir(out_dir, force)
    dataset = load_dataset(data_dir)
    spec = resolve_split(Path(data_dir), config)
    checkpoint = load_verified_checkpoint(
        checkpoint_path, config.digest, dataset.digest, allow_digest_mismatch
    )
    model = restore_model(checkpoint)

    lo, hi = spec.ranges()[split_name]
    inputs = build_inputs(
        dataset.panel.select_periods(lo, hi), dataset.macro, dataset.embeddings,
        model.feature_config,
    )

    if mode == "sensitivity":
        report = model_sensitivity(
            model, inputs, config.sensitivity_samples, config.seed, config.digest
        )
        path = out / "sensitivity.csv"
        write_sensitivity(report, path, config.seed)
    else:
        report = shapley_importance(
            model,
            inputs,
            permutations=config.shapley_permutations,
            seed=config.seed,
            n_buckets=config.shapley_buckets,
            n_jobs=config.n_jobs,
            config_digest=config.digest,
        )
        path = out / "shapley.csv"
        write_shapley(report, path)
    (out / f"{mode}.json").write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")

    provenance("attrib").info(
        f"config={config.digest} data={dataset.digest} mode={mode} split={split_name} out={path}"
    )
    click.echo(f"wrote {mode} attribution to {path}")
