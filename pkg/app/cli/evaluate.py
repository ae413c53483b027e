"""``eval``: metrics report and plot data for a checkpoint or the planted oracle."""
from pathlib import Path
from typing import Optional

import click

from app.cli.common import (RUN_CONFIG_FILE, checkpoint_option, config_option,
                            data_option, force_option, out_option,
                            prepare_out_dir, provenance, resolve_config,
                            resolve_split, seed_option, split_option)
from app.core.errors import CheckpointError, ConfigError
from app.data.checkpoint import load_checkpoint
from app.data.panel import load_dataset
from app.services.evaluation_service import (attach_labels, evaluate_model,
                                             write_evaluation)
from app.services.synth_service import ORACLE_FILE, load_oracle, oracle_evaluation
from app.services.training_service import restore_model


def load_verified_checkpoint(
    checkpoint_path: str, config_digest: str, data_digest: str, allow_mismatch: bool
):
    """Load a checkpoint, refusing config or data digest mismatches unless allowed."""
    expected = None if allow_mismatch else config_digest
    checkpoint = load_checkpoint(checkpoint_path, expected_config_digest=expected)
    if checkpoint.data_digest != data_digest:
        message = (
            f"{checkpoint_path}: data digest mismatch: checkpoint {checkpoint.data_digest}, "
            f"dataset {data_digest}"
        )
        if not allow_mismatch:
            raise CheckpointError(message)
        provenance("eval").warning(f"{message} (allowed)")
    return checkpoint


@click.command("eval")
@checkpoint_option
@config_option
@data_option
@out_option
@split_option
@force_option
@seed_option
@click.option("--oracle", is_flag=True, default=False, help="Evaluate the planted kernel.")
@click.option(
    "--allow-digest-mismatch", is_flag=True, default=False,
    help="Evaluate even if the checkpoint was trained on another config or dataset.",
)
def eval_command(
    checkpoint_path: Optional[str],
    config_path: Optional[str],
    data_dir: str,
    out_dir: str,
    split_name: str,
    force: bool,
    seed_override: Optional[int],
    oracle: bool,
    allow_digest_mismatch: bool,
) -> None:
    """Evaluate pricing metrics and beta deciles on one split."""
    if not oracle and checkpoint_path is None:
        raise ConfigError("eval needs --checkpoint unless --oracle is given")
    fallback = Path(checkpoint_path).parent / RUN_CONFIG_FILE if checkpoint_path else None
    config = resolve_config(config_path, seed_override, fallback=fallback)
    out = prepare_out_dir(out_dir, force)
    dataset = load_dataset(data_dir)
    spec = resolve_split(Path(data_dir), config)

    if oracle:
        truth = load_oracle(Path(data_dir) / ORACLE_FILE)
        evaluation = oracle_evaluation(
            truth,
            dataset.panel,
            spec.ranges()[split_name],
            split_name,
            config.beta_window,
            config.periods_per_year,
        )
        attach_labels(evaluation.report, dataset.period_labels)
    else:
        checkpoint = load_verified_checkpoint(
            checkpoint_path, config.digest, dataset.digest, allow_digest_mismatch
        )
        model = restore_model(checkpoint)
        evaluation = evaluate_model(
            model, dataset, spec, split_name, config.beta_window, config.periods_per_year
        )

    evaluation.report.config_digest = config.digest
    evaluation.report.data_digest = dataset.digest
    for baseline in evaluation.report.baselines.values():
        baseline.config_digest = config.digest
        baseline.data_digest = dataset.digest
    paths = write_evaluation(evaluation, out)
    provenance("eval").info(
        f"config={config.digest} data={dataset.digest} split={split_name} "
        f"source={'oracle' if oracle else checkpoint_path} report={paths['report']}"
    )
    report = evaluation.report
    click.echo(
        f"{report.name}/{split_name}: sharpe={report.sharpe} ev={report.ev} "
        f"xs_r2={report.xs_r2} mspe={report.mspe} monotonicity={report.monotonicity}"
    )
