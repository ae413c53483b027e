"""Options and helpers shared by the subcommands."""
from pathlib import Path
from typing import Optional

import click
from loguru import logger

from app.core.errors import ConfigError
from app.data.panel import SPLIT_FILE, load_split_spec
from app.models.schemas import SplitSpec
from config.run_config import RunConfig, load_config

RUN_CONFIG_FILE = "run.cfg"
CHECKPOINT_FILE = "checkpoint.safetensors"
TRAINING_LOG_FILE = "training_log.csv"

config_option = click.option(
    "--config", "config_path", type=click.Path(dir_okay=False), default=None,
    help="Run config file (key = value lines).",
)
data_option = click.option(
    "--data", "data_dir", type=click.Path(file_okay=False), required=True,
    help="Dataset directory.",
)
out_option = click.option(
    "--out", "out_dir", type=click.Path(file_okay=False), required=True,
    help="Output directory.",
)
force_option = click.option(
    "--force", is_flag=True, default=False, help="Write into a non-empty output directory."
)
seed_option = click.option(
    "--seed-override", "seed_override", type=int, default=None,
    help="Replace the config seed before digesting.",
)
split_option = click.option(
    "--split", "split_name", type=click.Choice(["train", "val", "test"]), default="test",
    show_default=True, help="Split to evaluate.",
)
checkpoint_option = click.option(
    "--checkpoint", "checkpoint_path", type=click.Path(dir_okay=False), default=None,
    help="Checkpoint written by 'train'.",
)


def resolve_config(
    config_path: Optional[str], seed_override: Optional[int], fallback: Optional[Path] = None
) -> RunConfig:
    """Load the run config; ``fallback`` is used when no path was given and it exists."""
    path: Optional[Path] = Path(config_path) if config_path else None
    if path is None and fallback is not None and fallback.exists():
        path = fallback
        logger.info(f"Using run config {path}")
    return load_config(path, seed=seed_override)


def resolve_split(data_dir: Path, config: RunConfig) -> SplitSpec:
    """Split ranges from the dataset's split.cfg when present, else from the config."""
    sidecar = data_dir / SPLIT_FILE
    if sidecar.exists():
        return load_split_spec(sidecar)
    return config.split_spec()


def prepare_out_dir(out_dir: str, force: bool) -> Path:
    path = Path(out_dir)
    if path.exists() and not path.is_dir():
        raise ConfigError(f"output path {path} is not a directory")
    if path.exists() and any(path.iterdir()) and not force:
        raise ConfigError(f"output directory {path} is not empty (use --force)")
    path.mkdir(parents=True, exist_ok=True)
    return path


def provenance(command: str):
    """Logger bound to the run-provenance sink."""
    return logger.bind(provenance=True, command=command)
