"""Shared fixtures: tiny run configs, synthetic datasets and built models."""
from pathlib import Path
from typing import Any, Dict

import numpy as np
import pytest
import torch
from loguru import logger

from app.data.panel import Dataset
from app.services.synth_service import SyntheticData, generate, to_dataset
from app.services.training_service import build_model, prepare_inputs
from config.run_config import RunConfig, build_config
from config.settings import settings

TINY_KEYS: Dict[str, Any] = {
    "seed": 3,
    "d_a": 3,
    "d_I": 2,
    "d_N": 2,
    "window_K": 2,
    "h1": 5,
    "h2": 4,
    "h3": 3,
    "h_g": 4,
    "d_g": 2,
    "iterations": 4,
    "eval_interval": 2,
    "batch_periods": 2,
    "beta_window": 4,
    "synth_assets": 12,
    "synth_periods": 24,
    "synth_chars": 2,
    "synth_macro": 2,
    "synth_emb_dim": 4,
    "synth_sentences_min": 0,
    "synth_sentences_max": 3,
    "train_start": 1,
    "train_end": 12,
    "val_start": 13,
    "val_end": 18,
    "test_start": 19,
    "test_end": 24,
}


def tiny_config(**overrides: Any) -> RunConfig:
    values = dict(TINY_KEYS)
    values.update(overrides)
    return build_config(values)


def write_config(path: Path, config_keys: Dict[str, Any]) -> Path:
    lines = []
    for key, value in config_keys.items():
        if isinstance(value, (list, tuple)):
            value = ", ".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


@pytest.fixture(autouse=True, scope="session")
def quiet_logging(tmp_path_factory):
    """Keep test runs off the console and out of ./logs."""
    log_dir = tmp_path_factory.mktemp("logs")
    settings.debug = False
    settings.log_file = str(log_dir / "sdf.log")
    settings.provenance_log = str(log_dir / "provenance.log")
    logger.remove()
    yield


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_run_config() -> RunConfig:
    return tiny_config()


@pytest.fixture
def tiny_synth(tiny_run_config) -> SyntheticData:
    return generate(tiny_run_config.synth_config())


@pytest.fixture
def tiny_dataset(tiny_synth) -> Dataset:
    return to_dataset(tiny_synth)


@pytest.fixture
def tiny_inputs(tiny_dataset, tiny_run_config):
    return prepare_inputs(
        tiny_dataset, tiny_run_config.feature_config(), tiny_run_config.split_spec()
    )


@pytest.fixture
def tiny_model(tiny_dataset, tiny_run_config, tiny_inputs):
    return build_model(
        tiny_dataset,
        tiny_run_config.feature_config(),
        tiny_run_config.network_config(),
        tiny_inputs["train"],
    )


@pytest.fixture
def micro_setup():
    """3 assets x 4 periods with every channel active."""
    config = tiny_config(
        synth_assets=3,
        synth_periods=4,
        synth_sentences_min=1,
        train_start=1,
        train_end=4,
        val_start=5,
        val_end=5,
        test_start=6,
        test_end=6,
    )
    data = generate(config.synth_config())
    dataset = to_dataset(data)
    from app.services.feature_service import build_inputs  # pylint: disable=import-outside-toplevel

    inputs = build_inputs(dataset.panel, dataset.macro, dataset.embeddings, config.feature_config())
    model = build_model(dataset, config.feature_config(), config.network_config(), inputs)
    return config, model, inputs


def zero_parameters(module: torch.nn.Module) -> None:
    with torch.no_grad():
        for param in module.parameters():
            param.zero_()
