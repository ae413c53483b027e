"""
Run configuration: every key that changes a model, a dataset or a report.

Config files are line based, ``key = value`` with ``#`` comments. Lists are
written comma separated. Unknown keys are rejected. The digest is a SHA-256
over the canonical JSON dump, so it does not depend on key order in the file.
"""
import hashlib
import json
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

from pydantic import (BaseModel, ConfigDict, Field, ValidationError,
                      field_validator, model_validator)

from app.core.errors import ConfigError
from app.models.schemas import (Channel, EmptyNewsPolicy, FeatureConfig,
                                LossConfig, MissingCharPolicy, NetworkConfig,
                                SignalChannel, SplitSpec, SynthConfig)
from app.utils.seeding import derived_seed

_LIST_KEYS = ("ablate_channels", "synth_firm_coefficients")
MONOTONE_PRESET = {"synth_factor_mean": 0.02, "synth_factor_vol": 0.01, "synth_noise_std": 0.005}


class RunConfig(BaseModel):
    """All module configuration keys of one reproducible run."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    # Randomness
    seed: int = 7
    init_seed: Optional[int] = None

    # Feature pipeline
    d_a: int = Field(64, ge=1)
    d_I: int = Field(16, ge=1)  # pylint: disable=invalid-name
    d_N: int = Field(8, ge=1)  # pylint: disable=invalid-name
    window_K: int = Field(12, ge=0)  # pylint: disable=invalid-name
    empty_news_policy: EmptyNewsPolicy = EmptyNewsPolicy.ZERO
    missing_char_policy: MissingCharPolicy = MissingCharPolicy.COMPLETE_CASE
    ablate_channels: List[Channel] = []

    # Networks
    h1: int = Field(64, ge=1)
    h2: int = Field(32, ge=1)
    h3: int = Field(16, ge=1)
    h_g: int = Field(32, ge=1)
    d_g: int = Field(8, ge=1)
    instrument_squash: bool = True

    # Adversarial training
    l2_lambda: float = Field(1e-3, ge=0)
    lr_phi: float = Field(1e-3, ge=0)
    lr_psi: float = Field(1e-3, ge=0)
    batch_periods: int = Field(4, ge=1)
    iterations: int = Field(20000, ge=0)
    eval_interval: int = Field(200, ge=1)
    patience: int = Field(20, ge=1)
    optimizer: Literal["sgd", "adam"] = "sgd"
    psi_steps: int = Field(1, ge=1)
    phi_steps: int = Field(1, ge=1)
    reuse_forward: bool = False

    # Evaluation
    beta_window: int = Field(60, ge=2)
    periods_per_year: int = Field(12, ge=1)

    # Attribution
    shapley_permutations: int = Field(200, ge=1)
    shapley_buckets: int = Field(1, ge=1)
    sensitivity_samples: int = Field(0, ge=0)
    n_jobs: int = 1

    # Chronological split (closed ranges)
    train_start: int = 1
    train_end: int = 200
    val_start: int = 201
    val_end: int = 250
    test_start: int = 251
    test_end: int = 350

    # Synthetic generator
    synth_assets: int = Field(50, ge=1)
    synth_periods: int = Field(350, ge=1)
    synth_chars: int = Field(4, ge=1)
    synth_macro: int = Field(3, ge=1)
    synth_emb_dim: int = Field(32, ge=1)
    synth_sentences_min: int = Field(1, ge=0)
    synth_sentences_max: int = Field(4, ge=0)
    synth_signal: SignalChannel = SignalChannel.MIXED
    synth_scenario: Literal["default", "monotone"] = "default"
    synth_firm_coefficients: List[float] = [0.5, -0.3]
    synth_news_coefficient: float = 0.5
    synth_macro_coefficient: float = 0.3
    synth_factor_mean: float = 0.01
    synth_factor_vol: float = Field(0.04, ge=0)
    synth_noise_std: float = Field(0.03, ge=0)

    @model_validator(mode="before")
    @classmethod
    def _monotone_preset(cls, values: Any) -> Any:
        """Fill the scales the monotone scenario fixes; reject conflicting explicit values."""
        if not isinstance(values, dict) or values.get("synth_scenario") != "monotone":
            return values
        values = dict(values)
        for key, preset in MONOTONE_PRESET.items():
            if key not in values:
                values[key] = preset
                continue
            try:
                explicit = float(values[key])
            except (TypeError, ValueError):
                continue
            if explicit != preset:
                raise ValueError(
                    f"{key} = {values[key]} conflicts with synth_scenario = monotone, "
                    f"which fixes it at {preset}"
                )
        return values

    @field_validator(*_LIST_KEYS, mode="before")
    @classmethod
    def _split_list(cls, value: Any) -> Any:
        if isinstance(value, str):
            return [item.strip() for item in value.split(",") if item.strip()]
        return value

    # -- derived blocks ------------------------------------------------------

    @property
    def digest(self) -> str:
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def split_spec(self) -> SplitSpec:
        try:
            return SplitSpec(
                train_start=self.train_start,
                train_end=self.train_end,
                val_start=self.val_start,
                val_end=self.val_end,
                test_start=self.test_start,
                test_end=self.test_end,
            )
        except ValidationError as e:
            raise ConfigError(f"invalid split: {_first_message(e)}") from e

    def feature_config(self) -> FeatureConfig:
        return FeatureConfig(
            d_a=self.d_a,
            d_I=self.d_I,
            d_N=self.d_N,
            window_K=self.window_K,
            empty_news_policy=self.empty_news_policy,
            missing_char_policy=self.missing_char_policy,
            ablate_channels=tuple(self.ablate_channels),
        )

    def network_config(self) -> NetworkConfig:
        init_seed = (
            self.init_seed
            if self.init_seed is not None
            else derived_seed(self.seed, "init") % 2**31
        )
        return NetworkConfig(
            h1=self.h1,
            h2=self.h2,
            h3=self.h3,
            h_g=self.h_g,
            d_g=self.d_g,
            instrument_squash=self.instrument_squash,
            init_seed=init_seed,
        )

    def loss_config(self) -> LossConfig:
        return LossConfig(
            l2_lambda=self.l2_lambda,
            lr_phi=self.lr_phi,
            lr_psi=self.lr_psi,
            batch_periods=self.batch_periods,
            iterations=self.iterations,
            eval_interval=self.eval_interval,
            patience=self.patience,
            optimizer=self.optimizer,
            psi_steps=self.psi_steps,
            phi_steps=self.phi_steps,
            reuse_forward=self.reuse_forward,
            seed=self.seed,
        )

    def synth_config(self) -> SynthConfig:
        try:
            return SynthConfig(
                n_assets=self.synth_assets,
                n_periods=self.synth_periods,
                d_F=self.synth_chars,
                d_macro=self.synth_macro,
                d_emb=self.synth_emb_dim,
                sentences_min=self.synth_sentences_min,
                sentences_max=self.synth_sentences_max,
                window_K=self.window_K,
                d_N=self.d_N,
                signal=self.synth_signal,
                scenario=self.synth_scenario,
                firm_coefficients=tuple(self.synth_firm_coefficients),
                news_coefficient=self.synth_news_coefficient,
                macro_coefficient=self.synth_macro_coefficient,
                factor_mean=self.synth_factor_mean,
                factor_vol=self.synth_factor_vol,
                noise_std=self.synth_noise_std,
                seed=self.seed,
            )
        except ValidationError as e:
            raise ConfigError(f"infeasible synthetic config: {_first_message(e)}") from e

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        values = self.model_dump(exclude_unset=True)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return build_config(values)


def _first_message(error: ValidationError) -> str:
    first = error.errors()[0]
    loc = ".".join(str(part) for part in first.get("loc", ()))
    return f"{loc}: {first['msg']}" if loc else first["msg"]


def build_config(values: Dict[str, Any]) -> RunConfig:
    """Validate raw key/value pairs, naming the offending key on failure."""
    try:
        return RunConfig(**values)
    except ValidationError as e:
        first = e.errors()[0]
        key = ".".join(str(part) for part in first.get("loc", ()))
        if first["type"] == "extra_forbidden":
            raise ConfigError(f"unknown config key '{key}'") from e
        if not key:
            raise ConfigError(f"invalid config: {first['msg']}") from e
        raise ConfigError(f"invalid value for config key '{key}': {first['msg']}") from e


def parse_key_values(text: str, source: str = "<config>") -> Dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got '{raw.strip()}'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key '{key}'")
        values[key] = value
    return values


def load_config(path: Optional[Union[str, Path]] = None, **overrides: Any) -> RunConfig:
    """Load a run config file (defaults when ``path`` is None)."""
    values: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        values.update(parse_key_values(path.read_text(encoding="utf-8"), str(path)))
    values.update({k: v for k, v in overrides.items() if v is not None})
    return build_config(values)


def dump_config(config: RunConfig) -> str:
    """Render ``config`` in the key = value format, keys sorted."""
    lines = [f"# config digest {config.digest}"]
    for key, value in sorted(config.model_dump(mode="json").items()):
        if value is None:
            continue
        if isinstance(value, list):
            value = ", ".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
