"""
Pydantic schemas for the adversarial SDF toolkit.

Defines the validated configuration blocks handed to each service and the
report models written by evaluation and attribution.
"""
from enum import Enum
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator


class Channel(str, Enum):
    """Channels of the fused feature vector, in concatenation order."""

    MACRO = "macro"
    FIRM = "firm"
    NEWS = "news"


class EmptyNewsPolicy(str, Enum):
    """How an observation without news sentences gets its news feature."""

    ZERO = "zero"
    CARRY_FORWARD = "carry_forward"


class MissingCharPolicy(str, Enum):
    """How missing firm characteristics are handled before ranking."""

    COMPLETE_CASE = "complete_case"
    MEDIAN_IMPUTE = "median_impute"


class SignalChannel(str, Enum):
    """Where the synthetic generator plants the pricing signal."""

    FIRM = "firm"
    NEWS = "news"
    MACRO = "macro"
    MIXED = "mixed"


class SplitSpec(BaseModel):
    """Closed, ordered, disjoint period ranges for train/validation/test."""

    model_config = ConfigDict(frozen=True)

    train_start: int
    train_end: int
    val_start: int
    val_end: int
    test_start: int
    test_end: int

    @model_validator(mode="after")
    def _check_order(self) -> "SplitSpec":
        for name in ("train", "val", "test"):
            start, end = getattr(self, f"{name}_start"), getattr(self, f"{name}_end")
            if start > end:
                raise ValueError(f"{name} range is empty: {start} > {end}")
        if not self.train_end < self.val_start:
            raise ValueError("train range must end before validation starts")
        if not self.val_end < self.test_start:
            raise ValueError("validation range must end before test starts")
        return self

    def ranges(self) -> Dict[str, Tuple[int, int]]:
        return {
            "train": (self.train_start, self.train_end),
            "val": (self.val_start, self.val_end),
            "test": (self.test_start, self.test_end),
        }


class FeatureConfig(BaseModel):
    """Dimensions and policies of the feature pipeline."""

    model_config = ConfigDict(frozen=True)

    d_a: int = Field(64, ge=1)
    d_I: int = Field(16, ge=1)  # pylint: disable=invalid-name
    d_N: int = Field(8, ge=1)  # pylint: disable=invalid-name
    window_K: int = Field(12, ge=0)  # pylint: disable=invalid-name
    empty_news_policy: EmptyNewsPolicy = EmptyNewsPolicy.ZERO
    missing_char_policy: MissingCharPolicy = MissingCharPolicy.COMPLETE_CASE
    ablate_channels: Tuple[Channel, ...] = ()


class NetworkConfig(BaseModel):
    """Widths of the SDF and conditional networks."""

    model_config = ConfigDict(frozen=True)

    h1: int = Field(64, ge=1)
    h2: int = Field(32, ge=1)
    h3: int = Field(16, ge=1)
    h_g: int = Field(32, ge=1)
    d_g: int = Field(8, ge=1)
    instrument_squash: bool = True
    init_seed: int = 0


class LossConfig(BaseModel):
    """Objective and optimizer settings of the minimax trainer."""

    model_config = ConfigDict(frozen=True)

    l2_lambda: float = Field(1e-3, ge=0)
    lr_phi: float = Field(1e-3, ge=0)
    lr_psi: float = Field(1e-3, ge=0)
    batch_periods: int = Field(4, ge=1)
    iterations: int = Field(20000, ge=0)
    eval_interval: int = Field(200, ge=1)
    patience: int = Field(20, ge=1)
    optimizer: str = Field("sgd", pattern="^(sgd|adam)$")
    psi_steps: int = Field(1, ge=1)
    phi_steps: int = Field(1, ge=1)
    reuse_forward: bool = False
    seed: int = 0


class SynthConfig(BaseModel):
    """Synthetic panel with a planted pricing kernel."""

    model_config = ConfigDict(frozen=True)

    n_assets: int = Field(50, ge=1)
    n_periods: int = Field(350, ge=1)
    d_F: int = Field(4, ge=1)  # pylint: disable=invalid-name
    d_macro: int = Field(3, ge=1)
    d_emb: int = Field(32, ge=1)
    sentences_min: int = Field(1, ge=0)
    sentences_max: int = Field(4, ge=0)
    window_K: int = Field(12, ge=0)  # pylint: disable=invalid-name
    d_N: int = Field(8, ge=1)  # pylint: disable=invalid-name
    signal: SignalChannel = SignalChannel.MIXED
    scenario: str = Field("default", pattern="^(default|monotone)$")
    firm_coefficients: Tuple[float, ...] = (0.5, -0.3)
    news_coefficient: float = 0.5
    macro_coefficient: float = 0.3
    base_loading: float = 1.0
    factor_mean: float = 0.01
    factor_vol: float = Field(0.04, ge=0)
    noise_std: float = Field(0.03, ge=0)
    news_strength: float = Field(1.0, ge=0)
    embedding_noise: float = Field(0.3, ge=0)
    char_persistence: float = Field(0.9, ge=0, lt=1)
    macro_persistence: float = Field(0.8, ge=0, lt=1)
    seed: int = 0

    @model_validator(mode="after")
    def _check_feasible(self) -> "SynthConfig":
        if self.sentences_min > self.sentences_max:
            raise ValueError("sentences_min exceeds sentences_max")
        if self.d_N > self.d_emb:
            raise ValueError(f"d_N={self.d_N} exceeds d_emb={self.d_emb}")
        if len(self.firm_coefficients) > self.d_F:
            raise ValueError("more firm coefficients than characteristics")
        return self


class MetricsReport(BaseModel):
    """Evaluation metrics of one SDF on one split."""

    name: str
    split: str
    sharpe: Optional[float] = None
    sharpe_error: Optional[str] = None
    ev: Optional[float] = None
    xs_r2: Optional[float] = None
    mspe: Optional[float] = None
    metric_errors: Dict[str, str] = {}
    decile_mean_returns: List[float] = []
    decile_cumulative_returns: List[float] = []
    monotonicity: Optional[float] = None
    n_periods: int = 0
    n_observations: int = 0
    beta_window: int = 60
    first_period: Optional[int] = None
    last_period: Optional[int] = None
    period_labels: Dict[str, str] = {}
    config_digest: str = ""
    data_digest: str = ""
    baselines: Dict[str, "MetricsReport"] = {}


class SensitivityReport(BaseModel):
    """Mean absolute input gradient of the SDF weight per fused feature."""

    feature_names: List[str]
    sensitivity: List[float]
    n_samples: int
    config_digest: str = ""

    @model_validator(mode="after")
    def _check(self) -> "SensitivityReport":
        if len(self.feature_names) != len(self.sensitivity):
            raise ValueError("feature_names and sensitivity differ in length")
        if any(s < 0 for s in self.sensitivity):
            raise ValueError("sensitivities must be nonnegative")
        return self


class ShapleyReport(BaseModel):
    """Normalized Shapley importance per feature group and period bucket."""

    groups: List[str]
    buckets: List[str]
    importance: List[List[float]]  # [bucket][group]
    raw_values: List[List[float]]
    standard_errors: List[List[float]]
    permutations: int
    exact: bool
    seed: int
    config_digest: str = ""


MetricsReport.model_rebuild()
