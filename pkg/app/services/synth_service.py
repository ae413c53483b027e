"""
Synthetic panel generator with a planted pricing kernel.

Returns follow a one-factor model with loadings driven by the features:

    R_{t+1,i} = beta_{t,i} f_{t+1} + sigma_e e_{t+1,i},   f = mu_f + sigma_f z

and the planted weights w*_{t,i} = kappa_t beta_{t,i}, with

    kappa_t = mu_f / (sigma_e^2 + (mu_f^2 + sigma_f^2) sum_i beta_{t,i}^2),

make M* = 1 - sum_i w* R satisfy E_t[M* R_{t+1,i}] = 0 exactly. A latent
scalar per (t, i) enters the sentence embeddings along a fixed unit direction.
"""
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Tuple, Union

import numpy as np
import pandas as pd
from loguru import logger

from app.core.errors import ConfigError, DataError
from app.data.panel import (FLOAT_FORMAT, RETURN_COLUMN, Dataset,
                            EmbeddingSet, MacroSeries, Panel)
from app.models.schemas import MetricsReport, SignalChannel, SynthConfig
from app.services.evaluation_service import Evaluation, evaluate_weights
from app.services.feature_service import rank_normalize
from app.services.sdf_service import aligned_kernel
from app.utils.seeding import substream

ORACLE_FILE = "oracle.csv"
ORACLE_COLUMNS = ["period", "asset_id", "true_weight", "true_beta", "expected_return", "latent"]
MONOTONE_DISPERSION = 3.0


class SyntheticData(NamedTuple):
    panel: Panel
    macro: MacroSeries
    embeddings: EmbeddingSet
    oracle: pd.DataFrame


def _ar1(rng: np.random.Generator, shape: Tuple[int, ...], persistence: float) -> np.ndarray:
    """Stationary unit-variance AR(1) paths along axis 0."""
    out = np.empty(shape)
    out[0] = rng.standard_normal(shape[1:])
    scale = np.sqrt(1.0 - persistence ** 2)
    for t in range(1, shape[0]):
        out[t] = persistence * out[t - 1] + scale * rng.standard_normal(shape[1:])
    return out


def _loading(
    config: SynthConfig, ranked: np.ndarray, latent: np.ndarray, macro_now: np.ndarray
) -> np.ndarray:
    spread = MONOTONE_DISPERSION if config.scenario == "monotone" else 1.0
    beta = np.full(latent.shape[0], config.base_loading)
    signal = config.signal
    if signal in (SignalChannel.FIRM, SignalChannel.MIXED):
        coefs = np.asarray(config.firm_coefficients, dtype=np.float64)
        beta += spread * ranked[:, : coefs.shape[0]] @ coefs
    if signal in (SignalChannel.NEWS, SignalChannel.MIXED):
        beta += spread * config.news_coefficient * latent
    if signal in (SignalChannel.MACRO, SignalChannel.MIXED):
        beta += spread * config.macro_coefficient * np.tanh(macro_now[0])
    return beta


def planted_multiplier(config: SynthConfig, beta: np.ndarray) -> float:
    """kappa_t for one period's loadings."""
    second_moment = config.factor_mean ** 2 + config.factor_vol ** 2
    denominator = config.noise_std ** 2 + second_moment * float(beta @ beta)
    if denominator <= 0.0:
        return 0.0
    return config.factor_mean / denominator


def generate(config: SynthConfig) -> SyntheticData:
    """Draw a panel, its macro series and embeddings, plus the planted oracle."""
    if config.sentences_min > config.sentences_max:
        raise ConfigError("infeasible synthetic config: sentences_min > sentences_max")
    n_assets, n_periods, window = config.n_assets, config.n_periods, config.window_K
    rng = substream(config.seed, "synth")

    direction = rng.standard_normal(config.d_emb)
    direction /= np.linalg.norm(direction)
    macro_periods = np.arange(1 - window, n_periods + 1, dtype=np.int64)
    macro_values = _ar1(rng, (len(macro_periods), config.d_macro), config.macro_persistence)
    chars = _ar1(rng, (n_periods, n_assets, config.d_F), config.char_persistence)

    asset_ids = [f"A{i + 1:03d}" for i in range(n_assets)]
    char_names = [f"char_{j + 1}" for j in range(config.d_F)]
    panel_rows: List[pd.DataFrame] = []
    oracle_rows: List[pd.DataFrame] = []
    vectors: Dict[Tuple[int, str], np.ndarray] = {}

    for t in range(1, n_periods + 1):
        prng = substream(config.seed, "synth", t)
        latent = prng.uniform(-1.0, 1.0, n_assets)
        counts = prng.integers(config.sentences_min, config.sentences_max + 1, n_assets)
        factor = config.factor_mean + config.factor_vol * prng.standard_normal()
        noise = prng.standard_normal(n_assets)

        raw = chars[t - 1]
        ranked = np.column_stack([rank_normalize(raw[:, j]) for j in range(config.d_F)])
        beta = _loading(config, ranked, latent, macro_values[t - 1 + window])
        returns = beta * factor + config.noise_std * noise
        kappa = planted_multiplier(config, beta)

        frame = pd.DataFrame(raw, columns=char_names)
        frame.insert(0, RETURN_COLUMN, returns)
        frame.insert(0, "asset_id", asset_ids)
        frame.insert(0, "period", t)
        panel_rows.append(frame)
        oracle_rows.append(
            pd.DataFrame(
                {
                    "period": t,
                    "asset_id": asset_ids,
                    "true_weight": kappa * beta,
                    "true_beta": beta,
                    "expected_return": beta * config.factor_mean,
                    "latent": latent,
                }
            )
        )
        for i, asset_id in enumerate(asset_ids):
            k = int(counts[i])
            if k == 0:
                continue
            block = latent[i] * config.news_strength * direction + (
                config.embedding_noise * prng.standard_normal((k, config.d_emb))
            )
            block.setflags(write=False)
            vectors[(t, asset_id)] = block

    panel = Panel(pd.concat(panel_rows, ignore_index=True), tuple(char_names))
    macro = MacroSeries(
        macro_periods, macro_values, tuple(f"macro_{j + 1}" for j in range(config.d_macro))
    )
    oracle = pd.concat(oracle_rows, ignore_index=True)[ORACLE_COLUMNS]
    logger.info(
        f"Generated synthetic panel: {n_assets} assets x {n_periods} periods, "
        f"signal={config.signal.value}, scenario={config.scenario}, seed={config.seed}"
    )
    return SyntheticData(panel, macro, EmbeddingSet(config.d_emb, vectors), oracle)


def to_dataset(data: SyntheticData, labels: Optional[Dict[int, str]] = None) -> Dataset:
    return Dataset(data.panel, data.macro, data.embeddings, labels or {})


def period_labels(n_periods: int, start: str = "2000-01") -> Dict[int, str]:
    """Monthly labels for periods 1..n_periods."""
    months = pd.period_range(start, periods=n_periods, freq="M")
    return {t + 1: str(month) for t, month in enumerate(months)}


def planted_kernel(oracle: pd.DataFrame, panel: Panel) -> pd.Series:
    """M*_{t+1} per period; each period's oracle weights must cover exactly its panel assets."""
    weights = {
        int(period): group.set_index("asset_id")["true_weight"]
        for period, group in oracle.groupby("period", sort=True)
    }
    kernel = {}
    for period, group in panel.frame.groupby("period", sort=True):
        if int(period) not in weights:
            raise DataError(f"oracle does not cover panel period {period}")
        returns = group.set_index("asset_id")[RETURN_COLUMN]
        kernel[int(period)] = aligned_kernel(weights[int(period)], returns)
    return pd.Series(kernel, name="kernel", dtype=np.float64).rename_axis("period")


def _oracle_frame(oracle: pd.DataFrame, panel: Panel) -> pd.DataFrame:
    merged = panel.frame[["period", "asset_id", RETURN_COLUMN]].merge(
        oracle, on=["period", "asset_id"], how="left", validate="one_to_one"
    )
    if merged["true_weight"].isna().any():
        raise DataError("oracle does not cover every panel observation")
    return merged.rename(
        columns={"true_weight": "weight", "true_beta": "beta", "expected_return": "predicted"}
    )


def oracle_evaluation(
    oracle: pd.DataFrame,
    panel: Panel,
    bounds: Optional[Tuple[int, int]] = None,
    split_name: str = "all",
    beta_window: int = 60,
    periods_per_year: int = 12,
) -> Evaluation:
    """Metrics of the planted kernel using true weights, loadings and expected returns."""
    frame = _oracle_frame(oracle, panel)
    if bounds is None:
        bounds = (int(panel.periods[0]), int(panel.periods[-1]))
    return evaluate_weights(frame, bounds, "oracle", split_name, beta_window, periods_per_year)


def oracle_metrics(oracle: pd.DataFrame, panel: Panel, **kwargs) -> MetricsReport:
    return oracle_evaluation(oracle, panel, **kwargs).report


def write_oracle(oracle: pd.DataFrame, path: Union[str, Path]) -> None:
    oracle[ORACLE_COLUMNS].to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def load_oracle(path: Union[str, Path]) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise DataError(f"oracle file not found: {path}")
    oracle = pd.read_csv(path, dtype={"asset_id": str})
    missing = set(ORACLE_COLUMNS) - set(oracle.columns)
    if missing:
        raise DataError(f"{path}:1: missing oracle columns {sorted(missing)}")
    return oracle[ORACLE_COLUMNS]
