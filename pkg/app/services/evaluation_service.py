"""
Evaluation service: SDF factor returns, pricing metrics and beta deciles.

All metrics read a long frame with one row per observation:

    period, asset_id, excess_return_next, weight

where ``weight`` is w_{t,i} and ``excess_return_next`` is R^e_{t+1,i} keyed at
the decision period t. The factor return of period t is
F_{t+1} = sum_i w_{t,i} R^e_{t+1,i} and the kernel is M_{t+1} = 1 - F_{t+1}.
"""
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
import pandas as pd
import torch
from loguru import logger
from scipy.stats import spearmanr  # type: ignore
from sklearn.linear_model import LinearRegression, Ridge  # type: ignore

from app.core.errors import DataError, MetricError
from app.data.panel import RETURN_COLUMN, Dataset
from app.models.schemas import MetricsReport, SplitSpec
from app.services.feature_service import FeatureInputs, build_inputs
from app.services.sdf_service import SdfModel

N_DECILES = 10
LINEAR_SDF_RIDGE = 1e-6
CONSTANT_RTOL = 1e-12

DECILE_COLUMNS = ["decile", "period", "return", "cumulative"]
FACTOR_COLUMNS = ["period", "factor_return", "kernel"]


# ---------------------------------------------------------------------------
# SDF weights to factor series
# ---------------------------------------------------------------------------


def model_weights(model: SdfModel, inputs: FeatureInputs) -> np.ndarray:
    """w_{t,i} of every row, from information at t only."""
    with torch.no_grad():
        _, w, _ = model(inputs)
    return w.numpy().copy()


def weight_frame(inputs: FeatureInputs, weights: np.ndarray) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "period": inputs.periods,
            "asset_id": inputs.asset_ids.astype(str),
            RETURN_COLUMN: inputs.returns.numpy(),
            "weight": np.asarray(weights, dtype=np.float64),
        }
    )


def factor_series(frame: pd.DataFrame) -> pd.DataFrame:
    """One row per period: factor_return F_{t+1} and kernel M_{t+1} = 1 - F."""
    products = frame["weight"].to_numpy() * frame[RETURN_COLUMN].to_numpy()
    factor = (
        pd.Series(products, index=frame["period"].to_numpy())
        .groupby(level=0, sort=True)
        .sum()
    )
    return pd.DataFrame(
        {
            "period": factor.index.to_numpy(dtype=np.int64),
            "factor_return": factor.to_numpy(),
            "kernel": 1.0 - factor.to_numpy(),
        }
    )


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def _is_constant(values: np.ndarray) -> bool:
    """True when every entry is equal up to rounding relative to the largest magnitude."""
    return bool(np.ptp(values) <= CONSTANT_RTOL * max(1.0, float(np.abs(values).max())))


def sharpe(returns: np.ndarray, periods_per_year: int = 12) -> float:
    """Annualized mean over standard deviation (divisor n - 1)."""
    r = np.asarray(returns, dtype=np.float64)
    if r.shape[0] < 2:
        raise MetricError(f"sharpe: need at least 2 observations, got {r.shape[0]}")
    if not np.isfinite(r).all():
        raise MetricError("sharpe: non-finite return")
    # np.full(n, 0.1) has a std of about 1e-17, not 0
    if _is_constant(r):
        raise MetricError("sharpe: zero variance return series")
    std = r.std(ddof=1)
    return float(r.mean() / std * np.sqrt(periods_per_year))


def explained_variation(
    actual: np.ndarray, predicted: np.ndarray, periods: np.ndarray
) -> float:
    """1 - sum_t mean_i (r - r_hat)^2 / sum_t mean_i (r - rbar_t)^2."""
    if not len(actual) == len(predicted) == len(periods):
        raise DataError("explained_variation: misaligned observations")
    df = pd.DataFrame({"period": periods, "r": actual, "r_hat": predicted})
    grouped = df.groupby("period")
    if not (grouped.size() >= 2).any():
        raise MetricError("explained_variation: no period with at least 2 assets")
    rbar = grouped["r"].transform("mean")
    residual = ((df["r"] - df["r_hat"]) ** 2).groupby(df["period"]).mean().sum()
    total = ((df["r"] - rbar) ** 2).groupby(df["period"]).mean().sum()
    if not total > (CONSTANT_RTOL * max(1.0, float(np.abs(df["r"]).max()))) ** 2:
        raise MetricError("explained_variation: zero cross-sectional variance")
    return float(1.0 - residual / total)


def xs_r2(actual: np.ndarray, predicted: np.ndarray, assets: np.ndarray) -> float:
    """1 - sum_i (1/T_i)(sum_t e)^2 / sum_i (1/T_i)(sum_t r_hat)^2."""
    df = pd.DataFrame({"asset": assets, "e": actual - predicted, "r_hat": predicted})
    grouped = df.groupby("asset")
    counts = grouped.size()
    numerator = (grouped["e"].sum() ** 2 / counts).sum()
    denominator = (grouped["r_hat"].sum() ** 2 / counts).sum()
    if not denominator > 0.0:
        raise MetricError("xs_r2: zero denominator (all predictions zero)")
    return float(1.0 - numerator / denominator)


def mspe(actual: np.ndarray, predicted: np.ndarray, periods: np.ndarray) -> float:
    """Per-period mean squared error, averaged over periods."""
    if len(actual) == 0:
        raise MetricError("mspe: no observations")
    sq = pd.Series((np.asarray(actual) - np.asarray(predicted)) ** 2)
    return float(sq.groupby(np.asarray(periods)).mean().mean())


def betas(frame: pd.DataFrame, factor: pd.DataFrame, window: int) -> pd.DataFrame:
    """Rolling betas of asset returns on the factor return.

    The window is the ``window`` factor periods strictly before t, since the
    return keyed at t is only realized at t+1. An entry is emitted for each
    asset observed at t whose returns cover the whole window; ``factor_mean``
    is the trailing factor mean over the same window.
    """
    if window < 2:
        raise DataError(f"betas: window must be at least 2, got {window}")
    periods = factor["period"].to_numpy(dtype=np.int64)
    f_all = factor["factor_return"].to_numpy(dtype=np.float64)
    wide = frame.pivot(index="period", columns="asset_id", values=RETURN_COLUMN).reindex(periods)
    r_all = wide.to_numpy(dtype=np.float64)
    assets = wide.columns.to_numpy()

    out_period, out_asset, out_beta, out_mean = [], [], [], []
    for k in range(window, len(periods)):
        f = f_all[k - window:k]
        if _is_constant(f):
            logger.debug(f"betas: zero factor variance in window before period {periods[k]}")
            continue
        var = f.var(ddof=1)
        r = r_all[k - window:k]
        covered = ~np.isnan(r).any(axis=0) & ~np.isnan(r_all[k])
        if not covered.any():
            continue
        r = r[:, covered]
        cov = ((r - r.mean(axis=0)) * (f - f.mean())[:, None]).sum(axis=0) / (window - 1)
        n = int(covered.sum())
        out_period.append(np.full(n, periods[k]))
        out_asset.append(assets[covered])
        out_beta.append(cov / var)
        out_mean.append(np.full(n, f.mean()))

    if not out_period:
        return pd.DataFrame(
            {
                "period": np.zeros(0, dtype=np.int64),
                "asset_id": np.zeros(0, dtype=object),
                "beta": np.zeros(0),
                "factor_mean": np.zeros(0),
            }
        )
    return pd.DataFrame(
        {
            "period": np.concatenate(out_period),
            "asset_id": np.concatenate(out_asset),
            "beta": np.concatenate(out_beta),
            "factor_mean": np.concatenate(out_mean),
        }
    )


def predicted_returns(beta_frame: pd.DataFrame) -> pd.DataFrame:
    """r_hat_{t,i} = beta_{t,i} times the trailing factor mean."""
    out = beta_frame.copy()
    out["predicted"] = out["beta"] * out["factor_mean"]
    return out


def decile_portfolios(scored: pd.DataFrame, signal: str = "beta") -> pd.DataFrame:
    """Equal-weighted next-period returns of ten signal-sorted groups.

    Remainder assets go to the lowest-index deciles. Periods with fewer than
    ten scored assets are skipped. Cumulative returns compound per decile.
    """
    rows = []
    skipped = 0
    for period, group in scored.groupby("period", sort=True):
        if len(group) < N_DECILES:
            skipped += 1
            continue
        ordered = group.sort_values([signal, "asset_id"], kind="mergesort")
        for decile, members in enumerate(np.array_split(np.arange(len(ordered)), N_DECILES), 1):
            ret = float(ordered[RETURN_COLUMN].iloc[members].mean())
            rows.append({"decile": decile, "period": int(period), "return": ret})
    if skipped:
        logger.warning(f"Skipped {skipped} periods with fewer than {N_DECILES} assets for deciles")
    deciles = pd.DataFrame(rows, columns=["decile", "period", "return"])
    deciles = deciles.sort_values(["decile", "period"], kind="mergesort").reset_index(drop=True)
    deciles["cumulative"] = (
        (1.0 + deciles["return"]).groupby(deciles["decile"]).cumprod() - 1.0
    )
    return deciles[DECILE_COLUMNS]


def monotonicity(decile_means: np.ndarray) -> float:
    """Spearman rank correlation between decile index and mean return."""
    means = np.asarray(decile_means, dtype=np.float64)
    if means.shape[0] < 2:
        raise MetricError("monotonicity: need at least 2 decile means")
    rho = spearmanr(np.arange(1, means.shape[0] + 1), means).statistic
    if not np.isfinite(rho):
        raise MetricError("monotonicity: constant decile means")
    return float(rho)


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------


def _in_range(periods: np.ndarray, bounds: Tuple[int, int]) -> np.ndarray:
    return (periods >= bounds[0]) & (periods <= bounds[1])


def capm_weights(frame: pd.DataFrame, fit_range: Tuple[int, int]) -> np.ndarray:
    """w_{t,i} = b / N_t with the equal-weighted market as the single factor."""
    periods = frame["period"].to_numpy()
    market = frame.groupby("period")[RETURN_COLUMN].mean()
    fit = market[_in_range(market.index.to_numpy(), fit_range)]
    if fit.empty:
        raise DataError("capm_weights: no periods in the fit range")
    reg = LinearRegression(fit_intercept=False).fit(fit.to_numpy()[:, None], np.ones(len(fit)))
    n_t = frame.groupby("period")["asset_id"].transform("size").to_numpy()
    logger.debug(f"CAPM baseline loading b={reg.coef_[0]:.6g}")
    return reg.coef_[0] / n_t * np.ones(len(periods))


def linear_sdf_weights(
    frame: pd.DataFrame, firm: np.ndarray, fit_range: Tuple[int, int]
) -> np.ndarray:
    """w_{t,i} = theta' F_{t,i} on ranked characteristics, fit on managed portfolios."""
    managed = pd.DataFrame(firm * frame[RETURN_COLUMN].to_numpy()[:, None])
    managed["period"] = frame["period"].to_numpy()
    portfolios = managed.groupby("period").sum()
    fit = portfolios[_in_range(portfolios.index.to_numpy(), fit_range)]
    if fit.empty:
        raise DataError("linear_sdf_weights: no periods in the fit range")
    reg = Ridge(alpha=LINEAR_SDF_RIDGE, fit_intercept=False).fit(
        fit.to_numpy(), np.ones(len(fit))
    )
    return firm @ reg.coef_


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class Evaluation:
    report: MetricsReport
    deciles: pd.DataFrame
    factor: pd.DataFrame


def evaluate_weights(
    frame: pd.DataFrame,
    bounds: Tuple[int, int],
    name: str,
    split_name: str,
    beta_window: int = 60,
    periods_per_year: int = 12,
) -> Evaluation:
    """Metrics of the SDF given by ``frame['weight']`` on the periods in ``bounds``.

    When ``frame`` already carries ``beta`` and ``predicted`` columns they are
    used as given instead of being estimated from the factor history.
    """
    factor = factor_series(frame)
    if {"beta", "predicted"} <= set(frame.columns):
        scored = frame.copy()
    else:
        estimated = predicted_returns(betas(frame, factor, beta_window))
        scored = frame.merge(
            estimated[["period", "asset_id", "beta", "predicted"]],
            on=["period", "asset_id"],
            how="inner",
        )
    scored = scored[_in_range(scored["period"].to_numpy(), bounds)].reset_index(drop=True)
    factor = factor[_in_range(factor["period"].to_numpy(), bounds)].reset_index(drop=True)
    evaluated = frame[_in_range(frame["period"].to_numpy(), bounds)]

    report = MetricsReport(
        name=name,
        split=split_name,
        beta_window=beta_window,
        n_periods=int(factor.shape[0]),
        n_observations=int(evaluated.shape[0]),
        first_period=int(factor["period"].iloc[0]) if len(factor) else None,
        last_period=int(factor["period"].iloc[-1]) if len(factor) else None,
    )
    errors: Dict[str, str] = {}

    def attempt(metric: str, fn) -> Optional[float]:
        try:
            return fn()
        except MetricError as e:
            logger.warning(f"{name}/{split_name}: {e}")
            errors[metric] = str(e)
            return None

    report.sharpe = attempt(
        "sharpe", lambda: sharpe(factor["factor_return"].to_numpy(), periods_per_year)
    )
    report.sharpe_error = errors.get("sharpe")

    r = scored[RETURN_COLUMN].to_numpy()
    r_hat = scored["predicted"].to_numpy()
    if len(scored):
        report.ev = attempt(
            "ev", lambda: explained_variation(r, r_hat, scored["period"].to_numpy())
        )
        report.xs_r2 = attempt("xs_r2", lambda: xs_r2(r, r_hat, scored["asset_id"].to_numpy()))
        report.mspe = attempt("mspe", lambda: mspe(r, r_hat, scored["period"].to_numpy()))
    else:
        errors["betas"] = f"no observation has a full {beta_window}-period beta window"
        logger.warning(f"{name}/{split_name}: {errors['betas']}")

    deciles = decile_portfolios(scored)
    if len(deciles):
        means = deciles.groupby("decile")["return"].mean()
        finals = deciles.groupby("decile")["cumulative"].last()
        report.decile_mean_returns = means.tolist()
        report.decile_cumulative_returns = finals.tolist()
        report.monotonicity = attempt("monotonicity", lambda: monotonicity(means.to_numpy()))
    report.metric_errors = errors
    return Evaluation(report, deciles, factor)


def evaluate_model(
    model: SdfModel,
    dataset: Dataset,
    spec: SplitSpec,
    split_name: str = "test",
    beta_window: int = 60,
    periods_per_year: int = 12,
    with_baselines: bool = True,
) -> Evaluation:
    """Evaluate a trained model, plus the CAPM and linear-SDF baselines, on one split."""
    if split_name not in spec.ranges():
        raise DataError(f"unknown split '{split_name}'")
    bounds = spec.ranges()[split_name]
    inputs = build_inputs(dataset.panel, dataset.macro, dataset.embeddings, model.feature_config)
    frame = weight_frame(inputs, model_weights(model, inputs))
    result = evaluate_weights(frame, bounds, "sdf", split_name, beta_window, periods_per_year)

    if with_baselines:
        train_bounds = spec.ranges()["train"]
        baselines = {
            "capm": capm_weights(frame, train_bounds),
            "linear_sdf": linear_sdf_weights(frame, inputs.firm.numpy(), train_bounds),
        }
        for label, weights in baselines.items():
            base = frame.assign(weight=weights)
            result.report.baselines[label] = evaluate_weights(
                base, bounds, label, split_name, beta_window, periods_per_year
            ).report

    attach_labels(result.report, dataset.period_labels)
    logger.info(
        f"Evaluated '{split_name}': sharpe={result.report.sharpe} ev={result.report.ev} "
        f"xs_r2={result.report.xs_r2} mspe={result.report.mspe}"
    )
    return result


def attach_labels(report: MetricsReport, labels: Dict[int, str]) -> None:
    if not labels:
        return
    for key, period in (("first", report.first_period), ("last", report.last_period)):
        if period is not None and period in labels:
            report.period_labels[key] = labels[period]


def write_evaluation(evaluation: Evaluation, out_dir: Union[str, Path]) -> Dict[str, Path]:
    """Write report.json, deciles.csv and factor.csv into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "report": out_dir / "report.json",
        "deciles": out_dir / "deciles.csv",
        "factor": out_dir / "factor.csv",
    }
    paths["report"].write_text(evaluation.report.model_dump_json(indent=2) + "\n", encoding="utf-8")
    evaluation.deciles.to_csv(
        paths["deciles"], index=False, float_format="%.17g", lineterminator="\n"
    )
    evaluation.factor[FACTOR_COLUMNS].to_csv(
        paths["factor"], index=False, float_format="%.17g", lineterminator="\n"
    )
    return paths
