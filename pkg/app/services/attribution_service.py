"""
Attribution service: gradient sensitivity and Shapley importance of features.

Both attribute the SDF weight map x -> w. Shapley values use the value
function v(S) = variance of w over a bucket's observations when the features
outside S are replaced by the bucket's coordinate means.
"""
import math
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import torch
from joblib import Parallel, delayed  # type: ignore
from loguru import logger

from app.core import diffcore as dc
from app.core.errors import DataError, NumericalError
from app.models.schemas import SensitivityReport, ShapleyReport
from app.services.feature_service import FeatureInputs
from app.services.sdf_service import SdfModel
from app.utils.seeding import substream

EXACT_MAX_GROUPS = 6
NORMALIZATION_TOL = 1e-14

ValueFn = Callable[[int], float]


# ---------------------------------------------------------------------------
# Feature groups
# ---------------------------------------------------------------------------


def feature_groups(model: SdfModel) -> Dict[str, List[int]]:
    """Macro channel as one group, each characteristic and each news PC alone."""
    cfg = model.feature_config
    chars = model.pipeline.characteristic_names
    groups: Dict[str, List[int]] = {"macro": list(range(cfg.d_I))}
    offset = cfg.d_I
    for k, name in enumerate(chars):
        groups[name] = [offset + k]
    offset += len(chars)
    for j in range(cfg.d_N):
        groups[f"news_pc{j + 1}"] = [offset + j]
    return groups


def fused_features(model: SdfModel, inputs: FeatureInputs) -> torch.Tensor:
    with torch.no_grad():
        return model.pipeline(inputs).x.detach()


# ---------------------------------------------------------------------------
# Sensitivity
# ---------------------------------------------------------------------------


def sensitivity(
    weight_fn: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    feature_names: Sequence[str],
    config_digest: str = "",
) -> SensitivityReport:
    """S_k = mean over rows of |d w / d x_k|."""
    if x.dim() != 2 or x.shape[0] == 0:
        raise DataError(f"sensitivity: need a nonempty (n, d) sample, got {tuple(x.shape)}")
    if x.shape[1] != len(feature_names):
        raise DataError("sensitivity: feature names do not match the feature dimension")
    grads = dc.input_gradient(weight_fn, dc.as_tensor(x))
    scores = grads.abs().mean(dim=0)
    return SensitivityReport(
        feature_names=list(feature_names),
        sensitivity=scores.tolist(),
        n_samples=int(x.shape[0]),
        config_digest=config_digest,
    )


def model_sensitivity(
    model: SdfModel,
    inputs: FeatureInputs,
    n_samples: int = 0,
    seed: int = 0,
    config_digest: str = "",
) -> SensitivityReport:
    """Sensitivity of the SDF weight over all rows, or ``n_samples`` sampled rows."""
    x = fused_features(model, inputs)
    if 0 < n_samples < x.shape[0]:
        rows = np.sort(substream(seed, "shapley", 0).choice(x.shape[0], n_samples, replace=False))
        x = x[torch.as_tensor(rows, dtype=torch.long)]
    report = sensitivity(model.sdf, x, model.pipeline.feature_names, config_digest)
    logger.info(f"Computed sensitivity over {report.n_samples} observations")
    return report


# ---------------------------------------------------------------------------
# Shapley estimation
# ---------------------------------------------------------------------------


@dataclass
class ShapleyEstimate:
    values: np.ndarray
    standard_errors: np.ndarray
    exact: bool
    permutations: int


class CachedValue:
    """Memoized coalition values keyed by player bitmask."""

    def __init__(self, value_fn: ValueFn):
        self.value_fn = value_fn
        self.cache: Dict[int, float] = {}

    def __call__(self, mask: int) -> float:
        if mask not in self.cache:
            self.cache[mask] = float(self.value_fn(mask))
        return self.cache[mask]


def exact_shapley(value_fn: ValueFn, n_players: int) -> ShapleyEstimate:
    """Shapley values by enumerating every coalition."""
    v = CachedValue(value_fn)
    values = np.zeros(n_players)
    for player in range(n_players):
        others = [p for p in range(n_players) if p != player]
        for size in range(n_players):
            weight = 1.0 / (n_players * math.comb(n_players - 1, size))
            for coalition in combinations(others, size):
                mask = sum(1 << p for p in coalition)
                values[player] += weight * (v(mask | (1 << player)) - v(mask))
    return ShapleyEstimate(values, np.zeros(n_players), True, math.factorial(n_players))


def sampled_shapley(
    value_fn: ValueFn, n_players: int, permutations: int, rng: np.random.Generator
) -> ShapleyEstimate:
    """Average marginal contributions over random player orderings."""
    if permutations < 1:
        raise DataError("sampled_shapley: need at least one permutation")
    v = CachedValue(value_fn)
    contributions = np.zeros((permutations, n_players))
    for p in range(permutations):
        mask = 0
        previous = v(0)
        for player in rng.permutation(n_players):
            mask |= 1 << int(player)
            current = v(mask)
            contributions[p, player] = current - previous
            previous = current
    values = contributions.mean(axis=0)
    if permutations > 1:
        errors = contributions.std(axis=0, ddof=1) / np.sqrt(permutations)
    else:
        errors = np.zeros(n_players)
    return ShapleyEstimate(values, errors, False, permutations)


def estimate_shapley(
    value_fn: ValueFn,
    n_players: int,
    permutations: int,
    rng: np.random.Generator,
    exact_max: int = EXACT_MAX_GROUPS,
) -> ShapleyEstimate:
    if n_players <= exact_max:
        return exact_shapley(value_fn, n_players)
    return sampled_shapley(value_fn, n_players, permutations, rng)


def normalize_importance(values: np.ndarray) -> np.ndarray:
    """Each group's share of the total contribution."""
    total = float(np.sum(values))
    if abs(total) <= NORMALIZATION_TOL:
        raise NumericalError(
            f"shapley: total contribution {total:.3g} is zero; importance is undefined"
        )
    return np.asarray(values) / total


def variance_value_fn(
    weight_fn: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    groups: Sequence[Sequence[int]],
) -> ValueFn:
    """v(S): variance of w with coordinates outside the groups in S set to their means."""
    baseline = x.mean(dim=0)

    def value(mask: int) -> float:
        keep = torch.zeros(x.shape[1], dtype=torch.bool)
        for g, columns in enumerate(groups):
            if mask >> g & 1:
                keep[list(columns)] = True
        masked = torch.where(keep, x, baseline)
        with torch.no_grad():
            w = weight_fn(masked)
        return float(w.var(unbiased=False)) if w.numel() > 1 else 0.0

    return value


# ---------------------------------------------------------------------------
# Shapley importance per period bucket
# ---------------------------------------------------------------------------


def _bucket_estimate(
    weight_fn, x: torch.Tensor, groups: List[List[int]], permutations: int, seed: int, bucket: int
) -> ShapleyEstimate:
    rng = substream(seed, "shapley", bucket)
    return estimate_shapley(variance_value_fn(weight_fn, x, groups), len(groups), permutations, rng)


def shapley_importance(
    model: SdfModel,
    inputs: FeatureInputs,
    permutations: int = 200,
    seed: int = 0,
    n_buckets: int = 1,
    groups: Optional[Dict[str, List[int]]] = None,
    n_jobs: int = 1,
    config_digest: str = "",
) -> ShapleyReport:
    """Normalized Shapley importance of feature groups for each period bucket."""
    if inputs.n_observations == 0:
        raise DataError("shapley_importance: empty panel slice")
    groups = groups or feature_groups(model)
    covered = sorted(c for columns in groups.values() for c in columns)
    if covered != list(range(model.pipeline.output_dim)):
        raise DataError("shapley_importance: groups must partition the fused features")

    x = fused_features(model, inputs)
    buckets = [b for b in np.array_split(inputs.period_values, n_buckets) if len(b)]
    labels = [f"{int(b[0])}-{int(b[-1])}" for b in buckets]
    slices = [x[torch.as_tensor(np.isin(inputs.periods, b))] for b in buckets]
    members = list(groups.values())

    estimates = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(_bucket_estimate)(model.sdf, xb, members, permutations, seed, k)
        for k, xb in enumerate(slices)
    )
    importance = [normalize_importance(est.values).tolist() for est in estimates]
    logger.info(
        f"Shapley importance for {len(groups)} groups over {len(buckets)} buckets "
        f"({'exact' if estimates[0].exact else f'{permutations} permutations'})"
    )
    return ShapleyReport(
        groups=list(groups),
        buckets=labels,
        importance=importance,
        raw_values=[est.values.tolist() for est in estimates],
        standard_errors=[est.standard_errors.tolist() for est in estimates],
        permutations=permutations,
        exact=bool(estimates[0].exact),
        seed=seed,
        config_digest=config_digest,
    )


# ---------------------------------------------------------------------------
# Output files
# ---------------------------------------------------------------------------


def _write_with_header(frame: pd.DataFrame, path: Union[str, Path], seed: int, digest: str) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as handle:
        handle.write(f"# seed={seed}\n")
        handle.write(f"# config_digest={digest}\n")
        frame.to_csv(handle, index=False, float_format="%.17g", lineterminator="\n")


def write_sensitivity(report: SensitivityReport, path: Union[str, Path], seed: int) -> None:
    frame = pd.DataFrame({"feature": report.feature_names, "sensitivity": report.sensitivity})
    _write_with_header(frame, path, seed, report.config_digest)


def write_shapley(report: ShapleyReport, path: Union[str, Path]) -> None:
    rows = [
        {"group": group, "bucket": bucket, "importance": report.importance[b][g]}
        for b, bucket in enumerate(report.buckets)
        for g, group in enumerate(report.groups)
    ]
    frame = pd.DataFrame(rows, columns=["group", "bucket", "importance"])
    _write_with_header(frame, path, report.seed, report.config_digest)


def read_attribution_csv(path: Union[str, Path]) -> pd.DataFrame:
    return pd.read_csv(path, comment="#")
