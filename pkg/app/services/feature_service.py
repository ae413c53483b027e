"""
Feature pipeline: turns panel, macro and news inputs into fused features.

x_{t,i} = [macro state || ranked firm characteristics || news PCs], where the
macro state is the final LSTM hidden state over a rolling window of macro
indicators and the news block is the PCA projection of an attention-pooled
set of sentence embeddings.
"""
from bisect import bisect_left
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from loguru import logger
from scipy.stats import rankdata  # type: ignore
from torch import nn

from app.core import diffcore as dc
from app.core.errors import DataError, ShapeError
from app.data.panel import EmbeddingSet, MacroSeries, Panel
from app.models.schemas import (Channel, EmptyNewsPolicy, FeatureConfig,
                                MissingCharPolicy)

CHANNEL_ORDER = (Channel.MACRO, Channel.FIRM, Channel.NEWS)


# ---------------------------------------------------------------------------
# Firm characteristics
# ---------------------------------------------------------------------------


def rank_normalize(values: Sequence[float]) -> np.ndarray:
    """Map a cross-section to [-1, 1] by average rank; a singleton maps to 0."""
    x = np.asarray(values, dtype=np.float64)
    n = x.shape[0]
    if n == 0:
        return x.copy()
    if n == 1:
        return np.zeros(1)
    ranks = rankdata(x, method="average")
    return 2.0 * (ranks - 1.0) / (n - 1.0) - 1.0


def rank_characteristics(
    panel: Panel, policy: MissingCharPolicy
) -> Tuple[Panel, np.ndarray]:
    """Apply the missing-value policy, then rank each characteristic per period."""
    frame = panel.frame
    names = list(panel.characteristic_names)
    missing = frame[names].isna()

    if policy == MissingCharPolicy.COMPLETE_CASE:
        keep = ~missing.any(axis=1)
        dropped = int((~keep).sum())
        if dropped:
            logger.warning(f"Dropped {dropped} observations with missing characteristics")
        frame = frame[keep]
    else:
        medians = frame.groupby("period")[names].transform("median")
        frame = frame.copy()
        frame[names] = frame[names].fillna(medians).fillna(0.0)
        if missing.values.any():
            logger.info(f"Imputed {int(missing.values.sum())} missing characteristic cells")

    kept = Panel(frame, panel.characteristic_names)
    if kept.is_empty():
        return kept, np.zeros((0, len(names)))
    ranked = kept.frame.groupby("period")[names].transform(
        lambda column: rank_normalize(column.to_numpy())
    )
    return kept, ranked.to_numpy(dtype=np.float64)


# ---------------------------------------------------------------------------
# Learnable extractors
# ---------------------------------------------------------------------------


class AttentionPooling(nn.Module):
    """alpha_k = softmax_k(v' tanh(W e_k + b)); pooled = sum_k alpha_k e_k."""

    def __init__(self, d_emb: int, d_a: int, generator: torch.Generator):
        super().__init__()
        self.W = nn.Parameter(dc.glorot_uniform((d_a, d_emb), generator))  # pylint: disable=invalid-name
        self.b = nn.Parameter(torch.zeros(d_a, dtype=dc.DTYPE))
        self.v = nn.Parameter(dc.glorot_uniform((d_a,), generator))

    def forward(
        self, embeddings: torch.Tensor, mask: torch.Tensor
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        """``embeddings`` (n, K, d_emb), ``mask`` (n, K) -> pooled (n, d_emb), alpha (n, K)."""
        if embeddings.shape[-1] != self.W.shape[1]:
            raise ShapeError("attend_pool", embeddings.shape, self.W.shape)
        scores = dc.tanh(dc.affine(embeddings, self.W, self.b)) @ self.v
        alpha = dc.softmax(scores, dim=-1, mask=mask)
        pooled = (alpha.unsqueeze(-1) * embeddings).sum(dim=-2)
        return pooled, alpha


class MacroLstm(nn.Module):
    """Unidirectional LSTM over a macro window; returns the last hidden state."""

    GATES = ("input", "forget", "output", "candidate")

    def __init__(self, d_macro: int, d_state: int, generator: torch.Generator):
        super().__init__()
        self.d_macro = d_macro
        self.d_state = d_state
        fan = d_macro + d_state
        self.weights = nn.ParameterDict(
            {g: nn.Parameter(dc.glorot_uniform((d_state, fan), generator)) for g in self.GATES}
        )
        self.biases = nn.ParameterDict(
            {g: nn.Parameter(torch.zeros(d_state, dtype=dc.DTYPE)) for g in self.GATES}
        )

    def cell(
        self, x_t: torch.Tensor, h: torch.Tensor, c: torch.Tensor
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        z = dc.concat([x_t, h], dim=-1)
        w, b = self.weights, self.biases
        i = dc.sigmoid(dc.affine(z, w["input"], b["input"]))
        f = dc.sigmoid(dc.affine(z, w["forget"], b["forget"]))
        o = dc.sigmoid(dc.affine(z, w["output"], b["output"]))
        c_tilde = dc.tanh(dc.affine(z, w["candidate"], b["candidate"]))
        c = f * c + i * c_tilde
        h = o * dc.tanh(c)
        return h, c

    def forward(self, windows: torch.Tensor) -> torch.Tensor:
        """``windows`` (n, K+1, d_macro), oldest first -> (n, d_state)."""
        if windows.dim() != 3 or windows.shape[-1] != self.d_macro:
            raise ShapeError("macro_encode", windows.shape, (None, None, self.d_macro))
        n = windows.shape[0]
        h = torch.zeros(n, self.d_state, dtype=dc.DTYPE)
        c = torch.zeros(n, self.d_state, dtype=dc.DTYPE)
        for step in range(windows.shape[1]):
            h, c = self.cell(windows[:, step, :], h, c)
        return h


def attend_pool(
    embeddings: dc.ArrayLike, params: AttentionPooling
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Pool one (t, i) sentence list. K = 0 yields a zero vector and empty weights."""
    e = dc.as_tensor(embeddings)
    if e.dim() != 2:
        raise ShapeError("attend_pool", e.shape)
    mask = torch.ones(1, e.shape[0], dtype=torch.bool)
    pooled, alpha = params(e.unsqueeze(0), mask)
    return pooled[0], alpha[0]


def macro_encode(window: dc.ArrayLike, params: MacroLstm) -> torch.Tensor:
    """Final hidden state for one window I_{t-K..t}."""
    w = dc.as_tensor(window)
    if w.dim() != 2:
        raise ShapeError("macro_encode", w.shape)
    return params(w.unsqueeze(0))[0]


def news_feature(pooled: Optional[torch.Tensor], basis: dc.PcaBasis) -> torch.Tensor:
    """PCA projection of a pooled embedding; ``None`` (no news) maps to zeros."""
    if pooled is None:
        return torch.zeros(basis.n_components, dtype=dc.DTYPE)
    return dc.pca_transform(basis, pooled)


# ---------------------------------------------------------------------------
# Fusion
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FusedFeatures:
    """Rows x_{t,i} with the column range of each channel."""

    x: torch.Tensor
    offsets: Dict[Channel, Tuple[int, int]]
    feature_names: Tuple[str, ...] = ()

    def channel(self, channel: Channel) -> torch.Tensor:
        start, stop = self.offsets[channel]
        return self.x[..., start:stop]

    @property
    def dim(self) -> int:
        return int(self.x.shape[-1])


def fuse(
    macro_state: torch.Tensor,
    firm: torch.Tensor,
    news: torch.Tensor,
    feature_names: Sequence[str] = (),
) -> FusedFeatures:
    """Concatenate macro || firm || news (vectors or row batches)."""
    parts = (macro_state, firm, news)
    offsets: Dict[Channel, Tuple[int, int]] = {}
    start = 0
    for channel, part in zip(CHANNEL_ORDER, parts):
        offsets[channel] = (start, start + int(part.shape[-1]))
        start += int(part.shape[-1])
    x = dc.concat(list(parts), dim=-1)
    if feature_names and len(feature_names) != start:
        raise ShapeError("fuse", (len(feature_names),), (start,))
    return FusedFeatures(x, offsets, tuple(feature_names))


# ---------------------------------------------------------------------------
# Precomputed inputs of a panel slice
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FeatureInputs:
    """Fixed (non-trainable) inputs of every usable observation of a slice.

    Rows are ordered by (period, asset_id).
    """

    periods: np.ndarray
    asset_ids: np.ndarray
    returns: torch.Tensor
    firm: torch.Tensor
    embeddings: torch.Tensor
    emb_mask: torch.Tensor
    period_values: np.ndarray
    period_index: torch.Tensor
    macro_windows: torch.Tensor
    characteristic_names: Tuple[str, ...]
    period_rows: Dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def n_observations(self) -> int:
        return int(self.periods.shape[0])

    @property
    def has_news(self) -> torch.Tensor:
        return self.emb_mask.any(dim=1)

    @property
    def d_emb(self) -> int:
        return int(self.embeddings.shape[-1])

    @property
    def d_macro(self) -> int:
        return int(self.macro_windows.shape[-1])

    @property
    def d_F(self) -> int:  # pylint: disable=invalid-name
        return int(self.firm.shape[-1])

    def asset_codes(self) -> Tuple[torch.Tensor, List[str]]:
        """Integer code per row and the sorted asset list."""
        names, codes = np.unique(self.asset_ids.astype(str), return_inverse=True)
        return torch.as_tensor(codes, dtype=torch.long), names.tolist()

    def subset(self, periods: Sequence[int]) -> "FeatureInputs":
        wanted = sorted(int(p) for p in periods)
        rows = np.concatenate([self.period_rows[p] for p in wanted]) if wanted else np.zeros(0, int)
        return self._take(rows)

    def _take(self, rows: np.ndarray) -> "FeatureInputs":
        rows_t = torch.as_tensor(rows, dtype=torch.long)
        periods = self.periods[rows]
        period_values = np.unique(periods)
        remap = {p: k for k, p in enumerate(period_values.tolist())}
        old_index = [int(np.searchsorted(self.period_values, p)) for p in period_values]
        new_index = np.array([remap[p] for p in periods.tolist()], dtype=np.int64)
        return FeatureInputs(
            periods=periods,
            asset_ids=self.asset_ids[rows],
            returns=self.returns[rows_t],
            firm=self.firm[rows_t],
            embeddings=self.embeddings[rows_t],
            emb_mask=self.emb_mask[rows_t],
            period_values=period_values,
            period_index=torch.as_tensor(new_index, dtype=torch.long),
            macro_windows=self.macro_windows[torch.as_tensor(old_index, dtype=torch.long)],
            characteristic_names=self.characteristic_names,
            period_rows=_rows_by_period(periods),
        )


def _rows_by_period(periods: np.ndarray) -> Dict[int, np.ndarray]:
    values, starts = np.unique(periods, return_index=True)
    bounds = list(starts) + [len(periods)]
    return {int(p): np.arange(bounds[k], bounds[k + 1]) for k, p in enumerate(values)}


def _news_lists(
    frame: pd.DataFrame, embeddings: EmbeddingSet, policy: EmptyNewsPolicy
) -> List[np.ndarray]:
    lists = [
        embeddings.get(p, a)
        for p, a in zip(frame["period"].tolist(), frame["asset_id"].tolist())
    ]
    if policy != EmptyNewsPolicy.CARRY_FORWARD:
        return lists

    history: Dict[str, List[int]] = {}
    for (period, asset_id), block in embeddings.vectors.items():
        if block.shape[0]:
            history.setdefault(asset_id, []).append(period)
    for periods in history.values():
        periods.sort()
    carried = 0
    for row, (period, asset_id) in enumerate(zip(frame["period"].tolist(), frame["asset_id"].tolist())):
        if lists[row].shape[0]:
            continue
        past = history.get(str(asset_id), [])
        k = bisect_left(past, int(period))
        if k > 0:
            lists[row] = embeddings.get(past[k - 1], asset_id)
            carried += 1
    if carried:
        logger.debug(f"Carried forward news for {carried} observations")
    return lists


def build_inputs(
    panel: Panel, macro: MacroSeries, embeddings: EmbeddingSet, config: FeatureConfig
) -> FeatureInputs:
    """Precompute the fixed inputs of a panel slice."""
    kept, ranked = rank_characteristics(panel, config.missing_char_policy)
    frame = kept.frame

    windows: Dict[int, np.ndarray] = {}
    for period in np.unique(frame["period"].to_numpy(dtype=np.int64)).tolist():
        window = macro.window(period, config.window_K)
        if window is not None:
            windows[period] = window
    usable = frame["period"].isin(list(windows)).to_numpy()
    if not usable.all():
        excluded = sorted(set(frame["period"][~usable].tolist()))
        logger.warning(
            f"Excluded {len(excluded)} periods ({int((~usable).sum())} observations): "
            f"incomplete macro window of {config.window_K + 1} steps"
        )
    frame = frame[usable].reset_index(drop=True)
    ranked = ranked[usable]

    lists = _news_lists(frame, embeddings, config.empty_news_policy)
    k_max = max([block.shape[0] for block in lists] + [1])
    n = len(frame)
    padded = np.zeros((n, k_max, embeddings.dim))
    mask = np.zeros((n, k_max), dtype=bool)
    for row, block in enumerate(lists):
        k = block.shape[0]
        if k:
            padded[row, :k] = block
            mask[row, :k] = True

    periods = frame["period"].to_numpy(dtype=np.int64)
    period_values = np.array(sorted(windows), dtype=np.int64)
    period_values = period_values[np.isin(period_values, periods)]
    period_index = np.searchsorted(period_values, periods)
    stacked = (
        np.stack([windows[int(p)] for p in period_values])
        if len(period_values)
        else np.zeros((0, config.window_K + 1, macro.dim))
    )

    return FeatureInputs(
        periods=periods,
        asset_ids=frame["asset_id"].to_numpy(dtype=object),
        returns=dc.as_tensor(frame["excess_return_next"].to_numpy(dtype=np.float64)),
        firm=dc.as_tensor(ranked),
        embeddings=dc.as_tensor(padded),
        emb_mask=torch.as_tensor(mask),
        period_values=period_values,
        period_index=torch.as_tensor(period_index, dtype=torch.long),
        macro_windows=dc.as_tensor(stacked),
        characteristic_names=tuple(panel.characteristic_names),
        period_rows=_rows_by_period(periods),
    )


# ---------------------------------------------------------------------------
# Pipeline module
# ---------------------------------------------------------------------------


class FeaturePipeline(nn.Module):
    """Trainable extractors (SDF side) plus the frozen news PCA basis."""

    def __init__(
        self,
        config: FeatureConfig,
        d_macro: int,
        d_emb: int,
        characteristic_names: Sequence[str],
        generator: torch.Generator,
    ):
        super().__init__()
        self.config = config
        self.characteristic_names = tuple(characteristic_names)
        self.attention = AttentionPooling(d_emb, config.d_a, generator)
        self.lstm = MacroLstm(d_macro, config.d_I, generator)
        self.register_buffer("pca_mean", torch.zeros(d_emb, dtype=dc.DTYPE))
        self.register_buffer("pca_components", torch.zeros(config.d_N, d_emb, dtype=dc.DTYPE))
        self.register_buffer("pca_variance", torch.zeros(config.d_N, dtype=dc.DTYPE))
        self.pca_fitted = False

    @property
    def output_dim(self) -> int:
        return self.config.d_I + len(self.characteristic_names) + self.config.d_N

    @property
    def feature_names(self) -> Tuple[str, ...]:
        macro = [f"macro_state_{j + 1}" for j in range(self.config.d_I)]
        news = [f"news_pc{j + 1}" for j in range(self.config.d_N)]
        return tuple(macro + list(self.characteristic_names) + news)

    @property
    def basis(self) -> dc.PcaBasis:
        return dc.PcaBasis(self.pca_mean, self.pca_components, self.pca_variance)

    def set_basis(self, basis: dc.PcaBasis) -> None:
        if basis.components.shape != self.pca_components.shape:
            raise ShapeError("set_basis", basis.components.shape, self.pca_components.shape)
        self.pca_mean.copy_(basis.mean)
        self.pca_components.copy_(basis.components)
        self.pca_variance.copy_(basis.explained_variance)
        self.pca_fitted = True

    def pooled(self, inputs: FeatureInputs) -> torch.Tensor:
        pooled, _ = self.attention(inputs.embeddings, inputs.emb_mask)
        return pooled

    def forward(self, inputs: FeatureInputs) -> FusedFeatures:  # pylint: disable=arguments-differ
        if not self.pca_fitted:
            raise DataError("news PCA basis has not been fitted")
        macro_state = self.lstm(inputs.macro_windows)[inputs.period_index]
        news = dc.pca_transform(self.basis, self.pooled(inputs))
        news = news * inputs.has_news.to(dc.DTYPE).unsqueeze(-1)
        firm = inputs.firm
        ablated = set(self.config.ablate_channels)
        if Channel.MACRO in ablated:
            macro_state = torch.zeros_like(macro_state)
        if Channel.FIRM in ablated:
            firm = torch.zeros_like(firm)
        if Channel.NEWS in ablated:
            news = torch.zeros_like(news)
        return fuse(macro_state, firm, news, self.feature_names)


def fit_news_pca(
    inputs: FeatureInputs, params: AttentionPooling, d_N: int  # pylint: disable=invalid-name
) -> dc.PcaBasis:
    """Fit the news basis on the pooled embeddings of a (training) slice."""
    with torch.no_grad():
        pooled, _ = params(inputs.embeddings, inputs.emb_mask)
    samples = pooled[inputs.has_news]
    n = int(samples.shape[0])
    if n < d_N + 1:
        raise DataError(f"fit_news_pca: need at least {d_N + 1} nonempty news rows, got {n}")
    basis = dc.pca_fit(samples, d_N)
    if float(basis.explained_variance.sum()) <= 0.0:
        raise DataError(
            f"fit_news_pca: pooled embeddings have zero covariance rank ({n} identical rows)"
        )
    residual = samples - dc.pca_inverse(basis, dc.pca_transform(basis, samples))
    spread = float(dc.sq_norm(samples - basis.mean))
    unexplained = float(dc.sq_norm(residual)) / spread if spread > 0.0 else 0.0
    logger.info(
        f"Fitted news PCA on {n} pooled embeddings: top variance "
        f"{float(basis.explained_variance[0]):.4g}, unexplained share {unexplained:.3f}"
    )
    return basis
