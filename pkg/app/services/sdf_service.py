"""
SDF and conditional-instrument networks plus the pricing algebra.

w_{t,i} comes from a ReLU MLP on x_{t,i}; the pricing kernel of period t is
M_{t+1} = 1 - sum_i w_{t,i} R^e_{t+1,i}; instruments g_{t,i} come from a
one-hidden-layer network, squashed by tanh unless disabled.
"""
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence

import pandas as pd
import torch
from torch import nn

from app.core import diffcore as dc
from app.core.errors import DataError, ShapeError
from app.models.schemas import FeatureConfig, NetworkConfig
from app.services.feature_service import FeatureInputs, FeaturePipeline


class SdfNetwork(nn.Module):
    """Three ReLU hidden layers and a scalar output layer."""

    def __init__(self, input_dim: int, config: NetworkConfig, generator: torch.Generator):
        super().__init__()
        self.input_dim = input_dim
        widths = [input_dim, config.h1, config.h2, config.h3, 1]
        self.weights = nn.ParameterList(
            nn.Parameter(dc.glorot_uniform((n_out, n_in), generator))
            for n_in, n_out in zip(widths[:-1], widths[1:])
        )
        self.biases = nn.ParameterList(
            nn.Parameter(torch.zeros(n_out, dtype=dc.DTYPE)) for n_out in widths[1:]
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Rows (n, d) -> weights (n,); a single vector gives a 0-dim scalar."""
        if x.shape[-1] != self.input_dim:
            raise ShapeError("sdf_weight", x.shape, (self.input_dim,))
        h = x
        last = len(self.weights) - 1
        for k, (weight, bias) in enumerate(zip(self.weights, self.biases)):
            h = dc.affine(h, weight, bias)
            if k < last:
                h = dc.relu(h)
        return h.squeeze(-1)


class ConditionalNetwork(nn.Module):
    """One ReLU hidden layer mapping x_{t,i} to d_g instruments."""

    def __init__(self, input_dim: int, config: NetworkConfig, generator: torch.Generator):
        super().__init__()
        self.input_dim = input_dim
        self.squash = config.instrument_squash
        self.W1 = nn.Parameter(dc.glorot_uniform((config.h_g, input_dim), generator))  # pylint: disable=invalid-name
        self.b1 = nn.Parameter(torch.zeros(config.h_g, dtype=dc.DTYPE))
        self.W2 = nn.Parameter(dc.glorot_uniform((config.d_g, config.h_g), generator))  # pylint: disable=invalid-name
        self.b2 = nn.Parameter(torch.zeros(config.d_g, dtype=dc.DTYPE))

    @property
    def output_dim(self) -> int:
        return int(self.b2.shape[0])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.input_dim:
            raise ShapeError("instruments", x.shape, (self.input_dim,))
        hidden = dc.relu(dc.affine(x, self.W1, self.b1))
        out = dc.affine(hidden, self.W2, self.b2)
        return dc.tanh(out) if self.squash else out


def sdf_weight(x: torch.Tensor, params: SdfNetwork) -> torch.Tensor:
    return params(dc.as_tensor(x))


def instruments(x: torch.Tensor, params: ConditionalNetwork) -> torch.Tensor:
    return params(dc.as_tensor(x))


def pricing_kernel(
    weights: torch.Tensor,
    returns: torch.Tensor,
    period_index: Optional[torch.Tensor] = None,
    n_periods: Optional[int] = None,
) -> torch.Tensor:
    """M = 1 - sum_i w_i R_i.

    Without ``period_index`` both vectors describe one period and a scalar is
    returned; with it, rows are scattered into ``n_periods`` kernels.
    """
    w, r = dc.as_tensor(weights), dc.as_tensor(returns)
    if w.shape != r.shape or w.dim() != 1:
        raise ShapeError("pricing_kernel", w.shape, r.shape)
    products = dc.mul(w, r)
    if period_index is None:
        return 1.0 - dc.reduce_sum(products)
    if period_index.shape != w.shape:
        raise ShapeError("pricing_kernel", w.shape, period_index.shape)
    size = int(n_periods) if n_periods is not None else int(period_index.max()) + 1
    factor = torch.zeros(size, dtype=dc.DTYPE).index_add(0, period_index, products)
    return 1.0 - factor


def aligned_kernel(weights: pd.Series, returns: pd.Series) -> float:
    """Kernel of one period from asset-indexed series; the asset sets must agree."""
    if set(weights.index) != set(returns.index):
        missing = sorted(set(weights.index) ^ set(returns.index))
        raise DataError(f"pricing_kernel: asset-set mismatch on {missing[:5]}")
    r = returns.reindex(weights.index)
    return float(pricing_kernel(weights.to_numpy(), r.to_numpy()))


@dataclass(frozen=True, eq=False)
class MomentSet:
    """Per-asset time-averaged moment vectors m_i (rows) and counts T_i."""

    values: torch.Tensor
    counts: torch.Tensor
    asset_ids: List[str]

    @property
    def n_assets(self) -> int:
        return int(self.values.shape[0])

    @property
    def d_g(self) -> int:
        return int(self.values.shape[1])


def moment_vectors(
    kernel_rows: torch.Tensor,
    returns: torch.Tensor,
    g: torch.Tensor,
    asset_codes: torch.Tensor,
    asset_ids: Sequence[str],
) -> MomentSet:
    """m_i = (1/T_i) sum_t M_{t+1} R_{t+1,i} g_{t,i}, with M already gathered per row."""
    if g.dim() != 2 or g.shape[0] != returns.shape[0] or kernel_rows.shape != returns.shape:
        raise ShapeError("moments", kernel_rows.shape, returns.shape, g.shape)
    n_assets = len(asset_ids)
    scaled = (kernel_rows * returns).unsqueeze(-1) * g
    sums = torch.zeros(n_assets, g.shape[1], dtype=dc.DTYPE).index_add(0, asset_codes, scaled)
    counts = torch.zeros(n_assets, dtype=dc.DTYPE).index_add(
        0, asset_codes, torch.ones_like(returns)
    )
    present = counts > 0
    values = sums[present] / counts[present].unsqueeze(-1)
    ids = [a for a, keep in zip(asset_ids, present.tolist()) if keep]
    return MomentSet(dc.check_finite("moments", values), counts[present], ids)


class SdfModel(nn.Module):
    """Feature extractors, SDF network (phi side) and conditional network (psi side)."""

    def __init__(
        self,
        feature_config: FeatureConfig,
        network_config: NetworkConfig,
        d_macro: int,
        d_emb: int,
        characteristic_names: Sequence[str],
    ):
        super().__init__()
        generator = torch.Generator().manual_seed(network_config.init_seed)
        self.feature_config = feature_config
        self.network_config = network_config
        self.pipeline = FeaturePipeline(
            feature_config, d_macro, d_emb, characteristic_names, generator
        )
        self.sdf = SdfNetwork(self.pipeline.output_dim, network_config, generator)
        self.cond = ConditionalNetwork(self.pipeline.output_dim, network_config, generator)

    def phi_modules(self) -> Dict[str, nn.Module]:
        return {
            "attention": self.pipeline.attention,
            "lstm": self.pipeline.lstm,
            "sdf": self.sdf,
        }

    def psi_modules(self) -> Dict[str, nn.Module]:
        return {"cond": self.cond}

    def phi_parameters(self) -> Iterator[nn.Parameter]:
        for module in self.phi_modules().values():
            yield from module.parameters()

    def psi_parameters(self) -> Iterator[nn.Parameter]:
        return self.cond.parameters()

    def forward(self, inputs: FeatureInputs):  # pylint: disable=arguments-differ
        """Fused features, SDF weights and instruments of every row."""
        features = self.pipeline(inputs)
        return features, self.sdf(features.x), self.cond(features.x)


def moments(inputs: FeatureInputs, model: SdfModel) -> MomentSet:
    """Moment vectors of a panel slice under the model's current parameters."""
    if inputs.n_observations == 0:
        raise DataError("moments: empty panel slice")
    _, w, g = model(inputs)
    kernel = pricing_kernel(w, inputs.returns, inputs.period_index, len(inputs.period_values))
    codes, asset_ids = inputs.asset_codes()
    return moment_vectors(kernel[inputs.period_index], inputs.returns, g, codes, asset_ids)
