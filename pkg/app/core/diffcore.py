"""
Numeric substrate: float64 tensor ops with reverse-mode gradients and PCA.

Tensors are plain ``torch.Tensor`` objects in float64. torch records each op
on its define-by-run autograd tape; ``Graph`` is the registry of named leaves
whose gradients a training step needs, rebuilt for every minibatch.
"""
from dataclasses import dataclass
from typing import Dict, Iterable, Optional, Sequence, Union

import numpy as np
import torch
from loguru import logger
from torch import nn

from app.core.errors import DataError, NumericalError, ShapeError

DTYPE = torch.float64

ArrayLike = Union[torch.Tensor, np.ndarray, Sequence[float], float]


def as_tensor(values: ArrayLike) -> torch.Tensor:
    """Convert to a float64 tensor without copying when already float64."""
    if isinstance(values, torch.Tensor):
        return values if values.dtype == DTYPE else values.to(DTYPE)
    return torch.as_tensor(np.asarray(values, dtype=np.float64), dtype=DTYPE)


def check_finite(op: str, tensor: torch.Tensor) -> torch.Tensor:
    """Abort with diagnostics when ``tensor`` holds NaN or Inf."""
    finite = torch.isfinite(tensor)
    if not bool(finite.all()):
        n_nan = int(torch.isnan(tensor).sum())
        n_inf = int(torch.isinf(tensor).sum())
        logger.error(f"{op}: non-finite output, shape={tuple(tensor.shape)}")
        raise NumericalError(
            f"{op}: non-finite output (nan={n_nan}, inf={n_inf}, "
            f"shape={tuple(tensor.shape)})"
        )
    return tensor


# ---------------------------------------------------------------------------
# Differentiable op set
# ---------------------------------------------------------------------------


def affine(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """``x @ weight.T + bias`` over the last axis of ``x``."""
    if weight.dim() != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError("affine", x.shape, weight.shape)
    if bias.shape != (weight.shape[0],):
        raise ShapeError("affine", weight.shape, bias.shape)
    return check_finite("affine", x @ weight.T + bias)


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.relu(x)


def tanh(x: torch.Tensor) -> torch.Tensor:
    return torch.tanh(x)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def softmax(
    x: torch.Tensor, dim: int = -1, mask: Optional[torch.Tensor] = None
) -> torch.Tensor:
    """Softmax over ``dim``; masked-out entries get probability 0.

    Rows with no unmasked entry come out as all zeros.
    """
    if mask is None:
        return check_finite("softmax", torch.softmax(x, dim=dim))
    if mask.shape != x.shape:
        raise ShapeError("softmax", x.shape, mask.shape)
    filled = x.masked_fill(~mask, torch.finfo(DTYPE).min)
    probs = torch.softmax(filled, dim=dim) * mask.to(DTYPE)
    return check_finite("softmax", probs)


def _broadcast(op: str, a: torch.Tensor, b: torch.Tensor) -> None:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError as e:
        raise ShapeError(op, a.shape, b.shape) from e


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _broadcast("add", a, b)
    return check_finite("add", a + b)


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _broadcast("mul", a, b)
    return check_finite("mul", a * b)


def reduce_sum(x: torch.Tensor, dim: Optional[int] = None) -> torch.Tensor:
    return x.sum() if dim is None else x.sum(dim=dim)


def reduce_mean(x: torch.Tensor, dim: Optional[int] = None) -> torch.Tensor:
    return x.mean() if dim is None else x.mean(dim=dim)


def concat(tensors: Sequence[torch.Tensor], dim: int = -1) -> torch.Tensor:
    """Concatenate along ``dim``; all other axes must agree."""
    if not tensors:
        raise ShapeError("concat")
    ref = tensors[0]
    axis = dim % ref.dim()
    for other in tensors[1:]:
        if other.dim() != ref.dim() or any(
            other.shape[k] != ref.shape[k] for k in range(ref.dim()) if k != axis
        ):
            raise ShapeError("concat", ref.shape, other.shape)
    return torch.cat(list(tensors), dim=dim)


def sq_norm(x: torch.Tensor) -> torch.Tensor:
    """Squared L2 norm over all entries."""
    return (x * x).sum()


# ---------------------------------------------------------------------------
# Leaf registry and backward pass
# ---------------------------------------------------------------------------


class Graph:
    """Named leaves of one forward pass and their gradient slots."""

    def __init__(self) -> None:
        self._leaves: Dict[str, torch.Tensor] = {}
        self._trainable: Dict[str, bool] = {}
        self.grads: Dict[str, torch.Tensor] = {}

    def leaf(self, name: str, value: torch.Tensor, trainable: bool = True) -> torch.Tensor:
        """Register ``value`` under ``name`` and return it."""
        if name in self._leaves:
            raise DataError(f"leaf '{name}' registered twice")
        if trainable and not value.requires_grad:
            value.requires_grad_(True)
        self._leaves[name] = value
        self._trainable[name] = trainable
        if trainable:
            self.grads[name] = torch.zeros_like(value, dtype=DTYPE)
        return value

    def register_module(self, module: nn.Module, prefix: str, trainable: bool = True) -> None:
        for name, param in module.named_parameters():
            self.leaf(f"{prefix}.{name}", param, trainable=trainable)

    @classmethod
    def from_modules(cls, modules: Dict[str, nn.Module]) -> "Graph":
        graph = cls()
        for prefix, module in modules.items():
            graph.register_module(module, prefix)
        return graph

    def trainable(self) -> Dict[str, torch.Tensor]:
        return {n: t for n, t in self._leaves.items() if self._trainable[n]}

    def zero_grad(self) -> None:
        for name, leaf in self.trainable().items():
            self.grads[name] = torch.zeros_like(leaf, dtype=DTYPE)
            leaf.grad = None

    def grad_norm(self, names: Optional[Iterable[str]] = None) -> float:
        keys = list(names) if names is not None else list(self.grads)
        return float(sum(float(sq_norm(self.grads[k])) for k in keys) ** 0.5)


def backward(graph: Graph, loss: torch.Tensor) -> Dict[str, torch.Tensor]:
    """Populate the gradient slot of every trainable leaf of ``graph``.

    Slots are zeroed first, so repeated calls after re-running the forward
    pass are independent. The gradients are also written to ``.grad`` so
    torch optimizers can consume them.
    """
    if loss.dim() != 0:
        raise ShapeError("backward", loss.shape, ())
    check_finite("backward(loss)", loss.detach())
    graph.zero_grad()
    leaves = graph.trainable()
    if not leaves or not loss.requires_grad:
        return graph.grads
    grads = torch.autograd.grad(
        loss, list(leaves.values()), allow_unused=True, retain_graph=False
    )
    for (name, leaf), grad in zip(leaves.items(), grads):
        slot = torch.zeros_like(leaf) if grad is None else grad.detach()
        check_finite(f"backward({name})", slot)
        graph.grads[name] = slot
        leaf.grad = slot.clone()
    return graph.grads


def input_gradient(fn, x: torch.Tensor) -> torch.Tensor:
    """Gradient of ``fn(x).sum()`` with respect to ``x``.

    For a row-wise map this is the per-row input gradient.
    """
    point = x.detach().clone().requires_grad_(True)
    out = fn(point)
    (grad,) = torch.autograd.grad(out.sum(), point, allow_unused=True)
    if grad is None:
        return torch.zeros_like(point)
    return check_finite("input_gradient", grad.detach())


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PcaBasis:
    """Fitted principal directions (rows of ``components``)."""

    mean: torch.Tensor
    components: torch.Tensor
    explained_variance: torch.Tensor

    @property
    def input_dim(self) -> int:
        return int(self.mean.shape[0])

    @property
    def n_components(self) -> int:
        return int(self.components.shape[0])


def pca_fit(samples: ArrayLike, k: int) -> PcaBasis:
    """Top-``k`` eigenvectors of the sample covariance (divisor n-1).

    Each component is signed so that its largest-magnitude entry is positive.
    """
    x = as_tensor(samples).detach()
    if x.dim() != 2:
        raise ShapeError("pca_fit", x.shape)
    n, d = x.shape
    if n < 2:
        raise DataError(f"pca_fit: need at least 2 samples, got {n}")
    if not 1 <= k <= min(n - 1, d):
        raise DataError(f"pca_fit: k={k} outside [1, {min(n - 1, d)}] for n={n}, d={d}")
    check_finite("pca_fit(samples)", x)

    mean = x.mean(dim=0)
    centered = x - mean
    cov = centered.T @ centered / (n - 1)
    cov = 0.5 * (cov + cov.T)
    eigvals, eigvecs = torch.linalg.eigh(cov)
    order = torch.argsort(eigvals, descending=True, stable=True)[:k]
    components = eigvecs[:, order].T.contiguous()
    pivots = components.abs().argmax(dim=1)
    signs = torch.sign(components[torch.arange(k), pivots])
    signs[signs == 0] = 1.0
    components = components * signs[:, None]
    variance = eigvals[order].clamp(min=0.0)

    return PcaBasis(
        mean=mean.clone(),
        components=components.clone(),
        explained_variance=variance.clone(),
    )


def pca_transform(basis: PcaBasis, x: torch.Tensor) -> torch.Tensor:
    """``components @ (x - mean)`` for a vector or a batch of row vectors."""
    if x.shape[-1] != basis.input_dim:
        raise ShapeError("pca_transform", x.shape, basis.mean.shape)
    return (x - basis.mean) @ basis.components.T


def pca_inverse(basis: PcaBasis, z: torch.Tensor) -> torch.Tensor:
    if z.shape[-1] != basis.n_components:
        raise ShapeError("pca_inverse", z.shape, basis.components.shape)
    return z @ basis.components + basis.mean


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def glorot_uniform(shape: Sequence[int], generator: torch.Generator) -> torch.Tensor:
    """Uniform in +-sqrt(6 / (fan_in + fan_out)); vectors use fan_in = 1."""
    fan_out = int(shape[0])
    fan_in = int(shape[1]) if len(shape) > 1 else 1
    bound = (6.0 / (fan_in + fan_out)) ** 0.5
    return torch.empty(tuple(shape), dtype=DTYPE).uniform_(-bound, bound, generator=generator)
