"""
Adversarial training service.

Minimizes over phi (attention, LSTM, SDF network) and maximizes over psi
(conditional network) the loss

    L = (1/N) sum_i (T_i / T) ||m_i||^2 + lambda (||phi||^2 + ||psi||^2)

by alternating gradient ascent on psi and descent on phi over minibatches of
whole periods, keeping the parameters with the best validation loss.
"""
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Union

import pandas as pd
import torch
from loguru import logger
from tqdm import tqdm  # type: ignore

from app.core import diffcore as dc
from app.core.errors import DataError, NumericalError
from app.data.checkpoint import Checkpoint
from app.data.panel import Dataset, split
from app.models.schemas import (Channel, FeatureConfig, LossConfig,
                                NetworkConfig, SplitSpec)
from app.services.feature_service import FeatureInputs, build_inputs, fit_news_pca
from app.services.sdf_service import SdfModel, moments
from app.utils.seeding import torch_generator
from config.settings import settings

LOG_COLUMNS = ["iteration", "train_loss", "val_loss", "grad_norm_phi", "grad_norm_psi"]


# ---------------------------------------------------------------------------
# Model assembly
# ---------------------------------------------------------------------------


def prepare_inputs(
    dataset: Dataset, config: FeatureConfig, spec: SplitSpec
) -> Dict[str, FeatureInputs]:
    """Fixed feature inputs of the train / val / test slices."""
    parts = split(dataset.panel, spec)
    return {
        name: build_inputs(part, dataset.macro, dataset.embeddings, config)
        for name, part in parts.items()
    }


def build_model(
    dataset: Dataset,
    feature_config: FeatureConfig,
    network_config: NetworkConfig,
    train_inputs: FeatureInputs,
) -> SdfModel:
    """Initialize both networks and freeze the news PCA basis on the training slice."""
    model = SdfModel(
        feature_config,
        network_config,
        d_macro=dataset.macro.dim,
        d_emb=dataset.embeddings.dim,
        characteristic_names=dataset.panel.characteristic_names,
    )
    if Channel.NEWS in feature_config.ablate_channels:
        d_emb, d_n = dataset.embeddings.dim, feature_config.d_N
        model.pipeline.set_basis(
            dc.PcaBasis(
                torch.zeros(d_emb, dtype=dc.DTYPE),
                torch.zeros(d_n, d_emb, dtype=dc.DTYPE),
                torch.zeros(d_n, dtype=dc.DTYPE),
            )
        )
        logger.info("News channel ablated; PCA basis left at zero")
    else:
        basis = fit_news_pca(train_inputs, model.pipeline.attention, feature_config.d_N)
        model.pipeline.set_basis(basis)
    return model


def snapshot(
    model: SdfModel,
    config_digest: str,
    data_digest: str = "",
    iteration: int = 0,
    val_loss: Optional[float] = None,
    rng_state: Optional[torch.Tensor] = None,
) -> Checkpoint:
    tensors = {k: v.detach().clone() for k, v in model.state_dict().items()}
    metadata = {
        "feature_config": model.feature_config.model_dump(mode="json"),
        "network_config": model.network_config.model_dump(mode="json"),
        "d_macro": model.pipeline.lstm.d_macro,
        "d_emb": int(model.pipeline.pca_mean.shape[0]),
        "characteristic_names": list(model.pipeline.characteristic_names),
    }
    return Checkpoint(
        tensors=tensors,
        config_digest=config_digest,
        data_digest=data_digest,
        iteration=iteration,
        val_loss=val_loss,
        feature_names=model.pipeline.feature_names,
        metadata=metadata,
        rng_state=rng_state,
    )


def restore_model(checkpoint: Checkpoint) -> SdfModel:
    """Rebuild the model a checkpoint was taken from."""
    meta = checkpoint.metadata
    try:
        model = SdfModel(
            FeatureConfig(**meta["feature_config"]),
            NetworkConfig(**meta["network_config"]),
            d_macro=int(meta["d_macro"]),
            d_emb=int(meta["d_emb"]),
            characteristic_names=meta["characteristic_names"],
        )
        model.load_state_dict(checkpoint.tensors)
    except (KeyError, RuntimeError, ValueError) as e:
        raise DataError(f"checkpoint does not describe a model: {e}") from e
    model.pipeline.pca_fitted = True
    return model


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------


def regularizer(model: SdfModel) -> torch.Tensor:
    params = list(model.phi_parameters()) + list(model.psi_parameters())
    return sum((dc.sq_norm(p) for p in params), torch.zeros((), dtype=dc.DTYPE))


def empirical_loss(inputs: FeatureInputs, model: SdfModel, l2_lambda: float) -> torch.Tensor:
    """Moment penalty over the slice plus the L2 penalty on both sides.

    N counts assets with at least one observation in the slice, T the
    slice's periods.
    """
    if inputs.n_observations == 0:
        raise DataError("empirical_loss: empty panel slice")
    moment_set = moments(inputs, model)
    n_periods = len(inputs.period_values)
    weights = moment_set.counts / n_periods
    pricing = dc.reduce_mean(weights * (moment_set.values ** 2).sum(dim=1))
    loss = pricing + l2_lambda * regularizer(model)
    return dc.check_finite("empirical_loss", loss)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: pd.DataFrame
    iterations_run: int
    stopped_early: bool


def _optimizer(params, lr: float, kind: str, maximize: bool) -> torch.optim.Optimizer:
    if kind == "adam":
        return torch.optim.Adam(params, lr=lr, maximize=maximize)
    return torch.optim.SGD(params, lr=lr, maximize=maximize)


class AdversarialTrainer:
    """Alternating psi-ascent / phi-descent over period minibatches."""

    def __init__(
        self,
        model: SdfModel,
        config: LossConfig,
        config_digest: str = "",
        data_digest: str = "",
    ):
        self.model = model
        self.config = config
        self.config_digest = config_digest
        self.data_digest = data_digest
        self.generator = torch_generator(config.seed, "train")
        self.phi_optimizer = _optimizer(
            list(model.phi_parameters()), config.lr_phi, config.optimizer, maximize=False
        )
        self.psi_optimizer = _optimizer(
            list(model.psi_parameters()), config.lr_psi, config.optimizer, maximize=True
        )
        self.grad_norm_phi = 0.0
        self.grad_norm_psi = 0.0

    def sample_batch(self, inputs: FeatureInputs) -> FeatureInputs:
        periods = inputs.period_values
        size = min(self.config.batch_periods, len(periods))
        order = torch.randperm(len(periods), generator=self.generator)[:size]
        return inputs.subset(periods[order.numpy()])

    def _loss(self, batch: FeatureInputs) -> torch.Tensor:
        return empirical_loss(batch, self.model, self.config.l2_lambda)

    def psi_step(self, batch: FeatureInputs) -> float:
        graph = dc.Graph.from_modules(self.model.psi_modules())
        loss = self._loss(batch)
        dc.backward(graph, loss)
        self.grad_norm_psi = graph.grad_norm()
        self.psi_optimizer.step()
        return float(loss)

    def phi_step(self, batch: FeatureInputs) -> float:
        graph = dc.Graph.from_modules(self.model.phi_modules())
        loss = self._loss(batch)
        dc.backward(graph, loss)
        self.grad_norm_phi = graph.grad_norm()
        self.phi_optimizer.step()
        return float(loss)

    def joint_step(self, batch: FeatureInputs) -> float:
        """One forward pass feeding both the ascent and the descent step."""
        modules = {**self.model.phi_modules(), **self.model.psi_modules()}
        graph = dc.Graph.from_modules(modules)
        loss = self._loss(batch)
        dc.backward(graph, loss)
        psi_names = [n for n in graph.grads if n.startswith("cond.")]
        phi_names = [n for n in graph.grads if not n.startswith("cond.")]
        self.grad_norm_psi = graph.grad_norm(psi_names)
        self.grad_norm_phi = graph.grad_norm(phi_names)
        self.psi_optimizer.step()
        self.phi_optimizer.step()
        return float(loss)

    def iteration(self, inputs: FeatureInputs) -> None:
        batch = self.sample_batch(inputs)
        cfg = self.config
        if cfg.reuse_forward:
            for _ in range(cfg.psi_steps - 1):
                self.psi_step(batch)
            self.joint_step(batch)
            for _ in range(cfg.phi_steps - 1):
                self.phi_step(batch)
            return
        for _ in range(cfg.psi_steps):
            self.psi_step(batch)
        for _ in range(cfg.phi_steps):
            self.phi_step(batch)

    def evaluate(self, inputs: FeatureInputs) -> float:
        with torch.no_grad():
            return float(self._loss(inputs))

    def snapshot(self, iteration: int, val_loss: Optional[float]) -> Checkpoint:
        return snapshot(
            self.model,
            self.config_digest,
            self.data_digest,
            iteration,
            val_loss,
            self.generator.get_state(),
        )

    def fit(self, train_inputs: FeatureInputs, val_inputs: FeatureInputs) -> TrainResult:
        if train_inputs.n_observations == 0 or val_inputs.n_observations == 0:
            raise DataError("train: training and validation slices must be nonempty")
        cfg = self.config
        rows: List[Dict[str, float]] = []

        def record(iteration: int) -> float:
            val_loss = self.evaluate(val_inputs)
            rows.append(
                {
                    "iteration": iteration,
                    "train_loss": self.evaluate(train_inputs),
                    "val_loss": val_loss,
                    "grad_norm_phi": self.grad_norm_phi,
                    "grad_norm_psi": self.grad_norm_psi,
                }
            )
            return val_loss

        best_loss = record(0)
        best = self.snapshot(0, best_loss)
        stale = 0
        stopped_early = False
        iteration = 0
        logger.info(
            f"Training for up to {cfg.iterations} iterations "
            f"({cfg.optimizer}, lr_phi={cfg.lr_phi}, lr_psi={cfg.lr_psi}); "
            f"initial val loss {best_loss:.6g}"
        )

        progress = tqdm(
            range(1, cfg.iterations + 1), desc="train", disable=not settings.progress_bar
        )
        try:
            for iteration in progress:
                self.iteration(train_inputs)
                if iteration % cfg.eval_interval and iteration != cfg.iterations:
                    continue
                val_loss = record(iteration)
                logger.debug(
                    f"iter {iteration}: train {rows[-1]['train_loss']:.6g} val {val_loss:.6g}"
                )
                if val_loss < best_loss:
                    best_loss, best, stale = val_loss, self.snapshot(iteration, val_loss), 0
                else:
                    stale += 1
                    if stale >= cfg.patience:
                        stopped_early = True
                        logger.info(f"Early stop at iteration {iteration} (patience {cfg.patience})")
                        break
        except NumericalError as e:
            logger.error(f"Training diverged at iteration {iteration}: {e}")
            raise NumericalError(
                f"training diverged at iteration {iteration}: {e}", last_good=best
            ) from e

        history = pd.DataFrame(rows, columns=LOG_COLUMNS)
        logger.info(f"Best validation loss {best_loss:.6g} at iteration {best.iteration}")
        return TrainResult(best, history, iteration, stopped_early)


def train(
    model: SdfModel,
    train_inputs: FeatureInputs,
    val_inputs: FeatureInputs,
    config: LossConfig,
    config_digest: str = "",
    data_digest: str = "",
) -> TrainResult:
    """Run the minimax loop on ``model`` in place; returns the best checkpoint."""
    trainer = AdversarialTrainer(model, config, config_digest, data_digest)
    return trainer.fit(train_inputs, val_inputs)


def write_training_log(history: pd.DataFrame, path: Union[str, Path]) -> None:
    history.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def parameter_norm(model: SdfModel) -> float:
    return float(regularizer(model).detach()) ** 0.5
