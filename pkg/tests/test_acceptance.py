"""End-to-end behavior on synthetic panels with a known pricing kernel.

The training runs are marked slow; deselect them with ``-m "not slow"``. Each
slow test records the numbers it compared through ``record_property``, so a
run with ``--junitxml`` keeps them next to the verdict.
"""
import hashlib

import numpy as np
import pytest
from click.testing import CliRunner

from app.cli.common import CHECKPOINT_FILE
from app.data.panel import RETURN_COLUMN
from app.models.schemas import SynthConfig
from app.services.evaluation_service import evaluate_model
from app.services.synth_service import generate, oracle_evaluation, planted_kernel, to_dataset
from app.services.training_service import build_model, prepare_inputs, train
from main import cli
from tests.conftest import TINY_KEYS, tiny_config, write_config

# l2_lambda keeps lambda * ||theta||^2 (about 0.06 at initialization for these
# widths when lambda = 1e-3) well below the pricing term, so the validation
# loss tracks pricing errors rather than the penalty.
DESK_KEYS = dict(
    d_a=8, d_I=4, d_N=4, window_K=6, h1=16, h2=8, h3=8, h_g=8, d_g=4,
    iterations=3000, eval_interval=100, patience=10, batch_periods=8,
    optimizer="adam", lr_phi=1e-3, lr_psi=1e-3, l2_lambda=1e-6, beta_window=24,
    synth_assets=50, synth_periods=350, synth_chars=4, synth_macro=3, synth_emb_dim=8,
    train_start=1, train_end=200, val_start=201, val_end=250, test_start=251, test_end=350,
)


def sha256(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def fit_and_evaluate(config):
    data = generate(config.synth_config())
    dataset = to_dataset(data)
    spec = config.split_spec()
    inputs = prepare_inputs(dataset, config.feature_config(), spec)
    model = build_model(dataset, config.feature_config(), config.network_config(), inputs["train"])
    result = train(model, inputs["train"], inputs["val"], config.loss_config(), config.digest)
    report = evaluate_model(model, dataset, spec, "test", config.beta_window).report
    oracle = oracle_evaluation(
        data.oracle, data.panel, spec.ranges()["test"], "test", config.beta_window
    ).report
    return result, report, oracle


def test_pipeline_twice_gives_identical_artifacts(tmp_path):
    digests = []
    for run in ("first", "second"):
        root = tmp_path / run
        root.mkdir()
        config = write_config(root / "run.cfg", TINY_KEYS)
        runner = CliRunner()
        for args in (
            ["synth", "--config", config, "--out", root / "data"],
            ["train", "--config", config, "--data", root / "data", "--out", root / "train"],
            ["eval", "--checkpoint", root / "train" / CHECKPOINT_FILE,
             "--data", root / "data", "--out", root / "eval"],
        ):
            result = runner.invoke(cli, [str(a) for a in args])
            assert result.exit_code == 0, result.output
        digests.append(
            (sha256(root / "train" / CHECKPOINT_FILE), sha256(root / "eval" / "report.json"))
        )
    assert digests[0] == digests[1]


def test_desk_config_is_valid():
    config = tiny_config(**DESK_KEYS)
    assert config.split_spec().ranges()["test"] == (251, 350)
    assert config.synth_config().n_periods == 350
    assert tiny_config(**dict(DESK_KEYS, synth_scenario="monotone")).synth_config().noise_std == 0.005


@pytest.mark.slow
class TestPlantedMoments:
    """The generator's kernel prices every asset against arbitrary time-t instruments."""

    @pytest.fixture(scope="class")
    def long_panel(self):
        config = SynthConfig(
            n_assets=3, n_periods=10000, d_F=2, d_macro=1, d_emb=2, d_N=1, window_K=0,
            sentences_min=0, sentences_max=0, factor_mean=0.03, seed=17,
        )
        return generate(config)

    def pricing_errors(self, data, weight_scale, instrument):
        oracle = data.oracle.copy()
        oracle["true_weight"] *= weight_scale
        kernel = planted_kernel(oracle, data.panel)
        frame = data.panel.frame
        products = kernel.loc[frame["period"]].to_numpy() * frame[RETURN_COLUMN].to_numpy()
        products = products * instrument
        by_asset = [products[(frame["asset_id"] == a).to_numpy()] for a in data.panel.assets]
        means = np.array([p.mean() for p in by_asset])
        se = np.array([p.std(ddof=1) / np.sqrt(len(p)) for p in by_asset])
        return means, se

    def instrument_draws(self, data, n_draws=8):
        rng = np.random.default_rng(99)
        chars = data.panel.frame[list(data.panel.characteristic_names)].to_numpy()
        return [np.tanh(chars @ rng.normal(size=chars.shape[1])) for _ in range(n_draws)]

    def test_planted_kernel_within_three_standard_errors(self, long_panel, record_property):
        worst = 0.0
        for g in self.instrument_draws(long_panel):
            means, se = self.pricing_errors(long_panel, 1.0, g)
            worst = max(worst, float((np.abs(means) / se).max()))
        record_property("worst_t_statistic", worst)
        assert worst < 3.0

    def test_perturbed_kernel_violates_a_bound(self, long_panel, record_property):
        draws = self.instrument_draws(long_panel) + [np.ones(long_panel.panel.n_observations)]
        worst = 0.0
        for g in draws:
            means, se = self.pricing_errors(long_panel, 1.2, g)
            worst = max(worst, float((np.abs(means) / se).max()))
        record_property("worst_t_statistic", worst)
        assert worst > 3.0


@pytest.mark.slow
class TestRecovery:
    def test_training_approaches_the_oracle(self, record_property):
        ratios = []
        for seed in (1, 2, 3):
            result, report, oracle = fit_and_evaluate(tiny_config(**dict(DESK_KEYS, seed=seed)))
            history = result.history
            reduction = history["val_loss"].min() / history["val_loss"].iloc[0]
            record_property(f"val_loss_reduction_seed{seed}", reduction)
            record_property(f"sharpe_seed{seed}", report.sharpe)
            record_property(f"oracle_sharpe_seed{seed}", oracle.sharpe)
            assert reduction < 0.1
            ratios.append(report.sharpe / oracle.sharpe)
        record_property("mean_sharpe_ratio", float(np.mean(ratios)))
        assert np.mean(ratios) >= 0.7

    def test_monotone_scenario_sorts_deciles(self, record_property):
        config = tiny_config(**dict(DESK_KEYS, seed=4, synth_scenario="monotone"))
        _, report, _ = fit_and_evaluate(config)
        record_property("monotonicity", report.monotonicity)
        assert report.monotonicity >= 0.9

    def test_removing_news_hurts_when_news_carries_the_signal(self, record_property):
        for seed in (5, 6, 7):
            keys = dict(DESK_KEYS, seed=seed, synth_signal="news")
            _, full, _ = fit_and_evaluate(tiny_config(**keys))
            _, ablated, _ = fit_and_evaluate(tiny_config(**keys, ablate_channels="news"))
            record_property(f"sharpe_full_seed{seed}", full.sharpe)
            record_property(f"sharpe_ablated_seed{seed}", ablated.sharpe)
            assert ablated.sharpe < full.sharpe
