"""Tests for the synthetic panel generator and its planted kernel."""
import numpy as np
import pandas as pd
import pytest
from scipy.stats import linregress  # type: ignore

from app.core.errors import ConfigError, DataError
from app.models.schemas import SignalChannel, SynthConfig
from app.services.synth_service import (ORACLE_COLUMNS, generate, load_oracle,
                                        oracle_metrics, period_labels,
                                        planted_kernel, planted_multiplier,
                                        write_oracle)


def synth(**overrides):
    values = dict(n_assets=12, n_periods=30, d_F=2, d_macro=2, d_emb=4, d_N=2, window_K=2,
                  seed=5)
    values.update(overrides)
    return SynthConfig(**values)


class TestGenerate:
    def test_shapes_and_ids(self):
        data = generate(synth())
        assert data.panel.n_observations == 12 * 30
        assert data.panel.characteristic_names == ("char_1", "char_2")
        assert data.panel.assets[0] == "A001"
        assert data.macro.periods[0] == -1 and data.macro.periods[-1] == 30
        assert list(data.oracle.columns) == ORACLE_COLUMNS
        assert data.embeddings.dim == 4

    def test_same_seed_is_identical(self):
        a, b = generate(synth()), generate(synth())
        pd.testing.assert_frame_equal(a.panel.frame, b.panel.frame, check_exact=True)
        pd.testing.assert_frame_equal(a.oracle, b.oracle, check_exact=True)
        assert set(a.embeddings.vectors) == set(b.embeddings.vectors)

    def test_other_seed_differs(self):
        a, b = generate(synth()), generate(synth(seed=6))
        assert not np.array_equal(a.panel.returns, b.panel.returns)

    def test_sentence_counts_within_bounds(self):
        data = generate(synth(sentences_min=1, sentences_max=3))
        counts = [data.embeddings.count(p, a) for p, a in
                  zip(data.panel.frame["period"], data.panel.frame["asset_id"])]
        assert min(counts) >= 1 and max(counts) <= 3

    def test_infeasible_sentence_bounds(self):
        with pytest.raises(Exception):
            synth(sentences_min=3, sentences_max=1)
        config = synth().model_copy(update={"sentences_min": 5, "sentences_max": 1})
        with pytest.raises(ConfigError):
            generate(config)


class TestPlantedKernel:
    def test_multiplier_formula(self):
        config = synth(factor_mean=0.02, factor_vol=0.05, noise_std=0.1)
        beta = np.array([1.0, 2.0])
        expected = 0.02 / (0.01 + (0.0004 + 0.0025) * 5.0)
        assert planted_multiplier(config, beta) == pytest.approx(expected)

    def test_oracle_weights_are_scaled_loadings(self):
        data = generate(synth())
        oracle = data.oracle
        for _, group in oracle.groupby("period"):
            ratio = group["true_weight"] / group["true_beta"]
            assert ratio.std() == pytest.approx(0.0, abs=1e-12)

    def test_kernel_matches_weights(self):
        data = generate(synth())
        kernel = planted_kernel(data.oracle, data.panel)
        first = data.panel.frame[data.panel.frame["period"] == 1]
        w = data.oracle[data.oracle["period"] == 1]["true_weight"].to_numpy()
        assert kernel.loc[1] == pytest.approx(1.0 - float(w @ first["excess_return_next"].to_numpy()))

    def test_noiseless_oracle_has_zero_mspe(self):
        data = generate(synth(noise_std=0.0, factor_vol=0.0))
        report = oracle_metrics(data.oracle, data.panel, beta_window=5)
        assert report.mspe == pytest.approx(0.0, abs=1e-20)
        assert report.ev == pytest.approx(1.0)

    def test_oracle_uses_true_loadings(self):
        data = generate(synth())
        report = oracle_metrics(data.oracle, data.panel, bounds=(10, 30), split_name="test")
        assert report.name == "oracle" and report.split == "test"
        assert report.first_period == 10 and report.n_periods == 21
        assert report.ev is not None and report.xs_r2 is not None

    def test_oracle_must_cover_panel(self):
        data = generate(synth())
        with pytest.raises(DataError, match="asset-set mismatch"):
            planted_kernel(data.oracle.iloc[1:], data.panel)
        last = data.oracle["period"].max()
        with pytest.raises(DataError, match="cover panel period"):
            planted_kernel(data.oracle[data.oracle["period"] < last], data.panel)


class TestSignalChannels:
    def test_news_loading_is_linear_in_latent(self):
        data = generate(synth(signal=SignalChannel.NEWS, news_coefficient=0.7))
        fit = linregress(data.oracle["latent"], data.oracle["true_beta"])
        assert fit.slope == pytest.approx(0.7)
        assert fit.rvalue ** 2 == pytest.approx(1.0)

    def test_firm_only_ignores_latent(self):
        data = generate(synth(signal=SignalChannel.FIRM))
        fit = linregress(data.oracle["latent"], data.oracle["true_beta"])
        assert abs(fit.rvalue) < 0.2

    def test_embeddings_carry_latent_direction(self):
        data = generate(synth(signal=SignalChannel.NEWS, embedding_noise=0.0, sentences_min=1))
        first = data.oracle.iloc[0]
        block = data.embeddings.get(int(first["period"]), first["asset_id"])
        norms = np.linalg.norm(block, axis=1)
        np.testing.assert_allclose(norms, abs(first["latent"]), rtol=1e-12)

    def test_monotone_scenario_spreads_loadings(self):
        base = generate(synth())
        wide = generate(synth(scenario="monotone"))
        assert wide.oracle["true_beta"].std() > 2.0 * base.oracle["true_beta"].std()


class TestFiles:
    def test_oracle_round_trip(self, tmp_path):
        data = generate(synth())
        write_oracle(data.oracle, tmp_path / "oracle.csv")
        loaded = load_oracle(tmp_path / "oracle.csv")
        pd.testing.assert_frame_equal(loaded, data.oracle, check_exact=False, rtol=1e-14)

    def test_missing_oracle(self, tmp_path):
        with pytest.raises(DataError, match="not found"):
            load_oracle(tmp_path / "oracle.csv")

    def test_period_labels_are_monthly(self):
        labels = period_labels(14)
        assert labels[1] == "2000-01" and labels[13] == "2001-01" and len(labels) == 14
