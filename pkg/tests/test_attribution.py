"""Tests for gradient sensitivity and Shapley importance."""
from itertools import permutations

import numpy as np
import pytest
import torch

from app.core import diffcore as dc
from app.core.errors import DataError, NumericalError
from app.services.attribution_service import (exact_shapley, feature_groups,
                                              fused_features,
                                              model_sensitivity,
                                              normalize_importance,
                                              read_attribution_csv,
                                              sampled_shapley, sensitivity,
                                              shapley_importance,
                                              variance_value_fn,
                                              write_sensitivity, write_shapley)
from app.services.feature_service import build_inputs


def table_game(values):
    """Value function backed by a lookup over all 2^n coalitions."""
    return lambda mask: float(values[mask])


def brute_force_shapley(value_fn, n):
    orders = list(permutations(range(n)))
    phi = np.zeros(n)
    for order in orders:
        mask = 0
        for player in order:
            phi[player] += value_fn(mask | 1 << player) - value_fn(mask)
            mask |= 1 << player
    return phi / len(orders)


class TestSensitivity:
    def test_linear_map_gives_absolute_coefficients(self, rng):
        a = dc.as_tensor([1.5, -2.0, 0.0])
        report = sensitivity(lambda x: x @ a, dc.as_tensor(rng.normal(size=(20, 3))), ["p", "q", "r"])
        np.testing.assert_allclose(report.sensitivity, [1.5, 2.0, 0.0])
        assert report.n_samples == 20

    def test_row_order_invariance(self, rng):
        x = dc.as_tensor(rng.normal(size=(15, 2)))
        fn = lambda z: torch.tanh(z[:, 0] * z[:, 1])  # noqa: E731
        first = sensitivity(fn, x, ["a", "b"]).sensitivity
        second = sensitivity(fn, x[torch.as_tensor(rng.permutation(15))], ["a", "b"]).sensitivity
        np.testing.assert_allclose(first, second, rtol=1e-12)

    def test_input_validation(self):
        with pytest.raises(DataError, match="nonempty"):
            sensitivity(lambda x: x.sum(dim=1), torch.zeros(0, 2, dtype=dc.DTYPE), ["a", "b"])
        with pytest.raises(DataError, match="feature names"):
            sensitivity(lambda x: x.sum(dim=1), torch.zeros(3, 2, dtype=dc.DTYPE), ["a"])

    def test_model_sensitivity(self, tiny_model, tiny_inputs):
        report = model_sensitivity(tiny_model, tiny_inputs["test"], n_samples=10, seed=1)
        assert report.feature_names == list(tiny_model.pipeline.feature_names)
        assert report.n_samples == 10
        assert all(s >= 0 for s in report.sensitivity)
        again = model_sensitivity(tiny_model, tiny_inputs["test"], n_samples=10, seed=1)
        assert again.sensitivity == report.sensitivity

    @pytest.mark.parametrize("seed", range(5))
    def test_model_sensitivity_matches_central_differences(self, tiny_model, tiny_inputs, seed):
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for param in tiny_model.sdf.parameters():
                param.copy_(torch.randn(param.shape, dtype=dc.DTYPE, generator=gen))
        report = model_sensitivity(tiny_model, tiny_inputs["test"])

        x = fused_features(tiny_model, tiny_inputs["test"])
        h = 1e-6
        expected = []
        with torch.no_grad():
            for k in range(x.shape[1]):
                step = torch.zeros_like(x)
                step[:, k] = h
                slope = (tiny_model.sdf(x + step) - tiny_model.sdf(x - step)) / (2.0 * h)
                expected.append(float(slope.abs().mean()))
        assert report.n_samples == x.shape[0]
        np.testing.assert_allclose(report.sensitivity, expected, rtol=1e-5, atol=1e-7)


class TestShapleyEstimators:
    def test_additive_game(self):
        c = [0.5, 1.0, 2.5, -0.25]
        game = lambda mask: sum(c[p] for p in range(4) if mask >> p & 1)  # noqa: E731
        np.testing.assert_allclose(exact_shapley(game, 4).values, c)
        sampled = sampled_shapley(game, 4, 20, np.random.default_rng(0))
        np.testing.assert_allclose(sampled.values, c)
        np.testing.assert_allclose(sampled.standard_errors, 0.0, atol=1e-15)

    def test_exact_matches_permutation_enumeration(self, rng):
        for n in (1, 2, 3, 4):
            game = table_game(rng.normal(size=2 ** n))
            np.testing.assert_allclose(
                exact_shapley(game, n).values, brute_force_shapley(game, n), atol=1e-12
            )

    def test_efficiency(self, rng):
        values = rng.normal(size=2 ** 5)
        game = table_game(values)
        assert exact_shapley(game, 5).values.sum() == pytest.approx(values[-1] - values[0])
        sampled = sampled_shapley(game, 5, 7, rng)
        assert sampled.values.sum() == pytest.approx(values[-1] - values[0], abs=1e-12)

    def test_sampled_agrees_with_exact_on_three_players(self):
        c = np.array([0.3, 1.0, -0.6])
        game = lambda mask: float(sum(c[p] for p in range(3) if mask >> p & 1) ** 2)  # noqa: E731
        exact = exact_shapley(game, 3).values
        sampled = sampled_shapley(game, 3, 200, np.random.default_rng(11))
        assert (np.abs(sampled.values - exact) <= 3 * sampled.standard_errors + 1e-12).all()

    def test_ignored_group_scores_zero(self, rng):
        x = dc.as_tensor(rng.normal(size=(40, 3)))
        weight_fn = lambda z: torch.tanh(z[:, 0]) + 0.5 * z[:, 1]  # noqa: E731
        value_fn = variance_value_fn(weight_fn, x, [[0], [1], [2]])
        estimate = sampled_shapley(value_fn, 3, 200, np.random.default_rng(5))
        importance = normalize_importance(estimate.values)
        assert abs(importance[2]) < 0.02
        assert importance.sum() == pytest.approx(1.0)

    def test_value_function_endpoints(self, rng):
        x = dc.as_tensor(rng.normal(size=(30, 2)))
        weight_fn = lambda z: z[:, 0] - z[:, 1]  # noqa: E731
        value_fn = variance_value_fn(weight_fn, x, [[0], [1]])
        assert value_fn(0) == pytest.approx(0.0, abs=1e-15)
        assert value_fn(0b11) == pytest.approx(float(weight_fn(x).var(unbiased=False)))

    def test_zero_total_is_undefined(self):
        with pytest.raises(NumericalError, match="undefined"):
            normalize_importance(np.array([1.0, -1.0]))

    def test_permutations_required(self):
        with pytest.raises(DataError):
            sampled_shapley(lambda mask: 0.0, 2, 0, np.random.default_rng(0))


class TestShapleyImportance:
    def test_model_groups(self, tiny_model):
        groups = feature_groups(tiny_model)
        assert list(groups) == ["macro", "char_1", "char_2", "news_pc1", "news_pc2"]
        assert groups["macro"] == [0, 1]

    def test_buckets_normalized_and_reproducible(self, tiny_model, tiny_inputs):
        inputs = tiny_inputs["train"]
        report = shapley_importance(tiny_model, inputs, permutations=20, seed=3, n_buckets=2)
        assert report.buckets == ["1-6", "7-12"]
        assert report.exact
        for row in report.importance:
            assert sum(row) == pytest.approx(1.0)
        threaded = shapley_importance(
            tiny_model, inputs, permutations=20, seed=3, n_buckets=2, n_jobs=2
        )
        assert threaded.importance == report.importance

    def test_bucket_efficiency(self, tiny_model, tiny_inputs):
        inputs = tiny_inputs["val"]
        report = shapley_importance(tiny_model, inputs, permutations=10, seed=0)
        with torch.no_grad():
            _, w, _ = tiny_model(inputs)
        assert sum(report.raw_values[0]) == pytest.approx(float(w.var(unbiased=False)), rel=1e-9)

    def test_groups_must_partition(self, tiny_model, tiny_inputs):
        with pytest.raises(DataError, match="partition"):
            shapley_importance(tiny_model, tiny_inputs["val"], groups={"a": [0, 1]})

    def test_empty_slice(self, tiny_model, tiny_dataset, tiny_run_config):
        empty = build_inputs(
            tiny_dataset.panel.select_periods(100, 200), tiny_dataset.macro,
            tiny_dataset.embeddings, tiny_run_config.feature_config(),
        )
        with pytest.raises(DataError, match="empty"):
            shapley_importance(tiny_model, empty)


class TestOutputFiles:
    def test_csv_headers(self, tmp_path, tiny_model, tiny_inputs):
        inputs = tiny_inputs["val"]
        sens = model_sensitivity(tiny_model, inputs, config_digest="abc")
        write_sensitivity(sens, tmp_path / "sensitivity.csv", seed=9)
        text = (tmp_path / "sensitivity.csv").read_text(encoding="utf-8").splitlines()
        assert text[:2] == ["# seed=9", "# config_digest=abc"]
        frame = read_attribution_csv(tmp_path / "sensitivity.csv")
        assert frame.columns.tolist() == ["feature", "sensitivity"]

        shap = shapley_importance(tiny_model, inputs, permutations=5, seed=2, config_digest="abc")
        write_shapley(shap, tmp_path / "shapley.csv")
        frame = read_attribution_csv(tmp_path / "shapley.csv")
        assert frame.columns.tolist() == ["group", "bucket", "importance"]
        assert len(frame) == len(shap.groups) * len(shap.buckets)
