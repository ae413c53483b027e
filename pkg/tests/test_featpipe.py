"""Tests for rank normalization, attention pooling, the macro LSTM and fusion."""
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest
import torch
from loguru import logger

from app.core import diffcore as dc
from app.core.errors import DataError, ShapeError
from app.data.panel import EmbeddingSet, MacroSeries, Panel
from app.models.schemas import (Channel, EmptyNewsPolicy, FeatureConfig,
                                MissingCharPolicy)
from app.services.feature_service import (AttentionPooling, FeaturePipeline,
                                          MacroLstm, attend_pool,
                                          build_inputs, fit_news_pca, fuse,
                                          macro_encode, news_feature,
                                          rank_characteristics, rank_normalize)
from app.services.training_service import build_model, prepare_inputs
from tests.conftest import zero_parameters


def gen(seed=0):
    return torch.Generator().manual_seed(seed)


def small_panel(chars=None):
    frame = pd.DataFrame(
        {
            "period": [1, 1, 1, 2, 2, 2, 3, 3, 3],
            "asset_id": ["A", "B", "C"] * 3,
            "excess_return_next": np.linspace(-0.02, 0.02, 9),
            "size": chars if chars is not None else [3.0, 1.0, 2.0, 1, 2, 3, 5, 5, 1],
        }
    )
    return Panel(frame, ("size",))


def small_macro(first=-1, last=3, dim=2):
    periods = np.arange(first, last + 1)
    values = np.column_stack([np.sin(periods + j) for j in range(dim)])
    return MacroSeries(periods, values, tuple(f"m{j}" for j in range(dim)))


def small_embeddings(dim=3):
    rng = np.random.default_rng(0)
    return EmbeddingSet(
        dim,
        {
            (1, "A"): rng.normal(size=(2, dim)),
            (1, "B"): rng.normal(size=(1, dim)),
            (2, "C"): rng.normal(size=(3, dim)),
            (3, "A"): rng.normal(size=(1, dim)),
            (3, "C"): rng.normal(size=(2, dim)),
        },
    )


class TestRankNormalize:
    def test_ordered_values(self):
        np.testing.assert_allclose(rank_normalize([3.0, 1.0, 2.0]), [1.0, -1.0, 0.0])

    def test_ties_get_average_rank(self):
        np.testing.assert_allclose(rank_normalize([1.0, 1.0, 2.0]), [-0.5, -0.5, 1.0])

    def test_singleton_and_empty(self):
        assert rank_normalize([7.0]).tolist() == [0.0]
        assert rank_normalize([]).shape == (0,)

    def test_monotone_transform_invariance(self, rng):
        for _ in range(200):
            x = rng.normal(size=int(rng.integers(2, 30)))
            np.testing.assert_array_equal(rank_normalize(x), rank_normalize(np.exp(3 * x) + 1))
            out = rank_normalize(x)
            assert out.min() >= -1.0 and out.max() <= 1.0

    def test_complete_case_drops_missing(self):
        panel = small_panel([3.0, np.nan, 2.0, 1, 2, 3, 5, 5, 1])
        kept, ranked = rank_characteristics(panel, MissingCharPolicy.COMPLETE_CASE)
        assert kept.n_observations == 8
        np.testing.assert_allclose(ranked[:2, 0], [1.0, -1.0])

    def test_median_impute_fills_from_period(self):
        panel = small_panel([3.0, np.nan, 1.0, 1, 2, 3, 5, 5, 1])
        kept, ranked = rank_characteristics(panel, MissingCharPolicy.MEDIAN_IMPUTE)
        assert kept.n_observations == 9
        assert kept.frame["size"].iloc[1] == 2.0
        np.testing.assert_allclose(ranked[:3, 0], [1.0, 0.0, -1.0])


class TestAttention:
    def test_weights_form_a_distribution(self, rng):
        params = AttentionPooling(4, 3, gen())
        _, alpha = attend_pool(rng.normal(size=(5, 4)), params)
        assert alpha.shape == (5,)
        assert float(alpha.sum()) == pytest.approx(1.0, abs=1e-12)
        assert bool((alpha >= 0).all())

    def test_identical_sentences_pool_to_themselves(self):
        params = AttentionPooling(3, 2, gen())
        sentence = np.array([0.2, -0.5, 1.0])
        pooled, alpha = attend_pool(np.tile(sentence, (4, 1)), params)
        np.testing.assert_allclose(alpha.detach().numpy(), 0.25)
        np.testing.assert_allclose(pooled.detach().numpy(), sentence, atol=1e-12)

    def test_pooling_is_order_invariant(self, rng):
        params = AttentionPooling(4, 3, gen(1))
        e = rng.normal(size=(6, 4))
        a, _ = attend_pool(e, params)
        b, _ = attend_pool(e[rng.permutation(6)], params)
        assert torch.allclose(a, b, atol=1e-12)

    def test_no_sentences_gives_zero_vector(self):
        params = AttentionPooling(4, 3, gen())
        pooled, alpha = attend_pool(np.zeros((0, 4)), params)
        assert torch.equal(pooled, torch.zeros(4, dtype=dc.DTYPE))
        assert alpha.shape == (0,)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            attend_pool(np.zeros((2, 5)), AttentionPooling(4, 3, gen()))

    def test_gradients_match_finite_differences(self, rng):
        params = AttentionPooling(3, 2, gen(2))
        e = dc.as_tensor(rng.normal(size=(1, 4, 3)))
        mask = torch.tensor([[True, True, True, False]])

        def fn(w, b, v):
            scores = torch.tanh(e @ w.T + b) @ v
            alpha = dc.softmax(scores, mask=mask)
            return (alpha.unsqueeze(-1) * e).sum()

        args = tuple(p.detach().clone().requires_grad_(True) for p in (params.W, params.b, params.v))
        assert torch.autograd.gradcheck(fn, args, eps=1e-6, atol=1e-8)


class TestMacroLstm:
    def test_single_step_matches_gate_equations(self):
        params = MacroLstm(2, 3, gen(4))
        x = dc.as_tensor([0.3, -0.7])
        h = macro_encode(x.unsqueeze(0), params)
        z = torch.cat([x, torch.zeros(3, dtype=dc.DTYPE)])
        w, b = params.weights, params.biases
        gate = {g: w[g] @ z + b[g] for g in params.GATES}
        c = torch.sigmoid(gate["input"]) * torch.tanh(gate["candidate"])
        expected = torch.sigmoid(gate["output"]) * torch.tanh(c)
        assert torch.allclose(h, expected, atol=1e-14)

    def test_state_bounded_and_batch_consistent(self, rng):
        params = MacroLstm(2, 4, gen(5))
        windows = dc.as_tensor(rng.normal(size=(3, 5, 2)) * 10)
        batch = params(windows)
        assert bool((batch.abs() < 1).all())
        for n in range(3):
            assert torch.allclose(batch[n], macro_encode(windows[n], params), atol=1e-14)

    def test_rejects_wrong_width(self):
        with pytest.raises(ShapeError):
            macro_encode(np.zeros((3, 4)), MacroLstm(2, 3, gen()))


class TestFusion:
    def test_offsets_and_names(self):
        fused = fuse(torch.ones(2, 3), torch.zeros(2, 1), torch.full((2, 2), 2.0),
                     ("m1", "m2", "m3", "size", "n1", "n2"))
        assert fused.dim == 6
        assert fused.offsets[Channel.FIRM] == (3, 4)
        assert torch.equal(fused.channel(Channel.NEWS), torch.full((2, 2), 2.0))

    def test_name_count_mismatch(self):
        with pytest.raises(ShapeError):
            fuse(torch.ones(3), torch.ones(1), torch.ones(2), ("a", "b"))

    def test_news_feature_without_news_is_zero(self, rng):
        basis = dc.pca_fit(rng.normal(size=(10, 4)), 2)
        assert torch.equal(news_feature(None, basis), torch.zeros(2, dtype=dc.DTYPE))


class TestBuildInputs:
    def test_shapes_and_order(self):
        config = FeatureConfig(d_a=2, d_I=2, d_N=1, window_K=2)
        inputs = build_inputs(small_panel(), small_macro(), small_embeddings(), config)
        assert inputs.n_observations == 9
        assert inputs.macro_windows.shape == (3, 3, 2)
        assert inputs.embeddings.shape == (9, 3, 3)
        assert inputs.has_news.tolist() == [True, True, False, False, False, True, True, False, True]
        assert inputs.period_index.tolist() == [0, 0, 0, 1, 1, 1, 2, 2, 2]

    def test_incomplete_macro_window_excludes_periods(self):
        config = FeatureConfig(d_a=2, d_I=2, d_N=1, window_K=2)
        inputs = build_inputs(small_panel(), small_macro(first=1), small_embeddings(), config)
        assert inputs.period_values.tolist() == [3]
        assert inputs.n_observations == 3

    def test_carry_forward_reuses_latest_news(self):
        config = FeatureConfig(
            d_a=2, d_I=2, d_N=1, window_K=0, empty_news_policy=EmptyNewsPolicy.CARRY_FORWARD
        )
        embeddings = small_embeddings()
        inputs = build_inputs(small_panel(), small_macro(), embeddings, config)
        # (2, A) carries (1, A); (1, C) has no history.
        assert inputs.has_news.tolist()[2] is False
        np.testing.assert_array_equal(
            inputs.embeddings[3, :2].numpy(), embeddings.get(1, "A")
        )

    def test_subset_remaps_periods(self, tiny_inputs):
        train = tiny_inputs["train"]
        part = train.subset([3, 5])
        assert part.period_values.tolist() == [3, 5]
        assert set(part.period_index.tolist()) == {0, 1}
        assert part.n_observations == len(train.period_rows[3]) + len(train.period_rows[5])
        index = int(np.searchsorted(train.period_values, 5))
        assert torch.equal(part.macro_windows[1], train.macro_windows[index])


class TestPipeline:
    @pytest.fixture
    def pipeline_and_inputs(self):
        config = FeatureConfig(d_a=2, d_I=2, d_N=1, window_K=1)
        inputs = build_inputs(small_panel(), small_macro(), small_embeddings(), config)
        pipeline = FeaturePipeline(config, 2, 3, ("size",), gen(3))
        pipeline.set_basis(fit_news_pca(inputs, pipeline.attention, 1))
        return pipeline, inputs

    def test_feature_layout(self, pipeline_and_inputs):
        pipeline, inputs = pipeline_and_inputs
        fused = pipeline(inputs)
        assert fused.x.shape == (9, pipeline.output_dim)
        assert fused.feature_names == ("macro_state_1", "macro_state_2", "size", "news_pc1")
        assert torch.equal(fused.channel(Channel.FIRM), inputs.firm)

    def test_rows_without_news_get_zero_news(self, pipeline_and_inputs):
        pipeline, inputs = pipeline_and_inputs
        news = pipeline(inputs).channel(Channel.NEWS)
        assert bool((news[~inputs.has_news] == 0).all())

    def test_macro_state_shared_within_period(self, pipeline_and_inputs):
        pipeline, inputs = pipeline_and_inputs
        macro = pipeline(inputs).channel(Channel.MACRO)
        assert torch.equal(macro[0], macro[2])
        assert not torch.equal(macro[0], macro[3])

    @pytest.mark.parametrize("channel", list(Channel))
    def test_ablation_zeroes_channel(self, channel):
        config = FeatureConfig(d_a=2, d_I=2, d_N=1, window_K=1, ablate_channels=(channel,))
        inputs = build_inputs(small_panel(), small_macro(), small_embeddings(), config)
        pipeline = FeaturePipeline(config, 2, 3, ("size",), gen(3))
        pipeline.set_basis(fit_news_pca(inputs, pipeline.attention, 1))
        fused = pipeline(inputs)
        assert bool((fused.channel(channel) == 0).all())
        others = [c for c in Channel if c != channel]
        assert any(bool((fused.channel(c) != 0).any()) for c in others)

    def test_unfitted_basis_rejected(self):
        config = FeatureConfig(d_a=2, d_I=2, d_N=1, window_K=1)
        inputs = build_inputs(small_panel(), small_macro(), small_embeddings(), config)
        with pytest.raises(DataError, match="not been fitted"):
            FeaturePipeline(config, 2, 3, ("size",), gen())(inputs)

    def test_pca_needs_enough_news_rows(self):
        config = FeatureConfig(d_a=2, d_I=2, d_N=3, window_K=1)
        inputs = build_inputs(small_panel(), small_macro(), small_embeddings(), config)
        pipeline = FeaturePipeline(config, 2, 3, ("size",), gen())
        with pytest.raises(DataError):
            fit_news_pca(inputs.subset([1]), pipeline.attention, 3)

    def test_pca_rejects_identical_embeddings(self):
        config = FeatureConfig(d_a=2, d_I=2, d_N=1, window_K=1)
        same = {(p, a): np.ones((1, 3)) for p in (1, 2, 3) for a in ("A", "B")}
        inputs = build_inputs(small_panel(), small_macro(), EmbeddingSet(3, same), config)
        pipeline = FeaturePipeline(config, 2, 3, ("size",), gen())
        with pytest.raises(DataError, match="zero covariance"):
            fit_news_pca(inputs, pipeline.attention, 1)

    def test_pca_fit_logs_unexplained_share(self):
        config = FeatureConfig(d_a=2, d_I=2, d_N=1, window_K=1)
        inputs = build_inputs(small_panel(), small_macro(), small_embeddings(), config)
        pipeline = FeaturePipeline(config, 2, 3, ("size",), gen())
        messages = []
        sink = logger.add(messages.append, level="INFO", format="{message}")
        try:
            fit_news_pca(inputs, pipeline.attention, 1)
        finally:
            logger.remove(sink)
        share = [m for m in messages if "unexplained share" in m]
        assert len(share) == 1
        assert 0.0 <= float(share[0].rsplit(" ", 1)[-1]) <= 1.0


class TestRankNormalizeProperties:
    def test_over_random_cross_sections(self, rng):
        for _ in range(1000):
            n = int(rng.integers(2, 40))
            if rng.random() < 0.5:
                x = rng.integers(0, 6, size=n).astype(np.float64)
            else:
                x = rng.normal(size=n)
            out = rank_normalize(x)
            # reversing the order negates the ranks
            np.testing.assert_allclose(rank_normalize(-x), -out, atol=1e-12)
            perm = rng.permutation(n)
            np.testing.assert_array_equal(rank_normalize(x[perm]), out[perm])
            assert abs(out.sum()) < 1e-9
            assert out.min() >= -1.0 and out.max() <= 1.0
            np.testing.assert_array_equal(
                np.sign(x[:, None] - x[None, :]), np.sign(out[:, None] - out[None, :])
            )
            if len(np.unique(x)) == n:
                assert (out.min(), out.max()) == (-1.0, 1.0)


class TestAttentionProperties:
    def test_pooled_vector_is_a_convex_combination(self, rng):
        for case in range(1000):
            d_emb, d_a, k = int(rng.integers(1, 6)), int(rng.integers(1, 5)), int(rng.integers(1, 8))
            params = AttentionPooling(d_emb, d_a, gen(case))
            e = rng.normal(size=(k, d_emb)) * rng.uniform(0.1, 10.0)
            pooled, alpha = attend_pool(e, params)
            alpha, pooled = alpha.detach().numpy(), pooled.detach().numpy()

            assert alpha.shape == (k,)
            assert (alpha >= 0.0).all()
            assert alpha.sum() == pytest.approx(1.0, abs=1e-12)
            np.testing.assert_allclose(pooled, alpha @ e, atol=1e-9)
            directions = rng.normal(size=(4, d_emb))
            projected, vertices = directions @ pooled, e @ directions.T
            assert (projected <= vertices.max(axis=0) + 1e-9).all()
            assert (projected >= vertices.min(axis=0) - 1e-9).all()


class TestMacroLstmProperties:
    @pytest.mark.parametrize("seed", range(20))
    def test_parameter_gradients_through_six_steps(self, seed):
        params = MacroLstm(2, 3, gen(seed))
        window = dc.as_tensor(np.random.default_rng(seed).normal(size=(1, 6, 2)))
        names = [name for name, _ in params.named_parameters()]
        values = tuple(p.detach().clone().requires_grad_(True) for p in params.parameters())

        def fn(*tensors):
            return torch.func.functional_call(params, dict(zip(names, tensors)), (window,)).sum()

        assert torch.autograd.gradcheck(fn, values, eps=1e-6, atol=1e-8, rtol=1e-5)

    @pytest.mark.parametrize("seed", range(20))
    def test_window_gradients_through_six_steps(self, seed):
        params = MacroLstm(3, 2, gen(100 + seed))
        window = dc.as_tensor(np.random.default_rng(seed).normal(size=(1, 6, 3)))
        window.requires_grad_(True)
        assert torch.autograd.gradcheck(
            lambda w: params(w).sum(), (window,), eps=1e-6, atol=1e-8, rtol=1e-5
        )

    def test_zero_parameters_give_zero_state(self, rng):
        params = MacroLstm(3, 4, gen())
        zero_parameters(params)
        for _ in range(100):
            window = rng.normal(size=(int(rng.integers(1, 10)), 3)) * 5.0
            assert torch.equal(macro_encode(window, params), torch.zeros(4, dtype=dc.DTYPE))

    def test_window_order_matters(self, rng):
        for seed in range(100):
            params = MacroLstm(2, 3, gen(seed))
            window = rng.normal(size=(6, 2))
            forward = macro_encode(window, params)
            backward = macro_encode(window[::-1].copy(), params)
            assert float((forward - backward).abs().max()) > 1e-8


class TestNewsBasisFitOnTrainingRows:
    def test_later_embeddings_leave_basis_unchanged(self, tiny_dataset, tiny_run_config):
        config = tiny_run_config
        spec = config.split_spec()
        first_unseen = spec.ranges()["val"][0]
        noise = np.random.default_rng(0)
        vectors = {
            key: value + noise.normal(scale=5.0, size=value.shape) if key[0] >= first_unseen else value
            for key, value in tiny_dataset.embeddings.vectors.items()
        }
        perturbed = replace(
            tiny_dataset, embeddings=EmbeddingSet(tiny_dataset.embeddings.dim, vectors)
        )

        fitted = []
        for dataset in (tiny_dataset, perturbed):
            inputs = prepare_inputs(dataset, config.feature_config(), spec)
            model = build_model(
                dataset, config.feature_config(), config.network_config(), inputs["train"]
            )
            fitted.append((model.pipeline.basis, inputs["test"].embeddings))

        (before, test_before), (after, test_after) = fitted
        assert not torch.equal(test_before, test_after)
        assert torch.equal(before.components, after.components)
        assert torch.equal(before.mean, after.mean)
        assert torch.equal(before.explained_variance, after.explained_variance)
