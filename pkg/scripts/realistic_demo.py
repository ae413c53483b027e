#!/usr/bin/env python3
"""
Synthetic Market Demo - Standalone Version
Generates a panel with a planted pricing kernel, trains the adversarial SDF on
it, and compares the fitted SDF with the oracle and the linear baselines.
"""

import os
import sys

# Add project root to path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

# Import after path setup to avoid import errors
# pylint: disable=wrong-import-position
from app.core.errors import SdfToolkitError  # noqa: E402
from app.services.attribution_service import shapley_importance  # noqa: E402
from app.services.evaluation_service import evaluate_model  # noqa: E402
from app.services.synth_service import (generate, oracle_evaluation,  # noqa: E402
                                        period_labels, to_dataset)
from app.services.training_service import (build_model, prepare_inputs,  # noqa: E402
                                           train)
from app.utils.logging_config import setup_logging  # noqa: E402
from config.run_config import build_config  # noqa: E402


class SyntheticMarketDemo:
    """Scenarios small enough to train in a couple of minutes on a laptop."""

    def __init__(self):
        base = {
            "d_a": 8, "d_I": 4, "d_N": 4, "window_K": 6,
            "h1": 16, "h2": 8, "h3": 8, "h_g": 8, "d_g": 4,
            "iterations": 1500, "eval_interval": 100, "patience": 5,
            "batch_periods": 8, "optimizer": "adam", "beta_window": 24,
            "synth_assets": 40, "synth_periods": 240, "synth_emb_dim": 8,
            "train_start": 1, "train_end": 140, "val_start": 141, "val_end": 180,
            "test_start": 181, "test_end": 240, "shapley_permutations": 50,
        }
        self.scenarios = [
            {"name": "Mixed signal", "keys": dict(base, seed=11)},
            {"name": "News-only signal", "keys": dict(base, seed=12, synth_signal="news")},
            {"name": "Monotone loadings", "keys": dict(base, seed=13, synth_scenario="monotone")},
        ]


def fmt(value):
    return "n/a" if value is None else f"{value:.3f}"


def run_scenario(scenario):
    config = build_config(scenario["keys"])
    data = generate(config.synth_config())
    dataset = to_dataset(data, period_labels(config.synth_periods))
    spec = config.split_spec()
    print(
        f"📊 Panel: {data.panel.n_observations} observations, "
        f"{len(data.panel.assets)} assets, {config.synth_periods} periods"
    )

    inputs = prepare_inputs(dataset, config.feature_config(), spec)
    model = build_model(dataset, config.feature_config(), config.network_config(), inputs["train"])
    result = train(model, inputs["train"], inputs["val"], config.loss_config(), config.digest)
    history = result.history
    print(
        f"🏋️  Training: val loss {history['val_loss'].iloc[0]:.5f} → "
        f"{result.checkpoint.val_loss:.5f} (best at iteration {result.checkpoint.iteration})"
    )

    report = evaluate_model(model, dataset, spec, "test", config.beta_window).report
    oracle = oracle_evaluation(
        data.oracle, data.panel, spec.ranges()["test"], "test", config.beta_window
    ).report
    print("📈 Test split:")
    rows = [("SDF", report), ("Oracle", oracle)] + [
        (name, baseline) for name, baseline in report.baselines.items()
    ]
    for name, metrics in rows:
        print(
            f"   • {name:<11} SR {fmt(metrics.sharpe)}  EV {fmt(metrics.ev)}  "
            f"XS-R2 {fmt(metrics.xs_r2)}  decile rho {fmt(metrics.monotonicity)}"
        )

    shapley = shapley_importance(
        model, inputs["test"], permutations=config.shapley_permutations, seed=config.seed
    )
    ranked = sorted(zip(shapley.groups, shapley.importance[0]), key=lambda x: -abs(x[1]))
    print("🔍 Shapley importance (test):")
    for group, score in ranked[:4]:
        print(f"   • {group}: {score:.1%}")


def run_synthetic_demo():
    """Run every scenario end to end and print the comparison."""

    print("💹 Adversarial SDF Toolkit - Synthetic Market Demo")
    print("=" * 70)
    setup_logging("WARNING")
    demo = SyntheticMarketDemo()

    for i, scenario in enumerate(demo.scenarios, 1):
        print(f"\n🏷️  Scenario {i}: {scenario['name']}")
        try:
            run_scenario(scenario)
        except SdfToolkitError as e:
            print(f"❌ Scenario failed: {e}")
        print("-" * 70)

    print("\n🎉 Synthetic market demo completed")


if __name__ == "__main__":
    run_synthetic_demo()
