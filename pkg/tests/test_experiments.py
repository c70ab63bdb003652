"""
tests/test_experiments.py — evaluation and ablation harnesses at toy scale.

The acceptance-scale runs (5000 iterations, 1000 generated samples per model)
only run with ADP_RUN_SLOW=1.

Run with: pytest tests/test_experiments.py -v
"""
import math
from pathlib import Path

import numpy as np
import pytest

from app import config
from app.config import TrainConfig, config_hash, load_train_config
from app.lfb.functions import default_pool
from app.runners.experiments import (
    ZS_LAMBDAS,
    aggregator_labels,
    bench_runtime,
    compare_aggregators,
    evaluate_model,
    lf_count_sweep,
    lfb_parameters,
    planted_votes,
    zs_lambda_sweep,
)
from app.services.adp import build_model, sample_labeled
from app.services.evaluation import ClassifierRecipe, train_classifier
from app.services.synthetic import gen_attribute_world, gen_shapes
from app.services.trainer import finetune_transfer, moving_average, train
from app.services.variants import train_ss

slow = pytest.mark.skipif(not config.RUN_SLOW, reason="set ADP_RUN_SLOW=1 for acceptance-scale runs")

_SMOKE_CFG = Path(__file__).resolve().parent.parent / "configs" / "smoke.cfg"


def _tiny_cfg(**overrides):
    base = dict(iterations=2, d_steps=1, batch_size=8, latent_dim=4, trunk_widths=(8,),
                head_widths=(8,), disc_widths=(8,), label_widths=(4,), common_widths=(8,),
                lfb_widths=(4,), log_every=0, audit_every=0, seed=0)
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def shapes():
    return gen_shapes(seed=0, count=150, m=3)


# ---------------------------------------------------------------------------
# Planted votes and the runtime bench
# ---------------------------------------------------------------------------

class TestPlantedVotes:
    def test_shapes_and_one_hot(self):
        A, truth = planted_votes(n=5, samples=100, m=4, seed=0)
        assert A.shape == (100, 5, 4)
        np.testing.assert_array_equal(A.sum(axis=2), 1.0)
        assert truth.shape == (100,) and truth.max() < 4

    def test_accuracy_band(self):
        A, truth = planted_votes(n=8, samples=5000, m=3, seed=1)
        acc = (A.argmax(axis=2) == truth[:, None]).mean(axis=0)
        assert np.all((acc > 0.55) & (acc < 0.95))

    def test_bench_rows(self):
        result = bench_runtime(n=4, samples=300, m=3, seed=0)
        assert result.dp_iterations >= 1
        assert result.dp_seconds >= 0 and result.lfb_seconds >= 0
        assert [row["method"] for row in result.as_rows()] == ["dp-mle", "adp-lfb", "ratio"]


# ---------------------------------------------------------------------------
# Aggregators
# ---------------------------------------------------------------------------

class TestAggregators:
    def test_lfb_parameters_shapes(self):
        model = build_model(_tiny_cfg(), 3, 3, 8, 8)
        theta, phi = lfb_parameters(model, seed=0, draws=16)
        assert theta.shape == (3,) and phi.shape == (3, 3)
        assert theta.sum() == pytest.approx(1.0)
        np.testing.assert_allclose(phi, phi.T, atol=1e-12)

    def test_labels_from_every_method(self):
        A, truth = planted_votes(n=5, samples=400, m=3, seed=2)
        model = build_model(_tiny_cfg(), 5, 3, 8, 8)
        labels = aggregator_labels(A, 3, model)
        assert list(labels) == ["majority", "dp-mle", "adp-lfb"]
        for soft in labels.values():
            assert soft.shape == (400, 3)
            np.testing.assert_allclose(soft.sum(axis=1), 1.0, atol=1e-9)
        assert np.mean(labels["dp-mle"].argmax(axis=1) == truth) > 0.7

    def test_without_model(self):
        A, _ = planted_votes(n=3, samples=50, m=2, seed=3)
        assert list(aggregator_labels(A, 2)) == ["majority", "dp-mle"]

    def test_compare_rows(self, shapes):
        cfg = _tiny_cfg()
        rows = compare_aggregators(cfg, shapes, default_pool(3, (8, 8), 3))
        assert [r["method"] for r in rows] == ["majority", "dp-mle", "adp-lfb"]
        assert len({r["recipe"] for r in rows}) == 1
        assert all(0.0 <= r["label_accuracy"] <= 100.0 for r in rows)
        assert all(np.isfinite(r["cross_entropy"]) for r in rows)


# ---------------------------------------------------------------------------
# Model evaluation and sweeps
# ---------------------------------------------------------------------------

class TestEvaluateModel:
    def test_small_run_skips_fid(self, shapes, caplog):
        cfg = _tiny_cfg()
        lfs = default_pool(3, (8, 8), 3)
        model = train(cfg, shapes, lfs).model
        report = evaluate_model(cfg, shapes, model, lfs, n_generated=60)
        assert math.isnan(report["fid"])
        assert "FID skipped" in caplog.text
        assert 1.0 <= report["mis"] <= 3.0 + 1e-9
        assert report["gap"] == pytest.approx(abs(report["c_rt"] - report["c_rg"]))

    def test_lf_count_sweep_rows(self, shapes):
        cfg = _tiny_cfg()
        rows = lf_count_sweep(cfg, shapes, [2, 3], n_generated=30)
        assert [r["lfs"] for r in rows] == [2, 3]
        assert rows[0]["run_config_hash"] == config_hash(cfg.with_overrides(lfs=2))
        assert rows[0]["run_config_hash"] != rows[1]["run_config_hash"]
        assert len({r["recipe"] for r in rows}) == 1

    def test_lf_count_sweep_needs_counts(self, shapes):
        with pytest.raises(ValueError):
            lf_count_sweep(_tiny_cfg(), shapes, [])

    def test_zs_sweep_rows(self):
        ds = gen_attribute_world(seed=0, count=100)
        summary, per_class = zs_lambda_sweep(_tiny_cfg(iterations=1), ds, [0.0, 0.5], per_class=5)
        assert [r["lambda"] for r in summary] == [0.0, 0.5]
        assert len(per_class) == 2 * 5
        assert {r["split"] for r in per_class} == {"seen", "zero_shot"}

    def test_default_lambdas(self):
        assert ZS_LAMBDAS == (0.0, 0.1, 0.3, 1.0)


# ---------------------------------------------------------------------------
# Acceptance scale
# ---------------------------------------------------------------------------

@slow
class TestAcceptance:
    def test_classifier_accuracies_and_gap(self):
        cfg = TrainConfig(seed=0)
        ds = gen_shapes(seed=0, count=cfg.dataset_count, m=cfg.classes)
        lfs = default_pool(ds.m, ds.image_shape, cfg.lfs)
        model = train(cfg, ds, lfs).model
        report = evaluate_model(cfg, ds, model, lfs, n_generated=1000)
        assert report["c_rt"] >= 75.0 and report["c_rg"] >= 70.0
        assert report["gap"] <= 15.0
        assert np.isfinite(report["fid"])

    def test_more_lfs_lower_cross_entropy(self):
        cfg = TrainConfig(seed=0)
        ds = gen_shapes(seed=0, count=cfg.dataset_count, m=cfg.classes)
        ce = [row["cross_entropy"] for row in lf_count_sweep(cfg, ds, [2, 5, 8])]
        assert ce[0] > ce[1] > ce[2]

    def test_lfb_labels_beat_majority_and_dp_on_correlated_pool(self):
        cfg = TrainConfig(seed=0)
        ds = gen_shapes(seed=0, count=cfg.dataset_count, m=cfg.classes)
        # the first eight pool entries include the correlated oracle pair
        lfs = default_pool(ds.m, ds.image_shape, 8)
        ce = {r["method"]: r["cross_entropy"] for r in compare_aggregators(cfg.with_overrides(lfs=8), ds, lfs)}
        assert ce["adp-lfb"] <= ce["majority"]
        assert ce["adp-lfb"] <= ce["dp-mle"]

    def test_one_pass_is_ten_times_faster_than_em(self):
        result = bench_runtime(n=10, samples=10000, m=3, seed=0)
        assert result.ratio >= 10.0

    def test_rotation_loss_halves_and_shuffled_labels_trail(self):
        cfg = TrainConfig(seed=0)
        ds = gen_shapes(seed=0, count=cfg.dataset_count, m=cfg.classes)
        lfs = default_pool(ds.m, ds.image_shape, cfg.lfs)
        result = train_ss(cfg, ds, lfs)
        smooth = moving_average(result.column("L_self"), window=100)
        assert smooth[-1] <= 0.5 * smooth[0]

        report = evaluate_model(cfg, ds, result.model, lfs, n_generated=1000)
        gen_x, _, gen_y = sample_labeled(result.model, lfs, 1000, cfg.seed + 1, cfg.label_rule)
        shuffled = np.random.default_rng(cfg.seed).permutation(gen_y)
        control = train_classifier(gen_x, shuffled, ds.m, ClassifierRecipe(seed=cfg.seed))
        assert report["c_rg"] - control.accuracy(*ds.split("test")) >= 30.0

    def test_cycle_loss_lifts_zero_shot_accuracy(self):
        cfg = TrainConfig(seed=0)
        ds = gen_attribute_world(seed=0, count=cfg.dataset_count)
        assert len(ds.zero_shot_classes) == 2
        summary, _ = zs_lambda_sweep(cfg, ds, [0.0, 0.3])
        assert summary[1]["zero_shot"] - summary[0]["zero_shot"] >= 0.10

    def test_smoke_run_lowers_discriminator_loss(self):
        cfg = load_train_config(_SMOKE_CFG)
        ds = gen_shapes(seed=cfg.seed, count=cfg.dataset_count, m=cfg.classes)
        result = train(cfg, ds, default_pool(ds.m, ds.image_shape, cfg.lfs))
        smooth = moving_average(result.column("L_D"), window=20)
        assert smooth[-1] < smooth[0]

    def test_discriminator_settles_near_one_half(self):
        cfg = TrainConfig(seed=0, classes=2)
        ds = gen_shapes(seed=0, count=cfg.dataset_count, m=2)
        model = train(cfg, ds, default_pool(2, ds.image_shape, cfg.lfs)).model
        x, y = ds.split("test")
        assert 0.3 <= float(model.discriminate(x, np.eye(2)[y]).mean()) <= 0.7

    def test_transfer_beats_untuned_model_on_target(self):
        cfg = TrainConfig(seed=0)
        source = gen_shapes(seed=0, count=cfg.dataset_count, m=cfg.classes)
        target = gen_shapes(seed=0, count=cfg.dataset_count, m=cfg.classes, style="B", name="shapes-b")
        lfs = default_pool(cfg.classes, target.image_shape, cfg.lfs)
        model = train(cfg, source, lfs).model
        clf = train_classifier(*target.split("train"), target.m, ClassifierRecipe(seed=cfg.seed))
        before = evaluate_model(cfg, target, model, lfs, classifier=clf)["c_rt"]
        finetune_transfer(model, target, cfg.with_overrides(iterations=1000), lfs)
        after = evaluate_model(cfg, target, model, lfs, classifier=clf)["c_rt"]
        assert after > before
