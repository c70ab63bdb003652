"""
experiments.py — evaluation runs and ablation harnesses.

Each harness returns plain row dicts; the CLI writes them with
artifacts.write_csv. Every sub-run derives its randomness from the config seed,
and every classifier inside one harness shares one ClassifierRecipe.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from app.config import TrainConfig, config_hash
from app.lfb.block import aggregate_final_batch, aggregate_votes_batch, normalize_theta
from app.lfb.functions import AttributeDetector, LabelingFunction, apply_lfs_batch, default_pool
from app.services.adp import AdpModel, sample_labeled
from app.services.baselines import dp_mle_fit, dp_predict_batch, majority_vote_batch
from app.services.evaluation import (
    FID_MIN_SAMPLES,
    ClassifierRecipe,
    EvalClassifier,
    fid_images,
    modified_inception_score,
    train_classifier,
)
from app.services.synthetic import Dataset
from app.services.trainer import train
from app.services.variants import ZsConfig, train_zs, zero_shot_accuracy

logger = logging.getLogger(__name__)

ZS_LAMBDAS = (0.0, 0.1, 0.3, 1.0)
_LFB_PARAM_DRAWS = 512


def _recipe(cfg: TrainConfig) -> ClassifierRecipe:
    return ClassifierRecipe(seed=cfg.seed)


# ---------------------------------------------------------------------------
# Single-model evaluation
# ---------------------------------------------------------------------------

def evaluate_model(cfg: TrainConfig, dataset: Dataset, model: AdpModel, lfs: list[LabelingFunction],
                   n_generated: int = 1000, classifier: EvalClassifier | None = None) -> dict:
    """C_RT, C_RG and MIS for one trained model; FID when both sets reach the sample floor."""
    recipe = _recipe(cfg)
    train_x, train_y = dataset.split("train")
    test_x, test_y = dataset.split("test")
    gen_x, _, gen_y = sample_labeled(model, lfs, n_generated, cfg.seed + 1, cfg.label_rule)
    real_clf = classifier if classifier is not None else train_classifier(train_x, train_y, dataset.m, recipe)
    gen_clf = train_classifier(gen_x, gen_y, dataset.m, recipe)
    report = {
        "c_rt": real_clf.accuracy(gen_x, gen_y),
        "c_rg": gen_clf.accuracy(test_x, test_y),
        "mis": modified_inception_score(real_clf, gen_x),
        "generated": n_generated,
        "recipe": recipe.key(),
    }
    report["gap"] = abs(report["c_rt"] - report["c_rg"])
    if len(dataset) >= FID_MIN_SAMPLES and n_generated >= FID_MIN_SAMPLES:
        report["fid"] = fid_images(real_clf, dataset.images, gen_x)
    else:
        logger.warning("FID skipped: %d real and %d generated samples, need %d each",
                       len(dataset), n_generated, FID_MIN_SAMPLES)
        report["fid"] = float("nan")
    logger.info("Evaluation: c_rt=%.2f c_rg=%.2f mis=%.4f fid=%.4f",
                report["c_rt"], report["c_rg"], report["mis"], report["fid"])
    return report


# ---------------------------------------------------------------------------
# LF-count sweep
# ---------------------------------------------------------------------------

def lf_count_sweep(cfg: TrainConfig, dataset: Dataset, counts: list[int],
                   n_generated: int = 1000) -> list[dict]:
    """Train one model per LF count; score its generated pairs with a classifier trained on real data."""
    if not counts:
        raise ValueError("lf_count_sweep needs at least one LF count")
    recipe = _recipe(cfg)
    train_x, train_y = dataset.split("train")
    clf = train_classifier(train_x, train_y, dataset.m, recipe)
    rows = []
    for count in counts:
        run_cfg = cfg.with_overrides(lfs=count)
        lfs = default_pool(dataset.m, dataset.image_shape, count)
        logger.info("LF sweep: training with %d LFs (config %s)", count, config_hash(run_cfg))
        result = train(run_cfg, dataset, lfs)
        gen_x, _, gen_y = sample_labeled(result.model, lfs, n_generated, cfg.seed + 1, cfg.label_rule)
        rows.append({
            "lfs": count,
            "run_config_hash": config_hash(run_cfg),
            "recipe": recipe.key(),
            "cross_entropy": clf.cross_entropy(gen_x, gen_y),
            "c_rt": clf.accuracy(gen_x, gen_y),
            "skipped_steps": result.skipped_steps,
        })
    return rows


# ---------------------------------------------------------------------------
# Aggregator comparison
# ---------------------------------------------------------------------------

def lfb_parameters(model: AdpModel, seed: int, draws: int = _LFB_PARAM_DRAWS) -> tuple[np.ndarray, np.ndarray]:
    """Mean Θ̃ (n,) and Φ (n, n) over generator draws; the dataset-level LFB parameters."""
    z = np.random.default_rng(seed).standard_normal((draws, model.gen_spec.latent_dim))
    _, theta, phi = model.generate(z)
    return normalize_theta(theta.mean(axis=0)), phi.mean(axis=0)


def aggregator_labels(votes: np.ndarray, m: int, model: AdpModel | None = None,
                      seed: int = 0) -> dict[str, np.ndarray]:
    """Soft labels (N, m) from each aggregation method over the same LF outputs."""
    out = {"majority": majority_vote_batch(votes)}
    out["dp-mle"] = dp_predict_batch(dp_mle_fit(votes, m), votes)
    if model is not None:
        theta, phi = lfb_parameters(model, seed)
        b = votes.shape[0]
        labels, degenerate = aggregate_final_batch(np.tile(theta, (b, 1)), np.tile(phi, (b, 1, 1)), votes)
        if degenerate.any():
            logger.warning("adp-lfb: %d samples with zero aggregation mass", int(degenerate.sum()))
        out["adp-lfb"] = labels
    return out


def compare_aggregators(cfg: TrainConfig, dataset: Dataset, lfs: list[LabelingFunction],
                        model: AdpModel | None = None) -> list[dict]:
    """Label the real train split with each aggregator, train one classifier per label set, score the test split."""
    recipe = _recipe(cfg)
    train_x, train_y = dataset.split("train")
    test_x, test_y = dataset.split("test")
    if model is None:
        model = train(cfg, dataset, lfs).model
    votes = apply_lfs_batch(lfs, train_x)
    rows = []
    for method, soft in aggregator_labels(votes, dataset.m, model, cfg.seed).items():
        clf = EvalClassifier(train_x.shape[1] * train_x.shape[2], dataset.m, recipe)
        clf.fit(train_x, soft)
        rows.append({
            "method": method,
            "recipe": recipe.key(),
            "label_accuracy": 100.0 * float(np.mean(np.argmax(soft, axis=1) == train_y)),
            "cross_entropy": clf.cross_entropy(test_x, test_y),
            "test_accuracy": clf.accuracy(test_x, test_y),
        })
        logger.info("Aggregator %s: label acc=%.2f test CE=%.4f", method,
                    rows[-1]["label_accuracy"], rows[-1]["cross_entropy"])
    return rows


# ---------------------------------------------------------------------------
# Runtime bench
# ---------------------------------------------------------------------------

def planted_votes(n: int, samples: int, m: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """One-hot LF outputs (samples, n, m) with per-LF accuracy in [0.6, 0.9]; returns (outputs, truth)."""
    rng = np.random.default_rng(seed)
    truth = rng.integers(0, m, size=samples)
    accuracy = rng.uniform(0.6, 0.9, size=n)
    correct = rng.random((samples, n)) < accuracy
    wrong = (truth[:, None] + rng.integers(1, m, size=(samples, n))) % m
    votes = np.where(correct, truth[:, None], wrong)
    A = np.zeros((samples, n, m))
    A[np.arange(samples)[:, None], np.arange(n)[None, :], votes] = 1.0
    return A, truth


@dataclass
class BenchResult:
    dp_seconds: float
    lfb_seconds: float
    dp_iterations: int

    @property
    def ratio(self) -> float:
        return self.dp_seconds / max(self.lfb_seconds, 1e-12)

    def as_rows(self) -> list[dict]:
        return [
            {"method": "dp-mle", "seconds": self.dp_seconds, "iterations": self.dp_iterations},
            {"method": "adp-lfb", "seconds": self.lfb_seconds, "iterations": 1},
            {"method": "ratio", "seconds": self.ratio, "iterations": ""},
        ]


def bench_runtime(n: int = 10, samples: int = 10000, m: int = 3, seed: int = 0,
                  repeats: int = 5) -> BenchResult:
    """Best-of-`repeats` wall clock: EM to convergence against one LFB pass plus Φ_real on the same votes."""
    A, _ = planted_votes(n, samples, m, seed)
    theta = np.full(n, 1.0 / n)
    dp_times, lfb_times = [], []
    for _ in range(max(repeats, 1)):
        start = time.perf_counter()
        dp = dp_mle_fit(A, m, iters=1000)
        dp_times.append(time.perf_counter() - start)

        start = time.perf_counter()
        aggregate_votes_batch(theta, A.argmax(axis=2), m)
        lfb_times.append(time.perf_counter() - start)

    result = BenchResult(min(dp_times), min(lfb_times), len(dp.log_likelihood))
    logger.info("Runtime bench: dp-mle %.4fs (%d EM iterations), adp-lfb %.4fs, ratio %.1fx",
                result.dp_seconds, result.dp_iterations, result.lfb_seconds, result.ratio)
    return result


# ---------------------------------------------------------------------------
# Zero-shot λ sweep
# ---------------------------------------------------------------------------

def zs_lambda_sweep(cfg: TrainConfig, dataset: Dataset, lambdas=ZS_LAMBDAS,
                    per_class: int = 100) -> tuple[list[dict], list[dict]]:
    """Summary rows per λ and per-class rows (λ, class, split, accuracy)."""
    H, W = dataset.image_shape
    detector = AttributeDetector(dataset.signatures.shape[1], H, W)
    summary, per_class_rows = [], []
    for lam in lambdas:
        run_cfg = cfg.with_overrides(lambda_cycle=float(lam))
        result = train_zs(run_cfg, dataset, detector=detector)
        zs = ZsConfig.from_dataset(run_cfg, dataset)
        report = zero_shot_accuracy(result.model, zs, detector, per_class=per_class, seed=cfg.seed + 1)
        summary.append({
            "lambda": float(lam),
            "run_config_hash": config_hash(run_cfg),
            "overall": report.overall,
            "seen": report.seen,
            "zero_shot": report.zero_shot,
        })
        for cls, acc in sorted(report.per_class.items()):
            per_class_rows.append({
                "lambda": float(lam),
                "class": cls,
                "split": "zero_shot" if cls in zs.zero_shot else "seen",
                "accuracy": acc,
            })
        logger.info("ZS sweep lambda=%.2f: seen=%.3f zero_shot=%.3f", lam, report.seen, report.zero_shot)
    return summary, per_class_rows
