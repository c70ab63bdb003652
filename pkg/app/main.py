"""
main.py — command-line entry point (`python -m app.main <subcommand>`).

Configures logging, resolves the run config, dataset and labeling functions,
and dispatches to one subcommand. Every file a run writes lands under --out.
Exit codes: 0 success, 2 usage error, 3 invalid config, 1 any other error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Callable

from app import config
from app.config import ConfigError, TrainConfig, config_hash, load_train_config, log_config_summary
from app.db.dataset_store import load_dataset, save_dataset
from app.lfb.feature import (
    FEATURE_BANK_FILE,
    FeatureBank,
    feature_bank_for,
    make_feature_lf,
    save_feature_bank,
    train_feature_bank,
)
from app.lfb.functions import LabelingFunction, default_pool, load_lf_registry
from app.runners import artifacts, experiments
from app.services.adp import GROUPS
from app.services.synthetic import Dataset, gen_attribute_world, gen_shapes
from app.services.theory import theory_check
from app.services.trainer import AdpTrainer, finetune_transfer, load_model
from app.services.variants import SelfSupervisedTrainer, ZeroShotTrainer, ZsConfig, zero_shot_accuracy

logger = logging.getLogger("app.main")

_LOG_FORMAT = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"
_LOG_DATE_FORMAT = "%Y-%m-%d %H:%M:%S"

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3

IDENTITY_TOL = 1e-10


def _configure_logging() -> None:
    logging.basicConfig(
        level=getattr(logging, config.LOG_LEVEL, logging.INFO),
        format=_LOG_FORMAT,
        datefmt=_LOG_DATE_FORMAT,
        stream=sys.stderr,
        force=True,
    )


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advdp", description="Adversarial data programming on synthetic worlds.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key=value run config file")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", help="output directory (default: $ADP_OUT_DIR/<run id>)")
        p.add_argument("--dataset", help="shapes | shapes-b | attributes | saved dataset directory")
        return p

    p = add("gen-data", "generate and save a synthetic dataset")
    p.add_argument("--feature-bank", action="store_true",
                   help="also train the nearest-centroid feature bank on the train split")
    for name, text in (("train", "train ADP"), ("train-ss", "train self-supervised ADP")):
        p = add(name, text)
        p.add_argument("--lfs", help="LF count (N+feature adds the feature LF) or an LF registry file")
        p.add_argument("--checkpoint", help="resume from this checkpoint directory")
        if name == "train-ss":
            p.add_argument("--lambda", dest="lam", type=float, help="rotation-consistency weight")
    p = add("train-zs", "train zero-shot ADP on the attribute world")
    p.add_argument("--lambda", dest="lam", type=_float_list,
                   help="cycle weight; several comma-separated values run a sweep")
    p = add("transfer", "fine-tune a trained model on another dataset with frozen groups")
    p.add_argument("--checkpoint", required=True, help="source model checkpoint directory")
    p.add_argument("--lfs", help="LF count, N+feature, or registry file")
    p.add_argument("--freeze", default="g_common,g_parameter,d_lfb",
                   help=f"comma-separated groups out of {','.join(GROUPS)}")
    for name, text in (("eval", "C_RT, C_RG, MIS and FID of a checkpoint"),
                       ("sample-grid", "PGM grid of generated samples per LFB class")):
        p = add(name, text)
        p.add_argument("--checkpoint", required=True, help="model checkpoint directory")
        p.add_argument("--lfs", help="LF count, N+feature, or registry file")
    p = add("ablate-lfs", "LF-count sweep")
    p.add_argument("--counts", type=_int_list, default=[2, 5, 8, 12])
    p = add("compare-aggregators", "majority vote vs DP-MLE vs ADP-LFB labels")
    p.add_argument("--lfs", help="LF count, N+feature, or registry file")
    p = add("bench-runtime", "wall-clock DP-MLE against one LFB pass")
    p.add_argument("--lfs", type=int, default=10, help="number of planted LFs")
    p.add_argument("--samples", type=int, default=10000)
    p = add("theory-check", "tabular game identities")
    p.add_argument("--cells", type=int, default=8)
    p.add_argument("--trials", type=int, default=100)
    return parser


# ---------------------------------------------------------------------------
# Run context
# ---------------------------------------------------------------------------

class RunContext:
    """Resolved config, output directory and run id for one invocation."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        overrides = {"seed": args.seed}
        lam = getattr(args, "lam", None)
        if args.command == "train-ss" and lam is not None:
            overrides["lambda_self"] = lam
        if args.command == "train-zs" and lam and len(lam) == 1:
            overrides["lambda_cycle"] = lam[0]
        self.cfg: TrainConfig = load_train_config(args.config, **overrides)
        self.config_hash = config_hash(self.cfg)
        self.run_id = f"{args.command}-{self.config_hash}-{self.cfg.seed}"
        self.out = Path(args.out) if args.out else Path(config.OUT_DIR) / self.run_id
        self.out.mkdir(parents=True, exist_ok=True)
        self.dataset_dir: Path | None = None

    def dataset(self, default: str = "shapes") -> Dataset:
        name = self.args.dataset or default
        cfg = self.cfg
        for candidate in (Path(name), Path(config.DATA_DIR) / name):
            if candidate.is_dir():
                self.dataset_dir = candidate
                return load_dataset(candidate)
        size = cfg.image_size
        try:
            if name in ("shapes", "shapes-b"):
                style = "B" if name == "shapes-b" else "A"
                return gen_shapes(cfg.seed, cfg.dataset_count, cfg.classes, size, size,
                                  style=style, noise=cfg.noise, name=name)
            if name == "attributes":
                return gen_attribute_world(cfg.seed, count=cfg.dataset_count, H=size, W=size)
        except ValueError as exc:
            raise ConfigError("image_size", f"{name} world: {exc}") from exc
        raise ConfigError("dataset", f"unknown dataset {name!r} (not a built-in world or a saved directory)")

    def lfs(self, ds: Dataset) -> list[LabelingFunction]:
        spec = getattr(self.args, "lfs", None)
        if spec is None:
            return default_pool(ds.m, ds.image_shape, self.cfg.lfs)
        count, _, extra = str(spec).partition("+")
        if count.isdigit() and extra in ("", "feature"):
            lfs = default_pool(ds.m, ds.image_shape, int(count))
            if extra:
                lfs.append(make_feature_lf(self.feature_bank(ds), ds.image_shape))
            return lfs
        return load_lf_registry(spec, ds.m, ds.image_shape)

    def feature_bank(self, ds: Dataset) -> FeatureBank:
        """The saved dataset's bank when it has one, else one trained on the train split under --out."""
        stored = self.dataset_dir / FEATURE_BANK_FILE if self.dataset_dir else None
        path = stored if stored is not None and stored.exists() else self.out / FEATURE_BANK_FILE
        return feature_bank_for(ds.split("train")[0], ds.m, path, seed=self.cfg.seed)

    def csv(self, name: str, rows: list[dict], columns: list[str] | None = None) -> Path:
        return artifacts.write_csv(self.out / name, rows, self.config_hash, columns)


def _grid_hook(ctx: RunContext) -> Callable[[AdpTrainer], None]:
    def hook(trainer: AdpTrainer) -> None:
        artifacts.sample_grid(trainer.model, trainer.lfs,
                              ctx.out / "samples" / f"iter{trainer.iteration:06d}.pgm",
                              seed=ctx.cfg.seed, label_rule=trainer.fake_rule)
    return hook


def _finish_training(ctx: RunContext, trainer: AdpTrainer) -> dict:
    result = trainer.run()
    trainer.checkpoint("final")
    artifacts.write_metric_log(ctx.out / "metrics.csv", result.log, ctx.config_hash)
    last = result.log[-1] if result.log else {}
    return {
        "iterations": result.iterations,
        "skipped_steps": result.skipped_steps,
        "audits": result.audits,
        "L_D": last.get("L_D", float("nan")),
        "L_G": last.get("L_G", float("nan")),
        "checksum": result.model.checksum()[:12],
    }


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(ctx: RunContext) -> dict:
    ds = ctx.dataset()
    save_dataset(ds, ctx.out / "dataset")
    bank = "-"
    if ctx.args.feature_bank:
        path = ctx.out / "dataset" / FEATURE_BANK_FILE
        save_feature_bank(train_feature_bank(ds.split("train")[0], ds.m, seed=ctx.cfg.seed), path)
        bank = str(path)
    return {"dataset": ds.manifest.name, "samples": len(ds), "classes": ds.m,
            "zero_shot": ",".join(map(str, ds.zero_shot_classes)) or "-", "feature_bank": bank}


def cmd_train(ctx: RunContext) -> dict:
    ds = ctx.dataset()
    trainer = AdpTrainer(ctx.cfg, ds, ctx.lfs(ds), out_dir=ctx.out, hooks=[_grid_hook(ctx)])
    if ctx.args.checkpoint:
        trainer.restore(ctx.args.checkpoint)
    return _finish_training(ctx, trainer)


def cmd_train_ss(ctx: RunContext) -> dict:
    ds = ctx.dataset()
    trainer = SelfSupervisedTrainer(ctx.cfg, ds, ctx.lfs(ds), out_dir=ctx.out, hooks=[_grid_hook(ctx)])
    if ctx.args.checkpoint:
        trainer.restore(ctx.args.checkpoint)
    return _finish_training(ctx, trainer)


def cmd_train_zs(ctx: RunContext) -> dict:
    ds = ctx.dataset("attributes")
    lambdas = ctx.args.lam or []
    if len(lambdas) > 1:
        summary, per_class = experiments.zs_lambda_sweep(ctx.cfg, ds, lambdas)
        ctx.csv("zs_sweep.csv", summary)
        ctx.csv("zs_per_class.csv", per_class)
        return {f"zero_shot@{row['lambda']:g}": row["zero_shot"] for row in summary}
    trainer = ZeroShotTrainer(ctx.cfg, ds, out_dir=ctx.out)
    summary = _finish_training(ctx, trainer)
    zs = ZsConfig.from_dataset(ctx.cfg, ds)
    report = zero_shot_accuracy(trainer.model, zs, trainer.detector, seed=ctx.cfg.seed + 1)
    ctx.csv("zs_per_class.csv", [
        {"lambda": ctx.cfg.lambda_cycle, "class": c,
         "split": "zero_shot" if c in zs.zero_shot else "seen", "accuracy": acc}
        for c, acc in sorted(report.per_class.items())
    ])
    summary.update(seen=report.seen, zero_shot=report.zero_shot, split_audits=trainer.split_audits)
    return summary


def cmd_transfer(ctx: RunContext) -> dict:
    target = ctx.dataset("shapes-b")
    lfs = ctx.lfs(target)
    H, W = target.image_shape
    model = load_model(ctx.cfg, ctx.args.checkpoint, len(lfs), target.m, H, W)
    freeze = tuple(g.strip() for g in ctx.args.freeze.split(",") if g.strip())
    before = {g: model.checksum(g) for g in freeze}
    result = finetune_transfer(model, target, ctx.cfg, lfs, freeze=freeze, out_dir=ctx.out)
    unchanged = all(model.checksum(g) == before[g] for g in freeze)
    artifacts.write_metric_log(ctx.out / "metrics.csv", result.log, ctx.config_hash)
    report = experiments.evaluate_model(ctx.cfg, target, model, lfs)
    return {"iterations": result.iterations, "frozen": ",".join(freeze),
            "frozen_unchanged": unchanged, "c_rt": report["c_rt"], "c_rg": report["c_rg"]}


def _checkpoint_model(ctx: RunContext):
    ds = ctx.dataset()
    lfs = ctx.lfs(ds)
    H, W = ds.image_shape
    return ds, lfs, load_model(ctx.cfg, ctx.args.checkpoint, len(lfs), ds.m, H, W)


def cmd_eval(ctx: RunContext) -> dict:
    ds, lfs, model = _checkpoint_model(ctx)
    report = experiments.evaluate_model(ctx.cfg, ds, model, lfs)
    ctx.csv("eval.csv", [report])
    return report


def cmd_sample_grid(ctx: RunContext) -> dict:
    _, lfs, model = _checkpoint_model(ctx)
    path = artifacts.sample_grid(model, lfs, ctx.out / "samples.pgm", seed=ctx.cfg.seed,
                                 label_rule=ctx.cfg.label_rule)
    return {"grid": path.name}


def cmd_ablate_lfs(ctx: RunContext) -> dict:
    ds = ctx.dataset()
    rows = experiments.lf_count_sweep(ctx.cfg, ds, ctx.args.counts)
    ctx.csv("lf_sweep.csv", rows)
    return {f"ce@{row['lfs']}": row["cross_entropy"] for row in rows}


def cmd_compare_aggregators(ctx: RunContext) -> dict:
    ds = ctx.dataset()
    rows = experiments.compare_aggregators(ctx.cfg, ds, ctx.lfs(ds))
    ctx.csv("aggregators.csv", rows)
    return {row["method"]: row["cross_entropy"] for row in rows}


def cmd_bench_runtime(ctx: RunContext) -> dict:
    result = experiments.bench_runtime(n=ctx.args.lfs, samples=ctx.args.samples, seed=ctx.cfg.seed)
    ctx.csv("runtime.csv", result.as_rows())
    return {"dp_seconds": result.dp_seconds, "lfb_seconds": result.lfb_seconds, "ratio": result.ratio}


def cmd_theory_check(ctx: RunContext) -> dict:
    report = theory_check(cells=ctx.args.cells, trials=ctx.args.trials, seed=ctx.cfg.seed)
    ctx.csv("theory.csv", report.as_rows())
    if report.max_identity_error >= IDENTITY_TOL:
        raise RuntimeError(f"game value identity off by {report.max_identity_error:.3g}")
    return {row["check"]: row["value"] for row in report.as_rows()}


COMMANDS: dict[str, Callable[[RunContext], dict]] = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "train-ss": cmd_train_ss,
    "train-zs": cmd_train_zs,
    "transfer": cmd_transfer,
    "eval": cmd_eval,
    "sample-grid": cmd_sample_grid,
    "ablate-lfs": cmd_ablate_lfs,
    "compare-aggregators": cmd_compare_aggregators,
    "bench-runtime": cmd_bench_runtime,
    "theory-check": cmd_theory_check,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    _configure_logging()
    try:
        ctx = RunContext(args)
        logger.info("Run %s starting (out=%s)", ctx.run_id, ctx.out)
        log_config_summary(ctx.cfg)
        summary = COMMANDS[args.command](ctx)
        artifacts.write_summary(ctx.out / "summary.txt", ctx.run_id, summary)
        logger.info("Run %s complete: %s", ctx.run_id, summary)
        return EXIT_OK
    except ConfigError as exc:
        print(f"error: ConfigError: {exc}", file=sys.stderr)
        logger.debug("Invalid config field %s", exc.field, exc_info=True)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        logger.debug("Run failed", exc_info=True)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
