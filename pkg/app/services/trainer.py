"""
trainer.py — the ADP training loop.

Per outer iteration: `d_steps` discriminator updates (D and D_LFB together,
fake batch untracked), then one generator update through the image head, the
parameter head and the label channel. Subclasses in variants.py swap the real
label channel, add conditions and add generator-side loss terms.

Checkpoints are a directory with tensors.bin (weights, Adam moments, metric
log) and manifest.txt (iteration, config hash, RNG state). A checkpoint is
written before a NonFiniteError propagates.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from app.config import TrainConfig, config_hash
from app.core.optim import Adam
from app.core.tensor import Tape, Tensor
from app.db.container import read_manifest, read_tensors, write_manifest, write_tensors
from app.lfb.block import SIMPLEX_TOL, aggregate_final_batch
from app.lfb.functions import LabelingFunction
from app.services.adp import (
    GENERATOR_GROUPS,
    GROUPS,
    AdpModel,
    FakeBatch,
    LossBundle,
    NonFiniteError,
    adp_losses,
    build_model,
    one_hot_labels,
    sample_fake_batch,
    theta_entropy,
)
from app.services.synthetic import Dataset

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("iteration", "L_D", "L_G", "L_DLFB", "L_G_phi", "theta_entropy")


class LabelSpaceError(ValueError):
    """Source model and target dataset disagree on the label space."""


class LabelAuditError(RuntimeError):
    """The fake label fed to D differs from the LFB recomputation."""


@dataclass
class TrainResult:
    model: AdpModel
    log: list[dict[str, float]]
    iterations: int
    skipped_steps: int = 0
    audits: int = 0
    checkpoints: list[Path] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([row[name] for row in self.log])


def moving_average(values, window: int = 20) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return values
    window = max(1, min(window, values.size))
    return np.convolve(values, np.ones(window) / window, mode="valid")


class AdpTrainer:
    """Alternating D/D_LFB and G updates over a labeled image dataset and a list of LFs."""

    def __init__(self, cfg: TrainConfig, dataset: Dataset, lfs: list[LabelingFunction],
                 model: AdpModel | None = None, trainable: tuple[str, ...] = GROUPS,
                 out_dir: str | os.PathLike | None = None,
                 hooks: list[Callable[["AdpTrainer"], None]] | None = None):
        if not lfs:
            raise ValueError("training needs at least one labeling function")
        H, W = dataset.image_shape
        for lf in lfs:
            if lf.arity != (H, W):
                raise ValueError(f"LF {lf.id} accepts {lf.arity} images but the dataset has {H}x{W}")
        self.cfg = cfg
        self.dataset = dataset
        self.lfs = lfs
        self.n = len(lfs)
        self.m = self.label_classes()
        self.model = model if model is not None else build_model(cfg, self.n, self.m, H, W, self.condition_dim())
        self.rng = np.random.default_rng([cfg.seed, 7])
        self.out_dir = Path(out_dir) if out_dir else None
        self.hooks = hooks or []
        self.iteration = 0
        self.log: list[dict[str, float]] = []
        self.audits = 0
        self.fake_rule = cfg.label_rule
        self.checkpoints: list[Path] = []
        self.train_idx = self.training_indices()
        if self.train_idx.size == 0:
            raise ValueError("dataset has no training samples")
        self.optimizers: dict[str, Adam] = {}
        for group in trainable:
            lr = cfg.lr_gen if group in GENERATOR_GROUPS else cfg.lr_disc
            self.optimizers[group] = Adam(self.model.group(group), lr=lr,
                                          beta1=cfg.beta1, beta2=cfg.beta2)

    # ------------------------------------------------------------------
    # Hooks for variants
    # ------------------------------------------------------------------

    def label_classes(self) -> int:
        m = self.lfs[0].m
        if m != self.dataset.m:
            raise LabelSpaceError(f"LFs emit {m} classes but the dataset has {self.dataset.m}")
        return m

    def condition_dim(self) -> int:
        return 0

    def training_indices(self) -> np.ndarray:
        return np.asarray(self.dataset.train_idx)

    def real_batch(self):
        """(images (B, H, W), labels (B, m), condition or None)."""
        idx = self.train_idx[self.rng.integers(0, self.train_idx.size, size=self.cfg.batch_size)]
        return self.dataset.images[idx], one_hot_labels(self.dataset.labels[idx], self.m), None

    def fake_condition(self, b: int) -> np.ndarray | None:
        return None

    def generator_extras(self, tape: Tape, fake: FakeBatch, real_images: np.ndarray) -> dict[str, Tensor]:
        return {}

    def make_fake(self, tape: Tape | None, b: int) -> FakeBatch:
        z = self.rng.standard_normal((b, self.cfg.latent_dim))
        return sample_fake_batch(self.model, self.lfs, z, tape, self.fake_rule, self.fake_condition(b))

    def audit(self, fake: FakeBatch) -> None:
        """Recompute the fake labels outside the tape and compare."""
        b = fake.size
        if self.fake_rule == "theta":
            expected = np.einsum("bi,bim->bm", fake.theta.data, fake.votes)
        else:
            expected, _ = aggregate_final_batch(fake.theta.data, fake.phi.data.reshape(b, self.n, self.n),
                                                fake.votes)
        gap = float(np.max(np.abs(expected - fake.labels.data)))
        if gap > SIMPLEX_TOL:
            raise LabelAuditError(f"fake label channel differs from the LFB by {gap:.3g} at iteration {self.iteration}")
        self.audits += 1

    # ------------------------------------------------------------------
    # Steps
    # ------------------------------------------------------------------

    def _step(self, groups: tuple[str, ...]) -> None:
        for group in groups:
            opt = self.optimizers.get(group)
            if opt is not None:
                opt.step()

    @staticmethod
    def _check_losses(losses: LossBundle) -> None:
        for name, value in losses.values().items():
            if not np.isfinite(value):
                raise NonFiniteError(f"{name} is non-finite")

    def discriminator_step(self) -> LossBundle:
        real_images, real_labels, real_cond = self.real_batch()
        fake = self.make_fake(None, self.cfg.batch_size)
        tape = Tape()
        losses = adp_losses(tape, self.model, real_images, real_labels, fake,
                            self.cfg.generator_loss, real_cond)
        self._check_losses(losses)
        tape.backward(losses.discriminator_total(tape))
        self._step(("d", "d_lfb"))
        return losses

    def generator_step(self) -> tuple[LossBundle, FakeBatch]:
        real_images, real_labels, real_cond = self.real_batch()
        tape = Tape()
        fake = self.make_fake(tape, self.cfg.batch_size)
        losses = adp_losses(tape, self.model, real_images, real_labels, fake,
                            self.cfg.generator_loss, real_cond)
        losses.extras = self.generator_extras(tape, fake, real_images)
        self._check_losses(losses)
        tape.backward(losses.generator_total(tape))
        self._step(GENERATOR_GROUPS)
        return losses, fake

    def run(self) -> TrainResult:
        cfg = self.cfg
        try:
            while self.iteration < cfg.iterations:
                for _ in range(cfg.d_steps):
                    d_losses = self.discriminator_step()
                g_losses, fake = self.generator_step()
                self.iteration += 1
                row = {
                    "iteration": float(self.iteration),
                    "L_D": d_losses.L_D.item(),
                    "L_G": g_losses.L_G.item(),
                    "L_DLFB": d_losses.L_DLFB.item(),
                    "L_G_phi": g_losses.L_G_phi.item(),
                    "theta_entropy": theta_entropy(fake.theta.data),
                }
                row.update({k: v.item() for k, v in g_losses.extras.items()})
                self.log.append(row)
                if cfg.audit_every and self.iteration % cfg.audit_every == 0:
                    self.audit(fake)
                if cfg.log_every and self.iteration % cfg.log_every == 0:
                    logger.info("iter %d/%d L_D=%.4f L_G=%.4f L_DLFB=%.4f L_G_phi=%.4f H(theta)=%.3f",
                                self.iteration, cfg.iterations, row["L_D"], row["L_G"],
                                row["L_DLFB"], row["L_G_phi"], row["theta_entropy"])
                if cfg.checkpoint_every and self.iteration % cfg.checkpoint_every == 0:
                    self.checkpoint()
        except NonFiniteError:
            logger.error("Non-finite values at iteration %d; writing checkpoint and aborting", self.iteration)
            self.checkpoint(tag="abort")
            raise
        return self.result()

    def result(self) -> TrainResult:
        skipped = sum(opt.skipped for opt in self.optimizers.values())
        return TrainResult(self.model, self.log, self.iteration, skipped, self.audits, list(self.checkpoints))

    # ------------------------------------------------------------------
    # Checkpoints
    # ------------------------------------------------------------------

    def checkpoint(self, tag: str | None = None) -> Path | None:
        if self.out_dir is None:
            return None
        name = tag or f"iter{self.iteration:06d}"
        path = self.out_dir / "checkpoints" / name
        save_checkpoint(self, path)
        self.checkpoints.append(path)
        for hook in self.hooks:
            hook(self)
        return path

    def restore(self, path: str | os.PathLike) -> None:
        load_checkpoint(self, path)


def save_checkpoint(trainer: AdpTrainer, path: str | os.PathLike) -> Path:
    p = Path(path)
    tensors = dict(trainer.model.state_dict())
    for group, opt in trainer.optimizers.items():
        tensors.update(opt.state_dict(f"adam.{group}"))
    columns = sorted({k for row in trainer.log for k in row})
    for col in columns:
        tensors[f"log.{col}"] = np.array([row.get(col, np.nan) for row in trainer.log])
    checksum = write_tensors(p / "tensors.bin", tensors)
    state = trainer.rng.bit_generator.state
    write_manifest(p / "manifest.txt", {
        "iteration": trainer.iteration,
        "config_hash": config_hash(trainer.cfg),
        "seed": trainer.cfg.seed,
        "audits": trainer.audits,
        "rng_state": state["state"]["state"],
        "rng_inc": state["state"]["inc"],
        "rng_has_uint32": state["has_uint32"],
        "rng_uinteger": state["uinteger"],
        "log_rows": len(trainer.log),
        "tensor_sha256": checksum,
    })
    logger.info("Checkpoint written: %s (iteration %d)", p, trainer.iteration)
    return p


def load_checkpoint(trainer: AdpTrainer, path: str | os.PathLike) -> None:
    p = Path(path)
    manifest = read_manifest(p / "manifest.txt")
    if manifest.get("config_hash") != config_hash(trainer.cfg):
        logger.warning("Resuming %s under a different config (hash %s != %s)",
                       p, manifest.get("config_hash"), config_hash(trainer.cfg))
    tensors = read_tensors(p / "tensors.bin")
    trainer.model.load_state_dict(tensors)
    for group, opt in trainer.optimizers.items():
        opt.load_state_dict(f"adam.{group}", tensors)
    trainer.iteration = int(manifest["iteration"])
    trainer.audits = int(manifest.get("audits", "0"))
    state = trainer.rng.bit_generator.state
    state["state"] = {"state": int(manifest["rng_state"]), "inc": int(manifest["rng_inc"])}
    state["has_uint32"] = int(manifest["rng_has_uint32"])
    state["uinteger"] = int(manifest["rng_uinteger"])
    trainer.rng.bit_generator.state = state
    rows = int(manifest.get("log_rows", "0"))
    cols = [k[len("log."):] for k in tensors if k.startswith("log.")]
    trainer.log = [{c: float(tensors[f"log.{c}"][i]) for c in cols} for i in range(rows)]
    logger.info("Resumed from %s at iteration %d", p, trainer.iteration)


def load_model(cfg: TrainConfig, path: str | os.PathLike, n: int, m: int, H: int, W: int,
               condition_dim: int = 0) -> AdpModel:
    """Weights only, for evaluation and sampling; optimizer state and log are ignored."""
    p = Path(path)
    model = build_model(cfg, n, m, H, W, condition_dim)
    model.load_state_dict(read_tensors(p / "tensors.bin"))
    logger.info("Loaded model weights from %s", p)
    return model


def train(cfg: TrainConfig, dataset: Dataset, lfs: list[LabelingFunction],
          out_dir: str | os.PathLike | None = None,
          resume_from: str | os.PathLike | None = None, **kwargs) -> TrainResult:
    trainer = AdpTrainer(cfg, dataset, lfs, out_dir=out_dir, **kwargs)
    if resume_from:
        trainer.restore(resume_from)
    return trainer.run()


def finetune_transfer(model: AdpModel, target: Dataset, cfg: TrainConfig, lfs: list[LabelingFunction],
                      freeze: tuple[str, ...] = ("g_common", "g_parameter", "d_lfb"),
                      out_dir: str | os.PathLike | None = None) -> TrainResult:
    """Continue training on `target` with the frozen groups left bit-identical."""
    if target.m != model.m or lfs[0].m != model.m:
        raise LabelSpaceError(f"model has {model.m} classes, target dataset {target.m}, LFs {lfs[0].m}")
    if len(lfs) != model.n:
        raise LabelSpaceError(f"model was trained with {model.n} LFs, got {len(lfs)}")
    unknown = set(freeze) - set(GROUPS)
    if unknown:
        raise ValueError(f"unknown parameter groups to freeze: {sorted(unknown)}")
    trainable = tuple(g for g in GROUPS if g not in freeze)
    logger.info("Transfer fine-tune: trainable=%s frozen=%s", trainable, tuple(freeze))
    trainer = AdpTrainer(cfg, target, lfs, model=model, trainable=trainable, out_dir=out_dir)
    return trainer.run()
