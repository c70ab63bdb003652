"""
variants.py — self-supervised (SS) and zero-shot (ZS) training on top of AdpTrainer.

SS: real images carry no labels. The real label channel becomes the LFB applied
to real images, using Θ/Φ drawn from the generator, and a rotation consistency
term λ_self · mean |LFB(X) - LFB(rotate(X, r))|₁ joins the generator update.

ZS: the generator and discriminator see a fixed condition vector per class.
Attributes act as the LFs (n = p). Fake labels come from the attribute rule
against every class signature, and a cycle term λ_cycle · mean |s - s_gt|₁
pulls the attribute output of generated images toward the conditioning class.
Adversarial terms only use seen classes; the cycle term covers every class.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from app.config import TrainConfig
from app.core.tensor import Tape, Tensor, constant
from app.lfb.block import (
    aggregate_final_batch,
    aggregate_final_taped,
    attribute_label_taped,
    attribute_output_taped,
    compute_phi_real_batch,
    zero_shot_label_batch,
)
from app.lfb.functions import AttributeDetector, LabelingFunction, apply_lfs_batch
from app.services.adp import AdpModel, FakeBatch
from app.services.synthetic import ROTATIONS, Dataset, rotate_each
from app.services.trainer import AdpTrainer, LabelAuditError, TrainResult

logger = logging.getLogger(__name__)


class ZeroShotLeakError(RuntimeError):
    """A zero-shot class image reached the training batches."""


# ---------------------------------------------------------------------------
# Self-supervised
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SsConfig:
    lambda_self: float = 0.3
    rotations: tuple[int, ...] = ROTATIONS
    mode: str = "sample"

    def __post_init__(self):
        if self.lambda_self < 0:
            raise ValueError(f"lambda_self must be >= 0, got {self.lambda_self}")
        if self.mode not in ("sample", "average"):
            raise ValueError(f"rotation mode must be sample or average, got {self.mode!r}")
        bad = [r for r in self.rotations if r not in ROTATIONS]
        if bad or not self.rotations:
            raise ValueError(f"rotations must be a non-empty subset of {ROTATIONS}, got {self.rotations}")

    @classmethod
    def from_train(cls, cfg: TrainConfig) -> "SsConfig":
        return cls(lambda_self=cfg.lambda_self, mode=cfg.rotation_mode)


def self_supervised_loss(theta: np.ndarray, phi: np.ndarray, lfs: list[LabelingFunction],
                         images: np.ndarray, rotations) -> float:
    """Mean L1 distance between LFB labels of images and of their rotations.

    `rotations` is either one angle per image or the string "all" (average over the four angles).
    theta (B, n) and phi (B, n, n) pair with images row by row.
    """
    images = np.asarray(images, dtype=np.float64)
    base, _ = aggregate_final_batch(theta, phi, apply_lfs_batch(lfs, images))
    if isinstance(rotations, str):
        angles = [np.full(len(images), r) for r in ROTATIONS]
    else:
        angles = [np.asarray(rotations)]
    total = 0.0
    for r in angles:
        rotated, _ = aggregate_final_batch(theta, phi, apply_lfs_batch(lfs, rotate_each(images, r)))
        total += float(np.abs(base - rotated).sum(axis=1).mean())
    return total / len(angles)


def self_supervised_loss_taped(tape: Tape, theta: Tensor, phi: Tensor, lfs: list[LabelingFunction],
                               images: np.ndarray, rotations: list[np.ndarray]) -> Tensor:
    if len(images) == 0:
        raise ValueError("self-supervised loss needs a non-empty batch")
    base = aggregate_final_taped(tape, theta, phi, apply_lfs_batch(lfs, images))
    terms = []
    for r in rotations:
        rotated = aggregate_final_taped(tape, theta, phi, apply_lfs_batch(lfs, rotate_each(images, r)))
        terms.append(tape.mean(tape.l1_distance(base, rotated, axis=1)))
    total = terms[0]
    for term in terms[1:]:
        total = tape.add(total, term)
    return tape.scale(total, 1.0 / len(terms))


class SelfSupervisedTrainer(AdpTrainer):
    """Unlabeled real images: labels from the LFB, plus rotation consistency."""

    def __init__(self, cfg: TrainConfig, dataset: Dataset, lfs: list[LabelingFunction], **kwargs):
        self.ss = SsConfig.from_train(cfg)
        super().__init__(cfg, dataset, lfs, **kwargs)
        if cfg.ss_fake_label == "theta":
            self.fake_rule = "theta"

    def label_classes(self) -> int:
        return self.lfs[0].m

    def _lfb_params(self, b: int):
        z = self.rng.standard_normal((b, self.cfg.latent_dim))
        _, theta, phi = self.model.generate(z)
        return theta, phi

    def real_batch(self):
        idx = self.train_idx[self.rng.integers(0, self.train_idx.size, size=self.cfg.batch_size)]
        images = self.dataset.images[idx]
        theta, phi = self._lfb_params(len(images))
        labels, _ = aggregate_final_batch(theta, phi, apply_lfs_batch(self.lfs, images))
        return images, labels, None

    def _rotation_sets(self, b: int) -> list[np.ndarray]:
        if self.ss.mode == "average":
            return [np.full(b, r) for r in self.ss.rotations]
        return [self.rng.choice(np.asarray(self.ss.rotations), size=b)]

    def generator_extras(self, tape: Tape, fake: FakeBatch, real_images: np.ndarray) -> dict[str, Tensor]:
        if self.ss.lambda_self == 0:
            return {}
        loss = self_supervised_loss_taped(tape, fake.theta, fake.phi, self.lfs, real_images,
                                          self._rotation_sets(len(real_images)))
        return {"L_self": tape.scale(loss, self.ss.lambda_self)}


def train_ss(cfg: TrainConfig, dataset: Dataset, lfs: list[LabelingFunction], **kwargs) -> TrainResult:
    return SelfSupervisedTrainer(cfg, dataset, lfs, **kwargs).run()


# ---------------------------------------------------------------------------
# Zero-shot
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ZsConfig:
    lambda_cycle: float
    condition_table: np.ndarray
    signatures: np.ndarray
    seen: tuple[int, ...]
    zero_shot: tuple[int, ...]
    direction: str = "argmax"

    def __post_init__(self):
        if self.lambda_cycle < 0:
            raise ValueError(f"lambda_cycle must be >= 0, got {self.lambda_cycle}")
        if not self.seen:
            raise ValueError("zero-shot training needs at least one seen class")

    @classmethod
    def from_dataset(cls, cfg: TrainConfig, ds: Dataset) -> "ZsConfig":
        if ds.signatures is None or ds.condition_table is None:
            raise ValueError(f"dataset {ds.manifest.name!r} has no attribute signatures")
        return cls(cfg.lambda_cycle, ds.condition_table, ds.signatures,
                   ds.seen_classes, ds.zero_shot_classes, cfg.zero_shot_direction)

    @property
    def K(self) -> int:
        return int(self.signatures.shape[0])

    def conditions_for(self, classes: np.ndarray) -> np.ndarray:
        classes = np.asarray(classes)
        if classes.size and (classes.min() < 0 or classes.max() >= self.K):
            raise ValueError(f"condition requested for unknown class ids {sorted(set(classes.tolist()))}")
        return self.condition_table[classes]


def attribute_votes(s_hard: np.ndarray) -> np.ndarray:
    """Two-class vote per attribute, [1 - s_i, s_i]: (B, p) -> (B, p, 2)."""
    return np.stack([1.0 - s_hard, s_hard], axis=2)


class ZeroShotTrainer(AdpTrainer):
    def __init__(self, cfg: TrainConfig, dataset: Dataset, detector: AttributeDetector | None = None,
                 **kwargs):
        self.zs = ZsConfig.from_dataset(cfg, dataset)
        H, W = dataset.image_shape
        self.detector = detector if detector is not None else AttributeDetector(self.zs.signatures.shape[1], H, W)
        self.split_audits = 0
        super().__init__(cfg, dataset, self.detector.lfs(), **kwargs)

    def label_classes(self) -> int:
        return self.zs.K

    def condition_dim(self) -> int:
        return int(self.zs.condition_table.shape[1])

    def training_indices(self) -> np.ndarray:
        idx = np.asarray(self.dataset.train_idx)
        keep = ~np.isin(self.dataset.labels[idx], self.zs.zero_shot)
        if not keep.all():
            logger.warning("ZS training: dropped %d zero-shot images from the train split", int((~keep).sum()))
        return idx[keep]

    def _audit_split(self, labels: np.ndarray) -> None:
        leaked = np.isin(labels, self.zs.zero_shot)
        if leaked.any():
            raise ZeroShotLeakError(f"zero-shot classes {sorted(set(labels[leaked].tolist()))} in a training batch")
        self.split_audits += 1

    def real_batch(self):
        idx = self.train_idx[self.rng.integers(0, self.train_idx.size, size=self.cfg.batch_size)]
        labels = self.dataset.labels[idx]
        self._audit_split(labels)
        onehot = np.zeros((len(idx), self.zs.K))
        onehot[np.arange(len(idx)), labels] = 1.0
        return self.dataset.images[idx], onehot, self.zs.conditions_for(labels)

    def _fake_for(self, tape: Tape | None, classes: np.ndarray):
        if tape is None:
            tape = Tape(record=False)
        b = len(classes)
        z = self.rng.standard_normal((b, self.cfg.latent_dim))
        cond = constant(self.zs.conditions_for(classes))
        out = self.model.generator.forward(tape, constant(z), cond)
        s_soft = self.detector.soft_taped(tape, out.images)
        attr = attribute_output_taped(tape, out.theta, out.phi, s_soft)
        labels = attribute_label_taped(tape, attr, self.zs.signatures)
        votes = attribute_votes(self.detector.hard(out.images.data.reshape(b, *self.model.image_shape)))
        fake = FakeBatch(out.images, out.theta, out.phi, votes, labels,
                         compute_phi_real_batch(out.theta.data, votes), cond)
        return fake, attr, s_soft

    def make_fake(self, tape: Tape | None, b: int) -> FakeBatch:
        classes = self.rng.choice(np.asarray(self.zs.seen), size=b)
        fake, _, _ = self._fake_for(tape, classes)
        return fake

    def cycle_loss(self, tape: Tape, b: int) -> Tensor:
        """λ_cycle · mean |attribute output - s_gt|₁ over generated samples of every class."""
        classes = self.rng.integers(0, self.zs.K, size=b)
        _, attr, _ = self._fake_for(tape, classes)
        target = constant(self.zs.signatures[classes])
        return tape.scale(tape.mean(tape.l1_distance(attr, target, axis=1)), self.zs.lambda_cycle)

    def generator_extras(self, tape: Tape, fake: FakeBatch, real_images: np.ndarray) -> dict[str, Tensor]:
        if self.zs.lambda_cycle == 0:
            return {}
        return {"L_cycle": self.cycle_loss(tape, fake.size)}

    def audit(self, fake: FakeBatch) -> None:
        b = fake.size
        s_soft = self.detector.soft(fake.images.data.reshape(b, *self.model.image_shape))
        phi = fake.phi.data.reshape(b, self.n, self.n)
        weighted = np.einsum("bij,bj->bi", phi, fake.theta.data) * s_soft
        scores = weighted @ self.zs.signatures.T
        mass = scores.sum(axis=1, keepdims=True)
        expected = np.where(mass < 1e-12, 1.0 / self.zs.K, scores / np.where(mass < 1e-12, 1.0, mass))
        gap = float(np.max(np.abs(expected - fake.labels.data)))
        if gap > 1e-9:
            raise LabelAuditError(f"attribute label channel differs by {gap:.3g} at iteration {self.iteration}")
        self.audits += 1


def train_zs(cfg: TrainConfig, dataset: Dataset, **kwargs) -> TrainResult:
    trainer = ZeroShotTrainer(cfg, dataset, **kwargs)
    result = trainer.run()
    logger.info("ZS training finished: %d split audits, zero-shot classes %s",
                trainer.split_audits, trainer.zs.zero_shot)
    return result


@dataclass
class ZeroShotReport:
    overall: float
    seen: float
    zero_shot: float
    per_class: dict[int, float]


def zero_shot_predict(detector: AttributeDetector, signatures: np.ndarray,
                      images: np.ndarray, theta: np.ndarray, phi: np.ndarray,
                      direction: str = "argmax") -> np.ndarray:
    return zero_shot_label_batch(theta, phi, detector.hard(images), signatures, direction)


def zero_shot_accuracy(model: AdpModel, zs: ZsConfig, detector: AttributeDetector,
                       per_class: int = 100, seed: int = 0) -> ZeroShotReport:
    """Generate per_class samples for every class and score retrieval of the conditioning class."""
    rng = np.random.default_rng(seed)
    per: dict[int, float] = {}
    for cls in range(zs.K):
        z = rng.standard_normal((per_class, model.gen_spec.latent_dim))
        cond = zs.conditions_for(np.full(per_class, cls))
        images, theta, phi = model.generate(z, cond)
        pred = zero_shot_predict(detector, zs.signatures, images, theta, phi, zs.direction)
        per[cls] = float(np.mean(pred == cls))

    def _mean(classes) -> float:
        return float(np.mean([per[c] for c in classes])) if classes else float("nan")

    return ZeroShotReport(_mean(range(zs.K)), _mean(zs.seen), _mean(zs.zero_shot), per)
