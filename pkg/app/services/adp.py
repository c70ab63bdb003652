"""
adp.py — the adversarial data programming networks and losses.

Generator: a shared trunk (G_common) feeds an image head (G_image, tanh) and a
parameter head (G_parameter, softplus) emitting raw Θ and Φ for the LFB.
Θ is row-normalised; Φ is symmetrised as (Φ + Φᵀ)/2.

Discriminator: an image branch and a label branch, uncoupled in their first
layers, merge into a shared trunk ending in one sigmoid. D_LFB scores flattened
Φ matrices: dependency counts Φ_real from the LF votes against generated Φ.

Fake labels are the LFB output on generated images, computed on the tape so
the label channel carries gradient back into Θ and Φ.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from app.config import TrainConfig
from app.core.nn import Mlp, NetworkSpec, checksum, load_state_dict, state_dict
from app.core.tensor import ShapeError, Tape, Tensor, constant
from app.lfb.block import (
    aggregate_final_batch,
    aggregate_final_taped,
    aggregate_theta_taped,
    compute_phi_real_batch,
)
from app.lfb.functions import LabelingFunction, apply_lfs_batch

logger = logging.getLogger(__name__)

GROUPS = ("g_common", "g_image", "g_parameter", "d", "d_lfb")
GENERATOR_GROUPS = ("g_common", "g_image", "g_parameter")


class NonFiniteError(RuntimeError):
    """A generated tensor or a loss went NaN/inf; training cannot continue."""


def _check_finite(what: str, value: np.ndarray) -> None:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{what} contains non-finite values")


# ---------------------------------------------------------------------------
# Specs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GeneratorSpec:
    latent_dim: int
    trunk_widths: tuple[int, ...]
    head_widths: tuple[int, ...]
    H: int
    W: int
    n: int
    condition_dim: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"generator needs n >= 1 labeling functions, got {self.n}")
        if not self.trunk_widths:
            raise ValueError("generator trunk needs at least one layer")

    @property
    def n_pixels(self) -> int:
        return self.H * self.W

    @property
    def n_params(self) -> int:
        return self.n + self.n * self.n


@dataclass(frozen=True)
class DiscriminatorSpec:
    n_pixels: int
    m: int
    image_widths: tuple[int, ...]
    label_widths: tuple[int, ...]
    common_widths: tuple[int, ...]
    condition_dim: int = 0

    def __post_init__(self):
        if not self.image_widths or not self.label_widths:
            raise ValueError("both discriminator branches need at least one layer")


@dataclass(frozen=True)
class LfbDiscriminatorSpec:
    n: int
    widths: tuple[int, ...]


def _phi_matrices(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Selection of raw Θ, and selection + symmetrisation of raw Φ, from the parameter head."""
    total = n + n * n
    select_theta = np.zeros((total, n))
    select_theta[np.arange(n), np.arange(n)] = 1.0
    select_phi = np.zeros((total, n * n))
    select_phi[n + np.arange(n * n), np.arange(n * n)] = 1.0
    # transpose permutation on the row-major flattened n x n matrix
    perm = np.zeros((n * n, n * n))
    for i in range(n):
        for j in range(n):
            perm[i * n + j, j * n + i] = 1.0
    sym = 0.5 * (np.eye(n * n) + perm)
    return select_theta, select_phi @ sym


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------

@dataclass
class GeneratorOutput:
    images: Tensor   # (B, H*W) in [-1, 1]
    theta: Tensor    # (B, n), rows on the simplex
    phi: Tensor      # (B, n*n), symmetric and nonnegative per row


class Generator:
    def __init__(self, spec: GeneratorSpec, rng: np.random.Generator):
        self.spec = spec
        n_in = spec.latent_dim + spec.condition_dim
        trunk = NetworkSpec((n_in, *spec.trunk_widths), ("relu",) * len(spec.trunk_widths))
        self.common = Mlp(trunk, rng, "g_common")
        self.image = Mlp(NetworkSpec.stack(spec.trunk_widths[-1], spec.head_widths, spec.n_pixels,
                                           out_act="tanh"), rng, "g_image")
        self.parameter = Mlp(NetworkSpec.stack(spec.trunk_widths[-1], spec.head_widths, spec.n_params,
                                               out_act="softplus"), rng, "g_parameter")
        self._select_theta, self._select_phi = _phi_matrices(spec.n)

    def forward(self, tape: Tape, z: Tensor, condition: Tensor | None = None) -> GeneratorOutput:
        if condition is not None:
            z = tape.concat([z, condition], axis=1)
        elif self.spec.condition_dim:
            raise ShapeError("conditional generator called without a condition")
        h = self.common.forward(tape, z)
        images = self.image.forward(tape, h)
        params = self.parameter.forward(tape, h)
        theta = tape.normalize_rows(tape.matmul(params, constant(self._select_theta)))
        phi = tape.matmul(params, constant(self._select_phi))
        return GeneratorOutput(images, theta, phi)


class Discriminator:
    """Branch-then-merge D(X, y); optional condition is fed to both branches."""

    def __init__(self, spec: DiscriminatorSpec, rng: np.random.Generator):
        self.spec = spec
        c = spec.condition_dim
        self.image_branch = Mlp(NetworkSpec((spec.n_pixels + c, *spec.image_widths),
                                            ("relu",) * len(spec.image_widths)), rng, "d.image")
        self.label_branch = Mlp(NetworkSpec((spec.m + c, *spec.label_widths),
                                            ("relu",) * len(spec.label_widths)), rng, "d.label")
        self.common = Mlp(NetworkSpec.stack(spec.image_widths[-1] + spec.label_widths[-1],
                                            spec.common_widths, 1, out_act="sigmoid"), rng, "d.common")

    def forward(self, tape: Tape, images: Tensor, labels: Tensor,
                condition: Tensor | None = None) -> Tensor:
        if images.shape[0] != labels.shape[0]:
            raise ShapeError(f"discriminator: {images.shape[0]} images but {labels.shape[0]} labels")
        if labels.data.ndim != 2 or labels.shape[1] != self.spec.m:
            raise ShapeError(f"discriminator: labels must be (batch, {self.spec.m}), got {labels.shape}")
        if condition is not None:
            images = tape.concat([images, condition], axis=1)
            labels = tape.concat([labels, condition], axis=1)
        merged = tape.concat([self.image_branch.forward(tape, images),
                              self.label_branch.forward(tape, labels)], axis=1)
        return self.common.forward(tape, merged)

    def parameters(self) -> list[Tensor]:
        return (self.image_branch.parameters() + self.label_branch.parameters()
                + self.common.parameters())


class LfbDiscriminator:
    def __init__(self, spec: LfbDiscriminatorSpec, rng: np.random.Generator):
        self.spec = spec
        self.net = Mlp(NetworkSpec.stack(spec.n * spec.n, spec.widths, 1, out_act="sigmoid"),
                       rng, "d_lfb")

    def forward(self, tape: Tape, phi_flat: Tensor) -> Tensor:
        return self.net.forward(tape, phi_flat)

    def parameters(self) -> list[Tensor]:
        return self.net.parameters()


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

class AdpModel:
    def __init__(self, gen_spec: GeneratorSpec, disc_spec: DiscriminatorSpec,
                 lfb_spec: LfbDiscriminatorSpec, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.gen_spec = gen_spec
        self.disc_spec = disc_spec
        self.lfb_spec = lfb_spec
        self.generator = Generator(gen_spec, rng)
        self.discriminator = Discriminator(disc_spec, rng)
        self.d_lfb = LfbDiscriminator(lfb_spec, rng)

    @property
    def n(self) -> int:
        return self.gen_spec.n

    @property
    def m(self) -> int:
        return self.disc_spec.m

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.gen_spec.H, self.gen_spec.W

    def group(self, name: str) -> list[Tensor]:
        if name == "g_common":
            return self.generator.common.parameters()
        if name == "g_image":
            return self.generator.image.parameters()
        if name == "g_parameter":
            return self.generator.parameter.parameters()
        if name == "d":
            return self.discriminator.parameters()
        if name == "d_lfb":
            return self.d_lfb.parameters()
        raise KeyError(f"unknown parameter group {name!r}")

    def parameters(self, groups=GROUPS) -> list[Tensor]:
        return [p for g in groups for p in self.group(g)]

    def state_dict(self) -> dict[str, np.ndarray]:
        return state_dict(self.parameters())

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        load_state_dict(self.parameters(), state)

    def checksum(self, group: str | None = None) -> str:
        return checksum(self.group(group) if group else self.parameters())

    def generate(self, z: np.ndarray, condition: np.ndarray | None = None):
        """No-grad generation: images (B, H, W), Θ̃ (B, n), Φ (B, n, n)."""
        out = self.generator.forward(Tape(record=False), constant(z),
                                     None if condition is None else constant(condition))
        b = z.shape[0]
        images = out.images.data.reshape(b, *self.image_shape)
        _check_finite("generated images", images)
        _check_finite("generated theta", out.theta.data)
        _check_finite("generated phi", out.phi.data)
        return images, out.theta.data, out.phi.data.reshape(b, self.n, self.n)

    def discriminate(self, images: np.ndarray, labels: np.ndarray,
                     condition: np.ndarray | None = None) -> np.ndarray:
        """D(X, y) per sample, shape (B,)."""
        images = np.asarray(images, dtype=np.float64)
        flat = images.reshape(images.shape[0], -1)
        if flat.shape[1] != self.disc_spec.n_pixels:
            raise ShapeError(f"discriminate: expected {self.disc_spec.n_pixels} pixels, got {flat.shape[1]}")
        out = self.discriminator.forward(Tape(record=False), constant(flat), constant(labels),
                                         None if condition is None else constant(condition))
        return out.data[:, 0]


def build_model(cfg: TrainConfig, n: int, m: int, H: int, W: int, condition_dim: int = 0) -> AdpModel:
    gen = GeneratorSpec(cfg.latent_dim, cfg.trunk_widths, cfg.head_widths, H, W, n, condition_dim)
    disc = DiscriminatorSpec(H * W, m, cfg.disc_widths, cfg.label_widths, cfg.common_widths, condition_dim)
    lfb = LfbDiscriminatorSpec(n, cfg.lfb_widths)
    model = AdpModel(gen, disc, lfb, seed=cfg.seed)
    logger.debug("Built ADP model n=%d m=%d image=%dx%d condition_dim=%d params=%d",
                 n, m, H, W, condition_dim, sum(p.size for p in model.parameters()))
    return model


# ---------------------------------------------------------------------------
# Fake batches and losses
# ---------------------------------------------------------------------------

@dataclass
class FakeBatch:
    images: Tensor            # (B, H*W)
    theta: Tensor             # (B, n)
    phi: Tensor               # (B, n*n)
    votes: np.ndarray         # (B, n, m) LF outputs on the generated images
    labels: Tensor            # (B, m) LFB label fed to D
    phi_real: np.ndarray      # (B, n, n) compute_phi_real_batch(theta, votes)
    condition: Tensor | None = None

    @property
    def size(self) -> int:
        return int(self.images.shape[0])


def lfb_label_taped(tape: Tape, theta: Tensor, phi: Tensor, votes: np.ndarray, rule: str) -> Tensor:
    if rule == "theta":
        return aggregate_theta_taped(tape, theta, votes)
    return aggregate_final_taped(tape, theta, phi, votes)


def sample_fake_batch(model: AdpModel, lfs: list[LabelingFunction], z: np.ndarray,
                      tape: Tape | None = None, label_rule: str = "final",
                      condition: np.ndarray | None = None) -> FakeBatch:
    """Run G, the LFs and the LFB on one latent batch. Without a tape, nothing is tracked."""
    if tape is None:
        tape = Tape(record=False)
    cond = None if condition is None else constant(condition)
    out = model.generator.forward(tape, constant(z), cond)
    _check_finite("generated images", out.images.data)
    _check_finite("generated theta", out.theta.data)
    _check_finite("generated phi", out.phi.data)
    b = z.shape[0]
    votes = apply_lfs_batch(lfs, out.images.data.reshape(b, *model.image_shape))
    labels = lfb_label_taped(tape, out.theta, out.phi, votes, label_rule)
    phi_real = compute_phi_real_batch(out.theta.data, votes)
    return FakeBatch(out.images, out.theta, out.phi, votes, labels, phi_real, cond)


def bce_pair(tape: Tape, d_real: Tensor, d_fake: Tensor) -> Tensor:
    """mean(-log d_real - log(1 - d_fake))."""
    per = tape.add(tape.log(d_real), tape.log(tape.one_minus(d_fake)))
    return tape.scale(tape.mean(per), -1.0)


def generator_term(tape: Tape, d_fake: Tensor, mode: str) -> Tensor:
    """Non-saturating -mean(log D(fake)) or the literal mean(log(1 - D(fake)))."""
    if mode == "saturating":
        return tape.mean(tape.log(tape.one_minus(d_fake)))
    return tape.scale(tape.mean(tape.log(d_fake)), -1.0)


@dataclass
class LossBundle:
    L_D: Tensor
    L_G: Tensor
    L_DLFB: Tensor
    L_G_phi: Tensor
    extras: dict[str, Tensor] = field(default_factory=dict)

    def discriminator_total(self, tape: Tape) -> Tensor:
        return tape.add(self.L_D, self.L_DLFB)

    def generator_total(self, tape: Tape) -> Tensor:
        total = tape.add(self.L_G, self.L_G_phi)
        for term in self.extras.values():
            total = tape.add(total, term)
        return total

    def values(self) -> dict[str, float]:
        out = {"L_D": self.L_D.item(), "L_G": self.L_G.item(),
               "L_DLFB": self.L_DLFB.item(), "L_G_phi": self.L_G_phi.item()}
        out.update({k: v.item() for k, v in self.extras.items()})
        return out


def adp_losses(tape: Tape, model: AdpModel, real_images: np.ndarray, real_labels: np.ndarray,
               fake: FakeBatch, generator_loss: str = "non_saturating",
               real_condition: np.ndarray | None = None) -> LossBundle:
    """L_D, L_G, L_DLFB and L_G_phi for one real batch and one fake batch.

    real_labels are (B, m) distributions; hard labels should be one-hot encoded by the caller.
    """
    real_flat = constant(np.asarray(real_images, dtype=np.float64).reshape(len(real_images), -1))
    cond = None if real_condition is None else constant(real_condition)
    d_real = model.discriminator.forward(tape, real_flat, constant(real_labels), cond)
    d_fake = model.discriminator.forward(tape, fake.images, fake.labels, fake.condition)
    b = fake.size
    dl_real = model.d_lfb.forward(tape, constant(fake.phi_real.reshape(b, -1)))
    dl_fake = model.d_lfb.forward(tape, fake.phi)
    return LossBundle(
        L_D=bce_pair(tape, d_real, d_fake),
        L_G=generator_term(tape, d_fake, generator_loss),
        L_DLFB=bce_pair(tape, dl_real, dl_fake),
        L_G_phi=generator_term(tape, dl_fake, generator_loss),
    )


def one_hot_labels(labels: np.ndarray, m: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= m):
        raise ValueError(f"labels must lie in [0, {m}), got range [{labels.min()}, {labels.max()}]")
    out = np.zeros((labels.size, m))
    out[np.arange(labels.size), labels] = 1.0
    return out


def theta_entropy(theta: np.ndarray) -> float:
    """Mean Shannon entropy (nats) of Θ̃ rows."""
    t = np.clip(theta, 1e-12, 1.0)
    return float(-(theta * np.log(t)).sum(axis=1).mean())


def sample_labeled(model: AdpModel, lfs: list[LabelingFunction], count: int, seed: int,
                   label_rule: str = "final", condition: np.ndarray | None = None,
                   batch_size: int = 256):
    """Draw generated (image, label) pairs: images (N, H, W), soft labels (N, m), hard labels (N,)."""
    rng = np.random.default_rng(seed)
    images, soft = [], []
    for start in range(0, count, batch_size):
        b = min(batch_size, count - start)
        z = rng.standard_normal((b, model.gen_spec.latent_dim))
        cond = None if condition is None else condition[start:start + b]
        img, theta, phi = model.generate(z, cond)
        votes = apply_lfs_batch(lfs, img)
        if label_rule == "theta":
            labels = np.einsum("bi,bim->bm", theta, votes)
        else:
            labels, _ = aggregate_final_batch(theta, phi, votes)
        images.append(img)
        soft.append(labels)
    if not images:
        h, w = model.image_shape
        return np.empty((0, h, w)), np.empty((0, model.m)), np.empty(0, dtype=np.int64)
    soft_all = np.concatenate(soft)
    return np.concatenate(images), soft_all, np.argmax(soft_all, axis=1)
