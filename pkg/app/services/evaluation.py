"""
evaluation.py — classifier-based metrics for generated labeled data.

EvalClassifier is a small dense net (two hidden layers) trained with a fixed
recipe; every system compared in one experiment shares the recipe and its hash.
Its penultimate layer is the FID embedding.

  MIS    exp(mean KL(p(y|x) || p(y))) with p(y) the marginal over the set
  FID    ||μ1 - μ2||² + Tr(Σ1 + Σ2 - 2 (Σ1 Σ2)^½), square root taken as
         (√Σ1 Σ2 √Σ1)^½ via eigh with negative eigenvalues clamped to 0
  C_RT   train on real, test on generated (top-1 %)
  C_RG   train on generated, test on real (top-1 %)
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass

import numpy as np
from scipy import linalg

from app.core.nn import Mlp, NetworkSpec
from app.core.optim import Adam
from app.core.tensor import Tape, constant

logger = logging.getLogger(__name__)

EMBED_DIM = 16
FID_MIN_SAMPLES = 1000
_KL_EPS = 1e-12


@dataclass(frozen=True)
class ClassifierRecipe:
    hidden: tuple[int, ...] = (64, EMBED_DIM)
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0

    def key(self) -> str:
        text = ";".join(f"{k}={v}" for k, v in sorted(asdict(self).items()))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


class EvalClassifier:
    def __init__(self, n_pixels: int, m: int, recipe: ClassifierRecipe = ClassifierRecipe()):
        self.recipe = recipe
        self.m = m
        rng = np.random.default_rng([recipe.seed, 11])
        self.net = Mlp(NetworkSpec.stack(n_pixels, recipe.hidden, m, out_act="identity"), rng, "eval")

    @staticmethod
    def _flat(images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        return images.reshape(images.shape[0], -1)

    def fit(self, images: np.ndarray, labels: np.ndarray) -> list[float]:
        """Train on hard labels (N,) or soft labels (N, m) with softmax cross-entropy."""
        x = self._flat(images)
        labels = np.asarray(labels)
        if labels.ndim == 1:
            targets = np.zeros((labels.size, self.m))
            targets[np.arange(labels.size), labels.astype(np.int64)] = 1.0
        else:
            targets = labels.astype(np.float64)
        if len(x) != len(targets):
            raise ValueError(f"{len(x)} images but {len(targets)} labels")
        opt = Adam(self.net.parameters(), lr=self.recipe.lr)
        rng = np.random.default_rng([self.recipe.seed, 12])
        history = []
        for _ in range(self.recipe.epochs):
            order = rng.permutation(len(x))
            losses = []
            for start in range(0, len(x), self.recipe.batch_size):
                batch = order[start:start + self.recipe.batch_size]
                tape = Tape()
                probs = tape.softmax(self.net.forward(tape, constant(x[batch])), axis=1)
                ce = tape.sum(tape.mul(constant(targets[batch]), tape.log(probs)), axis=1)
                loss = tape.scale(tape.mean(ce), -1.0)
                tape.backward(loss)
                opt.step()
                losses.append(loss.item())
            history.append(float(np.mean(losses)) if losses else 0.0)
        logger.debug("EvalClassifier: %d epochs, loss %.4f -> %.4f", len(history),
                     history[0] if history else 0.0, history[-1] if history else 0.0)
        return history

    def predict_proba(self, images: np.ndarray) -> np.ndarray:
        tape = Tape(record=False)
        return tape.softmax(self.net.forward(tape, constant(self._flat(images))), axis=1).data

    def embed(self, images: np.ndarray) -> np.ndarray:
        _, hidden = self.net.forward(Tape(record=False), constant(self._flat(images)), return_hidden=True)
        return hidden.data

    def accuracy(self, images: np.ndarray, labels: np.ndarray) -> float:
        if len(labels) == 0:
            return float("nan")
        return 100.0 * float(np.mean(np.argmax(self.predict_proba(images), axis=1) == np.asarray(labels)))

    def cross_entropy(self, images: np.ndarray, labels: np.ndarray) -> float:
        probs = self.predict_proba(images)
        picked = probs[np.arange(len(labels)), np.asarray(labels, dtype=np.int64)]
        return float(-np.mean(np.log(np.maximum(picked, _KL_EPS))))


def train_classifier(images: np.ndarray, labels: np.ndarray, m: int,
                     recipe: ClassifierRecipe = ClassifierRecipe()) -> EvalClassifier:
    images = np.asarray(images)
    clf = EvalClassifier(images.shape[1] * images.shape[2], m, recipe)
    clf.fit(images, labels)
    return clf


def mis_from_probs(probs: np.ndarray) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    marginal = probs.mean(axis=0, keepdims=True)
    kl = (probs * (np.log(np.maximum(probs, _KL_EPS)) - np.log(np.maximum(marginal, _KL_EPS)))).sum(axis=1)
    return float(np.exp(kl.mean()))


def modified_inception_score(classifier: EvalClassifier, images: np.ndarray) -> float:
    return mis_from_probs(classifier.predict_proba(images))


def _sqrt_psd(mat: np.ndarray) -> np.ndarray:
    vals, vecs = linalg.eigh((mat + mat.T) / 2.0)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def fid(real_features: np.ndarray, gen_features: np.ndarray) -> float:
    """Fréchet distance between Gaussian fits of two feature sets."""
    a = np.asarray(real_features, dtype=np.float64)
    b = np.asarray(gen_features, dtype=np.float64)
    d = a.shape[1]
    if b.shape[1] != d:
        raise ValueError(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")
    if len(a) < d + 1 or len(b) < d + 1:
        raise ValueError(f"FID needs at least {d + 1} samples per set, got {len(a)} and {len(b)}")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a, cov_b = np.cov(a, rowvar=False), np.cov(b, rowvar=False)
    root_a = _sqrt_psd(cov_a)
    vals = linalg.eigvalsh(root_a @ cov_b @ root_a)
    trace_root = float(np.sqrt(np.clip(vals, 0.0, None)).sum())
    return float(((mu_a - mu_b) ** 2).sum() + np.trace(cov_a) + np.trace(cov_b) - 2.0 * trace_root)


def fid_images(classifier: EvalClassifier, real: np.ndarray, generated: np.ndarray,
               min_samples: int = FID_MIN_SAMPLES) -> float:
    if len(real) < min_samples or len(generated) < min_samples:
        raise ValueError(f"FID over the embedder needs >= {min_samples} samples per set")
    return fid(classifier.embed(real), classifier.embed(generated))


def c_rt(real_images, real_labels, gen_images, gen_labels, m: int,
         recipe: ClassifierRecipe = ClassifierRecipe()) -> float:
    """Train on real pairs, report top-1 % on generated pairs."""
    return train_classifier(real_images, real_labels, m, recipe).accuracy(gen_images, gen_labels)


def c_rg(real_images, real_labels, gen_images, gen_labels, m: int,
         recipe: ClassifierRecipe = ClassifierRecipe()) -> float:
    """Train on generated pairs, report top-1 % on real pairs."""
    return train_classifier(gen_images, gen_labels, m, recipe).accuracy(real_images, real_labels)
