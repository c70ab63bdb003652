"""
feature.py — nearest-centroid feature labeling function.

A small autoencoder is trained on unlabeled training images. Each image's
feature vector is the absolute activation of the encoder units. Training
features are clustered with k-means (k = number of classes), the per-cluster
mean feature vector is stored in a FeatureBank, and the LF votes one-hot for
the cluster whose mean is closest in L1.

Cluster ids carry no class meaning; the LFB's learned weights absorb the
permutation like any other weak LF.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from app.core.nn import Mlp, NetworkSpec, load_state_dict, state_dict
from app.core.optim import Adam
from app.core.tensor import Tape, Tensor, constant
from app.db.container import read_tensors, write_tensors
from app.lfb.functions import LabelingFunction

logger = logging.getLogger(__name__)

FEATURE_DIM = 16
FEATURE_EPOCHS = 20
FEATURE_BANK_FILE = "feature_bank.bin"


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------

@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia_history: list[float] = field(default_factory=list)
    reseeded: int = 0

    @property
    def inertia(self) -> float:
        return self.inertia_history[-1] if self.inertia_history else 0.0


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)


def _kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    closest = ((points - points[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            # every remaining point coincides with a chosen centre
            remaining = np.setdiff1d(np.arange(n), chosen)
            idx = int(remaining[0]) if remaining.size else int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        chosen.append(idx)
        closest = np.minimum(closest, ((points - points[idx]) ** 2).sum(axis=1))
    return points[chosen].copy()


def kmeans(points: np.ndarray, k: int, seed: int = 0, iters: int = 100) -> KMeansResult:
    """Lloyd's iterations from a seeded k-means++ start.

    An empty cluster has its centroid moved to the point farthest from its own centroid.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError(f"kmeans expects (count, dim) points, got {points.shape}")
    if not 1 <= k <= points.shape[0]:
        raise ValueError(f"kmeans needs 1 <= k <= count, got k={k}, count={points.shape[0]}")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(points, k, rng)
    result = KMeansResult(assignments=np.full(points.shape[0], -1), centroids=centroids)

    for _ in range(max(iters, 1)):
        d = _sq_dists(points, centroids)
        assign = np.argmin(d, axis=1)
        result.inertia_history.append(float(d[np.arange(points.shape[0]), assign].sum()))
        if np.array_equal(assign, result.assignments):
            break
        result.assignments = assign
        own = d[np.arange(points.shape[0]), assign]
        for c in range(k):
            members = assign == c
            if members.any():
                centroids[c] = points[members].mean(axis=0)
            else:
                far = int(np.argmax(own))
                centroids[c] = points[far]
                own[far] = 0.0
                result.reseeded += 1
                logger.debug("kmeans: cluster %d empty, reseeded to point %d", c, far)
    result.centroids = centroids
    return result


# ---------------------------------------------------------------------------
# Feature net
# ---------------------------------------------------------------------------

class FeatureNet:
    """Dense autoencoder H*W -> FEATURE_DIM -> H*W, tanh on both layers."""

    def __init__(self, n_pixels: int, seed: int = 0, dim: int = FEATURE_DIM):
        rng = np.random.default_rng(seed)
        self.encoder = Mlp(NetworkSpec((n_pixels, dim), ("tanh",)), rng, "feature.encoder")
        self.decoder = Mlp(NetworkSpec((dim, n_pixels), ("tanh",)), rng, "feature.decoder")

    def parameters(self) -> list[Tensor]:
        return self.encoder.parameters() + self.decoder.parameters()

    def fit(self, images: np.ndarray, epochs: int = FEATURE_EPOCHS, batch_size: int = 64,
            lr: float = 1e-2, seed: int = 0) -> list[float]:
        flat = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
        opt = Adam(self.parameters(), lr=lr)
        rng = np.random.default_rng(seed)
        history = []
        for epoch in range(epochs):
            order = rng.permutation(len(flat))
            losses = []
            for start in range(0, len(flat), batch_size):
                x = constant(flat[order[start:start + batch_size]])
                tape = Tape()
                recon = self.decoder.forward(tape, self.encoder.forward(tape, x))
                diff = tape.sub(recon, x)
                loss = tape.mean(tape.mul(diff, diff))
                tape.backward(loss)
                opt.step()
                losses.append(loss.item())
            history.append(float(np.mean(losses)))
            logger.debug("feature net epoch %d: reconstruction mse=%.5f", epoch, history[-1])
        return history

    def features(self, images: np.ndarray) -> np.ndarray:
        flat = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
        hidden = self.encoder.forward(Tape(record=False), constant(flat))
        return np.abs(hidden.data)


# ---------------------------------------------------------------------------
# Bank + LF
# ---------------------------------------------------------------------------

@dataclass
class FeatureBank:
    v_avg: np.ndarray
    net: FeatureNet | None
    empty_clusters: tuple[int, ...] = ()

    @property
    def k(self) -> int:
        return int(self.v_avg.shape[0])


def build_feature_bank(features: np.ndarray, assignments: np.ndarray, k: int,
                       net: FeatureNet | None = None) -> FeatureBank:
    """v_avg[i] = mean feature vector of cluster i; empty clusters get the global mean."""
    features = np.asarray(features, dtype=np.float64)
    assignments = np.asarray(assignments)
    if features.shape[0] != assignments.shape[0]:
        raise ValueError(f"{features.shape[0]} feature rows but {assignments.shape[0]} assignments")
    v_avg = np.empty((k, features.shape[1]))
    empty = []
    for i in range(k):
        members = assignments == i
        if members.any():
            v_avg[i] = features[members].mean(axis=0)
        else:
            v_avg[i] = features.mean(axis=0)
            empty.append(i)
    if empty:
        logger.warning("Feature bank: clusters %s empty, filled with the global mean", empty)
    return FeatureBank(v_avg=v_avg, net=net, empty_clusters=tuple(empty))


def nearest_centroid(v_avg: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Index of the L1-nearest bank row for each feature row; lowest index on ties."""
    v = np.atleast_2d(v)
    dist = np.abs(v_avg[None, :, :] - v[:, None, :]).sum(axis=2)
    return np.argmin(dist, axis=1)


def feature_lf(bank: FeatureBank, image: np.ndarray) -> np.ndarray:
    return feature_lf_batch(bank, np.asarray(image)[None])[0]


def feature_lf_batch(bank: FeatureBank, images: np.ndarray) -> np.ndarray:
    if bank.net is None:
        raise ValueError("feature bank has no feature net attached")
    idx = nearest_centroid(bank.v_avg, bank.net.features(images))
    out = np.zeros((len(idx), bank.k))
    out[np.arange(len(idx)), idx] = 1.0
    return out


def make_feature_lf(bank: FeatureBank, arity: tuple[int, int], lf_id: str = "feature") -> LabelingFunction:
    return LabelingFunction(lf_id, tuple(arity), bank.k,
                            lambda images: feature_lf_batch(bank, images), family="feature")


def train_feature_bank(images: np.ndarray, k: int, seed: int = 0,
                       epochs: int = FEATURE_EPOCHS) -> FeatureBank:
    """Fit the autoencoder and k-means on training images only, then build the bank."""
    images = np.asarray(images, dtype=np.float64)
    net = FeatureNet(images.shape[1] * images.shape[2], seed=seed)
    history = net.fit(images, epochs=epochs, seed=seed)
    feats = net.features(images)
    clusters = kmeans(feats, k, seed=seed)
    logger.info("Feature bank: k=%d, recon mse %.4f -> %.4f, inertia %.4f",
                k, history[0] if history else 0.0, history[-1] if history else 0.0, clusters.inertia)
    return build_feature_bank(feats, clusters.assignments, k, net=net)


def save_feature_bank(bank: FeatureBank, path: str | os.PathLike) -> str:
    tensors = {"v_avg": bank.v_avg, "empty": np.asarray(bank.empty_clusters, dtype=np.float64)}
    if bank.net is not None:
        tensors["n_pixels"] = np.array([bank.net.encoder.n_in], dtype=np.float64)
        tensors.update(state_dict(bank.net.parameters()))
    return write_tensors(path, tensors)


def load_feature_bank(path: str | os.PathLike) -> FeatureBank:
    tensors = read_tensors(path)
    net = None
    if "n_pixels" in tensors:
        net = FeatureNet(int(tensors["n_pixels"][0]))
        load_state_dict(net.parameters(), tensors)
    return FeatureBank(
        v_avg=tensors["v_avg"],
        net=net,
        empty_clusters=tuple(int(i) for i in tensors["empty"]),
    )


def feature_bank_for(images: np.ndarray, k: int, path: str | os.PathLike, seed: int = 0) -> FeatureBank:
    """Load the bank stored at `path`, or train one on `images` and store it there."""
    path = Path(path)
    if path.exists():
        bank = load_feature_bank(path)
        if bank.k != k:
            raise ValueError(f"feature bank {path} has {bank.k} clusters, need {k}")
        logger.info("Feature bank: loaded %s", path)
        return bank
    bank = train_feature_bank(images, k, seed=seed)
    save_feature_bank(bank, path)
    logger.info("Feature bank: saved %s", path)
    return bank
