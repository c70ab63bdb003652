"""
baselines.py — majority vote and the MLE data-programming label model.

The DP model is the symmetric-noise, independent-LF model: LF i votes the
true class with probability α_i and each wrong class with (1 - α_i)/(m - 1).
It is fit by EM. A vote of -1 is an abstention (the LF's output was not one-hot).
"""
from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

logger = logging.getLogger(__name__)

ALPHA_CLIP = (0.01, 0.99)
ABSTAIN = -1


def majority_vote(A: np.ndarray) -> np.ndarray:
    """One-hot of the plurality over per-LF argmaxes; lowest index on ties."""
    return majority_vote_batch(np.asarray(A)[None])[0]


def majority_vote_batch(A: np.ndarray) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 3:
        raise ValueError(f"majority_vote_batch expects (B, n, m) outputs, got {A.shape}")
    b, _, m = A.shape
    picks = np.argmax(A, axis=2)
    counts = np.stack([(picks == c).sum(axis=1) for c in range(m)], axis=1)
    out = np.zeros((b, m))
    out[np.arange(b), np.argmax(counts, axis=1)] = 1.0
    return out


def votes_from_outputs(A: np.ndarray) -> np.ndarray:
    """(N, n, m) LF outputs -> (N, n) class votes, ABSTAIN where a row is not one-hot."""
    A = np.asarray(A, dtype=np.float64)
    one_hot = np.isclose(A.max(axis=2), 1.0) & np.isclose(A.sum(axis=2), 1.0)
    return np.where(one_hot, np.argmax(A, axis=2), ABSTAIN)


@dataclass
class DpModel:
    alpha: np.ndarray
    prior: np.ndarray
    independent: bool = True
    log_likelihood: list[float] = field(default_factory=list)

    @property
    def m(self) -> int:
        return int(self.prior.shape[0])

    @property
    def n(self) -> int:
        return int(self.alpha.shape[0])


def _joint_log(votes: np.ndarray, alpha: np.ndarray, prior: np.ndarray) -> np.ndarray:
    """log P(votes, Y=y) for every sample and class: (N, m)."""
    m = prior.shape[0]
    log_right = np.log(alpha)
    log_wrong = np.log((1.0 - alpha) / max(m - 1, 1))
    out = np.tile(np.log(prior), (votes.shape[0], 1))
    for i in range(votes.shape[1]):
        v = votes[:, i]
        voted = v != ABSTAIN
        match = (v[:, None] == np.arange(m)[None, :]) & voted[:, None]
        wrong = (~match) & voted[:, None]
        out += match * log_right[i] + wrong * log_wrong[i]
    return out


def _as_votes(votes: np.ndarray) -> np.ndarray:
    votes = np.asarray(votes)
    if votes.ndim == 3:
        return votes_from_outputs(votes)
    if votes.ndim != 2:
        raise ValueError(f"votes must be (N, n) class ids or (N, n, m) outputs, got {votes.shape}")
    return votes.astype(np.int64)


def dp_mle_fit(votes: np.ndarray, m: int, iters: int = 200, tol: float = 1e-9,
               alpha_init: float = 0.7, learn_prior: bool = True) -> DpModel:
    """EM for the symmetric DP model. The log-likelihood history is non-decreasing."""
    votes = _as_votes(votes)
    if votes.size and votes.max() >= m:
        raise ValueError(f"votes reference class {votes.max()} but m={m}")
    n = votes.shape[1]
    alpha = np.full(n, float(alpha_init))
    prior = np.full(m, 1.0 / m)
    model = DpModel(alpha, prior)
    voted = votes != ABSTAIN
    counts = np.maximum(voted.sum(axis=0), 1)
    for it in range(iters):
        joint = _joint_log(votes, alpha, prior)
        norm = logsumexp(joint, axis=1, keepdims=True)
        model.log_likelihood.append(float(norm.sum()))
        post = np.exp(joint - norm)
        hits = np.stack([post[np.arange(len(votes)), np.where(voted[:, i], votes[:, i], 0)] * voted[:, i]
                         for i in range(n)], axis=1)
        alpha = np.clip(hits.sum(axis=0) / counts, *ALPHA_CLIP)
        if learn_prior:
            prior = np.clip(post.mean(axis=0), 1e-12, None)
            prior = prior / prior.sum()
        if it > 0 and model.log_likelihood[-1] - model.log_likelihood[-2] < tol:
            break
    model.alpha = alpha
    model.prior = prior
    logger.debug("dp_mle_fit: %d EM iterations, log-likelihood %.6f, alpha=%s",
                 len(model.log_likelihood), model.log_likelihood[-1] if model.log_likelihood else 0.0,
                 np.round(alpha, 4).tolist())
    return model


def dp_predict(model: DpModel, A: np.ndarray) -> np.ndarray:
    """Posterior over classes; A is one sample's (n, m) outputs or (n,) votes."""
    A = np.asarray(A)
    votes = votes_from_outputs(A[None]) if A.ndim == 2 else A[None].astype(np.int64)
    return dp_predict_batch(model, votes)[0]


def dp_predict_batch(model: DpModel, votes: np.ndarray) -> np.ndarray:
    votes = _as_votes(votes)
    if votes.shape[1] != model.n:
        raise ValueError(f"model has {model.n} LFs, votes have {votes.shape[1]}")
    joint = _joint_log(votes, model.alpha, model.prior)
    return np.exp(joint - logsumexp(joint, axis=1, keepdims=True))


def read_votes_csv(path: str | os.PathLike) -> np.ndarray:
    """Votes CSV: one row per sample, one integer column per LF, -1 = abstain, header row first."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"votes file {path} is empty")
    return np.asarray([[int(v) for v in row] for row in rows[1:]], dtype=np.int64)
