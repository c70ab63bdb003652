"""
block.py — the Labeling Functions Block (LFB): Θ normalisation, label aggregation,
the counted dependency matrix Φ_real, and the attribute-mode zero-shot rule.

Numpy functions here are the reference semantics. The *_taped variants build the
same quantities on a Tape so the generator's Θ/Φ head receives gradients; the
trainer audits them against the numpy versions.

Shapes: θ is (n,), Φ is (n, n), A is (n, m) with one LF output per row.
Batched forms carry a leading batch axis.
"""
from __future__ import annotations

import logging

import numpy as np

from app.core.tensor import Tape, Tensor, constant

logger = logging.getLogger(__name__)

SIMPLEX_TOL = 1e-9
ZERO_MASS = 1e-12

PHI_REAL = "real"
PHI_GENERATED = "generated"


# ---------------------------------------------------------------------------
# ProbLabel helpers
# ---------------------------------------------------------------------------

def is_prob_label(v: np.ndarray, tol: float = SIMPLEX_TOL) -> bool:
    v = np.asarray(v, dtype=np.float64)
    return bool(
        v.ndim == 1
        and np.all(v >= -tol)
        and np.all(v <= 1.0 + tol)
        and abs(v.sum() - 1.0) <= tol
    )


def one_hot(v: np.ndarray) -> np.ndarray:
    """e_k for k = argmax(v); ties go to the lowest index."""
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros_like(v)
    out[int(np.argmax(v))] = 1.0
    return out


def _check_votes(A: np.ndarray) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2:
        raise ValueError(f"LF output matrix must be (n, m), got shape {A.shape}")
    return A


# ---------------------------------------------------------------------------
# Θ
# ---------------------------------------------------------------------------

def normalize_theta(theta: np.ndarray) -> np.ndarray:
    """θ / Σθ; uniform when the total mass is below 1e-12."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim != 1 or theta.size == 0:
        raise ValueError(f"theta must be a non-empty vector, got shape {theta.shape}")
    if np.any(theta < 0):
        raise ValueError(f"theta entries must be >= 0, got min {theta.min():.3g}")
    total = theta.sum()
    if total < ZERO_MASS:
        return np.full(theta.size, 1.0 / theta.size)
    return theta / total


def _check_normalized(theta: np.ndarray) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    if abs(theta.sum() - 1.0) > SIMPLEX_TOL or np.any(theta < 0):
        raise ValueError("theta must be normalized (nonnegative, sums to 1)")
    return theta


def aggregate_theta(theta: np.ndarray, A: np.ndarray) -> np.ndarray:
    """Θ̃ · A: convex combination of the LF outputs."""
    theta = _check_normalized(theta)
    A = _check_votes(A)
    if theta.shape[0] != A.shape[0]:
        raise ValueError(f"theta has {theta.shape[0]} entries but A has {A.shape[0]} rows")
    return theta @ A


# ---------------------------------------------------------------------------
# Φ_real (counting construction)
# ---------------------------------------------------------------------------

def compute_phi_real(theta: np.ndarray, A: np.ndarray) -> np.ndarray:
    """Identity, +1 on (i, j>i) when OneHot(θ_i a_i) and OneHot(θ_j a_j) agree,
    row-normalise, then complete by symmetry: Φ + Φᵀ − diag(Φ)."""
    theta = np.asarray(theta, dtype=np.float64)
    A = _check_votes(A)
    n = A.shape[0]
    if theta.shape != (n,):
        raise ValueError(f"theta shape {theta.shape} does not match {n} labeling functions")
    phi = np.eye(n)
    hots = [one_hot(theta[i] * A[i]) for i in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            phi[i, j] += float(hots[i] @ hots[j])
    phi = phi / phi.sum(axis=1, keepdims=True)
    return phi + phi.T - np.diag(np.diag(phi))


def compute_phi_real_batch(theta: np.ndarray, A: np.ndarray) -> np.ndarray:
    """Vectorised compute_phi_real over a batch: theta (B, n), A (B, n, m) -> (B, n, n)."""
    theta = np.asarray(theta, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    b, n, _ = A.shape
    votes = np.argmax(theta[:, :, None] * A, axis=2)
    agree = (votes[:, :, None] == votes[:, None, :]).astype(np.float64)
    phi = np.eye(n)[None, :, :] + np.triu(agree, k=1)
    phi = phi / phi.sum(axis=2, keepdims=True)
    diag = np.eye(n)[None, :, :] * phi
    return phi + np.transpose(phi, (0, 2, 1)) - diag


# ---------------------------------------------------------------------------
# Final label
# ---------------------------------------------------------------------------

def aggregate_final_batch(theta: np.ndarray, phi: np.ndarray, A: np.ndarray):
    """Batched Θ̃·Φᵀ·A renormalised by L1 mass.

    Returns (labels (B, m), degenerate (B,) bool). Degenerate rows had zero mass
    and come back uniform.
    """
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    if phi.ndim != 3 or phi.shape[1:] != (theta.shape[1], theta.shape[1]):
        raise ValueError(f"phi shape {phi.shape} does not match theta shape {theta.shape}")
    if A.shape[:2] != theta.shape:
        raise ValueError(f"A shape {A.shape} does not match theta shape {theta.shape}")
    if np.any(phi < 0):
        raise ValueError("phi entries must be >= 0")
    v = np.einsum("bi,bji->bj", theta, phi)
    raw = np.einsum("bj,bjm->bm", v, A)
    mass = np.abs(raw).sum(axis=1)
    degenerate = mass < ZERO_MASS
    m = A.shape[2]
    labels = np.where(degenerate[:, None], 1.0 / m, raw / np.where(degenerate, 1.0, mass)[:, None])
    return labels, degenerate


def aggregate_final(theta: np.ndarray, phi: np.ndarray, A: np.ndarray) -> np.ndarray:
    """Final LFB label Θ̃ · Φᵀ · A, renormalised to the simplex."""
    theta = _check_normalized(theta)
    A = _check_votes(A)
    phi = np.asarray(phi, dtype=np.float64)
    if phi.shape != (A.shape[0], A.shape[0]) or theta.shape[0] != A.shape[0]:
        raise ValueError(
            f"dimension mismatch: theta {theta.shape}, phi {phi.shape}, A {A.shape}"
        )
    labels, degenerate = aggregate_final_batch(theta[None], phi[None], A[None])
    if degenerate[0]:
        logger.warning("aggregate_final: zero label mass, returning uniform label")
    return labels[0]


def aggregate_votes_batch(theta: np.ndarray, votes: np.ndarray, m: int):
    """Final labels from integer votes (B, n) with Φ_real folded in.

    Equals aggregate_final_batch(theta, compute_phi_real_batch(theta, A), A) for
    one-hot A. Φ_real rows are read off per-class running sums along the LF axis,
    so no (B, n, n) matrix is built. theta is (n,) or (B, n).
    """
    votes = np.asarray(votes)
    if votes.ndim != 2:
        raise ValueError(f"votes must be (B, n) class ids, got shape {votes.shape}")
    if votes.size and (votes.min() < 0 or votes.max() >= m):
        raise ValueError(f"votes must lie in 0..{m - 1}")
    theta = np.broadcast_to(np.asarray(theta, dtype=np.float64), votes.shape)
    onehot = votes[:, :, None] == np.arange(m)
    pick = votes[:, :, None]

    def at_vote(x: np.ndarray) -> np.ndarray:
        return np.take_along_axis(x, pick, axis=2)[:, :, 0]

    # LFs at or after j voting with j: the row sum of Φ_real before normalising
    rows = at_vote(np.cumsum(onehot[:, ::-1], axis=1)[:, ::-1])
    ahead = at_vote(np.cumsum((onehot * theta[:, :, None])[:, ::-1], axis=1)[:, ::-1])
    scaled = theta / rows
    behind = at_vote(np.cumsum(onehot * scaled[:, :, None], axis=1)) - scaled
    v = ahead / rows + behind
    raw = (onehot * v[:, :, None]).sum(axis=1)
    mass = np.abs(raw).sum(axis=1)
    degenerate = mass < ZERO_MASS
    labels = np.where(degenerate[:, None], 1.0 / m, raw / np.where(degenerate, 1.0, mass)[:, None])
    return labels, degenerate


# ---------------------------------------------------------------------------
# Attribute mode (zero-shot)
# ---------------------------------------------------------------------------

def attribute_scores(theta: np.ndarray, phi: np.ndarray, s_pred: np.ndarray,
                     S_gt: np.ndarray) -> np.ndarray:
    """((Φ·Θ) ∘ s_pred) · S_gt[y] for every class y."""
    S_gt = np.asarray(S_gt, dtype=np.float64)
    weighted = (np.asarray(phi, dtype=np.float64) @ np.asarray(theta, dtype=np.float64)) \
        * np.asarray(s_pred, dtype=np.float64)
    return S_gt @ weighted


def zero_shot_label(theta: np.ndarray, phi: np.ndarray, s_pred: np.ndarray,
                    S_gt: np.ndarray, direction: str = "argmax") -> int:
    """Class whose ground-truth signature scores best; lowest index on ties."""
    S_gt = np.asarray(S_gt, dtype=np.float64)
    if S_gt.ndim != 2 or S_gt.shape[0] == 0:
        raise ValueError("zero_shot_label needs at least one class signature")
    p = S_gt.shape[1]
    if np.shape(theta) != (p,) or np.shape(phi) != (p, p) or np.shape(s_pred) != (p,):
        raise ValueError(
            f"attribute mode expects theta ({p},), phi ({p},{p}), s_pred ({p},); got "
            f"{np.shape(theta)}, {np.shape(phi)}, {np.shape(s_pred)}"
        )
    scores = attribute_scores(theta, phi, s_pred, S_gt)
    if direction == "argmax":
        return int(np.argmax(scores))
    if direction == "argmin":
        return int(np.argmin(scores))
    raise ValueError(f"direction must be argmax or argmin, got {direction!r}")


def zero_shot_label_batch(theta: np.ndarray, phi: np.ndarray, s_pred: np.ndarray,
                          S_gt: np.ndarray, direction: str = "argmax") -> np.ndarray:
    if direction not in ("argmax", "argmin"):
        raise ValueError(f"direction must be argmax or argmin, got {direction!r}")
    if np.asarray(S_gt).shape[0] == 0:
        raise ValueError("zero_shot_label needs at least one class signature")
    weighted = np.einsum("bij,bj->bi", phi, theta) * s_pred
    scores = weighted @ np.asarray(S_gt, dtype=np.float64).T
    pick = np.argmax if direction == "argmax" else np.argmin
    return pick(scores, axis=1)


# ---------------------------------------------------------------------------
# Taped forms (used inside training)
# ---------------------------------------------------------------------------

def normalize_theta_taped(tape: Tape, theta_raw: Tensor) -> Tensor:
    """Row-wise θ/Σθ of a nonnegative (B, n) tensor; all-zero rows map to uniform."""
    return tape.normalize_rows(theta_raw)


def aggregate_theta_taped(tape: Tape, theta: Tensor, A: np.ndarray) -> Tensor:
    """(B, n) normalised θ against constant votes (B, n, m) -> (B, m)."""
    b, n, _ = A.shape
    weights = tape.reshape(theta, (b, n, 1))
    return tape.sum(tape.mul(weights, constant(A)), axis=1)


def aggregate_final_taped(tape: Tape, theta: Tensor, phi_flat: Tensor, A: np.ndarray) -> Tensor:
    """Θ̃·Φᵀ·A per sample, renormalised; theta (B, n), phi_flat (B, n*n), A (B, n, m)."""
    b, n, _ = A.shape
    phi = tape.reshape(phi_flat, (b, n, n))
    v = tape.sum(tape.mul(phi, tape.reshape(theta, (b, 1, n))), axis=2)
    raw = tape.sum(tape.mul(tape.reshape(v, (b, n, 1)), constant(A)), axis=1)
    return tape.normalize_rows(raw)


def attribute_output_taped(tape: Tape, theta: Tensor, phi_flat: Tensor, s_soft: Tensor) -> Tensor:
    """(Φ·Θ) ∘ s per sample; theta (B, p), phi_flat (B, p*p), s_soft (B, p) -> (B, p)."""
    b, p = theta.shape
    phi = tape.reshape(phi_flat, (b, p, p))
    weights = tape.sum(tape.mul(phi, tape.reshape(theta, (b, 1, p))), axis=2)
    return tape.mul(weights, s_soft)


def attribute_label_taped(tape: Tape, attr_out: Tensor, S_gt: np.ndarray) -> Tensor:
    """Class scores against every signature, renormalised into a soft label (B, K)."""
    scores = tape.matmul(attr_out, constant(np.asarray(S_gt, dtype=np.float64).T))
    return tape.normalize_rows(scores)
