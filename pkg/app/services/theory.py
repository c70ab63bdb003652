"""
theory.py — the discriminator game on enumerable joint distributions.

For tables p_real(X, y) and p_fake(X, y) the optimal discriminator is
p_real / (p_real + p_fake) (0/0 cells -> 0.5), and the game value at that
discriminator equals -log 4 + 2 JSD(p_real || p_fake). These helpers compute
both sides independently so they can be checked against each other.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logit

from app.core.tensor import LOG_FLOOR

logger = logging.getLogger(__name__)

LOG4 = float(np.log(4.0))


@dataclass(frozen=True)
class TabularJoint:
    table: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.table, dtype=np.float64)
        if np.any(t < 0):
            raise ValueError("joint table entries must be >= 0")
        if abs(t.sum() - 1.0) > 1e-12:
            raise ValueError(f"joint table must sum to 1, got {t.sum():.15f}")
        object.__setattr__(self, "table", t)

    @classmethod
    def random(cls, rng: np.random.Generator, shape: tuple[int, ...]) -> "TabularJoint":
        t = rng.dirichlet(np.ones(int(np.prod(shape)))).reshape(shape)
        return cls(t / t.sum())


def _table(p) -> np.ndarray:
    return p.table if isinstance(p, TabularJoint) else np.asarray(p, dtype=np.float64)


def optimal_d(p_real, p_fake) -> np.ndarray:
    r, f = _table(p_real), _table(p_fake)
    total = r + f
    return np.where(total > 0, r / np.where(total > 0, total, 1.0), 0.5)


def game_value(p_real, p_fake, d: np.ndarray) -> float:
    """Σ p_real log d + Σ p_fake log(1 - d), natural log, log-guarded."""
    r, f = _table(p_real), _table(p_fake)
    d = np.asarray(d, dtype=np.float64)
    if np.any(d < 0) or np.any(d > 1):
        raise ValueError("discriminator table must lie in [0, 1]")
    return float((r * np.log(np.maximum(d, LOG_FLOOR))).sum()
                 + (f * np.log(np.maximum(1.0 - d, LOG_FLOOR))).sum())


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    live = p > 0
    return float((p[live] * np.log(p[live] / q[live])).sum())


def jensen_shannon(p, q) -> float:
    p, q = _table(p).ravel(), _table(q).ravel()
    mid = 0.5 * (p + q)
    return 0.5 * _kl(p, mid) + 0.5 * _kl(q, mid)


@dataclass
class AscentResult:
    d: np.ndarray
    values: list[float] = field(default_factory=list)
    steps: int = 0


def train_tabular_d(p_real, p_fake, steps: int = 10000, init: np.ndarray | None = None,
                    tol: float = 1e-13) -> AscentResult:
    """Gradient ascent on d = sigmoid(a), per-cell step 4 / (p_real + p_fake).

    That step is the inverse of the per-cell curvature bound, so the game value
    never decreases. Cells where both tables are 0 keep their initial value.
    """
    r, f = _table(p_real), _table(p_fake)
    a = np.zeros_like(r) if init is None else logit(np.clip(np.asarray(init, dtype=np.float64), 1e-12, 1 - 1e-12))
    total = r + f
    step = np.where(total > 0, 4.0 / np.where(total > 0, total, 1.0), 0.0)
    result = AscentResult(expit(a))
    result.values.append(game_value(r, f, result.d))
    for i in range(steps):
        grad = r - total * expit(a)
        if np.max(np.abs(grad)) < tol:
            break
        a = a + step * grad
        result.d = expit(a)
        result.values.append(game_value(r, f, result.d))
        result.steps = i + 1
    return result


@dataclass
class GridSearchResult:
    best_fake: np.ndarray
    best_value: float
    evaluated: int


def equilibrium_grid_search(p_real, resolution: int = 20) -> GridSearchResult:
    """Minimise the value at the optimal discriminator over p_fake on a 3-cell simplex grid."""
    r = _table(p_real).ravel()
    if r.size != 3:
        raise ValueError(f"grid search runs over 3-cell tables, got {r.size} cells")
    best, best_value, count = None, np.inf, 0
    for i, j in itertools.product(range(resolution + 1), repeat=2):
        if i + j > resolution:
            continue
        f = np.array([i, j, resolution - i - j], dtype=np.float64) / resolution
        value = game_value(r, f, optimal_d(r, f))
        count += 1
        if value < best_value - 1e-15:
            best, best_value = f, value
    return GridSearchResult(best, float(best_value), count)


@dataclass
class TheoryReport:
    trials: int
    cells: int
    max_identity_error: float
    equal_case_error: float
    max_ascent_deviation: float
    ascent_monotone: bool

    def as_rows(self) -> list[dict[str, object]]:
        return [{"check": k, "value": v} for k, v in self.__dict__.items()]


def theory_check(cells: int = 8, trials: int = 100, seed: int = 0, ascent_trials: int = 5,
                 ascent_steps: int = 10000) -> TheoryReport:
    """Random-table sweep of the optimal-D identity, the equal-distribution value and ascent convergence."""
    if cells < 2 or cells % 2:
        raise ValueError(f"cells must be an even number >= 2 (X-by-2 tables), got {cells}")
    rng = np.random.default_rng(seed)
    shape = (cells // 2, 2)
    identity_err = 0.0
    equal_err = 0.0
    for _ in range(trials):
        p = TabularJoint.random(rng, shape)
        q = TabularJoint.random(rng, shape)
        value = game_value(p, q, optimal_d(p, q))
        identity_err = max(identity_err, abs(value - (-LOG4 + 2.0 * jensen_shannon(p, q))))
        equal_err = max(equal_err, abs(game_value(p, p, optimal_d(p, p)) + LOG4))
    deviation, monotone = 0.0, True
    for _ in range(ascent_trials):
        p = TabularJoint.random(rng, shape)
        q = TabularJoint.random(rng, shape)
        res = train_tabular_d(p, q, steps=ascent_steps)
        deviation = max(deviation, float(np.max(np.abs(res.d - optimal_d(p, q)))))
        monotone = monotone and bool(np.all(np.diff(res.values) >= -1e-12))
    report = TheoryReport(trials, cells, identity_err, equal_err, deviation, monotone)
    logger.info("theory check: identity err=%.3g equal err=%.3g ascent dev=%.3g monotone=%s",
                identity_err, equal_err, deviation, monotone)
    return report
