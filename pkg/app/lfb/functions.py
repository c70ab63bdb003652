"""
functions.py — labeling functions (LFs) and the built-in LF families.

An LF maps an image to a point on the m-class simplex and must be pure. The
batch hook `fn` takes (B, H, W) images and returns (B, m). Families:

  heuristic     geometric rules over the binarised glyph (enclosure, components,
                aspect, centre stroke, symmetry, mass quadrant, fill)
  noisy_oracle  the glyph decision list with planted accuracy and optional
                pairwise-correlated errors (hash-seeded, so still pure)
  attribute     per-block attribute detectors for the attribute world
  feature       nearest-centroid feature LF (see feature.py)

A registry file (key=value, parsed with python-dotenv) selects LFs by name:

    lf.01=enclosure
    lf.02=noisy_oracle accuracy=0.8 group=g1 correlation=0.5
"""
from __future__ import annotations

import functools
import hashlib
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from dotenv import dotenv_values
from scipy import ndimage
from scipy.special import expit

from app.core.tensor import Tape, Tensor, constant
from app.lfb.block import SIMPLEX_TOL
from app.services.synthetic import BAR, CORNER, CROSS, DOTS, LOOP, attribute_pooling

logger = logging.getLogger(__name__)

# Soft attribute detector sharpness: sigmoid(kappa * block mean).
SOFT_KAPPA = 4.0

_ASPECT_BAR = 2.5
_FILL_BAR = 0.9
_OFFSET_CORNER = 0.1


@dataclass(frozen=True)
class LabelingFunction:
    id: str
    arity: tuple[int, int]
    m: int
    fn: Callable[[np.ndarray], np.ndarray]
    family: str = "heuristic"

    def evaluate_batch(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 3 or images.shape[1:] != self.arity:
            raise ValueError(f"LF {self.id} accepts {self.arity} images, got batch shape {images.shape}")
        out = np.asarray(self.fn(images), dtype=np.float64)
        if out.shape != (images.shape[0], self.m):
            raise ValueError(f"LF {self.id} returned shape {out.shape}, expected ({images.shape[0]}, {self.m})")
        return out

    def evaluate(self, image: np.ndarray) -> np.ndarray:
        return self.evaluate_batch(np.asarray(image)[None])[0]


def _check_arity(lfs: list[LabelingFunction], shape: tuple[int, ...]) -> int:
    if not lfs:
        raise ValueError("apply_lfs needs at least one labeling function")
    ms = {lf.m for lf in lfs}
    if len(ms) != 1:
        raise ValueError(f"labeling functions disagree on the class count: {sorted(ms)}")
    for lf in lfs:
        if tuple(shape) != lf.arity:
            raise ValueError(f"LF {lf.id} accepts {lf.arity} images, got {tuple(shape)}")
    return ms.pop()


def _to_simplex(lf_id: str, out: np.ndarray) -> np.ndarray:
    if np.any(out < -SIMPLEX_TOL) or not np.all(np.isfinite(out)):
        raise ValueError(f"LF {lf_id} returned negative or non-finite entries")
    out = np.clip(out, 0.0, None)
    sums = out.sum(axis=1)
    if np.any(sums <= 0):
        raise ValueError(f"LF {lf_id} returned an all-zero vector")
    off = np.abs(sums - 1.0) > SIMPLEX_TOL
    if np.any(off):
        logger.warning("LF %s: renormalised %d non-simplex outputs", lf_id, int(off.sum()))
    return out / sums[:, None]


def apply_lfs_batch(lfs: list[LabelingFunction], images: np.ndarray) -> np.ndarray:
    """LF outputs for a batch: (B, H, W) -> A of shape (B, n, m)."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 3:
        raise ValueError(f"apply_lfs_batch expects (B, H, W) images, got {images.shape}")
    _check_arity(lfs, images.shape[1:])
    return np.stack([_to_simplex(lf.id, lf.evaluate_batch(images)) for lf in lfs], axis=1)


def apply_lfs(lfs: list[LabelingFunction], image: np.ndarray) -> np.ndarray:
    """Row i of the result is lfs[i] on image, on the simplex: (n, m)."""
    image = np.asarray(image, dtype=np.float64)
    _check_arity(lfs, image.shape)
    return apply_lfs_batch(lfs, image[None])[0]


def constant_lf(lf_id: str, arity: tuple[int, int], probs) -> LabelingFunction:
    probs = np.asarray(probs, dtype=np.float64)
    return LabelingFunction(lf_id, tuple(arity), probs.size,
                            lambda x: np.tile(probs, (x.shape[0], 1)), family="constant")


# ---------------------------------------------------------------------------
# Glyph statistics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GlyphStats:
    area: int
    holes: bool
    components: int
    aspect: float
    fill: float
    center_on: bool
    symmetric: bool
    offset: float


_EMPTY = GlyphStats(0, False, 0, 1.0, 0.0, False, True, 0.0)


@functools.lru_cache(maxsize=65536)
def _stats_from_bytes(raw: bytes, H: int, W: int) -> GlyphStats:
    mask = np.frombuffer(raw, dtype=np.float64).reshape(H, W) > 0.0
    area = int(mask.sum())
    if area == 0:
        return _EMPTY
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    r0, r1, c0, c1 = rows[0], rows[-1], cols[0], cols[-1]
    crop = mask[r0:r1 + 1, c0:c1 + 1]
    h, w = crop.shape
    holes = bool((ndimage.binary_fill_holes(mask) & ~mask).any())
    _, components = ndimage.label(mask)
    symmetric = (
        np.array_equal(crop, crop[:, ::-1])
        or np.array_equal(crop, crop[::-1, :])
        or (h == w and np.array_equal(crop, crop.T))
    )
    rr, cc = np.nonzero(crop)
    offset = max(abs(rr.mean() - (h - 1) / 2.0) / h, abs(cc.mean() - (w - 1) / 2.0) / w)
    return GlyphStats(
        area=area,
        holes=holes,
        components=int(components),
        aspect=max(h, w) / min(h, w),
        fill=area / float(h * w),
        center_on=bool(crop[(h - 1) // 2, (w - 1) // 2]),
        symmetric=bool(symmetric),
        offset=float(offset),
    )


def glyph_stats(image: np.ndarray) -> GlyphStats:
    image = np.ascontiguousarray(image, dtype=np.float64)
    return _stats_from_bytes(image.tobytes(), *image.shape)


def glyph_rule_label(image: np.ndarray, m: int) -> int:
    """Decision list over the glyph statistics; classes past m-1 fold onto m-1."""
    s = glyph_stats(image)
    if s.holes:
        label = LOOP
    elif s.components >= 2:
        label = DOTS
    elif s.aspect >= _ASPECT_BAR:
        label = BAR
    elif s.center_on:
        label = CROSS
    else:
        label = CORNER
    return min(label, m - 1)


def _vote(cls: int, m: int) -> np.ndarray:
    if cls >= m:
        return np.full(m, 1.0 / m)
    out = np.zeros(m)
    out[cls] = 1.0
    return out


def _others(cls: int, m: int) -> np.ndarray:
    """Uniform over every class except cls (abstain when cls is out of range)."""
    if cls >= m or m == 1:
        return np.full(m, 1.0 / m)
    out = np.full(m, 1.0 / (m - 1))
    out[cls] = 0.0
    return out


def _split(a: int, b: int, m: int) -> np.ndarray:
    live = [c for c in (a, b) if c < m]
    if not live:
        return np.full(m, 1.0 / m)
    out = np.zeros(m)
    out[live] = 1.0 / len(live)
    return out


def _per_image(rule: Callable[[GlyphStats, int], np.ndarray], m: int):
    def fn(images: np.ndarray) -> np.ndarray:
        return np.stack([rule(glyph_stats(img), m) for img in images])
    return fn


def _enclosure(s: GlyphStats, m: int) -> np.ndarray:
    return _vote(LOOP, m) if s.holes else _others(LOOP, m)


def _components(s: GlyphStats, m: int) -> np.ndarray:
    return _vote(DOTS, m) if s.components >= 2 else np.full(m, 1.0 / m)


def _aspect(s: GlyphStats, m: int) -> np.ndarray:
    if s.components == 1 and s.aspect >= _ASPECT_BAR:
        return _vote(BAR, m)
    return np.full(m, 1.0 / m)


def _center(s: GlyphStats, m: int) -> np.ndarray:
    return _split(BAR, CROSS, m) if s.center_on and not s.holes else np.full(m, 1.0 / m)


def _symmetry(s: GlyphStats, m: int) -> np.ndarray:
    return np.full(m, 1.0 / m) if s.symmetric or s.area == 0 else _vote(CORNER, m)


def _quadrant(s: GlyphStats, m: int) -> np.ndarray:
    if s.components == 1 and s.offset >= _OFFSET_CORNER:
        return _vote(CORNER, m)
    return np.full(m, 1.0 / m)


def _fill(s: GlyphStats, m: int) -> np.ndarray:
    return _vote(BAR, m) if s.area and s.fill >= _FILL_BAR else np.full(m, 1.0 / m)


HEURISTICS: dict[str, Callable[[GlyphStats, int], np.ndarray]] = {
    "enclosure": _enclosure,
    "components": _components,
    "aspect": _aspect,
    "center": _center,
    "symmetry": _symmetry,
    "quadrant": _quadrant,
    "fill": _fill,
}


def heuristic_lf(name: str, m: int, arity: tuple[int, int], lf_id: str | None = None) -> LabelingFunction:
    if name not in HEURISTICS:
        raise ValueError(f"Unknown heuristic LF {name!r}; known: {', '.join(HEURISTICS)}")
    return LabelingFunction(lf_id or name, tuple(arity), m, _per_image(HEURISTICS[name], m))


# ---------------------------------------------------------------------------
# Noisy oracles
# ---------------------------------------------------------------------------

def _hash_uniform(raw: bytes, salt: str) -> float:
    digest = hashlib.blake2b(raw + salt.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") / 2.0 ** 64


def noisy_oracle_lf(lf_id: str, m: int, arity: tuple[int, int], accuracy: float,
                    group: str = "", correlation: float = 0.0) -> LabelingFunction:
    """Glyph decision list, flipped to a wrong class with probability 1 - accuracy.

    With probability `correlation` the flip decision uses the group's shared
    draw, so oracles in one group make the same mistakes on the same images.
    """
    if not 0.0 <= accuracy <= 1.0:
        raise ValueError(f"oracle accuracy must be in [0, 1], got {accuracy}")
    if not 0.0 <= correlation <= 1.0:
        raise ValueError(f"oracle correlation must be in [0, 1], got {correlation}")

    def fn(images: np.ndarray) -> np.ndarray:
        out = np.zeros((images.shape[0], m))
        for b, img in enumerate(images):
            raw = np.ascontiguousarray(img).tobytes()
            label = glyph_rule_label(img, m)
            salt = lf_id
            if group and _hash_uniform(raw, f"share:{lf_id}") < correlation:
                salt = f"group:{group}"
            if m > 1 and _hash_uniform(raw, f"flip:{salt}") >= accuracy:
                shift = 1 + int(_hash_uniform(raw, f"wrong:{salt}") * (m - 1))
                label = (label + min(shift, m - 1)) % m
            out[b, label] = 1.0
        return out

    return LabelingFunction(lf_id, tuple(arity), m, fn, family="noisy_oracle")


# ---------------------------------------------------------------------------
# Pools and registry
# ---------------------------------------------------------------------------

# Ordered so that short prefixes already cover every glyph class.
DEFAULT_POOL: tuple[str, ...] = (
    "enclosure",
    "components",
    "noisy_oracle accuracy=0.85",
    "aspect",
    "center",
    "symmetry",
    "noisy_oracle accuracy=0.75 group=g1 correlation=0.5",
    "noisy_oracle accuracy=0.7 group=g1 correlation=0.5",
    "quadrant",
    "fill",
    "noisy_oracle accuracy=0.65",
    "noisy_oracle accuracy=0.6",
)


def _parse_params(tokens: list[str], lf_id: str) -> dict[str, str]:
    params = {}
    for token in tokens:
        if "=" not in token:
            raise ValueError(f"LF {lf_id}: malformed parameter {token!r} (expected key=value)")
        k, v = token.split("=", 1)
        params[k.strip()] = v.strip()
    return params


def build_lf(entry: str, m: int, arity: tuple[int, int], lf_id: str) -> LabelingFunction:
    """One registry entry: `<name> [key=value ...]`."""
    tokens = entry.split()
    if not tokens:
        raise ValueError(f"LF {lf_id}: empty registry entry")
    name, params = tokens[0], _parse_params(tokens[1:], lf_id)
    if name in HEURISTICS:
        return heuristic_lf(name, m, arity, lf_id=lf_id)
    if name == "noisy_oracle":
        return noisy_oracle_lf(
            lf_id, m, arity,
            accuracy=float(params.get("accuracy", "0.8")),
            group=params.get("group", ""),
            correlation=float(params.get("correlation", "0")),
        )
    if name == "constant":
        probs = params.get("probs")
        values = [float(p) for p in probs.split(",")] if probs else [1.0 / m] * m
        return constant_lf(lf_id, arity, values)
    if name == "feature":
        from app.lfb.feature import load_feature_bank, make_feature_lf

        bank = load_feature_bank(params["bank"])
        return make_feature_lf(bank, arity, lf_id=lf_id)
    raise ValueError(f"LF {lf_id}: unknown labeling function {name!r}")


def default_pool(m: int, arity: tuple[int, int], count: int) -> list[LabelingFunction]:
    """First `count` LFs of the built-in shapes pool."""
    if not 1 <= count <= len(DEFAULT_POOL):
        raise ValueError(f"LF count must be within 1..{len(DEFAULT_POOL)}, got {count}")
    return [build_lf(entry, m, arity, f"lf{i + 1:02d}.{entry.split()[0]}")
            for i, entry in enumerate(DEFAULT_POOL[:count])]


def load_lf_registry(path: str | os.PathLike, m: int, arity: tuple[int, int]) -> list[LabelingFunction]:
    """Read `lf.<key>=<entry>` lines, ordered by key."""
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"LF registry not found: {p}")
    values = dotenv_values(p)
    entries = sorted((k, v) for k, v in values.items() if k.startswith("lf.") and v)
    if not entries:
        raise ValueError(f"LF registry {p} lists no labeling functions")
    lfs = [build_lf(v, m, arity, k[len("lf."):]) for k, v in entries]
    logger.info("Loaded %d labeling functions from %s", len(lfs), p)
    return lfs


# ---------------------------------------------------------------------------
# Attribute detectors
# ---------------------------------------------------------------------------

class AttributeDetector:
    """Block-mean attribute detectors s_i for the attribute world.

    hard() gives s in {0, 1}^p for inference; soft_taped() gives
    sigmoid(kappa * block mean) on a tape so the cycle loss can reach the image head.
    """

    def __init__(self, p: int, H: int, W: int, kappa: float = SOFT_KAPPA):
        self.p = p
        self.arity = (H, W)
        self.kappa = kappa
        self.pooling = attribute_pooling(p, H, W)

    def block_means(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        return images.reshape(images.shape[0], -1) @ self.pooling

    def hard(self, images: np.ndarray) -> np.ndarray:
        return (self.block_means(images) > 0.0).astype(np.float64)

    def soft(self, images: np.ndarray) -> np.ndarray:
        return expit(self.kappa * self.block_means(images))

    def soft_taped(self, tape: Tape, images_flat: Tensor) -> Tensor:
        means = tape.matmul(images_flat, constant(self.pooling))
        return tape.sigmoid(tape.scale(means, self.kappa))

    def lfs(self) -> list[LabelingFunction]:
        """One two-class LF per attribute: [1 - s_i, s_i] with hard detection."""
        def make(i: int) -> LabelingFunction:
            def fn(images: np.ndarray) -> np.ndarray:
                s = self.hard(images)[:, i]
                return np.stack([1.0 - s, s], axis=1)
            return LabelingFunction(f"attr{i:02d}", self.arity, 2, fn, family="attribute")
        return [make(i) for i in range(self.p)]
