"""
synthetic.py — deterministic labeled-image worlds for desk-scale runs.

Shapes world: up to five glyph classes drawn on small grids with jitter and
noise. Attribute world: block-pattern images whose lit blocks spell a per-class
binary signature, with a zero-shot split and a fixed condition embedding per
class. Everything regenerates bit-identically from (name, seed, parameters).

Images live in [-1, 1]. Foreground pixels stay > 0 and background < 0 after
noise, so LFs can binarise at 0.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

LOOP, BAR, CROSS, CORNER, DOTS = range(5)
GLYPH_NAMES = ("loop", "bar", "cross", "corner", "dots")
ROTATIONS = (0, 90, 180, 270)
CONDITION_DIM = 8

# Noise magnitude cap: keeps every pixel on its side of the 0 threshold.
_NOISE_CAP = 0.35

_STYLES = {
    # background, foreground, stroke thickness, smallest side every glyph fits
    "A": (-1.0, 1.0, 1, 5),
    "B": (-0.6, 0.9, 2, 6),
}


@dataclass
class LabeledSample:
    image: np.ndarray
    label: int
    attributes: np.ndarray | None = None
    condition: int | None = None


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    m: int
    H: int
    W: int
    count: int
    seed: int
    style: str = "A"
    noise: float = 0.1
    attributes: int = 0
    seen_fraction: float = 1.0
    train_fraction: float = 0.8

    def as_dict(self) -> dict[str, str]:
        return {k: str(v) for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, values: dict[str, str]) -> "DatasetManifest":
        return cls(
            name=values["name"],
            m=int(values["m"]),
            H=int(values["H"]),
            W=int(values["W"]),
            count=int(values["count"]),
            seed=int(values["seed"]),
            style=values.get("style", "A"),
            noise=float(values.get("noise", "0.1")),
            attributes=int(values.get("attributes", "0")),
            seen_fraction=float(values.get("seen_fraction", "1.0")),
            train_fraction=float(values.get("train_fraction", "0.8")),
        )


@dataclass
class Dataset:
    manifest: DatasetManifest
    images: np.ndarray                      # (N, H, W)
    labels: np.ndarray                      # (N,) int
    train_idx: np.ndarray
    test_idx: np.ndarray
    attributes: np.ndarray | None = None    # (N, p)
    signatures: np.ndarray | None = None    # S_gt, (K, p)
    condition_table: np.ndarray | None = None  # (K, CONDITION_DIM)
    zero_shot_classes: tuple[int, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def m(self) -> int:
        return self.manifest.m

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.manifest.H, self.manifest.W

    @property
    def seen_classes(self) -> tuple[int, ...]:
        return tuple(c for c in range(self.m) if c not in self.zero_shot_classes)

    def sample(self, i: int) -> LabeledSample:
        return LabeledSample(
            image=self.images[i],
            label=int(self.labels[i]),
            attributes=None if self.attributes is None else self.attributes[i],
            condition=int(self.labels[i]) if self.condition_table is not None else None,
        )

    def split(self, which: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.train_idx if which == "train" else self.test_idx
        return self.images[idx], self.labels[idx]


# ---------------------------------------------------------------------------
# Shapes world
# ---------------------------------------------------------------------------

def _stamp(canvas: np.ndarray, r: int, c: int, h: int, w: int) -> None:
    canvas[r:r + h, c:c + w] = True


def _draw_glyph(cls: int, H: int, W: int, thick: int, rng: np.random.Generator) -> np.ndarray:
    mask = np.zeros((H, W), dtype=bool)
    side_max = min(H, W)
    if cls == LOOP:
        lo = 4 if thick == 1 else 6
        s = int(rng.integers(lo, side_max + 1))
        r, c = (int(rng.integers(0, H - s + 1)), int(rng.integers(0, W - s + 1)))
        _stamp(mask, r, c, s, s)
        mask[r + thick:r + s - thick, c + thick:c + s - thick] = False
    elif cls == BAR:
        length = int(rng.integers(max(5, 3 * thick), side_max + 1))
        if rng.random() < 0.5:
            r, c = int(rng.integers(0, H - length + 1)), int(rng.integers(0, W - thick + 1))
            _stamp(mask, r, c, length, thick)
        else:
            r, c = int(rng.integers(0, H - thick + 1)), int(rng.integers(0, W - length + 1))
            _stamp(mask, r, c, thick, length)
    elif cls == CROSS:
        s = int(rng.integers(5, side_max + 1))
        r, c = int(rng.integers(0, H - s + 1)), int(rng.integers(0, W - s + 1))
        mid = (s - thick) // 2
        _stamp(mask, r + mid, c, thick, s)
        _stamp(mask, r, c + mid, s, thick)
    elif cls == CORNER:
        s = int(rng.integers(4 if thick == 1 else 5, side_max + 1))
        r, c = int(rng.integers(0, H - s + 1)), int(rng.integers(0, W - s + 1))
        _stamp(mask, r, c, s, thick)
        _stamp(mask, r + s - thick, c, thick, s)
    elif cls == DOTS:
        gap = int(rng.integers(2, max(2, side_max - 2 * thick) + 1))
        span = 2 * thick + gap
        if rng.random() < 0.5:
            r, c = int(rng.integers(0, H - thick + 1)), int(rng.integers(0, W - span + 1))
            _stamp(mask, r, c, thick, thick)
            _stamp(mask, r, c + thick + gap, thick, thick)
        else:
            r, c = int(rng.integers(0, H - span + 1)), int(rng.integers(0, W - thick + 1))
            _stamp(mask, r, c, thick, thick)
            _stamp(mask, r + thick + gap, c, thick, thick)
    else:
        raise ValueError(f"Unknown glyph class {cls}")
    return mask


def _render(mask: np.ndarray, style: str, noise: float, rng: np.random.Generator) -> np.ndarray:
    bg, fg, _, _ = _STYLES[style]
    base = np.where(mask, fg, bg)
    jitter = np.clip(rng.normal(0.0, noise, mask.shape), -_NOISE_CAP, _NOISE_CAP) if noise > 0 else 0.0
    return np.clip(base + jitter, -1.0, 1.0)


def gen_shapes(seed: int, count: int, m: int, H: int = 8, W: int = 8, *,
               style: str = "A", noise: float = 0.1, train_fraction: float = 0.8,
               name: str = "shapes") -> Dataset:
    """Balanced glyph dataset; class c of m uses glyph GLYPH_NAMES[c]."""
    if not 1 <= m <= 5:
        raise ValueError(f"shapes world supports 1..5 classes, got {m}")
    if style not in _STYLES:
        raise ValueError(f"Unknown style {style!r}")
    lo = _STYLES[style][3]
    if not (lo <= H <= 12 and lo <= W <= 12):
        raise ValueError(f"shapes style {style} needs {lo} <= H, W <= 12, got {H}x{W}")
    rng = np.random.default_rng(seed)
    labels = np.arange(count) % m
    rng.shuffle(labels)
    thick = _STYLES[style][2]
    images = np.empty((count, H, W))
    for i, cls in enumerate(labels):
        images[i] = _render(_draw_glyph(int(cls), H, W, thick, rng), style, noise, rng)
    train_idx, test_idx = _split(count, train_fraction, rng)
    manifest = DatasetManifest(name=name, m=m, H=H, W=W, count=count, seed=seed,
                               style=style, noise=noise, train_fraction=train_fraction)
    logger.debug("gen_shapes: %d samples, m=%d, %dx%d, style=%s", count, m, H, W, style)
    return Dataset(manifest, images, labels.astype(np.int64), train_idx, test_idx)


def _split(count: int, train_fraction: float, rng: np.random.Generator):
    order = rng.permutation(count)
    cut = int(round(count * train_fraction))
    return np.sort(order[:cut]), np.sort(order[cut:])


# ---------------------------------------------------------------------------
# Rotation
# ---------------------------------------------------------------------------

def rotate(image: np.ndarray, r: int) -> np.ndarray:
    """Clockwise lattice rotation by r degrees; pixel (0, 0) lands on (0, W-1) at 90°.

    Accepts a single (H, W) image or a batch (B, H, W).
    """
    image = np.asarray(image)
    if r not in ROTATIONS:
        raise ValueError(f"rotation must be one of {ROTATIONS}, got {r}")
    if image.shape[-1] != image.shape[-2]:
        raise ValueError(f"rotation needs square images, got {image.shape[-2:]}")
    return np.rot90(image, k=-(r // 90), axes=(-2, -1)).copy()


def rotate_each(images: np.ndarray, rotations: np.ndarray) -> np.ndarray:
    """Rotate images[i] by rotations[i] degrees."""
    out = np.empty_like(images)
    for i, r in enumerate(rotations):
        out[i] = rotate(images[i], int(r))
    return out


# ---------------------------------------------------------------------------
# Attribute world
# ---------------------------------------------------------------------------

def block_grid(p: int, H: int, W: int) -> tuple[int, int]:
    """(rows, cols) of the attribute block grid: rows is the largest divisor of p <= sqrt(p)."""
    rows = max(d for d in range(1, int(np.sqrt(p)) + 1) if p % d == 0)
    cols = p // rows
    if H % rows or W % cols:
        raise ValueError(f"{H}x{W} image cannot hold a {rows}x{cols} attribute grid")
    return rows, cols


def attribute_pooling(p: int, H: int, W: int) -> np.ndarray:
    """(H*W, p) matrix whose column j averages attribute block j."""
    rows, cols = block_grid(p, H, W)
    bh, bw = H // rows, W // cols
    pool = np.zeros((H * W, p))
    for j in range(p):
        br, bc = divmod(j, cols)
        block = np.zeros((H, W))
        block[br * bh:(br + 1) * bh, bc * bw:(bc + 1) * bw] = 1.0 / (bh * bw)
        pool[:, j] = block.reshape(-1)
    return pool


def _signatures(seed: int, K: int, p: int) -> tuple[np.ndarray, int]:
    """Distinct constant-weight binary signatures with pairwise Hamming >= 2."""
    weight = p // 2
    attempt = seed
    for _ in range(1000):
        rng = np.random.default_rng(attempt)
        sigs = np.zeros((K, p))
        for k in range(K):
            sigs[k, rng.choice(p, size=weight, replace=False)] = 1.0
        dist = np.abs(sigs[:, None, :] - sigs[None, :, :]).sum(axis=2)
        np.fill_diagonal(dist, p)
        if dist.min() >= 2:
            return sigs, attempt
        logger.debug("attribute world: duplicate signatures at seed %d, retrying", attempt)
        attempt += 1
    raise RuntimeError(f"could not draw {K} distinct signatures over {p} attributes")


def condition_table(seed: int, K: int, dim: int = CONDITION_DIM) -> np.ndarray:
    """One fixed random unit vector per class description."""
    rng = np.random.default_rng([seed, 0xC0D])
    table = rng.normal(size=(K, dim))
    return table / np.linalg.norm(table, axis=1, keepdims=True)


def render_attributes(signatures: np.ndarray, H: int, W: int, noise: float,
                      rng: np.random.Generator) -> np.ndarray:
    """Images whose block j is lit (+1) when attribute j is on, dark (-1) otherwise."""
    n, p = signatures.shape
    rows, cols = block_grid(p, H, W)
    bh, bw = H // rows, W // cols
    grid = signatures.reshape(n, rows, cols) * 2.0 - 1.0
    images = np.repeat(np.repeat(grid, bh, axis=1), bw, axis=2)
    if noise > 0:
        images = images + np.clip(rng.normal(0.0, noise, images.shape), -_NOISE_CAP, _NOISE_CAP)
    return np.clip(images, -1.0, 1.0)


def gen_attribute_world(seed: int, K: int = 5, p: int = 8, seen_fraction: float = 0.6, *,
                        count: int = 600, H: int = 8, W: int = 8, noise: float = 0.0,
                        train_fraction: float = 0.8, name: str = "attributes") -> Dataset:
    """Seen classes get images; zero-shot classes (the last ones) only get a signature and condition."""
    if K < 3:
        raise ValueError(f"attribute world needs K >= 3, got {K}")
    signatures, used_seed = _signatures(seed, K, p)
    n_seen = max(1, int(round(K * seen_fraction)))
    zero_shot = tuple(range(n_seen, K))
    rng = np.random.default_rng([used_seed, 1])
    labels = np.arange(count) % n_seen
    rng.shuffle(labels)
    images = render_attributes(signatures[labels], H, W, noise, rng)
    train_idx, test_idx = _split(count, train_fraction, rng)
    manifest = DatasetManifest(name=name, m=K, H=H, W=W, count=count, seed=seed, noise=noise,
                               attributes=p, seen_fraction=seen_fraction,
                               train_fraction=train_fraction)
    return Dataset(
        manifest=manifest,
        images=images,
        labels=labels.astype(np.int64),
        train_idx=train_idx,
        test_idx=test_idx,
        attributes=signatures[labels].copy(),
        signatures=signatures,
        condition_table=condition_table(seed, K),
        zero_shot_classes=zero_shot,
    )


def regenerate(manifest: DatasetManifest) -> Dataset:
    """Rebuild a dataset from its manifest alone."""
    if manifest.attributes:
        return gen_attribute_world(
            manifest.seed, manifest.m, manifest.attributes, manifest.seen_fraction,
            count=manifest.count, H=manifest.H, W=manifest.W, noise=manifest.noise,
            train_fraction=manifest.train_fraction, name=manifest.name,
        )
    return gen_shapes(
        manifest.seed, manifest.count, manifest.m, manifest.H, manifest.W,
        style=manifest.style, noise=manifest.noise,
        train_fraction=manifest.train_fraction, name=manifest.name,
    )
