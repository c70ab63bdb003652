"""
artifacts.py — CSV reports, PGM sample grids and plain-text summaries.

Every CSV row starts with schema_version and config_hash so a report can be
traced back to the exact run config. Floats are written with repr() so reruns
with the same config and seed produce byte-identical files.
"""
from __future__ import annotations

import csv
import io
import logging
import os
from pathlib import Path

import numpy as np
from PIL import Image

from app.db.container import atomic_write
from app.lfb.functions import LabelingFunction
from app.services.adp import AdpModel, sample_labeled

logger = logging.getLogger(__name__)

SCHEMA_VERSION = "1"
_TILE_SCALE = 4


def _cell(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (np.integer,)):
        return str(int(value))
    return str(value)


def write_csv(path: str | os.PathLike, rows: list[dict], config_hash: str,
              columns: list[str] | None = None) -> Path:
    if columns is None:
        columns = []
        for row in rows:
            columns.extend(k for k in row if k not in columns)
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["schema_version", "config_hash", *columns])
    for row in rows:
        writer.writerow([SCHEMA_VERSION, config_hash, *(_cell(row.get(c, "")) for c in columns)])
    p = Path(path)
    atomic_write(p, out.getvalue().encode("utf-8"))
    logger.info("Wrote %d rows to %s", len(rows), p)
    return p


def write_metric_log(path: str | os.PathLike, log: list[dict], config_hash: str) -> Path:
    base = ["iteration", "L_D", "L_G", "L_DLFB", "L_G_phi", "theta_entropy"]
    extra = sorted({k for row in log for k in row} - set(base))
    rows = [{**row, "iteration": int(row["iteration"])} for row in log]
    return write_csv(path, rows, config_hash, base + extra)


def _to_gray(image: np.ndarray) -> np.ndarray:
    return np.round((np.clip(image, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)


def write_pgm_grid(path: str | os.PathLike, rows: list[list[np.ndarray]], H: int, W: int,
                   scale: int = _TILE_SCALE) -> Path:
    """Tile images row by row (1-pixel gutter) and save as binary PGM."""
    n_cols = max((len(r) for r in rows), default=0)
    if not rows or n_cols == 0:
        raise ValueError("sample grid needs at least one image")
    canvas = np.zeros((len(rows) * (H + 1) + 1, n_cols * (W + 1) + 1), dtype=np.uint8)
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            r0, c0 = 1 + i * (H + 1), 1 + j * (W + 1)
            canvas[r0:r0 + H, c0:c0 + W] = _to_gray(img)
    if scale > 1:
        canvas = np.kron(canvas, np.ones((scale, scale), dtype=np.uint8))
    buf = io.BytesIO()
    Image.fromarray(canvas, mode="L").save(buf, format="PPM")
    p = Path(path)
    atomic_write(p, buf.getvalue())
    return p


def sample_grid(model: AdpModel, lfs: list[LabelingFunction], path: str | os.PathLike,
                per_class: int = 8, seed: int = 0, label_rule: str = "final",
                pool: int = 512) -> Path:
    """One row per LFB-assigned class, up to per_class generated samples each."""
    images, _, hard = sample_labeled(model, lfs, pool, seed, label_rule)
    rows = [list(images[hard == c][:per_class]) for c in range(model.m)]
    rows = [r if r else [np.full(model.image_shape, -1.0)] for r in rows]
    return write_pgm_grid(path, rows, *model.image_shape)


def render_summary(title: str, values: dict) -> str:
    width = max((len(k) for k in values), default=0)
    lines = [title, "=" * len(title)]
    for k, v in values.items():
        text = f"{v:.6g}" if isinstance(v, (float, np.floating)) else str(v)
        lines.append(f"{k.ljust(width)}  {text}")
    return "\n".join(lines) + "\n"


def write_summary(path: str | os.PathLike, title: str, values: dict) -> Path:
    p = Path(path)
    atomic_write(p, render_summary(title, values).encode("utf-8"))
    return p
