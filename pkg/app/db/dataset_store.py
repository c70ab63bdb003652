"""
dataset_store.py — save and load synthetic datasets.

A dataset directory holds:
  manifest.txt   key=value manifest (generation parameters + tensor checksum)
  tensors.bin    images, split indices, signatures, condition table
  labels.csv     index,label,split,condition,attributes
"""
from __future__ import annotations

import csv
import io
import logging
import os
from pathlib import Path

import numpy as np

from app.db.container import atomic_write, file_checksum, read_manifest, read_tensors, write_manifest, write_tensors
from app.services.synthetic import Dataset, DatasetManifest

logger = logging.getLogger(__name__)

MANIFEST = "manifest.txt"
TENSORS = "tensors.bin"
LABELS = "labels.csv"


class DatasetIntegrityError(ValueError):
    """Stored tensors do not match the checksum recorded in the manifest."""


def _labels_csv(ds: Dataset) -> bytes:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["index", "label", "split", "condition", "attributes"])
    train = set(ds.train_idx.tolist())
    for i in range(len(ds)):
        attrs = "" if ds.attributes is None else "".join(str(int(a)) for a in ds.attributes[i])
        cond = "" if ds.condition_table is None else str(int(ds.labels[i]))
        writer.writerow([i, int(ds.labels[i]), "train" if i in train else "test", cond, attrs])
    return out.getvalue().encode("utf-8")


def save_dataset(ds: Dataset, directory: str | os.PathLike) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    tensors = {
        "images": ds.images,
        "train_idx": ds.train_idx.astype(np.float64),
        "test_idx": ds.test_idx.astype(np.float64),
    }
    if ds.signatures is not None:
        tensors["signatures"] = ds.signatures
        tensors["condition_table"] = ds.condition_table
    checksum = write_tensors(d / TENSORS, tensors)
    atomic_write(d / LABELS, _labels_csv(ds))
    values = dict(ds.manifest.as_dict())
    values["tensor_sha256"] = checksum
    values["zero_shot_classes"] = ",".join(str(c) for c in ds.zero_shot_classes)
    write_manifest(d / MANIFEST, values)
    logger.info("Saved dataset %s (%d samples) to %s", ds.manifest.name, len(ds), d)
    return d


def load_dataset(directory: str | os.PathLike) -> Dataset:
    d = Path(directory)
    values = read_manifest(d / MANIFEST)
    expected = values.get("tensor_sha256", "")
    actual = file_checksum(d / TENSORS)
    if expected and expected != actual:
        raise DatasetIntegrityError(f"{d / TENSORS}: checksum {actual[:12]} != manifest {expected[:12]}")
    tensors = read_tensors(d / TENSORS)

    labels: list[int] = []
    attributes: list[list[float]] = []
    with open(d / LABELS, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            labels.append(int(row["label"]))
            if row["attributes"]:
                attributes.append([float(ch) for ch in row["attributes"]])

    zs = values.get("zero_shot_classes", "")
    return Dataset(
        manifest=DatasetManifest.from_dict(values),
        images=tensors["images"],
        labels=np.asarray(labels, dtype=np.int64),
        train_idx=tensors["train_idx"].astype(np.int64),
        test_idx=tensors["test_idx"].astype(np.int64),
        attributes=np.asarray(attributes) if attributes else None,
        signatures=tensors.get("signatures"),
        condition_table=tensors.get("condition_table"),
        zero_shot_classes=tuple(int(c) for c in zs.split(",") if c),
    )
