"""CSV/JSON persistence for datasets, annotator pools and network checkpoints.

Floats are written with ``repr`` so round-trips are exact. CSV files may
start with ``# config_hash: ...`` comment lines, which readers skip.
"""

from __future__ import annotations

import csv
import json

import numpy as np

from .crowdsim import AnnotatorPool, CleanDataset, CrowdDataset, DataError


def _header(fh, config_hash):
    if config_hash:
        fh.write(f"# config_hash: {config_hash}\n")


def _rows(path, expected_prefix):
    with open(path, encoding="utf-8", newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(lines)
    try:
        header = next(reader)
    except StopIteration:
        raise DataError(f"{path}: empty file") from None
    if header[: len(expected_prefix)] != list(expected_prefix):
        raise DataError(f"{path}: header must start with {','.join(expected_prefix)}")
    return header, list(reader)


def save_instances_csv(clean, path, config_hash=None):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        _header(fh, config_hash)
        cols = ["instance_id", "split", "label"] + [f"x{k}" for k in range(clean.dim)]
        fh.write(",".join(cols) + "\n")
        for i in range(clean.n):
            feats = ",".join(repr(float(v)) for v in clean.features[i])
            fh.write(f"{i},{clean.split[i]},{int(clean.labels[i])},{feats}\n")


def load_instances_csv(path, num_classes):
    header, rows = _rows(path, ("instance_id", "split", "label"))
    dim = len(header) - 3
    feats = np.empty((len(rows), dim))
    labels = np.empty(len(rows), dtype=np.int64)
    split = []
    for r, row in enumerate(rows):
        line = r + 2
        try:
            if len(row) != len(header):
                raise ValueError(f"expected {len(header)} fields, got {len(row)}")
            if int(row[0]) != r:
                raise ValueError("instance ids must be 0..n-1 in order")
            if row[1] not in ("train", "val", "test"):
                raise ValueError(f"unknown split {row[1]!r}")
            split.append(row[1])
            labels[r] = int(row[2])
            feats[r] = [float(v) for v in row[3:]]
        except ValueError as exc:
            raise DataError(f"{path}: bad row {line}: {exc}") from None
    return CleanDataset(feats, labels, np.array(split), num_classes)


def save_annotations_csv(crowd, path, config_hash=None):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        _header(fh, config_hash)
        fh.write("instance_id,annotator_id,label\n")
        for i, j, y in zip(crowd.instance_ids.tolist(), crowd.annotator_ids.tolist(), crowd.noisy_labels.tolist()):
            fh.write(f"{i},{j},{y}\n")


def load_annotations_csv(path, clean, num_annotators):
    _, rows = _rows(path, ("instance_id", "annotator_id", "label"))
    out = np.empty((len(rows), 3), dtype=np.int64)
    for r, row in enumerate(rows):
        try:
            if len(row) != 3:
                raise ValueError(f"expected 3 fields, got {len(row)}")
            i, j, y = (int(v) for v in row)
            if not 0 <= i < clean.n:
                raise ValueError(f"unknown instance {i}")
            if not 0 <= j < num_annotators:
                raise ValueError(f"unknown annotator {j}")
            if not 0 <= y < clean.num_classes:
                raise ValueError(f"label {y} out of range")
            out[r] = (i, j, y)
        except ValueError as exc:
            raise DataError(f"{path}: bad row {r + 2}: {exc}") from None
    order = np.lexsort((out[:, 1], out[:, 0]))
    out = out[order]
    return CrowdDataset(clean, num_annotators, out[:, 0], out[:, 1], out[:, 2])


def save_pool_json(pool, path, config_hash=None):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({
            "config_hash": config_hash,
            "num_annotators": pool.num_annotators,
            "num_groups": pool.num_groups,
            "rho": pool.rho,
            "rho_max": pool.rho_max,
            "flip_rates": pool.flip_rates.tolist(),
            "projections": pool.projections.tolist(),
        }, fh)


def load_pool_json(path):
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    return AnnotatorPool(d["num_annotators"], d["num_groups"], d["rho"], d["rho_max"],
                         np.array(d["flip_rates"], dtype=np.float64),
                         np.array(d["projections"], dtype=np.float64))


def save_arrays_json(arrays, path, meta=None):
    """Checkpoint a list of arrays (e.g. ``net.params()``) as nested JSON lists."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"meta": meta or {}, "arrays": [np.asarray(a).tolist() for a in arrays],
                   "shapes": [list(np.shape(a)) for a in arrays]}, fh)


def load_arrays_json(path):
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    arrays = [np.array(a, dtype=np.float64).reshape(s) for a, s in zip(d["arrays"], d["shapes"])]
    return arrays, d["meta"]
