# SPDX-FileCopyrightText: 2022 Barndollar Music, Ltd.
#
# SPDX-License-Identifier: Apache-2.0

import pathlib
from typing import Any

import numpy as np

from .data import BlobSpec, Dataset, Provenance
from .errors import NormLabError
from .metrics import min_pairwise_angle
from .read import load_csv, load_idx
from .tensor import Rng, Tensor

# Redraws allowed while looking for well-separated class directions.
_MAX_DIRECTION_DRAWS = 1000


def _draw_directions(rng: Rng, spec: BlobSpec) -> np.ndarray:
    for _ in range(_MAX_DIRECTION_DRAWS):
        directions = rng.normal((spec.num_classes, spec.dim))
        norms = np.linalg.norm(directions, axis=1, keepdims=True)
        if np.any(norms == 0):
            continue
        directions = directions / norms
        if min_pairwise_angle(directions) >= spec.min_center_angle_deg:
            return directions
    raise NormLabError(
        f"could not place {spec.num_classes} class directions in {spec.dim}-D at least "
        f"{spec.min_center_angle_deg} degrees apart")


def _draw_split(rng: Rng, spec: BlobSpec, directions: np.ndarray, per_class: int):
    xs, ys = [], []
    for cls in range(spec.num_classes):
        v = spec.center_scale * directions[cls] + rng.normal((per_class, spec.dim))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        r = rng.uniform((per_class,), spec.min_norm, spec.min_norm * spec.norm_spread)
        xs.append(v * r[:, None])
        ys.append(np.full(per_class, cls, dtype=np.int64))
    return np.concatenate(xs), np.concatenate(ys)


def make_blobs(spec: BlobSpec) -> Dataset:
    """Gaussian direction clusters whose sample norms vary by up to norm_spread."""
    rng = Rng(spec.seed)
    directions = _draw_directions(rng, spec)
    x_train, y_train = _draw_split(rng, spec, directions, spec.samples_per_class)

    x_test = y_test = None
    if spec.test_samples_per_class > 0:
        x, y_test = _draw_split(rng, spec, directions, spec.test_samples_per_class)
        x_test = Tensor(x)

    return Dataset(Tensor(x_train), y_train, x_test, y_test, spec.num_classes,
                   Provenance.SYNTHETIC_BLOBS, class_directions=directions)


def _check_keys(section: dict, allowed: set[str], where: str):
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise NormLabError(f"unknown key '{unknown[0]}' in {where}")


_BLOB_KEYS = {"num_classes", "dim", "samples_per_class", "test_samples_per_class",
              "center_scale", "min_norm", "norm_spread", "min_center_angle_deg", "seed"}
_IDX_KEYS = {"train_images", "train_labels", "test_images", "test_labels",
             "limit_train", "limit_test", "num_classes"}
_CSV_KEYS = {"train", "test", "label_column", "num_classes"}


def _resolve(base_dir: pathlib.Path, p: str) -> pathlib.Path:
    path = pathlib.Path(p)
    return path if path.is_absolute() else base_dir / path


def _limited(x: Tensor, y: np.ndarray, limit):
    if limit is None or limit >= len(y):
        return x, y
    return Tensor(x.data[:limit]), y[:limit]


def _num_classes(section: dict, *label_sets) -> int:
    if "num_classes" in section:
        return int(section["num_classes"])
    return int(max(int(labels.max()) for labels in label_sets if labels is not None)) + 1


def load_dataset(section: dict[str, Any], base_dir: pathlib.Path) -> Dataset:
    """Builds the dataset described by a config's `dataset` section."""
    section = dict(section)
    kind = section.pop("kind", "blobs")

    if kind == "blobs":
        _check_keys(section, _BLOB_KEYS, "dataset (blobs)")
        return make_blobs(BlobSpec(**section))

    if kind == "idx":
        _check_keys(section, _IDX_KEYS, "dataset (idx)")
        for key in ("train_images", "train_labels"):
            if key not in section:
                raise NormLabError(f"dataset (idx) needs '{key}'")
        x_train, y_train = load_idx(_resolve(base_dir, section["train_images"]),
                                    _resolve(base_dir, section["train_labels"]))
        x_train, y_train = _limited(x_train, y_train, section.get("limit_train"))
        x_test = y_test = None
        if "test_images" in section or "test_labels" in section:
            if "test_images" not in section or "test_labels" not in section:
                raise NormLabError("dataset (idx) needs both 'test_images' and 'test_labels'")
            x_test, y_test = load_idx(_resolve(base_dir, section["test_images"]),
                                      _resolve(base_dir, section["test_labels"]))
            x_test, y_test = _limited(x_test, y_test, section.get("limit_test"))
        return Dataset(x_train, y_train, x_test, y_test,
                       _num_classes(section, y_train, y_test), Provenance.IDX_FILES)

    if kind == "csv":
        _check_keys(section, _CSV_KEYS, "dataset (csv)")
        if "train" not in section or "label_column" not in section:
            raise NormLabError("dataset (csv) needs 'train' and 'label_column'")
        x_train, y_train = load_csv(_resolve(base_dir, section["train"]), section["label_column"])
        x_test = y_test = None
        if "test" in section:
            x_test, y_test = load_csv(_resolve(base_dir, section["test"]), section["label_column"])
        return Dataset(x_train, y_train, x_test, y_test,
                       _num_classes(section, y_train, y_test), Provenance.CSV)

    raise NormLabError(f"unknown dataset kind '{kind}' (choose from blobs, idx, csv)")
