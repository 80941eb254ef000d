# SPDX-FileCopyrightText: 2022 Barndollar Music, Ltd.
#
# SPDX-License-Identifier: Apache-2.0

import csv
import dataclasses
import json
import math
import pathlib
import struct
from typing import Optional

import numpy as np
import yaml

from .data import CHECKPOINT_HEADER_FMT, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, LOG_COLUMNS, NormPolicy, TrainConfig
from .errors import NormLabError
from .model import LayerStack, stack_from_description
from .tensor import Tensor

# IDX magic numbers: two zero bytes, a type code (0x08 = unsigned byte), and
# the number of dimensions.
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

_IDX_U32_PACK_FMT = (
    ">"      # Big endian.
    "I"      # [0] uint32
)


def _read_idx(path: pathlib.Path, magic: int) -> tuple[tuple[int, ...], np.ndarray]:
    """Reads one IDX file of unsigned bytes. Returns (dims, flat uint8 payload)."""
    raw = pathlib.Path(path).read_bytes()
    word = struct.calcsize(_IDX_U32_PACK_FMT)
    if len(raw) < word:
        raise NormLabError(f"{path}: truncated IDX header at byte offset {len(raw)}")

    found, = struct.unpack_from(_IDX_U32_PACK_FMT, raw, 0)
    if found != magic:
        raise NormLabError(
            f"{path}: bad IDX magic 0x{found:08X} at byte offset 0 (expected 0x{magic:08X})")

    num_dims = magic & 0xFF
    header_len = word * (1 + num_dims)
    if len(raw) < header_len:
        raise NormLabError(f"{path}: truncated IDX header at byte offset {len(raw)}")
    dims = tuple(struct.unpack_from(_IDX_U32_PACK_FMT, raw, word * (1 + i))[0]
                 for i in range(num_dims))

    expected = math.prod(dims)
    payload = raw[header_len:]
    if len(payload) < expected:
        raise NormLabError(
            f"{path}: truncated IDX data at byte offset {len(raw)} "
            f"(dims {list(dims)} need {header_len + expected} bytes)")
    if len(payload) > expected:
        raise NormLabError(
            f"{path}: {len(payload) - expected} unexpected trailing bytes at byte offset "
            f"{header_len + expected} for dims {list(dims)}")
    return dims, np.frombuffer(payload, dtype=np.uint8)


def load_idx(images_path: pathlib.Path, labels_path: pathlib.Path) -> tuple[Tensor, np.ndarray]:
    """Reads an IDX image/label pair. Images come back as [N, 1, H, W] in [0, 1]."""
    dims, pixels = _read_idx(images_path, IDX_IMAGES_MAGIC)
    label_dims, labels = _read_idx(labels_path, IDX_LABELS_MAGIC)

    n, h, w = dims
    if label_dims[0] != n:
        raise NormLabError(
            f"{labels_path}: {label_dims[0]} labels for {n} images in {images_path}")
    if n == 0:
        raise NormLabError(f"{images_path}: contains no images")

    images = pixels.reshape(n, 1, h, w).astype(np.float64) / 255.0
    return Tensor(images), labels.astype(np.int64)


def load_csv(path: pathlib.Path, label_column: str) -> tuple[Tensor, np.ndarray]:
    """Reads a header-first numeric CSV. Returns (features [N, d], integer labels)."""
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if len(rows) == 0:
        raise NormLabError(f"{path}: empty file (a header row is required)")

    header = [name.strip() for name in rows[0]]
    if label_column not in header:
        raise NormLabError(f"{path}: no column named '{label_column}' in header {header}")
    label_idx = header.index(label_column)

    features, labels = [], []
    for row_num, row in enumerate(rows[1:], start=2):
        if len(row) == 0:
            continue
        if len(row) != len(header):
            raise NormLabError(
                f"{path}: row {row_num} has {len(row)} cells, header has {len(header)}")
        values = []
        for col, cell in enumerate(row):
            try:
                value = float(cell)
            except ValueError:
                raise NormLabError(
                    f"{path}: non-numeric cell '{cell}' at row {row_num}, column {col + 1} "
                    f"('{header[col]}')")
            if col == label_idx:
                if not value.is_integer() or value < 0:
                    raise NormLabError(
                        f"{path}: label '{cell}' at row {row_num} is not a non-negative integer")
                labels.append(int(value))
            else:
                values.append(value)
        features.append(values)

    if len(features) == 0:
        raise NormLabError(f"{path}: no data rows")
    if len(header) < 2:
        raise NormLabError(f"{path}: needs at least one feature column besides '{label_column}'")
    return Tensor(features), np.array(labels, dtype=np.int64)


def _from_mapping(cls, mapping, where: str):
    """Builds dataclass cls from mapping, rejecting unknown keys."""
    if not isinstance(mapping, dict):
        raise NormLabError(f"{where} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    for key in mapping:
        if key not in names:
            raise NormLabError(f"unknown key '{key}' in {where}")
    return cls(**mapping)


def parse_train_config(mapping: dict) -> TrainConfig:
    mapping = dict(mapping)
    norm = mapping.pop("norm", {})
    config = _from_mapping(TrainConfig, mapping, "config")
    config.norm = _from_mapping(NormPolicy, norm or {}, "config section 'norm'")
    if not isinstance(config.dataset, dict) or "kind" not in config.dataset:
        raise NormLabError("config section 'dataset' must be a mapping with a 'kind'")
    config.validate()
    return config


def read_train_config(path: pathlib.Path) -> TrainConfig:
    """Parses a YAML training config; unknown keys are errors."""
    with open(path, "r") as f:
        try:
            mapping = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise NormLabError(f"{path}: invalid YAML: {e}")
    if mapping is None:
        mapping = {}
    try:
        return parse_train_config(mapping)
    except TypeError as e:
        raise NormLabError(f"{path}: {e}")


def _parse_cell(cell: str) -> Optional[float]:
    return None if cell == "" else float(cell)


def read_log(path: pathlib.Path) -> list[dict]:
    """Reads a CSV or JSONL epoch log written by write_log."""
    path = pathlib.Path(path)
    rows = []
    if path.suffix == ".jsonl":
        with open(path, "r") as f:
            for line in f:
                if line.strip():
                    rows.append(json.loads(line))
        return rows

    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != LOG_COLUMNS:
            raise NormLabError(f"{path}: unexpected log columns {reader.fieldnames}")
        for row in reader:
            rows.append({key: _parse_cell(value) for key, value in row.items()})
    return rows


def load_checkpoint(path: pathlib.Path, expected: Optional[LayerStack] = None) -> LayerStack:
    """Rebuilds a stack from a checkpoint; rejects a descriptor unlike expected's."""
    raw = pathlib.Path(path).read_bytes()
    header_len = struct.calcsize(CHECKPOINT_HEADER_FMT)
    if len(raw) < header_len:
        raise NormLabError(f"{path}: truncated checkpoint header")
    magic, version, desc_len = struct.unpack_from(CHECKPOINT_HEADER_FMT, raw, 0)
    if magic != CHECKPOINT_MAGIC:
        raise NormLabError(f"{path}: not a normlab checkpoint (magic {magic!r})")
    if version != CHECKPOINT_VERSION:
        raise NormLabError(
            f"{path}: checkpoint format version {version}, expected {CHECKPOINT_VERSION}")

    offset = header_len + desc_len
    if len(raw) < offset:
        raise NormLabError(f"{path}: truncated checkpoint descriptor")
    descriptor = json.loads(raw[header_len:offset].decode("utf-8"))
    if expected is not None and descriptor["architecture"] != expected.describe():
        raise NormLabError(f"{path}: checkpoint architecture does not match the expected stack")

    stack = stack_from_description(descriptor["architecture"])
    arrays = {}
    for entry in descriptor["tensors"]:
        shape = tuple(entry["shape"])
        nbytes = 8 * math.prod(shape)
        if len(raw) < offset + nbytes:
            raise NormLabError(f"{path}: truncated tensor '{entry['name']}' at byte offset {offset}")
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=math.prod(shape),
                                              offset=offset).reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(raw):
        raise NormLabError(f"{path}: {len(raw) - offset} unexpected trailing bytes")

    stack.load_state_arrays(arrays)
    return stack
