# SPDX-FileCopyrightText: 2022 Barndollar Music, Ltd.
#
# SPDX-License-Identifier: Apache-2.0

import dataclasses
import enum
import pathlib
from typing import Any, Optional

import numpy as np

from .errors import NormLabError
from .metrics import AngleReport
from .print import print_verbose
from .tensor import Tensor


class Context:
    """Contextual options and data used across this tool."""
    out_dir: Optional[pathlib.Path]
    verbose: bool

    def __init__(self, out_dir: Optional[pathlib.Path] = None, verbose: bool = False):
        self.out_dir = out_dir
        self.verbose = verbose

    def maybe_print_verbose(self, msg: str):
        """If in verbose mode, prints msg."""
        if self.verbose:
            print_verbose(msg)


@enum.unique
class Provenance(str, enum.Enum):
    SYNTHETIC_BLOBS = "synthetic_blobs"
    IDX_FILES = "idx_files"
    CSV = "csv"


class Dataset:
    """Train/test arrays with integer labels in [0, num_classes)."""
    x_train: Tensor
    y_train: np.ndarray
    x_test: Optional[Tensor]
    y_test: Optional[np.ndarray]
    num_classes: int
    provenance: Provenance

    # Unit class directions (synthetic blobs only).
    class_directions: Optional[np.ndarray]

    def __init__(self, x_train: Tensor, y_train, x_test: Optional[Tensor], y_test,
                 num_classes: int, provenance: Provenance,
                 class_directions: Optional[np.ndarray] = None):
        y_train = np.asarray(y_train, dtype=np.int64)
        if x_train.shape[0] != len(y_train) or len(y_train) == 0:
            raise NormLabError(
                f"train split: {len(y_train)} labels for inputs of shape {list(x_train.shape)}")
        _check_labels(y_train, num_classes, "train")
        if (x_test is None) != (y_test is None):
            raise NormLabError("test split needs both inputs and labels")
        if x_test is not None:
            y_test = np.asarray(y_test, dtype=np.int64)
            if x_test.shape[0] != len(y_test):
                raise NormLabError(
                    f"test split: {len(y_test)} labels for inputs of shape {list(x_test.shape)}")
            if x_test.shape[1:] != x_train.shape[1:]:
                raise NormLabError(
                    f"test inputs {list(x_test.shape)} do not match train inputs {list(x_train.shape)}")
            _check_labels(y_test, num_classes, "test")

        self.x_train = x_train
        self.y_train = y_train
        self.x_test = x_test
        self.y_test = y_test
        self.num_classes = num_classes
        self.provenance = provenance
        self.class_directions = class_directions

    def has_test(self) -> bool:
        return self.x_test is not None


def _check_labels(labels: np.ndarray, num_classes: int, split: str):
    if len(labels) > 0 and (labels.min() < 0 or labels.max() >= num_classes):
        raise NormLabError(f"{split} labels must be in [0, {num_classes})")


class BlobSpec:
    """Synthetic direction clusters with a dialable within-class norm spread."""
    num_classes: int
    dim: int
    samples_per_class: int
    test_samples_per_class: int
    center_scale: float

    # Sample norms are uniform in [min_norm, min_norm * norm_spread].
    min_norm: float
    norm_spread: float

    # Class directions are redrawn until pairwise angles reach this.
    min_center_angle_deg: float
    seed: int

    def __init__(self, num_classes: int = 10, dim: int = 32, samples_per_class: int = 200,
                 test_samples_per_class: int = 50, center_scale: float = 3.0,
                 min_norm: float = 1.0, norm_spread: float = 10.0,
                 min_center_angle_deg: float = 5.0, seed: int = 7):
        if num_classes < 2 or dim < 2 or samples_per_class < 1 or test_samples_per_class < 0:
            raise NormLabError(
                "blobs need num_classes >= 2, dim >= 2, samples_per_class >= 1 "
                "and test_samples_per_class >= 0")
        if norm_spread < 1:
            raise NormLabError(f"norm_spread must be >= 1, got {norm_spread}")
        if min_norm <= 0 or center_scale < 0:
            raise NormLabError("min_norm must be > 0 and center_scale >= 0")

        self.num_classes = num_classes
        self.dim = dim
        self.samples_per_class = samples_per_class
        self.test_samples_per_class = test_samples_per_class
        self.center_scale = center_scale
        self.min_norm = min_norm
        self.norm_spread = norm_spread
        self.min_center_angle_deg = min_center_angle_deg
        self.seed = seed


@dataclasses.dataclass
class NormPolicy:
    """Which normalization goes where, plus the shared NormSpec fields."""
    base: str = "bn"
    composite: str = "l2bn"
    placement: str = "all"
    kinds: Optional[list[str]] = None
    eps_l2: float = 1e-12
    eps_var: float = 1e-5
    momentum: float = 0.1
    affine: bool = True
    scale_by_sqrt_numel: Optional[bool] = None
    channels_per_group: int = 2


@dataclasses.dataclass
class TrainConfig:
    """One training run. Mirrors the YAML config key set exactly."""
    seed: int = 121
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum_sgd: float = 0.9
    weight_decay: float = 5e-4
    arch: str = "mlp"
    hidden: list[int] = dataclasses.field(default_factory=lambda: [128, 128])
    norm: NormPolicy = dataclasses.field(default_factory=NormPolicy)
    dataset: dict[str, Any] = dataclasses.field(default_factory=lambda: {"kind": "blobs"})
    deterministic: bool = True
    log_format: str = "csv"
    test_angles: bool = True

    def validate(self):
        if self.batch_size < 2:
            raise NormLabError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 1:
            raise NormLabError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate <= 0:
            raise NormLabError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.arch not in ("mlp", "cnn"):
            raise NormLabError(f"arch must be 'mlp' or 'cnn', got '{self.arch}'")
        if self.log_format not in ("csv", "jsonl"):
            raise NormLabError(f"log_format must be 'csv' or 'jsonl', got '{self.log_format}'")
        if self.seed < 0:
            raise NormLabError(f"seed must be >= 0, got {self.seed}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class EpochRecord:
    """One row of the per-epoch training log."""
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: Optional[float]
    angle_report: AngleReport
    wall_ms: float

    def __init__(self, epoch: int, train_loss: float, train_acc: float,
                 test_acc: Optional[float], angle_report: AngleReport, wall_ms: float):
        self.epoch = epoch
        self.train_loss = train_loss
        self.train_acc = train_acc
        self.test_acc = test_acc
        self.angle_report = angle_report
        self.wall_ms = wall_ms

    def to_row(self) -> dict:
        """Log fields in the fixed column order."""
        angles = self.angle_report.to_dict()
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "train_acc": self.train_acc,
            "test_acc": self.test_acc,
            "intra_train_deg": angles["intra_train_deg"],
            "intra_test_deg": angles["intra_test_deg"],
            "inter_deg": angles["inter_deg"],
            "iir_train": angles["iir_train"],
            "iir_test": angles["iir_test"],
            "wall_ms": self.wall_ms,
        }

    def result_row(self) -> dict:
        """to_row() without the timing field; equal for repeated seeded runs."""
        row = self.to_row()
        del row["wall_ms"]
        return row


# Column order of CSV logs.
LOG_COLUMNS = ["epoch", "train_loss", "train_acc", "test_acc", "intra_train_deg",
               "intra_test_deg", "inter_deg", "iir_train", "iir_test", "wall_ms"]


class RunManifest:
    """Everything needed to re-execute a run, written beside its outputs."""
    command: str
    config: dict
    seed: Optional[int]
    versions: dict[str, str]
    created_utc: str

    def __init__(self, command: str, config: dict, seed: Optional[int],
                 versions: dict[str, str], created_utc: str):
        self.command = command
        self.config = config
        self.seed = seed
        self.versions = versions
        self.created_utc = created_utc

    def to_dict(self) -> dict:
        # Only "result" participates in determinism comparisons.
        return {
            "result": {
                "command": self.command,
                "config": self.config,
                "seed": self.seed,
                "versions": self.versions,
            },
            "created_utc": self.created_utc,
        }


# Checkpoint files start with this magic string and format version.
CHECKPOINT_MAGIC = b"NORMLAB1"
CHECKPOINT_VERSION = 1

CHECKPOINT_HEADER_FMT = (
    "<"      # Little endian.
    "8s"     # [0] Magic (b"NORMLAB1")
    "I"      # [1] Format version (uint32)
    "I"      # [2] Descriptor length in bytes (uint32)
)
