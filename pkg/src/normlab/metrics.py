# SPDX-FileCopyrightText: 2022 Barndollar Music, Ltd.
#
# SPDX-License-Identifier: Apache-2.0

"""Angular discriminability metrics over classifier-input features.

All angles are in degrees and computed from unit-normalized vectors, so every
metric here is invariant to positive per-sample rescaling.
"""

from typing import Optional

import numpy as np

from .errors import NormLabError
from .tensor import Tensor


class LabeledFeatures:
    """Feature rows [N, d] with integer labels in [0, num_classes)."""
    features: Tensor
    labels: np.ndarray
    num_classes: int

    def __init__(self, features: Tensor, labels, num_classes: Optional[int] = None):
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if features.ndim != 2:
            raise NormLabError(f"features must be rank 2, got shape {list(features.shape)}")
        if labels.shape[0] != features.shape[0]:
            raise NormLabError(
                f"{labels.shape[0]} labels for features of shape {list(features.shape)}")
        if num_classes is None:
            num_classes = int(labels.max()) + 1
        if labels.min() < 0 or labels.max() >= num_classes:
            raise NormLabError(f"labels must be in [0, {num_classes})")

        self.features = features
        self.labels = labels
        self.num_classes = num_classes

    def without_zero_rows(self) -> tuple["LabeledFeatures", int]:
        """Drops zero-norm rows (which have no direction); returns (kept, num_dropped)."""
        norms = np.linalg.norm(self.features.data, axis=1)
        keep = norms > 0
        dropped = int(np.count_nonzero(~keep))
        if dropped == 0:
            return self, 0
        if dropped == len(keep):
            raise NormLabError("every feature row has zero norm")
        return LabeledFeatures(Tensor(self.features.data[keep]), self.labels[keep],
                               self.num_classes), dropped


class ClassCenters:
    """Per-class means of unit-normalized features (not normalized means)."""
    centers: Tensor
    num_classes: int

    def __init__(self, centers: Tensor):
        self.centers = centers
        self.num_classes = centers.shape[0]

    def degenerate_classes(self) -> list[int]:
        """Classes whose center has zero norm (e.g. antipodal members)."""
        norms = np.linalg.norm(self.centers.data, axis=1)
        return [int(i) for i in np.flatnonzero(norms == 0)]

    def unit_centers(self) -> np.ndarray:
        degenerate = self.degenerate_classes()
        if degenerate:
            raise NormLabError(
                f"class {degenerate[0]} has a zero-norm center; its unit members cancel out")
        return _unit_rows(self.centers.data, "class center")


class AngleReport:
    """Intra-angle (train/test), inter-angle and their ratios, in degrees."""
    intra_train: float
    intra_test: Optional[float]
    inter: float
    iir_train: float
    iir_test: Optional[float]

    def __init__(self, intra_train: float, inter: float, intra_test: Optional[float] = None):
        self.intra_train = intra_train
        self.intra_test = intra_test
        self.inter = inter
        self.iir_train = iir(intra_train, inter)
        self.iir_test = None if intra_test is None else iir(intra_test, inter)

    def to_dict(self) -> dict:
        return {
            "intra_train_deg": self.intra_train,
            "intra_test_deg": self.intra_test,
            "inter_deg": self.inter,
            "iir_train": self.iir_train,
            "iir_test": self.iir_test,
        }


def _unit_rows(x: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1)
    zero = np.flatnonzero(norms == 0)
    if len(zero) > 0:
        raise NormLabError(f"zero-norm {what} at row {int(zero[0])}")
    return x / norms[:, None]


def _angles_deg(cosines: np.ndarray) -> np.ndarray:
    return np.degrees(np.arccos(np.clip(cosines, -1.0, 1.0)))


def compute_centers(train: LabeledFeatures) -> ClassCenters:
    """c_i = (1 / N_i) * sum_j x_ij / ||x_ij||."""
    units = _unit_rows(train.features.data, "feature")
    counts = np.bincount(train.labels, minlength=train.num_classes)
    empty = np.flatnonzero(counts == 0)
    if len(empty) > 0:
        raise NormLabError(f"class {int(empty[0])} has no samples")

    sums = np.zeros((train.num_classes, units.shape[1]))
    np.add.at(sums, train.labels, units)
    return ClassCenters(Tensor(sums / counts[:, None]))


def intra_angle(data: LabeledFeatures, centers: ClassCenters) -> float:
    """Mean angle between each sample and its own class center."""
    if data.num_classes > centers.num_classes or int(data.labels.max()) >= centers.num_classes:
        raise NormLabError(
            f"labels reach class {int(data.labels.max())} but only "
            f"{centers.num_classes} centers were given")
    units = _unit_rows(data.features.data, "feature")
    unit_centers = centers.unit_centers()
    cosines = np.sum(units * unit_centers[data.labels], axis=1)
    return float(np.mean(_angles_deg(cosines)))


def inter_angle(centers: ClassCenters) -> float:
    """Mean over classes of the minimum angle to any other class center."""
    if centers.num_classes < 2:
        raise NormLabError(f"inter-angle needs >= 2 classes, got {centers.num_classes}")
    unit_centers = centers.unit_centers()
    angles = _angles_deg(unit_centers @ unit_centers.T)
    np.fill_diagonal(angles, np.inf)
    return float(np.mean(np.min(angles, axis=1)))


def iir(intra: float, inter: float) -> float:
    """Intra-angle over inter-angle; smaller means more discriminative."""
    if not inter > 0:
        raise NormLabError(f"IIR needs a positive inter-angle, got {inter}")
    return intra / inter


def min_pairwise_angle(vectors: np.ndarray) -> float:
    """Smallest angle (degrees) between any two rows."""
    units = _unit_rows(vectors, "vector")
    angles = _angles_deg(units @ units.T)
    np.fill_diagonal(angles, np.inf)
    return float(np.min(angles))


def angle_report(train: LabeledFeatures, test: Optional[LabeledFeatures] = None) -> AngleReport:
    """Centers come from train; the test split only gets an intra-angle."""
    centers = compute_centers(train)
    intra_test = None if test is None else intra_angle(test, centers)
    return AngleReport(intra_angle(train, centers), inter_angle(centers), intra_test)
