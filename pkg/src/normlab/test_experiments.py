# SPDX-FileCopyrightText: 2022 Barndollar Music, Ltd.
#
# SPDX-License-Identifier: Apache-2.0

"""Directional training experiments. Slow: set NORMLAB_SLOW_TESTS=1 to run."""

import os
import pathlib
import struct
import tempfile
import unittest

import numpy as np

from .data import BlobSpec, NormPolicy, TrainConfig
from .dataset import load_dataset, make_blobs
from .model import Placement, train
from .read import IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC
from .tensor import Rng

_SLOW = os.environ.get("NORMLAB_SLOW_TESTS") == "1"
_SEEDS = [121, 122, 123, 124, 125]

# Class means sit far enough apart that both variants classify the test split
# almost perfectly; 2000 test samples put one sample at 0.05 points.
_SEPARABLE_BLOBS = BlobSpec(num_classes=10, dim=32, samples_per_class=200,
                            test_samples_per_class=200, center_scale=8.0, norm_spread=10.0)

_IDX_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}
_IMAGE_SIDE = 8


def _write_idx_split(directory: pathlib.Path, images_name: str, labels_name: str,
                     templates: np.ndarray, per_class: int, rng: Rng):
    """One noisy copy of a class template per sample, each at a random brightness."""
    labels = np.repeat(np.arange(len(templates)), per_class)
    brightness = rng.uniform((len(labels), 1, 1), 0.1, 1.0)
    noise = rng.normal((len(labels), _IMAGE_SIDE, _IMAGE_SIDE), 0.0, 0.1)
    pixels = np.clip(np.rint(brightness * (templates[labels] + noise) * 255), 0, 255)

    header = struct.pack(">IIII", IDX_IMAGES_MAGIC, len(labels), _IMAGE_SIDE, _IMAGE_SIDE)
    (directory / images_name).write_bytes(header + pixels.astype(np.uint8).tobytes())
    header = struct.pack(">II", IDX_LABELS_MAGIC, len(labels))
    (directory / labels_name).write_bytes(header + labels.astype(np.uint8).tobytes())


def _write_idx_image_set(directory: pathlib.Path, seed: int = 31):
    """Ten classes of 8x8 images in the MNIST file layout."""
    rng = Rng(seed)
    templates = rng.uniform((10, _IMAGE_SIDE, _IMAGE_SIDE), 0.0, 1.0)
    _write_idx_split(directory, _IDX_FILES["train_images"], _IDX_FILES["train_labels"],
                     templates, 200, rng.spawn(1))
    _write_idx_split(directory, _IDX_FILES["test_images"], _IDX_FILES["test_labels"],
                     templates, 100, rng.spawn(2))


def _final(config: TrainConfig, dataset) -> tuple[float, float]:
    """(final IIR on train, final test accuracy)."""
    records, _ = train(config, dataset)
    return records[-1].angle_report.iir_train, records[-1].test_acc


def _bn_vs_l2bn(dataset, **kwargs):
    results = {"bn": [], "l2bn": []}
    for seed in _SEEDS:
        for name, placement in (("bn", "none"), ("l2bn", "all")):
            config = TrainConfig(seed=seed, norm=NormPolicy(placement=placement), **kwargs)
            results[name].append(_final(config, dataset))
    return results


@unittest.skipUnless(_SLOW, "set NORMLAB_SLOW_TESTS=1 to run training experiments")
class TestL2BNAgainstBN(unittest.TestCase):
    def assertDirectional(self, results):
        smaller_iir = sum(l2[0] < bn[0] for l2, bn in zip(results["l2bn"], results["bn"]))
        self.assertGreaterEqual(smaller_iir, 4, f"L2BN had smaller IIR in {smaller_iir}/5 seeds")
        mean_bn = np.mean([acc for _, acc in results["bn"]])
        mean_l2bn = np.mean([acc for _, acc in results["l2bn"]])
        self.assertGreaterEqual(mean_l2bn, mean_bn - 0.002)

    def test_blobs(self):
        self.assertDirectional(_bn_vs_l2bn(make_blobs(_SEPARABLE_BLOBS), epochs=10))

    def test_small_blobs_bn_ends_with_higher_iir(self):
        dataset = make_blobs(BlobSpec(num_classes=3, dim=2, norm_spread=10.0, seed=7))
        bn_iir, _ = _final(TrainConfig(epochs=10, norm=NormPolicy(placement="none")), dataset)
        l2bn_iir, _ = _final(TrainConfig(epochs=10, norm=NormPolicy(placement="all")), dataset)
        self.assertGreater(bn_iir, l2bn_iir)

    def test_idx_images(self):
        with tempfile.TemporaryDirectory() as tmp:
            _write_idx_image_set(pathlib.Path(tmp))
            dataset = load_dataset(dict(_IDX_FILES, kind="idx", num_classes=10), pathlib.Path(tmp))
        self.assertEqual(dataset.x_train.shape, (2000, 1, _IMAGE_SIDE, _IMAGE_SIDE))
        self.assertEqual(dataset.x_test.shape, (1000, 1, _IMAGE_SIDE, _IMAGE_SIDE))
        self.assertDirectional(_bn_vs_l2bn(dataset, epochs=8))


@unittest.skipUnless(_SLOW, "set NORMLAB_SLOW_TESTS=1 to run training experiments")
class TestPlacementAblation(unittest.TestCase):
    def test_all_layers_beats_classifier_only_on_iir(self):
        dataset = make_blobs(BlobSpec(num_classes=10, dim=32, samples_per_class=200,
                                      norm_spread=10.0))
        hidden = [64, 64, 64, 64]
        final_iir = {}
        for placement in Placement:
            final_iir[placement] = []
            for seed in _SEEDS:
                config = TrainConfig(seed=seed, epochs=8, hidden=hidden,
                                     norm=NormPolicy(placement=placement.value))
                records, _ = train(config, dataset)
                self.assertEqual(len(records), 8)
                final_iir[placement].append(records[-1].angle_report.iir_train)

        wins = sum(a <= c for a, c in zip(final_iir[Placement.ALL],
                                          final_iir[Placement.CLASSIFIER_ONLY]))
        self.assertGreaterEqual(wins, 3, f"all-layers IIR <= classifier-only in {wins}/5 seeds")


if __name__ == "__main__":
    unittest.main()
