# SPDX-FileCopyrightText: 2022 Barndollar Music, Ltd.
#
# SPDX-License-Identifier: Apache-2.0

import json
import pathlib
import struct
import tempfile
import unittest

import numpy as np

from .data import LOG_COLUMNS, BlobSpec, EpochRecord, TrainConfig
from .dataset import make_blobs
from .errors import NormLabError
from .geomsim import Trajectory
from .metrics import AngleReport
from .model import build_mlp, predict, train
from .norm import NormKind, NormSpec
from .read import load_checkpoint, read_log
from .tensor import Rng, Tensor
from .write import export_trajectory, make_manifest, save_checkpoint, write_log, write_manifest, write_rows


def _trained_stack():
    dataset = make_blobs(BlobSpec(num_classes=3, dim=4, samples_per_class=10,
                                  test_samples_per_class=0, seed=2))
    config = TrainConfig(epochs=1, batch_size=8, hidden=[6, 6])
    _, stack = train(config, dataset)
    return stack, dataset


def _records() -> list[EpochRecord]:
    return [
        EpochRecord(1, 1.25, 0.5, None, AngleReport(20.0, 40.0), 3.5),
        EpochRecord(2, 0.1 + 0.2, 0.75, 0.625, AngleReport(12.5, 50.0, intra_test=15.0), 2.0),
    ]


class TempDirTestCase(unittest.TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.dir = pathlib.Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()


class TestLog(TempDirTestCase):
    def test_csv_header_and_blank_cells(self):
        path = self.dir / "log.csv"
        write_log(_records(), path)
        lines = path.read_text().splitlines()
        self.assertEqual(lines[0], ",".join(LOG_COLUMNS))
        self.assertEqual(lines[1], "1,1.25,0.5,,20.0,,40.0,0.5,,3.5")

    def test_csv_values_read_back_exactly(self):
        path = self.dir / "log.csv"
        write_log(_records(), path)
        rows = read_log(path)
        self.assertEqual(len(rows), 2)
        self.assertIsNone(rows[0]["test_acc"])
        self.assertEqual(rows[1]["train_loss"], 0.1 + 0.2)
        self.assertEqual(rows[1]["iir_test"], 0.3)

    def test_jsonl_uses_null_for_missing_values(self):
        path = self.dir / "log.jsonl"
        write_log(_records(), path, format="jsonl")
        lines = path.read_text().splitlines()
        self.assertEqual(json.loads(lines[0])["test_acc"], None)
        self.assertEqual(read_log(path)[1]["test_acc"], 0.625)

    def test_unknown_format(self):
        with self.assertRaisesRegex(NormLabError, "unknown log format 'xml'"):
            write_log(_records(), self.dir / "log.xml", format="xml")

    def test_read_log_rejects_foreign_csv(self):
        path = self.dir / "other.csv"
        path.write_text("a,b\n1,2\n")
        with self.assertRaisesRegex(NormLabError, "unexpected log columns"):
            read_log(path)

    def test_unwritable_path_names_the_path(self):
        with self.assertRaisesRegex(NormLabError, "cannot write"):
            write_log(_records(), self.dir / "missing" / "log.csv")


class TestCheckpoint(TempDirTestCase):
    def test_round_trip_is_bit_exact(self):
        stack, dataset = _trained_stack()
        path = self.dir / "model.nlab"
        save_checkpoint(stack, path)
        loaded = load_checkpoint(path, expected=stack)

        self.assertEqual(loaded.describe(), stack.describe())
        original = dict(stack.state_arrays())
        restored = dict(loaded.state_arrays())
        self.assertEqual(list(restored), list(original))
        for name, value in original.items():
            np.testing.assert_array_equal(restored[name], value, err_msg=name)
        self.assertGreater(loaded.norm_layers()[0].state.num_batches_tracked, 0)

        logits, features = predict(stack, dataset.x_train)
        loaded_logits, loaded_features = predict(loaded, dataset.x_train)
        np.testing.assert_array_equal(loaded_logits, logits)
        np.testing.assert_array_equal(loaded_features, features)

    def test_architecture_mismatch(self):
        stack, _ = _trained_stack()
        path = self.dir / "model.nlab"
        save_checkpoint(stack, path)
        other = build_mlp((4,), [6], 3, NormSpec(NormKind.BN), Rng(0))
        with self.assertRaisesRegex(NormLabError, "does not match the expected stack"):
            load_checkpoint(path, expected=other)

    def test_bad_magic(self):
        path = self.dir / "model.nlab"
        path.write_bytes(b"NOTALAB1" + bytes(8))
        with self.assertRaisesRegex(NormLabError, "not a normlab checkpoint"):
            load_checkpoint(path)

    def test_wrong_version(self):
        stack, _ = _trained_stack()
        path = self.dir / "model.nlab"
        save_checkpoint(stack, path)
        raw = bytearray(path.read_bytes())
        raw[8:12] = struct.pack("<I", 99)
        path.write_bytes(bytes(raw))
        with self.assertRaisesRegex(NormLabError, "format version 99, expected 1"):
            load_checkpoint(path)

    def test_truncated_and_trailing_bytes(self):
        stack, _ = _trained_stack()
        path = self.dir / "model.nlab"
        save_checkpoint(stack, path)
        raw = path.read_bytes()

        path.write_bytes(raw[:-8])
        with self.assertRaisesRegex(NormLabError, "truncated tensor"):
            load_checkpoint(path)
        path.write_bytes(raw + b"\x00")
        with self.assertRaisesRegex(NormLabError, "1 unexpected trailing bytes"):
            load_checkpoint(path)
        path.write_bytes(raw[:5])
        with self.assertRaisesRegex(NormLabError, "truncated checkpoint header"):
            load_checkpoint(path)


class TestTrajectoryExport(TempDirTestCase):
    def test_columns_with_centers(self):
        trajectory = Trajectory(60.0, record_centers=True, degenerate_start=False)
        trajectory.min_angle_per_iter += [90.0, 120.0]
        trajectory.centers_per_iter += [Tensor([[1.0, 0.0], [0.0, 1.0]]),
                                        Tensor([[0.5, 0.5], [-1.0, 0.0]])]
        path = self.dir / "trajectory.csv"
        export_trajectory(trajectory, path)
        self.assertEqual(path.read_text().splitlines(), [
            "iter,min_angle_deg,c0_0,c0_1,c1_0,c1_1",
            "1,90.0,1.0,0.0,0.0,1.0",
            "2,120.0,0.5,0.5,-1.0,0.0",
        ])

    def test_angles_only(self):
        trajectory = Trajectory(60.0, record_centers=False, degenerate_start=False)
        trajectory.min_angle_per_iter.append(75.5)
        path = self.dir / "trajectory.csv"
        export_trajectory(trajectory, path)
        self.assertEqual(path.read_text().splitlines(), ["iter,min_angle_deg", "1,75.5"])


class TestManifest(TempDirTestCase):
    def test_result_section_excludes_timestamp(self):
        manifest = make_manifest("sim", {"norm": "l2bn"}, 5, "9.9.9")
        write_manifest(manifest, self.dir)
        written = json.loads((self.dir / "manifest.json").read_text())
        self.assertEqual(set(written), {"result", "created_utc"})
        self.assertEqual(written["result"]["command"], "sim")
        self.assertEqual(written["result"]["seed"], 5)
        self.assertEqual(written["result"]["config"], {"norm": "l2bn"})
        self.assertEqual(written["result"]["versions"]["normlab"], "9.9.9")
        self.assertIn("numpy", written["result"]["versions"])

    def test_repeated_manifests_share_results(self):
        a = make_manifest("train", {"seed": 1}, 1, "1.0").to_dict()
        b = make_manifest("train", {"seed": 1}, 1, "1.0").to_dict()
        self.assertEqual(a["result"], b["result"])


class TestRows(TempDirTestCase):
    def test_blank_cells_for_none(self):
        path = self.dir / "summary.csv"
        write_rows(["a", "b"], [[1, None], ["x", 0.5]], path)
        self.assertEqual(path.read_text().splitlines(), ["a,b", "1,", "x,0.5"])


if __name__ == "__main__":
    unittest.main()
