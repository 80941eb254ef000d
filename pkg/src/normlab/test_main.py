# SPDX-FileCopyrightText: 2022 Barndollar Music, Ltd.
#
# SPDX-License-Identifier: Apache-2.0

import contextlib
import csv
import io
import json
import pathlib
import tempfile
import unittest

from .main import CHECKPOINT_NAME, run
from .read import load_checkpoint, read_log

_TRAIN_YAML = """\
seed: 1
epochs: 2
batch_size: 8
hidden: [6]
dataset:
  kind: blobs
  num_classes: 3
  dim: 4
  samples_per_class: 10
  test_samples_per_class: 4
  seed: 2
"""


class TestCli(unittest.TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.dir = pathlib.Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()

    def run_cli(self, *argv: str) -> tuple[int, str]:
        out = io.StringIO()
        with contextlib.redirect_stdout(out), contextlib.redirect_stderr(io.StringIO()):
            try:
                status = run(list(argv))
            except SystemExit as e:
                status = e.code
        return status, out.getvalue()

    def write_config(self, text: str = _TRAIN_YAML) -> str:
        path = self.dir / "config.yaml"
        path.write_text(text)
        return str(path)

    def test_sim_prints_final_angle_and_writes_outputs(self):
        out_dir = self.dir / "sim"
        status, text = self.run_cli("sim", "--norm", "l2bn", "--seed", "4", "--out", str(out_dir))
        self.assertEqual(status, 0)
        line = [l for l in text.splitlines() if l.startswith("final_min_angle_deg=")][0]
        angle_part, converged_part = line.split()
        self.assertAlmostEqual(float(angle_part.split("=")[1]), 120.0, delta=0.5)
        self.assertNotEqual(converged_part, "converged_at=none")

        with open(out_dir / "trajectory.csv", newline="") as f:
            rows = list(csv.reader(f))
        self.assertEqual(rows[0], ["iter", "min_angle_deg"])
        manifest = json.loads((out_dir / "manifest.json").read_text())
        self.assertEqual(manifest["result"]["seed"], 4)
        self.assertEqual(manifest["result"]["config"]["norm"], "l2bn")

    def test_sim_repeats_for_a_seed(self):
        _, first = self.run_cli("sim", "--norm", "bn", "--out", str(self.dir / "a"))
        _, second = self.run_cli("sim", "--norm", "bn", "--out", str(self.dir / "b"))
        self.assertEqual(first.splitlines()[-1], second.splitlines()[-1])
        self.assertEqual((self.dir / "a" / "trajectory.csv").read_text(),
                         (self.dir / "b" / "trajectory.csv").read_text())

    def test_gradcheck_exit_codes(self):
        status, text = self.run_cli("gradcheck", "--layer", "l2bn", "--shape", "6,4")
        self.assertEqual(status, 0)
        self.assertIn("grad_gamma", text)
        status, _ = self.run_cli("gradcheck", "--layer", "bn", "--shape", "6,4", "--tol", "1e-30")
        self.assertEqual(status, 1)

    def test_gradcheck_rejects_rank2_shape_for_group_norm(self):
        status, text = self.run_cli("gradcheck", "--layer", "gn", "--shape", "6,4")
        self.assertEqual(status, 1)
        self.assertIn("gn needs a rank-4 shape", text)

    def test_usage_errors_exit_2(self):
        self.assertEqual(self.run_cli("sim", "--out", str(self.dir))[0], 2)
        self.assertEqual(self.run_cli("gradcheck", "--layer", "xn")[0], 2)
        self.assertEqual(self.run_cli("gradcheck", "--layer", "bn", "--shape", "1,2,3")[0], 2)
        self.assertEqual(self.run_cli("bogus")[0], 2)

    def test_train_then_compare(self):
        config = self.write_config()
        status_a, text = self.run_cli("train", "--config", config, "--out", str(self.dir / "a"))
        self.assertEqual(status_a, 0)
        self.assertIn("final_test_acc=", text)

        run_a = self.dir / "a"
        rows = read_log(run_a / "log.csv")
        self.assertEqual([row["epoch"] for row in rows], [1.0, 2.0])
        stack = load_checkpoint(run_a / CHECKPOINT_NAME)
        self.assertEqual(stack.num_classes, 3)
        manifest = json.loads((run_a / "manifest.json").read_text())
        self.assertEqual(manifest["result"]["config"]["config_dir"], str(self.dir.resolve()))

        self.write_config(_TRAIN_YAML.replace("seed: 1\n", "seed: 5\n", 1))
        self.run_cli("train", "--config", config, "--out", str(self.dir / "b"))
        status, text = self.run_cli("compare", "--run-a", str(run_a), "--run-b",
                                    str(self.dir / "b"))
        self.assertEqual(status, 0)
        self.assertIn("Final epoch", text)

    def test_train_repeats_results_for_a_seed(self):
        config = self.write_config()
        self.run_cli("train", "--config", config, "--out", str(self.dir / "a"))
        self.run_cli("train", "--config", config, "--out", str(self.dir / "b"))
        rows_a = read_log(self.dir / "a" / "log.csv")
        rows_b = read_log(self.dir / "b" / "log.csv")
        for row in rows_a + rows_b:
            del row["wall_ms"]
        self.assertEqual(rows_a, rows_b)
        self.assertEqual((self.dir / "a" / CHECKPOINT_NAME).read_bytes(),
                         (self.dir / "b" / CHECKPOINT_NAME).read_bytes())

    def test_train_config_errors_exit_1(self):
        config = self.write_config("epochs: 2\nbatchsize: 8\n")
        status, text = self.run_cli("train", "--config", config, "--out", str(self.dir / "a"))
        self.assertEqual(status, 1)
        self.assertIn("unknown key 'batchsize' in config", text)

    def test_compare_needs_logs(self):
        status, text = self.run_cli("compare", "--run-a", str(self.dir), "--run-b", str(self.dir))
        self.assertEqual(status, 1)
        self.assertIn("no log.csv or log.jsonl", text)

    def test_angles_prints_json_report(self):
        features = self.dir / "features.csv"
        features.write_text("x,y,label\n1,0,0\n0,2,0\n-1,0,1\n-5,0,1\n0,0,1\n")
        status, text = self.run_cli("angles", "--features", str(features),
                                    "--labels-column", "label")
        self.assertEqual(status, 0)
        json_line = [l for l in text.splitlines() if l.startswith("{")][0]
        report = json.loads(json_line)
        self.assertAlmostEqual(report["intra_train_deg"], 22.5, places=9)
        self.assertAlmostEqual(report["inter_deg"], 135.0, places=9)
        self.assertIsNone(report["iir_test"])
        self.assertIn("ignoring 1 zero-norm feature rows", text)

    def test_sweep_writes_one_run_per_placement_and_seed(self):
        config = self.write_config(_TRAIN_YAML.replace("epochs: 2", "epochs: 1"))
        out_dir = self.dir / "sweep"
        status, text = self.run_cli("sweep", "--config", config, "--seeds", "1,2",
                                    "--placements", "none,all", "--out", str(out_dir))
        self.assertEqual(status, 0)
        with open(out_dir / "summary.csv", newline="") as f:
            rows = list(csv.reader(f))
        self.assertEqual(rows[0], ["placement", "seed", "best_test_acc", "final_test_acc",
                                   "final_iir_train"])
        self.assertEqual([(r[0], r[1]) for r in rows[1:]],
                         [("none", "1"), ("none", "2"), ("all", "1"), ("all", "2")])
        self.assertTrue((out_dir / "all_seed2" / "log.csv").is_file())
        self.assertIn("Sweep summary", text)

    def test_sweep_placements_conflict_with_kinds(self):
        config = self.write_config(_TRAIN_YAML + "norm:\n  kinds: [bn]\n")
        status, text = self.run_cli("sweep", "--config", config, "--placements", "all",
                                    "--out", str(self.dir / "sweep"))
        self.assertEqual(status, 1)
        self.assertIn("cannot be combined", text)


if __name__ == "__main__":
    unittest.main()
