# SPDX-FileCopyrightText: 2022 Barndollar Music, Ltd.
#
# SPDX-License-Identifier: Apache-2.0

import contextlib
import io
import unittest

from .check import CheckResult
from .metrics import AngleReport
from .report import SweepRun, best_test_acc, epoch_deltas, final_summary, report_angles, report_compare, report_gradcheck, report_sweep, summarize_sweep


def _row(epoch: int, test_acc, iir_train: float, train_acc: float = 0.5) -> dict:
    return {
        "epoch": float(epoch), "train_loss": 1.0, "train_acc": train_acc, "test_acc": test_acc,
        "intra_train_deg": 30.0, "intra_test_deg": None, "inter_deg": 60.0,
        "iir_train": iir_train, "iir_test": None, "wall_ms": 1.0,
    }


def _captured(fn, *args) -> str:
    out = io.StringIO()
    with contextlib.redirect_stdout(out):
        fn(*args)
    return out.getvalue()


class TestCompare(unittest.TestCase):
    def test_best_test_acc(self):
        self.assertEqual(best_test_acc([_row(1, 0.5, 1.0), _row(2, 0.75, 1.0), _row(3, 0.25, 1.0)]),
                         0.75)
        self.assertIsNone(best_test_acc([_row(1, None, 1.0)]))

    def test_epoch_deltas_are_b_minus_a(self):
        rows_a = [_row(1, 0.5, 0.75), _row(2, 0.625, 0.5)]
        rows_b = [_row(1, 0.75, 0.5), _row(2, 0.875, 0.25)]
        deltas = epoch_deltas(rows_a, rows_b)
        self.assertEqual([d["epoch"] for d in deltas], [1, 2])
        self.assertEqual(deltas[0]["test_acc"], 0.25)
        self.assertEqual(deltas[1]["iir_train"], -0.25)
        self.assertIsNone(deltas[0]["iir_test"])

    def test_epoch_deltas_stop_at_shorter_run(self):
        deltas = epoch_deltas([_row(1, 0.5, 1.0)], [_row(1, 0.5, 1.0), _row(2, 0.5, 1.0)])
        self.assertEqual(len(deltas), 1)

    def test_final_summary(self):
        rows_a = [_row(1, 0.75, 0.5), _row(2, 0.5, 0.5)]
        rows_b = [_row(1, 0.25, 0.5), _row(2, 0.625, 0.25)]
        summary = final_summary(rows_a, rows_b)
        self.assertEqual(summary["test_acc"], 0.125)
        self.assertEqual(summary["iir_train"], -0.25)
        self.assertEqual(summary["best_test_acc_a"], 0.75)
        self.assertEqual(summary["best_test_acc_b"], 0.625)
        self.assertEqual(summary["best_test_acc"], -0.125)

    def test_report_compare_warns_on_unequal_lengths(self):
        text = _captured(report_compare, "a", "b", [_row(1, 0.5, 1.0)],
                         [_row(1, 0.5, 1.0), _row(2, 0.5, 1.0)])
        self.assertIn("Runs logged 1 and 2 epochs", text)
        self.assertIn("Final epoch", text)


class TestSweep(unittest.TestCase):
    def test_mean_and_population_std_per_placement(self):
        runs = [
            SweepRun("none", 1, [_row(1, 0.5, 1.0)]),
            SweepRun("none", 2, [_row(1, 0.75, 0.5)]),
            SweepRun("all", 1, [_row(1, None, 0.25)]),
        ]
        summary = summarize_sweep(runs)
        self.assertEqual(list(summary), ["none", "all"])
        self.assertEqual(summary["none"]["seeds"], 2)
        self.assertEqual(summary["none"]["best_test_acc"], (0.625, 0.125))
        self.assertEqual(summary["none"]["final_iir_train"], (0.75, 0.25))
        self.assertIsNone(summary["all"]["best_test_acc"])
        self.assertEqual(summary["all"]["final_iir_train"], (0.25, 0.0))

    def test_run_row(self):
        run = SweepRun("late_stages", 4, [_row(1, 0.25, 2.0), _row(2, 0.5, 1.5)])
        self.assertEqual(run.to_row(), ["late_stages", 4, 0.5, 0.5, 1.5])

    def test_report_sweep_lists_each_placement(self):
        summary = summarize_sweep([SweepRun("early_stages", 1, [_row(1, 0.5, 1.0)])])
        text = _captured(report_sweep, summary)
        self.assertIn("early_stages", text)
        self.assertIn("0.5000 ± 0.0000", text)


class TestPrinting(unittest.TestCase):
    def test_angles_table_shows_missing_values_as_dash(self):
        text = _captured(report_angles, AngleReport(20.0, 40.0))
        self.assertIn("20.000000 deg", text)
        self.assertIn("0.500000", text)
        self.assertIn("-", text)

    def test_gradcheck_lines(self):
        result = CheckResult("bn [6, 4]", 1e-5)
        result.errors = {"grad_in": 1e-7, "grad_gamma": 1e-3}
        text = _captured(report_gradcheck, [result])
        self.assertIn("grad_in", text)
        self.assertIn("1.000e-03", text)


if __name__ == "__main__":
    unittest.main()
