# SPDX-FileCopyrightText: 2022 Barndollar Music, Ltd.
#
# SPDX-License-Identifier: Apache-2.0

from typing import Optional

import numpy as np

from .check import CheckResult
from .metrics import AngleReport
from .print import blue_field, cyan_field, pass_fail, print_banner, print_blank_line, print_bold, print_ind2, yellow_text

# Log fields that compare reports deltas for, in display order.
COMPARED_FIELDS = ["train_acc", "test_acc", "intra_train_deg", "intra_test_deg", "inter_deg",
                   "iir_train", "iir_test"]


def _fmt(value: Optional[float], digits: int = 4) -> str:
    return "-" if value is None else f"{value:.{digits}f}"


def _delta(a: Optional[float], b: Optional[float]) -> Optional[float]:
    if a is None or b is None:
        return None
    return b - a


def report_angles(report: AngleReport):
    """Prints an AngleReport as an aligned two-column table."""
    rows = [
        ("intra-angle (train)", report.intra_train),
        ("intra-angle (test)", report.intra_test),
        ("inter-angle", report.inter),
        ("IIR (train)", report.iir_train),
        ("IIR (test)", report.iir_test),
    ]
    width = max(len(label) for label, _ in rows)
    for label, value in rows:
        unit = " deg" if "angle" in label and value is not None else ""
        print_ind2(f"{blue_field(label.ljust(width))}  {_fmt(value, 6)}{unit}")


def report_gradcheck(results: list[CheckResult]):
    """One line per (configuration, gradient) with its relative error."""
    print_banner("Gradient check (central differences)")
    name_width = max(len(r.name) for r in results)
    for result in results:
        for grad_name, err in result.errors.items():
            print_ind2(f"{result.name.ljust(name_width)}  {grad_name.ljust(16)}  "
                       f"{err:.3e}  {pass_fail(err <= result.tol)}")
    print_blank_line()


def best_test_acc(rows: list[dict]) -> Optional[float]:
    """Highest test accuracy over all epochs (None without a test split)."""
    values = [row["test_acc"] for row in rows if row.get("test_acc") is not None]
    return max(values) if values else None


def epoch_deltas(rows_a: list[dict], rows_b: list[dict]) -> list[dict]:
    """Per-epoch (b - a) for COMPARED_FIELDS over the epochs both runs logged."""
    deltas = []
    for row_a, row_b in zip(rows_a, rows_b):
        entry = {"epoch": int(row_b["epoch"])}
        for field in COMPARED_FIELDS:
            entry[field] = _delta(row_a.get(field), row_b.get(field))
        deltas.append(entry)
    return deltas


def final_summary(rows_a: list[dict], rows_b: list[dict]) -> dict:
    """Final-epoch deltas plus each run's best test accuracy."""
    last_a, last_b = rows_a[-1], rows_b[-1]
    summary = {field: _delta(last_a.get(field), last_b.get(field)) for field in COMPARED_FIELDS}
    summary["best_test_acc_a"] = best_test_acc(rows_a)
    summary["best_test_acc_b"] = best_test_acc(rows_b)
    summary["best_test_acc"] = _delta(summary["best_test_acc_a"], summary["best_test_acc_b"])
    return summary


def report_compare(name_a: str, name_b: str, rows_a: list[dict], rows_b: list[dict]):
    """Prints per-epoch deltas and a final-epoch summary, b relative to a."""
    print_banner(f"Compare: B ({name_b}) minus A ({name_a})")
    if len(rows_a) != len(rows_b):
        print_ind2(yellow_text(f"Runs logged {len(rows_a)} and {len(rows_b)} epochs; "
                               f"comparing the first {min(len(rows_a), len(rows_b))}"))

    header = "epoch  " + "  ".join(f"{field:>15}" for field in COMPARED_FIELDS)
    print_bold(f"  {header}")
    for entry in epoch_deltas(rows_a, rows_b):
        cells = "  ".join(f"{_fmt(entry[field]):>15}" for field in COMPARED_FIELDS)
        print_ind2(f"{entry['epoch']:>5}  {cells}")
    print_blank_line()

    summary = final_summary(rows_a, rows_b)
    print_bold("Final epoch")
    print_ind2(f"{cyan_field('Δaccuracy (test)'.ljust(20))} {_fmt(summary['test_acc'])}")
    print_ind2(f"{cyan_field('Δaccuracy (train)'.ljust(20))} {_fmt(summary['train_acc'])}")
    print_ind2(f"{cyan_field('Δintra (train)'.ljust(20))} {_fmt(summary['intra_train_deg'])}")
    print_ind2(f"{cyan_field('Δintra (test)'.ljust(20))} {_fmt(summary['intra_test_deg'])}")
    print_ind2(f"{cyan_field('Δinter'.ljust(20))} {_fmt(summary['inter_deg'])}")
    print_ind2(f"{cyan_field('ΔIIR (train)'.ljust(20))} {_fmt(summary['iir_train'])}")
    print_ind2(f"{cyan_field('ΔIIR (test)'.ljust(20))} {_fmt(summary['iir_test'])}")
    print_ind2(f"{cyan_field('best test acc'.ljust(20))} A {_fmt(summary['best_test_acc_a'])}, "
               f"B {_fmt(summary['best_test_acc_b'])}")
    print_blank_line()


class SweepRun:
    """Headline numbers of one (placement, seed) run of a sweep."""
    placement: str
    seed: int
    best_test_acc: Optional[float]
    final_test_acc: Optional[float]
    final_iir_train: float

    def __init__(self, placement: str, seed: int, rows: list[dict]):
        self.placement = placement
        self.seed = seed
        self.best_test_acc = best_test_acc(rows)
        self.final_test_acc = rows[-1].get("test_acc")
        self.final_iir_train = rows[-1]["iir_train"]

    def to_row(self) -> list:
        return [self.placement, self.seed, self.best_test_acc, self.final_test_acc,
                self.final_iir_train]


SWEEP_COLUMNS = ["placement", "seed", "best_test_acc", "final_test_acc", "final_iir_train"]


def _mean_std(values: list[Optional[float]]) -> Optional[tuple[float, float]]:
    present = [v for v in values if v is not None]
    if not present:
        return None
    return float(np.mean(present)), float(np.std(present))


def summarize_sweep(runs: list[SweepRun]) -> dict[str, dict]:
    """Mean and (population) std per placement across seeds."""
    summary = {}
    for placement in dict.fromkeys(run.placement for run in runs):
        group = [run for run in runs if run.placement == placement]
        summary[placement] = {
            "seeds": len(group),
            "best_test_acc": _mean_std([run.best_test_acc for run in group]),
            "final_test_acc": _mean_std([run.final_test_acc for run in group]),
            "final_iir_train": _mean_std([run.final_iir_train for run in group]),
        }
    return summary


def _fmt_mean_std(stats: Optional[tuple[float, float]]) -> str:
    if stats is None:
        return "-"
    return f"{stats[0]:.4f} ± {stats[1]:.4f}"


def report_sweep(summary: dict[str, dict]):
    print_banner("Sweep summary (mean ± std across seeds)")
    width = max(len("placement"), *(len(p) for p in summary))
    print_bold(f"  {'placement'.ljust(width)}  {'seeds':>5}  {'best test acc':>17}  "
               f"{'final test acc':>17}  {'final IIR (train)':>17}")
    for placement, stats in summary.items():
        print_ind2(f"{placement.ljust(width)}  {stats['seeds']:>5}  "
                   f"{_fmt_mean_std(stats['best_test_acc']):>17}  "
                   f"{_fmt_mean_std(stats['final_test_acc']):>17}  "
                   f"{_fmt_mean_std(stats['final_iir_train']):>17}")
    print_blank_line()
