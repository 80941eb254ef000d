# SPDX-FileCopyrightText: 2022 Barndollar Music, Ltd.
#
# SPDX-License-Identifier: Apache-2.0

import contextlib
import csv
import datetime
import json
import pathlib
import platform
import struct

import numpy as np

from .data import CHECKPOINT_HEADER_FMT, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, LOG_COLUMNS, EpochRecord, RunManifest
from .errors import NormLabError
from .geomsim import Trajectory
from .model import LayerStack
from .print import print_info


@contextlib.contextmanager
def _opened(path: pathlib.Path, mode: str, **kwargs):
    """open() that reports I/O failures with the offending path."""
    try:
        with open(path, mode, **kwargs) as f:
            yield f
    except OSError as e:
        raise NormLabError(f"cannot write {path}: {e.strerror or e}")


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)  # Shortest exact round-trip text.
    return str(value)


def write_log(records: list[EpochRecord], path: pathlib.Path, format: str = "csv"):
    """Writes epoch records as CSV (fixed LOG_COLUMNS order) or JSON lines."""
    if format not in ("csv", "jsonl"):
        raise NormLabError(f"unknown log format '{format}'")
    with _opened(path, "w", newline="") as f:
        if format == "jsonl":
            for record in records:
                f.write(json.dumps(record.to_row()) + "\n")
            return
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for record in records:
            row = record.to_row()
            writer.writerow([_cell(row[column]) for column in LOG_COLUMNS])


def save_checkpoint(stack: LayerStack, path: pathlib.Path):
    """Magic, version, length-prefixed JSON descriptor, then little-endian f64 tensors."""
    arrays = stack.state_arrays()
    descriptor = {
        "architecture": stack.describe(),
        "tensors": [{"name": name, "shape": list(value.shape)} for name, value in arrays],
    }
    desc_bytes = json.dumps(descriptor, sort_keys=True).encode("utf-8")

    with _opened(path, "wb") as f:
        f.write(struct.pack(CHECKPOINT_HEADER_FMT, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
                            len(desc_bytes)))
        f.write(desc_bytes)
        for _, value in arrays:
            f.write(np.ascontiguousarray(value, dtype="<f8").tobytes())


def export_trajectory(t: Trajectory, path: pathlib.Path):
    """CSV: iter, min_angle_deg, then c<i>_<j> center coordinates if recorded."""
    header = ["iter", "min_angle_deg"]
    if t.centers_per_iter:
        c, d = t.centers_per_iter[0].shape
        header += [f"c{i}_{j}" for i in range(c) for j in range(d)]

    with _opened(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for k, angle in enumerate(t.min_angle_per_iter):
            row = [str(k + 1), repr(angle)]
            if t.centers_per_iter:
                row += [repr(v) for v in t.centers_per_iter[k].flat().tolist()]
            writer.writerow(row)


def make_manifest(command: str, config: dict, seed, version: str) -> RunManifest:
    versions = {
        "normlab": version,
        "numpy": np.__version__,
        "python": platform.python_version(),
    }
    created = datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")
    return RunManifest(command, config, seed, versions, created)


def write_manifest(manifest: RunManifest, out_dir: pathlib.Path):
    with _opened(out_dir / "manifest.json", "w") as f:
        json.dump(manifest.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def write_rows(header: list[str], rows: list[list], path: pathlib.Path):
    """Writes a plain CSV table (used for sweep summaries)."""
    with _opened(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])


def make_run_dir(out_dir: pathlib.Path) -> pathlib.Path:
    """Creates (if needed) and returns the per-run output directory."""
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise NormLabError(f"cannot create output dir {out_dir}: {e.strerror or e}")
    print_info(f"Writing outputs to '{out_dir}' ...")
    return out_dir
