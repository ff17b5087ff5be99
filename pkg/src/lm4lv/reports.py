"""Report and log emission: per-image CSV, summary JSON, JSONL step logs.

Every report carries the config hash of the run that produced it. Infinite
metric values (identical images) serialize as the string "inf" so the files
stay strict JSON/CSV.
"""

import csv
import json
import math
import os
import time


def _jsonable(value):
    if isinstance(value, float) and math.isinf(value):
        return "inf"
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def from_jsonable(value):
    if value == "inf":
        return math.inf
    if isinstance(value, dict):
        return {k: from_jsonable(v) for k, v in value.items()}
    if isinstance(value, list):
        return [from_jsonable(v) for v in value]
    return value


def write_summary(path, summary, config_hash):
    payload = {"config_hash": config_hash, **_jsonable(summary)}
    with open(path, "w") as f:
        json.dump(payload, f, indent=1, sort_keys=True)
        f.write("\n")


def read_summary(path):
    with open(path) as f:
        return from_jsonable(json.load(f))


def write_per_image_csv(path, rows, config_hash):
    if not rows:
        raise ValueError("refusing to write an empty per-image report")
    fields = list(rows[0])
    with open(path, "w", newline="") as f:
        f.write(f"# config_hash={config_hash}\n")
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _jsonable(v) for k, v in row.items()})


SUMMARY_COLUMNS = ("task", "psnr_degraded", "ssim_degraded", "psnr_maer", "ssim_maer",
                   "psnr_lm4lv", "ssim_lm4lv", "delta_psnr", "delta_ssim",
                   "misalignment_rate")


def aggregate_summaries(report_dir, pattern="_summary.json"):
    """Collect all task summaries in a directory into table rows."""
    rows = []
    for name in sorted(os.listdir(report_dir)):
        if name.endswith(pattern):
            rows.append(read_summary(os.path.join(report_dir, name)))
    return rows


def format_table(rows):
    """Render task rows as a degraded / baseline / generated text table."""
    def fmt(v):
        if isinstance(v, float):
            return "inf" if math.isinf(v) else f"{v:.2f}"
        return str(v)

    header = ["task", "psnr_deg", "ssim_deg", "psnr_maer", "ssim_maer",
              "psnr_ours", "ssim_ours", "d_psnr", "d_ssim", "misalign"]
    table = [header]
    for row in rows:
        table.append([fmt(row.get(k)) for k in SUMMARY_COLUMNS])
    widths = [max(len(r[i]) for r in table) for i in range(len(header))]
    lines = ["  ".join(cell.rjust(w) for cell, w in zip(row, widths)) for row in table]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines)


class JsonlLogger:
    """One JSON object per training step: step, loss terms, lr, wall time."""

    def __init__(self, path):
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        self._f = open(path, "a")

    def __call__(self, record):
        self._f.write(json.dumps({**record, "wall_time": time.time()}) + "\n")
        self._f.flush()

    def close(self):
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
