"""Small writers for the artifact's output formats: CSV tables, JSON lines and PPM strips."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np


def write_csv(path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def format_metric_rows(rows: list[dict]) -> list[list]:
    """Metric dicts to CSV cells with a fixed number of digits (stable across runs)."""
    return [[r["config"], r["tier"], r["n"], f"{r['SR']:.6f}", f"{r['SPL']:.6f}", f"{r['DTS']:.6f}"] for r in rows]


METRIC_HEADER = ["config", "tier", "n", "SR", "SPL", "DTS"]


def write_metrics(path, rows: list[dict]) -> None:
    write_csv(path, METRIC_HEADER, format_metric_rows(rows))


def append_jsonl(path, record: dict) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def write_jsonl(path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def write_trajectory(path, trajectory) -> None:
    """Trajectory tuples ``(x, y, theta, action, ...)`` as CSV: step, x, y, theta, action.

    Action -1 marks the final pose.
    """
    write_csv(path, ["step", "x", "y", "theta", "action"],
              [[i, f"{p[0]:.6f}", f"{p[1]:.6f}", f"{p[2]:.6f}", p[3]] for i, p in enumerate(trajectory)])


def to_rgb_bytes(image: np.ndarray) -> np.ndarray:
    img = np.clip(np.nan_to_num(np.asarray(image, dtype=float)), 0.0, 1.0)
    return np.round(img * 255.0).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6 image from an (H, W, 3) array in [0, 1]."""
    img = to_rgb_bytes(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3), got {img.shape}")
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    """Inverse of ``write_ppm`` (returns uint8 (H, W, 3))."""
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, depth = int(parts[1]), int(parts[2]), int(parts[3])
    if depth != 255:
        raise ValueError(f"{path}: unsupported max value {depth}")
    return np.frombuffer(parts[4][: w * h * 3], dtype=np.uint8).reshape(h, w, 3)


def strip_image(values: np.ndarray, rows: int = 16) -> np.ndarray:
    """A 1-D strip (W,) or (W, 3) repeated vertically; scalar strips are max-normalised to grey."""
    v = np.asarray(values, dtype=float)
    if v.ndim == 1:
        peak = v.max() if v.size and v.max() > 0 else 1.0
        v = np.repeat((v / peak)[:, None], 3, axis=1)
    return np.repeat(v[None], rows, axis=0)
