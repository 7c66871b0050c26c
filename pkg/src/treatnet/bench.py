"""Single-image throughput measurement and comparison tables."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, TreatNetError

WARMUP_ITERATIONS = 3
BENCH_ITERATIONS = 64

TABLE_COLUMNS = ("model", "scheme", "params", "flops", "bytes", "fps", "accuracy")


@dataclass
class BenchResult:
    model_id: str
    scheme: str
    fps: float
    model_bytes: int
    test_accuracy: float | None
    param_count: int
    flop_count: int

    def __post_init__(self):
        if not self.fps > 0:
            raise TreatNetError(f"fps must be positive, got {self.fps}")
        if self.test_accuracy is not None and not 0.0 <= self.test_accuracy <= 1.0:
            raise TreatNetError(f"accuracy must be in [0, 1], got {self.test_accuracy}")

    def row(self) -> dict[str, str]:
        acc = "" if self.test_accuracy is None else f"{self.test_accuracy:.4f}"
        return {"model": self.model_id, "scheme": self.scheme, "params": str(self.param_count),
                "flops": str(self.flop_count), "bytes": str(self.model_bytes),
                "fps": f"{self.fps:.3f}", "accuracy": acc}


@dataclass
class Timing:
    iterations: int
    seconds: float

    @property
    def fps(self) -> float:
        return self.iterations / self.seconds


def random_image(shape, seed=0) -> np.ndarray:
    return np.random.default_rng(seed).random((1,) + tuple(shape), dtype=np.float32)


def time_inference(predict, image, iterations: int = BENCH_ITERATIONS,
                   warmup: int = WARMUP_ITERATIONS, clock=time.perf_counter) -> Timing:
    """Call ``predict(image)`` on the same cached batch ``iterations`` times.

    Warmup calls are not timed. FPS is iterations over total elapsed time.
    """
    if iterations < 1:
        raise ConfigError(f"iterations must be >= 1, got {iterations}")
    for _ in range(warmup):
        predict(image)
    start = clock()
    for _ in range(iterations):
        predict(image)
    elapsed = clock() - start
    return Timing(iterations, max(elapsed, 1e-12))


def emit_table(rows, fmt: str = "markdown") -> str:
    rows = list(rows)
    if not rows:
        raise ConfigError("cannot emit a table with no rows")
    records = [r.row() if isinstance(r, BenchResult) else {k: str(r[k]) for k in TABLE_COLUMNS}
               for r in rows]
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=TABLE_COLUMNS, lineterminator="\r\n")
        w.writeheader()
        w.writerows(records)
        return buf.getvalue()
    if fmt == "markdown":
        def esc(s):
            return s.replace("|", "\\|")
        lines = ["| " + " | ".join(TABLE_COLUMNS) + " |",
                 "|" + "|".join("---" for _ in TABLE_COLUMNS) + "|"]
        lines += ["| " + " | ".join(esc(r[c]) for c in TABLE_COLUMNS) + " |" for r in records]
        return "\n".join(lines) + "\n"
    raise ConfigError(f"unknown table format {fmt!r}; use csv or markdown")


def parse_table_csv(text: str) -> list[dict[str, str]]:
    reader = csv.DictReader(io.StringIO(text, newline=""))
    if tuple(reader.fieldnames or ()) != TABLE_COLUMNS:
        raise ConfigError(f"unexpected table header {reader.fieldnames}")
    return list(reader)
