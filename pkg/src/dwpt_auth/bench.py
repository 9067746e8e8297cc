"""Timing of the four primitives the protocol cost model is built from."""

from __future__ import annotations

import hashlib
import random
import statistics
import time
from dataclasses import dataclass

from .pairing import G1Point, G2Point, pair, random_scalar

DEFAULT_ITERATIONS = 1000

PRIMITIVES = ("T_mul", "T_exp", "T_pair", "T_h")


@dataclass(frozen=True)
class BenchRow:
    primitive: str
    avg_ms: float
    min_ms: float
    max_ms: float


@dataclass(frozen=True)
class BenchReport:
    iterations: int
    rows: tuple[BenchRow, ...]

    def row(self, primitive: str) -> BenchRow:
        for r in self.rows:
            if r.primitive == primitive:
                return r
        raise KeyError(primitive)

    def to_csv(self) -> str:
        lines = ["primitive,avg_ms,min_ms,max_ms"]
        lines += [f"{r.primitive},{r.avg_ms:.6f},{r.min_ms:.6f},{r.max_ms:.6f}" for r in self.rows]
        return "\n".join(lines) + "\n"

    def to_markdown(self) -> str:
        lines = [
            "| Primitive | Average (ms) | Min (ms) | Max (ms) |",
            "|---|---|---|---|",
        ]
        lines += [
            f"| {r.primitive} | {r.avg_ms:.4f} | {r.min_ms:.4f} | {r.max_ms:.4f} |" for r in self.rows
        ]
        return "\n".join(lines) + "\n"


def _time(fn, args_list) -> list[float]:
    samples = []
    for args in args_list:
        start = time.perf_counter_ns()
        fn(*args)
        samples.append((time.perf_counter_ns() - start) / 1e6)
    return samples


def bench_primitives(iterations: int = DEFAULT_ITERATIONS, seed: int = 0) -> BenchReport:
    """Time each primitive ``iterations`` times on fresh random operands.

    T_mul is the group operation in G1 (written multiplicatively in the cost
    model), T_exp a G1 scalar exponentiation, T_pair one pairing and T_h a
    single SHA-256 over 64 bytes.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    rng = random.Random(seed)
    g1, g2 = G1Point.generator(), G2Point.generator()
    points = [(g1 * random_scalar(rng), g1 * random_scalar(rng)) for _ in range(iterations)]
    exps = [(points[i][0], random_scalar(rng)) for i in range(iterations)]
    pairs = [(points[i][0], g2 * random_scalar(rng)) for i in range(iterations)]
    blobs = [(rng.randbytes(64),) for _ in range(iterations)]

    rows = []
    for name, fn, args in (
        ("T_mul", lambda a, b: a + b, points),
        ("T_exp", lambda a, k: a * k, exps),
        ("T_pair", pair, pairs),
        ("T_h", lambda b: hashlib.sha256(b).digest(), blobs),
    ):
        samples = _time(fn, args)
        rows.append(BenchRow(name, statistics.fmean(samples), min(samples), max(samples)))
    return BenchReport(iterations, tuple(rows))
