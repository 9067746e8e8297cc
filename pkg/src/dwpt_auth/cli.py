"""Command-line entry point.

Exit codes: 0 success, 1 a defense or expectation failed, 2 usage or
configuration error.  Set ``DWPT_LOG_LEVEL`` (e.g. ``DEBUG``) for logging.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys

from .bench import DEFAULT_ITERATIONS, bench_primitives
from .errors import ConfigError, DwptError
from .simnet import ScenarioConfig, attack_suite, check_expectations, run_scenario
from .wire import EXPECTED_SIZES, PUBLISHED_SIZES, encoded_size

EXIT_OK = 0
EXIT_DEFENSE = 1
EXIT_USAGE = 2


def _table(header: list[str], rows: list[list], fmt: str) -> str:
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        return buf.getvalue()
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(str(c) for c in row) + " |" for row in rows]
    return "\n".join(lines) + "\n"


def cmd_sizes(args) -> int:
    rows = []
    for tag in EXPECTED_SIZES:
        size = encoded_size(tag)
        note = f"[1] printed as {PUBLISHED_SIZES[tag]}" if PUBLISHED_SIZES[tag] != size else ""
        rows.append([tag, size, note])
    sys.stdout.write(_table(["message", "bytes", "note"], rows, args.format))
    sys.stdout.write("\n[1] m7 fields sum to 32 + 32 + 64 + 32 + 8 = 168 bytes.\n")
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.iterations < 1:
        print("iterations must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    report = bench_primitives(args.iterations, args.seed)
    sys.stdout.write(report.to_csv() if args.format == "csv" else report.to_markdown())
    return EXIT_OK


def cmd_attack_suite(args) -> int:
    rows = attack_suite(args.seed, disable_freshness=args.disable_freshness)
    table = [[r.attack, r.defense, r.rejected_by, r.verdict] for r in rows]
    sys.stdout.write(_table(["attack", "defense", "rejected at", "verdict"], table, args.format))
    for r in rows:
        if not r.held:
            print(f"{r.attack}: {r.detail}", file=sys.stderr)
    return EXIT_OK if all(r.held for r in rows) else EXIT_DEFENSE


def cmd_simulate(args) -> int:
    try:
        with open(args.config) as fh:
            raw = json.load(fh)
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except json.JSONDecodeError as exc:
        print(f"config is not JSON: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.seed is not None:
        raw["seed"] = args.seed
    config = ScenarioConfig.from_dict(raw)
    transcript = run_scenario(config)
    if args.transcript:
        with open(args.transcript, "w") as fh:
            fh.write(transcript.to_jsonl())
    v = transcript.verdicts
    rows = [
        [
            name,
            phase,
            v["tokens_issued"].get(name, 0),
            v["power"].get(name, 0),
            v["billed"].get(name, "-"),
            v["metered"].get(name, "-"),
        ]
        for name, phase in v["phases"].items()
    ]
    sys.stdout.write(_table(["vehicle", "phase", "tokens", "pads powered", "billed", "metered"], rows, args.format))
    print(f"\nrejections: {v['rejections']}  disputes: {len(v['disputes'])}  settlements: {v['settlements']}")
    failures = check_expectations(transcript, config.expect)
    for f in failures:
        print(f"expectation failed: {f}", file=sys.stderr)
    return EXIT_DEFENSE if failures else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dwpt", description="Authentication and billing simulator for in-motion charging.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_format(p):
        p.add_argument("--format", choices=("csv", "markdown"), default="markdown")

    p = sub.add_parser("simulate", help="run a scenario from a JSON config")
    p.add_argument("config", help="scenario config file")
    p.add_argument("--transcript", help="write the JSON-lines transcript here")
    p.add_argument("--seed", type=int, help="override the config seed")
    add_format(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("bench", help="time the cryptographic primitives")
    p.add_argument("--iterations", type=int, default=DEFAULT_ITERATIONS)
    p.add_argument("--seed", type=int, default=0)
    add_format(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sizes", help="encoded size of m5..m16")
    add_format(p)
    p.set_defaults(func=cmd_sizes)

    p = sub.add_parser("attack-suite", help="run the attack scenarios")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--disable-freshness", action="store_true", help="test hook: turn off timestamp checks")
    add_format(p)
    p.set_defaults(func=cmd_attack_suite)
    return parser


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("DWPT_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DwptError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEFENSE


if __name__ == "__main__":
    sys.exit(main())
