"""Command-line experiment runner.

    ampi --preset fig2a-desk --out fig2a.csv
    ampi --config my.json --format json --threads 4

Exit codes: 0 success, 2 invalid configuration, 3 I/O failure, 4 every
Monte-Carlo trial failed.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from importlib import resources

from ampi.experiments import COLUMNS, ConfigError, parse_config, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_ALL_FAILED = 0, 2, 3, 4


def preset_names():
    return sorted(p.name[:-5] for p in resources.files("ampi.presets").iterdir() if p.name.endswith(".json"))


def preset_text(name):
    path = resources.files("ampi.presets") / f"{name}.json"
    if not path.is_file():
        raise ConfigError(f"unknown preset {name!r} (available: {', '.join(preset_names())})")
    return path.read_text()


def format_value(v):
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return format(v, ".9g")
    return str(v)


def _json_value(v):
    if isinstance(v, float) and not math.isfinite(v):
        return format_value(v)
    return v


def _from_json_value(v):
    if v in ("nan", "inf", "-inf"):
        return float(v)
    return v


class CsvWriter:
    """Writes the header at once and each row as it arrives."""

    def __init__(self, stream):
        self.stream = stream
        self.writer = csv.writer(stream, lineterminator="\n")
        self.writer.writerow(COLUMNS)
        stream.flush()

    def __call__(self, row):
        self.writer.writerow([format_value(row[c]) for c in COLUMNS])
        self.stream.flush()


def emit(rows, fmt, stream):
    """Write a complete table as CSV or JSON to an open text stream."""
    if fmt == "csv":
        w = CsvWriter(stream)
        for row in rows:
            w(row)
    elif fmt == "json":
        doc = {"columns": COLUMNS, "rows": [{c: _json_value(r[c]) for c in COLUMNS} for r in rows]}
        json.dump(doc, stream, indent=1)
        stream.write("\n")
    else:
        raise ValueError(f"unknown format {fmt!r}")


def read_table(stream, fmt):
    """Inverse of :func:`emit` (values come back as the emitted numbers)."""
    if fmt == "json":
        doc = json.load(stream)
        return [{c: _from_json_value(r[c]) for c in COLUMNS} for r in doc["rows"]]
    reader = csv.DictReader(stream)
    rows = []
    text_cols = {"experiment", "algorithm", "metric_name"}
    int_cols = {"n", "m", "trials", "failures"}
    for rec in reader:
        row = {}
        for c in COLUMNS:
            v = rec[c]
            row[c] = v if c in text_cols else (int(v) if c in int_cols else float(v))
        rows.append(row)
    return rows


def build_parser():
    p = argparse.ArgumentParser(prog="ampi", description="Run AMPI Monte-Carlo and state-evolution experiments.")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", metavar="PATH", help="JSON experiment configuration")
    src.add_argument("--preset", metavar="NAME", help="bundled configuration (e.g. fig2a-desk)")
    p.add_argument("--seed", type=int, help="override the configured master seed")
    p.add_argument("--trials", type=int, help="override the configured trial count")
    p.add_argument("--threads", type=int, default=1, help="worker processes for the trials (default 1)")
    p.add_argument("--out", metavar="PATH", help="output file (default: config 'output', else stdout)")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--timing", action="store_true", help="fill the seconds column with wall time")
    p.add_argument("--linear-rsnr", action="store_true", help="average RSNR over trials in the linear domain")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.preset:
            text = preset_text(args.preset)
        else:
            try:
                with open(args.config, encoding="utf-8") as fh:
                    text = fh.read()
            except OSError as exc:
                print(f"error: cannot read config: {exc}", file=sys.stderr)
                return EXIT_IO
        cfg = parse_config(text)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be nonnegative")
            cfg.seed = args.seed
        if args.trials is not None:
            if args.trials < 1:
                raise ConfigError("--trials must be positive")
            cfg.trials = args.trials
        if args.threads < 1:
            raise ConfigError("--threads must be positive")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    path = args.out or cfg.output
    try:
        stream = open(path, "w", encoding="utf-8", newline="") if path else sys.stdout
    except OSError as exc:
        print(f"error: cannot open output: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        on_row = CsvWriter(stream) if args.format == "csv" else None
        rows = run_experiment(cfg, threads=args.threads, timing=args.timing, on_row=on_row,
                              linear_rsnr=args.linear_rsnr)
        if args.format == "json":
            emit(rows, "json", stream)
    except OSError as exc:
        print(f"error: write failed: {exc}", file=sys.stderr)
        return EXIT_IO
    finally:
        if stream is not sys.stdout:
            stream.close()
    mc = [r for r in rows if r["algorithm"] not in ("se", "closed-form")]
    if mc and all(r["failures"] == r["trials"] for r in mc):
        print("error: every trial failed", file=sys.stderr)
        return EXIT_ALL_FAILED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
