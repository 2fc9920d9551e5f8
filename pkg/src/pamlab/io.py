"""CSV tables and JSON run manifests with byte-stable formatting."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import subprocess
from pathlib import Path

from . import __version__


def format_value(v):
    """Floats at 17 significant digits (round-trip safe); other values as text."""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return format(v, ".17g")
    if hasattr(v, "item"):  # numpy scalar
        return format_value(v.item())
    return str(v)


def parse_value(s):
    if s in ("true", "false"):
        return s == "true"
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s


def csv_text(columns, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([format_value(row[c]) for c in columns])
    return buf.getvalue()


def read_csv_text(text):
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    return header, [{c: parse_value(v) for c, v in zip(header, rec)} for rec in reader]


def write_csv(path, columns, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = csv_text(columns, rows)
    path.write_text(text)
    return text


def read_csv(path):
    return read_csv_text(Path(path).read_text())


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, float) and not math.isfinite(v):
        return format_value(v)
    if hasattr(v, "item"):
        return _jsonable(v.item())
    return v


def json_text(obj):
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n"


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json_text(obj))


def build_id():
    """Package version plus ``git describe`` of the source tree when available."""
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=here, capture_output=True, text=True, timeout=5, check=True,
        ).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        out = "unknown"
    return f"{__version__}+{out}"


def output_dir(outdir, experiment):
    base = Path(outdir or os.environ.get("PAMLAB_OUTDIR", "pamlab-out"))
    return base / experiment
