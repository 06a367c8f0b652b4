"""CSV datasets, JSON run configs and report writers."""

from __future__ import annotations

import csv
import json
import math
import re
from pathlib import Path

import jsonschema
import numpy as np

from .errors import HnervfError
from .model import ClusteredDataset


class ParseError(HnervfError):
    """The data file cannot be read as the expected CSV."""


class SchemaError(HnervfError):
    """Header or config does not match the expected layout."""


def fmt(x) -> str:
    """Machine-report number format: 17 significant digits."""
    return "%.17g" % x


_XCOL = re.compile(r"^x(\d+)$")
_ZCOL = re.compile(r"^z(\d+)$")


def _numbered(header, pattern, prefix):
    found = sorted((int(mt.group(1)), h) for h in header if (mt := pattern.match(h)))
    nums = [k for k, _ in found]
    if nums != list(range(1, len(nums) + 1)):
        raise SchemaError(f"{prefix} columns must be numbered {prefix}1..{prefix}{len(nums)} without gaps, got {[h for _, h in found]}")
    return [h for _, h in found]


def ingest(path, x_cols=None, z_cols=None) -> ClusteredDataset:
    """Read ``cluster_id,y,x1..xp,z1..zq`` into a dataset.

    Rows are grouped by cluster label in order of first appearance, so a
    cluster split across the file is merged.  ``x_cols``/``z_cols`` override
    the header prefixes.
    """
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise ParseError(f"cannot open {path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        except csv.Error as exc:
            raise ParseError(f"{path}, line 1: {exc}") from None
        for col in ("cluster_id", "y"):
            if col not in header:
                raise SchemaError(f"{path}: missing required column {col!r}")
        xs = list(x_cols) if x_cols is not None else _numbered(header, _XCOL, "x")
        zs = list(z_cols) if z_cols is not None else _numbered(header, _ZCOL, "z")
        if not xs:
            raise SchemaError(f"{path}: no covariate columns (x1, x2, ...)")
        if not zs:
            raise SchemaError(f"{path}: no variance covariate columns (z1, z2, ...); at least z1 is required")
        missing = [c for c in xs + zs if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}")
        pos = {h: k for k, h in enumerate(header)}
        ids, rows = [], []
        cols = ["y"] + xs + zs
        try:
            for rec in reader:
                line = reader.line_num
                if not rec or all(not c.strip() for c in rec):
                    continue
                if len(rec) != len(header):
                    raise ParseError(f"{path}, line {line}: expected {len(header)} fields, got {len(rec)}")
                vals = []
                for c in cols:
                    cell = rec[pos[c]].strip()
                    if cell == "":
                        raise ParseError(f"{path}, line {line}: missing value in column {c!r}")
                    try:
                        v = float(cell)
                    except ValueError:
                        raise ParseError(f"{path}, line {line}: non-numeric value {cell!r} in column {c!r}") from None
                    if not math.isfinite(v):
                        raise ParseError(f"{path}, line {line}: non-finite value in column {c!r}")
                    vals.append(v)
                ids.append(rec[pos["cluster_id"]].strip())
                rows.append(vals)
        except csv.Error as exc:
            raise ParseError(f"{path}, line {reader.line_num}: {exc}") from None
    if not rows:
        raise ParseError(f"{path}: no data rows")
    A = np.array(rows)
    p = len(xs)
    return ClusteredDataset.from_arrays(ids, A[:, 0], A[:, 1 : 1 + p], A[:, 1 + p :])


def write_dataset(data: ClusteredDataset, path) -> None:
    header = ["cluster_id", "y"] + [f"x{k + 1}" for k in range(data.p)] + [f"z{k + 1}" for k in range(data.q)]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for c in data.clusters:
            for j in range(c.n):
                w.writerow([c.id, fmt(c.y[j])] + [fmt(v) for v in c.X[j]] + [fmt(v) for v in c.Z[j]])


# ---------------------------------------------------------------- config

_NUM = {"type": "number"}
_VEC = {"type": "array", "items": _NUM}

FIT_OPTIONS_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "gamma_init": {"oneOf": [{"const": "auto"}, _VEC]},
        "max_newton_iters": {"type": "integer", "minimum": 1},
        "newton_tol": {"type": "number", "exclusiveMinimum": 0},
        "tau2_truncation": {"type": "boolean"},
        "formulas": {"enum": ["printed", "derived"]},
        "kurtosis_coef": {"enum": ["exact", "printed"]},
    },
}

STUDY_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "kind": {"enum": ["eblup_mse", "mse_estimator"]},
        "distributions": {"type": "array", "items": {"enum": ["M1", "M2", "M3", "M4", "M5"]}, "minItems": 1},
        "R": {"type": "integer", "minimum": 1},
        "R_mse": {"type": "integer", "minimum": 1},
        "R_est": {"type": "integer", "minimum": 1},
        "m": {"type": "integer", "minimum": 2},
        "sizes": {"oneOf": [{"type": "integer", "minimum": 1}, {"type": "array", "items": {"type": "integer", "minimum": 1}}]},
        "beta": {**_VEC, "minItems": 2, "maxItems": 2},
        "gamma": {**_VEC, "minItems": 2, "maxItems": 2},
        "tau": {"type": "number", "exclusiveMinimum": 0},
        "x_range": {**_VEC, "minItems": 2, "maxItems": 2},
        "z_range": {**_VEC, "minItems": 2, "maxItems": 2},
    },
}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "variance_function": {"enum": ["exponential", "quadratic"]},
        "fit": FIT_OPTIONS_SCHEMA,
        "targets": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["cluster_id"],
                "properties": {"cluster_id": {"type": ["string", "integer"]}, "c": _VEC},
            },
        },
        "study": STUDY_SCHEMA,
        "seed": {"type": "integer", "minimum": 0},
        "outputs": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "fit": {"type": "string"},
                "predict": {"type": "string"},
                "study": {"type": "string"},
            },
        },
    },
}


class ConfigError(HnervfError):
    """Run config is not valid JSON or violates the schema."""


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with Path(path).open() as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot open config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}, line {exc.lineno}: invalid JSON ({exc.msg})") from None
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(k) for k in exc.absolute_path) or "<root>"
        raise ConfigError(f"config {where}: {exc.message}") from None


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2) + "\n")


def _jsonable(obj):
    """Convert arrays to lists and floats to 17-digit-exact JSON numbers."""
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_rows(path, header, rows) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in r])
