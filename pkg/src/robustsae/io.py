"""Reading and writing area-level tables and run configurations.

Input tables are UTF-8 CSV with a mandatory header ``area_id, y, d, x1 .. xp``
and an optional ``group`` column. No intercept is added: include a column of
ones (``x1 = 1``) if the model needs one. Numbers are written with 17
significant digits so that a written table reads back to identical floats.
"""
from __future__ import annotations

import csv
import json
import math
import os
import re
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .model import Dataset

__all__ = [
    "InputError",
    "RunConfig",
    "read_input_table",
    "write_input_table",
    "write_table",
    "format_number",
    "load_config",
    "default_threads",
    "THREADS_ENV",
]

THREADS_ENV = "ROBUSTSAE_THREADS"
_XCOL = re.compile(r"^x(\d+)$")


class InputError(ValueError):
    """Malformed input file or configuration (carries a line number when known)."""

    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.line = line


def format_number(v) -> str:
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def _parse_float(text, name, path, line):
    try:
        v = float(text)
    except ValueError:
        raise InputError(f"column {name!r}: cannot parse {text!r} as a number", path, line) from None
    if not math.isfinite(v):
        raise InputError(f"column {name!r}: non-finite value {text!r}", path, line)
    return v


def read_input_table(path) -> Dataset:
    """Parse an input CSV into a :class:`Dataset`.

    Raises
    ------
    InputError
        Empty file, bad header, ragged rows, missing or non-numeric values,
        non-positive ``d``, or a design the model cannot use.
    """
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot open: {exc.strerror}", path) from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or not any(h.strip() for h in header):
            raise InputError("empty file (a header row is required)", path, 1)
        header = [h.strip() for h in header]
        for req in ("area_id", "y", "d"):
            if req not in header:
                raise InputError(f"missing required column {req!r}", path, 1)
        if len(set(header)) != len(header):
            raise InputError("duplicate column names", path, 1)
        xcols = sorted((int(_XCOL.match(h).group(1)), h) for h in header if _XCOL.match(h))
        if not xcols:
            raise InputError("no covariate columns (x1 .. xp)", path, 1)
        if [i for i, _ in xcols] != list(range(1, len(xcols) + 1)):
            raise InputError("covariate columns must be x1 .. xp without gaps", path, 1)
        extra = set(header) - {"area_id", "y", "d", "group"} - {h for _, h in xcols}
        if extra:
            raise InputError(f"unexpected columns {sorted(extra)}", path, 1)
        pos = {h: k for k, h in enumerate(header)}
        ids, ys, ds, xs, groups = [], [], [], [], []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise InputError(f"expected {len(header)} fields, found {len(row)}", path, line)
            cells = [c.strip() for c in row]
            for h, c in zip(header, cells):
                if c == "":
                    raise InputError(f"missing value in column {h!r}", path, line)
            d = _parse_float(cells[pos["d"]], "d", path, line)
            if d <= 0:
                raise InputError(f"sampling variance d must be positive, got {d}", path, line)
            ids.append(cells[pos["area_id"]])
            ys.append(_parse_float(cells[pos["y"]], "y", path, line))
            ds.append(d)
            xs.append([_parse_float(cells[pos[h]], h, path, line) for _, h in xcols])
            if "group" in pos:
                groups.append(cells[pos["group"]])
    if not ids:
        raise InputError("no data rows", path)
    if len(set(ids)) != len(ids):
        raise InputError("area_id values are not unique", path)
    try:
        return Dataset(ys, np.array(xs), ds, area_ids=ids, groups=np.array(groups) if groups else None)
    except ValueError as exc:
        raise InputError(str(exc), path) from None


def write_input_table(path, data: Dataset) -> None:
    """Write ``data`` in the input format (inverse of :func:`read_input_table`)."""
    cols = {"area_id": list(data.area_ids), "y": data.y, "d": data.d}
    for j in range(data.p):
        cols[f"x{j + 1}"] = data.x[:, j]
    if data.groups is not None:
        cols["group"] = data.groups
    write_table(path, cols)


def write_table(path, columns: dict) -> None:
    """Write equal-length columns to CSV in the given order."""
    names = list(columns)
    n = {len(v) for v in columns.values()}
    if len(n) > 1:
        raise ValueError("columns differ in length")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in zip(*(columns[k] for k in names)):
            w.writerow([format_number(v) for v in row])


def default_threads() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise InputError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n < 1 and n != -1:
        raise InputError(f"{THREADS_ENV} must be positive or -1")
    return n


@dataclass
class RunConfig:
    """Settings shared by the command-line commands.

    Values come from a YAML file and are overridden by explicit flags.
    DPD commands take exactly one of ``alpha`` and ``c_percent``.
    """

    input: Optional[str] = None
    output: Optional[str] = None
    method: Optional[str] = None
    alpha: Optional[float] = None
    c_percent: Optional[float] = None
    k: float = 1.345
    b: int = 500
    variant: str = "bootstrap"
    g5_method: str = "analytic"
    seed: Optional[int] = None
    threads: Optional[int] = None
    tol: float = 1e-8
    max_iter: int = 500
    a_floor: float = 1e-8
    params: Optional[str] = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_mapping(cls, mapping: dict, source=None) -> "RunConfig":
        known = {f.name for f in fields(cls)} - {"extra"}
        kw = {k.replace("-", "_"): v for k, v in mapping.items()}
        extra = {k: v for k, v in kw.items() if k not in known}
        cfg = cls(**{k: v for k, v in kw.items() if k in known}, extra=extra)
        cfg._coerce(source)
        return cfg

    def _coerce(self, source=None):
        conv = {"alpha": float, "c_percent": float, "k": float, "b": int, "seed": int, "threads": int,
                "tol": float, "max_iter": int, "a_floor": float}
        for name, fn in conv.items():
            v = getattr(self, name)
            if v is not None:
                try:
                    setattr(self, name, fn(v))
                except (TypeError, ValueError):
                    raise InputError(f"config value {name!r}={v!r} is not a valid {fn.__name__}", source) from None

    def merged(self, overrides: dict) -> "RunConfig":
        data = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "extra"}
        data.update({k: v for k, v in overrides.items() if v is not None})
        out = RunConfig(**data, extra=dict(self.extra))
        out._coerce()
        return out

    def require_one_alpha(self):
        if (self.alpha is None) == (self.c_percent is None):
            raise InputError("supply exactly one of alpha and c_percent")

    def to_json(self) -> str:
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        return json.dumps(data, sort_keys=True, default=str)


def load_config(path) -> dict:
    """Read a YAML mapping; an empty file gives ``{}``."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot open: {exc.strerror}", path) from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise InputError(f"invalid YAML: {getattr(exc, 'problem', exc)}", path, None if mark is None else mark.line + 1) from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise InputError("config must be a mapping", path)
    return data
