"""CSV/JSON formats used by the command-line tools.

Input tables: UTF-8 CSV with a header row, ``unit_id`` first, numeric
covariates after it, ``.`` as the decimal separator.

Allocation output: ``unit_id,arm,order_index`` with arm 1 <-> T_i = 1 and
arm 2 <-> T_i = 0, plus a JSON sidecar.
"""

from __future__ import annotations

import csv
import json
import math
import os
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .errors import BalancerError
from .model import Allocation, UnitTable

SCHEMA_VERSION = 1
ARM_MAPPING = {"1": "T_i = 1 (first treatment)", "2": "T_i = 0 (second treatment)"}


class InputFormatError(BalancerError):
    pass


def read_units_csv(path) -> UnitTable:
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise InputFormatError(f"{path}: cannot open ({exc.strerror})") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InputFormatError(f"{path}: file is empty") from None
        except (csv.Error, UnicodeDecodeError) as exc:
            raise InputFormatError(f"{path}, line 1: {exc}") from None
        header = [h.strip() for h in header]
        if len(header) < 2 or header[0] != "unit_id":
            raise InputFormatError(f"{path}, line 1: header must start with 'unit_id' followed by covariate names")
        ids, rows = [], []
        try:
            for row in reader:
                line = reader.line_num
                if not row or all(not c.strip() for c in row):
                    continue
                if len(row) != len(header):
                    raise InputFormatError(f"{path}, line {line}: expected {len(header)} fields, found {len(row)}")
                vals = []
                for col, cell in zip(header[1:], row[1:]):
                    try:
                        v = float(cell)
                    except ValueError:
                        raise InputFormatError(
                            f"{path}, line {line}, column '{col}': cannot parse {cell!r} as a number"
                        ) from None
                    if not math.isfinite(v):
                        raise InputFormatError(f"{path}, line {line}, column '{col}': value {cell!r} is not finite")
                    vals.append(v)
                ids.append(row[0])
                rows.append(vals)
        except (csv.Error, UnicodeDecodeError) as exc:
            raise InputFormatError(f"{path}, line {reader.line_num}: {exc}") from None
    if len(rows) < 2:
        raise InputFormatError(f"{path}: need at least two units, found {len(rows)}")
    if len(set(ids)) != len(ids):
        raise InputFormatError(f"{path}: unit_id values are not unique")
    return UnitTable(ids=tuple(ids), X=np.array(rows), columns=tuple(header[1:]))


def write_units_csv(path, table: UnitTable) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("unit_id",) + table.columns)
        for uid, row in zip(table.ids, table.X):
            w.writerow([uid] + [repr(float(v)) for v in row])


def write_allocation_csv(path, table: UnitTable, alloc: Allocation) -> None:
    pos = alloc.order_index()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("unit_id", "arm", "order_index"))
        for i, uid in enumerate(table.ids):
            w.writerow((uid, int(alloc.arms[i]), int(pos[i])))


def read_allocation_csv(path, table: UnitTable, method: str = "unknown") -> Allocation:
    """Read an allocation back, aligned to ``table``'s unit order."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or list(reader.fieldnames)[:3] != ["unit_id", "arm", "order_index"]:
            raise InputFormatError(f"{path}: header must be unit_id,arm,order_index")
        by_id = {}
        for row in reader:
            try:
                by_id[row["unit_id"]] = (int(row["arm"]), int(row["order_index"]))
            except (TypeError, ValueError):
                raise InputFormatError(f"{path}, line {reader.line_num}: malformed arm or order_index") from None
    missing = [u for u in table.ids if u not in by_id]
    if missing:
        raise InputFormatError(f"{path}: no allocation for unit {missing[0]!r}")
    arms = np.array([by_id[u][0] for u in table.ids])
    pos = np.array([by_id[u][1] for u in table.ids])
    order = np.argsort(pos, kind="stable")
    return Allocation(arms=arms, method=method, order=order)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def write_json(path, payload: dict) -> None:
    payload = {"schema_version": SCHEMA_VERSION, **payload,
               "created": datetime.now(timezone.utc).isoformat(timespec="seconds")}
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(payload), fh, indent=2, sort_keys=False)
        fh.write("\n")
    os.replace(tmp, path)


def read_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
