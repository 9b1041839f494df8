"""Reading event logs and fan snapshots, and the stopped-user and cohort filters."""

import csv
import io
import json
import logging
import math
import re

import numpy as np

from .eventlog import HEADER_META, CohortWindow, EventLog, FanSnapshot

__all__ = [
    "ParseError",
    "ParseReport",
    "MONTH_SECONDS",
    "parse_event_log",
    "read_event_log",
    "parse_fan_snapshot",
    "read_fan_snapshot",
    "filter_stopped_users",
    "fan_attention_join",
    "JoinRow",
]

logger = logging.getLogger(__name__)

MONTH_SECONDS = 30 * 86_400
MAX_MALFORMED_FRACTION = 0.01

_HEADER = re.compile(r"^#\s*(\w+)\s*=\s*(-?\d+)\s*$")
_INT = re.compile(r"^-?\d+$")


class ParseError(ValueError):
    pass


class ParseReport(list):
    """``(line_number, reason)`` pairs for rejected lines."""

    def __str__(self):
        return "\n".join(f"line {n}: {why}" for n, why in self)


def _lines(stream):
    if isinstance(stream, (bytes, bytearray)):
        stream = io.BytesIO(stream)
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    for raw in stream:
        if isinstance(raw, bytes):
            raw = raw.decode("utf-8")
        yield raw.rstrip("\r\n")


def _id(value, name):
    if isinstance(value, bool) or value is None or isinstance(value, (float, list, dict)):
        raise ValueError(f"{name} must be a string or integer")
    return value


def _row_from_json(line, lineno):
    obj = json.loads(line)
    if not isinstance(obj, dict):
        raise ValueError("not a JSON object")
    missing = [k for k in ("user", "item", "t", "x") if k not in obj]
    if missing:
        raise ValueError(f"missing field(s) {', '.join(missing)}")
    t = obj["t"]
    if isinstance(t, bool) or not isinstance(t, int):
        raise ValueError("t must be an integer")
    x = obj["x"]
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise ValueError("x must be a number")
    return _id(obj["user"], "user"), _id(obj["item"], "item"), t, float(x)


def _csv_id(value):
    return int(value) if _INT.match(value) else value


def parse_event_log(stream, fmt="jsonl", capture_time=None):
    """Parse a JSON Lines or CSV event log.

    Returns ``(log, report)``. Malformed lines (bad syntax, wrong types,
    negative attention, timestamps after capture, duplicate items or
    duplicate ``(user, t)``) are skipped and listed in ``report``; more than
    1% of them aborts with :class:`ParseError`. An explicit ``capture_time``
    overrides the header.
    """
    if fmt not in ("jsonl", "csv"):
        raise ValueError(f"unknown event log format {fmt!r}")
    header_capture = None
    meta = {}
    report = ParseReport()
    rows = []
    seen_items = set()
    seen_times = set()
    data_lines = 0
    columns = None
    for lineno, line in enumerate(_lines(stream), 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            m = _HEADER.match(line)
            if m and m.group(1) == "capture_time":
                header_capture = int(m.group(2))
            elif m and m.group(1) in HEADER_META:
                meta[m.group(1)] = int(m.group(2))
            continue
        if fmt == "csv" and columns is None:
            columns = next(csv.reader([line]))
            if [c.strip() for c in columns] != ["user", "item", "t", "x"]:
                raise ParseError(f"line {lineno}: expected header user,item,t,x")
            continue
        data_lines += 1
        try:
            if fmt == "jsonl":
                user, item, t, x = _row_from_json(line, lineno)
            else:
                fields = next(csv.reader([line]))
                if len(fields) != 4:
                    raise ValueError(f"expected 4 fields, got {len(fields)}")
                if not _INT.match(fields[2]):
                    raise ValueError("t must be an integer")
                user, item, t, x = _csv_id(fields[0]), _csv_id(fields[1]), int(fields[2]), float(fields[3])
            if not math.isfinite(x) or x < 0:
                raise ValueError("x must be finite and nonnegative")
            if item in seen_items:
                raise ValueError(f"duplicate item {item!r}")
            if (user, t) in seen_times:
                raise ValueError(f"duplicate timestamp for user {user!r}")
        except ValueError as exc:
            report.append((lineno, str(exc)))
            continue
        seen_items.add(item)
        seen_times.add((user, t))
        rows.append((user, item, t, x, lineno))

    if capture_time is None:
        capture_time = header_capture
    if capture_time is None:
        raise ParseError("missing capture_time (no header and none supplied)")
    capture_time = int(capture_time)
    kept = []
    for user, item, t, x, lineno in rows:
        if t > capture_time:
            report.append((lineno, f"timestamp {t} after capture_time {capture_time}"))
        else:
            kept.append((user, item, t, x))
    report.sort()
    if data_lines and len(report) > MAX_MALFORMED_FRACTION * data_lines:
        raise ParseError(f"{len(report)} of {data_lines} lines malformed:\n{report}")
    if report:
        logger.warning("skipped %d malformed line(s)", len(report))

    if not kept:
        return EventLog.empty(capture_time, **meta), report
    users = [r[0] for r in kept]
    items = [r[1] for r in kept]
    users = _homogenize(users)
    items = _homogenize(items)
    out = EventLog(
        users,
        items,
        np.fromiter((r[2] for r in kept), dtype=np.int64, count=len(kept)),
        np.fromiter((r[3] for r in kept), dtype=np.float64, count=len(kept)),
        capture_time,
        meta=meta,
    )
    return out.sorted(), report


def _homogenize(ids):
    if all(isinstance(v, int) for v in ids):
        return np.asarray(ids, dtype=np.int64)
    arr = np.empty(len(ids), dtype=object)
    arr[:] = [str(v) for v in ids]
    return arr


def read_event_log(path, fmt=None, capture_time=None):
    if fmt is None:
        fmt = "csv" if str(path).endswith(".csv") else "jsonl"
    with open(path, "rb") as fh:
        return parse_event_log(fh, fmt, capture_time)


def parse_fan_snapshot(stream):
    snapshot_time = None
    entries = {}
    header_seen = False
    for lineno, line in enumerate(_lines(stream), 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            m = _HEADER.match(line)
            if m and m.group(1) == "snapshot_time":
                snapshot_time = int(m.group(2))
            continue
        if not header_seen:
            if [c.strip() for c in line.split(",")] != ["user", "fans"]:
                raise ParseError(f"line {lineno}: expected header user,fans")
            header_seen = True
            continue
        fields = next(csv.reader([line]))
        if len(fields) != 2 or not _INT.match(fields[1]) or int(fields[1]) < 0:
            raise ParseError(f"line {lineno}: expected user,<nonnegative int>")
        entries[_csv_id(fields[0])] = int(fields[1])
    if snapshot_time is None:
        raise ParseError("missing #snapshot_time header")
    return FanSnapshot(entries, snapshot_time)


def read_fan_snapshot(path):
    with open(path, "rb") as fh:
        return parse_fan_snapshot(fh)


def _py(v):
    return v.item() if hasattr(v, "item") else v


def filter_stopped_users(log, T_seconds):
    """Users whose latest record is at or before ``capture_time - T_seconds``."""
    if T_seconds <= 0:
        raise ValueError("T_seconds must be positive")
    if not len(log):
        return set()
    log = log.sorted()
    starts, ends = log.user_bounds()
    last = log.t[ends - 1]
    users = log.user[starts]
    return {_py(u) for u in users[last <= log.capture_time - T_seconds]}


class JoinRow(tuple):
    __slots__ = ()

    def __new__(cls, user, past_productivity, fans, attentions):
        return super().__new__(cls, (user, past_productivity, fans, attentions))

    user = property(lambda self: self[0])
    past_productivity = property(lambda self: self[1])
    fans = property(lambda self: self[2])
    attentions = property(lambda self: self[3])


def fan_attention_join(log, snap, window, exclude=None):
    """Join snapshot fan counts to what each user submitted in ``window``.

    One row per user with at least one record in ``[window.start,
    window.end)``: past productivity (records before the window), fans at
    the snapshot (0 if absent) and the in-window attention values in time
    order. ``exclude`` drops the listed users.
    """
    if not isinstance(window, CohortWindow):
        window = CohortWindow(*window)
    if snap.snapshot_time > window.start:
        raise ValueError("snapshot must be taken at or before the window start")
    log = log.sorted()
    if not len(log) or window.end <= log.t.min() or window.start > log.t.max():
        logger.warning("cohort window lies outside the log's time span")
        return []
    excluded = set(exclude or ())
    starts, ends = log.user_bounds()
    rows = []
    for s, e in zip(starts.tolist(), ends.tolist()):
        ts = log.t[s:e]
        lo = int(np.searchsorted(ts, window.start, side="left"))
        hi = int(np.searchsorted(ts, window.end, side="left"))
        if hi == lo:
            continue
        user = _py(log.user[s])
        if user in excluded:
            continue
        rows.append(JoinRow(user, lo, snap.fans_of(user), log.x[s + lo:s + hi].tolist()))
    return rows
