"""Event log and fan snapshot containers plus their on-disk formats.

Event logs are JSON Lines (``{"user", "item", "t", "x"}`` objects) or CSV
with the same columns. Both start with a ``#capture_time=<epoch>`` line.
Fan snapshots are CSV ``user,fans`` preceded by ``#snapshot_time=<epoch>``.
"""

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

# integer run metadata echoed as extra header comments
HEADER_META = ("n_cap", "master_seed", "n_users")

__all__ = ["EventLog", "FanSnapshot", "CohortWindow", "write_event_log", "write_fan_snapshot"]


def _as_id_array(values):
    arr = np.asarray(values)
    if arr.dtype.kind in "iu":
        return arr.astype(np.int64, copy=False)
    if arr.size == 0:
        return np.empty(0, dtype=np.int64)
    return np.asarray(values, dtype=object)


@dataclass(eq=False)
class EventLog:
    """Flat submission records sorted by user then timestamp.

    ``fans`` (fan count at submission time) is only populated by the
    simulator and is not part of the wire format. ``meta`` carries run
    metadata such as the contribution cap.
    """

    user: np.ndarray
    item: np.ndarray
    t: np.ndarray
    x: np.ndarray
    capture_time: int
    fans: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.user = _as_id_array(self.user)
        self.item = _as_id_array(self.item)
        self.t = np.asarray(self.t, dtype=np.int64)
        self.x = np.asarray(self.x, dtype=np.float64)
        self.capture_time = int(self.capture_time)
        n = len(self.t)
        if not (len(self.user) == len(self.item) == len(self.x) == n):
            raise ValueError("record columns have different lengths")
        if self.fans is not None:
            self.fans = np.asarray(self.fans, dtype=np.int64)
            if len(self.fans) != n:
                raise ValueError("fans column has the wrong length")

    @classmethod
    def empty(cls, capture_time, **meta):
        z = np.empty(0, dtype=np.int64)
        return cls(z, z.copy(), z.copy(), np.empty(0), capture_time, meta=dict(meta))

    def __len__(self):
        return len(self.t)

    def is_sorted(self):
        if len(self) < 2:
            return True
        u0, u1 = self.user[:-1], self.user[1:]
        same = u0 == u1
        return bool(np.all((u0 < u1) | (same & (self.t[:-1] < self.t[1:]))))

    def sorted(self):
        """Copy ordered by (user, t); a no-op view if already ordered."""
        if self.is_sorted():
            return self
        if self.user.dtype == object:
            order = sorted(range(len(self)), key=lambda i: (self.user[i], self.t[i]))
            order = np.asarray(order, dtype=np.int64)
        else:
            order = np.lexsort((self.t, self.user))
        return EventLog(
            self.user[order],
            self.item[order],
            self.t[order],
            self.x[order],
            self.capture_time,
            None if self.fans is None else self.fans[order],
            dict(self.meta),
        )

    def user_bounds(self):
        """``(starts, ends)`` index arrays delimiting each user's records."""
        n = len(self)
        if n == 0:
            z = np.empty(0, dtype=np.int64)
            return z, z
        change = np.flatnonzero(self.user[1:] != self.user[:-1]) + 1
        starts = np.concatenate(([0], change)).astype(np.int64)
        ends = np.concatenate((change, [n])).astype(np.int64)
        return starts, ends

    def users(self):
        starts, _ = self.user_bounds()
        return self.user[starts]

    def same_records(self, other):
        """Field-exact equality of the wire columns and capture time."""
        return (
            self.capture_time == other.capture_time
            and len(self) == len(other)
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.x, other.x)
            and list(self.user) == list(other.user)
            and list(self.item) == list(other.item)
        )

    def validate(self):
        if len(self) and self.t.max() > self.capture_time:
            raise ValueError("record timestamp after capture_time")
        if len(set(self.item.tolist())) != len(self):
            raise ValueError("duplicate item ids")
        if not self.is_sorted():
            raise ValueError("records not ordered by (user, t) or timestamps repeat")
        if np.any(self.x < 0) or not np.all(np.isfinite(self.x)):
            raise ValueError("attention must be finite and nonnegative")


@dataclass
class FanSnapshot:
    entries: dict
    snapshot_time: int

    def fans_of(self, user):
        return self.entries.get(user, 0)


@dataclass(frozen=True)
class CohortWindow:
    """Half-open interval ``[start, end)`` of epoch seconds."""

    start: int
    end: int

    def __post_init__(self):
        if not self.end > self.start:
            raise ValueError(f"window end {self.end} must exceed start {self.start}")


def _num(v):
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def _json_id(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return json.dumps(str(v))


def write_event_log(log, fh, fmt="jsonl"):
    """Write ``log`` to the text stream ``fh`` as ``jsonl`` or ``csv``."""
    fh.write(f"#capture_time={log.capture_time}\n")
    for key in HEADER_META:
        if key in log.meta:
            fh.write(f"#{key}={int(log.meta[key])}\n")
    if fmt == "jsonl":
        for u, i, t, x in zip(log.user.tolist(), log.item.tolist(), log.t.tolist(), log.x.tolist()):
            fh.write(f'{{"user": {_json_id(u)}, "item": {_json_id(i)}, "t": {t}, "x": {_num(x)}}}\n')
    elif fmt == "csv":
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("user", "item", "t", "x"))
        for u, i, t, x in zip(log.user.tolist(), log.item.tolist(), log.t.tolist(), log.x.tolist()):
            writer.writerow((u, i, t, _num(x)))
    else:
        raise ValueError(f"unknown event log format {fmt!r}")


def event_log_text(log, fmt="jsonl"):
    buf = io.StringIO()
    write_event_log(log, buf, fmt)
    return buf.getvalue()


def write_fan_snapshot(snap, fh):
    fh.write(f"#snapshot_time={snap.snapshot_time}\n")
    fh.write("user,fans\n")
    for user, fans in snap.entries.items():
        fh.write(f"{user},{int(fans)}\n")
