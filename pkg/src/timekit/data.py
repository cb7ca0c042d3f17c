"""Interaction logs and their partition into calendar-month periods."""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class InteractionLog:
    users: np.ndarray
    items: np.ndarray
    timestamps: np.ndarray
    user_ids: tuple[str, ...]
    item_ids: tuple[str, ...]

    @property
    def num_users(self) -> int:
        return len(self.user_ids)

    @property
    def num_items(self) -> int:
        return len(self.item_ids)

    def __len__(self) -> int:
        return len(self.users)


@dataclass(frozen=True)
class Period:
    users: np.ndarray
    items: np.ndarray
    timestamps: np.ndarray
    boundary: int  # t_i, inclusive upper edge, seconds since epoch

    def __len__(self) -> int:
        return len(self.users)


@dataclass(frozen=True)
class PeriodedDataset:
    periods: tuple[Period, ...]
    num_users: int
    num_items: int
    user_ids: tuple[str, ...] = field(default=(), repr=False)
    item_ids: tuple[str, ...] = field(default=(), repr=False)

    @property
    def boundaries(self) -> list[int]:
        return [p.boundary for p in self.periods]

    @property
    def num_periods(self) -> int:
        return len(self.periods)

    def drop_leading(self, fraction: float) -> "PeriodedDataset":
        """Remove the earliest ``fraction`` of periods (rounded down)."""
        if not 0.0 <= fraction < 1.0:
            raise DataError(f"drop_leading_fraction must be in [0, 1), got {fraction}")
        k = int(np.floor(fraction * self.num_periods + 1e-9))
        kept = self.periods[k:]
        if len(kept) < 3:
            raise DataError(f"fewer than 3 periods remain after dropping {k}")
        return PeriodedDataset(kept, self.num_users, self.num_items, self.user_ids, self.item_ids)


def _split(line: str, delim: str) -> list[str]:
    return [f.strip() for f in line.split(delim)]


def _is_int(s: str) -> bool:
    try:
        int(s)
    except ValueError:
        return False
    return True


def ingest_interactions(stream) -> InteractionLog:
    """Parse ``user,item,timestamp`` records into a compacted log.

    ``stream`` may be a path, a text stream, or a binary stream of UTF-8.
    The delimiter (tab or comma) is detected from the first line.  A header
    is recognised by a non-numeric timestamp field on the first line.
    Identifiers are mapped to dense indices in order of first appearance.
    """
    if isinstance(stream, (str, Path)):
        with open(stream, "rb") as fh:
            return ingest_interactions(fh)
    raw = stream.read()
    text = raw.decode("utf-8") if isinstance(raw, bytes) else raw
    lines = io.StringIO(text).read().splitlines()

    first = next((ln for ln in lines if ln.strip()), None)
    if first is None:
        raise DataError("empty interaction stream")
    delim = "\t" if "\t" in first else ","

    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    users, items, stamps = [], [], []
    seen_record = False
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        fields = _split(line, delim)
        if not seen_record:
            seen_record = True
            if len(fields) == 3 and not _is_int(fields[0]) and not _is_int(fields[2]):
                continue  # header
        if len(fields) != 3:
            raise DataError(f"line {lineno}: expected 3 fields, got {len(fields)}")
        u, v, ts = fields
        if not _is_int(ts):
            raise DataError(f"line {lineno}: timestamp {ts!r} is not an integer")
        ts = int(ts)
        if ts < 0:
            raise DataError(f"line {lineno}: negative timestamp {ts}")
        users.append(user_index.setdefault(u, len(user_index)))
        items.append(item_index.setdefault(v, len(item_index)))
        stamps.append(ts)
    if not users:
        raise DataError("no interaction records in stream")
    return InteractionLog(
        np.array(users, dtype=np.int64),
        np.array(items, dtype=np.int64),
        np.array(stamps, dtype=np.int64),
        tuple(user_index),
        tuple(item_index),
    )


def write_index_maps(log: InteractionLog, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, ids in (("user_index.csv", log.user_ids), ("item_index.csv", log.item_ids)):
        with open(directory / name, "w", encoding="utf-8") as fh:
            fh.write("original_id,index\n")
            for i, orig in enumerate(ids):
                fh.write(f"{orig},{i}\n")


def read_index_map(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        next(fh)
        rows = [ln.rstrip("\n").rsplit(",", 1) for ln in fh if ln.strip()]
    ids = [""] * len(rows)
    for orig, idx in rows:
        ids[int(idx)] = orig
    return ids


def _month_index(ts: np.ndarray) -> np.ndarray:
    """Month number (years*12 + month) of the interval (edge_m, edge_m+1] holding ts."""
    shifted = ts - 1
    months = shifted.astype("datetime64[s]").astype("datetime64[M]")
    return months.astype(np.int64)


def _month_edge(month: int) -> int:
    """Seconds since epoch of the first instant of the given month number."""
    return int(np.datetime64(int(month), "M").astype("datetime64[s]").astype(np.int64))


def dedup_records(log: InteractionLog) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Drop exact duplicate (user, item, timestamp) records, sorted by time."""
    rec = np.stack([log.timestamps, log.users, log.items], axis=1)
    rec = np.unique(rec, axis=0)
    return rec[:, 1], rec[:, 2], rec[:, 0]


def partition_periods(log: InteractionLog, granularity: int = 1, min_periods: int = 3) -> PeriodedDataset:
    """Split a log into periods of ``granularity`` calendar months (UTC).

    Period i covers the half-open interval (t_{i-1}, t_i]; an interaction
    stamped exactly on a month edge belongs to the earlier period.  Empty
    periods are kept.
    """
    if granularity < 1:
        raise DataError(f"granularity must be >= 1, got {granularity}")
    if len(log) == 0:
        raise DataError("cannot partition an empty log")
    users, items, stamps = dedup_records(log)
    month = _month_index(stamps)
    first = int(month.min())
    pidx = (month - first) // granularity
    n = int(pidx.max()) + 1
    if n < min_periods:
        raise DataError(f"fewer than {min_periods} periods ({n}) at granularity {granularity}")
    periods = []
    for i in range(n):
        mask = pidx == i
        boundary = _month_edge(first + granularity * (i + 1))
        periods.append(Period(users[mask], items[mask], stamps[mask], boundary))
    return PeriodedDataset(tuple(periods), log.num_users, log.num_items, log.user_ids, log.item_ids)


def cumulative_interactions(dataset: PeriodedDataset, i: int) -> tuple[np.ndarray, np.ndarray]:
    """Unique (user, item) pairs over periods 1..i (1-based), sorted."""
    if not 1 <= i <= dataset.num_periods:
        raise IndexError(f"period index {i} outside 1..{dataset.num_periods}")
    users = np.concatenate([p.users for p in dataset.periods[:i]])
    items = np.concatenate([p.items for p in dataset.periods[:i]])
    code = np.unique(users * dataset.num_items + items)
    return code // dataset.num_items, code % dataset.num_items


def period_items_by_user(period: Period, num_users: int) -> list[set[int]]:
    out: list[set[int]] = [set() for _ in range(num_users)]
    for u, v in zip(period.users.tolist(), period.items.tolist()):
        out[u].add(v)
    return out


def utc(ts: int) -> datetime:
    return datetime.fromtimestamp(ts, tz=timezone.utc)
