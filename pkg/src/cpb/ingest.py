"""DShield-style log ingestion, /24 reduction, contributor selection and windows.

Events are held column-wise in an :class:`EventLog` (numpy arrays with an
event-multiplicity column), so a 15-day, 70-organization corpus of a few
million alerts stays cheap to slice into sliding train/test windows.

Days are integer UTC day numbers (days since 1970-01-01).
"""

from __future__ import annotations

import datetime as dt
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, DataError, MalformedLine

log = logging.getLogger(__name__)

EPOCH = dt.date(1970, 1, 1)

# (network, prefix length) pairs that never reach the pipeline. All are /16 or
# wider, so testing the /24 prefix is equivalent to testing the address.
NON_ROUTABLE = (
    ("0.0.0.0", 8),
    ("10.0.0.0", 8),
    ("127.0.0.0", 8),
    ("169.254.0.0", 16),
    ("172.16.0.0", 12),
    ("192.168.0.0", 16),
    ("224.0.0.0", 4),  # multicast
    ("240.0.0.0", 4),  # reserved, includes broadcast
)


def _net24(addr: str, length: int) -> tuple[int, int]:
    a, b, c, d = (int(x) for x in addr.split("."))
    start = (a << 16) | (b << 8) | c
    return start, start + (1 << (24 - length))


_NON_ROUTABLE_24 = tuple(_net24(a, n) for a, n in NON_ROUTABLE)


def is_routable(prefix):
    """True where the /24 prefix (int or array) is outside every excluded range."""
    p = np.asarray(prefix, dtype=np.int64)
    bad = np.zeros(p.shape, dtype=bool)
    for lo, hi in _NON_ROUTABLE_24:
        bad |= (p >= lo) & (p < hi)
    if bad.ndim == 0:
        return not bool(bad)
    return ~bad


def parse_ipv4(text: str) -> int | None:
    """Dotted quad to a 32-bit int. Leading zeros are accepted (DShield pads octets)."""
    parts = text.strip().split(".")
    if len(parts) != 4:
        return None
    value = 0
    for part in parts:
        if not part.isdigit() or len(part) > 3:
            return None
        octet = int(part)
        if octet > 255:
            return None
        value = (value << 8) | octet
    return value


def prefix_of(ip: str) -> int | None:
    """The /24 prefix of ``ip`` as a 24-bit int, or None when invalid/non-routable."""
    addr = parse_ipv4(ip)
    if addr is None:
        return None
    prefix = addr >> 8
    for lo, hi in _NON_ROUTABLE_24:
        if lo <= prefix < hi:
            return None
    return prefix


def format_prefix(prefix: int) -> str:
    prefix = int(prefix)
    return f"{prefix >> 16}.{(prefix >> 8) & 0xFF}.{prefix & 0xFF}.0"


def parse_prefix(text: str) -> int:
    addr = parse_ipv4(text)
    if addr is None or addr & 0xFF:
        raise ValueError(f"not a /24 network address: {text!r}")
    return addr >> 8


def day_of(date: dt.date) -> int:
    return (date - EPOCH).days


def date_of(day: int) -> dt.date:
    return EPOCH + dt.timedelta(days=int(day))


class AlertEvent(NamedTuple):
    org: str
    prefix: int
    day: int


_STAMP = re.compile(r"\d{4}-\d{2}-\d{2} \d{2}:\d{2}:\d{2}$")


def parse_dshield_line(line: str, sep: str = "\t") -> AlertEvent | None:
    """Parse one log line into an :class:`AlertEvent`.

    Returns None for lines whose source address is invalid or non-routable.
    Raises :class:`MalformedLine` for a short line or a bad timestamp.
    """
    fields = [f.strip() for f in line.rstrip("\r\n").split(sep)]
    if len(fields) < 5:
        raise MalformedLine(f"expected 5 fields, got {len(fields)}: {line!r}")
    org, source, _sport, _dport, stamp = fields[:5]
    if not _STAMP.match(stamp):
        raise MalformedLine(f"bad timestamp {stamp!r}")
    try:
        when = dt.datetime.fromisoformat(stamp)
    except ValueError as exc:
        raise MalformedLine(f"bad timestamp {stamp!r}") from exc
    if not org:
        raise MalformedLine(f"empty contributor id: {line!r}")
    prefix = prefix_of(source)
    if prefix is None:
        return None
    return AlertEvent(org, prefix, day_of(when.date()))


@dataclass
class ParseStats:
    lines: int = 0
    events: int = 0
    skipped: int = 0
    malformed: int = 0
    errors: list[str] = field(default_factory=list)


@dataclass
class EventLog:
    """Column store of alert events.

    ``org`` indexes into ``orgs``; ``count`` is the number of identical
    (org, prefix, day) events a row stands for.
    """

    orgs: tuple[str, ...]
    org: np.ndarray
    prefix: np.ndarray
    day: np.ndarray
    count: np.ndarray

    def __post_init__(self):
        self.org = np.asarray(self.org, dtype=np.int32)
        self.prefix = np.asarray(self.prefix, dtype=np.uint32)
        self.day = np.asarray(self.day, dtype=np.int32)
        self.count = np.asarray(self.count, dtype=np.int64)

    def __len__(self) -> int:
        return int(self.count.sum())

    @classmethod
    def from_events(cls, events: Iterable[AlertEvent]) -> "EventLog":
        index: dict[str, int] = {}
        org, prefix, day = [], [], []
        for ev in events:
            org.append(index.setdefault(ev.org, len(index)))
            prefix.append(ev.prefix)
            day.append(ev.day)
        ones = np.ones(len(org), dtype=np.int64)
        return cls(tuple(index), org, prefix, day, ones).aggregated()

    def aggregated(self) -> "EventLog":
        """Merge rows with equal (org, prefix, day); rows sorted by that key."""
        if len(self.org) == 0:
            return self
        key = (self.org.astype(np.int64) << 40) | (self.prefix.astype(np.int64) << 16) | (
            self.day.astype(np.int64) & 0xFFFF
        )
        uniq, inv = np.unique(key, return_inverse=True)
        counts = np.bincount(inv, weights=self.count, minlength=len(uniq)).astype(np.int64)
        first = np.zeros(len(uniq), dtype=np.int64)
        first[inv[::-1]] = np.arange(len(inv))[::-1]
        return EventLog(self.orgs, self.org[first], self.prefix[first], self.day[first], counts)

    @property
    def days(self) -> tuple[int, ...]:
        if len(self.day) == 0:
            return ()
        return tuple(range(int(self.day.min()), int(self.day.max()) + 1))

    def restrict(self, orgs: Sequence[str]) -> "EventLog":
        """Keep only ``orgs``, re-indexed in the given order."""
        lookup = {o: i for i, o in enumerate(self.orgs)}
        missing = [o for o in orgs if o not in lookup]
        if missing:
            raise DataError(f"unknown organizations: {missing[:5]}")
        remap = np.full(len(self.orgs), -1, dtype=np.int32)
        for new, o in enumerate(orgs):
            remap[lookup[o]] = new
        new_org = remap[self.org]
        keep = new_org >= 0
        return EventLog(tuple(orgs), new_org[keep], self.prefix[keep], self.day[keep], self.count[keep])

    def events(self) -> Iterator[AlertEvent]:
        """Expand to individual events (slow; for small logs and tests)."""
        for o, p, d, c in zip(self.org, self.prefix, self.day, self.count):
            ev = AlertEvent(self.orgs[o], int(p), int(d))
            for _ in range(int(c)):
                yield ev


def parse_dshield(lines: Iterable[str], sep: str = "\t", max_errors: int = 20) -> tuple[EventLog, ParseStats]:
    stats = ParseStats()

    def _events():
        for line in lines:
            if not line.strip():
                continue
            stats.lines += 1
            try:
                ev = parse_dshield_line(line, sep)
            except MalformedLine as exc:
                stats.malformed += 1
                if len(stats.errors) < max_errors:
                    stats.errors.append(f"line {stats.lines}: {exc}")
                continue
            if ev is None:
                stats.skipped += 1
                continue
            stats.events += 1
            yield ev

    result = EventLog.from_events(_events())
    if stats.malformed:
        log.warning("%d malformed lines skipped", stats.malformed)
    return result, stats


def read_dshield(path: str | Path, sep: str = "\t") -> tuple[EventLog, ParseStats]:
    try:
        with open(path, encoding="utf-8", errors="replace") as fh:
            return parse_dshield(fh, sep)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def write_dshield(ev: EventLog, path: str | Path, seed: int = 0, sep: str = "\t") -> None:
    """Expand events into DShield-style lines (random host byte, ports and time of day)."""
    rng = np.random.default_rng(seed)
    n = int(ev.count.sum())
    rows = np.repeat(np.arange(len(ev.org)), ev.count)
    host = rng.integers(1, 255, n)
    sport = rng.integers(1024, 65536, n)
    dport = rng.choice([22, 23, 80, 443, 445, 3389, 8080], n)
    second = rng.integers(0, 86400, n)
    with open(path, "w", encoding="utf-8") as fh:
        for r, h, sp, dp, sec in zip(rows.tolist(), host.tolist(), sport.tolist(), dport.tolist(), second.tolist()):
            p = int(ev.prefix[r])
            stamp = dt.datetime.combine(date_of(int(ev.day[r])), dt.time()) + dt.timedelta(seconds=sec)
            fh.write(
                f"{ev.orgs[ev.org[r]]}{sep}{p >> 16}.{(p >> 8) & 255}.{p & 255}.{h}{sep}{sp}{sep}{dp}{sep}"
                f"{stamp:%Y-%m-%d %H:%M:%S}\n"
            )


def write_events(ev: EventLog, path: str | Path) -> None:
    """Canonical event file: one ``org,a.b.c.0,day`` line per event."""
    names = {}
    with open(path, "w", encoding="utf-8") as fh:
        for o, p, d, c in zip(ev.org, ev.prefix, ev.day, ev.count):
            p = int(p)
            if p not in names:
                names[p] = format_prefix(p)
            line = f"{ev.orgs[o]},{names[p]},{int(d)}\n"
            fh.write(line * int(c))


def read_events(path: str | Path) -> EventLog:
    index: dict[str, int] = {}
    prefixes: dict[str, int] = {}
    org, prefix, day = [], [], []
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                o, p, d = line.split(",")
                if p not in prefixes:
                    prefixes[p] = parse_prefix(p)
                day.append(int(d))
            except ValueError as exc:
                raise DataError(f"{path}:{n}: bad event line {line!r}") from exc
            org.append(index.setdefault(o, len(index)))
            prefix.append(prefixes[p])
    ones = np.ones(len(org), dtype=np.int64)
    return EventLog(tuple(index), org, prefix, day, ones).aggregated()


def select_contributors(
    events: EventLog,
    days: Sequence[int] | None = None,
    top: int = 100,
    drop_top: int = 10,
    drop_bottom: int = 20,
) -> list[str]:
    """Pick the mid-sized daily contributors.

    Organizations must report on every day in ``days``. They are ranked by the
    number of distinct attacker /24s reported (ties: lexicographic id); of the
    first ``top``, the ``drop_top`` largest and ``drop_bottom`` smallest are
    discarded. With 100 or more qualifying organizations this yields 70.
    """
    days = tuple(events.days if days is None else days)
    if not days:
        raise DataError("empty date range")
    n = len(events.orgs)
    day_arr = np.array(sorted(days))
    in_range = np.isin(events.day, day_arr)
    seen = np.zeros((n, len(day_arr)), dtype=bool)
    seen[events.org[in_range], np.searchsorted(day_arr, events.day[in_range])] = True
    daily = np.flatnonzero(seen.all(axis=1))

    key = (events.org[in_range].astype(np.int64) << 24) | events.prefix[in_range].astype(np.int64)
    uniq = np.unique(key)
    unique_counts = np.bincount((uniq >> 24).astype(np.int64), minlength=n)

    ranked = sorted(daily.tolist(), key=lambda i: (-unique_counts[i], events.orgs[i]))
    pool = ranked[:top]
    if len(pool) < drop_top + drop_bottom + 1:
        raise ConfigError(
            f"only {len(pool)} organizations report every day; need at least "
            f"{drop_top + drop_bottom + 1}"
        )
    kept = pool[drop_top : len(pool) - drop_bottom]
    return [events.orgs[i] for i in kept]


@dataclass(frozen=True)
class WindowSpec:
    train_days: tuple[int, ...]
    test_days: tuple[int, ...]

    def __post_init__(self):
        if not self.train_days or not self.test_days:
            raise ConfigError("window needs train and test days")
        seq = self.train_days + self.test_days
        if any(b != a + 1 for a, b in zip(seq, seq[1:])):
            raise ConfigError(f"window days not contiguous: {seq}")

    @property
    def test_day(self) -> int:
        return self.test_days[0]

    @property
    def label(self) -> str:
        return f"{date_of(self.train_days[0])}..{date_of(self.test_days[-1])}"


@dataclass
class OrgDataset:
    """D_i restricted to some days: unique (prefix, day) rows with event counts.

    Rows are sorted by (prefix, day).
    """

    org: str
    prefix: np.ndarray
    day: np.ndarray
    count: np.ndarray

    def __post_init__(self):
        self.prefix = np.asarray(self.prefix, dtype=np.uint32)
        self.day = np.asarray(self.day, dtype=np.int32)
        self.count = np.asarray(self.count, dtype=np.int64)

    @classmethod
    def from_records(cls, org: str, records: Iterable[tuple[int, int, int]]) -> "OrgDataset":
        """Build from (prefix, day, count) triples; duplicates are summed."""
        merged: dict[tuple[int, int], int] = {}
        for p, d, c in records:
            if c < 1:
                raise ValueError("counts must be >= 1")
            merged[(int(p), int(d))] = merged.get((int(p), int(d)), 0) + int(c)
        items = sorted(merged.items())
        return cls(
            org,
            [k[0] for k, _ in items],
            [k[1] for k, _ in items],
            [v for _, v in items],
        )

    @classmethod
    def empty(cls, org: str) -> "OrgDataset":
        return cls(org, [], [], [])

    def __len__(self) -> int:
        return len(self.prefix)

    def keys(self) -> np.ndarray:
        """Element keys ``prefix << 16 | day``, ascending."""
        return element_keys(self.prefix, self.day)

    def multiplicity(self, mode: str = "presence") -> np.ndarray:
        if mode == "presence":
            return np.ones(len(self.prefix), dtype=np.int64)
        if mode == "count":
            return self.count
        raise ConfigError(f"unknown multiplicity mode {mode!r}")

    def size(self, mode: str = "presence") -> int:
        return int(self.multiplicity(mode).sum())

    def prefixes(self) -> np.ndarray:
        return np.unique(self.prefix)

    def records(self) -> list[tuple[int, int, int]]:
        return list(zip(self.prefix.tolist(), self.day.tolist(), self.count.tolist()))


def element_keys(prefix, day) -> np.ndarray:
    return (np.asarray(prefix, dtype=np.int64) << 16) | (np.asarray(day, dtype=np.int64) & 0xFFFF)


@dataclass
class Window:
    spec: WindowSpec
    orgs: tuple[str, ...]
    train: dict[str, OrgDataset]
    test: dict[str, OrgDataset]


def org_datasets(ev: EventLog, days: Sequence[int]) -> dict[str, OrgDataset]:
    """Per-organization datasets restricted to the day range of ``days``."""
    mask = (ev.day >= days[0]) & (ev.day <= days[-1])
    org, prefix, day, count = ev.org[mask], ev.prefix[mask], ev.day[mask], ev.count[mask]
    order = np.lexsort((day, prefix, org))
    org, prefix, day, count = org[order], prefix[order], day[order], count[order]
    bounds = np.searchsorted(org, np.arange(len(ev.orgs) + 1))
    out = {}
    for i, name in enumerate(ev.orgs):
        a, b = bounds[i], bounds[i + 1]
        out[name] = OrgDataset(name, prefix[a:b], day[a:b], count[a:b])
    return out


def build_windows(
    events: EventLog,
    train_len: int = 5,
    test_len: int = 1,
    days: Sequence[int] | None = None,
) -> list[Window]:
    """Sliding windows advancing one day at a time over ``days``.

    ``events`` must already be aggregated (rows unique per org/prefix/day).
    """
    days = tuple(events.days if days is None else days)
    if train_len < 1 or test_len < 1:
        raise ConfigError("train_len and test_len must be positive")
    if len(days) < train_len + test_len:
        raise ConfigError(f"{len(days)} days cannot hold a {train_len}+{test_len} window")
    windows = []
    for start in range(len(days) - train_len - test_len + 1):
        train = days[start : start + train_len]
        test = days[start + train_len : start + train_len + test_len]
        spec = WindowSpec(tuple(train), tuple(test))
        windows.append(Window(spec, events.orgs, org_datasets(events, train), org_datasets(events, test)))
    return windows


@dataclass
class SynthConfig:
    """Knobs for the synthetic DShield-like corpus.

    Organizations are split into victim clusters; each cluster is targeted by
    ``groups_per_cluster`` planted attacker groups that hit every member with
    probability ``hit_prob`` on each day of a contiguous activity span. On top
    of that every organization sees background noise drawn from a shared,
    Zipf-weighted pool, and private attackers only it ever observes.
    """

    n_orgs: int = 70
    n_days: int = 15
    start_day: int = 16572  # 2015-05-17
    events_per_day: int = 4000
    unique_per_day: int = 600
    n_victim_clusters: int = 7
    groups_per_cluster: int = 3
    group_size: int = 40
    active_days: int = 8
    hit_prob: float = 0.6
    noise_rate: float = 0.3
    noise_pool: int = 20000
    noise_zipf: float = 1.0
    rate_jitter: float = 0.1
    n_intermittent: int = 0
    org_prefix: str = "org"

    def validate(self) -> None:
        if self.n_orgs < 1 or self.n_days < 1:
            raise ConfigError("synthetic corpus needs at least one organization and one day")
        if not 1 <= self.n_victim_clusters <= self.n_orgs:
            raise ConfigError("n_victim_clusters must be in [1, n_orgs]")
        if self.unique_per_day < 1 or self.events_per_day < self.unique_per_day:
            raise ConfigError("need events_per_day >= unique_per_day >= 1")
        if not 0 <= self.noise_rate < 1 or not 0 <= self.hit_prob <= 1:
            raise ConfigError("noise_rate must be in [0, 1), hit_prob in [0, 1]")
        if not 1 <= self.active_days <= self.n_days:
            raise ConfigError("active_days must be in [1, n_days]")
        if self.n_intermittent > self.n_orgs or (self.n_intermittent and self.n_days < 2):
            raise ConfigError("bad n_intermittent")


@dataclass
class PlantedTruth:
    victim_clusters: list[list[str]]
    groups: list[dict]  # cluster, prefixes (np.ndarray), days (tuple)


def _routable_prefixes(rng: np.random.Generator, n: int) -> np.ndarray:
    out = np.empty(0, dtype=np.uint32)
    while len(out) < n:
        draw = rng.integers(1 << 16, 224 << 16, size=2 * (n - len(out)) + 64, dtype=np.int64)
        draw = draw[is_routable(draw)]
        out = np.unique(np.concatenate([out, draw.astype(np.uint32)]))
    return rng.permutation(out)[:n]


def synthesize_logs(config: SynthConfig, seed: int, return_truth: bool = False):
    """Generate a deterministic synthetic alert corpus.

    Returns an aggregated :class:`EventLog` (and the :class:`PlantedTruth`
    when ``return_truth``).
    """
    config.validate()
    c = config
    rng = np.random.default_rng(seed)
    width = max(3, len(str(c.n_orgs - 1)))
    orgs = tuple(f"{c.org_prefix}{i:0{width}d}" for i in range(c.n_orgs))
    days = np.arange(c.start_day, c.start_day + c.n_days)

    jitter = 1 + rng.uniform(-c.rate_jitter, c.rate_jitter, size=c.n_orgs)
    uniq_rate = np.maximum(1, np.round(c.unique_per_day * jitter)).astype(int)
    ev_rate = c.events_per_day * jitter

    perm = rng.permutation(c.n_orgs)
    clusters = [sorted(part.tolist()) for part in np.array_split(perm, c.n_victim_clusters)]
    n_groups = c.n_victim_clusters * c.groups_per_cluster
    local_pool_size = 2 * uniq_rate

    n_noise = c.noise_pool if c.noise_rate > 0 else 0
    universe = _routable_prefixes(rng, n_groups * c.group_size + n_noise + int(local_pool_size.sum()))
    group_pref = universe[: n_groups * c.group_size].reshape(n_groups, c.group_size)
    noise_pool = universe[n_groups * c.group_size : n_groups * c.group_size + n_noise]
    private = universe[n_groups * c.group_size + n_noise :]

    groups = []
    planted_rate = np.zeros(c.n_orgs)
    for g in range(n_groups):
        cl = g // c.groups_per_cluster
        start = int(rng.integers(0, c.n_days - c.active_days + 1))
        active = tuple(range(start, start + c.active_days))
        groups.append({"cluster": cl, "prefixes": group_pref[g], "days": tuple(int(days[d]) for d in active)})
        planted_rate[clusters[cl]] += c.active_days / c.n_days * c.group_size * c.hit_prob

    noise_w = 1.0 / np.arange(1, n_noise + 1) ** c.noise_zipf if n_noise else np.empty(0)
    log_noise_w = np.log(noise_w) if n_noise else noise_w

    cols_org, cols_pref, cols_day = [], [], []
    offset = 0
    cluster_of = np.empty(c.n_orgs, dtype=int)
    for ci, members in enumerate(clusters):
        cluster_of[members] = ci

    skip_day = np.full(c.n_orgs, -1)
    if c.n_intermittent:
        flaky = rng.choice(c.n_orgs, size=c.n_intermittent, replace=False)
        skip_day[flaky] = rng.integers(0, c.n_days, size=c.n_intermittent)

    for i in range(c.n_orgs):
        n_noise_day = int(round(c.noise_rate * uniq_rate[i]))
        n_private = max(0, uniq_rate[i] - n_noise_day - int(round(planted_rate[i])))
        pool = private[offset : offset + local_pool_size[i]]
        offset += local_pool_size[i]
        # U-shaped activity: some private attackers recur daily, others rarely
        activity = rng.beta(0.6, 0.6, size=len(pool))
        activity *= n_private / max(activity.sum(), 1e-12)
        activity = np.clip(activity, 0, 1)
        present = rng.random((len(pool), c.n_days)) < activity[:, None]
        my_groups = [g for g in groups if g["cluster"] == cluster_of[i]]
        for t in range(c.n_days):
            if t == skip_day[i]:
                continue
            parts = [pool[present[:, t]]]
            for g in my_groups:
                if days[t] in g["days"]:
                    parts.append(g["prefixes"][rng.random(c.group_size) < c.hit_prob])
            if n_noise_day:
                gumbel = log_noise_w - np.log(-np.log(rng.random(n_noise)))
                parts.append(noise_pool[np.argpartition(-gumbel, n_noise_day)[:n_noise_day]])
            day_pref = np.unique(np.concatenate(parts))
            cols_org.append(np.full(len(day_pref), i, dtype=np.int32))
            cols_pref.append(day_pref)
            cols_day.append(np.full(len(day_pref), days[t], dtype=np.int32))

    org = np.concatenate(cols_org) if cols_org else np.empty(0, np.int32)
    prefix = np.concatenate(cols_pref) if cols_pref else np.empty(0, np.uint32)
    day = np.concatenate(cols_day) if cols_day else np.empty(0, np.int32)
    # events per distinct (org, prefix, day): 1 + Poisson, mean matching events_per_day
    lam = np.maximum(ev_rate[org] / uniq_rate[org] - 1.0, 0.0)
    count = 1 + rng.poisson(lam)
    events = EventLog(orgs, org, prefix, day, count).aggregated()
    if not return_truth:
        return events
    truth = PlantedTruth([[orgs[i] for i in members] for members in clusters], groups)
    return events, truth
