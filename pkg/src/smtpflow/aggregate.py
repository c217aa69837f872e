"""Network-wide statistics over labeled SMTP flows.

:class:`ServerStats` is a mergeable accumulator: workers may each build stats
over a partition of the flows and :func:`merge` them afterwards.
"""
from __future__ import annotations

import csv
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from ipaddress import IPv4Address
from typing import Optional

import numpy as np

from .classifier import EmpiricalCdf, compute_cdf
from .errors import (
    FlowBeforeOrigin,
    IncompatibleBuckets,
    NoJudgedFlows,
    NoRejectedFlows,
    SeriesTooShort,
    ServerMismatch,
    SmtpFlowError,
)
from .model import FlowClass

log = logging.getLogger(__name__)

HOUR_MS = 3_600_000
DAY_HOURS = 24
QUARTER_HOUR_MS = 900_000


@dataclass
class ServerStats:
    """Class counters and per-class byte-size multisets for one server."""

    server: IPv4Address
    counts: list = field(default_factory=lambda: [0, 0, 0])
    byte_sizes: list = field(default_factory=lambda: [Counter(), Counter(), Counter()])

    def __post_init__(self):
        self.server = IPv4Address(self.server)

    @property
    def total(self):
        return sum(self.counts)

    def count(self, cls: FlowClass) -> int:
        return self.counts[int(cls)]

    def add(self, lf):
        """In-place accumulate; see :func:`accumulate` for the pure form."""
        if lf.flow.dst_ip != self.server:
            raise ServerMismatch(f"flow to {lf.flow.dst_ip} added to stats of {self.server}")
        c = int(lf.label)
        self.counts[c] += 1
        self.byte_sizes[c][lf.flow.bytes] += 1
        return self

    def copy(self):
        return ServerStats(self.server, list(self.counts), [Counter(c) for c in self.byte_sizes])

    def cdf(self, cls: FlowClass) -> EmpiricalCdf:
        sizes = self.byte_sizes[int(cls)]
        values = np.fromiter(sizes.keys(), dtype=np.float64, count=len(sizes))
        reps = np.fromiter(sizes.values(), dtype=np.int64, count=len(sizes))
        return compute_cdf(np.repeat(values, reps))


def accumulate(stats: ServerStats, lf) -> ServerStats:
    return stats.copy().add(lf)


def merge(a: ServerStats, b: ServerStats) -> ServerStats:
    if a.server != b.server:
        raise ServerMismatch(f"cannot merge stats of {a.server} and {b.server}")
    return ServerStats(
        a.server,
        [x + y for x, y in zip(a.counts, b.counts)],
        [x + y for x, y in zip(a.byte_sizes, b.byte_sizes)],
    )


def stats_by_server(labels) -> dict:
    stats = {}
    for lf in labels:
        server = lf.flow.dst_ip
        if server not in stats:
            stats[server] = ServerStats(server)
        stats[server].add(lf)
    return stats


def rating(stats: ServerStats) -> float:
    """Accepted share of the sessions the server judged (failed attempts excluded)."""
    accepted = stats.count(FlowClass.ACCEPTED)
    judged = accepted + stats.count(FlowClass.REJECTED)
    if judged == 0:
        raise NoJudgedFlows(f"{stats.server} has no accepted or rejected flows")
    return accepted / judged


def sharpness(stats: ServerStats, x=1500) -> float:
    """Share of rejected flows smaller than ``x`` octets."""
    sizes = stats.byte_sizes[int(FlowClass.REJECTED)]
    n = stats.count(FlowClass.REJECTED)
    if n == 0:
        raise NoRejectedFlows(f"{stats.server} has no rejected flows")
    return sum(k for v, k in sizes.items() if v < x) / n


# -- time series ----------------------------------------------------------

@dataclass
class TimeSeries:
    """Per-class flow counts in fixed-width buckets starting at ``t0_ms``.

    ``counts`` has shape ``(n_buckets, 3)`` indexed by :class:`FlowClass`.
    """

    bucket_ms: int
    t0_ms: int
    counts: np.ndarray
    server: Optional[IPv4Address] = None

    @property
    def n_buckets(self):
        return len(self.counts)

    @property
    def span_ms(self):
        return self.n_buckets * self.bucket_ms

    def series(self, cls: FlowClass) -> np.ndarray:
        return self.counts[:, int(cls)]

    def bucket_start(self, k):
        return self.t0_ms + k * self.bucket_ms


def bucketize(labels, bucket_ms=QUARTER_HOUR_MS, t0=None, n_buckets=None, server=None) -> TimeSeries:
    """Count flows per class in buckets ``floor((start_ms - t0) / bucket_ms)``.

    ``t0`` defaults to the earliest flow start rounded down to a multiple of
    ``bucket_ms``, so buckets stay aligned with wall-clock hours.
    """
    if bucket_ms <= 0:
        raise ValueError("bucket_ms must be positive")
    labels = list(labels)
    starts = np.array([lf.flow.start_ms for lf in labels], dtype=np.int64)
    classes = np.array([int(lf.label) for lf in labels], dtype=np.int64)
    if t0 is None:
        t0 = int(starts.min()) // bucket_ms * bucket_ms if len(starts) else 0
    if len(starts) and starts.min() < t0:
        raise FlowBeforeOrigin(f"flow at {int(starts.min())} precedes origin {t0}")
    idx = (starts - t0) // bucket_ms
    size = int(idx.max()) + 1 if len(idx) else 0
    if n_buckets is not None:
        size = max(size, n_buckets)
    counts = np.zeros((size, 3), dtype=np.int64)
    np.add.at(counts, (idx, classes), 1)
    return TimeSeries(bucket_ms, t0, counts, server)


@dataclass(frozen=True)
class SpikeEvent:
    server: Optional[IPv4Address]
    bucket: int
    cls: FlowClass
    count: int
    baseline: float


def detect_spikes(ts: TimeSeries, cls: FlowClass = FlowClass.REJECTED, spike_factor=5.0,
                  window=96, min_count=100) -> list[SpikeEvent]:
    """Buckets whose count reaches ``spike_factor`` times the rolling median.

    The baseline is the median of the ``window`` buckets strictly before the
    bucket under test; the first ``window`` buckets are never reported.
    """
    if ts.n_buckets < window:
        raise SeriesTooShort(f"{ts.n_buckets} buckets, spike window needs {window}")
    y = ts.series(cls)
    events = []
    for b in range(window, len(y)):
        count = int(y[b])
        if count <= 0 or count < min_count:
            continue
        baseline = float(np.median(y[b - window:b]))
        if count >= spike_factor * baseline:
            events.append(SpikeEvent(ts.server, b, cls, count, baseline))
    return events


def hourly_profile(ts: TimeSeries, cls: FlowClass) -> np.ndarray:
    """Mean bucket count for each UTC hour of day."""
    hours = ((ts.t0_ms + np.arange(ts.n_buckets) * ts.bucket_ms) // HOUR_MS) % DAY_HOURS
    sums = np.bincount(hours, weights=ts.series(cls), minlength=DAY_HOURS)
    n = np.bincount(hours, minlength=DAY_HOURS)
    return np.divide(sums, n, out=np.zeros(DAY_HOURS), where=n > 0)


def diurnal_offset(a: TimeSeries, b: TimeSeries, class_a: FlowClass, class_b: FlowClass) -> int:
    """Lag in whole hours by which ``class_b`` in ``b`` trails ``class_a`` in ``a``.

    Returns ``k`` in ``0..23`` maximising the circular cross-correlation of
    the mean-centred hourly profiles, the smallest ``k`` on ties.
    """
    if a.bucket_ms != b.bucket_ms or HOUR_MS % a.bucket_ms:
        raise IncompatibleBuckets("series need one common bucket width dividing an hour")
    for ts in (a, b):
        if ts.span_ms < 2 * DAY_HOURS * HOUR_MS:
            raise SeriesTooShort(f"series spans {ts.span_ms / HOUR_MS:.1f} h, need 48 h")
    pa = hourly_profile(a, class_a)
    pb = hourly_profile(b, class_b)
    pa = pa - pa.mean()
    pb = pb - pb.mean()
    corr = np.array([pa @ np.roll(pb, -k) for k in range(DAY_HOURS)])
    tol = 1e-9 * max(1.0, float(np.abs(corr).max()))
    return int(np.flatnonzero(corr >= corr.max() - tol)[0])


# -- report ---------------------------------------------------------------

def _try(diagnostics, what, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except SmtpFlowError as exc:
        diagnostics.append(f"{what}: {exc}")
        return None


def _counts_doc(counts):
    return {c.label: int(counts[int(c)]) for c in FlowClass}


def server_report(stats: ServerStats, ts: TimeSeries, spike_factor=5.0, spike_window=96,
                  min_count=100, diagnostics=None) -> dict:
    diag = diagnostics if diagnostics is not None else []
    where = str(stats.server)
    spikes = None
    if ts.n_buckets >= spike_window:
        spikes = []
        for cls in FlowClass:
            for ev in detect_spikes(ts, cls, spike_factor, spike_window, min_count):
                spikes.append({"bucket": ev.bucket, "start_ms": ts.bucket_start(ev.bucket),
                               "class": cls.label, "count": ev.count, "baseline": ev.baseline})
        spikes.sort(key=lambda s: (s["bucket"], s["class"]))
    else:
        diag.append(f"{where} spikes: {ts.n_buckets} buckets, window needs {spike_window}")
    return {
        "server": where,
        "counts": _counts_doc(stats.counts),
        "rating": _try(diag, f"{where} rating", rating, stats),
        "sharpness": _try(diag, f"{where} sharpness", sharpness, stats),
        "series": {
            "t0_ms": ts.t0_ms,
            "bucket_ms": ts.bucket_ms,
            **{c.label: ts.series(c).tolist() for c in FlowClass},
        },
        "spikes": spikes,
        "diurnal_offset_hours": _try(diag, f"{where} diurnal offset", diurnal_offset,
                                     ts, ts, FlowClass.ACCEPTED, FlowClass.REJECTED),
    }


def build_report(labels, bucket_ms=QUARTER_HOUR_MS, spike_factor=5.0, spike_window=96,
                 min_count=100) -> dict:
    """Assemble the JSON-compatible report document.

    Fields that cannot be computed are ``None`` and explained under
    ``diagnostics``.
    """
    labels = list(labels)
    diagnostics = []
    by_server = defaultdict(list)
    for lf in labels:
        by_server[lf.flow.dst_ip].append(lf)

    totals = [0, 0, 0]
    for lf in labels:
        totals[int(lf.label)] += 1
    judged = totals[1] + totals[2]

    t0 = None
    if labels:
        t0 = min(lf.flow.start_ms for lf in labels) // bucket_ms * bucket_ms
    servers = []
    for server in sorted(by_server):
        group = by_server[server]
        stats = stats_by_server(group)[server]
        ts = bucketize(group, bucket_ms, t0=t0, server=server)
        servers.append(server_report(stats, ts, spike_factor, spike_window, min_count, diagnostics))

    if not judged:
        diagnostics.append("reject_rate: no accepted or rejected flows")
    return {
        "flows": len(labels),
        "counts": _counts_doc(totals),
        "reject_rate": totals[1] / judged if judged else None,
        "bucket_ms": bucket_ms,
        "servers": servers,
        "diagnostics": diagnostics,
    }


def write_cdf_csv(cdf: EmpiricalCdf, stream):
    """Two-column ``value,cumulative_fraction`` export (fraction at or below value)."""
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["value", "cumulative_fraction"])
    values, fractions = cdf.points()
    for v, frac in zip(values, fractions):
        writer.writerow([int(v) if float(v).is_integer() else float(v), repr(float(frac))])
