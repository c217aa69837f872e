"""Mail-server log parsing and flow/log correlation.

Log lines use one canonical grammar::

    <epoch_ms> <client_ip> <server_ip> ACCEPT|REJECT[:<reason-code>] [msgs=<n>]

A flow with a matching log session takes the session's outcome; a flow the
server never logged is a failed connection attempt.
"""
from __future__ import annotations

import logging
from bisect import bisect_left, bisect_right
from collections import defaultdict
from dataclasses import dataclass
from ipaddress import AddressValueError, IPv4Address
from typing import Optional

from .errors import EmptyInput, EmptyLog, MalformedLogLine
from .model import FlowClass, LabeledFlow, LabelSource, RejectReason, as_ipv4

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LogEntry:
    timestamp_ms: int
    client_ip: IPv4Address
    server_ip: IPv4Address
    outcome: FlowClass
    reason: Optional[RejectReason] = None
    messages: int = 1

    def __post_init__(self):
        object.__setattr__(self, "client_ip", as_ipv4(self.client_ip))
        object.__setattr__(self, "server_ip", as_ipv4(self.server_ip))
        if self.outcome is FlowClass.FAILED:
            raise ValueError("a logged session is either accepted or rejected")
        if (self.reason is None) == (self.outcome is FlowClass.REJECTED):
            raise ValueError("reject reason required exactly for rejected sessions")
        if self.messages < 1:
            raise ValueError("messages must be >= 1")


@dataclass(frozen=True)
class MatchConfig:
    window_ms: int = 60_000
    require_server_match: bool = True

    def __post_init__(self):
        if self.window_ms <= 0:
            raise ValueError("window_ms must be positive")


def _parse_line(text):
    parts = text.split()
    if len(parts) not in (4, 5):
        raise ValueError("expected 4 or 5 fields")
    ts = int(parts[0])
    client, server = IPv4Address(parts[1]), IPv4Address(parts[2])
    verb, _, code = parts[3].partition(":")
    if verb == "ACCEPT" and not code:
        outcome, reason = FlowClass.ACCEPTED, None
    elif verb == "REJECT":
        outcome, reason = FlowClass.REJECTED, RejectReason.from_code(code or "OTHER")
    else:
        raise ValueError(f"bad verdict {parts[3]!r}")
    messages = 1
    if len(parts) == 5:
        key, _, n = parts[4].partition("=")
        if key != "msgs":
            raise ValueError(f"unknown field {parts[4]!r}")
        messages = int(n)
    return LogEntry(ts, client, server, outcome, reason, messages)


def parse_log(stream, errors=None) -> list[LogEntry]:
    """Parse a canonical log; malformed lines are skipped and reported.

    Reports go to ``errors`` when a list is given, else to the module logger.
    Raises :class:`EmptyLog` when the stream holds no lines at all.
    """
    entries = []
    seen = False
    for lineno, line in enumerate(stream, start=1):
        text = line.strip()
        if not text:
            continue
        seen = True
        try:
            entries.append(_parse_line(text))
        except (ValueError, AddressValueError) as exc:
            err = MalformedLogLine(lineno, str(exc))
            if errors is None:
                log.warning("%s", err)
            else:
                errors.append(err)
    if not seen:
        raise EmptyLog("log contains no entries")
    return entries


def format_log_entry(entry: LogEntry) -> str:
    verdict = "ACCEPT" if entry.outcome is FlowClass.ACCEPTED else f"REJECT:{entry.reason.value}"
    line = f"{entry.timestamp_ms} {entry.client_ip} {entry.server_ip} {verdict}"
    if entry.messages != 1:
        line += f" msgs={entry.messages}"
    return line


def write_log(entries, stream):
    for entry in entries:
        stream.write(format_log_entry(entry) + "\n")


def match(flows, log_entries, cfg: MatchConfig = MatchConfig()) -> list[LabeledFlow]:
    """Label each flow from the server log.

    Within a (client, server) key, flow/entry pairs closer than the window are
    taken greedily in order of time distance; every entry labels at most one
    flow. Output order follows ``flows``.
    """
    flows = list(flows)

    def key(client, server):
        return (client, server) if cfg.require_server_match else client

    by_key_entries = defaultdict(list)
    for e in log_entries:
        by_key_entries[key(e.client_ip, e.server_ip)].append(e)
    by_key_flows = defaultdict(list)
    for i, f in enumerate(flows):
        by_key_flows[key(f.src_ip, f.dst_ip)].append(i)

    assigned = {}
    for k, idxs in by_key_flows.items():
        entries = sorted(by_key_entries.get(k, ()), key=lambda e: e.timestamp_ms)
        if not entries:
            continue
        times = [e.timestamp_ms for e in entries]
        pairs = []
        for i in idxs:
            start = flows[i].start_ms
            lo = bisect_left(times, start - cfg.window_ms)
            hi = bisect_right(times, start + cfg.window_ms)
            for j in range(lo, hi):
                pairs.append((abs(times[j] - start), start, i, j))
        pairs.sort()
        used = set()
        for _, _, i, j in pairs:
            if i in assigned or j in used:
                continue
            assigned[i] = entries[j]
            used.add(j)

    out = []
    for i, f in enumerate(flows):
        e = assigned.get(i)
        if e is None:
            out.append(LabeledFlow(f, FlowClass.FAILED, None, LabelSource.SERVER_LOG))
        else:
            out.append(LabeledFlow(f, e.outcome, e.reason, LabelSource.SERVER_LOG))
    return out


def reject_rate(labels) -> float:
    """Rejected share of judged sessions; failed connections are not counted."""
    rejected = accepted = 0
    for lf in labels:
        if lf.label is FlowClass.REJECTED:
            rejected += 1
        elif lf.label is FlowClass.ACCEPTED:
            accepted += 1
    if rejected + accepted == 0:
        raise EmptyInput("no accepted or rejected flows")
    return rejected / (rejected + accepted)
