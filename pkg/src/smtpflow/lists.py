"""Black/whitelist membership and sender reputation."""
from __future__ import annotations

import enum
import socket
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeout
from dataclasses import dataclass
from ipaddress import IPv4Address, IPv4Network

from .errors import MalformedEntry
from .model import FlowClass, LabeledFlow, LabelSource


class ListKind(enum.Enum):
    BLACK = "black"
    WHITE = "white"


class ListVerdict(enum.Enum):
    BLACKLISTED = "blacklisted"
    WHITELISTED = "whitelisted"
    BOTH = "both"
    UNKNOWN = "unknown"


class IpList:
    """An immutable set of IPv4 prefixes with fast containment lookup."""

    def __init__(self, entries, kind: ListKind):
        self.entries = frozenset(IPv4Network(e) for e in entries)
        self.kind = kind
        index = defaultdict(set)
        for net in self.entries:
            index[net.prefixlen].add(int(net.network_address) >> (32 - net.prefixlen))
        # longest prefixes first
        self._index = sorted(((plen, frozenset(keys)) for plen, keys in index.items()), reverse=True)

    def longest_match(self, ip):
        """Length of the longest listed prefix covering ``ip``, or ``None``."""
        value = int(IPv4Address(ip))
        for plen, keys in self._index:
            if (value >> (32 - plen)) in keys:
                return plen
        return None

    def __contains__(self, ip):
        return self.longest_match(ip) is not None

    def __len__(self):
        return len(self.entries)

    def __repr__(self):
        return f"IpList({self.kind.value}, {len(self)} prefixes)"


def load_list(stream, kind: ListKind) -> IpList:
    """Read one CIDR prefix or address per line; ``#`` starts a comment."""
    entries = []
    for lineno, line in enumerate(stream, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        try:
            entries.append(IPv4Network(text, strict=False))
        except ValueError:
            raise MalformedEntry(lineno, text) from None
    return IpList(entries, kind)


def write_list(ip_list: IpList, stream):
    stream.write(f"# {ip_list.kind.value}list\n")
    for net in sorted(ip_list.entries):
        stream.write(f"{net.network_address}\n" if net.prefixlen == 32 else f"{net}\n")


def verdict(ip, black: IpList, white: IpList) -> ListVerdict:
    on_black, on_white = ip in black, ip in white
    if on_black and on_white:
        return ListVerdict.BOTH
    if on_black:
        return ListVerdict.BLACKLISTED
    if on_white:
        return ListVerdict.WHITELISTED
    return ListVerdict.UNKNOWN


_EXPECTED = {
    ListVerdict.BLACKLISTED: FlowClass.REJECTED,
    ListVerdict.WHITELISTED: FlowClass.ACCEPTED,
}


def label_by_lists(flows, black: IpList, white: IpList):
    """Yield labels for flows whose sender is on exactly one list.

    Blacklisted senders are expected to be rejected and whitelisted senders
    accepted; senders on both or neither list are skipped.
    """
    for flow in flows:
        cls = _EXPECTED.get(verdict(flow.src_ip, black, white))
        if cls is not None:
            yield LabeledFlow(flow, cls, None, LabelSource.LIST_MEMBERSHIP)


def dnsbl_query_name(ip, zone: str) -> str:
    """DNS name whose A record signals that ``ip`` is listed in ``zone``."""
    zone = zone.strip().rstrip(".")
    if not zone:
        raise ValueError("DNSBL zone must not be empty")
    octets = str(IPv4Address(ip)).split(".")
    return ".".join(reversed(octets)) + "." + zone


def dnsbl_lookup(ips, zone, resolver=socket.gethostbyname, max_in_flight=8, timeout=2.0):
    """Query a live DNSBL for each address; returns ``{ip: listed}``.

    An address counts as listed when its query name resolves. Lookups that
    fail to resolve or exceed ``timeout`` seconds count as not listed.
    """
    ips = [IPv4Address(ip) for ip in ips]

    def listed(ip):
        try:
            resolver(dnsbl_query_name(ip, zone))
        except OSError:
            return False
        return True

    result = {}
    pool = ThreadPoolExecutor(max_workers=max_in_flight)
    try:
        futures = {ip: pool.submit(listed, ip) for ip in ips}
        for ip, fut in futures.items():
            try:
                result[ip] = fut.result(timeout=timeout)
            except FutureTimeout:
                result[ip] = False
    finally:
        # a stuck resolver call must not block the caller
        pool.shutdown(wait=False, cancel_futures=True)
    return result


@dataclass(frozen=True)
class SenderReputation:
    sender: IPv4Address
    accepted: int
    rejected: int
    failed: int

    @property
    def total(self):
        return self.accepted + self.rejected + self.failed

    @property
    def score(self):
        return self.accepted / self.total


def reputations(labels) -> list[SenderReputation]:
    """Per-sender class counts scored as accepted over all flows, worst first."""
    counts = defaultdict(lambda: [0, 0, 0])
    for lf in labels:
        counts[lf.flow.src_ip][int(lf.label)] += 1
    reps = [SenderReputation(ip, accepted=c[2], rejected=c[1], failed=c[0])
            for ip, c in counts.items()]
    reps.sort(key=lambda r: (r.score, r.sender))
    return reps
