"""Domain types shared by every stage of the pipeline."""
from __future__ import annotations

import enum
from dataclasses import dataclass, fields
from ipaddress import IPv4Address
from typing import Optional

from .errors import InvalidFlow, InvalidThresholds

SMTP_PORT = 25
TCP = 6


class FlowClass(enum.IntEnum):
    """Pre-filtering outcome of one SMTP connection, ordered by how far it got."""

    FAILED = 0
    REJECTED = 1
    ACCEPTED = 2

    @classmethod
    def parse(cls, text):
        return cls[str(text).strip().upper()]

    @property
    def label(self):
        return self.name.lower()


class RejectReason(enum.Enum):
    BLACKLIST_DNSBL = "DNSBL"
    USER_UNKNOWN = "USER_UNKNOWN"
    INVALID_DOMAIN = "INVALID_DOMAIN"
    HELO_NO_FQDN = "HELO_NO_FQDN"
    RELAY_DENIED = "RELAY_DENIED"
    OTHER = "OTHER"

    @classmethod
    def from_code(cls, code):
        """Map a log reason code to a reason; unknown codes become OTHER."""
        try:
            return cls(str(code).strip().upper())
        except ValueError:
            return cls.OTHER


# Share of each reason among pre-filter rejects at the studied university server.
REJECT_REASON_WEIGHTS = {
    RejectReason.BLACKLIST_DNSBL: 0.375,
    RejectReason.USER_UNKNOWN: 0.156,
    RejectReason.INVALID_DOMAIN: 0.183,
    RejectReason.HELO_NO_FQDN: 0.174,
    RejectReason.RELAY_DENIED: 0.002,
    RejectReason.OTHER: 0.110,
}


class LabelSource(enum.Enum):
    SERVER_LOG = "server_log"
    LIST_MEMBERSHIP = "list_membership"
    SYNTHETIC = "synthetic"


def as_ipv4(value):
    if isinstance(value, IPv4Address):
        return value
    return IPv4Address(value)


@dataclass(frozen=True, slots=True)
class FlowRecord:
    """One unidirectional flow; ``bytes`` counts L3 octets (NetFlow dOctets).

    Construction only coerces addresses; use :func:`validate_flow` to check
    the numeric invariants.
    """

    src_ip: IPv4Address
    dst_ip: IPv4Address
    src_port: int
    dst_port: int
    protocol: int
    start_ms: int
    end_ms: int
    packets: int
    bytes: int
    tcp_flags: int = 0

    def __post_init__(self):
        object.__setattr__(self, "src_ip", as_ipv4(self.src_ip))
        object.__setattr__(self, "dst_ip", as_ipv4(self.dst_ip))


FLOW_FIELDS = tuple(f.name for f in fields(FlowRecord))

_RANGES = {
    "src_port": (0, 0xFFFF),
    "dst_port": (0, 0xFFFF),
    "protocol": (0, 0xFF),
    "tcp_flags": (0, 0xFF),
}


def validate_flow(raw: FlowRecord) -> FlowRecord:
    """Return ``raw`` unchanged if it satisfies every flow invariant.

    Raises :class:`InvalidFlow` naming the first offending field.
    """
    for name, (lo, hi) in _RANGES.items():
        value = getattr(raw, name)
        if not lo <= value <= hi:
            raise InvalidFlow(name, f"outside {lo}..{hi}")
    if raw.packets < 1:
        raise InvalidFlow("packets", "packets < 1")
    if raw.bytes < 1:
        raise InvalidFlow("bytes", "bytes < 1")
    if raw.bytes < raw.packets:
        raise InvalidFlow("bytes", "bytes < packets")
    if raw.end_ms < raw.start_ms:
        raise InvalidFlow("end_ms", "before start")
    return raw


def bytes_per_packet(flow: FlowRecord) -> float:
    return flow.bytes / flow.packets


@dataclass(frozen=True)
class Thresholds:
    """Per-feature class boundaries; defaults are the characteristic ranges.

    Bytes: ``< byte_lo`` failed, ``[byte_lo, byte_hi)`` rejected, ``>= byte_hi``
    accepted. Packets: ``< pkt_lo`` failed, ``[pkt_lo, pkt_hi]`` rejected,
    ``> pkt_hi`` accepted. Bytes/packet: ``< bpp_bound`` rejected, else accepted.
    """

    byte_lo: float = 300
    byte_hi: float = 1500
    pkt_lo: float = 5
    pkt_hi: float = 10
    bpp_bound: float = 100

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) > 0:
                raise InvalidThresholds(f"{f.name} must be positive")
        if not self.byte_lo < self.byte_hi:
            raise InvalidThresholds("byte_lo must be below byte_hi")
        if not self.pkt_lo < self.pkt_hi:
            raise InvalidThresholds("pkt_lo must be below pkt_hi")

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class LabeledFlow:
    flow: FlowRecord
    label: FlowClass
    reason: Optional[RejectReason] = None
    label_source: LabelSource = LabelSource.SYNTHETIC

    def __post_init__(self):
        if self.reason is not None and self.label is not FlowClass.REJECTED:
            raise ValueError("reject reason given for a non-rejected flow")
