"""NetFlow v5 wire codec, flow CSV interchange and SMTP flow selection.

Layout reference: Cisco NetFlow v5 export format. All integers are
big-endian. A datagram is a 24-octet header followed by ``count`` 48-octet
records.
"""
from __future__ import annotations

import contextlib
import csv
import gc
import itertools
import re
import struct
import warnings
from collections import Counter
from dataclasses import dataclass, replace
from functools import lru_cache
from ipaddress import AddressValueError, IPv4Address

import numpy as np

from .errors import (
    BadVersion,
    CountMismatch,
    FieldOverflow,
    MalformedRow,
    MissingHeader,
    TooManyRecords,
    TruncatedPacket,
)
from .model import FLOW_FIELDS, SMTP_PORT, TCP, FlowRecord, validate_flow

HEADER = struct.Struct("!HHIIIIBBH")
RECORD = struct.Struct("!IIIHHIIIIHHxBBBHHBBxx")
MAX_RECORDS = 30

U8, U16, U32 = 0xFF, 0xFFFF, 0xFFFFFFFF


@dataclass(frozen=True)
class NetflowV5Header:
    count: int
    sys_uptime_ms: int
    unix_secs: int
    unix_nsecs: int = 0
    flow_sequence: int = 0
    engine_type: int = 0
    engine_id: int = 0
    sampling_interval: int = 0
    version: int = 5

    @property
    def export_ms(self):
        """Wall-clock export time in milliseconds since the epoch."""
        return self.unix_secs * 1000 + self.unix_nsecs // 1_000_000


def _check(name, value, limit):
    if not 0 <= value <= limit:
        raise FieldOverflow(name, value)
    return value


def parse_v5(datagram: bytes) -> tuple[NetflowV5Header, list[FlowRecord]]:
    """Decode one export datagram into its header and flow records."""
    size = len(datagram)
    if size < HEADER.size:
        raise TruncatedPacket(f"{size} octets, header needs {HEADER.size}")
    version, count, uptime, secs, nsecs, seq, etype, eid, sampling = HEADER.unpack_from(datagram)
    if version != 5:
        raise BadVersion(version)
    if not 1 <= count <= MAX_RECORDS:
        raise CountMismatch(f"record count {count} outside 1..{MAX_RECORDS}")
    expected = HEADER.size + count * RECORD.size
    if size < expected:
        raise TruncatedPacket(f"{size} octets, {count} records need {expected}")
    if size > expected:
        raise CountMismatch(f"{size} octets, {count} records need exactly {expected}")

    header = NetflowV5Header(
        count=count, sys_uptime_ms=uptime, unix_secs=secs, unix_nsecs=nsecs,
        flow_sequence=seq, engine_type=etype, engine_id=eid, sampling_interval=sampling,
    )
    # boot time in wall-clock ms; first/last are uptime offsets from it
    boot_ms = header.export_ms - uptime
    flows = []
    for i in range(count):
        (src, dst, _nexthop, _input, _output, pkts, octets, first, last,
         sport, dport, flags, proto, _tos, _src_as, _dst_as, _smask, _dmask,
         ) = RECORD.unpack_from(datagram, HEADER.size + i * RECORD.size)
        flow = FlowRecord(
            src_ip=IPv4Address(src), dst_ip=IPv4Address(dst),
            src_port=sport, dst_port=dport, protocol=proto,
            start_ms=boot_ms + first, end_ms=boot_ms + last,
            packets=pkts, bytes=octets, tcp_flags=flags,
        )
        flows.append(validate_flow(flow))
    return header, flows


def serialize_v5(header: NetflowV5Header, flows: list[FlowRecord]) -> bytes:
    """Encode ``flows`` under ``header``; the header's count is taken from ``flows``."""
    if len(flows) > MAX_RECORDS:
        raise TooManyRecords(f"{len(flows)} flows, a v5 datagram holds {MAX_RECORDS}")
    if not flows:
        raise FieldOverflow("count", 0)
    if header.version != 5:
        raise BadVersion(header.version)
    header = replace(header, count=len(flows))
    for name, limit in (("sys_uptime_ms", U32), ("unix_secs", U32), ("unix_nsecs", U32),
                        ("flow_sequence", U32), ("engine_type", U8), ("engine_id", U8),
                        ("sampling_interval", U16)):
        _check(name, getattr(header, name), limit)

    boot_ms = header.export_ms - header.sys_uptime_ms
    out = [HEADER.pack(5, header.count, header.sys_uptime_ms, header.unix_secs,
                       header.unix_nsecs, header.flow_sequence, header.engine_type,
                       header.engine_id, header.sampling_interval)]
    for flow in flows:
        out.append(RECORD.pack(
            int(flow.src_ip), int(flow.dst_ip), 0, 0, 0,
            _check("packets", flow.packets, U32),
            _check("bytes", flow.bytes, U32),
            _check("start_ms", flow.start_ms - boot_ms, U32),
            _check("end_ms", flow.end_ms - boot_ms, U32),
            _check("src_port", flow.src_port, U16),
            _check("dst_port", flow.dst_port, U16),
            _check("tcp_flags", flow.tcp_flags, U8),
            _check("protocol", flow.protocol, U8),
            0, 0, 0, 0, 0,
        ))
    return b"".join(out)


def iter_v5_stream(stream):
    """Yield ``(header, flows)`` for back-to-back datagrams stored in a binary file."""
    while True:
        head = stream.read(HEADER.size)
        if not head:
            return
        if len(head) < 4:
            raise TruncatedPacket("trailing partial header")
        count = struct.unpack_from("!H", head, 2)[0]
        body = stream.read(count * RECORD.size)
        yield parse_v5(head + body)


# -- CSV ------------------------------------------------------------------

@lru_cache(maxsize=1 << 16)
def _ip(text):
    return IPv4Address(text)


def _row_to_flow(row):
    if len(row) != len(FLOW_FIELDS):
        raise ValueError(f"expected {len(FLOW_FIELDS)} columns, got {len(row)}")
    try:
        src, dst = _ip(row[0]), _ip(row[1])
    except AddressValueError as exc:
        raise ValueError(str(exc)) from None
    values = [int(v) for v in row[2:]]
    return FlowRecord(src, dst, *values)


def read_csv(stream, errors=None):
    """Yield validated :class:`FlowRecord` objects from a flow CSV stream.

    Bad rows raise :class:`MalformedRow`, unless an ``errors`` list is
    supplied, in which case they are appended there and skipped.
    """
    reader = csv.reader(stream)
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != FLOW_FIELDS:
        raise MissingHeader("flow CSV must start with: " + ",".join(FLOW_FIELDS))
    for row in reader:
        if not row:
            continue
        try:
            flow = validate_flow(_row_to_flow(row))
        except ValueError as exc:
            err = MalformedRow(reader.line_num, str(exc))
            if errors is None:
                raise err from None
            errors.append(err)
            continue
        yield flow


_OCTET = r"(?:25[0-5]|2[0-4][0-9]|1[0-9][0-9]|[1-9]?[0-9])"
_IPV4 = re.compile(rf"{_OCTET}(?:\.{_OCTET}){{3}}")
# inclusive bounds for src_port .. tcp_flags
_LOWER = np.array([0, 0, 0, -(1 << 62), -(1 << 62), 1, 1, 0])
_UPPER = np.array([U16, U16, U8, 1 << 62, 1 << 62, 1 << 62, 1 << 62, U8])


def _parse_ints(rows):
    text = ",".join([",".join(r[2:]) for r in rows])
    with warnings.catch_warnings():
        # numpy warns (and stops early) on any token that is not an integer
        warnings.simplefilter("error", DeprecationWarning)
        try:
            values = np.fromstring(text, dtype=np.int64, sep=",")
        except (DeprecationWarning, ValueError):
            return None
    if values.size != 8 * len(rows):
        return None
    return values.reshape(-1, 8)


def _fast_chunk(rows):
    """Vectorised parse of a chunk, or ``None`` if any row needs a closer look."""
    if any(len(r) != len(FLOW_FIELDS) for r in rows):
        return None
    values = _parse_ints(rows)
    if values is None:
        return None
    if not all(_IPV4.fullmatch(r[0]) and _IPV4.fullmatch(r[1]) for r in rows):
        return None
    ok = ((values >= _LOWER) & (values <= _UPPER)).all(axis=1)
    ok &= values[:, 4] >= values[:, 3]  # end after start
    ok &= values[:, 6] >= values[:, 5]  # bytes >= packets
    return values if ok.all() else None


@contextlib.contextmanager
def paused_gc():
    """Suspend cyclic GC; bulk row lists hold no cycles but trigger many collections."""
    enabled = gc.isenabled()
    gc.disable()
    try:
        yield
    finally:
        if enabled:
            gc.enable()


def read_csv_chunks(stream, errors=None, size=65_536):
    """Yield ``(rows, values)`` blocks of a flow CSV without building records.

    ``rows`` are the raw string rows that passed validation and ``values`` an
    ``(n, 8)`` int64 array of the numeric columns (``src_port`` onwards).
    Error handling matches :func:`read_csv`.
    """
    header = next(csv.reader([stream.readline()]), None)
    if header is None or tuple(h.strip() for h in header) != FLOW_FIELDS:
        raise MissingHeader("flow CSV must start with: " + ",".join(FLOW_FIELDS))
    lineno = 1
    while lines := list(itertools.islice(stream, size)):
        with paused_gc():
            if any('"' in line for line in lines):
                parsed = list(csv.reader(lines))
            else:
                parsed = [line.rstrip("\r\n").split(",") for line in lines]
            numbered = [(row, lineno + i) for i, row in enumerate(parsed, start=1)
                        if row and row != [""]]
            rows = [row for row, _ in numbered]
            values = _fast_chunk(rows)
        lineno += len(lines)
        if values is not None:
            yield rows, values
            continue
        good, vals = [], []
        for row, line in numbered:
            try:
                flow = validate_flow(_row_to_flow(row))
            except ValueError as exc:
                err = MalformedRow(line, str(exc))
                if errors is None:
                    raise err from None
                errors.append(err)
                continue
            good.append(row)
            vals.append(flow_row(flow)[2:])
        yield good, np.array(vals, dtype=np.int64).reshape(-1, 8)


@lru_cache(maxsize=1 << 16)
def _ip_text(ip):
    return str(ip)


def flow_row(flow: FlowRecord) -> list:
    return [_ip_text(flow.src_ip), _ip_text(flow.dst_ip), flow.src_port, flow.dst_port,
            flow.protocol, flow.start_ms, flow.end_ms, flow.packets, flow.bytes,
            flow.tcp_flags]


def write_csv(flows, stream):
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(FLOW_FIELDS)
    for flow in flows:
        writer.writerow(flow_row(flow))


# -- SMTP selection -------------------------------------------------------

def is_smtp(flow: FlowRecord, servers=None) -> bool:
    if flow.protocol != TCP or flow.dst_port != SMTP_PORT:
        return False
    return servers is None or flow.dst_ip in servers


def filter_smtp(flows, servers=None):
    """Keep inbound TCP/25 flows, optionally only towards ``servers``."""
    if servers is not None:
        servers = frozenset(IPv4Address(s) for s in servers)
    return [f for f in flows if is_smtp(f, servers)]


def top_servers(flows, n):
    """The ``n`` busiest destination addresses by flow count, ties by address."""
    if n <= 0:
        return []
    counts = Counter(f.dst_ip for f in flows)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return ranked[:n]
