"""Synthetic SMTP traffic with ground truth.

Each session walks the three reception phases: the TCP handshake may fail
(a failed flow, nothing logged), the server may close the session during the
envelope (a rejected flow plus a REJECT log line), or it accepts the message
(an accepted flow plus an ACCEPT log line). Flow sizes are drawn so that the
per-class byte distributions hit the published CDF anchors.

Generation is columnar (numpy) and fully determined by ``seed``.
"""
from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field, fields
from functools import lru_cache
from ipaddress import IPv4Address
from typing import Optional

import numpy as np

from .classifier import Feature, classify_feature
from .errors import EmptyInput, InvalidConfig
from .lists import IpList, ListKind
from .logcorr import LogEntry
from .model import (
    REJECT_REASON_WEIGHTS,
    SMTP_PORT,
    TCP,
    FlowClass,
    FlowRecord,
    LabeledFlow,
    LabelSource,
    RejectReason,
    Thresholds,
)

REASONS = tuple(RejectReason)
FEB_18_2008_MS = 1_203_292_800_000
DAY_MS = 86_400_000

# TCP flag bits
FIN, SYN, RST, PSH, ACK = 0x01, 0x02, 0x04, 0x08, 0x10
SESSION_FLAGS = FIN | SYN | PSH | ACK


@dataclass(frozen=True)
class SizeModel:
    """Per-class flow size model.

    Failed: 1-4 packets of 40-74 octets. Rejected: 5-10 packets, 300-1499
    octets, under 100 octets/packet. Accepted: a log-normal message plus
    ``overhead`` octets for each of ``base_packets + ceil(message / mss)``
    packets. The ``*_tail`` shares are drawn from the neighbouring class's
    shape instead, which sets how often each class strays from its range.
    """

    failed_tail: float = 0.05
    rejected_low_tail: float = 0.03
    rejected_high_tail: float = 0.01
    accepted_median: int = 5000
    accepted_low_bytes: int = 1500
    accepted_low_share: float = 0.05
    overhead: int = 78
    mss: int = 1460
    base_packets: int = 4

    def accepted_total(self, message):
        message = np.asarray(message)
        return message + self.overhead * (self.base_packets + -(-message // self.mss))

    def largest_message_below(self, total):
        """Largest integer message size whose flow stays under ``total`` octets."""
        lo, hi = 0, int(total)
        # accepted_total is nondecreasing in the message size
        while lo < hi:
            mid = (lo + hi + 1) // 2
            if self.accepted_total(mid) < total:
                lo = mid
            else:
                hi = mid - 1
        return lo

    def message_lognormal(self):
        """``(mu, sigma)`` of the message size so both accepted anchors hold."""
        m_med = self.largest_message_below(self.accepted_median)
        m_low = self.largest_message_below(self.accepted_low_bytes)
        if not 0 < m_low < m_med:
            raise InvalidConfig("accepted_model", "anchors leave no room for a message size")
        z = statistics.NormalDist().inv_cdf(1 - self.accepted_low_share)
        return math.log(m_med), math.log(m_med / m_low) / z


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    n_sessions: int = 100_000
    p_connect_fail: float = 0.05
    p_reject_given_connected: float = 0.783
    reason_weights: dict = field(default_factory=lambda: dict(REJECT_REASON_WEIGHTS))
    sizes: SizeModel = SizeModel()
    # (address, activity weight) per receiving server
    servers: tuple = (("10.10.0.25", 1.0),)
    n_spammers: int = 20_000
    n_legit: int = 2_000
    blacklist_coverage: float = 0.9
    whitelist_coverage: float = 0.5
    t0_ms: int = FEB_18_2008_MS
    span_ms: int = 7 * DAY_MS
    # intensity ~ 1 + amplitude * cos(2 pi (hour - peak) / 24), peak per class
    diurnal_amplitude: float = 0.0
    diurnal_peak_hours: tuple = (20.0, 20.0, 14.0)
    log_jitter_ms: int = 999
    min_pair_gap_ms: int = 2000
    p_multi_message: float = 0.015

    def validate(self):
        probs = ["p_connect_fail", "p_reject_given_connected", "blacklist_coverage",
                 "whitelist_coverage", "p_multi_message"]
        for name in probs:
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise InvalidConfig(name, "probability outside [0, 1]")
        for f in fields(SizeModel):
            if f.name.endswith(("_tail", "_share")) and not 0 <= getattr(self.sizes, f.name) < 1:
                raise InvalidConfig(f"sizes.{f.name}", "share outside [0, 1)")
        weights = self.reason_weights
        if set(weights) - set(REASONS) or any(w < 0 for w in weights.values()):
            raise InvalidConfig("reason_weights", "unknown reason or negative weight")
        if abs(sum(weights.values()) - 1.0) > 1e-9:
            raise InvalidConfig("reason_weights", "weights must sum to 1")
        if not 0.0 <= self.diurnal_amplitude < 1.0:
            raise InvalidConfig("diurnal_amplitude", "must lie in [0, 1)")
        if len(self.diurnal_peak_hours) != 3:
            raise InvalidConfig("diurnal_peak_hours", "need one peak hour per class")
        if self.n_sessions < 0:
            raise InvalidConfig("n_sessions", "must be >= 0")
        if not self.servers or any(w <= 0 for _, w in self.servers):
            raise InvalidConfig("servers", "need at least one server with positive weight")
        if self.n_spammers < 1 or self.n_legit < 1:
            raise InvalidConfig("n_spammers", "sender pools must be nonempty")
        if self.span_ms <= 0 or self.min_pair_gap_ms <= self.log_jitter_ms:
            raise InvalidConfig("min_pair_gap_ms", "must exceed log_jitter_ms")
        self.sizes.message_lognormal()
        return self


@dataclass(frozen=True)
class EnsembleConfig(SynthConfig):
    """Network-wide traffic: the class mix depends on who is sending.

    Spammer sessions follow ``spam_mix`` and legitimate senders ``ham_mix``,
    both as (failed, rejected, accepted) probabilities. The defaults put
    92% of blacklisted and 10% of whitelisted flows under 1500 octets.
    """

    servers: tuple = tuple((f"10.10.{k}.25", 1.0 / k) for k in range(1, 11))
    spam_share: float = 0.8
    spam_mix: tuple = (0.10, 0.8245, 0.0755)
    ham_mix: tuple = (0.01, 0.043, 0.947)

    def validate(self):
        super().validate()
        if not 0.0 <= self.spam_share <= 1.0:
            raise InvalidConfig("spam_share", "probability outside [0, 1]")
        for name in ("spam_mix", "ham_mix"):
            mix = getattr(self, name)
            if len(mix) != 3 or min(mix) < 0 or abs(sum(mix) - 1.0) > 1e-9:
                raise InvalidConfig(name, "need three nonnegative weights summing to 1")
        return self


# -- sampling helpers -----------------------------------------------------

def _streams(seed):
    pools, sessions, lists = np.random.SeedSequence(seed).spawn(3)
    return (np.random.default_rng(pools), np.random.default_rng(sessions),
            np.random.default_rng(lists))


def _sender_pools(cfg, rng):
    need = cfg.n_spammers + cfg.n_legit
    # external senders live in 11.0.0.0 - 126.255.255.255
    addrs = np.empty(0, dtype=np.int64)
    while len(addrs) < need:
        more = rng.integers(0x0B000000, 0x7F000000, size=2 * need)
        addrs = np.unique(np.concatenate([addrs, more]))
    addrs = rng.permutation(addrs)[:need]
    return addrs[:cfg.n_spammers], addrs[cfg.n_spammers:]


def _failed_shape(rng, n):
    packets = rng.integers(1, 5, size=n)
    return packets, packets * rng.integers(40, 75, size=n)


def _envelope_shape(rng, n):
    packets = rng.integers(5, 11, size=n)
    nbytes = rng.integers(300, 1500, size=n)
    bad = np.flatnonzero(nbytes >= 100 * packets)
    while len(bad):
        packets[bad] = rng.integers(5, 11, size=len(bad))
        nbytes[bad] = rng.integers(300, 1500, size=len(bad))
        bad = bad[nbytes[bad] >= 100 * packets[bad]]
    return packets, nbytes


def _oversize_envelope(rng, n):
    return rng.integers(5, 11, size=n), rng.integers(1500, 3000, size=n)


def _accepted_shape(rng, n, sizes):
    mu, sigma = sizes.message_lognormal()
    message = np.ceil(rng.lognormal(mu, sigma, size=n)).astype(np.int64)
    packets = sizes.base_packets + -(-message // sizes.mss)
    return packets, sizes.accepted_total(message)


def _mixture(rng, n, parts):
    """Draw ``n`` (packets, bytes) pairs from weighted shape generators."""
    packets = np.empty(n, dtype=np.int64)
    nbytes = np.empty(n, dtype=np.int64)
    weights = np.array([w for w, _ in parts])
    pick = rng.choice(len(parts), size=n, p=weights / weights.sum())
    for k, (_, shape) in enumerate(parts):
        idx = np.flatnonzero(pick == k)
        packets[idx], nbytes[idx] = shape(rng, len(idx))
    return packets, nbytes


def draw_sizes(rng, classes, sizes: SizeModel):
    """Packets and bytes for each entry of ``classes`` (FlowClass ints)."""
    n = len(classes)
    packets = np.empty(n, dtype=np.int64)
    nbytes = np.empty(n, dtype=np.int64)
    plans = {
        FlowClass.FAILED: [(1 - sizes.failed_tail, _failed_shape),
                           (sizes.failed_tail, _envelope_shape)],
        FlowClass.REJECTED: [(1 - sizes.rejected_low_tail - sizes.rejected_high_tail, _envelope_shape),
                             (sizes.rejected_low_tail, _failed_shape),
                             (sizes.rejected_high_tail, _oversize_envelope)],
        FlowClass.ACCEPTED: [(1.0, lambda r, k: _accepted_shape(r, k, sizes))],
    }
    for cls, parts in plans.items():
        idx = np.flatnonzero(classes == int(cls))
        packets[idx], nbytes[idx] = _mixture(rng, len(idx), parts)
    return packets, nbytes


def _start_times(rng, classes, cfg):
    n = len(classes)
    amp = cfg.diurnal_amplitude
    peaks = np.asarray(cfg.diurnal_peak_hours, dtype=np.float64)[classes]
    starts = np.empty(n, dtype=np.int64)
    todo = np.arange(n)
    while len(todo):
        t = cfg.t0_ms + rng.integers(0, cfg.span_ms, size=len(todo))
        hour = (t % DAY_MS) / 3_600_000
        keep = rng.random(len(todo)) * (1 + amp) <= 1 + amp * np.cos(2 * np.pi * (hour - peaks[todo]) / 24)
        starts[todo[keep]] = t[keep]
        todo = todo[~keep]
    return starts


def _space_pairs(src, dst, starts, gap):
    """Delay starts so sessions of one (client, server) pair are ``gap`` ms apart."""
    order = np.lexsort((starts, dst, src))
    s, d, t = src[order], dst[order], starts[order]
    new_group = np.ones(len(order), dtype=bool)
    new_group[1:] = (s[1:] != s[:-1]) | (d[1:] != d[:-1])
    group = np.cumsum(new_group) - 1
    first = np.flatnonzero(new_group)
    pos = np.arange(len(order)) - first[group]
    base = t.min() if len(t) else 0
    v = (t - base) - pos * gap
    big = int(v.max() - v.min()) + 1 if len(v) else 1
    offset = group * big
    v = np.maximum.accumulate(v + offset) - offset
    out = np.empty_like(starts)
    out[order] = v + pos * gap + base
    return out


@lru_cache(maxsize=1 << 16)
def _addr(value):
    return IPv4Address(value)


@dataclass
class SynthResult:
    """Columnar sessions; iterate for ``(FlowRecord, LogEntry | None, FlowClass)``."""

    src: np.ndarray
    dst: np.ndarray
    src_port: np.ndarray
    start_ms: np.ndarray
    end_ms: np.ndarray
    packets: np.ndarray
    bytes: np.ndarray
    tcp_flags: np.ndarray
    classes: np.ndarray
    reasons: np.ndarray  # index into REASONS, -1 when not rejected
    log_ms: np.ndarray  # -1 when the server logged nothing
    messages: np.ndarray
    spammer: np.ndarray

    def __len__(self):
        return len(self.classes)

    def flow(self, i) -> FlowRecord:
        return FlowRecord(
            _addr(int(self.src[i])), _addr(int(self.dst[i])),
            int(self.src_port[i]), SMTP_PORT, TCP, int(self.start_ms[i]), int(self.end_ms[i]),
            int(self.packets[i]), int(self.bytes[i]), int(self.tcp_flags[i]),
        )

    def reason(self, i) -> Optional[RejectReason]:
        r = int(self.reasons[i])
        return REASONS[r] if r >= 0 else None

    def log_entry(self, i) -> Optional[LogEntry]:
        if self.log_ms[i] < 0:
            return None
        return LogEntry(int(self.log_ms[i]), _addr(int(self.src[i])),
                        _addr(int(self.dst[i])), FlowClass(int(self.classes[i])),
                        self.reason(i), int(self.messages[i]))

    def __iter__(self):
        for i in range(len(self)):
            yield self.flow(i), self.log_entry(i), FlowClass(int(self.classes[i]))

    def flows(self):
        return [self.flow(i) for i in range(len(self))]

    def log_entries(self):
        return [e for e in (self.log_entry(i) for i in range(len(self))) if e is not None]

    def labeled(self):
        return [LabeledFlow(self.flow(i), FlowClass(int(self.classes[i])), self.reason(i),
                            LabelSource.SYNTHETIC) for i in range(len(self))]

    def features(self):
        return np.column_stack([self.bytes, self.packets])


def _draw_classes(rng, cfg, spammer):
    n = len(spammer)
    if isinstance(cfg, EnsembleConfig):
        u = rng.random(n)
        mix = np.where(spammer[:, None], np.array(cfg.spam_mix), np.array(cfg.ham_mix))
        cum = np.cumsum(mix, axis=1)
        return (u[:, None] >= cum[:, :2]).sum(axis=1)
    failed = rng.random(n) < cfg.p_connect_fail
    rejected = rng.random(n) < cfg.p_reject_given_connected
    return np.where(failed, int(FlowClass.FAILED),
                    np.where(rejected, int(FlowClass.REJECTED), int(FlowClass.ACCEPTED)))


def generate(cfg: SynthConfig) -> SynthResult:
    cfg.validate()
    pool_rng, rng, _ = _streams(cfg.seed)
    spammers, legit = _sender_pools(cfg, pool_rng)
    n = cfg.n_sessions

    if isinstance(cfg, EnsembleConfig):
        spammer = rng.random(n) < cfg.spam_share
        classes = _draw_classes(rng, cfg, spammer)
    else:
        classes = _draw_classes(rng, cfg, np.zeros(n, dtype=bool))
        # whoever gets past pre-filtering is a legitimate sender
        spammer = classes != int(FlowClass.ACCEPTED)
    classes = classes.astype(np.int64)

    src = np.where(spammer, spammers[rng.integers(0, len(spammers), size=n)],
                   legit[rng.integers(0, len(legit), size=n)])
    server_addrs = np.array([int(IPv4Address(a)) for a, _ in cfg.servers], dtype=np.int64)
    weights = np.array([w for _, w in cfg.servers], dtype=np.float64)
    dst = server_addrs[rng.choice(len(server_addrs), size=n, p=weights / weights.sum())]

    packets, nbytes = draw_sizes(rng, classes, cfg.sizes)
    starts = _space_pairs(src, dst, _start_times(rng, classes, cfg), cfg.min_pair_gap_ms)
    durations = np.where(classes == int(FlowClass.FAILED), rng.integers(0, 3000, size=n),
                         rng.integers(200, 5000, size=n) + nbytes // 10)
    flags = np.where(classes == int(FlowClass.FAILED),
                     np.where(rng.random(n) < 0.5, SYN, SYN | RST), SESSION_FLAGS)

    reason_p = np.array([cfg.reason_weights.get(r, 0.0) for r in REASONS])
    reasons = np.where(classes == int(FlowClass.REJECTED),
                       rng.choice(len(REASONS), size=n, p=reason_p / reason_p.sum()), -1)
    logged = classes != int(FlowClass.FAILED)
    log_ms = np.where(logged, starts + rng.integers(0, cfg.log_jitter_ms + 1, size=n), -1)
    messages = np.where((classes == int(FlowClass.ACCEPTED)) & (rng.random(n) < cfg.p_multi_message), 2, 1)
    sport = rng.integers(1024, 65536, size=n)

    order = np.lexsort((src, starts))
    return SynthResult(
        src=src[order], dst=dst[order], src_port=sport[order], start_ms=starts[order],
        end_ms=(starts + durations)[order], packets=packets[order], bytes=nbytes[order],
        tcp_flags=flags[order], classes=classes[order], reasons=reasons[order],
        log_ms=log_ms[order], messages=messages[order], spammer=spammer[order],
    )


def sender_lists(cfg: SynthConfig):
    """Black- and whitelist prefixes (/32) drawn from the configured sender pools."""
    cfg.validate()
    pool_rng, _, rng = _streams(cfg.seed)
    spammers, legit = _sender_pools(cfg, pool_rng)
    black = spammers[rng.random(len(spammers)) < cfg.blacklist_coverage]
    white = legit[rng.random(len(legit)) < cfg.whitelist_coverage]
    return (IpList([IPv4Address(int(a)) for a in black], ListKind.BLACK),
            IpList([IPv4Address(int(a)) for a in white], ListKind.WHITE))


def class_violation_rates(sample, t: Thresholds = Thresholds()) -> dict:
    """Per true class, the share of flows whose bytes vote names another class."""
    totals, wrong = {}, {}
    for flow, cls in sample:
        totals[cls] = totals.get(cls, 0) + 1
        if classify_feature(flow, Feature.BYTES, t) != cls:
            wrong[cls] = wrong.get(cls, 0) + 1
    if not totals:
        raise EmptyInput("no flows")
    return {cls: wrong.get(cls, 0) / n for cls, n in totals.items()}
