import math
from dataclasses import replace
from statistics import NormalDist

import numpy as np
import pytest

from smtpflow.errors import EmptyInput, InvalidConfig
from smtpflow.model import REJECT_REASON_WEIGHTS, FlowClass, Thresholds, validate_flow
from smtpflow.synth import (
    REASONS,
    EnsembleConfig,
    SizeModel,
    SynthConfig,
    class_violation_rates,
    generate,
    sender_lists,
)

F, R, A = (int(c) for c in FlowClass)


@pytest.fixture(scope="module")
def small():
    return generate(SynthConfig(n_sessions=3000, seed=11))


def test_same_seed_same_output():
    a = generate(SynthConfig(n_sessions=2000, seed=5))
    b = generate(SynthConfig(n_sessions=2000, seed=5))
    for name in a.__dataclass_fields__:
        assert np.array_equal(getattr(a, name), getattr(b, name)), name
    c = generate(SynthConfig(n_sessions=2000, seed=6))
    assert not np.array_equal(a.bytes, c.bytes)


def test_exact_session_count_and_valid_flows(small):
    assert len(small) == 3000
    triples = list(small)
    assert len(triples) == 3000
    for flow, entry, cls in triples:
        validate_flow(flow)
        assert flow.dst_port == 25 and flow.protocol == 6


def test_logs_agree_with_truth(small):
    for flow, entry, cls in small:
        if cls is FlowClass.FAILED:
            assert entry is None
            continue
        assert entry.outcome is cls
        assert (entry.client_ip, entry.server_ip) == (flow.src_ip, flow.dst_ip)
        assert 0 <= entry.timestamp_ms - flow.start_ms < 1000
        assert (entry.reason is not None) == (cls is FlowClass.REJECTED)


def test_output_sorted_by_start_then_source(small):
    keys = list(zip(small.start_ms.tolist(), small.src.tolist()))
    assert keys == sorted(keys)


def test_sessions_of_a_pair_are_spaced(small):
    order = np.lexsort((small.start_ms, small.dst, small.src))
    s, d, t = small.src[order], small.dst[order], small.start_ms[order]
    same_pair = (s[1:] == s[:-1]) & (d[1:] == d[:-1])
    assert np.all(np.diff(t)[same_pair] >= 2000)


def test_start_times_within_span(small):
    cfg = SynthConfig()
    assert small.start_ms.min() >= cfg.t0_ms


def test_class_mix_and_reasons(default_sample):
    c = default_sample.classes
    assert np.mean(c == F) == pytest.approx(0.05, abs=0.005)
    assert np.mean(c[c != F] == R) == pytest.approx(0.783, abs=0.01)
    reasons = default_sample.reasons[c == R]
    for k, reason in enumerate(REASONS):
        assert np.mean(reasons == k) == pytest.approx(REJECT_REASON_WEIGHTS[reason], abs=0.01)
    assert np.all(default_sample.reasons[c != R] == -1)


def test_cdf_anchors(default_sample):
    b, c = default_sample.bytes, default_sample.classes
    assert np.mean(b[c == F] < 300) == pytest.approx(0.95, abs=0.01)
    assert np.mean(b[c == R] < 300) == pytest.approx(0.03, abs=0.01)
    assert np.mean(b[c == R] < 1500) == pytest.approx(0.99, abs=0.01)
    assert np.mean(b[c == A] < 1500) == pytest.approx(0.05, abs=0.01)
    assert np.median(b[c == A]) == pytest.approx(5000, abs=250)


def test_violation_rates(default_sample):
    sample = [(default_sample.flow(i), FlowClass(int(c)))
              for i, c in enumerate(default_sample.classes[:20000])]
    rates = class_violation_rates(sample, Thresholds())
    assert rates[FlowClass.FAILED] == pytest.approx(0.05, abs=0.01)
    # rejected strays both ways: 3% below 300 plus 1% at or above 1500
    assert rates[FlowClass.REJECTED] == pytest.approx(0.04, abs=0.01)
    assert rates[FlowClass.ACCEPTED] == pytest.approx(0.05, abs=0.01)
    with pytest.raises(EmptyInput):
        class_violation_rates([])


def test_sigma_matches_closed_form():
    # with no per-packet overhead the flow size is the message size itself
    bare = SizeModel(overhead=0, base_packets=0)
    mu, sigma = bare.message_lognormal()
    z = NormalDist().inv_cdf(0.95)
    assert sigma == pytest.approx(math.log(5000 / 1500) / z, rel=1e-3)
    assert math.exp(mu) == pytest.approx(5000, abs=1)


def test_sigma_solver_hits_both_anchors():
    sizes = SizeModel()
    mu, sigma = sizes.message_lognormal()
    dist = NormalDist(mu, sigma)
    # a flow is below T exactly when its message is at most largest_message_below(T)
    m_med = sizes.largest_message_below(5000)
    m_low = sizes.largest_message_below(1500)
    assert dist.cdf(math.log(m_med)) == pytest.approx(0.5)
    assert dist.cdf(math.log(m_low)) == pytest.approx(0.05)
    assert sizes.accepted_total(m_med) < 5000 <= sizes.accepted_total(m_med + 1)


def test_largest_message_below():
    sizes = SizeModel()
    for total in (500, 1500, 5000, 20_000):
        m = sizes.largest_message_below(total)
        assert sizes.accepted_total(m) < total <= sizes.accepted_total(m + 1)


@pytest.mark.parametrize("change", [
    {"p_connect_fail": 1.5},
    {"reason_weights": {r: 0.1 for r in REASONS}},
    {"diurnal_amplitude": 1.0},
    {"servers": ()},
    {"n_sessions": -1},
    {"min_pair_gap_ms": 500},
    {"sizes": SizeModel(failed_tail=1.0)},
    {"sizes": SizeModel(accepted_low_bytes=6000)},
])
def test_invalid_configs(change):
    with pytest.raises(InvalidConfig):
        generate(replace(SynthConfig(n_sessions=10), **change))


def test_invalid_ensemble_mix():
    with pytest.raises(InvalidConfig) as exc:
        generate(EnsembleConfig(n_sessions=10, spam_mix=(0.5, 0.5, 0.5)))
    assert exc.value.field == "spam_mix"


def peak_hour(counts):
    """Phase of the first Fourier harmonic of a 24-slot profile, in hours."""
    angle = 2 * np.pi * (np.arange(24) + 0.5) / 24
    return (np.arctan2(counts @ np.sin(angle), counts @ np.cos(angle)) * 24 / (2 * np.pi)) % 24


def test_diurnal_profile_peaks_where_configured():
    cfg = SynthConfig(n_sessions=60000, diurnal_amplitude=0.8, diurnal_peak_hours=(3, 3, 15))
    result = generate(cfg)
    hours = (result.start_ms // 3_600_000) % 24
    accepted = np.bincount(hours[result.classes == A], minlength=24)
    rejected = np.bincount(hours[result.classes == R], minlength=24)
    assert peak_hour(accepted) == pytest.approx(15, abs=0.5)
    assert peak_hour(rejected) == pytest.approx(3, abs=0.5)


def test_sender_lists_follow_pools():
    cfg = EnsembleConfig(n_sessions=20000, seed=3)
    result = generate(cfg)
    black, white = sender_lists(cfg)
    spam_src = set(result.src[result.spammer].tolist())
    ham_src = set(result.src[~result.spammer].tolist())
    black_ips = {int(n.network_address) for n in black.entries}
    white_ips = {int(n.network_address) for n in white.entries}
    assert not black_ips & white_ips
    assert black_ips & spam_src and not black_ips & ham_src
    assert white_ips & ham_src and not white_ips & spam_src
    assert len(black) / cfg.n_spammers == pytest.approx(0.9, abs=0.02)
    assert len(white) / cfg.n_legit == pytest.approx(0.5, abs=0.05)


def test_ensemble_spreads_over_servers():
    cfg = EnsembleConfig(n_sessions=20000)
    counts = np.unique(generate(cfg).dst, return_counts=True)[1]
    assert len(counts) == 10
    assert counts.max() / counts.min() == pytest.approx(10, rel=0.3)
