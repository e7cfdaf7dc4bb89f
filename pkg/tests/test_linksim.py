import itertools
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import ideal_config, small_grid
from oracles import greedy_pairs_reference, max_consecutive_matching
from qrlink import analysis as an
from qrlink import linksim as ls
from qrlink import photonics as ph
from qrlink.qstate import BellKind, apply_phase_flip_a, bell_state, fidelity_to_bell, maximally_mixed

PLUS, MINUS = BellKind.PSI_PLUS, BellKind.PSI_MINUS
OPTS = ls.ProtocolOptions(coincidence_window_ns=20.0, fixed_delay_filter_ns=500.0)


def clicks(times, detectors=None, tags=None):
    detectors = detectors or ["D1"] * len(times)
    tags = tags or [{"fromA"}] * len(times)
    grid = ph.TemporalGrid()
    return [
        ls.DetectionEvent(t % grid.frame_duration_ns, d, frozenset(g), frame=int(t // grid.frame_duration_ns), mode_index=int((t % grid.frame_duration_ns) // 83.0))
        for t, d, g in zip(times, detectors, tags)
    ]


# --- configuration -----------------------------------------------------------


def test_latency_and_capacity():
    cfg = ls.LinkConfig(channel_a=ph.ChannelConfig(7.9), channel_b=ph.ChannelConfig(9.9))
    assert cfg.round_trip_us == 99.0
    assert cfg.one_way_us == 49.5
    assert cfg.mode_capacity in (1204, 1205)


def test_storage_shorter_than_round_trip_rejected():
    cfg = ls.LinkConfig(channel_a=ph.ChannelConfig(9.9), memory_a=ls.MemoryConfig(storage_time_us=50.0))
    with pytest.raises(ls.ConfigError):
        cfg.validate()
    with pytest.raises(ls.ConfigError):
        ls.run_link(cfg, 1)
    # fine without feed-forward or in bypass mode
    cfg.with_protocol(feed_forward=False).validate()
    cfg.with_protocol(memory_bypass=True).validate()


def test_processing_delay_counts_towards_deadline():
    cfg = ls.LinkConfig(channel_a=ph.ChannelConfig(9.9)).with_protocol(processing_delay_us=2.0)
    with pytest.raises(ls.ConfigError):
        cfg.validate()


@pytest.mark.parametrize(
    "kwargs",
    [
        {"coincidence_window_ns": 0},
        {"fixed_delay_filter_ns": -500.0},
        {"duty_cycle": 0},
        {"tpc_success_probability": 1.5},
    ],
)
def test_protocol_validation(kwargs):
    with pytest.raises(ValueError):
        ls.ProtocolOptions(**kwargs)


def test_memory_validation():
    with pytest.raises(ValueError):
        ls.MemoryConfig(storage_efficiency=1.2)
    with pytest.raises(ValueError):
        ls.MemoryConfig(storage_time_us=0)


def test_records_validation():
    with pytest.raises(ValueError):
        ls.HeraldRecord(10.0, 10.0, PLUS)
    with pytest.raises(ValueError):
        ls.DetectionEvent(1.0, "D3", frozenset({"fromA"}))
    with pytest.raises(ValueError):
        ls.DetectionEvent(1.0, "D1", frozenset())


def test_provenance_round_trip():
    for r in range(1, 4):
        for combo in itertools.combinations(["fromA", "fromB", "dark"], r):
            assert ls.tags_to_provenance(ls.provenance_to_tags(combo)) == frozenset(combo)


# --- generation --------------------------------------------------------------


def test_no_light_no_detections():
    cfg = ideal_config(mu=0.0)
    run = ls.run_link(cfg, 50, keep_events=True)
    assert run.n_events == 0 and run.n_heralds == 0 and len(run.events) == 0


def test_single_injected_pair_gives_one_click_no_herald():
    cfg = ideal_config()
    log = ls.inject_pairs(cfg, {0: 1}, {}, np.random.default_rng(0))
    assert len(log) == 1
    assert log.event(0).provenance == frozenset({"fromA"})
    assert ls.pair_detections(log, OPTS) == []
    assert ls.pair_detections(log, replace(OPTS, fixed_delay_filter_ns=None)) == []


def test_click_rate_matches_occupation():
    # lossless, one source: every occupied mode gives exactly one click
    cfg = ideal_config(mu=0.02)
    cfg = replace(cfg, source_b=replace(cfg.source_b, pump_power_mw=0.0))
    run = ls.run_link(cfg, 200)
    n_modes = 200 * cfg.grid.mode_count
    p = ph.occupation_probability(0.02)
    assert abs(run.n_events - p * n_modes) < 4 * math.sqrt(n_modes * p)


def test_detector_efficiency_thins_clicks():
    cfg = ideal_config(mu=0.02)
    half = replace(cfg, detectors=(ph.DetectorConfig(0.5, 0.0), ph.DetectorConfig(0.5, 0.0)))
    full = ls.run_link(cfg, 300).n_events
    thin = ls.run_link(half, 300).n_events
    assert 0.45 < thin / full < 0.56


def test_dark_counts_only():
    cfg = replace(ideal_config(mu=0.0), detectors=(ph.DetectorConfig(1.0, 1e5), ph.DetectorConfig(1.0, 1e5)))
    run = ls.run_link(cfg, 500, keep_events=True)
    expected = 2 * 1e5 * run.duration_s
    assert abs(run.n_events - expected) < 4 * math.sqrt(expected)
    assert all(e.provenance == frozenset({"dark"}) for e in run.events)


def test_event_times_within_frames():
    cal = ideal_config(mu=0.05)
    run = ls.run_link(cal, 20, keep_events=True)
    fd = cal.grid.frame_duration_ns
    for e in run.events:
        assert 0 <= e.time_ns < fd
        assert 0 <= e.mode_index < cal.grid.mode_count
        assert e.provenance


# --- pairing -----------------------------------------------------------------


def test_pairing_examples():
    assert len(ls.pair_detections(clicks([1000.0, 1500.0]), OPTS)) == 1
    assert len(ls.pair_detections(clicks([1000.0, 1700.0]), OPTS)) == 0
    h = ls.pair_detections(clicks([1000.0, 1500.0, 2000.0]), OPTS)
    assert [(x.t1_ns, x.t2_ns) for x in h] == [(1000.0, 1500.0)]
    first, second = ls.pair_indices(np.array([0.0, 500.0, 1000.0]), 1e5)
    assert list(zip(first, second)) == [(0, 1)]


def test_window_edges():
    assert len(ls.pair_detections(clicks([1000.0, 1510.0]), OPTS)) == 1
    assert len(ls.pair_detections(clicks([1000.0, 1510.5]), OPTS)) == 0


def test_pairs_respect_storage_window():
    opts = replace(OPTS, fixed_delay_filter_ns=None)
    assert len(ls.pair_detections(clicks([0.0, 100_000.0]), opts, storage_window_ns=100_000.0)) == 1
    assert len(ls.pair_detections(clicks([0.0, 100_001.0]), opts, storage_window_ns=100_000.0)) == 0


def test_same_mode_clicks_do_not_pair():
    ev = clicks([1000.0, 1010.0], ["D1", "D2"])
    assert ev[0].mode_index == ev[1].mode_index
    assert ls.pair_detections(ev, replace(OPTS, fixed_delay_filter_ns=None)) == []


def test_parity_from_detectors():
    for d1, d2, kind in (("D1", "D1", PLUS), ("D2", "D2", PLUS), ("D1", "D2", MINUS), ("D2", "D1", MINUS)):
        (h,) = ls.pair_detections(clicks([1000.0, 1500.0], [d1, d2]), OPTS)
        assert h.parity is kind


def test_greedy_matches_enumeration_on_short_sequences():
    """Every click sequence of up to five clicks on a coarse time/mode lattice."""
    window = 2.0
    checked = 0
    for n in range(6):
        for gaps in itertools.product((0.0, 1.0, 2.0, 3.0), repeat=max(n - 1, 0)):
            times = np.concatenate(([0.0], np.cumsum(gaps))) if n else np.zeros(0)
            for same in itertools.product((False, True), repeat=max(n - 1, 0)):
                modes = np.zeros(n, np.int64)
                for i, s in enumerate(same):
                    modes[i + 1] = modes[i] if s else modes[i] + 1
                first, second = ls.pair_indices(times, window, modes)
                got = list(zip(first.tolist(), second.tolist()))
                assert got == greedy_pairs_reference(times, modes, window)
                assert len(got) == max_consecutive_matching(times, modes, window)
                checked += 1
    assert checked == sum(4 ** (k - 1) * 2 ** (k - 1) for k in range(1, 6)) + 1


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 3000, allow_nan=False), min_size=0, max_size=40), st.floats(1, 1000))
def test_pairing_soundness(raw, window):
    times = np.sort(np.array(raw, float))
    modes = np.floor(times / 83.0).astype(np.int64)
    first, second = ls.pair_indices(times, window, modes)
    used = np.concatenate([first, second])
    assert len(set(used.tolist())) == used.size
    gaps = times[second] - times[first]
    assert np.all((gaps > 0) & (gaps <= window))
    assert np.all(modes[first] != modes[second])
    assert list(zip(first.tolist(), second.tolist())) == greedy_pairs_reference(times, modes, window)


def test_streaming_pairer_matches_global_pairing():
    cfg = small_grid(ideal_config(mu=0.05, filt=None), 40)
    run = ls.run_link(cfg, 3 * ls.FRAMES_PER_STREAM + 17, keep_events=True)
    log = run.events
    first, _ = ls.pair_indices(log.time_ns, cfg.storage_window_ns, log.mode)
    assert run.n_heralds == first.size
    assert np.array_equal(run.heralds.t1, log.time_ns[first])


# --- classification and states -----------------------------------------------


def rec(ex=(1, 1)):
    return ls.HeraldRecord(0.0, 500.0, PLUS, mode_indices=(0, 6), excitations=ex)


def test_classification_examples():
    a, b, d = frozenset({"fromA"}), frozenset({"fromB"}), frozenset({"dark"})
    mk = lambda p: ls.DetectionEvent(0.0, "D1", p)  # noqa: E731
    assert ls.classify_herald(rec(), [mk(a), mk(b)]) is ls.Category.GENUINE
    assert ls.classify_herald(rec(), [mk(b), mk(a)]) is ls.Category.GENUINE
    assert ls.classify_herald(rec((2, 0)), [mk(a), mk(a)]) is ls.Category.SAME_SOURCE
    assert ls.classify_herald(rec(), [mk(a), mk(d)]) is ls.Category.DARK_ASSISTED
    assert ls.classify_herald(rec(), [mk(frozenset({"fromA", "dark"})), mk(b)]) is ls.Category.DARK_ASSISTED
    assert ls.classify_herald(rec((2, 1)), [mk(a), mk(b)]) is ls.Category.MULTIPAIR
    assert ls.classify_herald(rec(), [mk(frozenset({"fromA", "fromB"})), mk(b)]) is ls.Category.MULTIPAIR


def test_conditional_state_examples():
    assert ls.conditional_state(ls.Category.GENUINE, PLUS, 1.0).allclose(bell_state(PLUS))
    assert ls.conditional_state(ls.Category.GENUINE, MINUS, 1.0).allclose(bell_state(MINUS))
    for cat in (ls.Category.DARK_ASSISTED, ls.Category.MULTIPAIR, ls.Category.SAME_SOURCE):
        for kind in BellKind:
            assert ls.conditional_state(cat, kind, 0.9).allclose(maximally_mixed())


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1), st.sampled_from(list(BellKind)))
def test_genuine_state_fidelity(v, kind):
    rho = ls.genuine_state(kind, v)
    assert fidelity_to_bell(rho, kind) == pytest.approx(0.5 + 0.5 * v, abs=1e-12)
    rho.__class__(rho.data)  # physical


def test_effective_visibility_mismatch():
    cfg = ideal_config(v=0.9)
    assert ls.effective_visibility(cfg, 0.0) == pytest.approx(0.9)
    assert ls.effective_visibility(cfg, 100.0) == pytest.approx(0.9 * math.exp(-1))
    boosted = cfg.with_protocol(retrieval_visibility_boost=0.2)
    assert ls.effective_visibility(boosted, 0.0) == 1.0


# --- feed-forward, retrieval, verification -----------------------------------


def pair_for(parity, t1=0.0, t2=500.0, v=1.0):
    h = ls.HeraldRecord(t1, t2, parity, ls.Category.GENUINE)
    return ls.DeliveredPair(h, ls.conditional_state(ls.Category.GENUINE, parity, v), parity, t2)


def test_feedforward_examples():
    cfg = ls.LinkConfig(channel_a=ph.ChannelConfig(9.9), channel_b=ph.ChannelConfig(9.9))
    out = ls.apply_feedforward(pair_for(MINUS), cfg)
    assert out.kind is PLUS
    assert fidelity_to_bell(out.state, PLUS) == pytest.approx(1)
    assert out.delivered_at_ns >= 500.0 + 49_500.0
    same = ls.apply_feedforward(pair_for(PLUS), cfg)
    assert same.state.allclose(bell_state(PLUS))


def test_feedforward_deadline():
    cfg = ls.LinkConfig(channel_a=ph.ChannelConfig(9.9), channel_b=ph.ChannelConfig(9.9))
    late = pair_for(PLUS, t1=0.0, t2=100_000.0 - 1.0)
    assert ls.apply_feedforward(late, cfg) is None
    ok = pair_for(PLUS, t1=0.0, t2=1_000.0)
    assert ls.apply_feedforward(ok, cfg) is not None
    d = ls.deliver([late.herald, ok.herald], cfg, np.random.default_rng(0))
    assert d.dropped == 1 and len(d.pairs) == 1


def test_retrieve_examples():
    rng = np.random.default_rng(0)
    pair = pair_for(PLUS)
    full = ls.MemoryConfig(storage_efficiency=1.0)
    none = ls.MemoryConfig(storage_efficiency=0.0)
    assert all(ls.retrieve(pair, full, full, rng).retrieval_success == (True, True) for _ in range(100))
    assert all(ls.retrieve(pair, none, none, rng).retrieval_success == (False, False) for _ in range(100))


def test_retrieve_joint_rate():
    rng = np.random.default_rng(1)
    pair = pair_for(PLUS)
    ma, mb = ls.MemoryConfig(storage_efficiency=0.166), ls.MemoryConfig(storage_efficiency=0.157)
    n = 10**6
    hits = sum(ls.retrieve(pair, ma, mb, rng).retrieval_success == (True, True) for _ in range(n))
    assert hits / n == pytest.approx(0.166 * 0.157, abs=0.0005)
    assert 0.166 * 0.157 == pytest.approx(0.0261, abs=1e-4)


def test_deliver_sampled_retrieval_rate():
    cfg = replace(ideal_config(), memory_a=ls.MemoryConfig(storage_efficiency=0.166), memory_b=ls.MemoryConfig(storage_efficiency=0.157))
    heralds = [ls.HeraldRecord(float(i), float(i) + 500, PLUS, ls.Category.GENUINE) for i in range(200_000)]
    d = ls.deliver(heralds, cfg, np.random.default_rng(5))
    both = np.mean([p.retrieval_success == (True, True) for p in d.pairs])
    assert both == pytest.approx(0.0261, abs=0.0015)


def test_verify_requires_retrieval():
    with pytest.raises(ValueError):
        ls.verify(pair_for(PLUS), ideal_config(), np.random.default_rng())


def test_fourfold_weights_limits():
    cfg = ideal_config()
    p4, clean = ls.fourfold_weights(cfg, np.array([1, 0]), np.array([1, 1]))
    cap = ls.echo_capture(20.0, 83.0)
    assert p4[0] == pytest.approx(cap**2)
    assert clean[0] == pytest.approx(cap**2)
    assert p4[1] == 0 and clean[1] == 0


def test_verified_state_mixes_in_noise():
    rho = bell_state(PLUS)
    out = ls.verified_state(rho, ls.Category.GENUINE, p4=0.2, clean=0.15)
    assert fidelity_to_bell(out, PLUS) == pytest.approx(0.75 * 1 + 0.25 * 0.25)
    assert ls.verified_state(rho, ls.Category.MULTIPAIR, 0.2, 0.15).allclose(maximally_mixed())


# --- bypass ------------------------------------------------------------------


def test_tpc_survival_count():
    cfg = ideal_config().with_protocol(memory_bypass=True, feed_forward=False)
    heralds = [ls.HeraldRecord(float(i), float(i) + 500, PLUS, ls.Category.GENUINE) for i in range(10**6)]
    d = ls.deliver(heralds, cfg, np.random.default_rng(0))
    survived = sum(p.tpc_success for p in d.pairs)
    assert abs(survived - 2.5e5) < 1.5e3


def test_bypass_keeps_heralded_parity():
    cfg = ideal_config().with_protocol(memory_bypass=True, feed_forward=True)
    heralds = [ls.HeraldRecord(0.0, 500.0, PLUS, ls.Category.GENUINE), ls.HeraldRecord(0.0, 500.0, MINUS, ls.Category.GENUINE)]
    d = ls.deliver(heralds, cfg)
    assert [p.kind for p in d.pairs] == [PLUS, MINUS]
    assert fidelity_to_bell(d.pairs[0].state, PLUS) == pytest.approx(1)
    assert fidelity_to_bell(d.pairs[1].state, MINUS) == pytest.approx(1)


def test_bypass_subsets_ideal():
    cfg = ideal_config(mu=0.002, filt=None)
    run = ls.run_link(cfg.with_protocol(memory_bypass=True, feed_forward=False), 300)
    summary = ls.summarize(run.analyzed(), run.cfg)
    genuine = run.heralds.take(np.flatnonzero(run.heralds.categories() == 0))
    by = ls.summarize(genuine, run.cfg).by_kind
    assert fidelity_to_bell(by[PLUS], PLUS) == pytest.approx(1, abs=1e-12)
    assert fidelity_to_bell(by[MINUS], MINUS) == pytest.approx(1, abs=1e-12)
    assert summary.by_kind[PLUS] is not None


# --- run level invariants ----------------------------------------------------


@pytest.fixture(scope="module")
def busy_run():
    cfg = replace(ideal_config(mu=0.05, filt=500.0, window=40.0, v=0.95), detectors=(ph.DetectorConfig(0.9, 5e4), ph.DetectorConfig(0.9, 5e4)))
    cfg = replace(cfg, channel_a=ph.ChannelConfig(7.9), channel_b=ph.ChannelConfig(9.9))
    return ls.run_link(cfg, 400, keep_events=True)


def test_run_invariants(busy_run):
    run = busy_run
    cfg = run.cfg
    log = run.events
    first, second = ls.pair_indices(log.time_ns, cfg.storage_window_ns, log.mode)
    # parity rule, exhaustively over all pairs
    same = log.detector[first] == log.detector[second]
    recs = ls.HeraldTable.from_events(log, first, second).records()
    assert [r.parity is PLUS for r in recs] == same.tolist()
    assert all(0 < r.t2_ns - r.t1_ns <= cfg.storage_window_ns for r in recs)
    # stored heralds are exactly the filtered ones
    table = run.analyzed()
    assert np.all(np.abs(table.t2 - table.t1 - 500.0) <= 20.0)
    assert len(table) <= run.n_heralds
    d = run.delivered()
    for p in d.pairs:
        assert p.kind is PLUS
        assert p.delivered_at_ns - p.herald.t1_ns <= cfg.storage_window_ns + 1e-9
        assert p.delivered_at_ns >= p.herald.t2_ns + 1000 * cfg.one_way_us
    assert d.analyzed == len(d.pairs) + d.dropped


def test_summarize_matches_object_path(busy_run):
    run = busy_run
    for cfg in (run.cfg, run.cfg.with_protocol(memory_bypass=True, feed_forward=False)):
        table = run.analyzed(cfg)
        s = ls.summarize(table, cfg)
        d = ls.deliver(table.records(), cfg)
        assert s.delivered == len(d.pairs) and s.dropped == d.dropped
        assert s.expected_fourfold == pytest.approx(sum(p.fourfold_probability for p in d.pairs), rel=1e-12)
        assert s.state.allclose(an.ensemble_state(d.pairs), atol=1e-12)
        for kind in BellKind:
            ref = an.ensemble_state(d.pairs, kind)
            if ref is not None:
                assert s.by_kind[kind].allclose(ref, atol=1e-12)


def test_feedforward_ideal_delivers_psi_plus():
    cfg = ideal_config(mu=0.003, filt=500.0, window=20.0)
    cfg = replace(cfg, memory_a=ls.MemoryConfig(1.0), memory_b=ls.MemoryConfig(1.0))
    run = ls.run_link(cfg, 2000)
    table = run.analyzed()
    genuine = table.take(np.flatnonzero(table.categories() == 0))
    d = ls.deliver(genuine.records(), cfg)
    mism = [abs(p.herald.t2_ns - p.herald.t1_ns - 500.0) for p in d.pairs]
    assert d.pairs
    for p, m in zip(d.pairs, mism):
        assert fidelity_to_bell(p.state, PLUS) == pytest.approx(0.5 + 0.5 * math.exp(-m / 100.0), abs=1e-12)
    # without a timing mismatch the delivered state is exact
    exact = ls.deliver([replace(p.herald, t2_ns=p.herald.t1_ns + 500.0) for p in d.pairs], cfg)
    assert all(fidelity_to_bell(p.state, PLUS) == pytest.approx(1, abs=1e-12) for p in exact.pairs)
    assert {p.herald.parity for p in exact.pairs} == {PLUS, MINUS}


def test_determinism_and_thread_invariance():
    cfg = replace(ideal_config(mu=0.03, filt=500.0), detectors=(ph.DetectorConfig(0.9, 1e4), ph.DetectorConfig(0.9, 1e4)))
    n = 2 * ls.FRAMES_PER_STREAM + 5
    a = ls.run_link(cfg, n, keep_events=True)
    b = ls.run_link(cfg, n, keep_events=True, threads=3)
    assert a.n_events == b.n_events and a.n_heralds == b.n_heralds and a.clicks == b.clicks
    for f in ls._EVENT_FIELDS:
        assert np.array_equal(getattr(a.events, f), getattr(b.events, f))
    for f in ls._HERALD_FIELDS:
        assert np.array_equal(getattr(a.heralds, f), getattr(b.heralds, f))
    c = ls.run_link(replace(cfg, seed=cfg.seed + 1), n)
    assert c.n_events != a.n_events


def test_keep_events_prefix():
    cfg = ideal_config(mu=0.05)
    full = ls.run_link(cfg, 30, keep_events=True).events
    part = ls.run_link(cfg, 30, keep_events=5).events
    assert np.array_equal(part.time_ns, full.time_ns[full.frame < 5])


def test_analyzed_window_limits():
    cfg = ideal_config(mu=0.05, filt=500.0, window=20.0)
    run = ls.run_link(cfg, 50, keep_window_ns=40.0)
    assert len(run.analyzed(cfg.with_protocol(coincidence_window_ns=40.0))) >= len(run.analyzed())
    with pytest.raises(ValueError):
        run.analyzed(cfg.with_protocol(coincidence_window_ns=60.0))
    with pytest.raises(ValueError):
        run.analyzed(cfg.with_protocol(fixed_delay_filter_ns=None))


def test_duty_cycle_scales_rates():
    cfg = ideal_config(mu=0.05)
    a = ls.run_link(cfg, 50)
    b = ls.run_link(cfg.with_protocol(duty_cycle=0.5), 50)
    assert b.herald_rate_hz == pytest.approx(a.herald_rate_hz / 2)


# --- SPI ---------------------------------------------------------------------


def test_spi_phase_bookkeeping():
    cfg = ideal_config().with_protocol(mode=ls.Mode.SPI)
    assert cfg.delta_phi == 0
    moved = replace(cfg, channel_a=replace(cfg.channel_a, phase_offset_rad=0.3), channel_b=replace(cfg.channel_b, phase_offset_rad=0.5))
    assert moved.delta_phi - cfg.delta_phi == 0.8


@settings(max_examples=100, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5))
def test_spi_phase_additive(a, b, laser):
    cfg = ideal_config().with_protocol(mode=ls.Mode.SPI, laser_phase_offset_rad=laser)
    moved = replace(cfg, channel_a=replace(cfg.channel_a, phase_offset_rad=a), channel_b=replace(cfg.channel_b, phase_offset_rad=b))
    assert moved.delta_phi == laser + a + b
    rho = ls.spi_state(1, moved.delta_phi)
    assert rho.data[2, 1] == pytest.approx(0.5 * np.exp(-1j * moved.delta_phi), abs=1e-12)


def test_spi_requires_spi_mode():
    with pytest.raises(ValueError):
        ls.spi_heralding(ideal_config(), np.random.default_rng())


def test_spi_counts_every_click():
    cfg = ideal_config(mu=0.02)
    res = ls.spi_heralding(cfg.with_protocol(mode=ls.Mode.SPI), n_frames=50)
    run = ls.run_link(cfg, 50)
    assert res.total == run.n_events
    assert res.state(0).allclose(ls.spi_state(1, 0.0))
    assert res.state(1).allclose(ls.spi_state(-1, 0.0))


@pytest.mark.parametrize("mu", [0.001, 0.003, 0.01, 0.03, 0.1])
def test_tpi_spi_ratio(mu):
    cfg = ideal_config(mu=mu, filt=None)
    run = ls.run_link(cfg, 2000 if mu < 0.01 else 500, store_heralds=False)
    spi = ls.spi_heralding(cfg.with_protocol(mode=ls.Mode.SPI), run=run)
    ratio = run.herald_rate_hz / spi.click_rate_hz
    assert 0.40 < ratio <= 0.50


def test_tpi_state_ignores_channel_phase(busy_run):
    run = busy_run
    base = ls.summarize(run.analyzed(), run.cfg).state
    for a, b in ((0.3, 0.5), (math.pi, -1.0), (2.0, 0.0)):
        cfg = replace(run.cfg, channel_a=replace(run.cfg.channel_a, phase_offset_rad=a), channel_b=replace(run.cfg.channel_b, phase_offset_rad=b))
        assert np.array_equal(ls.summarize(run.analyzed(cfg), cfg).state.data, base.data)


def test_phase_flip_maps_minus_heralds():
    rho = ls.genuine_state(MINUS, 0.8)
    assert apply_phase_flip_a(rho).allclose(ls.genuine_state(PLUS, 0.8))
