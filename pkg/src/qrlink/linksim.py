"""Discrete-event simulation of the three-node TPI link.

Time is kept in nanoseconds, referenced to photon emission at the sources
(fibre delays towards node C are assumed compensated). Frames of
``grid.frame_duration_us`` follow each other without gaps; frame ``f`` starts
at ``f * frame_duration``.

RNG streams: photon emission for frames ``[k*B, (k+1)*B)`` with
``B = FRAMES_PER_STREAM`` draws from ``SeedSequence(seed, spawn_key=(0, k))``.
Retrieval and verification draws use ``spawn_key=(1,)``, TPC draws use
``spawn_key=(2,)``. Results therefore do not depend on how blocks are
scheduled across workers.
"""

from __future__ import annotations

import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import photonics as ph
from .qstate import BellKind, DensityMatrix, apply_phase_flip_a, bell_state

FRAMES_PER_STREAM = 1024
ECHO_COVERAGE = 0.9  # fraction of the retrieved echo inside one mode duration

TAG_A = 1
TAG_B = 2
TAG_DARK = 4
_TAG_NAMES = ((TAG_A, "fromA"), (TAG_B, "fromB"), (TAG_DARK, "dark"))


class ConfigError(ValueError):
    """Configuration violates a physical constraint."""


class Mode(enum.Enum):
    TPI = "TPI"
    SPI = "SPI"


class Category(enum.Enum):
    GENUINE = "genuine_cross_source"
    SAME_SOURCE = "same_source"
    DARK_ASSISTED = "dark_assisted"
    MULTIPAIR = "multipair"


_CATEGORY_CODES = (Category.GENUINE, Category.SAME_SOURCE, Category.DARK_ASSISTED, Category.MULTIPAIR)


@dataclass(frozen=True)
class MemoryConfig:
    """AFC memory plus the local verification (retrieval-side) detection.

    ``verification_efficiency`` lumps signal collection, TPC transmission and
    detector efficiency. ``background_rate_hz`` is the retrieval-side noise
    (memory noise and detector dark counts) seen inside the coincidence window.
    """

    storage_efficiency: float = 0.166
    storage_time_us: float = 100.0
    bandwidth_mhz: float = 20.0
    verification_efficiency: float = 1.0
    background_rate_hz: float = 0.0

    def __post_init__(self):
        for name in ("storage_efficiency", "verification_efficiency"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be a probability, got {v}")
        if self.storage_time_us <= 0 or self.bandwidth_mhz <= 0:
            raise ValueError("storage time and bandwidth must be positive")
        if self.background_rate_hz < 0:
            raise ValueError("background_rate_hz must be non-negative")


@dataclass(frozen=True)
class ProtocolOptions:
    mode: Mode = Mode.TPI
    coincidence_window_ns: float = 20.0
    fixed_delay_filter_ns: float | None = 500.0
    memory_bypass: bool = False
    feed_forward: bool = True
    laser_phase_offset_rad: float = 0.0
    processing_delay_us: float = 0.0
    duty_cycle: float = 1.0
    retrieval_visibility_boost: float = 0.0
    tpc_success_probability: float = 0.25

    def __post_init__(self):
        if isinstance(self.mode, str):
            object.__setattr__(self, "mode", Mode(self.mode))
        if self.coincidence_window_ns <= 0:
            raise ValueError("coincidence window must be positive")
        if self.fixed_delay_filter_ns is not None and self.fixed_delay_filter_ns <= 0:
            raise ValueError("fixed-delay filter must be positive")
        if not 0 < self.duty_cycle <= 1:
            raise ValueError("duty_cycle must lie in (0, 1]")
        if self.processing_delay_us < 0 or self.retrieval_visibility_boost < 0:
            raise ValueError("processing delay and visibility boost must be non-negative")
        if not 0 <= self.tpc_success_probability <= 1:
            raise ValueError("tpc_success_probability must be a probability")


@dataclass(frozen=True)
class LinkConfig:
    source_a: ph.SourceConfig = field(default_factory=ph.SourceConfig)
    source_b: ph.SourceConfig = field(default_factory=ph.SourceConfig)
    channel_a: ph.ChannelConfig = field(default_factory=ph.ChannelConfig)
    channel_b: ph.ChannelConfig = field(default_factory=ph.ChannelConfig)
    detectors: tuple[ph.DetectorConfig, ph.DetectorConfig] = (ph.DetectorConfig(), ph.DetectorConfig())
    memory_a: MemoryConfig = field(default_factory=MemoryConfig)
    memory_b: MemoryConfig = field(default_factory=MemoryConfig)
    grid: ph.TemporalGrid = field(default_factory=ph.TemporalGrid)
    protocol: ProtocolOptions = field(default_factory=ProtocolOptions)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "detectors", tuple(self.detectors))
        if len(self.detectors) != 2:
            raise ValueError("node C needs exactly two detectors")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def validate(self) -> "LinkConfig":
        """Check cross-component physical constraints; raises ConfigError."""
        p = self.protocol
        if p.feed_forward and not p.memory_bypass and p.mode is Mode.TPI:
            need = self.round_trip_us + p.processing_delay_us
            for name, mem in (("A", self.memory_a), ("B", self.memory_b)):
                if mem.storage_time_us < need:
                    raise ConfigError(
                        f"memory {name} storage time {mem.storage_time_us} us is shorter than "
                        f"the {need:g} us round trip needed for feed-forward"
                    )
        return self

    @property
    def mode_capacity(self) -> int:
        return self.grid.mode_count

    @property
    def mu_a(self) -> float:
        return ph.mean_pairs_per_mode(self.source_a, self.grid)

    @property
    def mu_b(self) -> float:
        return ph.mean_pairs_per_mode(self.source_b, self.grid)

    @property
    def idler_transmission_a(self) -> float:
        """Pair emission to the BSM beamsplitter (detector efficiency excluded)."""
        return self.source_a.heralding_efficiency * ph.survival_probability(self.channel_a)

    @property
    def idler_transmission_b(self) -> float:
        return self.source_b.heralding_efficiency * ph.survival_probability(self.channel_b)

    @property
    def indistinguishability(self) -> float:
        return math.sqrt(self.source_a.indistinguishability * self.source_b.indistinguishability)

    @property
    def coherence_time_ns(self) -> float:
        return min(self.source_a.coherence_time_ns, self.source_b.coherence_time_ns)

    @property
    def one_way_us(self) -> float:
        return max(ph.propagation_delay(self.channel_a), ph.propagation_delay(self.channel_b))

    @property
    def round_trip_us(self) -> float:
        return 2.0 * self.one_way_us

    @property
    def storage_window_ns(self) -> float:
        return 1000.0 * min(self.memory_a.storage_time_us, self.memory_b.storage_time_us)

    @property
    def delta_phi(self) -> float:
        """SPI number-state phase: laser phase plus both link phases."""
        return self.protocol.laser_phase_offset_rad + self.channel_a.phase_offset_rad + self.channel_b.phase_offset_rad

    def with_protocol(self, **changes) -> "LinkConfig":
        return replace(self, protocol=replace(self.protocol, **changes))


# --------------------------------------------------------------------------
# records


@dataclass(frozen=True)
class DetectionEvent:
    time_ns: float  # since frame start
    detector: str  # "D1" or "D2"
    provenance: frozenset
    frame: int = 0
    mode_index: int = 0  # within frame

    def __post_init__(self):
        if not self.provenance:
            raise ValueError("provenance must be non-empty")
        if self.detector not in ("D1", "D2"):
            raise ValueError("detector must be D1 or D2")


def tags_to_provenance(tags: int) -> frozenset:
    return frozenset(name for bit, name in _TAG_NAMES if tags & bit)


def provenance_to_tags(prov: Iterable[str]) -> int:
    lookup = {name: bit for bit, name in _TAG_NAMES}
    return sum(lookup[p] for p in set(prov))


@dataclass(frozen=True)
class HeraldRecord:
    t1_ns: float
    t2_ns: float
    parity: BellKind
    category: Category | None = None
    mode_indices: tuple[int, int] = (0, 0)  # global mode indices
    detectors: tuple[int, int] = (0, 0)
    excitations: tuple[int, int] = (1, 1)  # pairs emitted by (A, B) into the two modes

    def __post_init__(self):
        if not self.t1_ns < self.t2_ns:
            raise ValueError("herald needs t1 < t2")


@dataclass(frozen=True)
class DeliveredPair:
    herald: HeraldRecord
    state: DensityMatrix
    kind: BellKind  # state the pair is announced as
    delivered_at_ns: float
    retrieval_success: tuple[bool, bool] | None = None
    fourfold_probability: float = 0.0
    verified_state: DensityMatrix | None = None
    verified: bool | None = None
    tpc_success: bool | None = None


_EVENT_FIELDS = ("time_ns", "frame", "mode", "detector", "tags", "ex_a", "ex_b")
_EVENT_DTYPES = (float, np.int64, np.int64, np.int8, np.uint8, np.int64, np.int64)


class EventLog:
    """Array-backed, time-sorted detection log.

    ``mode`` is the global mode index (frame * modes_per_frame + mode in
    frame); ``ex_a`` and ``ex_b`` are the pairs sources A and B emitted into
    that mode, which the classifier needs later.
    """

    __slots__ = _EVENT_FIELDS + ("frame_duration_ns", "modes_per_frame")

    def __init__(self, time_ns, frame, mode, detector, tags, frame_duration_ns: float, modes_per_frame: int, ex_a=None, ex_b=None):
        self.time_ns = np.asarray(time_ns, dtype=float)
        n = self.time_ns.size
        self.frame = np.asarray(frame, dtype=np.int64)
        self.mode = np.asarray(mode, dtype=np.int64)
        self.detector = np.asarray(detector, dtype=np.int8)
        self.tags = np.asarray(tags, dtype=np.uint8)
        self.ex_a = np.zeros(n, np.int64) if ex_a is None else np.asarray(ex_a, dtype=np.int64)
        self.ex_b = np.zeros(n, np.int64) if ex_b is None else np.asarray(ex_b, dtype=np.int64)
        self.frame_duration_ns = frame_duration_ns
        self.modes_per_frame = modes_per_frame

    def __len__(self) -> int:
        return len(self.time_ns)

    def event(self, i: int) -> DetectionEvent:
        f = int(self.frame[i])
        return DetectionEvent(
            time_ns=float(self.time_ns[i] - f * self.frame_duration_ns),
            detector="D1" if self.detector[i] == 0 else "D2",
            provenance=tags_to_provenance(int(self.tags[i])),
            frame=f,
            mode_index=int(self.mode[i] - f * self.modes_per_frame),
        )

    def __iter__(self) -> Iterator[DetectionEvent]:
        return (self.event(i) for i in range(len(self)))

    def take(self, idx) -> "EventLog":
        return EventLog(*(getattr(self, f)[idx] for f in _EVENT_FIELDS[:5]), self.frame_duration_ns, self.modes_per_frame, self.ex_a[idx], self.ex_b[idx])

    @classmethod
    def empty(cls, grid: ph.TemporalGrid) -> "EventLog":
        return cls(*(np.zeros(0, d) for d in _EVENT_DTYPES[:5]), grid.frame_duration_ns, grid.mode_count)

    @classmethod
    def from_events(cls, events: Sequence[DetectionEvent], grid: ph.TemporalGrid) -> "EventLog":
        fd = grid.frame_duration_ns
        m = grid.mode_count
        t = np.array([e.frame * fd + e.time_ns for e in events], dtype=float)
        order = np.argsort(t, kind="stable")
        ev = [events[i] for i in order]
        return cls(
            t[order],
            [e.frame for e in ev],
            [e.frame * m + e.mode_index for e in ev],
            [0 if e.detector == "D1" else 1 for e in ev],
            [provenance_to_tags(e.provenance) for e in ev],
            fd,
            m,
        )

    @classmethod
    def concat(cls, logs: Sequence["EventLog"]) -> "EventLog":
        first = logs[0]
        cols = [np.concatenate([getattr(l, f) for l in logs]) for f in _EVENT_FIELDS]
        return cls(*cols[:5], first.frame_duration_ns, first.modes_per_frame, cols[5], cols[6])


# --------------------------------------------------------------------------
# photon generation


def _occupied_slots(q: float, n_slots: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of slots hit by independent Bernoulli(q) trials, via geometric gaps."""
    if q <= 0 or n_slots <= 0:
        return np.zeros(0, dtype=np.int64)
    if q >= 1:
        return np.arange(n_slots, dtype=np.int64)
    chunks = []
    pos = -1
    expect = int(q * n_slots + 6 * math.sqrt(q * n_slots) + 16)
    while True:
        gaps = rng.geometric(q, size=expect)
        idx = pos + np.cumsum(gaps)
        chunks.append(idx)
        pos = int(idx[-1])
        if pos >= n_slots:
            break
    out = np.concatenate(chunks)
    return out[out < n_slots]


def _emit(src: ph.SourceConfig, mu: float, n_slots: int, transmission: float, mode_ns: float, rng):
    q = ph.occupation_probability(mu, src.statistics)
    slots = _occupied_slots(q, n_slots, rng)
    pairs = ph.sample_occupied_count(mu, rng, slots.size, src.statistics) if slots.size else np.zeros(0, np.int64)
    idlers = rng.binomial(pairs, transmission)
    live = idlers > 0
    # emission time within the mode, only needed where an idler survives
    offsets = np.zeros(slots.size)
    offsets[live] = rng.random(int(live.sum())) * mode_ns
    return slots, pairs, offsets, idlers


def _lookup(keys: np.ndarray, values: np.ndarray, query: np.ndarray) -> np.ndarray:
    """values[keys == query] for sorted ``keys``, 0 where absent."""
    if keys.size == 0:
        return np.zeros(query.shape, np.int64)
    idx = np.minimum(np.searchsorted(keys, query), keys.size - 1)
    return np.where(keys[idx] == query, values[idx], 0)


def simulate_block(cfg: LinkConfig, first_frame: int, n_frames: int, rng: np.random.Generator) -> EventLog:
    """Photon emission, loss, BSM interference, detection and dark counts for a run of frames."""
    grid = cfg.grid
    m_per = grid.mode_count
    tau = grid.mode_duration_ns
    fd = grid.frame_duration_ns
    n_slots = n_frames * m_per
    base_mode = first_frame * m_per

    sa, na, oa, ka = _emit(cfg.source_a, cfg.mu_a, n_slots, cfg.idler_transmission_a, tau, rng)
    sb, nb, ob, kb = _emit(cfg.source_b, cfg.mu_b, n_slots, cfg.idler_transmission_b, tau, rng)

    # merge surviving idlers per slot
    la, lb = ka > 0, kb > 0
    slots = np.union1d(sa[la], sb[lb])
    ia = np.searchsorted(slots, sa[la])
    ib = np.searchsorted(slots, sb[lb])
    kA = np.zeros(slots.size, np.int64)
    kB = np.zeros(slots.size, np.int64)
    kA[ia] = ka[la]
    kB[ib] = kb[lb]
    off = np.full(slots.size, np.inf)
    off[ia] = oa[la]
    off[ib] = np.minimum(off[ib], ob[lb])
    tags = np.zeros(slots.size, np.uint8)
    tags[ia] |= TAG_A
    tags[ib] |= TAG_B

    c1, c2 = ph.bsm_interfere_many(kA, kB, cfg.indistinguishability, rng)
    d1 = rng.binomial(c1, cfg.detectors[0].efficiency) > 0
    d2 = rng.binomial(c2, cfg.detectors[1].efficiency) > 0

    t_abs = first_frame * fd + (slots // m_per) * fd + (slots % m_per) * tau + off
    parts_t = [t_abs[d1], t_abs[d2]]
    parts_slot = [slots[d1], slots[d2]]
    parts_det = [np.zeros(d1.sum(), np.int8), np.ones(d2.sum(), np.int8)]
    parts_tag = [tags[d1], tags[d2]]

    span = n_frames * fd
    for det_i, det in enumerate(cfg.detectors):
        nd = int(ph.sample_dark_counts(det, span, rng))
        if nd == 0:
            continue
        t = rng.random(nd) * span
        fr = np.floor(t / fd).astype(np.int64)
        # counts in the dead tail after the last mode get an index with no emissions
        slot = fr * m_per + np.minimum(np.floor((t - fr * fd) / tau).astype(np.int64), m_per)
        parts_t.append(first_frame * fd + t)
        parts_slot.append(slot)
        parts_det.append(np.full(nd, det_i, np.int8))
        parts_tag.append(np.full(nd, TAG_DARK, np.uint8))

    t = np.concatenate(parts_t)
    slot = np.concatenate(parts_slot)
    det = np.concatenate(parts_det)
    tag = np.concatenate(parts_tag)

    # a detector fires at most once per mode; fold coincident dark counts into the photon click
    order = np.lexsort((t, slot, det))
    t, slot, det, tag = t[order], slot[order], det[order], tag[order]
    if t.size:
        new = np.ones(t.size, bool)
        new[1:] = (slot[1:] != slot[:-1]) | (det[1:] != det[:-1])
        starts = np.flatnonzero(new)
        if starts.size != t.size:
            tag = np.bitwise_or.reduceat(tag, starts)
            t, slot, det = t[starts], slot[starts], det[starts]

    order = np.argsort(t, kind="stable")
    t, slot, det, tag = t[order], slot[order], det[order], tag[order]
    return EventLog(
        t,
        first_frame + slot // m_per,
        slot + base_mode,
        det,
        tag,
        fd,
        m_per,
        _lookup(sa, na, slot),
        _lookup(sb, nb, slot),
    )


# --------------------------------------------------------------------------
# pairing and classification


def _valid_edges(times: np.ndarray, storage_window_ns: float, modes: np.ndarray | None) -> np.ndarray:
    gap = np.diff(times)
    ok = (gap > 0) & (gap <= storage_window_ns)
    if modes is not None:
        ok &= modes[1:] != modes[:-1]
    return ok


def _greedy(ok: np.ndarray) -> np.ndarray:
    """Left endpoints chosen by greedy pairing given the valid-edge mask."""
    if ok.size == 0:
        return np.zeros(0, np.int64)
    # within each run of consecutive valid edges greedy takes every other edge
    idx = np.arange(ok.size)
    run_start = np.where(ok & np.concatenate(([True], ~ok[:-1])), idx, 0)
    run_start = np.maximum.accumulate(run_start)
    return np.flatnonzero(ok & ((idx - run_start) % 2 == 0))


def pair_indices(times: np.ndarray, storage_window_ns: float, modes: np.ndarray | None = None):
    """Greedy left-to-right pairing of consecutive detections.

    Detections i and i+1 pair when their separation is positive and at most
    the storage window (and, if ``modes`` is given, they sit in different
    modes); a paired detection is not reused. Returns (first, second).
    """
    t = np.asarray(times, dtype=float)
    if t.size < 2:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    first = _greedy(_valid_edges(t, storage_window_ns, None if modes is None else np.asarray(modes)))
    return first, first + 1


def delay_matches(delay_ns, filter_ns: float | None, window_ns: float):
    if filter_ns is None:
        return np.ones(np.shape(delay_ns), bool)
    return np.abs(np.asarray(delay_ns) - filter_ns) <= window_ns / 2.0


def pair_detections(
    events: Sequence[DetectionEvent] | EventLog,
    opts: ProtocolOptions,
    storage_window_ns: float = 100_000.0,
    grid: ph.TemporalGrid | None = None,
) -> list[HeraldRecord]:
    """Pair time-sorted detections into heralds.

    Pairing is greedy over consecutive detections within the storage window.
    With a fixed-delay filter only pairs with |t2 - t1 - filter| <= window/2
    are retained. Returned times are absolute run times.
    """
    log = events if isinstance(events, EventLog) else EventLog.from_events(list(events), grid or ph.TemporalGrid())
    i1, i2 = pair_indices(log.time_ns, storage_window_ns, log.mode)
    keep = delay_matches(log.time_ns[i2] - log.time_ns[i1], opts.fixed_delay_filter_ns, opts.coincidence_window_ns)
    table = HeraldTable.from_events(log, i1[keep], i2[keep])
    return table.records()


def classify_codes(tag1, tag2, mode1, mode2, ex_a, ex_b) -> np.ndarray:
    """Vectorised herald classification; returns indices into ``Category`` order."""
    tag1 = np.asarray(tag1).astype(np.int64)
    tag2 = np.asarray(tag2).astype(np.int64)
    ex_a = np.asarray(ex_a)
    ex_b = np.asarray(ex_b)
    dark = ((tag1 | tag2) & TAG_DARK) > 0
    same_mode = np.asarray(mode1) == np.asarray(mode2)
    cross = ((tag1 == TAG_A) & (tag2 == TAG_B)) | ((tag1 == TAG_B) & (tag2 == TAG_A))
    single = (ex_a == 1) & (ex_b == 1)
    same_src = (tag1 == tag2) & ((tag1 == TAG_A) | (tag1 == TAG_B))
    code = np.full(tag1.shape, 3, np.int64)
    code[same_src & ~same_mode] = 1
    code[cross & single & ~same_mode] = 0
    code[dark] = 2
    return code


def classify_herald(h: HeraldRecord, events: Sequence[DetectionEvent]) -> Category:
    """Category of a herald from the provenance of its two detections.

    ``events`` are the herald's two detections in time order; the pairs
    emitted into the two modes come from ``h.excitations``.
    """
    e1, e2 = events
    m1, m2 = h.mode_indices
    code = classify_codes(
        [provenance_to_tags(e1.provenance)], [provenance_to_tags(e2.provenance)], [m1], [m2], [h.excitations[0]], [h.excitations[1]]
    )[0]
    return _CATEGORY_CODES[int(code)]


# --------------------------------------------------------------------------
# state assignment, feed-forward, retrieval


def effective_visibility(cfg: LinkConfig, delay_mismatch_ns=0.0):
    """Coherence of a genuine herald.

    Indistinguishability (plus the optional retrieval boost) times the
    time-bin overlap lost when t2 - t1 misses the analyser imbalance by
    ``delay_mismatch_ns``.
    """
    v = cfg.indistinguishability
    if not cfg.protocol.memory_bypass:
        v = min(1.0, v + cfg.protocol.retrieval_visibility_boost)
    return v * np.exp(-np.abs(delay_mismatch_ns) / cfg.coherence_time_ns)


def delay_mismatch(cfg: LinkConfig, t1, t2):
    filt = cfg.protocol.fixed_delay_filter_ns
    if filt is None:
        return np.zeros(np.shape(t1))
    return np.asarray(t2) - np.asarray(t1) - filt


_DIAG_POP = np.diag([0.0, 0.5, 0.5, 0.0]).astype(complex)
_MIXED = np.eye(4, dtype=complex) / 4
_MIXED_STATE = DensityMatrix(_MIXED)
_BELL = {k: bell_state(k).data for k in BellKind}


def genuine_state(parity: BellKind, v_eff: float) -> DensityMatrix:
    """V_eff |psi><psi| + (1 - V_eff) * (|01><01| + |10><10|) / 2."""
    if not 0.0 <= v_eff <= 1.0:
        raise ValueError(f"V_eff must lie in [0, 1], got {v_eff}")
    # convex mixture of two states, physical by construction
    return DensityMatrix(v_eff * _BELL[parity] + (1 - v_eff) * _DIAG_POP, check=False)


def conditional_state(category: Category, parity: BellKind, cfg: LinkConfig | float) -> DensityMatrix:
    """Memory state assigned to a herald of the given category.

    Genuine cross-source heralds get the partially coherent Bell state; every
    other category is assigned the maximally mixed state.
    """
    if category is Category.GENUINE:
        v = cfg if isinstance(cfg, (int, float)) else effective_visibility(cfg)
        return genuine_state(parity, float(v))
    return _MIXED_STATE


def delivery_time_ns(h: HeraldRecord, cfg: LinkConfig) -> float:
    """Herald decided at C once the later idler arrives, then sent back to both nodes."""
    return h.t2_ns + 1000.0 * (cfg.round_trip_us + cfg.protocol.processing_delay_us)


def storage_deadline_ok(h: HeraldRecord, cfg: LinkConfig) -> bool:
    return delivery_time_ns(h, cfg) - h.t1_ns <= cfg.storage_window_ns + 1e-9


def apply_feedforward(pair: DeliveredPair, cfg: LinkConfig) -> DeliveredPair | None:
    """Phase-flip psi- heralds at node A; returns None if storage has expired."""
    h = pair.herald
    if not storage_deadline_ok(h, cfg):
        return None
    state = pair.state
    if h.parity is BellKind.PSI_MINUS:
        state = apply_phase_flip_a(state)
    return replace(pair, state=state, kind=BellKind.PSI_PLUS, delivered_at_ns=delivery_time_ns(h, cfg))


def echo_capture(window_ns: float, mode_duration_ns: float) -> float:
    """Fraction of a retrieved echo inside a centred window (two-sided exponential profile)."""
    return 1.0 - (1.0 - ECHO_COVERAGE) ** (window_ns / mode_duration_ns)


def _side_probabilities(cfg: LinkConfig, excitations, node: int):
    """(retrieval prob, detect-given-retrieved prob, background click prob) for one node."""
    mem = cfg.memory_a if node == 0 else cfg.memory_b
    w = cfg.protocol.coincidence_window_ns
    k = np.asarray(excitations)
    if cfg.protocol.memory_bypass:
        r = (k > 0).astype(float)
    else:
        r = 1.0 - (1.0 - mem.storage_efficiency) ** k
    d = mem.verification_efficiency * echo_capture(w, cfg.grid.mode_duration_ns)
    n = -math.expm1(-mem.background_rate_hz * w * 1e-9)
    return r, d, n


def fourfold_weights(cfg: LinkConfig, ex_a, ex_b):
    """Probability of a click at both verification stations, and of both being signal."""
    ra, da, na = _side_probabilities(cfg, ex_a, 0)
    rb, db, nb = _side_probabilities(cfg, ex_b, 1)
    pa = 1 - (1 - ra * da) * (1 - na)
    pb = 1 - (1 - rb * db) * (1 - nb)
    clean = ra * da * (1 - na) * rb * db * (1 - nb)
    scale = cfg.protocol.tpc_success_probability if cfg.protocol.memory_bypass else 1.0
    return pa * pb * scale, clean * scale


def verified_state(state: DensityMatrix, category: Category, p4: float, clean: float) -> DensityMatrix:
    """State conditioned on a four-fold: the signal-signal part keeps ``state``, the rest is white."""
    if p4 <= 0 or category is not Category.GENUINE:
        return _MIXED_STATE
    f = min(1.0, clean / p4)
    return DensityMatrix(f * state.data + (1 - f) * _MIXED, check=False)


def retrieve(pair: DeliveredPair, mem_a: MemoryConfig, mem_b: MemoryConfig, rng: np.random.Generator) -> DeliveredPair:
    """Independent memory read-out at each node; a node holding k excitations
    releases at least one with probability 1 - (1 - efficiency)^k."""
    ka, kb = pair.herald.excitations
    pa = 1 - (1 - mem_a.storage_efficiency) ** ka
    pb = 1 - (1 - mem_b.storage_efficiency) ** kb
    u = rng.random(2)
    return replace(pair, retrieval_success=(bool(u[0] < pa), bool(u[1] < pb)))


def verify(pair: DeliveredPair, cfg: LinkConfig, rng: np.random.Generator) -> DeliveredPair:
    """Sample the verification clicks given the retrieval flags."""
    ok = pair.retrieval_success
    if ok is None:
        raise ValueError("retrieve() must run before verify()")
    clicks = []
    for node, got in enumerate(ok):
        _, d, n = _side_probabilities(cfg, 1, node)
        p = 1 - (1 - (d if got else 0.0)) * (1 - n)
        clicks.append(bool(rng.random() < p))
    verified = clicks[0] and clicks[1]
    if cfg.protocol.memory_bypass:
        verified = verified and bool(pair.tpc_success)
    return replace(pair, verified=verified)


# --------------------------------------------------------------------------
# runs

_HERALD_FIELDS = ("t1", "t2", "m1", "m2", "d1", "d2", "tag1", "tag2", "ex_a", "ex_b")


@dataclass
class HeraldTable:
    """Heralds as columns. ``ex_a``/``ex_b`` sum the pairs emitted into both modes."""

    t1: np.ndarray
    t2: np.ndarray
    m1: np.ndarray
    m2: np.ndarray
    d1: np.ndarray
    d2: np.ndarray
    tag1: np.ndarray
    tag2: np.ndarray
    ex_a: np.ndarray
    ex_b: np.ndarray

    def __len__(self) -> int:
        return len(self.t1)

    @classmethod
    def from_events(cls, log: EventLog, i1: np.ndarray, i2: np.ndarray) -> "HeraldTable":
        m1, m2 = log.mode[i1], log.mode[i2]
        other = m1 != m2
        return cls(
            log.time_ns[i1],
            log.time_ns[i2],
            m1,
            m2,
            log.detector[i1],
            log.detector[i2],
            log.tags[i1],
            log.tags[i2],
            log.ex_a[i1] + np.where(other, log.ex_a[i2], 0),
            log.ex_b[i1] + np.where(other, log.ex_b[i2], 0),
        )

    @classmethod
    def concat(cls, parts: Sequence["HeraldTable"]) -> "HeraldTable":
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in _HERALD_FIELDS))

    def take(self, idx) -> "HeraldTable":
        return HeraldTable(*(getattr(self, f)[idx] for f in _HERALD_FIELDS))

    def categories(self) -> np.ndarray:
        return classify_codes(self.tag1, self.tag2, self.m1, self.m2, self.ex_a, self.ex_b)

    def records(self) -> list[HeraldRecord]:
        codes = self.categories()
        return [
            HeraldRecord(
                t1_ns=float(self.t1[j]),
                t2_ns=float(self.t2[j]),
                parity=BellKind.PSI_PLUS if self.d1[j] == self.d2[j] else BellKind.PSI_MINUS,
                category=_CATEGORY_CODES[int(codes[j])],
                mode_indices=(int(self.m1[j]), int(self.m2[j])),
                detectors=(int(self.d1[j]), int(self.d2[j])),
                excitations=(int(self.ex_a[j]), int(self.ex_b[j])),
            )
            for j in range(len(self))
        ]


@dataclass
class LinkRun:
    """Outcome of ``run_link``.

    All detections and heralds are counted; only heralds whose spacing can
    pass the fixed-delay filter for some window up to ``kept_window_ns`` are
    stored (all heralds when no filter is set).
    """

    cfg: LinkConfig
    n_frames: int
    n_events: int
    n_heralds: int
    clicks: tuple[int, int]  # per detector
    heralds: HeraldTable
    kept_window_ns: float
    events: EventLog | None = None

    @property
    def duration_s(self) -> float:
        return self.n_frames * self.cfg.grid.frame_duration_ns * 1e-9

    @property
    def wall_time_s(self) -> float:
        return self.duration_s / self.cfg.protocol.duty_cycle

    @property
    def click_rate_hz(self) -> float:
        return self.n_events / self.wall_time_s

    @property
    def herald_rate_hz(self) -> float:
        return self.n_heralds / self.wall_time_s

    def analyzed(self, cfg: LinkConfig | None = None) -> HeraldTable:
        cfg = cfg or self.cfg
        p = cfg.protocol
        if p.fixed_delay_filter_ns != self.cfg.protocol.fixed_delay_filter_ns:
            raise ValueError("re-analysis cannot change the fixed-delay filter")
        if p.fixed_delay_filter_ns is not None and p.coincidence_window_ns > self.kept_window_ns + 1e-9:
            raise ValueError(f"window {p.coincidence_window_ns} ns exceeds the kept window {self.kept_window_ns} ns")
        h = self.heralds
        return h.take(np.flatnonzero(delay_matches(h.t2 - h.t1, p.fixed_delay_filter_ns, p.coincidence_window_ns)))

    def delivered(self, cfg: LinkConfig | None = None, *, sample_flags: bool = True) -> "Delivery":
        """Delivered pairs for the analyzed heralds under ``cfg`` (defaults to the run's).

        ``cfg`` may differ from the run configuration in window, feed-forward,
        bypass, memory and verification settings, which re-analyses one photon
        stream with common random numbers.
        """
        cfg = cfg or self.cfg
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1,))) if sample_flags else None
        return deliver(self.analyzed(cfg).records(), cfg, rng)


@dataclass
class Delivery:
    pairs: list[DeliveredPair]
    dropped: int  # storage expired before the herald arrived
    analyzed: int


def deliver(heralds: Sequence[HeraldRecord], cfg: LinkConfig, rng: np.random.Generator | None = None) -> Delivery:
    """Assign states, apply feed-forward or the bypass TPC, and attach verification data.

    With ``rng`` the retrieval, verification and TPC outcomes are sampled
    (vectorised versions of ``retrieve`` and ``verify``); without it only the
    four-fold probabilities and verified states are attached.
    """
    p = cfg.protocol
    n = len(heralds)
    if n == 0:
        return Delivery([], 0, 0)
    ex_a = np.array([h.excitations[0] for h in heralds])
    ex_b = np.array([h.excitations[1] for h in heralds])
    p4, clean = fourfold_weights(cfg, ex_a, ex_b)
    v_eff = effective_visibility(cfg, delay_mismatch(cfg, [h.t1_ns for h in heralds], [h.t2_ns for h in heralds]))
    tpc = retrieved = verified = None
    if rng is not None:
        tpc_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(2,)))
        tpc = tpc_rng.random(n) < p.tpc_success_probability
        u = rng.random((n, 4))
        if p.memory_bypass:
            retrieved = np.ones((n, 2), bool)
        else:
            retrieved = np.stack(
                [u[:, 0] < 1 - (1 - cfg.memory_a.storage_efficiency) ** ex_a, u[:, 1] < 1 - (1 - cfg.memory_b.storage_efficiency) ** ex_b],
                axis=1,
            )
        clicks = []
        for node in (0, 1):
            _, d, bg = _side_probabilities(cfg, 1, node)
            clicks.append(u[:, 2 + node] < 1 - (1 - np.where(retrieved[:, node], d, 0.0)) * (1 - bg))
        verified = clicks[0] & clicks[1]
        if p.memory_bypass:
            verified &= tpc
    pairs: list[DeliveredPair] = []
    dropped = 0
    ff = p.feed_forward and not p.memory_bypass
    cache: dict[tuple, tuple[DensityMatrix, DensityMatrix]] = {}
    for j, h in enumerate(heralds):
        cat = h.category or Category.GENUINE
        kind = h.parity
        at = h.t2_ns + 1000.0 * cfg.one_way_us
        if ff:
            if not storage_deadline_ok(h, cfg):
                dropped += 1
                continue
            kind = BellKind.PSI_PLUS
            at = delivery_time_ns(h, cfg)
        key = (cat, h.parity, float(v_eff[j]), float(p4[j]), float(clean[j]))
        if key not in cache:
            state = conditional_state(cat, h.parity, key[2])
            if ff and h.parity is BellKind.PSI_MINUS:
                state = apply_phase_flip_a(state)
            cache[key] = (state, verified_state(state, cat, key[3], key[4]))
        state, vstate = cache[key]
        pairs.append(
            DeliveredPair(
                herald=h,
                state=state,
                kind=kind,
                delivered_at_ns=at,
                retrieval_success=None if rng is None else (bool(retrieved[j, 0]), bool(retrieved[j, 1])),
                fourfold_probability=float(p4[j]),
                verified_state=vstate,
                verified=None if rng is None else bool(verified[j]),
                tpc_success=bool(tpc[j]) if (rng is not None and p.memory_bypass) else None,
            )
        )
    return Delivery(pairs, dropped, n)


@dataclass
class EnsembleSummary:
    """Four-fold weighted delivered ensemble, computed without per-pair objects."""

    state: DensityMatrix | None
    by_kind: dict
    analyzed: int
    delivered: int
    dropped: int
    expected_fourfold: float  # sum of four-fold probabilities over delivered pairs


def summarize(table: HeraldTable, cfg: LinkConfig) -> EnsembleSummary:
    """Same ensemble as averaging ``deliver(...)`` verified states with four-fold weights."""
    p = cfg.protocol
    n = len(table)
    plus = table.d1 == table.d2
    keep = np.ones(n, bool)
    if p.feed_forward and not p.memory_bypass:
        delay = 1000.0 * (cfg.round_trip_us + p.processing_delay_us)
        keep = table.t2 + delay - table.t1 <= cfg.storage_window_ns + 1e-9
        plus = np.ones(n, bool)
    genuine = table.categories() == 0
    p4, clean = fourfold_weights(cfg, table.ex_a, table.ex_b)
    p4 = np.where(keep, p4, 0.0)
    frac = np.where(genuine & (p4 > 0), np.minimum(1.0, np.divide(clean, p4, out=np.zeros(n), where=p4 > 0)), 0.0)
    v = effective_visibility(cfg, delay_mismatch(cfg, table.t1, table.t2))

    def mix(sel):
        w = p4[sel]
        tot = w.sum()
        if tot <= 0:
            return None
        g = w * frac[sel]
        vv = v[sel]
        pk = plus[sel]
        rho = (
            (g * vv)[pk].sum() * bell_state(BellKind.PSI_PLUS).data
            + (g * vv)[~pk].sum() * bell_state(BellKind.PSI_MINUS).data
            + (g * (1 - vv)).sum() * _DIAG_POP
            + (tot - g.sum()) * _MIXED
        )
        return DensityMatrix(rho / tot)

    every = np.ones(n, bool)
    return EnsembleSummary(
        state=mix(every),
        by_kind={BellKind.PSI_PLUS: mix(plus), BellKind.PSI_MINUS: mix(~plus)},
        analyzed=n,
        delivered=int(keep.sum()),
        dropped=int(n - keep.sum()),
        expected_fourfold=float(p4.sum()),
    )


def _block_rng(seed: int, block: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0, block)))


class _Pairer:
    """Streaming greedy pairing; an unpaired trailing detection carries into the next block."""

    def __init__(self, storage_window_ns: float, keep):
        self.window = storage_window_ns
        self.keep = keep
        self.carry: EventLog | None = None
        self.n_heralds = 0
        self.parts: list[HeraldTable] = []

    def feed(self, log: EventLog) -> None:
        if self.carry is not None:
            log = EventLog.concat([self.carry, log])
        self.carry = None
        if len(log) == 0:
            return
        first = _greedy(_valid_edges(log.time_ns, self.window, log.mode))
        self.n_heralds += first.size
        paired = np.zeros(len(log), bool)
        paired[first] = True
        paired[first + 1] = True
        if not paired[-1]:
            self.carry = log.take(slice(len(log) - 1, None))
        sel = first[self.keep(log.time_ns[first + 1] - log.time_ns[first])]
        if sel.size:
            self.parts.append(HeraldTable.from_events(log, sel, sel + 1))

    def table(self) -> HeraldTable:
        if not self.parts:
            return HeraldTable(*(np.zeros(0) for _ in _HERALD_FIELDS))
        return HeraldTable.concat(self.parts)


def run_link(
    cfg: LinkConfig,
    n_frames: int,
    *,
    threads: int = 1,
    keep_window_ns: float | None = None,
    keep_events: bool | int = False,
    store_heralds: bool = True,
) -> LinkRun:
    """Simulate ``n_frames`` consecutive frames and pair all detections.

    Blocks of frames are simulated independently (optionally on ``threads``
    workers) and paired in time order, so results do not depend on threading.
    ``keep_events`` keeps the detection log: all of it when True, or only the
    first that many frames when an integer.
    """
    cfg.validate()
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    filt = cfg.protocol.fixed_delay_filter_ns
    kept = max(cfg.protocol.coincidence_window_ns, keep_window_ns or 0.0)
    if not store_heralds:
        keep = lambda gap: np.zeros(gap.shape, bool)  # noqa: E731
    else:
        keep = lambda gap: delay_matches(gap, filt, kept)  # noqa: E731
    pairer = _Pairer(cfg.storage_window_ns, keep)
    n_blocks = -(-n_frames // FRAMES_PER_STREAM)
    n_events = 0
    clicks = np.zeros(2, np.int64)
    logs = []

    def work(k: int) -> EventLog:
        first = k * FRAMES_PER_STREAM
        return simulate_block(cfg, first, min(FRAMES_PER_STREAM, n_frames - first), _block_rng(cfg.seed, k))

    def consume(log: EventLog) -> None:
        nonlocal n_events
        n_events += len(log)
        clicks[:] += np.bincount(log.detector, minlength=2)[:2]
        if keep_events is True:
            logs.append(log)
        elif keep_events:
            sel = np.flatnonzero(log.frame < int(keep_events))
            if sel.size:
                logs.append(log.take(sel))
        pairer.feed(log)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            batch = 4 * threads
            for start in range(0, n_blocks, batch):
                for log in pool.map(work, range(start, min(n_blocks, start + batch))):
                    consume(log)
    else:
        for k in range(n_blocks):
            consume(work(k))
    events = None
    if keep_events is not False:
        events = EventLog.concat(logs) if logs else EventLog.empty(cfg.grid)
    return LinkRun(cfg, n_frames, n_events, pairer.n_heralds, (int(clicks[0]), int(clicks[1])), pairer.table(), kept, events)


def run_frame(cfg: LinkConfig, rng: np.random.Generator, frame_index: int = 0):
    """One frame: detections, heralds passing the fixed-delay filter, delivered pairs."""
    cfg.validate()
    log = simulate_block(cfg, frame_index, 1, rng)
    i1, i2 = pair_indices(log.time_ns, cfg.storage_window_ns, log.mode)
    keep = delay_matches(log.time_ns[i2] - log.time_ns[i1], cfg.protocol.fixed_delay_filter_ns, cfg.protocol.coincidence_window_ns)
    heralds = HeraldTable.from_events(log, i1[keep], i2[keep]).records()
    return list(log), heralds, deliver(heralds, cfg, rng).pairs


def inject_pairs(cfg: LinkConfig, pairs_a: dict[int, int], pairs_b: dict[int, int], rng: np.random.Generator, frame_index: int = 0) -> EventLog:
    """Detections from a fixed emission pattern (mode -> pairs) sent through the link."""
    grid = cfg.grid
    m_per = grid.mode_count
    tau = grid.mode_duration_ns
    fd = grid.frame_duration_ns
    slots = np.array(sorted(set(pairs_a) | set(pairs_b)), dtype=np.int64)
    na = np.array([pairs_a.get(int(s), 0) for s in slots], dtype=np.int64)
    nb = np.array([pairs_b.get(int(s), 0) for s in slots], dtype=np.int64)
    ka = rng.binomial(na, cfg.idler_transmission_a)
    kb = rng.binomial(nb, cfg.idler_transmission_b)
    c1, c2 = ph.bsm_interfere_many(ka, kb, cfg.indistinguishability, rng)
    d1 = rng.binomial(c1, cfg.detectors[0].efficiency) > 0
    d2 = rng.binomial(c2, cfg.detectors[1].efficiency) > 0
    tags = (np.where(ka > 0, TAG_A, 0) | np.where(kb > 0, TAG_B, 0)).astype(np.uint8)
    t = frame_index * fd + slots * tau + tau / 2
    sel = np.concatenate([np.flatnonzero(d1), np.flatnonzero(d2)])
    det = np.concatenate([np.zeros(d1.sum(), np.int8), np.ones(d2.sum(), np.int8)])
    order = np.argsort(t[sel], kind="stable")
    sel, det = sel[order], det[order]
    return EventLog(t[sel], np.full(sel.size, frame_index), slots[sel] + frame_index * m_per, det, tags[sel], fd, m_per, na[sel], nb[sel])


# --------------------------------------------------------------------------
# SPI and memory-bypass variants


def spi_state(sign: int, delta_phi: float) -> DensityMatrix:
    """(|1>_A|0>_B + sign e^{i dphi} |0>_A|1>_B)/sqrt2 in the excitation-number basis."""
    v = np.zeros(4, complex)
    v[2] = 1.0
    v[1] = sign * np.exp(1j * delta_phi)
    v /= np.sqrt(2)
    return DensityMatrix(np.outer(v, v.conj()))


@dataclass
class SpiResult:
    clicks: tuple[int, int]  # D1 heralds sign +1, D2 heralds sign -1
    click_rate_hz: float
    delta_phi: float

    @property
    def total(self) -> int:
        return self.clicks[0] + self.clicks[1]

    def state(self, detector: int) -> DensityMatrix:
        return spi_state(1 if detector == 0 else -1, self.delta_phi)


def spi_heralding(cfg: LinkConfig, rng: np.random.Generator | None = None, n_frames: int = 1, run: LinkRun | None = None) -> SpiResult:
    """Single-click heralding; every detection at C heralds one number state."""
    if cfg.protocol.mode is not Mode.SPI:
        raise ValueError("spi_heralding needs protocol mode SPI")
    if run is None:
        if rng is None:
            run = run_link(cfg, n_frames, store_heralds=False)
        else:
            log = simulate_block(cfg, 0, n_frames, rng)
            c = np.bincount(log.detector, minlength=2)
            dur = n_frames * cfg.grid.frame_duration_ns * 1e-9 / cfg.protocol.duty_cycle
            return SpiResult((int(c[0]), int(c[1])), len(log) / dur, cfg.delta_phi)
    return SpiResult(run.clicks, run.click_rate_hz, cfg.delta_phi)


def memory_bypass_mode(cfg: LinkConfig, n_frames: int | None = None, run: LinkRun | None = None) -> Delivery:
    """Photonic verification without storage: no feed-forward, TPC survives with fixed probability."""
    bcfg = cfg.with_protocol(memory_bypass=True, feed_forward=False)
    if run is None:
        if n_frames is None:
            raise ValueError("give n_frames or a run")
        run = run_link(bcfg, n_frames)
    return run.delivered(bcfg)
