"""Stochastic photonic components: pair sources, fibre, detectors and the BSM beamsplitter."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

STATISTICS = ("thermal", "poisson")


def _check_prob(name: str, p: float) -> None:
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"{name} must be a probability, got {p}")


@dataclass(frozen=True)
class SourceConfig:
    """cSPDC pair source. ``indistinguishability`` is the squared idler overlap."""

    pair_rate_per_mw_hz: float = 60e3
    pump_power_mw: float = 3.0
    heralding_efficiency: float = 0.35
    indistinguishability: float = 1.0
    statistics: str = "thermal"
    coherence_time_ns: float = 100.0

    def __post_init__(self):
        if self.coherence_time_ns <= 0:
            raise ValueError("coherence_time_ns must be positive")
        if self.pair_rate_per_mw_hz < 0 or self.pump_power_mw < 0:
            raise ValueError("pair rate and pump power must be non-negative")
        _check_prob("heralding_efficiency", self.heralding_efficiency)
        _check_prob("indistinguishability", self.indistinguishability)
        if self.statistics not in STATISTICS:
            raise ValueError(f"statistics must be one of {STATISTICS}")


@dataclass(frozen=True)
class ChannelConfig:
    length_km: float = 0.0
    attenuation_db_per_km: float = 0.2
    extra_loss_db: float = 0.0
    delay_us_per_km: float = 5.0
    phase_offset_rad: float = 0.0

    def __post_init__(self):
        if self.length_km < 0 or self.attenuation_db_per_km < 0 or self.extra_loss_db < 0:
            raise ValueError("fibre length and losses must be non-negative")
        if self.delay_us_per_km <= 0:
            raise ValueError("delay_us_per_km must be positive")


@dataclass(frozen=True)
class DetectorConfig:
    efficiency: float = 1.0
    dark_rate_hz: float = 0.0

    def __post_init__(self):
        _check_prob("efficiency", self.efficiency)
        if self.dark_rate_hz < 0:
            raise ValueError("dark_rate_hz must be non-negative")


@dataclass(frozen=True)
class TemporalGrid:
    mode_duration_ns: float = 83.0
    frame_duration_us: float = 100.0

    def __post_init__(self):
        if self.mode_duration_ns <= 0 or self.frame_duration_us <= 0:
            raise ValueError("durations must be positive")
        if self.mode_count < 1:
            raise ValueError("frame shorter than one mode")

    @property
    def mode_count(self) -> int:
        # integer ns arithmetic first so 100 us / 83 ns is not hit by rounding
        return int(math.floor(self.frame_duration_us * 1000.0 / self.mode_duration_ns + 1e-9))

    @property
    def frame_duration_ns(self) -> float:
        return self.frame_duration_us * 1000.0


def mean_pairs_per_mode(src: SourceConfig, grid: TemporalGrid) -> float:
    return src.pair_rate_per_mw_hz * src.pump_power_mw * grid.mode_duration_ns * 1e-9


def occupation_probability(mu: float, statistics: str = "thermal") -> float:
    """P(n >= 1) for a single mode with mean pair number ``mu``."""
    if statistics == "thermal":
        return mu / (1.0 + mu)
    return -math.expm1(-mu)


def sample_pair_count(mu: float, rng: np.random.Generator, size=None, statistics: str = "thermal"):
    """Pairs emitted into one mode: thermal P(n) = mu^n / (1+mu)^(n+1) by default."""
    if mu < 0:
        raise ValueError("mu must be non-negative")
    if mu == 0:
        return 0 if size is None else np.zeros(size, dtype=np.int64)
    if statistics == "poisson":
        return rng.poisson(mu, size=size)
    # numpy's geometric counts trials to first success (support >= 1)
    out = rng.geometric(1.0 / (1.0 + mu), size=size) - 1
    return int(out) if size is None else out.astype(np.int64)


def sample_occupied_count(mu: float, rng: np.random.Generator, size: int, statistics: str = "thermal") -> np.ndarray:
    """Pair numbers conditioned on n >= 1."""
    if statistics == "thermal":
        return rng.geometric(1.0 / (1.0 + mu), size=size).astype(np.int64)
    out = rng.poisson(mu, size=size)
    bad = out == 0
    while bad.any():
        out[bad] = rng.poisson(mu, size=int(bad.sum()))
        bad = out == 0
    return out.astype(np.int64)


def thermal_pmf(mu: float, n: np.ndarray | int) -> np.ndarray:
    n = np.asarray(n)
    return mu**n / (1.0 + mu) ** (n + 1)


def survival_probability(ch: ChannelConfig) -> float:
    return 10.0 ** (-(ch.length_km * ch.attenuation_db_per_km + ch.extra_loss_db) / 10.0)


def propagation_delay(ch: ChannelConfig) -> float:
    """One-way delay in microseconds."""
    return ch.length_km * ch.delay_us_per_km


def thin(photon_count, p: float, rng: np.random.Generator):
    _check_prob("p", p)
    return rng.binomial(photon_count, p)


@lru_cache(maxsize=None)
def fock_beamsplitter(a: int, b: int) -> tuple[float, ...]:
    """Output distribution of |a, b> (identical internal mode) on a 50:50 splitter.

    Returns P(k photons at D1) for k = 0..a+b, using a -> (c + d)/sqrt2 and
    b -> (c - d)/sqrt2.
    """
    n = a + b
    # polynomial coefficients indexed by the power of c
    pa = np.array([math.comb(a, k) for k in range(a + 1)], dtype=float)
    pb = np.array([math.comb(b, k) * (-1) ** (b - k) for k in range(b + 1)], dtype=float)
    coef = np.convolve(pa, pb) / math.sqrt(2.0**n * math.factorial(a) * math.factorial(b))
    amps = np.array([coef[k] * math.sqrt(math.factorial(k) * math.factorial(n - k)) for k in range(n + 1)])
    probs = amps**2
    return tuple(float(p) for p in probs / probs.sum())


@lru_cache(maxsize=4096)
def bsm_distribution(a: int, b: int, indistinguishability: float) -> tuple[float, ...]:
    """P(k photons at D1) for a photons from A and b from B.

    Every B photon overlaps A's wavepacket with squared overlap V. Because the
    detectors only count photons per port, the B input splits exactly into
    j ~ Binomial(b, V) photons sharing A's mode (which interfere) and b - j
    orthogonal photons that route independently.
    """
    v = indistinguishability
    n = a + b
    out = np.zeros(n + 1)
    for j in range(b + 1):
        wj = math.comb(b, j) * v**j * (1 - v) ** (b - j)
        if wj == 0:
            continue
        same = np.array(fock_beamsplitter(a, j))
        m = b - j
        orth = np.array([math.comb(m, k) / 2.0**m for k in range(m + 1)])
        out += wj * np.convolve(same, orth)
    return tuple(float(p) for p in out)


def bsm_interfere(photons_a: int, photons_b: int, indistinguishability: float, rng: np.random.Generator) -> tuple[int, int]:
    """Photon numbers reaching (D1, D2) after the BSM beamsplitter."""
    if photons_a < 0 or photons_b < 0:
        raise ValueError("photon numbers must be non-negative")
    _check_prob("indistinguishability", indistinguishability)
    n = photons_a + photons_b
    if n == 0:
        return 0, 0
    p = bsm_distribution(int(photons_a), int(photons_b), float(indistinguishability))
    k = int(rng.choice(n + 1, p=p))
    return k, n - k


def bsm_interfere_many(ka: np.ndarray, kb: np.ndarray, indistinguishability: float, rng: np.random.Generator):
    """Vectorised ``bsm_interfere`` over arrays of input photon numbers."""
    ka = np.asarray(ka, dtype=np.int64)
    kb = np.asarray(kb, dtype=np.int64)
    c1 = np.zeros_like(ka)
    single = (ka == 0) | (kb == 0)
    tot = ka + kb
    c1[single] = rng.binomial(tot[single], 0.5)
    both = np.flatnonzero(~single)
    if both.size:
        pairs = np.stack([ka[both], kb[both]], axis=1)
        uniq, inv = np.unique(pairs, axis=0, return_inverse=True)
        inv = inv.ravel()
        u = rng.random(both.size)
        for gi, (a, b) in enumerate(uniq):
            sel = inv == gi
            cdf = np.cumsum(bsm_distribution(int(a), int(b), float(indistinguishability)))
            c1[both[sel]] = np.minimum(np.searchsorted(cdf, u[sel], side="right"), a + b)
    return c1, tot - c1


def sample_dark_counts(det: DetectorConfig, window_ns: float, rng: np.random.Generator, size=None):
    if window_ns < 0:
        raise ValueError("window must be non-negative")
    return rng.poisson(det.dark_rate_hz * window_ns * 1e-9, size=size)


def overlap_at_delay(indistinguishability: float, delay_ns: float, coherence_time_ns: float) -> float:
    """Squared wavepacket overlap for two photons offset by ``delay_ns``."""
    if math.isinf(delay_ns):
        return 0.0
    return indistinguishability * math.exp(-abs(delay_ns) / coherence_time_ns)


@dataclass(frozen=True)
class HomSetup:
    """Heralded HOM measurement: two sources, local signal heralding, idlers meet at C."""

    mu: float
    indistinguishability: float
    herald_efficiency_a: float = 1.0
    herald_efficiency_b: float = 1.0
    idler_efficiency_a: float = 1.0
    idler_efficiency_b: float = 1.0
    coherence_time_ns: float = 100.0
    statistics: str = "thermal"
    single_pairs: bool = False


@dataclass
class HomResult:
    delays_ns: np.ndarray
    rates: np.ndarray
    reference_rate: float
    trials: int

    @property
    def visibilities(self) -> np.ndarray:
        if self.reference_rate <= 0:
            return np.full(len(self.rates), np.nan)
        return 1.0 - self.rates / self.reference_rate

    @property
    def visibility(self) -> float:
        """Visibility at the delay closest to zero."""
        return float(self.visibilities[int(np.argmin(np.abs(self.delays_ns)))])


def _hom_trial_counts(setup: HomSetup, v: float, trials: int, rng: np.random.Generator) -> int:
    if setup.single_pairs:
        na = np.ones(trials, dtype=np.int64)
        nb = np.ones(trials, dtype=np.int64)
    else:
        na = sample_occupied_count(setup.mu, rng, trials, setup.statistics)
        nb = sample_occupied_count(setup.mu, rng, trials, setup.statistics)
    # signal and idler of each pair are lost independently
    ha = rng.binomial(na, setup.herald_efficiency_a) > 0
    hb = rng.binomial(nb, setup.herald_efficiency_b) > 0
    ka = rng.binomial(na, setup.idler_efficiency_a)
    kb = rng.binomial(nb, setup.idler_efficiency_b)
    c1, c2 = bsm_interfere_many(ka, kb, v, rng)
    return int(np.count_nonzero(ha & hb & (c1 > 0) & (c2 > 0)))


def hom_dip_experiment(setup: HomSetup, delays_ns: Sequence[float], trials: int, rng: np.random.Generator) -> HomResult:
    """Fourfold coincidence rate versus relative idler delay.

    Trials are conditioned on both sources emitting at least one pair (the
    fourfold needs both heralds), which rescales every rate by the same factor
    and leaves visibilities unchanged. The reference rate uses fully
    distinguishable photons (delay far beyond the coherence time).
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    delays = np.asarray(delays_ns, dtype=float)
    ref = _hom_trial_counts(setup, 0.0, trials, rng) / trials
    rates = np.array(
        [
            _hom_trial_counts(setup, overlap_at_delay(setup.indistinguishability, d, setup.coherence_time_ns), trials, rng)
            / trials
            for d in delays
        ]
    )
    return HomResult(delays, rates, ref, trials)


def hom_expected_visibility(setup: HomSetup, delay_ns: float = 0.0, n_max: int = 12) -> float:
    """Exact dip visibility by enumerating photon numbers up to ``n_max``."""
    v = overlap_at_delay(setup.indistinguishability, delay_ns, setup.coherence_time_ns)

    def rate(overlap: float) -> float:
        if setup.single_pairs:
            pn = {1: 1.0}
        elif setup.statistics == "thermal":
            q = setup.mu / (1 + setup.mu)
            pn = {n: (1 - q) * q ** (n - 1) for n in range(1, n_max + 1)}
        else:
            z = -math.expm1(-setup.mu)
            pn = {n: math.exp(-setup.mu) * setup.mu**n / math.factorial(n) / z for n in range(1, n_max + 1)}
        total = 0.0
        for na, pa in pn.items():
            ha = 1 - (1 - setup.herald_efficiency_a) ** na
            for nb, pb in pn.items():
                hb = 1 - (1 - setup.herald_efficiency_b) ** nb
                w = pa * pb * ha * hb
                if w < 1e-16:
                    continue
                for ka in range(na + 1):
                    wa = math.comb(na, ka) * setup.idler_efficiency_a**ka * (1 - setup.idler_efficiency_a) ** (na - ka)
                    for kb in range(nb + 1):
                        wb = math.comb(nb, kb) * setup.idler_efficiency_b**kb * (1 - setup.idler_efficiency_b) ** (nb - kb)
                        n = ka + kb
                        if n < 2:
                            continue
                        p = bsm_distribution(ka, kb, overlap)
                        total += w * wa * wb * (1 - p[0] - p[n])
        return total

    return 1.0 - rate(v) / rate(0.0)
