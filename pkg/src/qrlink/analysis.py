"""Estimators and experiment harnesses on top of the link simulator."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from . import linksim as ls
from . import photonics as ph
from .qstate import (
    BELL_TEST_SETTINGS,
    CHSH_SIGNS,
    PAULI_BASES,
    BellKind,
    ChshSettings,
    DensityMatrix,
    MeasurementSetting,
    as_density,
    fidelity_to_bell,
    outcome_probabilities,
    stack,
    setting_projectors,
    tomography_reconstruct,
    witness_fidelity,
)
from .tallies import TallyTable

WITNESS_BASES = ("XX", "YY", "ZZ")
EXPERIMENT_SCALE_SAMPLES = 800  # per setting; comparable to the experiment's statistics


@dataclass(frozen=True)
class Estimate:
    value: float
    stderr: float


@dataclass(frozen=True)
class ChshEstimate:
    value: float
    stderr: float

    @property
    def significance(self) -> float:
        """Violation of the local bound in standard errors."""
        if self.stderr == 0:
            return math.inf if self.value > 2 else -math.inf if self.value < 2 else 0.0
        return (self.value - 2.0) / self.stderr


# --------------------------------------------------------------------------
# sampling


def _probability_matrix(states, setting: MeasurementSetting) -> np.ndarray:
    arr = stack(states)
    projs = np.array(setting_projectors(setting))
    p = np.einsum("nij,kji->nk", arr, projs).real
    p = np.clip(p, 0.0, None)
    return p / p.sum(axis=1, keepdims=True)


def simulate_measurement(states: Iterable, setting, rng: np.random.Generator) -> TallyTable:
    """Born-rule outcome for each state in the stream under ``setting``."""
    if isinstance(setting, str):
        setting = MeasurementSetting.pauli(setting)
    states = list(states)
    table = TallyTable()
    if not states:
        table.add(setting, np.zeros(4))
        return table
    p = _probability_matrix(states, setting)
    u = rng.random(len(states))
    idx = (u[:, None] > np.cumsum(p, axis=1)[:, :-1]).sum(axis=1)
    table.add(setting, np.bincount(idx, minlength=4))
    return table


def sample_tallies(rho, settings: Sequence, n: int, rng: np.random.Generator) -> TallyTable:
    """Multinomial tallies of ``n`` draws per setting from a single (ensemble) state.

    Equivalent in distribution to measuring ``n`` states drawn from an ensemble
    whose average is ``rho``.
    """
    table = TallyTable()
    for s in settings:
        s = MeasurementSetting.pauli(s) if isinstance(s, str) else s
        table.add(s, rng.multinomial(n, outcome_probabilities(rho, s)))
    return table


def expected_tallies(rho, settings: Sequence, n: float) -> TallyTable:
    """Exact expected counts: probabilities scaled to ``n``."""
    table = TallyTable()
    for s in settings:
        s = MeasurementSetting.pauli(s) if isinstance(s, str) else s
        table.add(s, n * outcome_probabilities(rho, s))
    return table


# --------------------------------------------------------------------------
# estimators


def _corr_and_var(c: np.ndarray) -> tuple[float, float]:
    n = float(np.sum(c))
    if n <= 0:
        raise ValueError("setting has zero counts")
    e = float((c[0] - c[1] - c[2] + c[3]) / n)
    return e, max(0.0, 1.0 - e * e) / n


def estimate_witness(tallies: TallyTable, sign: int | BellKind = 1) -> Estimate:
    """Bell-state fidelity from XX, YY and ZZ correlators, F = (1 - E_ZZ +/- E_XX +/- E_YY)/4."""
    if isinstance(sign, BellKind):
        sign = sign.sign
    es, vs = [], []
    for lab in WITNESS_BASES:
        if lab not in tallies:
            raise ValueError(f"witness needs basis {lab}")
        e, v = _corr_and_var(tallies[lab])
        es.append(e)
        vs.append(v)
    f = witness_fidelity(es[0], es[1], es[2], sign)
    return Estimate(f, math.sqrt(sum(vs)) / 4.0)


def estimate_chsh(tallies: TallyTable, settings: ChshSettings = BELL_TEST_SETTINGS) -> ChshEstimate:
    s = 0.0
    var = 0.0
    for sign, m in zip(CHSH_SIGNS, settings.pairs()):
        if m not in tallies:
            raise ValueError(f"CHSH needs setting {m.label}")
        e, v = _corr_and_var(tallies[m])
        s += sign * e
        var += v
    return ChshEstimate(s, math.sqrt(var))


@dataclass
class TomographyReport:
    state: DensityMatrix
    fidelity_plus: float
    fidelity_minus: float
    tallies: TallyTable


def run_tomography(states, samples_per_setting: int, rng: np.random.Generator) -> TomographyReport:
    """Nine-basis measurement of a state stream followed by linear inversion.

    ``states`` is either a single state (measured ``samples_per_setting``
    times per basis) or a sequence that is cycled through.
    """
    if samples_per_setting < 1:
        raise ValueError("samples_per_setting must be >= 1")
    if isinstance(states, (DensityMatrix, np.ndarray)):
        table = sample_tallies(as_density(states), PAULI_BASES, samples_per_setting, rng)
    else:
        pool = list(states)
        if not pool:
            raise ValueError("empty state stream")
        table = TallyTable()
        for lab in PAULI_BASES:
            picks = [pool[i % len(pool)] for i in range(samples_per_setting)]
            table = table.merge(simulate_measurement(picks, lab, rng))
    rho = tomography_reconstruct(table)
    return TomographyReport(
        rho, fidelity_to_bell(rho, BellKind.PSI_PLUS), fidelity_to_bell(rho, BellKind.PSI_MINUS), table
    )


# --------------------------------------------------------------------------
# rates


def compute_edr(pairs: Sequence[ls.DeliveredPair], active_time_s: float, duty_cycle: float = 1.0, *, expected: bool = False) -> float:
    """Verified entanglement delivery rate in Hz.

    Counted mode uses each pair's sampled four-fold outcome; ``expected`` sums
    the four-fold probabilities instead (the same quantity in expectation,
    usable when the counted rate is far below one event per run).
    """
    if active_time_s <= 0:
        raise ValueError("wall time must be positive")
    if expected:
        n = sum(p.fourfold_probability for p in pairs)
    else:
        n = sum(1 for p in pairs if p.verified)
    return n * duty_cycle / active_time_s


def ensemble_state(pairs: Sequence[ls.DeliveredPair], kind: BellKind | None = None) -> DensityMatrix | None:
    """Average verified state, each pair weighted by its four-fold probability."""
    sel = [p for p in pairs if kind is None or p.kind is kind]
    w = np.array([p.fourfold_probability for p in sel])
    if not sel or w.sum() <= 0:
        return None
    arr = stack([p.verified_state for p in sel])
    return DensityMatrix(np.tensordot(w / w.sum(), arr, axes=1))


def joint_efficiency(cfg: ls.LinkConfig) -> float:
    """Signal-only retrieval and verification efficiency for a single stored excitation per node."""
    pa, ca = ls.fourfold_weights(replace(cfg, memory_a=replace(cfg.memory_a, background_rate_hz=0.0), memory_b=replace(cfg.memory_b, background_rate_hz=0.0)), np.array([1]), np.array([1]))
    return float(ca[0])


@dataclass(frozen=True)
class RatePoint:
    power_mw: float
    window_ns: float
    heralding_rate_hz: float
    analyzed_rate_hz: float
    edr_hz: float
    fidelity: float
    fidelity_err: float
    chsh: float
    chsh_err: float
    click_rate_hz: float = 0.0
    delivered: int = 0
    dropped: int = 0
    joint_efficiency: float = 0.0

    def __post_init__(self):
        if min(self.heralding_rate_hz, self.analyzed_rate_hz, self.edr_hz) < 0:
            raise ValueError("rates must be non-negative")
        if self.analyzed_rate_hz > self.heralding_rate_hz + 1e-9:
            raise ValueError("analyzed rate exceeds heralding rate")

    @property
    def significance(self) -> float:
        return ChshEstimate(self.chsh, self.chsh_err).significance

    @property
    def edr_cap_hz(self) -> float:
        return self.heralding_rate_hz * self.joint_efficiency


TSV_COLUMNS = ("power_mw", "window_ns", "herald_hz", "edr_hz", "fidelity", "fidelity_err", "chsh", "chsh_err", "sig_sigma")


def rate_point_row(p: RatePoint) -> list[str]:
    vals = (p.power_mw, p.window_ns, p.heralding_rate_hz, p.edr_hz, p.fidelity, p.fidelity_err, p.chsh, p.chsh_err, p.significance)
    return [f"{v:.10g}" for v in vals]


def tally_rng(seed: int, power_mw: float, window_ns: float) -> np.random.Generator:
    key = (3, int(round(power_mw * 1e6)), int(round(window_ns * 1e6)))
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def _measure(rho: DensityMatrix | None, samples: int, mode: str, rng) -> tuple[Estimate, ChshEstimate]:
    if rho is None:
        return Estimate(math.nan, math.nan), ChshEstimate(math.nan, math.nan)
    if mode == "expected":
        wt = expected_tallies(rho, WITNESS_BASES, samples)
        ct = expected_tallies(rho, BELL_TEST_SETTINGS.pairs(), samples)
    elif mode == "sampled":
        wt = sample_tallies(rho, WITNESS_BASES, samples, rng)
        ct = sample_tallies(rho, BELL_TEST_SETTINGS.pairs(), samples, rng)
    else:
        raise ValueError(f"unknown tally mode {mode!r}")
    return estimate_witness(wt, 1), estimate_chsh(ct)


def evaluate_run(run: ls.LinkRun, cfg: ls.LinkConfig | None = None, *, samples_per_setting: int = EXPERIMENT_SCALE_SAMPLES, tally_mode: str = "expected") -> RatePoint:
    """RatePoint for one photon stream analysed under ``cfg`` (window, filter, memory settings)."""
    cfg = cfg or run.cfg
    summary = ls.summarize(run.analyzed(cfg), cfg)
    wall = run.duration_s / cfg.protocol.duty_cycle
    power = cfg.source_a.pump_power_mw
    w = cfg.protocol.coincidence_window_ns
    fid, chsh = _measure(summary.state, samples_per_setting, tally_mode, tally_rng(cfg.seed, power, w))
    return RatePoint(
        power_mw=power,
        window_ns=w,
        heralding_rate_hz=run.n_heralds / wall,
        analyzed_rate_hz=summary.analyzed / wall,
        edr_hz=summary.expected_fourfold / wall,
        fidelity=fid.value,
        fidelity_err=fid.stderr,
        chsh=chsh.value,
        chsh_err=chsh.stderr,
        click_rate_hz=run.n_events / wall,
        delivered=summary.delivered,
        dropped=summary.dropped,
        joint_efficiency=joint_efficiency(cfg),
    )


def with_power(cfg: ls.LinkConfig, power_mw: float) -> ls.LinkConfig:
    return replace(
        cfg,
        source_a=replace(cfg.source_a, pump_power_mw=power_mw),
        source_b=replace(cfg.source_b, pump_power_mw=power_mw),
    )


def run_point(cfg: ls.LinkConfig, n_frames: int, *, samples_per_setting: int = EXPERIMENT_SCALE_SAMPLES, tally_mode: str = "expected", threads: int = 1) -> RatePoint:
    run = ls.run_link(cfg, n_frames, threads=threads)
    return evaluate_run(run, samples_per_setting=samples_per_setting, tally_mode=tally_mode)


@dataclass(frozen=True)
class SweepSpec:
    pump_powers_mw: tuple[float, ...]
    windows_ns: tuple[float, ...]
    frames_per_point: int
    samples_per_setting: int = EXPERIMENT_SCALE_SAMPLES
    tally_mode: str = "expected"

    def __post_init__(self):
        object.__setattr__(self, "pump_powers_mw", tuple(float(p) for p in self.pump_powers_mw))
        object.__setattr__(self, "windows_ns", tuple(float(w) for w in self.windows_ns))
        if not self.pump_powers_mw or not self.windows_ns:
            raise ValueError("sweep axes must be non-empty")
        if self.frames_per_point < 1 or self.samples_per_setting < 1:
            raise ValueError("frames and samples must be >= 1")
        if any(w <= 0 for w in self.windows_ns) or any(p < 0 for p in self.pump_powers_mw):
            raise ValueError("windows must be positive and powers non-negative")
        if self.tally_mode not in ("expected", "sampled"):
            raise ValueError("tally_mode must be 'expected' or 'sampled'")

    def points(self) -> list[tuple[float, float]]:
        return [(p, w) for p in self.pump_powers_mw for w in self.windows_ns]


def sweep(
    spec: SweepSpec,
    cfg: ls.LinkConfig,
    *,
    threads: int = 1,
    skip: Callable[[float, float], bool] | None = None,
    on_point: Callable[[RatePoint], None] | None = None,
) -> list[RatePoint]:
    """RatePoint grid in (power, window) order.

    All windows at one power are evaluated on a single photon stream, so the
    window trends are free of seed-to-seed noise. ``skip(power, window)``
    lets a caller resume a partially written grid.
    """

    def one_power(power: float) -> list[RatePoint]:
        pcfg = with_power(cfg, power)
        todo = [w for w in spec.windows_ns if not (skip and skip(power, w))]
        if not todo:
            return []
        run = ls.run_link(pcfg, spec.frames_per_point, keep_window_ns=max(spec.windows_ns))
        return [
            evaluate_run(run, pcfg.with_protocol(coincidence_window_ns=w), samples_per_setting=spec.samples_per_setting, tally_mode=spec.tally_mode)
            for w in todo
        ]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            groups = list(pool.map(one_power, spec.pump_powers_mw))
    else:
        groups = [one_power(p) for p in spec.pump_powers_mw]
    out = [p for g in groups for p in g]
    if on_point:
        for p in out:
            on_point(p)
    return out


# --------------------------------------------------------------------------
# SPI / TPI comparison


@dataclass
class CompareReport:
    spi_click_rate_hz: float
    tpi_herald_rate_hz: float
    offsets_rad: list[float]
    delta_phi: list[float]
    spi_fidelity: list[float]
    tpi_fidelity: list[float]

    @property
    def ratio(self) -> float:
        return self.tpi_herald_rate_hz / self.spi_click_rate_hz if self.spi_click_rate_hz else math.nan


def spi_tpi_compare(cfg: ls.LinkConfig, n_frames: int, offsets_rad: Sequence[float] = (0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0), *, threads: int = 1) -> CompareReport:
    """Both schemes on one photon stream; the phase offset is applied to link A.

    SPI fidelity is that of the heralded number state to the state expected
    without the offset; TPI fidelity is that of the delivered ensemble.
    """
    run = ls.run_link(cfg, n_frames, threads=threads)
    spi_cfg = cfg.with_protocol(mode=ls.Mode.SPI)
    spi = ls.spi_heralding(spi_cfg, run=run)
    ref = ls.spi_state(1, spi_cfg.delta_phi)
    dphis, f_spi, f_tpi = [], [], []
    for off in offsets_rad:
        ocfg = replace(cfg, channel_a=replace(cfg.channel_a, phase_offset_rad=cfg.channel_a.phase_offset_rad + off))
        dphi = ocfg.delta_phi
        dphis.append(dphi)
        st = ls.spi_state(1, dphi)
        f_spi.append(float(np.real(np.trace(ref.data @ st.data))))
        rho = ls.summarize(run.analyzed(ocfg), ocfg).state
        f_tpi.append(fidelity_to_bell(rho, BellKind.PSI_PLUS) if rho is not None else math.nan)
    return CompareReport(spi.click_rate_hz, run.herald_rate_hz, list(map(float, offsets_rad)), dphis, f_spi, f_tpi)


# --------------------------------------------------------------------------
# multiplexing


@dataclass(frozen=True)
class MultiplexProjection:
    modes: tuple[int, ...]
    edr_hz: tuple[float, ...]
    cap_hz: float


def multiplexing_projection(base: RatePoint, usable_modes: Sequence[int], base_modes: int = 1) -> MultiplexProjection:
    """Scale the EDR linearly in the number of usable modes, capped at
    herald rate times the joint retrieval/verification efficiency."""
    if base_modes < 1:
        raise ValueError("base_modes must be >= 1")
    cap = base.edr_cap_hz
    vals = tuple(min(base.edr_hz * m / base_modes, cap) for m in usable_modes)
    return MultiplexProjection(tuple(int(m) for m in usable_modes), vals, cap)


# --------------------------------------------------------------------------
# HOM on the link hardware


def hom_setup(cfg: ls.LinkConfig, pump_power_mw: float) -> ph.HomSetup:
    """HOM measurement with local signal detection and idlers interfering at C."""
    grid = cfg.grid
    mu = ph.mean_pairs_per_mode(replace(cfg.source_a, pump_power_mw=pump_power_mw), grid)
    eff_sig = ls.echo_capture(grid.mode_duration_ns, grid.mode_duration_ns)
    return ph.HomSetup(
        mu=mu,
        indistinguishability=cfg.indistinguishability,
        herald_efficiency_a=cfg.memory_a.verification_efficiency * eff_sig,
        herald_efficiency_b=cfg.memory_b.verification_efficiency * eff_sig,
        idler_efficiency_a=cfg.idler_transmission_a * cfg.detectors[0].efficiency,
        idler_efficiency_b=cfg.idler_transmission_b * cfg.detectors[1].efficiency,
        statistics=cfg.source_a.statistics,
    )
