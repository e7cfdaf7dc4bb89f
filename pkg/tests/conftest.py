from dataclasses import replace

import pytest

from qrlink import linksim as ls
from qrlink import photonics as ph
from qrlink.config import load_scenario


def ideal_config(mu: float = 0.01, *, seed: int = 1, filt: float | None = None, window: float = 20.0, v: float = 1.0) -> ls.LinkConfig:
    """Lossless, noiseless, co-located link with per-mode pair number ``mu``."""
    src = ph.SourceConfig(pair_rate_per_mw_hz=60e3, pump_power_mw=mu / (60e3 * 83e-9), heralding_efficiency=1.0, indistinguishability=v)
    fibre = ph.ChannelConfig(length_km=0.0, attenuation_db_per_km=0.0)
    return ls.LinkConfig(
        source_a=src,
        source_b=src,
        channel_a=fibre,
        channel_b=fibre,
        detectors=(ph.DetectorConfig(1.0, 0.0), ph.DetectorConfig(1.0, 0.0)),
        memory_a=ls.MemoryConfig(storage_efficiency=1.0),
        memory_b=ls.MemoryConfig(storage_efficiency=1.0),
        protocol=ls.ProtocolOptions(coincidence_window_ns=window, fixed_delay_filter_ns=filt),
        seed=seed,
    )


def small_grid(cfg: ls.LinkConfig, modes: int) -> ls.LinkConfig:
    return replace(cfg, grid=ph.TemporalGrid(83.0, 83.0 * modes / 1000.0))


@pytest.fixture(scope="session")
def cal3():
    return load_scenario("calibrated_3mw")


@pytest.fixture(scope="session")
def cal18():
    return load_scenario("calibrated_18mw")


# criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
