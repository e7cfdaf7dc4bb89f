"""Command-line front end: ``qrlink <command> SCENARIO [options]``.

Exit codes: 0 success, 2 invalid scenario or arguments, 3 physical
constraint violated, 4 sweep output written under a different config hash,
5 no delivered pairs to analyse.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import analysis as an
from . import export
from . import linksim as ls
from .config import ScenarioError, Scenario, config_hash, dump_scenario, load_scenario, parse_debug_state, to_dict
from .qstate import BELL_TEST_SETTINGS, PAULI_BASES, BellKind, fidelity_to_bell, tomography_reconstruct

EXIT_OK = 0
EXIT_SCHEMA = 2
EXIT_PHYSICAL = 3
EXIT_HASH = 4
EXIT_EMPTY = 5
OUT_DIR_ENV = "QRLINK_OUT_DIR"


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _timestamp() -> str:
    """UTC time; SOURCE_DATE_EPOCH pins it for reproducible manifests."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = int(epoch) if epoch is not None else int(time.time())
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(t))


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


class Context:
    def __init__(self, args, command: str):
        self.args = args
        self.command = command
        self.started = _timestamp()
        overrides = list(args.override or [])
        if args.seed is not None:
            overrides.append(f"link.seed={args.seed}")
        if args.frames is not None:
            overrides.append(f"run.frames={args.frames}")
        self.scenario = load_scenario(args.scenario, overrides)
        if args.frames is not None and self.scenario.sweep is not None:
            self.scenario = replace(self.scenario, sweep=replace(self.scenario.sweep, frames_per_point=args.frames))
        try:
            self.scenario.link.validate()
        except ls.ConfigError as exc:
            raise CliError(EXIT_PHYSICAL, f"{args.scenario}: {exc}") from None
        out = args.out_dir or self.scenario.run.out_dir or os.environ.get(OUT_DIR_ENV) or "qrlink-out"
        self.out_dir = Path(out)
        self.outputs: list[str] = []
        self.hash = config_hash(self.scenario)

    @property
    def cfg(self) -> ls.LinkConfig:
        return self.scenario.link

    def write(self, name: str, text: str) -> None:
        export.atomic_write(self.out_dir / name, text)
        self.outputs.append(name)

    def manifest(self, extra: dict | None = None) -> None:
        data = {
            "tool": "qrlink",
            "version": __version__,
            "command": self.command,
            "scenario": self.scenario.name,
            "config_hash": self.hash,
            "seed": self.cfg.seed,
            "frames": self.scenario.run.frames,
            "started": self.started,
            "finished": _timestamp(),
            "outputs": sorted(self.outputs),
        }
        if extra:
            data.update(extra)
        export.atomic_write(self.out_dir / f"{self.command}_manifest.json", _json(data))


def _point_dict(p: an.RatePoint) -> dict:
    d = to_dict(p)
    d["significance_sigma"] = p.significance
    return d


# --------------------------------------------------------------------------
# commands


def cmd_simulate(ctx: Context) -> int:
    sc = ctx.scenario
    run = ls.run_link(ctx.cfg, sc.run.frames, threads=ctx.args.threads, keep_events=sc.run.event_log_frames)
    point = an.evaluate_run(run, samples_per_setting=sc.run.samples_per_setting, tally_mode=sc.run.tally_mode)
    delivery = run.delivered()
    ctx.write("events.tsv", export.events_text(run.events))
    ctx.write("heralds.tsv", export.heralds_text([p.herald for p in delivery.pairs]))
    ctx.write("delivered.tsv", export.delivered_text(delivery.pairs))
    summary = {
        "rate_point": _point_dict(point),
        "detections": run.n_events,
        "heralds": run.n_heralds,
        "analyzed": delivery.analyzed,
        "dropped_storage_expired": delivery.dropped,
        "verified_counted": sum(1 for p in delivery.pairs if p.verified),
        "edr_counted_hz": an.compute_edr(delivery.pairs, run.duration_s, ctx.cfg.protocol.duty_cycle),
        "wall_time_s": run.wall_time_s,
    }
    ctx.write("summary.json", _json(summary))
    ctx.write("scenario.json", dump_scenario(sc))
    ctx.manifest()
    print(
        f"heralds {point.heralding_rate_hz:.1f} Hz  analyzed {point.analyzed_rate_hz:.2f} Hz  "
        f"EDR {point.edr_hz:.4g} Hz  F {point.fidelity:.4f} +/- {point.fidelity_err:.4f}  "
        f"S {point.chsh:.3f} +/- {point.chsh_err:.3f}"
    )
    return EXIT_OK


def _sweep_key(power: float, window: float) -> tuple[str, str]:
    return (f"{power:.10g}", f"{window:.10g}")


def cmd_sweep(ctx: Context) -> int:
    spec = ctx.scenario.sweep
    if spec is None:
        raise CliError(EXIT_SCHEMA, f"{ctx.args.scenario}: scenario has no sweep section")
    path = ctx.out_dir / "sweep.tsv"
    header = f"{export.SWEEP_HEADER} config_hash={ctx.hash}"
    done: dict[tuple[str, str], list[str]] = {}
    if path.exists():
        comments, cols, rows = export.read_table(path.read_text(encoding="utf-8"))
        if header not in comments or tuple(cols) != an.TSV_COLUMNS:
            raise CliError(EXIT_HASH, f"{path}: existing sweep output belongs to a different configuration")
        done = {(r[0], r[1]): r for r in rows}

    def flush():
        rows = [done[_sweep_key(p, w)] for p, w in spec.points() if _sweep_key(p, w) in done]
        text = header + "\n" + "\t".join(an.TSV_COLUMNS) + "\n" + "".join("\t".join(r) + "\n" for r in rows)
        export.atomic_write(path, text)

    def record(point: an.RatePoint):
        done[_sweep_key(point.power_mw, point.window_ns)] = an.rate_point_row(point)

    for power in spec.pump_powers_mw:
        sub = replace(spec, pump_powers_mw=(power,))
        for pt in an.sweep(sub, ctx.cfg, threads=ctx.args.threads, skip=lambda p, w: _sweep_key(p, w) in done):
            record(pt)
        flush()  # resumable after every power
    flush()
    ctx.outputs.append("sweep.tsv")
    ctx.manifest({"points": len(spec.points())})
    print(f"{len(spec.points())} points -> {path}")
    return EXIT_OK


def _summary(ctx: Context) -> ls.EnsembleSummary:
    sc = ctx.scenario
    run = ls.run_link(ctx.cfg, sc.run.frames, threads=ctx.args.threads)
    return ls.summarize(run.analyzed(), ctx.cfg)


def _ensemble(ctx: Context, kind: BellKind | None = None, summary: ls.EnsembleSummary | None = None):
    """State to measure: the debug state, or the delivered four-fold ensemble."""
    sc = ctx.scenario
    if sc.run.debug_state:
        return parse_debug_state(sc.run.debug_state)
    summary = summary or _summary(ctx)
    rho = summary.state if kind is None else summary.by_kind[kind]
    if rho is None or summary.expected_fourfold <= 0:
        raise CliError(
            EXIT_EMPTY,
            f"{ctx.args.scenario}: no delivered pairs with a non-zero four-fold probability in "
            f"{sc.run.frames} frames; raise --frames or the pump power",
        )
    return rho


def _tallies(rho, settings, ctx: Context, stream: int):
    sc = ctx.scenario
    n = sc.run.samples_per_setting
    if sc.run.tally_mode == "expected":
        return an.expected_tallies(rho, settings, n)
    rng = np.random.default_rng(np.random.SeedSequence(ctx.cfg.seed, spawn_key=(4, stream)))
    return an.sample_tallies(rho, settings, n, rng)


def _tally_text(table) -> str:
    rows = ["setting\tn_pp\tn_pm\tn_mp\tn_mm"]
    rows += ["\t".join(r) for r in table.to_rows()]
    return "\n".join(rows) + "\n"


def cmd_belltest(ctx: Context) -> int:
    rho = _ensemble(ctx)
    table = _tallies(rho, BELL_TEST_SETTINGS.pairs(), ctx, 0)
    est = an.estimate_chsh(table)
    ctx.write("chsh_tallies.tsv", _tally_text(table))
    report = {
        "chsh": est.value,
        "chsh_err": est.stderr,
        "significance_sigma": est.significance,
        "samples_per_setting": ctx.scenario.run.samples_per_setting,
        "tally_mode": ctx.scenario.run.tally_mode,
        "correlators": {m.label: table.correlator(m) for m in BELL_TEST_SETTINGS.pairs()},
    }
    ctx.write("belltest.json", _json(report))
    ctx.manifest()
    print(f"S = {est.value:.4f} +/- {est.stderr:.4f} ({est.significance:.1f} sigma)")
    return EXIT_OK


def cmd_tomography(ctx: Context) -> int:
    cfg = ctx.cfg
    if ctx.args.bypass:
        ctx.scenario = replace(ctx.scenario, link=cfg.with_protocol(memory_bypass=True, feed_forward=False))
        ctx.hash = config_hash(ctx.scenario)
    bypass = ctx.scenario.link.protocol.memory_bypass
    kinds = (BellKind.PSI_PLUS, BellKind.PSI_MINUS) if bypass and not ctx.scenario.run.debug_state else (None,)
    summary = None if ctx.scenario.run.debug_state else _summary(ctx)
    report = {}
    for i, kind in enumerate(kinds):
        rho = _ensemble(ctx, kind, summary)
        table = _tallies(rho, PAULI_BASES, ctx, 10 + i)
        est = tomography_reconstruct(table)
        tag = "delivered" if kind is None else kind.value
        ctx.write(f"tomography_{tag}.txt", est.to_text())
        report[tag] = {
            "fidelity_psi_plus": fidelity_to_bell(est, BellKind.PSI_PLUS),
            "fidelity_psi_minus": fidelity_to_bell(est, BellKind.PSI_MINUS),
        }
        print(f"{tag}: F+ = {report[tag]['fidelity_psi_plus']:.4f}  F- = {report[tag]['fidelity_psi_minus']:.4f}")
    ctx.write("tomography.json", _json(report))
    ctx.manifest()
    return EXIT_OK


def cmd_compare(ctx: Context) -> int:
    offsets = [float(x) for x in ctx.args.offsets.split(",")] if ctx.args.offsets else list(np.linspace(0.0, np.pi, 7))
    rep = an.spi_tpi_compare(ctx.cfg, ctx.scenario.run.frames, offsets, threads=ctx.args.threads)
    rows = ["offset_rad\tdelta_phi_rad\tspi_fidelity\ttpi_fidelity"]
    rows += [
        "\t".join(f"{v:.10g}" for v in r)
        for r in zip(rep.offsets_rad, rep.delta_phi, rep.spi_fidelity, rep.tpi_fidelity)
    ]
    ctx.write("phase_sweep.tsv", "\n".join(rows) + "\n")
    ctx.write(
        "compare.json",
        _json({"spi_click_rate_hz": rep.spi_click_rate_hz, "tpi_herald_rate_hz": rep.tpi_herald_rate_hz, "ratio": rep.ratio}),
    )
    ctx.manifest()
    print(f"SPI {rep.spi_click_rate_hz:.1f} Hz  TPI {rep.tpi_herald_rate_hz:.1f} Hz  ratio {rep.ratio:.4f}")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "belltest": cmd_belltest,
    "tomography": cmd_tomography,
    "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("scenario", help="scenario JSON path or shipped name (noiseless, calibrated_3mw, calibrated_18mw)")
    common.add_argument("--seed", type=int, help="override link.seed")
    common.add_argument("--frames", type=int, help="override run.frames (and sweep frames per point)")
    common.add_argument("--out-dir", help=f"output directory (default: ${OUT_DIR_ENV} or ./qrlink-out)")
    common.add_argument("--threads", type=int, default=1, help="worker threads for frame blocks")
    common.add_argument("--override", action="append", metavar="KEY=VALUE", help="set a scenario field by dotted path; value parsed as JSON")
    parser = argparse.ArgumentParser(prog="qrlink", description="Quantum repeater link simulator")
    parser.add_argument("--version", action="version", version=f"qrlink {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="run the link and export events, heralds and deliveries")
    sub.add_parser("sweep", parents=[common], help="rate/fidelity grid over pump power and window")
    sub.add_parser("belltest", parents=[common], help="CHSH test on delivered pairs")
    p = sub.add_parser("tomography", parents=[common], help="nine-basis tomography of delivered pairs")
    p.add_argument("--bypass", action="store_true", help="verify photons without storage (both parities kept)")
    p = sub.add_parser("compare", parents=[common], help="SPI versus TPI rates and phase sensitivity")
    p.add_argument("--offsets", help="comma-separated phase offsets in rad applied to link A")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_SCHEMA if exc.code not in (0, None) else EXIT_OK
    if args.threads < 1:
        print("qrlink: --threads must be >= 1", file=sys.stderr)
        return EXIT_SCHEMA
    try:
        ctx = Context(args, args.command)
        return COMMANDS[args.command](ctx)
    except ScenarioError as exc:
        print(f"qrlink: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except CliError as exc:
        print(f"qrlink: {exc}", file=sys.stderr)
        return exc.code
    except ls.ConfigError as exc:
        print(f"qrlink: {exc}", file=sys.stderr)
        return EXIT_PHYSICAL


if __name__ == "__main__":
    raise SystemExit(main())
