"""Scenario files: JSON <-> config objects, validation with line-anchored errors."""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import json.decoder
import typing
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

from . import linksim as ls
from . import photonics as ph
from .analysis import EXPERIMENT_SCALE_SAMPLES, SweepSpec

SCHEMA_VERSION = 1
SCENARIO_NAMES = ("noiseless", "calibrated_3mw", "calibrated_18mw")

# numeric fields without a physical unit; every other numeric key must carry a unit suffix
DIMENSIONLESS = frozenset(
    {
        "heralding_efficiency",
        "indistinguishability",
        "efficiency",
        "storage_efficiency",
        "verification_efficiency",
        "duty_cycle",
        "retrieval_visibility_boost",
        "tpc_success_probability",
        "seed",
        "frames",
        "frames_per_point",
        "event_log_frames",
        "samples_per_setting",
        "schema_version",
    }
)
UNIT_SUFFIXES = ("_ns", "_us", "_km", "_mw", "_hz", "_db", "_rad", "_mhz", "_db_per_km", "_us_per_km", "_per_mw_hz")


class ScenarioError(ValueError):
    """Schema violation; ``line`` is 1-based when known."""

    def __init__(self, message: str, source: str = "<scenario>", line: int | None = None):
        self.source = source
        self.line = line
        loc = f"{source}:{line}" if line else source
        super().__init__(f"{loc}: {message}")


# --------------------------------------------------------------------------
# key -> line map


def _key_lines(text: str) -> dict[tuple, int]:
    """Line number of every object key and array element, keyed by JSON path."""
    dec = json.JSONDecoder()
    lines: dict[tuple, int] = {}
    ws = " \t\n\r"

    def line_at(i: int) -> int:
        return text.count("\n", 0, i) + 1

    def skip(i: int) -> int:
        while i < len(text) and text[i] in ws:
            i += 1
        return i

    def value(i: int, path: tuple) -> int:
        i = skip(i)
        ch = text[i]
        if ch == "{":
            i = skip(i + 1)
            if text[i] == "}":
                return i + 1
            while True:
                i = skip(i)
                key, j = json.decoder.scanstring(text, i + 1)
                lines[path + (key,)] = line_at(i)
                j = skip(j)
                j = value(j + 1, path + (key,))  # past ':'
                j = skip(j)
                if text[j] == ",":
                    i = j + 1
                    continue
                return j + 1
        if ch == "[":
            i = skip(i + 1)
            if text[i] == "]":
                return i + 1
            k = 0
            while True:
                i = skip(i)
                lines[path + (k,)] = line_at(i)
                j = skip(value(i, path + (k,)))
                k += 1
                if text[j] == ",":
                    i = j + 1
                    continue
                return j + 1
        _, end = dec.raw_decode(text, i)
        return end

    try:
        value(0, ())
    except (IndexError, ValueError):
        pass
    return lines


# --------------------------------------------------------------------------
# generic dataclass conversion


def _hints(cls) -> dict[str, Any]:
    return typing.get_type_hints(cls)


def to_dict(obj) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, (list, tuple)):
        return [to_dict(v) for v in obj]
    return obj


class _Builder:
    def __init__(self, source: str, lines: dict[tuple, int]):
        self.source = source
        self.lines = lines

    def fail(self, path: tuple, msg: str):
        line = None
        p = path
        while p and line is None:
            line = self.lines.get(p)
            p = p[:-1]
        where = ".".join(str(x) for x in path) or "<root>"
        raise ScenarioError(f"{where}: {msg}", self.source, line)

    def build(self, cls, data, path: tuple):
        if not isinstance(data, dict):
            self.fail(path, f"expected an object for {cls.__name__}")
        hints = _hints(cls)
        names = {f.name for f in dataclasses.fields(cls)}
        for k in data:
            if k not in names:
                self.fail(path + (k,), f"unknown key {k!r}")
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name in data:
                kwargs[f.name] = self.convert(hints[f.name], data[f.name], path + (f.name,))
        try:
            return cls(**kwargs)
        except (ValueError, TypeError) as exc:
            self.fail(path, str(exc))

    def convert(self, tp, v, path):
        origin = typing.get_origin(tp)
        args = typing.get_args(tp)
        if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)):
            if v is None and type(None) in args:
                return None
            inner = [a for a in args if a is not type(None)]
            return self.convert(inner[0], v, path)
        if dataclasses.is_dataclass(tp):
            return self.build(tp, v, path)
        if origin is tuple:
            if not isinstance(v, list):
                self.fail(path, "expected an array")
            if len(args) == 2 and args[1] is Ellipsis:
                return tuple(self.convert(args[0], x, path + (i,)) for i, x in enumerate(v))
            if len(v) != len(args):
                self.fail(path, f"expected {len(args)} entries, got {len(v)}")
            return tuple(self.convert(a, x, path + (i,)) for i, (a, x) in enumerate(zip(args, v)))
        if isinstance(tp, type) and issubclass(tp, enum.Enum):
            try:
                return tp(v)
            except ValueError:
                self.fail(path, f"expected one of {[e.value for e in tp]}")
        if tp is bool:
            if not isinstance(v, bool):
                self.fail(path, "expected true or false")
            return v
        if tp is int:
            if isinstance(v, bool) or not isinstance(v, int):
                self.fail(path, "expected an integer")
            return v
        if tp is float:
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                self.fail(path, "expected a number")
            return float(v)
        if tp is str:
            if not isinstance(v, str):
                self.fail(path, "expected a string")
            return v
        return v


# --------------------------------------------------------------------------
# scenario


@dataclass(frozen=True)
class RunOptions:
    frames: int = 100_000
    samples_per_setting: int = EXPERIMENT_SCALE_SAMPLES
    tally_mode: str = "sampled"
    debug_state: str | None = None  # "exact" or "werner:<p>" replaces the link output
    hom_pump_power_mw: float = 1.0
    event_log_frames: int = 100  # frames written to the event log export
    out_dir: str | None = None

    def __post_init__(self):
        if self.event_log_frames < 0:
            raise ValueError("event_log_frames must be >= 0")
        if self.frames < 1 or self.samples_per_setting < 1:
            raise ValueError("frames and samples_per_setting must be >= 1")
        if self.tally_mode not in ("expected", "sampled"):
            raise ValueError("tally_mode must be 'expected' or 'sampled'")
        if self.debug_state is not None:
            parse_debug_state(self.debug_state)


def parse_debug_state(text: str):
    from .qstate import BellKind, bell_state, werner

    if text == "exact":
        return bell_state(BellKind.PSI_PLUS)
    if text.startswith("werner:"):
        try:
            p = float(text.split(":", 1)[1])
        except ValueError:
            raise ValueError(f"bad werner parameter in {text!r}") from None
        return werner(p)
    raise ValueError("debug_state must be 'exact' or 'werner:<p>'")


@dataclass(frozen=True)
class Scenario:
    link: ls.LinkConfig = field(default_factory=ls.LinkConfig)
    run: RunOptions = field(default_factory=RunOptions)
    sweep: SweepSpec | None = None
    name: str = "unnamed"
    fitted: tuple[str, ...] = ()
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {self.schema_version}")


def check_unit_names(cls=Scenario, seen=None) -> list[str]:
    """Numeric keys lacking a unit suffix and not declared dimensionless."""
    seen = seen or set()
    bad = []
    for f in dataclasses.fields(cls):
        tp = _hints(cls)[f.name]
        args = typing.get_args(tp) or (tp,)
        for a in args:
            if dataclasses.is_dataclass(a) and a not in seen:
                seen.add(a)
                bad += check_unit_names(a, seen)
            elif typing.get_origin(a) is tuple:
                for inner in typing.get_args(a):
                    if dataclasses.is_dataclass(inner) and inner not in seen:
                        seen.add(inner)
                        bad += check_unit_names(inner, seen)
        numeric = any(a in (int, float) for a in args) or any(
            t in (int, float) for a in args for t in typing.get_args(a)
        )
        if numeric and f.name not in DIMENSIONLESS and not f.name.endswith(UNIT_SUFFIXES):
            bad.append(f"{cls.__name__}.{f.name}")
    return bad


def _set_path(data: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    cur = data
    for k in keys[:-1]:
        if isinstance(cur, list):
            k = int(k)
            cur = cur[k]
            continue
        if k not in cur or cur[k] is None:
            cur[k] = {}
        cur = cur[k]
    last = keys[-1]
    if isinstance(cur, list):
        cur[int(last)] = value
    else:
        cur[last] = value


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """``key.path=value`` overrides; values parse as JSON, otherwise as strings."""
    for item in overrides:
        if "=" not in item:
            raise ScenarioError(f"override {item!r} is not key=value", "--override")
        key, raw = item.split("=", 1)
        try:
            val = json.loads(raw)
        except json.JSONDecodeError:
            val = raw
        try:
            _set_path(data, key.strip(), val)
        except (KeyError, IndexError, ValueError, TypeError) as exc:
            raise ScenarioError(f"cannot apply override {item!r}: {exc}", "--override") from None
    return data


def scenario_from_dict(data: dict, source: str = "<scenario>", lines: dict | None = None) -> Scenario:
    return _Builder(source, lines or {}).build(Scenario, data, ())


def parse_scenario(text: str, source: str = "<scenario>", overrides: list[str] | None = None) -> Scenario:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"invalid JSON: {exc.msg} (column {exc.colno})", source, exc.lineno) from None
    if not isinstance(data, dict):
        raise ScenarioError("top level must be an object", source, 1)
    lines = _key_lines(text)
    if overrides:
        apply_overrides(data, overrides)
    return scenario_from_dict(data, source, lines)


def scenario_path(name_or_path: str) -> Path:
    """A shipped scenario name or a file path."""
    if name_or_path in SCENARIO_NAMES:
        return Path(str(resources.files("qrlink") / "scenarios" / f"{name_or_path}.json"))
    return Path(name_or_path)


def load_scenario(name_or_path: str, overrides: list[str] | None = None) -> Scenario:
    path = scenario_path(name_or_path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario: {exc.strerror}", str(path)) from None
    return parse_scenario(text, str(path), overrides)


def canonical_json(obj) -> str:
    return json.dumps(to_dict(obj), sort_keys=True, separators=(",", ":"), allow_nan=False)


def dump_scenario(sc: Scenario) -> str:
    return json.dumps(to_dict(sc), indent=2) + "\n"


def config_hash(sc: Scenario) -> str:
    return hashlib.sha256(canonical_json(sc).encode("utf-8")).hexdigest()
