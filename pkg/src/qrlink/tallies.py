"""Per-setting outcome counts shared by the estimators and tomography."""

from __future__ import annotations

from typing import Iterator, Mapping

import numpy as np

from .qstate import MeasurementSetting

OUTCOMES = ("++", "+-", "-+", "--")


def _key(setting) -> MeasurementSetting:
    if isinstance(setting, MeasurementSetting):
        return setting
    if isinstance(setting, str):
        return MeasurementSetting.pauli(setting)
    raise TypeError(f"cannot use {setting!r} as a measurement setting")


class TallyTable:
    """Counts (N++, N+-, N-+, N--) keyed by measurement setting.

    Counts may be floats so that exact expected tallies (probabilities times N)
    can be fed to the estimators.
    """

    def __init__(self, data: Mapping | None = None):
        self._counts: dict[MeasurementSetting, np.ndarray] = {}
        for k, v in (data or {}).items():
            self.add(k, v)

    def add(self, setting, counts) -> None:
        c = np.asarray(counts, dtype=float)
        if c.shape != (4,):
            raise ValueError("expected four outcome counts")
        if np.any(c < 0):
            raise ValueError("counts must be non-negative")
        key = _key(setting)
        if key in self._counts:
            self._counts[key] = self._counts[key] + c
        else:
            self._counts[key] = c

    def get(self, setting) -> np.ndarray | None:
        return self._counts.get(_key(setting))

    def __getitem__(self, setting) -> np.ndarray:
        c = self.get(setting)
        if c is None:
            raise KeyError(setting)
        return c

    def __contains__(self, setting) -> bool:
        return _key(setting) in self._counts

    def __iter__(self) -> Iterator[MeasurementSetting]:
        return iter(self._counts)

    def __len__(self) -> int:
        return len(self._counts)

    def items(self):
        return self._counts.items()

    def total(self, setting) -> float:
        return float(self[setting].sum())

    def correlator(self, setting) -> float:
        c = self[setting]
        n = c.sum()
        if n <= 0:
            raise ValueError(f"setting {_key(setting).label} has zero counts")
        return float((c[0] - c[1] - c[2] + c[3]) / n)

    def merge(self, other: "TallyTable") -> "TallyTable":
        out = TallyTable(self._counts)
        for k, v in other.items():
            out.add(k, v)
        return out

    def to_rows(self) -> list[tuple[str, ...]]:
        rows = []
        for k in sorted(self._counts, key=lambda s: s.label):
            c = self._counts[k]
            rows.append((k.label, *(f"{x:.10g}" for x in c)))
        return rows
