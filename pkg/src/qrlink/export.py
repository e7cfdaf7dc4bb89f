"""Versioned text exports for events, heralds, deliveries and sweep grids."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

from . import linksim as ls
from .qstate import fidelity_to_bell

EVENTS_HEADER = "# qrlink events v1"
HERALDS_HEADER = "# qrlink heralds v1"
DELIVERED_HEADER = "# qrlink delivered v1"
SWEEP_HEADER = "# qrlink sweep v1"


def atomic_write(path: Path, text: str) -> None:
    """Write via a temporary file in the same directory and rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(x) -> str:
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, float):
        return repr(x)
    if x is None:
        return "-"
    return str(x)


def _table(header: str, columns: Sequence[str], rows: Iterable[Sequence]) -> str:
    lines = [header, "\t".join(columns)]
    lines += ["\t".join(_fmt(v) for v in row) for row in rows]
    return "\n".join(lines) + "\n"


def events_text(log: ls.EventLog) -> str:
    """One record per detection: frame, time since frame start, node, detector, tags."""
    rows = []
    for e in log:
        tags = ",".join(sorted(e.provenance))
        rows.append((e.frame, e.time_ns, "C", e.detector, tags))
    return _table(EVENTS_HEADER, ("frame", "time_ns", "node", "detector", "tags"), rows)


HERALD_COLUMNS = ("t1_ns", "t2_ns", "mode1", "mode2", "det1", "det2", "parity", "category", "pairs_a", "pairs_b")


def heralds_text(heralds: Sequence[ls.HeraldRecord]) -> str:
    rows = [
        (
            h.t1_ns,
            h.t2_ns,
            h.mode_indices[0],
            h.mode_indices[1],
            f"D{h.detectors[0] + 1}",
            f"D{h.detectors[1] + 1}",
            h.parity.value,
            h.category.value if h.category else None,
            h.excitations[0],
            h.excitations[1],
        )
        for h in heralds
    ]
    return _table(HERALDS_HEADER, HERALD_COLUMNS, rows)


DELIVERED_COLUMNS = (
    "t1_ns",
    "t2_ns",
    "heralded",
    "delivered",
    "category",
    "delivered_at_ns",
    "retrieved_a",
    "retrieved_b",
    "tpc_ok",
    "fourfold_probability",
    "verified",
    "fidelity",
)


def delivered_text(pairs: Sequence[ls.DeliveredPair]) -> str:
    rows = []
    for p in pairs:
        ra, rb = p.retrieval_success if p.retrieval_success else (None, None)
        rows.append(
            (
                p.herald.t1_ns,
                p.herald.t2_ns,
                p.herald.parity.value,
                p.kind.value,
                p.herald.category.value if p.herald.category else None,
                p.delivered_at_ns,
                ra,
                rb,
                p.tpc_success,
                p.fourfold_probability,
                p.verified,
                fidelity_to_bell(p.verified_state if p.verified_state is not None else p.state, p.kind),
            )
        )
    return _table(DELIVERED_HEADER, DELIVERED_COLUMNS, rows)


def read_table(text: str) -> tuple[list[str], list[str], list[list[str]]]:
    """(comment lines, column names, rows) of an exported table."""
    comments, cols, rows = [], None, []
    for line in text.splitlines():
        if line.startswith("#"):
            comments.append(line)
        elif cols is None:
            cols = line.split("\t")
        elif line:
            rows.append(line.split("\t"))
    return comments, cols or [], rows
