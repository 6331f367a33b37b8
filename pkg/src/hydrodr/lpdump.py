"""Optional LP dumping for cross-validation against external solvers.

Disabled unless :func:`configure` points at a directory (the CLI wires
this to ``--dump-lp``).  Every LP built afterwards is written once, in
CPLEX LP text format, with a sequence number per label.
"""

from __future__ import annotations

import itertools
from pathlib import Path

from .lp import LinearProgram, write_lp

_dir: Path | None = None
_counter = itertools.count()


def configure(directory) -> None:
    global _dir, _counter
    _dir = Path(directory) if directory else None
    _counter = itertools.count()
    if _dir:
        _dir.mkdir(parents=True, exist_ok=True)


def enabled() -> bool:
    return _dir is not None


def maybe_dump(lp: LinearProgram, label: str) -> None:
    if _dir is None:
        return
    path = _dir / f"{label}_{next(_counter):05d}.lp"
    with open(path, "w") as fh:
        write_lp(lp, fh, name=label)
