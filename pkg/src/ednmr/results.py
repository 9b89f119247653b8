"""Tabular results with a ``#``-prefixed metadata header."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


def _fmt(x) -> str:
    return repr(float(x))


def write_metadata_csv(path, metadata: dict, header: list[str], rows) -> None:
    lines = [f"# {k}: {v}" for k, v in metadata.items()]
    lines.append(",".join(header))
    lines.extend(",".join(_fmt(x) for x in row) for row in rows)
    Path(path).write_text("\n".join(lines) + "\n")


def read_metadata_csv(path) -> tuple[dict, list[str], np.ndarray]:
    meta, header, rows = {}, None, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            k, _, v = line[1:].partition(":")
            meta[k.strip()] = v.strip()
        elif header is None:
            header = [h.strip() for h in line.split(",")]
        elif line.strip():
            rows.append([float(x) for x in line.split(",")])
    if header is None:
        raise ValueError(f"{path}: no column header")
    return meta, header, np.array(rows, dtype=float).reshape(-1, len(header))


@dataclass
class SpectrumResult:
    """A signal sampled on one axis, plus optional extra named columns."""

    axis: np.ndarray
    signal: np.ndarray
    metadata: dict = field(default_factory=dict)
    axis_name: str = "axis"
    extra: dict = field(default_factory=dict)
    signal_name: str = "signal"

    def to_csv(self, path) -> None:
        header = [self.axis_name, self.signal_name, *self.extra]
        cols = [self.axis, self.signal, *self.extra.values()]
        write_metadata_csv(path, self.metadata, header, zip(*cols))

    @classmethod
    def from_csv(cls, path) -> "SpectrumResult":
        meta, header, data = read_metadata_csv(path)
        extra = {c: data[:, 2 + k] for k, c in enumerate(header[2:])}
        return cls(data[:, 0], data[:, 1], meta, header[0], extra, header[1])
