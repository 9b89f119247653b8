"""Quantities with explicit unit suffixes, e.g. ``"250 mT"`` or ``"7.3 GHz"``.

Values are normalised to SI on parse. Emission always uses the SI base unit
with ``repr`` precision, so parse -> emit -> parse is the identity.
"""

from __future__ import annotations

import re

BASE = {
    "field": "T",
    "frequency": "Hz",
    "efield": "V/m",
    "voltage": "V",
    "length": "m",
    "time": "s",
    "temperature": "K",
}

_PREFIX = {"G": 1e9, "M": 1e6, "k": 1e3, "": 1.0, "m": 1e-3, "u": 1e-6, "µ": 1e-6, "μ": 1e-6, "n": 1e-9}

UNITS: dict[str, dict[str, float]] = {dim: {} for dim in BASE}
for _p, _s in _PREFIX.items():
    UNITS["field"][_p + "T"] = _s
    UNITS["frequency"][_p + "Hz"] = _s
    UNITS["voltage"][_p + "V"] = _s
    UNITS["efield"][_p + "V/m"] = _s
    UNITS["length"][_p + "m"] = _s
    UNITS["time"][_p + "s"] = _s
    UNITS["temperature"][_p + "K"] = _s
UNITS["field"]["G"] = 1e-4
UNITS["field"]["mG"] = 1e-7
UNITS["efield"].update({"V/um": 1e6, "V/μm": 1e6, "V/cm": 1e2, "kV/cm": 1e5})
UNITS["length"].pop("Mm")
UNITS["length"].pop("Gm")

_QTY = re.compile(r"^\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*(\S*)\s*$")


class UnitError(ValueError):
    """A quantity string is malformed or carries the wrong unit."""


def parse_quantity(text, dimension: str, default_unit: str | None = None) -> float:
    """SI value of ``text`` (``"<number> <unit>"``) for the given dimension.

    Bare numbers are accepted only when ``default_unit`` is given.
    """
    if dimension not in BASE:
        raise UnitError(f"unknown dimension {dimension!r}")
    if isinstance(text, bool):
        raise UnitError(f"expected a {dimension} quantity, got {text!r}")
    if isinstance(text, (int, float)):
        text = repr(text)
    m = _QTY.match(str(text))
    if not m:
        raise UnitError(f"cannot parse quantity {text!r}")
    number, unit = float(m.group(1)), m.group(2)
    if not unit:
        if default_unit is None:
            raise UnitError(f"{text!r} needs a {dimension} unit (e.g. {BASE[dimension]})")
        unit = default_unit
    table = UNITS[dimension]
    if unit not in table:
        raise UnitError(f"{unit!r} is not a {dimension} unit; use one of {sorted(table)}")
    return number * table[unit]


def format_quantity(value: float, dimension: str) -> str:
    """Canonical text for an SI value."""
    return f"{float(value)!r} {BASE[dimension]}"
