"""Experiment configuration: YAML with unit-suffixed quantities.

:func:`load_config` resolves file references relative to the config file,
validates grids and units, and returns an :class:`ExperimentConfig` in SI
units. :meth:`ExperimentConfig.to_dict` emits the canonical form written to
run manifests; loading that form again gives an equal config.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .units import UnitError, format_quantity, parse_quantity

CONFIG_DIR_ENV = "EDNMR_CONFIG_DIR"
DEFAULT_NAME = "default_experiment.yaml"


class ConfigError(ValueError):
    """The configuration is invalid or references missing files."""


@dataclass(frozen=True)
class DriveConfig:
    channel: str = "electric"
    coefficients: str | None = None
    e_amplitude: float = 5e4  # V/m
    b2_amplitude: float = 2e-5  # T
    b2_direction: tuple = (1.0, 0.0, 0.0)
    leak_fraction: float = 0.02


@dataclass(frozen=True)
class ResonatorConfig:
    network: str | None = None
    f_start: float = 1e9
    f_stop: float = 12e9
    points: int = 4001
    threshold_db: float = -20.0


@dataclass(frozen=True)
class GridConfig:
    field_start: float = 0.23
    field_stop: float = 0.27
    field_points: int = 801
    probe_frequency: float = 7.0e9
    rf_span: float = 2e5
    rf_points: int = 41
    harmonic: int = 2
    transition: int = 0
    durations_start: float = 0.0
    durations_stop: float = 2e-5
    durations_points: int = 81
    amplitudes: tuple = (0.0, 2.5e4, 5e4)

    def field_grid(self):
        return np.linspace(self.field_start, self.field_stop, self.field_points)

    def durations(self):
        return np.linspace(self.durations_start, self.durations_stop, self.durations_points)


@dataclass(frozen=True)
class EnsembleConfig:
    enabled: bool = False
    center_width: float = 1e-5
    gap_width: float = 1e-5
    standoff: float = 1e-6
    lateral_points: int = 128
    depth_points: int = 32
    epilayer_thickness: float = 2e-6


@dataclass(frozen=True)
class ExperimentConfig:
    species: str = "P"
    b0_magnitude: float = 0.25
    b0_direction: tuple = (1.0, 1.0, 0.0)
    temperature: float = 1.9
    drive: DriveConfig = field(default_factory=DriveConfig)
    donors: str | None = None
    resonator: ResonatorConfig = field(default_factory=ResonatorConfig)
    grids: GridConfig = field(default_factory=GridConfig)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    probe_line: int = 0
    seed: int = 0
    output: str = "results"

    def replace(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        """Canonical nested form with SI unit suffixes."""
        q = format_quantity
        d, r, g, e = self.drive, self.resonator, self.grids, self.ensemble
        return {
            "species": self.species,
            "static_field": {"magnitude": q(self.b0_magnitude, "field"),
                             "direction": [float(x) for x in self.b0_direction]},
            "temperature": q(self.temperature, "temperature"),
            "drive": {
                "channel": d.channel,
                "coefficients": d.coefficients,
                "e_amplitude": q(d.e_amplitude, "efield"),
                "b2_amplitude": q(d.b2_amplitude, "field"),
                "b2_direction": [float(x) for x in d.b2_direction],
                "leak_fraction": float(d.leak_fraction),
            },
            "donors": self.donors,
            "resonator": {"network": r.network, "f_start": q(r.f_start, "frequency"),
                          "f_stop": q(r.f_stop, "frequency"), "points": r.points,
                          "threshold_db": float(r.threshold_db)},
            "grids": {
                "field_start": q(g.field_start, "field"), "field_stop": q(g.field_stop, "field"),
                "field_points": g.field_points,
                "probe_frequency": q(g.probe_frequency, "frequency"),
                "rf_span": q(g.rf_span, "frequency"), "rf_points": g.rf_points,
                "harmonic": g.harmonic, "transition": g.transition,
                "durations_start": q(g.durations_start, "time"),
                "durations_stop": q(g.durations_stop, "time"),
                "durations_points": g.durations_points,
                "amplitudes": [q(a, "efield" if d.channel == "electric" else "field")
                               for a in g.amplitudes],
            },
            "ensemble": {"enabled": e.enabled, "center_width": q(e.center_width, "length"),
                         "gap_width": q(e.gap_width, "length"), "standoff": q(e.standoff, "length"),
                         "lateral_points": e.lateral_points, "depth_points": e.depth_points,
                         "epilayer_thickness": q(e.epilayer_thickness, "length")},
            "probe_line": self.probe_line,
            "seed": self.seed,
            "output": self.output,
        }

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, allow_unicode=True)


def _vec(v, name):
    try:
        a = tuple(float(x) for x in v)
    except TypeError:
        raise ConfigError(f"{name} must be a list of three numbers") from None
    if len(a) != 3 or not np.linalg.norm(a) > 0:
        raise ConfigError(f"{name} must be a non-zero 3-vector")
    return a


def _int(v, name, lo=0):
    if isinstance(v, bool) or not isinstance(v, int) or v < lo:
        raise ConfigError(f"{name} must be an integer >= {lo}")
    return v


def _resolve(path, base: Path | None):
    if path is None:
        return None
    p = Path(path)
    if not p.is_absolute() and base is not None:
        p = base / p
    if not p.exists():
        raise ConfigError(f"referenced file not found: {p}")
    return str(p.resolve())


def _known(section: dict, allowed, name):
    extra = set(section) - set(allowed)
    if extra:
        raise ConfigError(f"unknown key(s) in {name}: {sorted(extra)}")


def from_dict(raw: dict, base_dir: Path | None = None) -> ExperimentConfig:
    """Validate a nested config mapping (the YAML document) into SI values."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    _known(raw, ("species", "static_field", "temperature", "drive", "donors", "resonator", "grids",
                 "ensemble", "probe_line", "seed", "output"), "config")
    dflt = ExperimentConfig()
    try:
        sf = raw.get("static_field", {}) or {}
        _known(sf, ("magnitude", "direction"), "static_field")
        dr = raw.get("drive", {}) or {}
        _known(dr, [f for f in DriveConfig.__dataclass_fields__], "drive")
        channel = dr.get("channel", "electric")
        if channel not in ("electric", "magnetic"):
            raise ConfigError("drive.channel must be 'electric' or 'magnetic'")
        drive = DriveConfig(
            channel=channel,
            coefficients=_resolve(dr.get("coefficients"), base_dir),
            e_amplitude=parse_quantity(dr.get("e_amplitude", "5e4 V/m"), "efield"),
            b2_amplitude=parse_quantity(dr.get("b2_amplitude", "20 uT"), "field"),
            b2_direction=_vec(dr.get("b2_direction", [1, 0, 0]), "drive.b2_direction"),
            leak_fraction=float(dr.get("leak_fraction", 0.02)),
        )
        if drive.e_amplitude < 0 or drive.b2_amplitude < 0 or not 0 <= drive.leak_fraction < 1:
            raise ConfigError("drive amplitudes must be >= 0 and leak_fraction in [0, 1)")
        rs = raw.get("resonator", {}) or {}
        _known(rs, [f for f in ResonatorConfig.__dataclass_fields__], "resonator")
        res = ResonatorConfig(
            network=_resolve(rs.get("network"), base_dir),
            f_start=parse_quantity(rs.get("f_start", "1 GHz"), "frequency"),
            f_stop=parse_quantity(rs.get("f_stop", "12 GHz"), "frequency"),
            points=_int(rs.get("points", 4001), "resonator.points", 2),
            threshold_db=float(rs.get("threshold_db", -20)),
        )
        if not 0 < res.f_start < res.f_stop:
            raise ConfigError("resonator frequency grid must be positive and ascending")
        gr = raw.get("grids", {}) or {}
        _known(gr, [f for f in GridConfig.__dataclass_fields__], "grids")
        amp_dim = "efield" if channel == "electric" else "field"
        amps = tuple(parse_quantity(a, amp_dim) for a in gr.get("amplitudes", []))
        grids = GridConfig(
            field_start=parse_quantity(gr.get("field_start", "230 mT"), "field"),
            field_stop=parse_quantity(gr.get("field_stop", "270 mT"), "field"),
            field_points=_int(gr.get("field_points", 801), "grids.field_points", 2),
            probe_frequency=parse_quantity(gr.get("probe_frequency", "7 GHz"), "frequency"),
            rf_span=parse_quantity(gr.get("rf_span", "200 kHz"), "frequency"),
            rf_points=_int(gr.get("rf_points", 41), "grids.rf_points", 1),
            harmonic=_int(gr.get("harmonic", 2), "grids.harmonic", 1),
            transition=_int(gr.get("transition", 0), "grids.transition"),
            durations_start=parse_quantity(gr.get("durations_start", "0 us"), "time"),
            durations_stop=parse_quantity(gr.get("durations_stop", "20 us"), "time"),
            durations_points=_int(gr.get("durations_points", 81), "grids.durations_points", 1),
            amplitudes=amps or dflt.grids.amplitudes,
        )
        if grids.harmonic not in (1, 2):
            raise ConfigError("grids.harmonic must be 1 or 2")
        if not 0 < grids.field_start < grids.field_stop:
            raise ConfigError("field grid must be positive and ascending")
        if not 0 <= grids.durations_start < grids.durations_stop:
            raise ConfigError("duration grid must be non-negative and ascending")
        if any(a < 0 for a in grids.amplitudes) or list(grids.amplitudes) != sorted(grids.amplitudes):
            raise ConfigError("amplitudes must be non-negative and ascending")
        if not (grids.rf_span > 0 and grids.probe_frequency > 0):
            raise ConfigError("rf_span and probe_frequency must be positive")
        en = raw.get("ensemble", {}) or {}
        _known(en, [f for f in EnsembleConfig.__dataclass_fields__], "ensemble")
        ens = EnsembleConfig(
            enabled=bool(en.get("enabled", False)),
            center_width=parse_quantity(en.get("center_width", "10 um"), "length"),
            gap_width=parse_quantity(en.get("gap_width", "10 um"), "length"),
            standoff=parse_quantity(en.get("standoff", "1 um"), "length"),
            lateral_points=_int(en.get("lateral_points", 128), "ensemble.lateral_points", 1),
            depth_points=_int(en.get("depth_points", 32), "ensemble.depth_points", 1),
            epilayer_thickness=parse_quantity(en.get("epilayer_thickness", "2 um"), "length"),
        )
        if min(ens.center_width, ens.gap_width, ens.epilayer_thickness) <= 0 or ens.standoff < 0:
            raise ConfigError("ensemble geometry must be positive")
        cfg = ExperimentConfig(
            species=str(raw.get("species", "P")),
            b0_magnitude=parse_quantity(sf.get("magnitude", "250 mT"), "field"),
            b0_direction=_vec(sf.get("direction", [1, 1, 0]), "static_field.direction"),
            temperature=parse_quantity(raw.get("temperature", "1.9 K"), "temperature"),
            drive=drive,
            donors=_resolve(raw.get("donors"), base_dir),
            resonator=res,
            grids=grids,
            ensemble=ens,
            probe_line=_int(raw.get("probe_line", 0), "probe_line"),
            seed=_int(raw.get("seed", 0), "seed"),
            output=str(raw.get("output", "results")),
        )
    except UnitError as err:
        raise ConfigError(str(err)) from None
    if not cfg.temperature > 0:
        raise ConfigError("temperature must be positive")
    if cfg.b0_magnitude <= 0:
        raise ConfigError("static field must be positive")
    return cfg


def find_config(name=None) -> Path | None:
    """Locate a config file: explicit path, then the config dir from the
    environment, then ``None`` (shipped defaults)."""
    env = os.environ.get(CONFIG_DIR_ENV)
    if name is not None:
        p = Path(name)
        if p.exists():
            return p
        if env and (Path(env) / name).exists():
            return Path(env) / name
        raise ConfigError(f"config file not found: {name}")
    if env and (Path(env) / DEFAULT_NAME).exists():
        return Path(env) / DEFAULT_NAME
    return None


def load_config(path=None) -> ExperimentConfig:
    """Load and validate a config file (``None``: environment dir or shipped default)."""
    p = find_config(path)
    if p is None:
        text = resources.files("ednmr.data").joinpath(DEFAULT_NAME).read_text()
        base = None
    else:
        text = p.read_text()
        base = p.resolve().parent
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as err:
        raise ConfigError(f"invalid YAML: {err}") from None
    return from_dict(raw, base)


def as_plain(cfg: ExperimentConfig) -> dict:
    """Flat dataclass dict (SI floats), handy for comparisons."""
    return asdict(cfg)
