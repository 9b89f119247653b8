"""Command-line experiment runner.

Each subcommand reads an experiment config, runs one simulation and writes
CSV files plus ``manifest.yaml`` (the resolved config and command) into the
output directory. Exit codes: 0 success, 1 configuration error, 2 numerical
failure.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from ._kernels import BACKEND
from .config import ConfigError, ExperimentConfig, load_config
from .dynamics import DaviesSetup, DriveSpec, RabiMap, endor_survey, rabi_map
from .ensemble import (
    DEFAULT_PROFILES,
    CpwGeometry,
    build_ensemble,
    default_depth_grid,
    default_lateral_grid,
    ensemble_rabi_trace,
)
from .errors import NoResonanceError, NumericalError, StepTooCoarseError
from .pbgnet import NoBandgapError, TransmissionNetwork, bandgap_edges, locate_resonance, sweep_s21
from .results import SpectrumResult, write_metadata_csv
from .spincore import (
    StaticField,
    align_to_field,
    build_hamiltonian,
    eigensystem,
    esr_field_positions,
    load_donors,
    transition_table,
)
from .starkdrive import load_drive_models
from .units import UnitError, parse_quantity

log = logging.getLogger("ednmr")

NUMERICAL_ERRORS = (NumericalError, StepTooCoarseError, NoResonanceError, NoBandgapError,
                    np.linalg.LinAlgError)

# Field-swept ESR lines are drawn as Gaussians of this FWHM (T).
FIELD_SWEEP_FWHM = 0.2e-3


def _species(cfg: ExperimentConfig):
    donors = load_donors(cfg.donors)
    if cfg.species not in donors:
        raise ConfigError(f"species {cfg.species!r} not in donor table ({sorted(donors)})")
    return donors[cfg.species]


def _field(cfg: ExperimentConfig) -> StaticField:
    return StaticField.along(cfg.b0_magnitude, cfg.b0_direction)


def _drive_spec(cfg: ExperimentConfig, channel=None) -> DriveSpec:
    channel = channel or cfg.drive.channel
    models, _ = load_drive_models(cfg.drive.coefficients)
    model = models.get(cfg.species)
    if channel == "electric" and model is None:
        raise ConfigError(f"no drive coefficients for {cfg.species!r}")
    return DriveSpec(channel, model, cfg.drive.b2_direction)


def _amplitude(cfg: ExperimentConfig, channel) -> float:
    return cfg.drive.e_amplitude if channel == "electric" else cfg.drive.b2_amplitude


def _levels_table(cfg: ExperimentConfig, out: Path):
    sys_ = _species(cfg)
    s, f, _ = align_to_field(sys_, _field(cfg))
    levels = eigensystem(build_hamiltonian(s, f))
    rows = [[k, e, *lab] for k, (e, lab) in enumerate(zip(levels.energies, levels.labels))]
    meta = {"species": cfg.species, "b0_T": cfg.b0_magnitude, "direction": list(cfg.b0_direction)}
    write_metadata_csv(out / "levels.csv", meta, ["index", "energy_mhz", "ms", "mi"], rows)
    ix = transition_table(levels, "Ix")
    sx = transition_table(levels, "Sx")
    kinds = {"ESR": 0, "NMR-SQT": 1, "NMR-DQT": 2, "other": 3}
    lines = [f"# {k}: {v}" for k, v in meta.items()]
    lines.append("# kind codes: " + ", ".join(f"{v}={k}" for k, v in kinds.items()))
    lines.append("i,j,kind,frequency_mhz,weight_ix,weight_sx,delta_ms,delta_mi")
    for a, b in zip(ix, sx):
        lines.append(f"{a.level_pair[0]},{a.level_pair[1]},{a.kind},{a.frequency!r},"
                     f"{a.operator_weight!r},{b.operator_weight!r},{a.delta_ms},{a.delta_mi}")
    (out / "transitions.csv").write_text("\n".join(lines) + "\n")
    n_sqt = sum(t.kind == "NMR-SQT" for t in ix)
    n_dqt = sum(t.kind == "NMR-DQT" for t in ix)
    return [out / "levels.csv", out / "transitions.csv"], f"{n_sqt} SQT, {n_dqt} DQT"


def cmd_levels(cfg, out, args):
    return _levels_table(cfg, out)


def cmd_field_sweep(cfg, out, args):
    donors = load_donors(cfg.donors)
    names = [cfg.species] if args.species_list is None else args.species_list
    g = cfg.grids
    grid = g.field_grid()
    sigma = FIELD_SWEEP_FWHM / (2 * math.sqrt(2 * math.log(2)))
    total = np.zeros_like(grid)
    rows = []
    for name in names:
        if name not in donors:
            raise ConfigError(f"species {name!r} not in donor table")
        sys_ = donors[name]
        lines = esr_field_positions(sys_, g.probe_frequency * 1e-9, (g.field_start, g.field_stop),
                                    cfg.b0_direction)
        for b, tr in lines:
            w = tr.operator_weight / sys_.nuclear_dim
            total += w * np.exp(-0.5 * ((grid - b) / sigma) ** 2)
            rows.append([b, tr.operator_weight, sys_.nuclear_dim])
    meta = {"species": ",".join(names), "probe_frequency_hz": g.probe_frequency,
            "line_fwhm_T": FIELD_SWEEP_FWHM}
    SpectrumResult(grid, total, meta, "field_T").to_csv(out / "field_sweep.csv")
    write_metadata_csv(out / "esr_lines.csv", meta, ["field_T", "weight_sx", "nuclear_dim"], rows)
    return [out / "field_sweep.csv", out / "esr_lines.csv"], f"{len(rows)} ESR lines"


def cmd_endor(cfg, out, args):
    """Davies ENDOR windows around every predicted SQT/DQT feature at f and f/2.

    Every ESR line is probed; the signal column is the largest contrast over
    lines and each line's contrast is kept as its own column.
    """
    channel = args.channel or cfg.drive.channel
    amp = _amplitude(cfg, channel)
    g = cfg.grids
    windows = endor_survey(_species(cfg), _field(cfg), _drive_spec(cfg, channel), amp,
                           g.rf_span, g.rf_points, cfg.temperature, threads=args.threads)
    axis = np.concatenate([w.grid for w in windows])
    order = np.argsort(axis, kind="stable")
    lines = np.concatenate([w.per_line for w in windows], axis=1)[:, order]
    meta = {"species": cfg.species, "b0_T": cfg.b0_magnitude, "channel": channel,
            "rf_amplitude": amp, "probed_lines": len(lines),
            "grid": f"{len(windows)} windows of {g.rf_points} points, half-width {g.rf_span!r} Hz"}
    extra = {"rf_duration_s": np.concatenate([np.full(len(w.grid), w.rf_duration)
                                              for w in windows])[order],
             "harmonic": np.concatenate([np.full(len(w.grid), float(w.harmonic))
                                         for w in windows])[order]}
    extra.update({f"line{k}": row for k, row in enumerate(lines)})
    res = SpectrumResult(axis[order], lines.max(axis=0), meta, "rf_hz", extra)
    res.to_csv(out / "endor.csv")
    return [out / "endor.csv"], f"{len(windows)} windows, peak contrast {res.signal.max():.3g}"


def cmd_rabi_map(cfg, out, args):
    channel = args.channel or cfg.drive.channel
    sys_ = _species(cfg)
    field = _field(cfg)
    spec = _drive_spec(cfg, channel)
    setup = DaviesSetup.prepare(sys_, field, cfg.probe_line, cfg.temperature)
    visible = sorted((t for t in setup.nmr_transitions("NMR-SQT")
                      if set(t.level_pair) & set(setup.pair)), key=lambda t: t.frequency)
    g = cfg.grids
    if g.transition >= len(visible):
        raise ConfigError(f"grids.transition {g.transition} out of range ({len(visible)} visible SQTs)")
    target = visible[g.transition]
    carrier = abs(target.frequency) * 1e6 / g.harmonic
    durations = g.durations()
    if cfg.ensemble.enabled:
        e = cfg.ensemble
        geom = CpwGeometry(e.center_width, e.gap_width, e.standoff)
        profile = replace(DEFAULT_PROFILES.get(cfg.species, DEFAULT_PROFILES["P"]),
                          epilayer_thickness=e.epilayer_thickness)
        lateral = default_lateral_grid(geom, e.lateral_points)
        ens = build_ensemble(geom, profile, lateral,
                             default_depth_grid(e.epilayer_thickness, e.depth_points))
        traces = [ensemble_rabi_trace(sys_, field, spec, carrier, durations, a, ens, geom,
                                      cfg.probe_line, cfg.temperature, cfg.drive.leak_fraction,
                                      args.threads) for a in g.amplitudes]
        result = RabiMap(durations, np.array(g.amplitudes),
                         np.stack([t.signal for t in traces], axis=1),
                         np.stack([t.raw for t in traces], axis=1))
    else:
        result = rabi_map(sys_, field, spec, carrier, durations, g.amplitudes, cfg.probe_line,
                          cfg.temperature, threads=args.threads, setup=setup)
    result.metadata = {"species": cfg.species, "b0_T": cfg.b0_magnitude, "channel": channel,
                       "carrier_hz": carrier, "harmonic": g.harmonic,
                       "transition_mhz": target.frequency, "ensemble": cfg.ensemble.enabled}
    result.to_csv(out / "rabi_map.csv")
    return [out / "rabi_map.csv"], f"carrier {carrier / 1e6:.4f} MHz"


def cmd_pbg(cfg, out, args):
    net = TransmissionNetwork.from_file(cfg.resonator.network)
    r = cfg.resonator
    spec = sweep_s21(net, np.linspace(r.f_start, r.f_stop, r.points))
    spec.to_csv(out / "pbg_s21.csv")
    lo, hi = bandgap_edges(spec, r.threshold_db)
    fit = locate_resonance(net, (lo, hi))
    rows = [["f_low_hz", lo], ["f_high_hz", hi], ["f0_hz", fit.f0], ["loaded_q", fit.loaded_q],
            ["q_3db", fit.q_3db], ["insertion_loss_db", fit.insertion_loss_db]]
    lines = [f"# threshold_db: {r.threshold_db!r}", "quantity,value"]
    lines += [f"{k},{v!r}" for k, v in rows]
    (out / "pbg_summary.csv").write_text("\n".join(lines) + "\n")
    return [out / "pbg_s21.csv", out / "pbg_summary.csv"], \
        f"gap {lo / 1e9:.3f}-{hi / 1e9:.3f} GHz, f0 {fit.f0 / 1e9:.4f} GHz"


def cmd_validate(cfg, out, args):
    from .validation import run_checks

    results = run_checks()
    lines = ["check,passed,detail"]
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        lines.append(f"{name},{int(ok)},{detail}")
    (out / "validate.csv").write_text("\n".join(lines) + "\n")
    failed = [n for n, ok, _ in results if not ok]
    if failed:
        raise NumericalError(f"invariant checks failed: {', '.join(failed)}")
    return [out / "validate.csv"], f"{len(results)} checks passed"


COMMANDS = {
    "levels": cmd_levels,
    "field-sweep": cmd_field_sweep,
    "endor": cmd_endor,
    "rabi-map": cmd_rabi_map,
    "pbg": cmd_pbg,
    "validate": cmd_validate,
}


def _gnuplot(path: Path) -> str:
    return (f"set datafile separator ','\nset key autotitle columnhead\n"
            f"plot '{path.name}' using 1:2 with lines\n")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ednmr", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="experiment YAML (default: $EDNMR_CONFIG_DIR or shipped)")
        sp.add_argument("--out", help="output directory (default: config 'output')")
        sp.add_argument("--species", help="donor species; field-sweep accepts a comma list")
        sp.add_argument("--b0", help="static field magnitude, e.g. 0.25 or '250 mT'")
        sp.add_argument("--channel", choices=("electric", "magnetic"))
        sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("--format", choices=("csv",), default="csv")
        sp.add_argument("--gnuplot", action="store_true", help="also write a gnuplot script per CSV")
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    args.species_list = None
    if args.species:
        names = [s.strip() for s in args.species.split(",") if s.strip()]
        if args.command == "field-sweep":
            args.species_list = names
        elif len(names) != 1:
            raise ConfigError("--species takes one species for this command")
        cfg = cfg.replace(species=names[0])
    if args.b0:
        try:
            cfg = cfg.replace(b0_magnitude=parse_quantity(args.b0, "field", default_unit="T"))
        except UnitError as err:
            raise ConfigError(str(err)) from None
        if not cfg.b0_magnitude > 0:
            raise ConfigError("--b0 must be positive")
    if args.channel:
        cfg = cfg.replace(drive=replace(cfg.drive, channel=args.channel))
    if args.out:
        cfg = cfg.replace(output=args.out)
    if args.threads < 1:
        raise ConfigError("--threads must be >= 1")
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        out = Path(cfg.output)
        out.mkdir(parents=True, exist_ok=True)
        files, summary = COMMANDS[args.command](cfg, out, args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    except NUMERICAL_ERRORS as err:
        print(f"numerical failure in {type(err).__module__}: {type(err).__name__}: {err}",
              file=sys.stderr)
        return 2
    if args.gnuplot:
        for f in files:
            f.with_suffix(".gp").write_text(_gnuplot(f))
    manifest = {"command": args.command, "version": __version__, "backend": BACKEND,
                "outputs": [f.name for f in files], "config": cfg.to_dict()}
    (out / "manifest.yaml").write_text(yaml.safe_dump(manifest, sort_keys=False))
    print(f"{args.command}: {summary} -> {out}")
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
