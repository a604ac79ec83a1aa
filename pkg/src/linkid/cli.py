"""Command-line front end: ``linkid <command> [options]``.

Every command writes its artifacts plus a ``manifest.json`` into ``--out``.
Exit codes: 0 success, 1 configuration error, 2 data or shape error,
3 Monte Carlo cap reached without convergence.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .adaptive_mc import (
    McConfig,
    McError,
    compare_drift_methods,
    contribution_analysis,
    run_adaptive,
    save_result,
    write_histograms,
)
from .identification import (
    ShapeError,
    identify,
    load_parameters,
    read_error_vector_csv,
    save_result as save_identification,
    validate,
    write_error_vector_csv,
    write_residual_csv,
)
from .kinematics import (
    PARAMETER_NAMES,
    REPORT_UNITS,
    KinematicsError,
    MachineTopology,
    assemble_identification_jacobian,
    from_report_units,
    read_jacobian_csv,
    table1_parameters,
    to_report_units,
    write_jacobian_csv,
)
from .measurement_sim import (
    SimulationError,
    SimulationScenario,
    simulate_measurement_run,
    simulate_raw_log,
    write_raw_log_binary,
)
from .sensor_calibration import (
    CalibrationError,
    fit_frame_transform,
    load_transform,
    read_calibration_pairs_csv,
    save_transform,
    synthetic_instrument,
    transform_quality,
    write_calibration_pairs_csv,
)
from .trajectory import (
    DEFAULT_DWELL_INTERVAL_S,
    TrajectoryError,
    TrajectorySpec,
    generate_calibration_grid,
    generate_identification_trajectory,
    generate_validation_trajectory,
    read_grid_csv,
    read_trajectory_csv,
    write_grid_csv,
    write_trajectory_csv,
)
from .uncertainty_sources import (
    MeasurementClock,
    SourceConfigError,
    UncertaintySourceSet,
    save_source_set,
)

log = logging.getLogger("linkid")

CONFIG_ROOT_ENV = "LINKID_CONFIG_ROOT"
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_UNCONVERGED = 0, 1, 2, 3
DESK_POSES = 100


class ConfigError(ValueError):
    pass


CONFIG_ERRORS = (ConfigError, SourceConfigError, McError, TrajectoryError)
DATA_ERRORS = (ShapeError, KinematicsError, CalibrationError, SimulationError, OSError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


# -- configuration ---------------------------------------------------------

def config_root(args) -> Path:
    env = os.environ.get(CONFIG_ROOT_ENV)
    if env:
        return Path(env)
    if args.config:
        return Path(args.config).resolve().parent
    return Path.cwd()


def load_config(args) -> dict:
    if not args.config:
        return {}
    path = Path(args.config)
    if not path.is_absolute() and os.environ.get(CONFIG_ROOT_ENV):
        path = Path(os.environ[CONFIG_ROOT_ENV]) / path
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    known = {"topology", "sources", "trajectory", "true_parameters", "mc", "instrument"}
    for key in doc:
        if key not in known:
            raise ConfigError(f"{path}: unknown field {key!r} (expected one of {sorted(known)})")
    return doc


def _resolve(root: Path, value):
    return value if Path(value).is_absolute() else root / value


def _section(args, cfg, key):
    """A config section given inline or as a path relative to the config root."""
    value = cfg.get(key)
    if isinstance(value, str):
        path = _resolve(config_root(args), value)
        try:
            return json.loads(Path(path).read_text()), Path(path).parent
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"field {key!r}: cannot load {path}: {exc}") from exc
    return value, config_root(args)


def topology_from(args, cfg) -> MachineTopology:
    doc, _ = _section(args, cfg, "topology")
    if doc is None:
        return MachineTopology.default()
    try:
        return MachineTopology.from_dict(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"field 'topology': {exc}") from exc


def sources_from(args, cfg, drift_model=None, names=None) -> UncertaintySourceSet:
    doc, base = _section(args, cfg, "sources")
    sources = UncertaintySourceSet.paper() if doc is None else UncertaintySourceSet.from_dict(doc, base)
    if drift_model:
        sources = sources.with_drift(None if drift_model == "none" else drift_model)
    if names is not None:
        if names in ("none", ""):
            return UncertaintySourceSet.none()
        if names != "all":
            wanted = {n.strip() for n in names.split(",")}
            bad = wanted - {"sensor", "transform", "drift"}
            if bad:
                raise ConfigError(f"--sources: unknown source(s) {sorted(bad)}")
            if "drift" in wanted and sources.drift is None:
                sources = sources.with_drift("cyclic")
            sources = UncertaintySourceSet(**{n: getattr(sources, n) for n in wanted})
    return sources


def truth_from(args, cfg) -> np.ndarray:
    if getattr(args, "truth", None):
        return load_parameters(args.truth)
    value = cfg.get("true_parameters")
    if value is None:
        return table1_parameters()
    try:
        rep = [float(value[n]) for n in PARAMETER_NAMES]
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"field 'true_parameters': missing or bad entry {exc}") from exc
    return from_report_units(rep)


def instrument_from(args, cfg):
    value = cfg.get("instrument")
    if value is None:
        return synthetic_instrument()
    if isinstance(value, str):
        return load_transform(_resolve(config_root(args), value))
    try:
        return synthetic_instrument(**value)
    except TypeError as exc:
        raise ConfigError(f"field 'instrument': {exc}") from exc


def trajectory_spec(args, cfg, kind) -> TrajectorySpec:
    over = dict(cfg.get("trajectory", {}) or {})
    if getattr(args, "n_poses", None):
        over["n_poses"] = args.n_poses
    elif args.profile == "desk" and kind != "calibration-grid":
        over.setdefault("n_poses", DESK_POSES)
    for key in ("a_range", "c_range"):
        if key in over:
            over[key] = tuple(over[key])
    try:
        if kind == "identification":
            return TrajectorySpec.identification(**over)
        if kind == "validation":
            return TrajectorySpec.validation(**over)
        if kind == "calibration-grid":
            return TrajectorySpec.calibration_grid(**over)
    except TypeError as exc:
        raise ConfigError(f"field 'trajectory': {exc}") from exc
    raise ConfigError(f"unknown trajectory kind {kind!r}")


# -- manifest ----------------------------------------------------------------

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(args, out: Path, started: float, extra=None) -> Path:
    artifacts = {
        str(p.relative_to(out)): _sha256(p)
        for p in sorted(out.rglob("*"))
        if p.is_file() and p.name != "manifest.json"
    }
    doc = {
        "command": args.command,
        "argv": list(args.argv),
        "version": __version__,
        "config": str(Path(args.config).resolve()) if args.config else None,
        "config_root": str(config_root(args)),
        "seed": args.seed,
        "profile": args.profile,
        "out": str(out.resolve()),
        "artifacts": artifacts,
        "timing_s": round(time.perf_counter() - started, 3),
    }
    if extra:
        doc.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(doc, indent=2))
    return path


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2))


# -- commands ------------------------------------------------------------------

def cmd_trajectory(args, cfg, out: Path) -> int:
    spec = trajectory_spec(args, cfg, args.kind)
    if args.kind == "calibration-grid":
        grid = generate_calibration_grid(spec)
        write_grid_csv(grid, out / "grid.csv")
        print(f"wrote {len(grid)} grid offsets to {out / 'grid.csv'}")
        return EXIT_OK
    topology = topology_from(args, cfg)
    gen = generate_identification_trajectory if args.kind == "identification" else generate_validation_trajectory
    poses = gen(spec, topology)
    name = f"{args.kind}.csv"
    write_trajectory_csv(poses, out / name, spec.dwell_interval_s)
    print(f"wrote {len(poses)} poses to {out / name}")
    return EXIT_OK


def cmd_calibrate(args, cfg, out: Path) -> int:
    if args.pairs:
        programmed, measured = read_calibration_pairs_csv(args.pairs)
    else:
        programmed = read_grid_csv(args.grid) if args.grid else generate_calibration_grid(
            trajectory_spec(args, cfg, "calibration-grid"))
        instrument = instrument_from(args, cfg)
        inv = np.linalg.inv(instrument.matrix)
        homog = np.column_stack((programmed, np.ones(len(programmed))))
        measured = (homog @ inv.T)[:, :3]
        sources = sources_from(args, cfg)
        if args.noise and sources.sensor is not None:
            rng = np.random.default_rng(args.seed)
            measured = measured + rng.standard_normal(measured.shape) * np.asarray(sources.sensor.sigma_um) * 1e-3
        write_calibration_pairs_csv(programmed, measured, out / "calibration_pairs.csv")
    M = fit_frame_transform(programmed, measured)
    save_transform(M, out / "transform.json")
    q = transform_quality(M)
    print(f"norms {np.round(q.norms, 4)}, projections {np.round(q.projections, 4)}, "
          f"offset {np.round(q.offset_um, 2)} um{', FLAGGED' if q.flagged else ''}")
    return EXIT_OK


def _poses(args, cfg, kind="identification"):
    topology = topology_from(args, cfg)
    if getattr(args, "trajectory", None):
        return topology, read_trajectory_csv(args.trajectory)
    spec = trajectory_spec(args, cfg, kind)
    gen = generate_identification_trajectory if kind == "identification" else generate_validation_trajectory
    return topology, gen(spec, topology)


def cmd_simulate(args, cfg, out: Path) -> int:
    topology, poses = _poses(args, cfg, args.kind)
    truth = truth_from(args, cfg)
    sources = UncertaintySourceSet.none() if args.noiseless else sources_from(args, cfg, args.drift_model)
    fitted = load_transform(args.fitted) if args.fitted else None
    t_i = args.t_i or DEFAULT_DWELL_INTERVAL_S
    scenario = SimulationScenario(
        truth, tuple(poses), topology, instrument_from(args, cfg), fitted, sources,
        seed=args.seed, clock=MeasurementClock(args.t0, t_i, len(poses)), trial=args.trial,
    )
    chi = simulate_measurement_run(scenario)
    write_error_vector_csv(chi, out / "measurements.csv")
    write_trajectory_csv(poses, out / "trajectory.csv", t_i)
    write_jacobian_csv(assemble_identification_jacobian(topology, poses), out / "jacobian.csv")
    _dump({n: float(v) for n, v in zip(PARAMETER_NAMES, to_report_units(truth))}, out / "truth.json")
    save_source_set(sources, out / "sources.json")
    if args.raw_log:
        write_raw_log_binary(simulate_raw_log(scenario), out / "raw_log.bin")
    n_flag = int(chi.flags.sum()) if chi.flags is not None else 0
    print(f"simulated {len(chi)} poses ({n_flag} saturated) into {out / 'measurements.csv'}")
    return EXIT_OK


def _jacobian(args, cfg, kind="identification"):
    if args.jacobian:
        return read_jacobian_csv(args.jacobian)
    topology, poses = _poses(args, cfg, kind)
    return assemble_identification_jacobian(topology, poses)


def cmd_identify(args, cfg, out: Path) -> int:
    J = _jacobian(args, cfg)
    chi = read_error_vector_csv(args.measurements)
    result = identify(J, chi)
    save_identification(result, out / "result.json")
    write_residual_csv(result, out / "residuals.csv")
    extra = {}
    if args.truth:
        dev = np.abs(result.parameters - load_parameters(args.truth))
        extra["truth_max_abs_deviation"] = float(dev.max())
        doc = json.loads((out / "result.json").read_text())
        doc["truth_max_abs_deviation"] = float(dev.max())
        _dump(doc, out / "result.json")
    print(f"identified {len(PARAMETER_NAMES)} parameters from {len(chi)} poses; "
          f"residual RMS {np.round(result.rms_um, 3)} um, condition {result.condition:.1f}")
    return EXIT_OK


def cmd_validate(args, cfg, out: Path) -> int:
    p = load_parameters(args.parameters)
    J = _jacobian(args, cfg, "validation")
    chi = read_error_vector_csv(args.measurements)
    rms = validate(p, J, chi)
    _dump({"rms_x_um": float(rms[0]), "rms_y_um": float(rms[1]), "rms_z_um": float(rms[2]),
           "n_poses": len(chi)}, out / "validation.json")
    print(f"validation RMS {np.round(rms, 3)} um over {len(chi)} poses")
    return EXIT_OK


def mc_config(args, cfg) -> McConfig:
    kw = dict(cfg.get("mc", {}) or {})
    kw["sources"] = sources_from(args, cfg, args.drift_model, args.sources)
    kw["seed"] = args.seed
    kw["true_parameters"] = truth_from(args, cfg)
    kw["topology"] = topology_from(args, cfg)
    kw["instrument"] = instrument_from(args, cfg)
    for key in ("M", "delta", "coverage", "max_sequences", "criterion", "interval", "workers", "n_poses"):
        value = getattr(args, key, None)
        if value is not None:
            kw[key] = value
    try:
        return McConfig.for_profile(args.profile, **kw)
    except TypeError as exc:
        raise ConfigError(f"field 'mc': {exc}") from exc


def _write_mc(result, out: Path, tag: str = "") -> None:
    save_result(result, out / f"mc_result{tag}.json")
    write_histograms(result, out / f"histograms{tag}")
    with open(out / f"trace{tag}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("h", "mean", "u", "low", "high"))
        for rec in result.trace:
            w.writerow([rec["h"]] + [repr(rec["max_ratio"][k]) for k in ("mean", "u", "low", "high")])


def cmd_mc(args, cfg, out: Path) -> int:
    config = mc_config(args, cfg)
    results = []
    if args.contributions:
        table = contribution_analysis(config)
        rows = table.rows()
        with open(out / "contributions.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
        for name, res in table.results.items():
            _write_mc(res, out, f"_{name}")
            results.append(res)
        print(f"{'parameter':<10} {'unit':<5} {'D_EVE':>8} {'D_sens':>8} {'D_trans':>8} {'sqrtSum':>8} {'D_95%':>8}")
        fmt = lambda v: f"{v:8.2f}" if v is not None else f"{'-':>8}"
        for r in rows:
            print(f"{r['parameter']:<10} {r['unit']:<5} {fmt(r['delta_eve'])} {fmt(r['delta_sensors'])} "
                  f"{fmt(r['delta_trans'])} {fmt(r['quadratic_sum'])} {fmt(r['delta_95'])}")
    elif args.compare_drift:
        cmp = compare_drift_methods(config)
        _write_mc(cmp.statistical, out, "_statistical")
        _write_mc(cmp.cyclic, out, "_cyclic")
        _dump(cmp.summary(), out / "drift_comparison.json")
        results = [cmp.statistical, cmp.cyclic]
        wider = int(np.sum(cmp.ratio[:8] > 1))
        print(f"cyclic interval wider than statistical for {wider} of 8 link errors")
    else:
        res = run_adaptive(config)
        _write_mc(res, out)
        results = [res]
        print(f"{'converged' if res.converged else 'NOT converged'} after {res.sequences} sequences "
              f"({res.n_trials} trials, {res.excluded} excluded)")
        for name, unit, size in zip(PARAMETER_NAMES, REPORT_UNITS, res.interval_size):
            print(f"  {name:<10} D95 = {size:9.3f} {unit}")
    if not all(r.converged for r in results):
        log.error("Monte Carlo cap of %d sequences reached without convergence", config.max_sequences)
        return EXIT_UNCONVERGED
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def _global_flags(parser, defaults: bool) -> None:
    # Sub-commands repeat the global flags without defaults so that a value
    # given before the command name is not reset by the sub-parser.
    d = (lambda v: v) if defaults else (lambda v: argparse.SUPPRESS)
    parser.add_argument("--config", default=d(None), help="JSON configuration file")
    parser.add_argument("--seed", type=int, default=d(0), help="root random seed")
    parser.add_argument("--out", default=d("."), help="output directory")
    parser.add_argument("--profile", choices=("paper", "desk"), default=d("paper"))
    parser.add_argument("-v", "--verbose", action="store_true", default=d(False))


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    _global_flags(common, defaults=False)

    p = _Parser(prog="linkid", description=__doc__.splitlines()[0])
    _global_flags(p, defaults=True)
    p.add_argument("--version", action="version", version=f"linkid {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("trajectory", parents=[common], help="generate a pose list or calibration grid")
    t.add_argument("--kind", choices=("identification", "validation", "calibration-grid"), default="identification")
    t.add_argument("--n-poses", type=int)

    c = sub.add_parser("calibrate", parents=[common], help="fit the sensor-to-machine transform")
    c.add_argument("--pairs", help="calibration pair CSV (otherwise simulated on the grid)")
    c.add_argument("--grid", help="grid CSV used for simulated readings")
    c.add_argument("--noise", action="store_true", help="add sensor noise to simulated readings")

    s = sub.add_parser("simulate", parents=[common], help="simulate one measurement run")
    s.add_argument("--kind", choices=("identification", "validation"), default="identification")
    s.add_argument("--trajectory", help="trajectory CSV (default: generated)")
    s.add_argument("--n-poses", type=int)
    s.add_argument("--truth", help="result JSON with the planted parameters (default: built-in set)")
    s.add_argument("--fitted", help="fitted transform JSON")
    s.add_argument("--noiseless", action="store_true")
    s.add_argument("--drift-model", choices=("statistical", "cyclic", "none"))
    s.add_argument("--trial", type=int, default=1)
    s.add_argument("--t0", type=float, default=0.0, help="start time of the first run, s")
    s.add_argument("--t-i", type=float, help="time between poses, s")
    s.add_argument("--raw-log", action="store_true", help="also write a raw 1 kHz sensor log")

    i = sub.add_parser("identify", parents=[common], help="identify errors from measurements")
    i.add_argument("--measurements", required=True, help="error vector CSV")
    i.add_argument("--jacobian", help="jacobian CSV")
    i.add_argument("--trajectory", help="trajectory CSV (used when no jacobian is given)")
    i.add_argument("--n-poses", type=int)
    i.add_argument("--truth", help="parameter JSON to cross-check against")

    v = sub.add_parser("validate", parents=[common], help="predict a validation run")
    v.add_argument("--parameters", required=True, help="identification result JSON")
    v.add_argument("--measurements", required=True)
    v.add_argument("--jacobian")
    v.add_argument("--trajectory")
    v.add_argument("--n-poses", type=int)

    m = sub.add_parser("mc", parents=[common], help="adaptive Monte Carlo uncertainty analysis")
    m.add_argument("--sources", help="comma list of sensor,transform,drift or all/none")
    m.add_argument("--drift-model", choices=("statistical", "cyclic", "none"))
    m.add_argument("--M", type=int)
    m.add_argument("--delta", type=float, help="numerical tolerance in um or um/m")
    m.add_argument("--coverage", type=float)
    m.add_argument("--max-sequences", type=int)
    m.add_argument("--n-poses", type=int)
    m.add_argument("--criterion", choices=("paper", "gum"))
    m.add_argument("--interval", choices=("shortest", "symmetric"))
    m.add_argument("--workers", type=int)
    group = m.add_mutually_exclusive_group()
    group.add_argument("--contributions", action="store_true", help="one run per source plus all")
    group.add_argument("--compare-drift", action="store_true", help="paired statistical/cyclic runs")
    return p


COMMANDS = {
    "trajectory": cmd_trajectory,
    "calibrate": cmd_calibrate,
    "simulate": cmd_simulate,
    "identify": cmd_identify,
    "validate": cmd_validate,
    "mc": cmd_mc,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.perf_counter()
    out = Path(args.out)
    try:
        cfg = load_config(args)
        out.mkdir(parents=True, exist_ok=True)
        code = COMMANDS[args.command](args, cfg, out)
    except CONFIG_ERRORS as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    write_manifest(args, out, started, {"exit_code": code})
    return code


if __name__ == "__main__":
    sys.exit(main())
