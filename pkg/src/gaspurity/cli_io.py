"""Configuration files, CSV and plot output, run manifests and the command line.

The configuration is one JSON document. Every physical quantity carries its
unit in the key name, and unknown keys are rejected. Omitted keys take the
defaults, which reproduce the two-disturbance scenario at nominal load.
"""

from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import hashlib
import json
import math
import os
import sys
import tempfile
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .control import FeedbackSource
from .estimator import EstimatorDivergence, NoiseConfig, replay
from .numerics import IntegratorConfig, StiffnessError
from .plant_model import PlantDomainError, PlantParams, SteadyStateError
from .scenario import (CalibrationError, Channel, CommissioningConfig, DisturbanceEvent, Mode,
                       OperatingPoint, Records, RunResult, ScenarioConfig,
                       calibrate_disturbances, commission, paper_configs,
                       paper_disturbance_sequence, run, table1_report)

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key path."""


# ---------------------------------------------------------------------------
# configuration schema: section -> key -> (target attribute, kind)

_PLANT_KEYS = {
    "membrane_area_m2": ("A_c", float),
    "membrane_thickness_m": ("d_m", float),
    "temperature_K": ("T", float),
    "n_segments": ("n", int),
    "pipe_length_m": ("l_p", float),
    "pipe_radius_m": ("r", float),
    "gas_viscosity_Pa_s": ("eta", float),
    "separator_volume_m3": ("V_t", float),
    "separator_area_m2": ("A", float),
    "lye_density_kg_per_m3": ("rho", float),
}
_OPERATING_KEYS = {
    "current_density_A_per_m2": ("I", float),
    "pressure_difference_bar": ("dp", float),
    "lye_inflow_kg_per_s": ("m_in", float),
    "pressure_setpoint_bar": ("p_sp", float),
    "level_setpoint_m": ("level_sp", float),
}
_INTEGRATOR_KEYS = {
    "max_step_s": ("max_step", float),
    "rel_tol": ("rel_tol", float),
    "abs_tol": ("abs_tol", float),
    "method": ("method", str),
}
_CONTROL_KEYS = {
    "hto_setpoint": ("hto_sp", float),
    "p_sp_min_bar": ("p_sp_min", float),
    "p_sp_max_bar": ("p_sp_max", float),
    "valve_time_constant_s": ("valve_tau", float),
    "pc_setpoint_weight": ("pc_sp_weight", float),
    "lc_closed_loop_time_constant_s": ("lc_tau_c", float),
    "outer_inner_time_constant_ratio": ("cc_ratio", float),
}
_SCENARIO_KEYS = {"duration_s", "mode", "feedback_source", "open_loop_p_sp_bar",
                  "meas_noise_std", "seed", "sample_period_s", "events"}
_NOISE_KEYS = ("p_bar", "l_m", "x_h2", "x_o2")
_ESTIMATOR_KEYS = {"Q_diag", "R_diag"}
_EVENT_VALUE_KEYS = {"current_density_A_per_m2": Channel.CURRENT_DENSITY,
                     "pressure_difference_bar": Channel.PRESSURE_DIFFERENCE}
_TOP_KEYS = {"schema_version", "scenario", "plant", "operating_point", "estimator",
             "integrator", "control"}


@dataclass
class RunSpec:
    """Everything a run needs, as parsed from a configuration document."""

    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    plant: PlantParams = field(default_factory=PlantParams)
    commissioning: CommissioningConfig = field(default_factory=CommissioningConfig)
    paper_events: bool = True  # events come from the calibrated two-disturbance sequence

    def resolved_scenario(self) -> ScenarioConfig:
        if not self.paper_events:
            return self.scenario
        op = self.scenario.operating_point
        events = paper_disturbance_sequence(calibrate_disturbances(self.plant, op))
        return replace(self.scenario, events=events)


def _section(doc, name, allowed):
    sec = doc.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"{name}: expected an object")
    unknown = set(sec) - set(allowed)
    if unknown:
        raise ConfigError(f"{name}.{sorted(unknown)[0]}: unknown key")
    return sec


def _number(path, value, kind=float):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{path}: expected a number, got {value!r}")
    if kind is int:
        if int(value) != value:
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return int(value)
    if not math.isfinite(value):
        raise ConfigError(f"{path}: must be finite")
    return float(value)


def _mapped(doc, name, table, base):
    sec = _section(doc, name, table)
    kw = {}
    for key, val in sec.items():
        attr, kind = table[key]
        if kind is str:
            if not isinstance(val, str):
                raise ConfigError(f"{name}.{key}: expected a string")
            kw[attr] = val
        else:
            kw[attr] = _number(f"{name}.{key}", val, kind)
    try:
        return replace(base, **kw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{name}: {_name_field(exc, table, name)}") from None


def _name_field(exc, table, section):
    """Translate an attribute name in a validation message back to its key."""
    msg = str(exc)
    for key, (attr, _) in table.items():
        if msg.startswith(attr + " ") or f" {attr} " in f" {msg} ":
            return f"{key}: {msg}"
    return msg


def parse_config(text: str) -> RunSpec:
    """Parse and validate a JSON configuration document."""
    try:
        doc = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}")
    if not isinstance(doc, dict):
        raise ConfigError("top level: expected an object")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]}: unknown key")
    version = doc.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version: unsupported version {version!r}")

    plant = _mapped(doc, "plant", _PLANT_KEYS, PlantParams())
    op = _mapped(doc, "operating_point", _OPERATING_KEYS, OperatingPoint())
    integ = _mapped(doc, "integrator", _INTEGRATOR_KEYS, IntegratorConfig())
    comm = _mapped(doc, "control", _CONTROL_KEYS, CommissioningConfig())

    est = _section(doc, "estimator", _ESTIMATOR_KEYS)
    q = _diag(est, "Q_diag", 6, ScenarioConfig.Q)
    r = _diag(est, "R_diag", 4, ScenarioConfig.R)

    sc = _section(doc, "scenario", _SCENARIO_KEYS)
    kw = {"operating_point": op, "integrator": integ, "Q": q, "R": r}
    if "duration_s" in sc:
        kw["duration"] = _number("scenario.duration_s", sc["duration_s"])
    if "sample_period_s" in sc:
        kw["sample_period"] = _number("scenario.sample_period_s", sc["sample_period_s"])
    if "open_loop_p_sp_bar" in sc:
        kw["open_loop_p_sp"] = _number("scenario.open_loop_p_sp_bar", sc["open_loop_p_sp_bar"])
    if "seed" in sc:
        kw["seed"] = _number("scenario.seed", sc["seed"], int)
    for key, enum in (("mode", Mode), ("feedback_source", FeedbackSource)):
        if key in sc:
            try:
                kw[key] = enum(sc[key])
            except ValueError:
                choices = ", ".join(m.value for m in enum)
                raise ConfigError(f"scenario.{key}: expected one of {choices}") from None
    if "meas_noise_std" in sc:
        ns = sc["meas_noise_std"]
        if not isinstance(ns, dict) or set(ns) != set(_NOISE_KEYS):
            raise ConfigError(f"scenario.meas_noise_std: expected keys {', '.join(_NOISE_KEYS)}")
        kw["meas_noise_std"] = tuple(_number(f"scenario.meas_noise_std.{k}", ns[k])
                                     for k in _NOISE_KEYS)
    paper_events = True
    if "events" in sc and sc["events"] != "paper":
        paper_events = False
        kw["events"] = _parse_events(sc["events"])
    try:
        scenario = ScenarioConfig(**kw)
    except ValueError as exc:
        raise ConfigError(f"scenario: {exc}") from None
    return RunSpec(scenario, plant, comm, paper_events)


def _diag(sec, key, n, default):
    if key not in sec:
        return tuple(default)
    v = sec[key]
    if not isinstance(v, list) or len(v) != n:
        raise ConfigError(f"estimator.{key}: expected a list of {n} numbers")
    vals = tuple(_number(f"estimator.{key}[{i}]", x) for i, x in enumerate(v))
    if min(vals) < 0:
        raise ConfigError(f"estimator.{key}: entries must be >= 0")
    return vals


def _parse_events(items):
    if not isinstance(items, list):
        raise ConfigError('scenario.events: expected "paper" or a list of events')
    out = []
    for i, ev in enumerate(items):
        path = f"scenario.events[{i}]"
        if not isinstance(ev, dict):
            raise ConfigError(f"{path}: expected an object")
        allowed = {"t_start_s", "t_end_s"} | set(_EVENT_VALUE_KEYS)
        unknown = set(ev) - allowed
        if unknown:
            raise ConfigError(f"{path}.{sorted(unknown)[0]}: unknown key")
        values = [k for k in _EVENT_VALUE_KEYS if k in ev]
        if len(values) != 1:
            raise ConfigError(f"{path}: give exactly one of {', '.join(_EVENT_VALUE_KEYS)}")
        for k in ("t_start_s", "t_end_s"):
            if k not in ev:
                raise ConfigError(f"{path}.{k}: missing")
        try:
            out.append(DisturbanceEvent(_number(f"{path}.t_start_s", ev["t_start_s"]),
                                        _number(f"{path}.t_end_s", ev["t_end_s"]),
                                        _EVENT_VALUE_KEYS[values[0]],
                                        _number(f"{path}.{values[0]}", ev[values[0]])))
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return tuple(out)


def _unmapped(obj, table):
    return {key: getattr(obj, attr) for key, (attr, _) in table.items()}


def serialize_config(spec: RunSpec) -> str:
    """Canonical JSON for ``spec``; ``parse_config`` inverts it."""
    sc = spec.scenario
    scen = {
        "duration_s": sc.duration,
        "mode": sc.mode.value,
        "feedback_source": sc.feedback_source.value,
        "open_loop_p_sp_bar": sc.open_loop_p_sp,
        "meas_noise_std": dict(zip(_NOISE_KEYS, sc.meas_noise_std)),
        "seed": sc.seed,
        "sample_period_s": sc.sample_period,
    }
    if spec.paper_events:
        scen["events"] = "paper"
    else:
        scen["events"] = [
            {"t_start_s": ev.t_start, "t_end_s": ev.t_end,
             ("current_density_A_per_m2" if ev.channel is Channel.CURRENT_DENSITY
              else "pressure_difference_bar"): ev.value}
            for ev in sc.events]
    doc = {
        "schema_version": SCHEMA_VERSION,
        "scenario": scen,
        "plant": _unmapped(spec.plant, _PLANT_KEYS),
        "operating_point": _unmapped(sc.operating_point, _OPERATING_KEYS),
        "estimator": {"Q_diag": list(sc.Q), "R_diag": list(sc.R)},
        "integrator": _unmapped(sc.integrator, _INTEGRATOR_KEYS),
        "control": _unmapped(spec.commissioning, _CONTROL_KEYS),
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# CSV


def csv_columns(n_comp: int) -> list[str]:
    cols = ["t_s"]
    cols += [f"hto_c{i}" for i in range(n_comp)]
    cols += ["hto_meas", "hto_est"]
    cols += [f"p_c{i}_bar" for i in range(n_comp)]
    cols += ["level_m", "p_sp_bar", "n_out_gas_mol_per_s", "m_lye_kg_per_s",
             "current_density_A_per_m2", "dp_bar",
             "y_p_bar", "y_l_m", "y_xh2", "y_xo2"]
    cols += [f"alarm_c{i}" for i in range(n_comp)]
    return cols


def _record_matrix(rec: Records) -> np.ndarray:
    return np.column_stack([rec.t, rec.hto, rec.hto_meas, rec.hto_est, rec.p, rec.l,
                            rec.p_sp, rec.n_out, rec.m_lye, rec.I, rec.dp, rec.y,
                            rec.alarm.astype(float)])


def _atomic_write(path: Path, write) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            write(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(rec: Records, path) -> None:
    """One row per tick, nine significant digits, LF line endings."""
    if len(rec) == 0:
        raise ValueError("no records to write")
    cols = csv_columns(rec.hto.shape[1])
    data = _record_matrix(rec)
    n_alarm = rec.hto.shape[1]

    def write(fh):
        fh.write(",".join(cols) + "\n")
        for row in data:
            vals = [f"{v:.9g}" for v in row[:-n_alarm]]
            vals += [str(int(v)) for v in row[-n_alarm:]]
            fh.write(",".join(vals) + "\n")

    try:
        _atomic_write(path, write)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def read_csv(path) -> dict[str, np.ndarray]:
    """Columns of a CSV written by :func:`write_csv`, keyed by header name."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror or exc}") from exc
    if not rows or rows[0][0] != "t_s":
        raise ValueError(f"{path}: not a run CSV (first header cell must be t_s)")
    header, body = rows[0], rows[1:]
    data = np.array(body, dtype=float).reshape(len(body), len(header))
    return {name: data[:, i] for i, name in enumerate(header)}


def write_estimates_csv(t, hto_est, path) -> None:
    def write(fh):
        fh.write("t_s,hto_est\n")
        for a, b in zip(t, hto_est):
            fh.write(f"{a:.9g},{b:.9g}\n")
    _atomic_write(path, write)


# ---------------------------------------------------------------------------
# plots


def emit_plots(rec: Records, path, title: str | None = None,
               alarm_limit: float = 0.02) -> None:
    """Two-panel SVG: purities with the alarm limit, then pressure and its setpoint."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if len(rec) == 0:
        raise ValueError("no records to plot")
    t_min = rec.t / 60.0
    fig, (ax1, ax2) = plt.subplots(2, 1, sharex=True, figsize=(7, 5.5))
    ax1.plot(t_min, 100 * rec.hto_meas, color="0.75", lw=0.6, label="HTO separator, measured")
    ax1.plot(t_min, 100 * rec.hto[:, -2], lw=1.2, label="HTO pipe")
    ax1.plot(t_min, 100 * rec.hto[:, -1], lw=1.2, label="HTO separator")
    ax1.plot(t_min, 100 * rec.hto_est, lw=0.9, ls="--", label="HTO pipe, estimated")
    al = ax1.axhline(100 * alarm_limit, color="k", ls=":", lw=1.0, label="AL")
    al.set_gid("alarm-limit")
    ax1.set_ylabel("HTO [%]")
    ax1.legend(fontsize=7, loc="upper right")
    ax2.plot(t_min, rec.p[:, -1], lw=1.2, label="p")
    ax2.plot(t_min, rec.p_sp, lw=0.9, ls="--", label="p_SP")
    ax2.set_ylabel("pressure [bar]")
    ax2.set_xlabel("time [min]")
    ax2.legend(fontsize=7, loc="lower right")
    if title:
        ax1.set_title(title)
    fig.tight_layout()

    def write(fh):
        # fixed id salt and no date keep the SVG byte-identical across runs
        with matplotlib.rc_context({"svg.hashsalt": "gaspurity"}):
            fig.savefig(fh, format="svg", metadata={"Date": None})

    try:
        _atomic_write(path, write)
    finally:
        plt.close(fig)


# ---------------------------------------------------------------------------
# manifest


@dataclass
class RunManifest:
    config_digest: str
    seed: int
    parameters: dict
    version: str
    wall_time_s: float

    @classmethod
    def for_run(cls, spec: RunSpec, result: RunResult) -> "RunManifest":
        text = serialize_config(spec)
        snapshot = json.loads(text)
        snapshot["resolved_events"] = [dataclasses.asdict(ev) | {"channel": ev.channel.value}
                                       for ev in result.config.events]
        return cls(config_digest(spec), result.config.seed, snapshot, __version__,
                   round(result.wall_time, 3))

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"


def config_digest(spec: RunSpec) -> str:
    return hashlib.sha256(serialize_config(spec).encode()).hexdigest()


# ---------------------------------------------------------------------------
# command line


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="gaspurity", description="Anodic gas purity control experiments")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file (defaults if omitted)")
    common.add_argument("--seed", type=int, help="override scenario.seed")
    common.add_argument("--out", help="output directory")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("simulate", parents=[common], help="run one scenario")
    rp = sub.add_parser("replay", parents=[common], help="re-run the estimator over a CSV")
    rp.add_argument("csv", help="CSV written by simulate")
    sub.add_parser("tune", parents=[common], help="identify the loops and print SIMC settings")
    sub.add_parser("table1", parents=[common], help="open loop vs. both closed-loop variants")
    return ap


def _load_spec(args) -> RunSpec:
    text = ""
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read {args.config}: {exc.strerror or exc}")
    spec = parse_config(text)
    if args.seed is not None:
        spec.scenario = replace(spec.scenario, seed=args.seed)
    return spec


def _out_dir(args) -> Path | None:
    return Path(args.out) if args.out else None


def _cmd_simulate(args) -> None:
    spec = _load_spec(args)
    cfg = spec.resolved_scenario()
    _, settings = commission(spec.plant, cfg.operating_point, cfg.integrator, spec.commissioning)
    result = run(cfg, spec.plant, settings)
    for i, v in enumerate(result.t_oob_per_event):
        print(f"event {i + 1}: t_OOB = {v:.2f} min")
    print(f"runtime {result.wall_time:.2f} s")
    out = _out_dir(args)
    if out is not None:
        _write_run(out, "run", spec, result)


def _write_run(out: Path, stem: str, spec: RunSpec, result: RunResult) -> None:
    write_csv(result.records, out / f"{stem}.csv")
    emit_plots(result.records, out / f"{stem}.svg", title=stem)
    manifest = RunManifest.for_run(spec, result)
    _atomic_write(out / f"{stem}.manifest.json", lambda fh: fh.write(manifest.to_json()))


def _cmd_replay(args) -> None:
    spec = _load_spec(args)
    cols = read_csv(args.csv)
    y = np.column_stack([cols["y_p_bar"], cols["y_l_m"], cols["y_xh2"], cols["y_xo2"]])
    u = np.column_stack([cols["n_out_gas_mol_per_s"], cols["m_lye_kg_per_s"]])
    sc = spec.scenario
    op = sc.operating_point
    noise = NoiseConfig(np.diag(sc.Q), np.diag(sc.R))
    x = replay(y, u, spec.plant, op.inputs(), noise, sc.sample_period, op.p_sp, op.level_sp)
    hto = x[:, 4] / x[:, 5]
    if "hto_est" in cols:
        dev = float(np.max(np.abs(hto - cols["hto_est"])))
        print(f"max |replayed - recorded| estimated HTO = {dev:.3g}")
    out = _out_dir(args)
    if out is not None:
        write_estimates_csv(cols["t_s"], hto, out / "replay.csv")


def _cmd_tune(args) -> None:
    spec = _load_spec(args)
    sc = spec.scenario
    report, _ = commission(spec.plant, sc.operating_point, sc.integrator, spec.commissioning)
    text = report.text()
    sys.stdout.write(text)
    out = _out_dir(args)
    if out is not None:
        _atomic_write(out / "tuning.txt", lambda fh: fh.write(text))


def _cmd_table1(args) -> None:
    spec = _load_spec(args)
    sc = spec.scenario
    op = sc.operating_point
    _, settings = commission(spec.plant, op, sc.integrator, spec.commissioning)
    base = spec.resolved_scenario()
    results = {}
    for name, cfg in paper_configs(spec.plant, op, seed=sc.seed).items():
        cfg = replace(base, mode=cfg.mode, feedback_source=cfg.feedback_source)
        results[name] = run(cfg, spec.plant, settings)
    text = table1_report(results)
    sys.stdout.write(text)
    out = _out_dir(args)
    if out is not None:
        _atomic_write(out / "table1.txt", lambda fh: fh.write(text))
        for name, res in results.items():
            stem = name.replace(" ", "_")
            mode_spec = copy.copy(spec)
            mode_spec.scenario = replace(spec.scenario, mode=res.config.mode,
                                         feedback_source=res.config.feedback_source)
            _write_run(out, stem, mode_spec, res)


_COMMANDS = {"simulate": _cmd_simulate, "replay": _cmd_replay, "tune": _cmd_tune,
             "table1": _cmd_table1}


def main(argv=None) -> int:
    """Entry point. Exit codes: 0 success, 1 bad usage or configuration,
    2 failure while running."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _COMMANDS[args.command](args)
    except (ConfigError, KeyError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except (StiffnessError, EstimatorDivergence, PlantDomainError, SteadyStateError,
            CalibrationError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
