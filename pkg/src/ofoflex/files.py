"""Scenario JSON documents and CSV run logs."""

from __future__ import annotations

import csv
import json
import re
from dataclasses import asdict
from typing import IO, Any

import numpy as np

from . import gridsim, ofo
from .gridsim import DeviceSet, DroopCurve, EvProfile, GridModel, Line
from .scenario import Event, Scenario, ScenarioError, ScenarioLog, make_scenario

TOP_LEVEL = {"grid", "devices", "ofo", "events", "duration_s", "seed"}
OPTIONAL_TOP_LEVEL = {"name", "description", "noise", "u0"}


class ScenarioFileError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str = "<scenario>"):
        self.message = message
        self.line = line
        self.source = source
        where = f"{source}:{line}" if line is not None else source
        super().__init__(f"{where}: {message}")


def load_scenario(path: str) -> Scenario:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ScenarioFileError(f"cannot read scenario file: {exc.strerror}", source=path) from exc
    return parse_scenario(text, source=path)


def parse_scenario(text: str, source: str = "<scenario>") -> Scenario:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioFileError(f"invalid JSON: {exc.msg}", exc.lineno, source) from exc
    try:
        return scenario_from_dict(doc)
    except _FieldError as exc:
        raise ScenarioFileError(str(exc), _line_of(text, exc.key), source) from None
    except (ScenarioError, gridsim.GridError, ValueError, TypeError) as exc:
        raise ScenarioFileError(str(exc), _line_of(text, getattr(exc, "key", None)), source) from None


class _FieldError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(message)
        self.key = key


def _line_of(text: str, key: str | None) -> int | None:
    if not key:
        return None
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def _get(d: dict, key: str, kind, default: Any = ..., where: str = ""):
    if key not in d:
        if default is ...:
            raise _FieldError(where or key, f"missing required field {where + '.' if where else ''}{key}")
        return default
    value = d[key]
    if kind is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if kind is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if kind not in (float, int) and isinstance(value, kind):
        return value
    raise _FieldError(key, f"field {key} has the wrong type ({type(value).__name__})")


def _only(d: dict, allowed: set, where: str) -> None:
    if not isinstance(d, dict):
        raise _FieldError(where, f"{where} must be an object")
    extra = sorted(set(d) - allowed)
    if extra:
        raise _FieldError(extra[0], f"unknown field {extra[0]!r} in {where}")


def _pair(value, key: str) -> tuple[float, float]:
    if not (isinstance(value, list) and len(value) == 2 and all(isinstance(x, (int, float)) for x in value)):
        raise _FieldError(key, f"{key} must be a [min, max] pair")
    return float(value[0]), float(value[1])


def scenario_from_dict(doc: dict) -> Scenario:
    _only(doc, TOP_LEVEL | OPTIONAL_TOP_LEVEL, "scenario")
    missing = sorted(TOP_LEVEL - set(doc))
    if missing:
        raise _FieldError(missing[0], f"missing top-level key {missing[0]!r}")

    g = _get(doc, "grid", dict)
    _only(g, {"buses", "lines", "v_nominal", "slack_voltage", "base_power"}, "grid")
    lines = []
    for ln in _get(g, "lines", list, where="grid"):
        _only(ln, {"from", "to", "r_ohm", "x_ohm"}, "grid.lines")
        lines.append(Line(_get(ln, "from", int), _get(ln, "to", int), _get(ln, "r_ohm", float), _get(ln, "x_ohm", float)))
    try:
        grid = GridModel(
            buses=_get(g, "buses", list, where="grid"),
            lines=lines,
            v_nominal=_get(g, "v_nominal", float, 400.0),
            slack_voltage=_get(g, "slack_voltage", float, 1.0),
            base_power=_get(g, "base_power", float, 100e3),
        )
    except gridsim.GridError as exc:
        raise _FieldError("lines", str(exc)) from None

    d = _get(doc, "devices", dict)
    _only(d, {"controlled", "uncontrolled"}, "devices")
    controlled = []
    for c in _get(d, "controlled", list, where="devices"):
        _only(c, {"name", "bus", "p_limits", "q_limits"}, "devices.controlled")
        controlled.append(
            gridsim.ControlledDevice(
                _get(c, "name", str),
                _get(c, "bus", int),
                _pair(_get(c, "p_limits", list), "p_limits"),
                _pair(_get(c, "q_limits", list), "q_limits"),
            )
        )
    if not controlled:
        raise _FieldError("controlled", "devices.controlled is empty: at least one controllable unit is required")
    uncontrolled = []
    for u in _get(d, "uncontrolled", list, []):
        _only(u, {"name", "kind", "bus", "p_injection", "droop", "profile", "enabled"}, "devices.uncontrolled")
        droop = _get(u, "droop", dict, None)
        profile = _get(u, "profile", dict, None)
        if droop is not None:
            _only(droop, {"deadband", "v_saturation", "q_max"}, "droop")
        if profile is not None:
            _only(profile, {"power", "ramp_up", "hold", "ramp_down", "t_start"}, "profile")
        uncontrolled.append(
            gridsim.UncontrolledDevice(
                name=_get(u, "name", str),
                kind=_get(u, "kind", str),
                bus=_get(u, "bus", int),
                p_injection=_get(u, "p_injection", float, 0.0),
                droop=DroopCurve(**droop) if droop is not None else None,
                profile=EvProfile(**profile) if profile is not None else None,
                enabled=_get(u, "enabled", bool, True),
            )
        )
    devices = DeviceSet(controlled, uncontrolled)

    o = _get(doc, "ofo", dict)
    _only(o, {"formulation", "p_set", "G", "v_min", "v_max", "v_buses", "sampling_time"}, "ofo")
    formulation = _get(o, "formulation", str)
    if formulation not in ofo.FORMULATIONS:
        raise _FieldError("formulation", f"ofo.formulation must be one of {ofo.FORMULATIONS}")
    G = _get(o, "G", list, None)
    if G is not None:
        if len(G) != 2 * len(controlled) or not all(isinstance(x, (int, float)) for x in G):
            raise _FieldError("G", f"ofo.G must list {2 * len(controlled)} numbers")
        if any(x <= 0 for x in G):
            raise _FieldError("G", "ofo.G entries must be strictly positive")
    v_buses = _get(o, "v_buses", list, None)
    if v_buses is not None:
        unknown = [b for b in v_buses if b not in grid.buses]
        if unknown:
            raise _FieldError("v_buses", f"ofo.v_buses names unknown bus {unknown[0]}")
        v_buses = [grid.index(b) for b in v_buses]

    events = []
    for e in _get(doc, "events", list):
        _only(e, {"t", "kind", "value"}, "events")
        kind = _get(e, "kind", str)
        value = e.get("value", {} if kind == "ev_plug" else None)
        if kind == "ev_plug":
            if not isinstance(value, dict):
                raise _FieldError("value", "ev_plug value must be an object of profile fields")
            _only(value, {"power", "ramp_up", "hold", "ramp_down", "t_start"}, "ev_plug")
            value = EvProfile(**value)
        elif not isinstance(value, (int, float)) or isinstance(value, bool):
            raise _FieldError("value", f"{kind} event needs a numeric value")
        events.append(Event(_get(e, "t", float), kind, value))

    return make_scenario(
        name=_get(doc, "name", str, "custom"),
        grid=grid,
        devices=devices,
        formulation=formulation,
        p_set=_get(o, "p_set", float),
        duration=_get(doc, "duration_s", float),
        events=events,
        G=G,
        v_min=_get(o, "v_min", float, 0.95),
        v_max=_get(o, "v_max", float, 1.05),
        v_buses=v_buses,
        sampling_time=_get(o, "sampling_time", float, 5.0),
        seed=_get(doc, "seed", int),
        noise=_get(doc, "noise", float, 0.0),
        u0=_get(doc, "u0", list, None),
        description=_get(doc, "description", str, ""),
    )


def scenario_to_dict(sc: Scenario) -> dict:
    def profile(p):
        if p is None:
            return None
        if not isinstance(p, EvProfile):
            raise ScenarioError("only ramp-plateau-ramp profiles can be written to a scenario file")
        return asdict(p)

    uncontrolled = []
    for u in sc.devices.uncontrolled:
        entry = {"name": u.name, "kind": u.kind, "bus": u.bus, "p_injection": u.p_injection, "enabled": u.enabled}
        if u.droop is not None:
            entry["droop"] = asdict(u.droop)
        if u.profile is not None:
            entry["profile"] = profile(u.profile)
        uncontrolled.append(entry)
    events = []
    for e in sc.events:
        value = profile(e.value) if e.kind == "ev_plug" else e.value
        events.append({"t": e.t, "kind": e.kind, "value": value})
    cfg = sc.ofo
    return {
        "name": sc.name,
        "description": sc.description,
        "grid": {
            "buses": list(sc.grid.buses),
            "lines": [{"from": ln.from_bus, "to": ln.to_bus, "r_ohm": ln.r_ohm, "x_ohm": ln.x_ohm} for ln in sc.grid.lines],
            "v_nominal": sc.grid.v_nominal,
            "slack_voltage": sc.grid.slack_voltage,
            "base_power": sc.grid.base_power,
        },
        "devices": {
            "controlled": [
                {"name": c.name, "bus": c.bus, "p_limits": list(c.p_limits), "q_limits": list(c.q_limits)}
                for c in sc.devices.controlled
            ],
            "uncontrolled": uncontrolled,
        },
        "ofo": {
            "formulation": cfg.formulation,
            "p_set": cfg.p_set,
            "G": [float(x) for x in cfg.G],
            "v_min": cfg.v_min,
            "v_max": cfg.v_max,
            "v_buses": [sc.grid.buses[i] for i in cfg.v_buses],
            "sampling_time": cfg.sampling_time,
        },
        "events": events,
        "duration_s": sc.duration,
        "seed": sc.seed,
        "noise": sc.noise,
        "u0": [float(x) for x in sc.u0],
    }


# ---------------------------------------------------------------------------
# CSV logs
# ---------------------------------------------------------------------------


def csv_header(log: ScenarioLog) -> list[str]:
    cols = ["t", "p_pcc", "p_set", "qp_status"]
    for name in log.device_names:
        cols += [f"p_{name}", f"q_{name}"]
    cols += [f"v_bus{b}" for b in log.bus_ids]
    return cols


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_log_csv(log: ScenarioLog, fh: IO[str]) -> None:
    header = csv_header(log)
    n = len(log.device_names)
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(header)
    for r in log.records:
        row = [_fmt(r.t), _fmt(r.measurement.p_pcc), _fmt(r.p_set), r.qp_status]
        for j in range(n):
            row += [_fmt(r.u[j]), _fmt(r.u[n + j])]
        row += [_fmt(v) for v in r.measurement.v]
        w.writerow(row)


def read_log_csv(fh: IO[str]) -> dict[str, list]:
    """Columns by header name; ``qp_status`` stays text, everything else float."""
    reader = csv.reader(fh)
    header = next(reader)
    cols: dict[str, list] = {h: [] for h in header}
    for row in reader:
        for h, cell in zip(header, row):
            cols[h].append(cell if h == "qp_status" else float(cell))
    return cols


def format_matrix(rows: list[str], cols: list[str], data: np.ndarray, fmt: str = "{: .6f}") -> str:
    width = max(12, *(len(c) + 2 for c in cols))
    lead = max(len(r) for r in rows) + 2
    out = [" " * lead + "".join(c.rjust(width) for c in cols)]
    for name, vals in zip(rows, np.atleast_2d(data)):
        out.append(name.ljust(lead) + "".join(fmt.format(v).rjust(width) for v in vals))
    return "\n".join(out)
