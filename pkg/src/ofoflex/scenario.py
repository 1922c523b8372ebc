"""
Closed-loop experiments: event schedules, the plant/controller loop and
comparison metrics.

Each tick ``k`` (``t = k * sampling_time``) applies due events, measures the
plant under the current input, lets the controller compute the next input
and records the tick.  Plant and controller only exchange the measurement
and the control vector.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

from . import gridsim, ofo
from .gridsim import DeviceSet, DroopCurve, EvProfile, GridModel, Measurement, UncontrolledDevice

EVENT_KINDS = ("set_flexibility", "ev_plug", "pv2_power", "slack_voltage")

# names the events act on
PV2_NAME = "pv2"
EV_NAME = "ev"

TRACKING_BAND = 0.5  # kW
STEADY_FRACTION = 0.2
VOLTAGE_TOL = 1e-4  # p.u.


class ScenarioError(ValueError):
    pass


class SimulationError(RuntimeError):
    """Plant failure during a run; ``log`` holds the ticks completed so far."""

    def __init__(self, message: str, log: "ScenarioLog"):
        super().__init__(message)
        self.log = log


@dataclass(frozen=True)
class Event:
    t: float
    kind: str
    value: Any

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise ScenarioError(f"unknown event kind {self.kind!r}; expected one of {EVENT_KINDS}")
        if self.t < 0:
            raise ScenarioError("event times must be nonnegative")


@dataclass
class Scenario:
    name: str
    grid: GridModel
    devices: DeviceSet
    ofo: ofo.OfoConfig
    duration: float
    events: list[Event] = field(default_factory=list)
    seed: int = 0
    noise: float = 0.0
    u0: np.ndarray | None = None
    description: str = ""

    def __post_init__(self):
        self.events = sorted(self.events, key=lambda e: e.t)
        if self.duration < 0:
            raise ScenarioError("duration must be nonnegative")
        if self.events and self.events[-1].t > self.duration:
            raise ScenarioError("an event is scheduled after the end of the run")
        steps = self.duration / self.ofo.sampling_time
        if abs(steps - round(steps)) > 1e-9:
            raise ScenarioError("duration must be a multiple of the sampling time")
        if self.noise < 0:
            raise ScenarioError("noise amplitude must be nonnegative")
        self.devices.validate_against(self.grid)
        if self.u0 is None:
            self.u0 = np.zeros(2 * self.devices.n)
        self.u0 = np.asarray(self.u0, dtype=float)
        if self.u0.shape != (2 * self.devices.n,):
            raise ScenarioError("initial input has the wrong length")

    @property
    def n_ticks(self) -> int:
        return int(round(self.duration / self.ofo.sampling_time)) + 1

    def with_ofo(self, **changes) -> "Scenario":
        return replace(self, ofo=self.ofo.with_(**changes))

    def with_formulation(self, formulation: str, G=None) -> "Scenario":
        """Same plant and request, other formulation (default G of that formulation)."""
        if G is None:
            G = ofo.default_G(formulation, self.devices.n)
        return self.with_ofo(formulation=formulation, G=np.asarray(G, dtype=float))


@dataclass(frozen=True)
class TickRecord:
    k: int
    t: float
    u: np.ndarray
    measurement: Measurement
    p_set: float
    qp_status: str
    active_constraints: tuple
    objective: float
    violations: np.ndarray  # p.u. outside [v_min, v_max], per bus

    @property
    def tracking_error(self) -> float:
        return self.measurement.p_pcc - self.p_set


@dataclass
class ScenarioLog:
    device_names: list[str]
    bus_ids: list[int]
    v_buses: list[int]
    v_max: float
    records: list[TickRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        """Column by its CSV name (``t``, ``p_pcc``, ``p_pv1``, ``v_bus2``, ...)."""
        n = len(self.device_names)
        if name == "t":
            return np.array([r.t for r in self.records])
        if name == "p_pcc":
            return np.array([r.measurement.p_pcc for r in self.records])
        if name == "p_set":
            return np.array([r.p_set for r in self.records])
        if name.startswith("v_bus"):
            i = self.bus_ids.index(int(name[5:]))
            return np.array([r.measurement.v[i] for r in self.records])
        if name[:2] in ("p_", "q_") and name[2:] in self.device_names:
            j = self.device_names.index(name[2:]) + (n if name[0] == "q" else 0)
            return np.array([r.u[j] for r in self.records])
        raise KeyError(name)

    @property
    def u(self) -> np.ndarray:
        return np.array([r.u for r in self.records])


def run(scenario: Scenario) -> ScenarioLog:
    grid = scenario.grid
    devices = copy.deepcopy(scenario.devices)
    cfg = scenario.ofo
    rng = np.random.default_rng(scenario.seed)
    pending = list(scenario.events)
    u = scenario.u0.copy()
    log = ScenarioLog(
        device_names=list(cfg.device_names),
        bus_ids=list(grid.buses),
        v_buses=list(cfg.v_buses),
        v_max=cfg.v_max,
    )
    Ts = cfg.sampling_time
    for k in range(scenario.n_ticks):
        t = k * Ts
        while pending and pending[0].t <= t + 1e-9:
            grid, devices, cfg = _apply(pending.pop(0), grid, devices, cfg)
        try:
            y = gridsim.step_plant(grid, devices, u, t, noise=scenario.noise, rng=rng)
        except (gridsim.PowerFlowError, gridsim.DroopConvergenceError) as exc:
            raise SimulationError(f"plant failed at t={t:g} s: {exc}", log) from exc
        out = ofo.step(u, y, cfg)
        v = y.v
        log.records.append(
            TickRecord(
                k=k,
                t=t,
                u=u.copy(),
                measurement=y,
                p_set=cfg.p_set,
                qp_status=out.qp_status,
                active_constraints=tuple(out.active_constraints),
                objective=ofo.overarching_objective(u, y, cfg),
                violations=np.maximum(np.maximum(v - cfg.v_max, cfg.v_min - v), 0.0),
            )
        )
        u = out.u_next
    return log


def _apply(event: Event, grid, devices, cfg):
    if event.kind == "set_flexibility":
        cfg = cfg.with_(p_set=float(event.value))
    elif event.kind == "slack_voltage":
        grid = grid.with_slack_voltage(float(event.value))
    elif event.kind == "pv2_power":
        _named(devices, PV2_NAME).p_injection = float(event.value)
    else:
        ev = _named(devices, EV_NAME)
        profile = event.value if isinstance(event.value, EvProfile) else EvProfile(**event.value)
        ev.profile = replace(profile, t_start=event.t + profile.t_start)
        ev.enabled = True
    return grid, devices, cfg


def _named(devices: DeviceSet, name: str) -> UncontrolledDevice:
    try:
        return devices.uncontrolled_named(name)
    except KeyError:
        raise ScenarioError(f"event targets missing uncontrolled device {name!r}") from None


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Metrics:
    convergence_iterations: float  # math.inf when the band is never held
    steady_state_error: float
    max_overvoltage: float
    overvoltage_steps: int
    total_q_usage: float
    total_p_change: float
    infeasible_steps: int

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def steady_window(n: int) -> slice:
    return slice(n - max(1, math.ceil(STEADY_FRACTION * n)), n)


def compute_metrics(log: ScenarioLog, band: float = TRACKING_BAND) -> Metrics:
    """Summary figures of a run.

    ``convergence_iterations`` is the first tick from which the tracking error
    stays within ``band`` until the end of the log.  Overvoltage is measured
    on the constrained buses only; ``overvoltage_steps`` is the longest run
    of consecutive ticks above ``v_max`` by more than the voltage tolerance.
    Effort figures are averaged over the steady window (last 20 % of ticks).
    """
    if not log.records:
        raise ValueError("empty log")
    n = len(log)
    err = np.abs([r.tracking_error for r in log.records])
    outside = np.nonzero(err > band)[0]
    if outside.size == 0:
        conv = 0
    elif outside[-1] == n - 1:
        conv = math.inf
    else:
        conv = int(outside[-1]) + 1

    if log.v_buses:
        over = np.array([max(0.0, float(np.max(r.measurement.v[log.v_buses])) - log.v_max) for r in log.records])
    else:
        over = np.zeros(n)
    longest = run_len = 0
    for x in over:
        run_len = run_len + 1 if x > VOLTAGE_TOL else 0
        longest = max(longest, run_len)

    ss = steady_window(n)
    u = log.u
    m = len(log.device_names)
    p0 = u[0, :m]
    return Metrics(
        convergence_iterations=conv,
        steady_state_error=float(np.mean(err[ss])),
        max_overvoltage=float(over.max()),
        overvoltage_steps=longest,
        total_q_usage=float(np.mean(np.abs(u[ss, m:]).sum(axis=1))),
        total_p_change=float(np.mean(np.abs(u[ss, :m] - p0).sum(axis=1))),
        infeasible_steps=sum(r.qp_status == "infeasible" for r in log.records),
    )


# ---------------------------------------------------------------------------
# Built-in experiments
# ---------------------------------------------------------------------------


def make_scenario(
    name: str,
    grid: GridModel,
    devices: DeviceSet,
    formulation: str,
    p_set: float,
    duration: float,
    events=(),
    G=None,
    v_min: float = 0.95,
    v_max: float = 1.05,
    v_buses=None,
    sampling_time: float = 5.0,
    seed: int = 0,
    noise: float = 0.0,
    u0=None,
    description: str = "",
) -> Scenario:
    """Assemble a scenario; sensitivities are computed at the initial input."""
    n = 2 * devices.n
    u_init = np.zeros(n) if u0 is None else np.asarray(u0, dtype=float)
    sens = gridsim.compute_sensitivities(grid, devices, u_init)
    cfg = ofo.OfoConfig.for_devices(
        devices,
        list(grid.buses),
        sens,
        formulation,
        p_set,
        G=G,
        v_min=v_min,
        v_max=v_max,
        v_buses=v_buses,
        sampling_time=sampling_time,
    )
    return Scenario(
        name=name,
        grid=grid,
        devices=devices,
        ofo=cfg,
        duration=duration,
        events=list(events),
        seed=seed,
        noise=noise,
        u0=u_init,
        description=description,
    )


PV2_DROOP = DroopCurve(deadband=0.03, v_saturation=1.05, q_max=4.0)


def _pv2(p: float) -> UncontrolledDevice:
    return UncontrolledDevice(PV2_NAME, "droop_inverter", bus=1, p_injection=p, droop=PV2_DROOP)


def _ev() -> UncontrolledDevice:
    return UncontrolledDevice(EV_NAME, "profile_load", bus=1, enabled=False)


def _tuning(name, G, description):
    devices = DeviceSet(gridsim.default_controlled())
    return make_scenario(name, gridsim.default_grid(), devices, "cost", -14.5, 200.0, G=G,
                         description=description)


def _builders() -> dict:
    return {
        "tuning_untuned": lambda: _tuning(
            "tuning_untuned", [1.0] * 4, "cost formulation, identity weight, p_set -14.5 kW"
        ),
        "tuning_tuned": lambda: _tuning(
            "tuning_tuned", list(ofo.TUNED_G_DIAG), "cost formulation, cheap reactive steps, p_set -14.5 kW"
        ),
        "constraint_basic": lambda: make_scenario(
            "constraint_basic",
            gridsim.default_grid(),
            DeviceSet(gridsim.default_controlled()),
            "constraint",
            -14.5,
            100.0,
            description="constraint formulation, p_set -14.5 kW",
        ),
        "droop_interaction": lambda: make_scenario(
            "droop_interaction",
            gridsim.default_grid(),
            DeviceSet(gridsim.default_controlled(), [_pv2(3.0)]),
            "constraint",
            -15.0,
            300.0,
            events=[Event(60.0, "pv2_power", 5.0), Event(150.0, "pv2_power", 2.0), Event(230.0, "pv2_power", 4.0)],
            description="constraint formulation, p_set -15 kW, droop-controlled PV with stepped power",
        ),
        "ev_realistic": lambda: make_scenario(
            "ev_realistic",
            gridsim.default_grid(),
            DeviceSet(gridsim.default_controlled(), [_pv2(3.0), _ev()]),
            "constraint",
            -2.0,
            300.0,
            events=[Event(50.0, "ev_plug", EvProfile())],
            description="constraint formulation, p_set -2 kW, EV charging ramp-plateau-ramp",
        ),
    }


def builtin_names() -> list[str]:
    return list(_builders())


def builtin_scenario(name: str) -> Scenario:
    try:
        return _builders()[name]()
    except KeyError:
        raise ScenarioError(f"unknown scenario {name!r}; known: {', '.join(builtin_names())}") from None


def builtin_scenarios() -> dict[str, Scenario]:
    return {name: build() for name, build in _builders().items()}
