"""
Radial distribution grid plant.

The plant maps the controller input ``u = [p; q]`` of the controlled
flexibility providing units (FPUs) and the state of the uncontrolled devices
to the measurement ``y = [v; p_pcc]``.  The power flow is a balanced
single-phase-equivalent backward/forward sweep on a tree rooted at the
point of common coupling (PCC).

Sign conventions
----------------
* Bus injections: generation positive (kW, kVAr).
* ``p_pcc``: positive for import from the upper-level grid, so a feeder
  exporting 14.5 kW reads ``p_pcc = -14.5``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np


class GridError(ValueError):
    """Invalid grid or device definition."""


class PowerFlowError(RuntimeError):
    """Power flow did not converge.  ``residual`` holds the last mismatch (p.u.)."""

    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(f"{message} (residual={residual:.3e} p.u. after {iterations} iterations)")
        self.residual = residual
        self.iterations = iterations


class DroopConvergenceError(RuntimeError):
    """Droop/power-flow fixed point did not settle."""


# ---------------------------------------------------------------------------
# Grid and device types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    r_ohm: float
    x_ohm: float


@dataclass
class GridModel:
    """Radial feeder.

    Parameters
    ----------
    buses : sequence of int
        Bus identifiers.  The first entry is the PCC (slack).
    lines : sequence of Line
        Branches forming a tree rooted at the PCC.
    v_nominal : float
        Line-to-line nominal voltage in V, shared by all buses.
    slack_voltage : float
        PCC voltage magnitude in p.u.
    base_power : float
        Per-unit base in VA.
    """

    buses: Sequence[int]
    lines: Sequence[Line]
    v_nominal: float = 400.0
    slack_voltage: float = 1.0
    base_power: float = 100e3
    # derived topology, filled in __post_init__
    parent: dict = field(init=False, repr=False)
    order: list = field(init=False, repr=False)

    def __post_init__(self):
        self.buses = [int(b) for b in self.buses]
        self.lines = [ln if isinstance(ln, Line) else Line(*ln) for ln in self.lines]
        if len(set(self.buses)) != len(self.buses):
            raise GridError("duplicate bus identifiers")
        if len(self.buses) < 1:
            raise GridError("grid needs at least the PCC bus")
        if self.v_nominal <= 0 or self.base_power <= 0 or self.slack_voltage <= 0:
            raise GridError("nominal voltage, base power and slack voltage must be positive")
        known = set(self.buses)
        for ln in self.lines:
            if ln.from_bus not in known or ln.to_bus not in known:
                raise GridError(f"line {ln.from_bus}-{ln.to_bus} references an unknown bus")
            if ln.from_bus == ln.to_bus:
                raise GridError(f"line {ln.from_bus}-{ln.to_bus} is a self loop")
            if ln.r_ohm < 0 or ln.x_ohm < 0:
                raise GridError(f"line {ln.from_bus}-{ln.to_bus} has negative impedance")
            if ln.r_ohm == 0 and ln.x_ohm == 0:
                raise GridError(f"line {ln.from_bus}-{ln.to_bus} has zero impedance")
        if len(self.lines) != len(self.buses) - 1:
            raise GridError("grid is not radial: a tree needs exactly len(buses) - 1 lines")

        adjacency: dict[int, list[tuple[int, Line]]] = {b: [] for b in self.buses}
        for ln in self.lines:
            adjacency[ln.from_bus].append((ln.to_bus, ln))
            adjacency[ln.to_bus].append((ln.from_bus, ln))
        root = self.buses[0]
        parent: dict[int, tuple[int, Line]] = {}
        order = [root]
        seen = {root}
        stack = [root]
        while stack:
            bus = stack.pop()
            for nb, ln in sorted(adjacency[bus], key=lambda item: item[0]):
                if nb in seen:
                    continue
                seen.add(nb)
                parent[nb] = (bus, ln)
                order.append(nb)
                stack.append(nb)
        if len(seen) != len(self.buses):
            raise GridError("grid is not radial: some buses are not connected to the PCC")
        self.parent = parent
        self.order = order

    @property
    def pcc(self) -> int:
        return self.buses[0]

    @property
    def z_base(self) -> float:
        return self.v_nominal**2 / self.base_power

    def index(self, bus: int) -> int:
        return self.buses.index(bus)

    def with_slack_voltage(self, v: float) -> "GridModel":
        return GridModel(self.buses, self.lines, self.v_nominal, v, self.base_power)


@dataclass(frozen=True)
class DroopCurve:
    """Piecewise-linear q(v) characteristic.

    Zero inside ``1 +/- deadband``, linear to ``-/+ q_max`` at
    ``v_saturation`` (overvoltage side) and its mirror ``2 - v_saturation``.
    """

    deadband: float = 0.03
    v_saturation: float = 1.05
    q_max: float = 3.0

    def __post_init__(self):
        if not 0 <= self.deadband < self.v_saturation - 1.0:
            raise GridError("droop curve needs 0 <= deadband < v_saturation - 1")
        if self.q_max < 0:
            raise GridError("droop q_max must be nonnegative")


def droop_response(curve: DroopCurve, v: float) -> float:
    """Reactive power injection (kVAr) of a q(v) droop at voltage ``v`` (p.u.).

    Overvoltage absorbs reactive power (negative injection).
    """
    dev = v - 1.0
    excess = abs(dev) - curve.deadband
    if excess <= 0.0:
        return 0.0
    span = curve.v_saturation - 1.0 - curve.deadband
    q = curve.q_max * min(excess / span, 1.0)
    return -q if dev > 0 else q


@dataclass(frozen=True)
class ControlledDevice:
    name: str
    bus: int
    p_limits: tuple[float, float]
    q_limits: tuple[float, float]

    def __post_init__(self):
        if self.p_limits[0] > self.p_limits[1] or self.q_limits[0] > self.q_limits[1]:
            raise GridError(f"device {self.name}: empty power limits")


@dataclass(frozen=True)
class EvProfile:
    """Ramp-plateau-ramp charging draw (kW consumed), starting at ``t_start``."""

    power: float = 11.0
    ramp_up: float = 30.0
    hold: float = 120.0
    ramp_down: float = 30.0
    t_start: float = 0.0

    def __call__(self, t: float) -> float:
        s = t - self.t_start
        if s <= 0:
            return 0.0
        if s < self.ramp_up:
            return self.power * s / self.ramp_up
        s -= self.ramp_up
        if s <= self.hold:
            return self.power
        s -= self.hold
        if s < self.ramp_down:
            return self.power * (1.0 - s / self.ramp_down)
        return 0.0


@dataclass
class UncontrolledDevice:
    """Device the controller does not command and does not know about.

    ``kind`` is ``"droop_inverter"`` (active injection ``p_injection`` in kW
    plus a q(v) droop) or ``"profile_load"`` (consumption ``profile(t)`` kW).
    """

    name: str
    kind: str
    bus: int
    p_injection: float = 0.0
    droop: DroopCurve | None = None
    profile: Callable[[float], float] | None = None
    enabled: bool = True

    def __post_init__(self):
        if self.kind not in ("droop_inverter", "profile_load"):
            raise GridError(f"unknown uncontrolled device kind {self.kind!r}")


@dataclass
class DeviceSet:
    controlled: list[ControlledDevice]
    uncontrolled: list[UncontrolledDevice] = field(default_factory=list)

    def __post_init__(self):
        names = [d.name for d in self.controlled]
        if len(set(names)) != len(names):
            raise GridError("controlled device names must be unique")

    @property
    def n(self) -> int:
        return len(self.controlled)

    def validate_against(self, grid: GridModel) -> None:
        buses = set(grid.buses)
        for d in [*self.controlled, *self.uncontrolled]:
            if d.bus not in buses:
                raise GridError(f"device {d.name} sits on unknown bus {d.bus}")
            if d.bus == grid.pcc:
                raise GridError(f"device {d.name} sits on the PCC bus")

    def u_limits(self) -> tuple[np.ndarray, np.ndarray]:
        lo = [d.p_limits[0] for d in self.controlled] + [d.q_limits[0] for d in self.controlled]
        hi = [d.p_limits[1] for d in self.controlled] + [d.q_limits[1] for d in self.controlled]
        return np.array(lo, dtype=float), np.array(hi, dtype=float)

    def uncontrolled_named(self, name: str) -> UncontrolledDevice:
        for d in self.uncontrolled:
            if d.name == name:
                return d
        raise KeyError(name)


@dataclass(frozen=True)
class Measurement:
    v: np.ndarray  # p.u., one entry per bus in grid.buses order
    p_pcc: float  # kW, import positive


@dataclass(frozen=True)
class PowerFlowSolution:
    v: np.ndarray
    v_complex: np.ndarray
    p_pcc: float
    q_pcc: float
    losses: float
    converged: bool
    residual: float
    iterations: int


@dataclass(frozen=True)
class Sensitivities:
    """Constant linearisation of the plant around an operating point.

    ``H_p[j] = d p_pcc / d u_j`` and ``H_v[i, j] = d v_i / d u_j`` with ``u``
    stacked as ``[p; q]`` and ``v`` over all buses in grid order.
    """

    H_p: np.ndarray
    H_v: np.ndarray


# ---------------------------------------------------------------------------
# Power flow
# ---------------------------------------------------------------------------


def _admittance(grid: GridModel) -> np.ndarray:
    n = len(grid.buses)
    Y = np.zeros((n, n), dtype=complex)
    for ln in grid.lines:
        i, j = grid.index(ln.from_bus), grid.index(ln.to_bus)
        y = 1.0 / complex(ln.r_ohm / grid.z_base, ln.x_ohm / grid.z_base)
        Y[i, i] += y
        Y[j, j] += y
        Y[i, j] -= y
        Y[j, i] -= y
    return Y


def solve_power_flow(
    grid: GridModel,
    injections: Mapping[int, tuple[float, float]],
    tol: float = 1e-10,
    max_iter: int = 100,
) -> PowerFlowSolution:
    """Backward/forward sweep power flow.

    Parameters
    ----------
    grid : GridModel
    injections : mapping bus -> (p_kW, q_kVAr)
        Net generation per bus; missing buses inject zero.  An entry for the
        PCC is rejected.
    tol : float
        Convergence threshold on the largest complex power mismatch (p.u.).
    max_iter : int
        Sweep limit before :class:`PowerFlowError` is raised.
    """
    if grid.pcc in injections:
        raise GridError("the PCC is the slack bus and takes no injection")
    n = len(grid.buses)
    idx = {b: k for k, b in enumerate(grid.buses)}
    s_inj = np.zeros(n, dtype=complex)
    for bus, (p, q) in injections.items():
        if bus not in idx:
            raise GridError(f"injection at unknown bus {bus}")
        s_inj[idx[bus]] = complex(p, q) * 1e3 / grid.base_power

    z = np.zeros(n, dtype=complex)
    parent_idx = np.full(n, -1)
    for bus, (par, ln) in grid.parent.items():
        k = idx[bus]
        parent_idx[k] = idx[par]
        z[k] = complex(ln.r_ohm, ln.x_ohm) / grid.z_base
    order = [idx[b] for b in grid.order]
    Y = _admittance(grid)

    v0 = complex(grid.slack_voltage, 0.0)
    V = np.full(n, v0, dtype=complex)
    residual = math.inf
    for it in range(1, max_iter + 1):
        # backward: branch current into each subtree
        J = -np.conj(s_inj / V)
        for k in reversed(order[1:]):
            J[parent_idx[k]] += J[k]
        # forward: voltage drop from the PCC outwards
        for k in order[1:]:
            V[k] = V[parent_idx[k]] - z[k] * J[k]
        mismatch = V * np.conj(Y @ V) - s_inj
        residual = float(np.max(np.abs(mismatch[1:]))) if n > 1 else 0.0
        if residual <= tol:
            break
    else:
        raise PowerFlowError("backward/forward sweep did not converge", residual, max_iter)

    # branch currents at the converged voltages
    J = -np.conj(s_inj / V)
    for k in reversed(order[1:]):
        J[parent_idx[k]] += J[k]
    children = [k for k in order[1:] if parent_idx[k] == 0]
    s_slack = V[0] * np.conj(sum((J[k] for k in children), 0j))
    kw = grid.base_power / 1e3
    p_pcc = float(s_slack.real) * kw
    losses = float(sum(abs(J[k]) ** 2 * z[k].real for k in order[1:])) * kw
    return PowerFlowSolution(
        v=np.abs(V),
        v_complex=V.copy(),
        p_pcc=p_pcc,
        q_pcc=float(s_slack.imag) * kw,
        losses=losses,
        converged=True,
        residual=residual,
        iterations=it,
    )


# ---------------------------------------------------------------------------
# Plant
# ---------------------------------------------------------------------------


def _controlled_injections(devices: DeviceSet, u: np.ndarray) -> dict[int, list[float]]:
    u = np.asarray(u, dtype=float)
    n = devices.n
    if u.shape != (2 * n,):
        raise ValueError(f"control vector must have length {2 * n}, got {u.shape}")
    inj: dict[int, list[float]] = {}
    for k, dev in enumerate(devices.controlled):
        acc = inj.setdefault(dev.bus, [0.0, 0.0])
        acc[0] += u[k]
        acc[1] += u[n + k]
    return inj


def step_plant(
    grid: GridModel,
    devices: DeviceSet,
    u: np.ndarray,
    t: float,
    noise: float = 0.0,
    rng: np.random.Generator | None = None,
    droop_tol: float = 1e-6,
    droop_max_iter: int = 50,
    pf_tol: float = 1e-10,
) -> Measurement:
    """Apply ``u`` to the grid at time ``t`` and measure ``v`` and ``p_pcc``.

    Droop inverters are iterated to a fixed point with the power flow.  With
    ``noise > 0`` zero-mean uniform noise of that amplitude is added to every
    voltage (p.u.) and to ``p_pcc`` (kW); ``rng`` must then be given.
    """
    inj = _controlled_injections(devices, u)
    droops = []
    for dev in devices.uncontrolled:
        if not dev.enabled:
            continue
        acc = inj.setdefault(dev.bus, [0.0, 0.0])
        if dev.kind == "profile_load":
            acc[0] -= float(dev.profile(t)) if dev.profile is not None else 0.0
        else:
            acc[0] += dev.p_injection
            if dev.droop is not None:
                droops.append(dev)

    def run(q_droop: Sequence[float]) -> PowerFlowSolution:
        total = {b: [pq[0], pq[1]] for b, pq in inj.items()}
        for dev, q in zip(droops, q_droop):
            total[dev.bus][1] += q
        return solve_power_flow(grid, {b: (pq[0], pq[1]) for b, pq in total.items()}, tol=pf_tol)

    q_droop = [0.0] * len(droops)
    sol = run(q_droop)
    if droops:
        positions = [grid.index(d.bus) for d in droops]
        for _ in range(droop_max_iter):
            v_bus = [sol.v[k] for k in positions]
            q_droop = [droop_response(d.droop, v) for d, v in zip(droops, v_bus)]
            sol = run(q_droop)
            if max(abs(sol.v[k] - vb) for k, vb in zip(positions, v_bus)) <= droop_tol:
                break
        else:
            raise DroopConvergenceError(
                f"droop fixed point not reached within {droop_max_iter} iterations"
            )

    v = sol.v.copy()
    p_pcc = sol.p_pcc
    if noise > 0.0:
        if rng is None:
            raise ValueError("measurement noise requires an rng")
        v = v + rng.uniform(-noise, noise, size=v.shape)
        p_pcc = p_pcc + float(rng.uniform(-noise, noise))
    return Measurement(v=v, p_pcc=p_pcc)


def compute_sensitivities(
    grid: GridModel,
    devices: DeviceSet,
    operating_point: np.ndarray,
    perturbation: float = 0.1,
    approximate_Hp_q_zero: bool = True,
    pf_tol: float = 1e-12,
) -> Sensitivities:
    """Central finite-difference sensitivities of ``v`` and ``p_pcc`` w.r.t. ``u``.

    Only the controlled devices are modelled: the controller's grid model
    knows nothing about the uncontrolled ones.
    """
    u0 = np.asarray(operating_point, dtype=float)
    known = DeviceSet(controlled=list(devices.controlled))
    m = u0.size
    H_p = np.zeros(m)
    H_v = np.zeros((len(grid.buses), m))
    for j in range(m):
        du = np.zeros(m)
        du[j] = perturbation
        up = _pf_at(grid, known, u0 + du, pf_tol)
        dn = _pf_at(grid, known, u0 - du, pf_tol)
        H_p[j] = (up.p_pcc - dn.p_pcc) / (2 * perturbation)
        H_v[:, j] = (up.v - dn.v) / (2 * perturbation)
    if approximate_Hp_q_zero:
        H_p[devices.n:] = 0.0
    return Sensitivities(H_p=H_p, H_v=H_v)


def _pf_at(grid: GridModel, devices: DeviceSet, u: np.ndarray, tol: float) -> PowerFlowSolution:
    inj = _controlled_injections(devices, u)
    return solve_power_flow(grid, {b: (pq[0], pq[1]) for b, pq in inj.items()}, tol=tol)


# ---------------------------------------------------------------------------
# Default feeder
# ---------------------------------------------------------------------------

# Cable per-km impedance (ohm/km) and segment lengths (km), PCC outwards.
CABLE_R_PER_KM = 1.2
CABLE_X_PER_KM = 0.09
SEGMENTS = ((0, 3, 0.400), (3, 1, 0.250), (1, 2, 0.200))


def default_grid(slack_voltage: float = 1.0) -> GridModel:
    """Three-segment 400 V feeder of 850 m.

    Bus 3 hosts PV inverter I, bus 1 PV inverter II and the EV charger,
    bus 2 (feeder end) the battery inverter.
    """
    lines = [
        Line(a, b, CABLE_R_PER_KM * km, CABLE_X_PER_KM * km) for a, b, km in SEGMENTS
    ]
    return GridModel(buses=[0, 1, 2, 3], lines=lines, v_nominal=400.0, slack_voltage=slack_voltage)


def default_controlled() -> list[ControlledDevice]:
    return [
        ControlledDevice("pv1", bus=3, p_limits=(0.0, 20.0), q_limits=(-10.0, 10.0)),
        ControlledDevice("bess", bus=2, p_limits=(-15.0, 15.0), q_limits=(-25.0, 25.0)),
    ]
