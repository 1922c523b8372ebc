"""
Online feedback optimization controller.

The controller is the integral update ``u(k+1) = u(k) + w`` where ``w``
solves a small QP built from the current measurement::

    min_w  || w + G^-1 grad_Phi ||_G^2
    s.t.   u_min <= u(k) + w <= u_max
           v_min <= v_meas(k) + H_v w <= v_max       (constrained buses only)
           p_set  = p_pcc(k) + H_p w                  (constraint formulation)

Two overarching objectives are supported:

``cost``
    ``Phi = (p_set - p_pcc)^2``, so ``grad_Phi = -2 H_p (p_set - p_pcc)``.
``constraint``
    ``Phi = p^T p + q^T q`` with tracking as a hard equality row, so
    ``grad_Phi = 2 u``.

In both cases the QP objective expands to ``w^T G w + 2 w^T grad_Phi`` and
the unconstrained step is ``w = -G^-1 grad_Phi``.  The gradient always uses
the *measured* ``p_pcc`` and ``v``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import qpcore
from .gridsim import DeviceSet, Measurement, Sensitivities

log = logging.getLogger(__name__)

FORMULATIONS = ("cost", "constraint")

TUNED_G_DIAG = (1.0, 1.0, 1e-10, 1e-10)


def default_G(formulation: str, n_devices: int) -> np.ndarray:
    """Default weight diagonal.

    Cost formulation: unit weight on ``p``, near-zero weight on ``q``.
    Constraint formulation: ``2 I``, which makes each step the exact
    minimum-effort projection onto the linearised constraints.  With ``I``
    the effort gradient is overshot by a factor two and any input component
    invisible to the tracking row flips sign every iteration without decay.
    """
    if formulation == "cost":
        return np.array(TUNED_G_DIAG[:1] * n_devices + TUNED_G_DIAG[2:3] * n_devices, dtype=float)
    return np.full(2 * n_devices, 2.0)


@dataclass
class OfoConfig:
    """Controller configuration.

    ``G`` is given by its diagonal over ``[p; q]``.  ``v_buses`` are indices
    into the measurement vector whose voltages enter the QP; by default the
    buses hosting the controlled devices.
    """

    formulation: str
    G: np.ndarray
    p_set: float
    u_min: np.ndarray
    u_max: np.ndarray
    v_min: float
    v_max: float
    v_buses: list[int]
    sensitivities: Sensitivities
    device_names: list[str]
    bus_labels: list[str]
    sampling_time: float = 5.0

    def __post_init__(self):
        if self.formulation not in FORMULATIONS:
            raise ValueError(f"formulation must be one of {FORMULATIONS}, got {self.formulation!r}")
        self.G = np.asarray(self.G, dtype=float).reshape(-1)
        self.u_min = np.asarray(self.u_min, dtype=float)
        self.u_max = np.asarray(self.u_max, dtype=float)
        n = 2 * len(self.device_names)
        if self.G.shape != (n,) or self.u_min.shape != (n,) or self.u_max.shape != (n,):
            raise ValueError(f"G and input limits must have length {n}")
        if np.any(self.G <= 0) or not np.all(np.isfinite(self.G)):
            raise ValueError("G diagonal entries must be positive")
        if np.any(self.u_min > self.u_max) or self.v_min > self.v_max:
            raise ValueError("limit intervals must be nonempty")
        if self.sampling_time <= 0:
            raise ValueError("sampling_time must be positive")
        if self.sensitivities.H_p.shape != (n,) or self.sensitivities.H_v.shape[1] != n:
            raise ValueError("sensitivity dimensions do not match the control vector")

    @property
    def n(self) -> int:
        return self.G.size

    def with_(self, **changes) -> "OfoConfig":
        return replace(self, **changes)

    @classmethod
    def for_devices(
        cls,
        devices: DeviceSet,
        bus_ids: list[int],
        sensitivities: Sensitivities,
        formulation: str,
        p_set: float,
        G=None,
        v_min: float = 0.95,
        v_max: float = 1.05,
        v_buses: list[int] | None = None,
        sampling_time: float = 5.0,
    ) -> "OfoConfig":
        n = devices.n
        if G is None:
            G = default_G(formulation, n)
        if v_buses is None:
            v_buses = sorted({bus_ids.index(d.bus) for d in devices.controlled})
        u_min, u_max = devices.u_limits()
        return cls(
            formulation=formulation,
            G=np.asarray(G, dtype=float),
            p_set=p_set,
            u_min=u_min,
            u_max=u_max,
            v_min=v_min,
            v_max=v_max,
            v_buses=list(v_buses),
            sensitivities=sensitivities,
            device_names=[d.name for d in devices.controlled],
            bus_labels=[f"bus{b}" for b in bus_ids],
            sampling_time=sampling_time,
        )


@dataclass
class StepOutcome:
    u_next: np.ndarray
    qp_status: str
    w: np.ndarray
    active_constraints: list[str] = field(default_factory=list)
    clamped: bool = False


def objective_gradient(u: np.ndarray, y: Measurement, cfg: OfoConfig) -> np.ndarray:
    """Gradient of the overarching objective w.r.t. ``u``, from measurements."""
    if cfg.formulation == "cost":
        return -2.0 * cfg.sensitivities.H_p * (cfg.p_set - y.p_pcc)
    return 2.0 * np.asarray(u, dtype=float)


def overarching_objective(u: np.ndarray, y: Measurement, cfg: OfoConfig) -> float:
    if cfg.formulation == "cost":
        return float((cfg.p_set - y.p_pcc) ** 2)
    u = np.asarray(u, dtype=float)
    return float(u @ u)


def _check_dims(u: np.ndarray, y: Measurement, cfg: OfoConfig) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.shape != (cfg.n,):
        raise ValueError(f"control vector must have length {cfg.n}, got {u.shape}")
    if cfg.sensitivities.H_v.shape[0] != len(y.v):
        raise ValueError("H_v rows do not match the measured voltages")
    return u


def _common_rows(u: np.ndarray, y: Measurement, cfg: OfoConfig) -> dict:
    H_v = cfg.sensitivities.H_v[cfg.v_buses]
    v_meas = np.asarray(y.v, dtype=float)[cfg.v_buses]
    return dict(
        lb=cfg.u_min - u,
        ub=cfg.u_max - u,
        A_ineq=H_v,
        lo=cfg.v_min - v_meas,
        hi=cfg.v_max - v_meas,
    )


def build_qp_cost(u: np.ndarray, y: Measurement, cfg: OfoConfig) -> qpcore.QpProblem:
    """QP for the cost formulation (tracking error in the objective)."""
    u = _check_dims(u, y, cfg)
    g = -2.0 * cfg.sensitivities.H_p * (cfg.p_set - y.p_pcc)
    return qpcore.QpProblem(G=np.diag(cfg.G), g=g, **_common_rows(u, y, cfg))


def build_qp_constraint(u: np.ndarray, y: Measurement, cfg: OfoConfig) -> qpcore.QpProblem:
    """QP for the constraint formulation (tracking as an equality row)."""
    u = _check_dims(u, y, cfg)
    return qpcore.QpProblem(
        G=np.diag(cfg.G),
        g=2.0 * u,
        A_eq=cfg.sensitivities.H_p.reshape(1, -1),
        b_eq=np.array([cfg.p_set - y.p_pcc]),
        **_common_rows(u, y, cfg),
    )


def build_qp(u: np.ndarray, y: Measurement, cfg: OfoConfig) -> qpcore.QpProblem:
    if cfg.formulation == "cost":
        return build_qp_cost(u, y, cfg)
    return build_qp_constraint(u, y, cfg)


def _labels(result: qpcore.QpResult, cfg: OfoConfig) -> list[str]:
    n_dev = len(cfg.device_names)
    out = []
    for row in result.active_rows():
        if row.kind == "eq":
            out.append("p_set")
        elif row.kind == "box":
            q_or_p = "q" if row.index >= n_dev else "p"
            name = cfg.device_names[row.index % n_dev]
            out.append(f"{q_or_p}_{'max' if row.side == 'upper' else 'min'}[{name}]")
        else:
            bus = cfg.bus_labels[cfg.v_buses[row.index]]
            out.append(f"v_{'max' if row.side == 'upper' else 'min'}[{bus}]")
    return out


def step(u: np.ndarray, y: Measurement, cfg: OfoConfig) -> StepOutcome:
    """One controller iteration.  On an infeasible QP the input is held."""
    u = np.asarray(u, dtype=float)
    result = qpcore.solve(build_qp(u, y, cfg))
    if not result.optimal:
        return StepOutcome(u_next=u.copy(), qp_status="infeasible", w=np.zeros_like(u))
    u_next = u + result.w
    clamped = np.clip(u_next, cfg.u_min, cfg.u_max)
    hit = bool(np.any(np.abs(clamped - u_next) > qpcore.FEAS_TOL))
    if hit:
        log.error("safety clamp changed the QP step by %.3e; solver defect", np.abs(clamped - u_next).max())
    return StepOutcome(
        u_next=clamped,
        qp_status="optimal",
        w=clamped - u,
        active_constraints=_labels(result, cfg),
        clamped=hit,
    )
