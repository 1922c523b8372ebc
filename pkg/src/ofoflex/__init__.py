"""Online feedback optimization for disaggregating PCC flexibility requests."""

from .gridsim import (
    ControlledDevice,
    DeviceSet,
    DroopCurve,
    EvProfile,
    GridModel,
    Line,
    Measurement,
    Sensitivities,
    UncontrolledDevice,
    compute_sensitivities,
    default_grid,
    droop_response,
    solve_power_flow,
    step_plant,
)
from .ofo import OfoConfig, StepOutcome, build_qp, step
from .qpcore import QpProblem, QpResult, solve, verify_kkt
from .scenario import Event, Metrics, Scenario, ScenarioLog, builtin_scenario, builtin_scenarios, compute_metrics, run

__version__ = "0.1.0"
