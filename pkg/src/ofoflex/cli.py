"""Command-line front end.

Verbs: ``run``, ``compare``, ``sensitivities`` and ``list-scenarios``.
Exit codes: 0 success, 1 failure (bad input or plant failure), 2 when every
controller step of a run was infeasible, i.e. the requested flexibility
cannot be delivered.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from dataclasses import dataclass, field, replace

import numpy as np

from . import gridsim, ofo
from .files import ScenarioFileError, format_matrix, load_scenario, write_log_csv
from .scenario import (
    Metrics,
    Scenario,
    ScenarioError,
    SimulationError,
    builtin_names,
    builtin_scenario,
    compute_metrics,
    run,
)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_INFEASIBLE = 2

OVERRIDE_KEYS = ("p_set", "formulation", "G", "noise")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    scenario: str
    out: str | None = None
    overrides: dict = field(default_factory=dict)
    format: str = "csv"


def parse_overrides(items) -> dict:
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        if key not in OVERRIDE_KEYS:
            raise ConfigError(f"unknown override {key!r}; allowed: {', '.join(OVERRIDE_KEYS)}")
        try:
            if key == "formulation":
                if value not in ofo.FORMULATIONS:
                    raise ConfigError(f"formulation must be one of {ofo.FORMULATIONS}")
                out[key] = value
            elif key == "G":
                out[key] = [float(x) for x in value.replace(";", ",").split(",") if x.strip()]
            else:
                out[key] = float(value)
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"override {key} has a malformed value {value!r}") from None
    return out


def resolve_scenario(source: str) -> Scenario:
    """A built-in name, or a path to a scenario JSON file."""
    if source in builtin_names():
        return builtin_scenario(source)
    if os.path.exists(source) or source.endswith(".json"):
        return load_scenario(source)
    raise ConfigError(f"unknown scenario {source!r}; built-ins: {', '.join(builtin_names())}")


def apply_overrides(sc: Scenario, overrides: dict) -> Scenario:
    if "formulation" in overrides and overrides["formulation"] != sc.ofo.formulation:
        sc = sc.with_formulation(overrides["formulation"])
    if "G" in overrides:
        G = np.asarray(overrides["G"], dtype=float)
        if G.shape != sc.ofo.G.shape:
            raise ConfigError(f"G override needs {sc.ofo.G.size} entries, got {G.size}")
        if np.any(G <= 0):
            raise ConfigError("G override entries must be strictly positive")
        sc = sc.with_ofo(G=G)
    if "p_set" in overrides:
        sc = sc.with_ofo(p_set=overrides["p_set"])
    if "noise" in overrides:
        if overrides["noise"] < 0:
            raise ConfigError("noise amplitude must be nonnegative")
        sc = replace(sc, noise=overrides["noise"])
    return sc


def format_metrics(name: str, m: Metrics) -> str:
    conv = "never" if math.isinf(m.convergence_iterations) else str(int(m.convergence_iterations))
    rows = [
        ("scenario", name),
        ("convergence_iterations", conv),
        ("steady_state_error_kW", f"{m.steady_state_error:.4f}"),
        ("max_overvoltage_pu", f"{m.max_overvoltage:.5f}"),
        ("overvoltage_steps", str(m.overvoltage_steps)),
        ("total_q_usage_kvar", f"{m.total_q_usage:.4f}"),
        ("total_p_change_kW", f"{m.total_p_change:.4f}"),
        ("infeasible_steps", str(m.infeasible_steps)),
    ]
    width = max(len(k) for k, _ in rows) + 2
    return "\n".join(k.ljust(width) + v for k, v in rows)


def _write_pretty(log, fh) -> None:
    names = ["t", "p_pcc", "p_set"]
    for d in log.device_names:
        names += [f"p_{d}", f"q_{d}"]
    names += [f"v_bus{b}" for b in log.bus_ids]
    cols = {n: log.column(n) for n in names}
    fh.write("".join(n.rjust(11) for n in names[:3]) + "  status    " + "".join(n.rjust(11) for n in names[3:]) + "\n")
    for k, r in enumerate(log.records):
        head = "".join(f"{cols[n][k]:11.3f}" for n in names[:3])
        tail = "".join(f"{cols[n][k]:11.4f}" for n in names[3:])
        fh.write(f"{head}  {r.qp_status:<10}{tail}\n")


def cmd_run(cfg: RunConfig) -> int:
    sc = apply_overrides(resolve_scenario(cfg.scenario), cfg.overrides)
    try:
        log = run(sc)
    except SimulationError as exc:
        print(f"error: {exc} ({len(exc.log)} ticks completed)", file=sys.stderr)
        return EXIT_FAILURE
    writer = write_log_csv if cfg.format == "csv" else _write_pretty
    if cfg.out:
        with open(cfg.out, "w", encoding="utf-8", newline="") as fh:
            writer(log, fh)
        summary = sys.stdout
    else:
        writer(log, sys.stdout)
        summary = sys.stderr
    print(format_metrics(sc.name, compute_metrics(log)), file=summary)
    if all(r.qp_status == "infeasible" for r in log.records):
        print("flexibility request not deliverable: every step infeasible", file=sys.stderr)
        return EXIT_INFEASIBLE
    return EXIT_OK


def compare_table(sc: Scenario, formulations=ofo.FORMULATIONS) -> tuple[str, dict]:
    metrics = {}
    for f in formulations:
        metrics[f] = compute_metrics(run(sc.with_formulation(f)))
    rows = [
        ("convergence_iterations", lambda m: "never" if math.isinf(m.convergence_iterations) else str(int(m.convergence_iterations))),
        ("total_p_change_kW", lambda m: f"{m.total_p_change:.4f}"),
        ("total_q_usage_kvar", lambda m: f"{m.total_q_usage:.4f}"),
        ("max_overvoltage_pu", lambda m: f"{m.max_overvoltage:.5f}"),
        ("infeasible_steps", lambda m: str(m.infeasible_steps)),
    ]
    lead = max(len(r[0]) for r in rows) + 2
    lines = [f"scenario {sc.name}, p_set {sc.ofo.p_set:g} kW", "".ljust(lead) + "".join(f.rjust(14) for f in formulations)]
    for label, fmt in rows:
        lines.append(label.ljust(lead) + "".join(fmt(metrics[f]).rjust(14) for f in formulations))
    return "\n".join(lines), metrics


def cmd_compare(scenario: str, formulations=ofo.FORMULATIONS, overrides=None) -> int:
    sc = apply_overrides(resolve_scenario(scenario), {k: v for k, v in (overrides or {}).items() if k != "formulation"})
    try:
        table, _ = compare_table(sc, formulations)
    except SimulationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    print(table)
    return EXIT_OK


def cmd_sensitivities(scenario: str, full_hp: bool = False) -> int:
    sc = resolve_scenario(scenario)
    sens = sc.ofo.sensitivities
    if full_hp:
        sens = gridsim.compute_sensitivities(sc.grid, sc.devices, sc.u0, approximate_Hp_q_zero=False)
    cols = [f"p_{d}" for d in sc.ofo.device_names] + [f"q_{d}" for d in sc.ofo.device_names]
    print(f"sensitivities of {sc.name} at u0 = {np.array2string(sc.u0, precision=3)}")
    print("\nd p_pcc / d u  [kW/kW, kW/kVAr]" + ("" if full_hp else "  (reactive entries set to zero)"))
    print(format_matrix(["p_pcc"], cols, sens.H_p.reshape(1, -1)))
    print("\nd v / d u  [p.u./kW, p.u./kVAr]")
    print(format_matrix([f"v_bus{b}" for b in sc.grid.buses], cols, sens.H_v))
    return EXIT_OK


def cmd_list() -> int:
    for name in builtin_names():
        print(f"{name:<20}{builtin_scenario(name).description}")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    # exit code 2 is reserved for undeliverable requests
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_FAILURE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ofoflex", description="Closed-loop flexibility disaggregation experiments.")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="simulate one scenario and write its log")
    r.add_argument("--scenario", required=True, help="built-in name or path to a scenario JSON file")
    r.add_argument("--out", help="log file (default: stdout, metrics then go to stderr)")
    r.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help=f"repeatable; keys: {', '.join(OVERRIDE_KEYS)}; G as comma list")
    r.add_argument("--format", choices=("csv", "pretty"), default="csv")

    c = sub.add_parser("compare", help="run both formulations on the same plant")
    c.add_argument("--scenario", required=True)
    c.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    c.add_argument("--formulations", default=",".join(ofo.FORMULATIONS))

    s = sub.add_parser("sensitivities", help="print the linearisation the controller uses")
    s.add_argument("--scenario", required=True)
    s.add_argument("--full-hp", action="store_true", help="keep the reactive entries of d p_pcc / d u")

    sub.add_parser("list-scenarios", help="list built-in scenarios")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return exc.code if isinstance(exc.code, int) else EXIT_FAILURE
    try:
        if args.verb == "run":
            return cmd_run(RunConfig(args.scenario, args.out, parse_overrides(args.override), args.format))
        if args.verb == "compare":
            forms = tuple(f.strip() for f in args.formulations.split(",") if f.strip())
            bad = [f for f in forms if f not in ofo.FORMULATIONS]
            if bad:
                raise ConfigError(f"unknown formulation {bad[0]!r}")
            return cmd_compare(args.scenario, forms, parse_overrides(args.override))
        if args.verb == "sensitivities":
            return cmd_sensitivities(args.scenario, args.full_hp)
        return cmd_list()
    except (ConfigError, ScenarioFileError, ScenarioError, gridsim.GridError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except gridsim.PowerFlowError as exc:
        print(f"error: power flow failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    raise SystemExit(main())
