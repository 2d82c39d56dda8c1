"""Batch command-line entry point.

Subcommands: solve-exact, solve-empirical, solve-mf, induce, simulate-induced,
verify, report. Numeric tables are CSV (plot-ready), structured objects JSON.
Every artifact carries a metadata header (instance hash, flags, seed, version);
timestamps appear only in the JSON run summary so repeated runs are
byte-identical. Exit codes: 0 success, 1 validation failure, 2 budget
exceeded, 3 property assertion failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, benchmarks, empirical, exact, induction, meanfield, verify
from .model import (
    BudgetExceededError,
    InstanceValidationError,
    MeasureArray,
    PopulationLayout,
    TeamSpec,
    load_instance,
)

FORMAT_VERSION = "1"

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_BUDGET = 2
EXIT_ASSERTION = 3


@dataclass(frozen=True)
class RunConfig:
    """Validated invocation: instance path, subcommand, flags, format version."""

    subcommand: str
    instance: Path | None
    flags: dict
    out: Path
    seed: int | None
    threads: int | None
    format_version: str = FORMAT_VERSION

    def flag_string(self) -> str:
        items = sorted((k, v) for k, v in self.flags.items() if v is not None)
        return " ".join(f"{k}={v}" for k, v in items)


def _fmt(x) -> str:
    if isinstance(x, float):
        return format(x, ".17g")
    return str(x)


def _write_csv(path: Path, metadata: dict, header: list[str], rows) -> None:
    lines = [f"# {k}={v}" for k, v in metadata.items()]
    lines.append(",".join(header))
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _metadata(config: RunConfig, spec: TeamSpec | None) -> dict:
    meta = {
        "format_version": config.format_version,
        "version": __version__,
        "subcommand": config.subcommand,
        "flags": config.flag_string(),
    }
    if spec is not None:
        meta["instance"] = spec.instance_hash()
    if config.seed is not None:
        meta["seed"] = config.seed
    return meta


def _parse_layout(raw: str) -> PopulationLayout:
    try:
        sizes = [int(v) for v in raw.split(",") if v != ""]
    except ValueError:
        raise InstanceValidationError("--layout", "expected comma-separated integers") from None
    return PopulationLayout.from_sizes(sizes)


def _parse_horizon(raw: str) -> int | None:
    if raw == "inf":
        return None
    try:
        T = int(raw)
    except ValueError:
        raise InstanceValidationError("--horizon", 'expected a positive integer or "inf"') from None
    if T < 1:
        raise InstanceValidationError("--horizon", "finite horizon must be >= 1")
    return T


def _load(config: RunConfig) -> TeamSpec:
    if config.instance is None:
        raise InstanceValidationError("instance", "missing instance path")
    if not config.instance.exists():
        raise InstanceValidationError(str(config.instance), "instance file does not exist")
    return load_instance(config.instance)


# ---------------------------------------------------------------------------
# Subcommand implementations (each returns an exit code)
# ---------------------------------------------------------------------------

def _cmd_solve_exact(config: RunConfig) -> int:
    spec = _load(config)
    layout = _parse_layout(config.flags["layout"])
    horizon = _parse_horizon(config.flags["horizon"])
    meta = _metadata(config, spec)
    if horizon is None:
        sol = exact.solve_exact_infinite(spec, layout, config.flags["tol"],
                                         config.flags["budget"])
    else:
        sol = exact.solve_exact_finite(spec, layout, horizon, config.flags["budget"])
    header = ["state_index"] + (
        ["value"] if sol.stationary else [f"value_t{t}" for t in range(len(sol.values))])
    rows = []
    for s in range(sol.values[0].size):
        rows.append([s] + [float(v[s]) for v in sol.values])
    _write_csv(config.out / "exact_values.csv", meta, header, rows)
    _write_json(config.out / "exact_selector.json", {
        "metadata": meta,
        "stationary": sol.stationary,
        "iterations": sol.iterations,
        "selector": [sel.tolist() for sel in sol.selectors],
    })
    return EXIT_OK


def _cmd_solve_empirical(config: RunConfig) -> int:
    spec = _load(config)
    layout = _parse_layout(config.flags["layout"])
    horizon = _parse_horizon(config.flags["horizon"])
    meta = _metadata(config, spec)
    if horizon is None:
        sol = empirical.solve_dp(spec, layout, tol=config.flags["tol"],
                                 budget=config.flags["budget"])
    else:
        sol = empirical.solve_dp(spec, layout, T=horizon, budget=config.flags["budget"])
    header = ["state"] + (
        ["value"] if sol.stationary else [f"value_t{t}" for t in range(len(sol.values))])
    rows = []
    for i, st in enumerate(sol.states):
        rows.append([st.key()] + [float(v[i]) for v in sol.values])
    _write_csv(config.out / "empirical_values.csv", meta, header, rows)
    _write_json(config.out / "empirical_selector.json", {
        "metadata": meta,
        "stationary": sol.stationary,
        "iterations": sol.iterations,
        "selector": [{st.key(): list(map(list, act.joint_counts))
                      for st, act in zip(sol.states, sel)} for sel in sol.selectors],
    })
    status = EXIT_OK
    if config.flags.get("check_equivalence"):
        rep = empirical.check_value_equivalence(
            spec, layout, T=horizon, tol=config.flags["tol"], budget=config.flags["budget"])
        _write_json(config.out / "equivalence.json", {
            "metadata": meta,
            "max_discrepancy": rep.max_discrepancy,
            "tolerance": rep.tolerance,
            "passed": rep.passed,
        })
        if not rep.passed:
            status = EXIT_ASSERTION
    return status


def _solution_payload(sol: meanfield.MeanFieldSolution) -> dict:
    meta = dict(sol.metadata)
    meta.pop("sup_deltas", None)
    return {
        "K": sol.grid.K,
        "L": sol.action_grid.L,
        "stationary": sol.stationary,
        "metadata": meta,
        "values": [v.tolist() for v in sol.values],
        "policy_ids": [ids.tolist() for ids in sol.policy_ids],
    }


def _solution_from_payload(spec: TeamSpec, payload: dict) -> meanfield.MeanFieldSolution:
    grid = meanfield.SimplexGrid(spec, int(payload["K"]))
    agrid = meanfield.ActionGrid(spec, int(payload["L"]))
    values = tuple(np.asarray(v) for v in payload["values"])
    ids = tuple(np.asarray(i, dtype=np.int64) for i in payload["policy_ids"])
    return meanfield.MeanFieldSolution(grid, agrid, values, ids,
                                       bool(payload["stationary"]),
                                       dict(payload.get("metadata", {})))


def _cmd_solve_mf(config: RunConfig) -> int:
    spec = _load(config)
    horizon = _parse_horizon(config.flags["horizon"])
    meta = _metadata(config, spec)
    K, L = config.flags["grid"], config.flags["action_grid"]
    if horizon is None:
        sol = meanfield.value_iteration(spec, K, L, config.flags["tol"])
    else:
        sol = meanfield.finite_horizon_dp(spec, K, L, horizon)
    header = ["grid_point"] + (
        ["value"] if sol.stationary else [f"value_t{t}" for t in range(len(sol.values))])
    rows = []
    for g in range(sol.grid.size):
        rows.append([sol.grid.key(g)] + [float(v[g]) for v in sol.values])
    _write_csv(config.out / "mf_values.csv", meta, header, rows)
    policy_doc = {
        "metadata": meta,
        "solution": _solution_payload(sol),
        "policy": {
            sol.grid.key(g): [k.tolist() for k in sol.kernel_action(g).kernels]
            for g in range(sol.grid.size)
        },
    }
    _write_json(config.out / "mf_policy.json", policy_doc)
    rollout = meanfield.rollout_flow(spec, sol)
    rrows = []
    for t in range(rollout.truncated_horizon):
        rrows.append([t] + list(np.concatenate(rollout.measures[t].per_cluster))
                     + [rollout.stage_costs[t]])
    mu_cols = [f"mu{j}_{x}" for j in range(spec.M) for x in range(spec.state_sizes[j])]
    _write_csv(config.out / "mf_rollout.csv", meta, ["t"] + mu_cols + ["stage_cost"], rrows)
    _write_json(config.out / "mf_summary.json", {
        "metadata": meta,
        "value_at_nu0": sol.value_at(spec.nu0),
        "rollout_cost": rollout.total_cost,
        "iterations": sol.metadata.get("iterations"),
    })
    return EXIT_OK


def _read_solution(config: RunConfig, spec: TeamSpec) -> meanfield.MeanFieldSolution:
    path = Path(config.flags["solution"])
    if not path.exists():
        raise InstanceValidationError(str(path), "solution file does not exist")
    payload = json.loads(path.read_text())
    if "solution" not in payload:
        raise InstanceValidationError(str(path), "not a mean-field policy document")
    return _solution_from_payload(spec, payload["solution"])


def _cmd_induce(config: RunConfig) -> int:
    spec = _load(config)
    sol = _read_solution(config, spec)
    meta = _metadata(config, spec)
    policy = induction.induce_policy(sol, spec)
    _write_json(config.out / "induced_policy.json", {
        "metadata": meta,
        "stationary_tail": policy.stationary_tail,
        "kernels": [[k.tolist() for k in step] for step in policy.kernels],
        "flow": [m.tolist() for m in policy.flow],
    })
    mu_cols = [f"mu{j}_{x}" for j in range(spec.M) for x in range(spec.state_sizes[j])]
    rows = [[t] + list(np.concatenate(policy.flow[t].per_cluster))
            for t in range(len(policy.flow))]
    _write_csv(config.out / "flow.csv", meta, ["t"] + mu_cols, rows)
    return EXIT_OK


def _read_policy(config: RunConfig) -> induction.DecentralizedPolicy:
    path = Path(config.flags["policy"])
    if not path.exists():
        raise InstanceValidationError(str(path), "policy file does not exist")
    payload = json.loads(path.read_text())
    kernels = tuple(tuple(np.asarray(k) for k in step) for step in payload["kernels"])
    flow = tuple(MeasureArray.from_lists(m) for m in payload["flow"])
    return induction.DecentralizedPolicy(kernels, flow, bool(payload["stationary_tail"]))


def _cmd_simulate_induced(config: RunConfig) -> int:
    spec = _load(config)
    policy = _read_policy(config)
    meta = _metadata(config, spec)
    Ns = [int(v) for v in config.flags["n_sweep"].split(",")]
    target = induction.flow_cost(spec, policy)
    rows = []
    for i, N in enumerate(Ns):
        layout = induction.split_population(spec.M, N)
        sim = induction.simulate_truncated(spec, layout, policy, policy.horizon,
                                           config.flags["rollouts"], config.seed + i)
        rows.append([N, sim.mean, sim.stderr, abs(sim.mean - target)])
    _write_csv(config.out / "induced_costs.csv", meta,
               ["N", "mc_cost", "stderr", "gap_to_mean_field"], rows)
    _write_json(config.out / "induced_summary.json",
                {"metadata": meta, "mean_field_cost": target})
    return EXIT_OK


def _cmd_verify(config: RunConfig) -> int:
    suite = config.flags["suite"]
    meta_base = {"format_version": config.format_version, "version": __version__,
                 "subcommand": "verify", "flags": config.flag_string(),
                 "seed": config.seed}
    summary = {"suites": {}, "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S")}
    failed = False
    spec = None
    if suite in ("chaos", "values", "all"):
        spec = _load(config)
        meta_base["instance"] = spec.instance_hash()

    if suite in ("sampling-bound", "all"):
        sweep = verify.replacement_bound_sweep(config.seed, n_laws=config.flags["laws"])
        rows = [[",".join(map(str, c.cluster_sizes)), ",".join(map(str, c.symbol_sizes)),
                 ",".join(map(str, c.k)), c.tv, c.bound, c.exact_bound,
                 int(c.closed_form_valid), int(c.passed)] for c in sweep.checks]
        _write_csv(config.out / "sampling_bound.csv", meta_base,
                   ["sizes", "symbols", "k", "tv", "closed_form_bound", "exact_bound",
                    "closed_form_valid", "passed"], rows)
        summary["suites"]["sampling-bound"] = {
            "passed": sweep.all_passed and sweep.unit_k_exact,
            "checks": len(sweep.checks),
            "unit_k_exact": sweep.unit_k_exact,
            "max_exact_excess": sweep.max_exact_excess,
            "max_closed_excess": sweep.max_closed_excess,
        }
        failed |= not summary["suites"]["sampling-bound"]["passed"]

    if suite in ("chaos", "all"):
        sol = meanfield.value_iteration(spec, config.flags["grid"],
                                        config.flags["action_grid"], config.flags["tol"])
        policy = induction.induce_policy(sol, spec)
        Ns = [int(v) for v in config.flags["n_sweep"].split(",")]
        report = verify.chaos_experiment(spec, policy, Ns, config.flags["steps"],
                                         config.flags["rollouts"], config.seed)
        rows = [[r.N, r.mean_gap, r.stderr] for r in report.rows]
        _write_csv(config.out / "chaos.csv", meta_base, ["N", "mean_tv_gap", "stderr"], rows)
        summary["suites"]["chaos"] = {
            "passed": report.nonincreasing_within_se,
            "strictly_decreasing": report.strictly_decreasing,
            "final_gap": report.final_gap,
        }
        failed |= not report.nonincreasing_within_se

    if suite in ("values", "all"):
        sol = meanfield.value_iteration(spec, config.flags["grid"],
                                        config.flags["action_grid"], config.flags["tol"])
        Ns = [int(v) for v in config.flags["n_sweep"].split(",")]
        report = verify.value_convergence_experiment(spec, sol, Ns, tol=config.flags["tol"])
        rows = [[r.N, r.optimal, r.truncated, r.mean_field, r.left_margin]
                for r in report.rows]
        _write_csv(config.out / "values.csv", meta_base,
                   ["N", "exact_optimum", "truncated_cost", "mean_field_cost",
                    "optimality_gap"], rows)
        summary["suites"]["values"] = {
            "passed": report.sandwich_ok,
            "gap_shrinks": report.gap_shrinks,
        }
        failed |= not report.sandwich_ok

    _write_json(config.out / "verify_summary.json", {"metadata": meta_base, **summary})
    return EXIT_ASSERTION if failed else EXIT_OK


def _cmd_report(config: RunConfig) -> int:
    out = config.out
    entries = []
    for path in sorted(out.rglob("*")):
        if path.suffix in (".csv", ".json") and path.name != "report.json":
            digest = hashlib.sha256(path.read_bytes()).hexdigest()
            entries.append({"file": str(path.relative_to(out)), "sha256": digest})
    _write_json(out / "report.json", {
        "format_version": config.format_version,
        "version": __version__,
        "artifacts": entries,
    })
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clusterfield",
        description="Solvers and verification experiments for cluster-symmetric teams.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, instance=True):
        if instance:
            p.add_argument("instance", type=Path, help="JSON problem instance")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--threads", type=int, default=None,
                       help="worker hint recorded in metadata (orchestration is sequential)")

    p = sub.add_parser("solve-exact", help="joint dynamic programming oracle")
    common(p)
    p.add_argument("--layout", required=True, help="cluster sizes N1,N2,...")
    p.add_argument("--horizon", default="inf")
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--budget", type=int, default=exact.DEFAULT_BUDGET)

    p = sub.add_parser("solve-empirical", help="count-state MDP solver")
    common(p)
    p.add_argument("--layout", required=True)
    p.add_argument("--horizon", default="inf")
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--budget", type=int, default=exact.DEFAULT_BUDGET)
    p.add_argument("--check-equivalence", action="store_true", dest="check_equivalence",
                   help="also compare against the joint oracle on every joint state")

    p = sub.add_parser("solve-mf", help="mean-field value iteration on the simplex grid")
    common(p)
    p.add_argument("--grid", type=int, required=True, help="state simplex resolution K")
    p.add_argument("--action-grid", type=int, required=True, dest="action_grid",
                   help="decision-kernel row resolution L")
    p.add_argument("--tol", type=float, default=1e-7)
    p.add_argument("--horizon", default="inf")

    p = sub.add_parser("induce", help="induce the decentralized policy along the flow")
    common(p)
    p.add_argument("--solution", required=True, help="mf_policy.json from solve-mf")

    p = sub.add_parser("simulate-induced", help="Monte Carlo of the truncated policy")
    common(p)
    p.add_argument("--policy", required=True, help="induced_policy.json from induce")
    p.add_argument("--N-sweep", required=True, dest="n_sweep", help="population sizes")
    p.add_argument("--rollouts", type=int, default=2000)
    p.add_argument("--seed", type=int, required=True)

    p = sub.add_parser("verify", help="property experiment suites")
    common(p, instance=False)
    p.add_argument("instance", nargs="?", type=Path, default=None,
                   help="JSON instance (required for chaos/values suites)")
    p.add_argument("--suite", required=True,
                   choices=["sampling-bound", "chaos", "values", "all"])
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--laws", type=int, default=500)
    p.add_argument("--grid", type=int, default=20)
    p.add_argument("--action-grid", type=int, default=10, dest="action_grid")
    p.add_argument("--tol", type=float, default=1e-7)
    p.add_argument("--N-sweep", default="64,256,1024", dest="n_sweep")
    p.add_argument("--steps", type=int, default=25)
    p.add_argument("--rollouts", type=int, default=256)

    p = sub.add_parser("report", help="bundle artifacts in an output directory")
    common(p, instance=False)
    return parser


_HANDLERS = {
    "solve-exact": _cmd_solve_exact,
    "solve-empirical": _cmd_solve_empirical,
    "solve-mf": _cmd_solve_mf,
    "induce": _cmd_induce,
    "simulate-induced": _cmd_simulate_induced,
    "verify": _cmd_verify,
    "report": _cmd_report,
}


def run(config: RunConfig) -> int:
    """Execute a validated configuration; artifacts land in config.out."""
    config.out.mkdir(parents=True, exist_ok=True)
    return _HANDLERS[config.subcommand](config)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    flags = {k: v for k, v in vars(args).items()
             if k not in ("command", "instance", "out", "seed", "threads")}
    config = RunConfig(
        subcommand=args.command,
        instance=getattr(args, "instance", None),
        flags=flags,
        out=args.out,
        seed=getattr(args, "seed", None),
        threads=args.threads,
    )
    try:
        return run(config)
    except InstanceValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except BudgetExceededError as exc:
        print(f"budget exceeded: {exc}", file=sys.stderr)
        return EXIT_BUDGET


if __name__ == "__main__":
    sys.exit(main())
