"""Command-line entry point: ``covsteer {solve,verify,plot,validate}``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Optional

import numpy as np

from .dynamics import assemble_block_operators
from .environment import DecompositionError, ScenarioError, builtin_scenario_path, load_scenario, validate_decomposition
from .policy import Policy, mean_trajectory, state_covariance
from .program import ProgramError, assemble
from .solver import INFEASIBLE, LIMIT_EXCEEDED, OPTIMAL, SolveOptions, solve
from .verify import VerificationReport, verify_policy

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INFEASIBLE = 3
EXIT_LIMIT = 4
EXIT_ERROR = 5
EXIT_VERIFY_FAILED = 6

STATUS_EXIT = {OPTIMAL: EXIT_OK, INFEASIBLE: EXIT_INFEASIBLE, LIMIT_EXCEEDED: EXIT_LIMIT}

EXIT_HELP = """exit codes:
  0  success (optimal solve, passed verification, file written)
  2  bad command-line usage
  3  scenario is infeasible
  4  node or time limit reached (result holds the best incumbent, if any)
  5  error: unreadable input, malformed document, numerical failure
  6  verification found a hard failure
"""

FORMAT = "covsteer-result/1"

log = logging.getLogger("covsteer")


class DocumentError(ValueError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True)


def digest(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def _resolve_scenario(arg: str) -> Path:
    p = Path(arg)
    if p.exists():
        return p
    try:
        return builtin_scenario_path(arg)
    except FileNotFoundError:
        raise ScenarioError(f"no scenario file or built-in scenario named {arg!r}") from None


def analytic_moments(scenario, policy: Policy) -> tuple[np.ndarray, np.ndarray]:
    """Per-step means ``(N+1, nx)`` and covariance blocks ``(N+1, nx, nx)``."""
    ops = assemble_block_operators(scenario.system)
    xbar = mean_trajectory(ops, scenario.boundary.mu0, policy)
    SX = state_covariance(ops, scenario.boundary.Sigma0, policy)
    N, nx = ops.horizon, ops.nx
    means = xbar.reshape(N + 1, nx)
    covs = np.stack([SX[ops.rows(k), ops.rows(k)] for k in range(N + 1)])
    return means, covs


def build_document(scenario, result, options: SolveOptions, mean_only: bool) -> dict:
    doc = {
        "format": FORMAT,
        "scenario": scenario.source,
        "scenario_digest": digest(scenario.source),
        "options": asdict(options),
        "mean_only": bool(mean_only),
        "status": result.status,
        "objective": float(result.objective),
        "bound": float(result.bound),
        "gap": float(result.gap),
        "nodes": int(result.nodes),
        "wall_time": float(result.wall_time),
        "policy": None,
        "schedule": None,
        "region_sequence": [],
        "regions_traversed": [],
        "means": None,
        "covariances": None,
        "verification": None,
    }
    if result.policy is not None:
        means, covs = analytic_moments(scenario, result.policy)
        doc["policy"] = {"v": result.policy.v.tolist(), "K": result.policy.K.tolist()}
        doc["means"] = means.tolist()
        doc["covariances"] = covs.tolist()
    if result.schedule is not None:
        doc["schedule"] = np.asarray(result.schedule, dtype=int).tolist()
        doc["region_sequence"] = result.region_sequence
        doc["regions_traversed"] = [scenario.regions[r].id for r in _dedupe(result.region_sequence)]
    return seal(doc)


def _dedupe(seq):
    out = []
    for s in seq:
        if not out or out[-1] != s:
            out.append(s)
    return out


def seal(doc: dict) -> dict:
    body = {k: v for k, v in doc.items() if k != "digest"}
    doc = dict(body)
    doc["digest"] = digest(body)
    return doc


def write_document(doc: dict, path) -> None:
    Path(path).write_text(json.dumps(doc, indent=1, allow_nan=True) + "\n")


def read_document(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DocumentError(f"cannot read result document {path}: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format") != FORMAT:
        raise DocumentError(f"{path} is not a {FORMAT} document")
    for key in ("scenario", "policy", "status"):
        if key not in doc:
            raise DocumentError(f"result document lacks {key!r}")
    return doc


def document_policy(doc: dict) -> Policy:
    pol = doc.get("policy")
    if not pol:
        raise DocumentError("result document contains no policy")
    try:
        return Policy(np.array(pol["v"], dtype=float), np.array(pol["K"], dtype=float))
    except (KeyError, ValueError, TypeError) as exc:
        raise DocumentError(f"malformed policy: {exc}") from None


# --- subcommands -------------------------------------------------------------


def cmd_solve(args) -> int:
    scenario = load_scenario(_resolve_scenario(args.scenario))
    options = SolveOptions(
        gap_tol=args.gap_tol,
        node_limit=args.node_limit,
        time_limit=args.time_limit,
        search=args.search,
        workers=args.workers,
    )
    assembled = assemble(scenario, mean_only=args.mean_only)
    if args.dump_program:
        assembled.program.dump(args.dump_program)
    result = solve(assembled, options)
    doc = build_document(scenario, result, options, args.mean_only)
    code = STATUS_EXIT.get(result.status, EXIT_ERROR)
    if args.verify and result.policy is not None:
        rep = verify_policy(scenario, result.policy, samples=args.samples, seed=args.seed, schedule=result.schedule)
        doc["verification"] = rep.to_dict()
        doc = seal(doc)
        if code == EXIT_OK and not rep.ok:
            code = EXIT_VERIFY_FAILED
    if args.output:
        write_document(doc, args.output)
    print(f"status: {result.status}")
    if result.policy is not None:
        print(f"objective: {result.objective:.10g}  bound: {result.bound:.10g}  nodes: {result.nodes}")
        print("regions: " + " -> ".join(doc["regions_traversed"]))
    if doc["verification"]:
        print("\n".join(VerificationReport.from_dict(doc["verification"]).summary_lines()))
    return code


def cmd_verify(args) -> int:
    doc = read_document(args.result)
    scenario = load_scenario(doc["scenario"])
    policy = document_policy(doc)
    schedule = np.array(doc["schedule"], dtype=int) if doc.get("schedule") is not None else None
    rep = verify_policy(
        scenario, policy, samples=args.samples, seed=args.seed, schedule=schedule, midpoints=args.midpoints
    )
    if args.output:
        Path(args.output).write_text(json.dumps(rep.to_dict(), indent=1, allow_nan=True) + "\n")
    print("\n".join(rep.summary_lines()))
    return EXIT_OK if rep.ok else EXIT_VERIFY_FAILED


def cmd_plot(args) -> int:
    from .plot import render_svg

    doc = read_document(args.result)
    if not doc.get("means") or not doc.get("covariances"):
        raise DocumentError("result document has no analytic covariance data to plot")
    scenario = load_scenario(doc["scenario"])
    svg = render_svg(scenario, np.array(doc["means"]), np.array(doc["covariances"]), title=scenario.name)
    Path(args.output).write_text(svg)
    return EXIT_OK


def cmd_validate(args) -> int:
    scenario = load_scenario(_resolve_scenario(args.scenario))
    rep = validate_decomposition(
        scenario, samples=args.samples, threshold=args.threshold, seed=args.seed, raise_on_conflict=False
    )
    for r, o, rad in rep.conflicts:
        print(f"conflict: region {r} overlaps obstacle {o} (inscribed radius {rad:.3g})")
    print(f"coverage: {rep.coverage:.4f} over {rep.samples} samples (threshold {rep.threshold})")
    print("decomposition " + ("ok" if rep.ok else "FAILED"))
    if args.output:
        Path(args.output).write_text(json.dumps(rep.to_dict(), indent=1) + "\n")
    return EXIT_OK if rep.ok else EXIT_VERIFY_FAILED


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="random seed for sampling (default 0)")
    common.add_argument("--workers", type=int, default=1, help="parallel node solves (default 1)")
    common.add_argument("--verbose", "-v", action="store_true", help="log solver progress")

    p = argparse.ArgumentParser(
        prog="covsteer",
        description="Chance-constrained covariance steering through convex free-space regions.",
        epilog=EXIT_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
        parents=[common],
    )
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", parents=[common], help="solve a scenario", epilog=EXIT_HELP,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    s.add_argument("scenario", help="scenario JSON path or built-in name")
    s.add_argument("-o", "--output", help="write the result document here")
    s.add_argument("--mean-only", action="store_true", help="baseline with feedback gains fixed to zero")
    s.add_argument("--gap-tol", type=float, default=1e-6)
    s.add_argument("--node-limit", type=int, default=100_000)
    s.add_argument("--time-limit", type=float, default=3600.0, help="seconds")
    s.add_argument("--search", choices=["best", "depth"], default="best")
    s.add_argument("--verify", action="store_true", help="also verify the solution")
    s.add_argument("--samples", type=int, default=100_000, help="Monte Carlo samples for --verify")
    s.add_argument("--dump-program", metavar="PATH", help="write the assembled conic program as JSON")
    s.set_defaults(func=cmd_solve)

    v = sub.add_parser("verify", parents=[common], help="verify a result document", epilog=EXIT_HELP,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    v.add_argument("result")
    v.add_argument("--samples", type=int, default=100_000, help="0 runs closed-form checks only")
    v.add_argument("--midpoints", action="store_true", help="also test segment midpoints (informational)")
    v.add_argument("-o", "--output", help="write the report as JSON")
    v.set_defaults(func=cmd_verify)

    pl = sub.add_parser("plot", parents=[common], help="render a result document to SVG")
    pl.add_argument("result")
    pl.add_argument("output")
    pl.set_defaults(func=cmd_plot)

    va = sub.add_parser("validate", parents=[common], help="check a scenario's region decomposition")
    va.add_argument("scenario")
    va.add_argument("--samples", type=int, default=100_000)
    va.add_argument("--threshold", type=float, default=0.99)
    va.add_argument("-o", "--output")
    va.set_defaults(func=cmd_validate)
    return p


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ScenarioError, DocumentError, DecompositionError, ProgramError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
