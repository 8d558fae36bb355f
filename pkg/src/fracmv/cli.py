"""Command-line front end.

Four subcommands cover the pipeline: ``simulate`` runs the mean-field
fixed point and writes the particle ensemble, ``skeleton`` solves the
zero-noise and (optionally) controlled deterministic equations,
``rate`` estimates the minimal steering cost to a target, and
``verify`` runs the property suites.  Every run directory gets a
manifest carrying the seed and the config hash; nothing in the outputs
depends on wall time or worker count, so reruns are byte-identical.

Exit codes: 0 success, 2 validation problems, 3 numerical failures
(blow-up, non-contraction), 4 verification-suite failures.  Flags may
also be supplied through ``FRACMV_``-prefixed environment variables
(``FRACMV_CONFIG``, ``FRACMV_OUT``, ``FRACMV_SEED``, ``FRACMV_SUITE``,
``FRACMV_CONTROL``, ``FRACMV_TARGET``, ``FRACMV_WORKERS``); explicit
flags win.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config
from .dynamics import (
    energy_residual,
    load_control,
    load_trajectory,
    save_control,
    save_trajectory,
    solve_controlled,
    solve_deterministic,
    sup_distance,
)
from .errors import BlowUpError, FixedPointDivergenceError, ValidationError
from .grid import GridFunction, l2_norm, load_grid_function, tail_mass
from .measure import save_measure
from .mckean_vlasov import picard_solve
from .rate_function import RateProblem, control_cost, estimate_rate
from .verify import SUITES, format_report, run_suites

__all__ = ["cmd_simulate", "cmd_skeleton", "cmd_rate", "cmd_verify", "main"]


def _manifest(cfg: RunConfig, command: str, extra: dict) -> dict:
    return {
        "command": command,
        "seed": cfg.seed,
        "config_hash": cfg.config_hash(),
        "grid": {
            "dim": cfg.grid.dim,
            "half_width": cfg.grid.half_width,
            "points_per_dim": cfg.grid.points_per_dim,
        },
        "time": {"horizon": cfg.tgrid.horizon, "steps": cfg.tgrid.steps},
        "n_modes": cfg.coeffs.sigma.n_modes,
        **extra,
    }


def _write_manifest(out: Path, doc: dict) -> None:
    with open(out / "manifest.json", "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_csv(path: Path, header: list[str], rows: list[tuple]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def cmd_simulate(cfg: RunConfig, out: str | Path) -> Path:
    """Solve the mean-field fixed point and persist the ensemble."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    result = picard_solve(cfg.problem(), cfg.picard_config())
    rep = result.report

    traj_dir = out / "trajectories"
    traj_dir.mkdir(exist_ok=True)
    flow = result.flow
    ext = ".traj" if cfg.output_format == "blob" else ""
    for i in range(flow.n_particles):
        save_trajectory(
            result.particle_trajectory(i),
            traj_dir / f"particle_{i:03d}{ext}",
            fmt=cfg.output_format,
        )
    save_measure(flow.measure(flow.n_times - 1), out / "final_measure")

    ratios = list(rep.ratios)
    _write_csv(
        out / "picard_report.csv",
        ["iteration", "distance", "ratio"],
        [
            (m + 1, f"{d:.17g}", f"{ratios[m - 1]:.17g}" if 1 <= m <= len(ratios) else "")
            for m, d in enumerate(rep.distances)
        ],
    )

    w = cfg.grid.cell_volume
    flat = flow.states.reshape(flow.n_times, flow.n_particles, -1)
    m2 = w * np.mean(np.sum(flat**2, axis=2), axis=1)
    _write_csv(
        out / "flow_summary.csv",
        ["node", "time", "mean_second_moment"],
        [(s, f"{flow.times[s]:.17g}", f"{m2[s]:.17g}") for s in range(flow.n_times)],
    )

    margin = cfg.grid.half_width / 2.0
    delta = float(cfg.raw["verify"]["domain_margin_delta"])
    worst = max(
        tail_mass(GridFunction(cfg.grid, vals), margin)
        for snap in flow.states
        for vals in snap
    )
    if worst >= delta:
        warnings.warn(
            f"mass {worst:.3e} outside |x| >= {margin:g} exceeds {delta:g}; "
            "the domain may be too small for this run",
            stacklevel=2,
        )
    _write_manifest(
        out,
        _manifest(
            cfg,
            "simulate",
            {
                "n_particles": flow.n_particles,
                "epsilon": cfg.epsilon,
                "converged": rep.converged,
                "iterations": rep.iterations,
                "lambda_weight": rep.lambda_weight,
                "domain_margin": {"radius": margin, "worst_tail": worst, "delta": delta},
            },
        ),
    )
    return out


def cmd_skeleton(cfg: RunConfig, out: str | Path, control_path: str | Path | None = None) -> Path:
    """Solve the zero-noise path, plus a controlled run when given one."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    base = solve_deterministic(cfg.u0, cfg.coeffs, cfg.tgrid)
    ext = ".traj" if cfg.output_format == "blob" else ""
    save_trajectory(base, out / f"skeleton{ext}", fmt=cfg.output_format)

    def residual_rows(traj, control=None, base_traj=None):
        res = energy_residual(traj, cfg.coeffs, control=control, base=base_traj)
        return [
            (s, f"{cfg.tgrid.nodes[s]:.17g}", f"{res[s]:.17g}")
            for s in range(res.size)
        ]

    _write_csv(
        out / "energy_residual.csv",
        ["node", "time", "residual"],
        residual_rows(base),
    )

    extra: dict = {"control": None}
    if control_path is not None:
        v = load_control(control_path)
        if v.steps != cfg.tgrid.steps or v.n_modes != cfg.coeffs.sigma.n_modes:
            raise ValidationError(
                f"control file has shape {v.values.shape}, expected "
                f"({cfg.tgrid.steps}, {cfg.coeffs.sigma.n_modes})"
            )
        controlled = solve_controlled(cfg.u0, v, base, cfg.coeffs, cfg.tgrid)
        save_trajectory(controlled, out / f"controlled{ext}", fmt=cfg.output_format)
        _write_csv(
            out / "controlled_energy_residual.csv",
            ["node", "time", "residual"],
            residual_rows(controlled, control=v, base_traj=base),
        )
        dist = sup_distance(controlled, base)
        extra["control"] = {
            "path": str(control_path),
            "cost": control_cost(v),
            "sup_distance_to_skeleton": dist,
        }
        if float(np.max(np.abs(v.values))) == 0.0:
            extra["control"]["zero_control_check"] = bool(dist <= 1e-12)
    _write_manifest(out, _manifest(cfg, "skeleton", extra))
    return out


def _parse_target(spec: str, cfg: RunConfig, base):
    if spec == "deterministic":
        return base, None
    kind, sep, path = spec.partition(":")
    if not sep or not path:
        raise ValidationError(
            f"target spec must be 'deterministic', 'manufactured:PATH', "
            f"'trajectory:PATH', or 'terminal:PATH', got {spec!r}"
        )
    if kind == "manufactured":
        vbar = load_control(path)
        if vbar.steps != cfg.tgrid.steps or vbar.n_modes != cfg.coeffs.sigma.n_modes:
            raise ValidationError(
                f"manufactured control has shape {vbar.values.shape}, expected "
                f"({cfg.tgrid.steps}, {cfg.coeffs.sigma.n_modes})"
            )
        return solve_controlled(cfg.u0, vbar, base, cfg.coeffs, cfg.tgrid), vbar
    if kind == "trajectory":
        return load_trajectory(path), None
    if kind == "terminal":
        return load_grid_function(path), None
    raise ValidationError(
        f"target spec must be 'deterministic', 'manufactured:PATH', "
        f"'trajectory:PATH', or 'terminal:PATH', got {spec!r}"
    )


def cmd_rate(cfg: RunConfig, out: str | Path, target_spec: str) -> Path:
    """Estimate the minimal control cost to reach a target."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    base = solve_deterministic(cfg.u0, cfg.coeffs, cfg.tgrid)
    target, vbar = _parse_target(target_spec, cfg, base)
    problem = RateProblem(
        target,
        eta_ladder=cfg.eta_ladder(),
        max_stage_iters=int(cfg.raw["rate"]["max_stage_iters"]),
        gap_tol=float(cfg.raw["rate"]["gap_tol"]),
    )
    est = estimate_rate(
        problem, cfg.u0, cfg.coeffs, cfg.tgrid, base=base, workers=cfg.workers
    )
    _write_csv(
        out / "rate_estimate.csv",
        ["value", "gap", "gap_rel", "converged", "n_evaluations"],
        [(
            f"{est.value:.17g}",
            f"{est.gap:.17g}",
            f"{est.gap_rel:.17g}",
            est.converged,
            est.n_evaluations,
        )],
    )
    _write_csv(
        out / "rate_stages.csv",
        ["eta", "value", "gap"],
        [(f"{e:.17g}", f"{v:.17g}", f"{g:.17g}") for e, v, g in est.stages],
    )
    save_control(est.v_star, out / "optimal_control.csv")
    extra = {
        "target": target_spec,
        "value": est.value,
        "gap_rel": est.gap_rel,
        "converged": est.converged,
    }
    if vbar is not None:
        extra["reference_cost"] = control_cost(vbar)
    _write_manifest(out, _manifest(cfg, "rate", extra))
    return out


def cmd_verify(cfg: RunConfig, out: str | Path, suites: list[str] | None = None) -> int:
    """Run property suites; returns 0 when everything passed, 4 otherwise."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    results = run_suites(cfg, suites)
    print(format_report(results))
    _write_csv(
        out / "verify_report.csv",
        ["criterion", "name", "passed", "measured", "threshold", "seconds"],
        [
            (r.criterion, r.name, r.passed, r.measured, r.threshold, f"{r.seconds:.3f}")
            for r in results
        ],
    )
    _write_manifest(
        out,
        _manifest(
            cfg,
            "verify",
            {
                "suites": suites or list(SUITES),
                "passed": sum(1 for r in results if r.passed),
                "failed": sum(1 for r in results if not r.passed),
            },
        ),
    )
    return 0 if all(r.passed for r in results) else 4


def _env(name: str) -> str | None:
    return os.environ.get(f"FRACMV_{name}")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fracmv",
        description="Mean-field fractional reaction-diffusion laboratory",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("simulate", "run the mean-field fixed point and write the ensemble"),
        ("skeleton", "solve the zero-noise / controlled deterministic paths"),
        ("rate", "estimate the minimal steering cost to a target"),
        ("verify", "run property suites and report pass/fail"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="YAML config (default: built-in canonical)")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--workers", type=int, default=None, help="override worker count")
        if name == "skeleton":
            p.add_argument("--control", default=None, help="control CSV to drive the dynamics")
        if name == "rate":
            p.add_argument(
                "--target",
                default=None,
                help="deterministic | manufactured:PATH | trajectory:PATH | terminal:PATH",
            )
        if name == "verify":
            p.add_argument(
                "--suite",
                default=None,
                help=f"comma-separated suite names (default all): {', '.join(SUITES)}",
            )
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config or _env("CONFIG"))
        seed = args.seed if args.seed is not None else _env("SEED")
        if seed is not None:
            cfg = cfg.with_overrides(seed=int(seed))
        workers = args.workers if args.workers is not None else _env("WORKERS")
        if workers is not None:
            cfg = cfg.with_overrides(workers=int(workers))
        out = args.out or _env("OUT") or f"runs/{args.command}-{cfg.seed}"

        if args.command == "simulate":
            cmd_simulate(cfg, out)
            print(f"wrote {out}")
            return 0
        if args.command == "skeleton":
            control = args.control or _env("CONTROL")
            cmd_skeleton(cfg, out, control)
            print(f"wrote {out}")
            return 0
        if args.command == "rate":
            target = args.target or _env("TARGET")
            if target is None:
                raise ValidationError("rate needs --target (or FRACMV_TARGET)")
            cmd_rate(cfg, out, target)
            print(f"wrote {out}")
            return 0
        suites = args.suite or _env("SUITE")
        names = [s.strip() for s in suites.split(",") if s.strip()] if suites else None
        return cmd_verify(cfg, out, names)
    except ValidationError as exc:
        print(f"error[validation] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except (BlowUpError, FixedPointDivergenceError) as exc:
        print(f"error[numerical] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
