"""Measure-freezing fixed-point solver for the mean-field dynamics.

The mean-field equation couples each path to the law of the solution.
Numerically the law is an ``N``-particle empirical flow and the
coupling is resolved by iterating the freezing map: given a candidate
flow, solve ``N`` frozen-measure paths driven by per-particle noise,
and return the empirical flow of the solved ensemble.  Under the
weighted sup metric ``d(., .; lam)`` the map contracts once ``lam`` is
large enough; ``auto_lambda`` measures the contraction ratio on probe
flows and picks the weight empirically.

Noise is keyed by ``(master seed, particle)`` only, never by the
iteration count, so successive applications of the freezing map see
common random numbers and the iteration is a deterministic map between
flows.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from itertools import combinations

import numpy as np

from .coefficients import CoefficientSet
from .dynamics import (
    NoisePath,
    TimeGrid,
    Trajectory,
    _run_steps,
    _stats_from_measure,
    solve_deterministic,
)
from .errors import (
    BlowUpError,
    FixedPointDivergenceError,
    GridMismatchError,
    ValidationError,
)
from .grid import GridFunction, SpatialGrid, l2_norm
from .measure import EmpiricalMeasure, MeasureFlow, flow_distance

__all__ = [
    "MeanFieldProblem",
    "PicardConfig",
    "PicardReport",
    "PicardResult",
    "apply_phi",
    "auto_lambda",
    "picard_solve",
    "SmallNoiseSweep",
    "small_noise_sweep",
]

_LAMBDA_GRID = (0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0)


@dataclass(frozen=True, eq=False)
class MeanFieldProblem:
    """Bundle of everything that defines one mean-field solve.

    ``u0`` is the deterministic initial state; an optional
    ``initial_states`` array of shape ``(N, *grid.shape)`` replaces the
    all-atoms-at-``u0`` initial ensemble with a sampled one (``u0``
    then still serves as the reference state for deviation reports).
    """

    grid: SpatialGrid
    tgrid: TimeGrid
    coeffs: CoefficientSet
    u0: GridFunction
    epsilon: float
    master_seed: int
    workers: int = 1
    initial_states: np.ndarray | None = None

    def __post_init__(self):
        if self.u0.grid != self.grid or self.coeffs.sigma.grid != self.grid:
            raise GridMismatchError("problem components live on different grids")
        if not (0.0 <= float(self.epsilon) < 1.0):
            raise ValidationError(
                f"epsilon must lie in [0, 1), got {self.epsilon!r}"
            )
        if not (isinstance(self.workers, (int, np.integer)) and self.workers >= 1):
            raise ValidationError(f"workers must be an integer >= 1, got {self.workers!r}")
        if self.initial_states is not None:
            arr = np.asarray(self.initial_states, dtype=float)
            if arr.ndim != 1 + self.grid.dim or arr.shape[1:] != self.grid.shape:
                raise ValidationError(
                    f"initial_states must have shape (N, {self.grid.shape}), got {arr.shape}"
                )
            if not np.all(np.isfinite(arr)):
                raise ValidationError("initial_states contains non-finite entries")
            object.__setattr__(self, "initial_states", arr)


@dataclass(frozen=True)
class PicardConfig:
    n_particles: int = 64
    tol: float = 1e-6
    max_iters: int = 20
    lambda_weight: float | str = "auto"

    def __post_init__(self):
        if not (isinstance(self.n_particles, (int, np.integer)) and self.n_particles >= 1):
            raise ValidationError(
                f"picard.n_particles must be an integer >= 1, got {self.n_particles!r}"
            )
        if not (float(self.tol) > 0.0):
            raise ValidationError(f"picard.tol must be positive, got {self.tol!r}")
        if not (isinstance(self.max_iters, (int, np.integer)) and self.max_iters >= 1):
            raise ValidationError(
                f"picard.max_iters must be an integer >= 1, got {self.max_iters!r}"
            )
        lw = self.lambda_weight
        if isinstance(lw, str):
            if lw != "auto":
                raise ValidationError(
                    f"picard.lambda_weight must be a number >= 0 or 'auto', got {lw!r}"
                )
        elif not (float(lw) >= 0.0):
            raise ValidationError(
                f"picard.lambda_weight must be >= 0, got {lw!r}"
            )


@dataclass(frozen=True)
class PicardReport:
    """Iteration log of one fixed-point run.

    ``distances[m]`` is the weighted flow distance between iterates
    ``m+1`` and ``m``; ``ratios`` are successive quotients where the
    previous distance is resolvable above round-off.
    """

    iterations: int
    distances: tuple[float, ...]
    ratios: tuple[float, ...]
    converged: bool
    lambda_weight: float
    threshold: float
    initial_scale: float
    auto_curve: tuple[tuple[float, float], ...] | None = None


@dataclass(frozen=True)
class PicardResult:
    flow: MeasureFlow
    report: PicardReport

    def particle_trajectory(self, i: int) -> Trajectory:
        return Trajectory(self.flow.grid, self.flow.times, self.flow.states[:, i])


def _initial_states(problem: MeanFieldProblem, n_particles: int) -> np.ndarray:
    if problem.initial_states is not None:
        if problem.initial_states.shape[0] != n_particles:
            raise ValidationError(
                f"initial_states holds {problem.initial_states.shape[0]} particles "
                f"but the run asks for {n_particles}"
            )
        return problem.initial_states
    return np.broadcast_to(
        problem.u0.values, (n_particles,) + problem.grid.shape
    ).copy()


def _initial_flow(problem: MeanFieldProblem, n_particles: int) -> MeasureFlow:
    """Constant-in-time law of the initial ensemble."""
    mu0 = EmpiricalMeasure(problem.grid, _initial_states(problem, n_particles))
    return MeasureFlow.constant(mu0, problem.tgrid.nodes)


def apply_phi(problem: MeanFieldProblem, flow: MeasureFlow) -> MeasureFlow:
    """One application of the freezing map.

    Solves one frozen path per particle of ``flow`` (common random
    numbers across applications) and returns the empirical flow of the
    solved ensemble.  The result is a deterministic function of the
    problem and the input flow, independent of ``workers``.
    """
    if flow.grid != problem.grid:
        raise GridMismatchError("flow lives on a different grid than the problem")
    nodes = problem.tgrid.nodes
    if flow.n_times != nodes.size or not np.array_equal(flow.times, nodes):
        raise GridMismatchError("flow is not sampled on the problem's time nodes")
    coeffs, tgrid, eps = problem.coeffs, problem.tgrid, float(problem.epsilon)
    h_cap = coeffs.f.h_cap
    stats = [_stats_from_measure(flow.measure(s), h_cap) for s in range(tgrid.steps)]
    K = coeffs.sigma.n_modes
    starts = _initial_states(problem, flow.n_particles)

    def solve_one(i: int) -> np.ndarray:
        noise = (
            NoisePath.generate(tgrid, K, problem.master_seed, i) if eps > 0.0 else None
        )
        try:
            return _run_steps(
                problem.grid, coeffs, starts[i], tgrid,
                lambda s, _v: stats[s], eps, None, noise,
            )
        except BlowUpError as exc:
            raise BlowUpError(exc.step, exc.time, f"particle {i}: {exc}") from exc

    n = flow.n_particles
    if problem.workers > 1:
        with ThreadPoolExecutor(max_workers=problem.workers) as pool:
            paths = list(pool.map(solve_one, range(n)))
    else:
        paths = [solve_one(i) for i in range(n)]
    return MeasureFlow(problem.grid, nodes, np.stack(paths, axis=1))


def auto_lambda(
    problem: MeanFieldProblem,
    probe_flows: list[MeasureFlow],
    images: list[MeasureFlow | None] | None = None,
    lambda_grid: tuple[float, ...] = _LAMBDA_GRID,
    target_ratio: float = 0.5,
) -> tuple[float, tuple[tuple[float, float], ...]]:
    """Pick the metric weight empirically from probe contraction ratios.

    For each candidate weight the worst ratio
    ``d(phi(a), phi(b); lam) / d(a, b; lam)`` over probe pairs is
    measured; the smallest weight pushing it to ``target_ratio`` or
    below is returned doubled, as a safety margin, together with the
    full ``(lam, worst ratio)`` curve.
    """
    if len(probe_flows) < 2:
        raise ValidationError("auto_lambda needs at least two probe flows")
    if images is None:
        images = [None] * len(probe_flows)
    if len(images) != len(probe_flows):
        raise ValidationError("images must align with probe_flows")
    images = [
        img if img is not None else apply_phi(problem, probe)
        for probe, img in zip(probe_flows, images)
    ]
    tiny = 1e3 * np.finfo(float).eps * (1.0 + l2_norm(problem.u0))
    curve = []
    chosen = None
    for lam in lambda_grid:
        worst = 0.0
        resolved = False
        for a, b in combinations(range(len(probe_flows)), 2):
            denom = flow_distance(probe_flows[a], probe_flows[b], lam)
            if denom <= tiny:
                continue
            resolved = True
            num = flow_distance(images[a], images[b], lam)
            worst = max(worst, num / denom)
        if not resolved:
            raise ValidationError("probe flows are indistinguishable; cannot calibrate")
        curve.append((float(lam), float(worst)))
        if chosen is None and worst <= target_ratio:
            chosen = float(lam)
    if chosen is None:
        raise FixedPointDivergenceError(
            "no metric weight on the grid reaches the target contraction ratio; "
            "measured curve: " + ", ".join(f"(lam={l:g}, r={r:.3g})" for l, r in curve)
        )
    return 2.0 * chosen, tuple(curve)


def picard_solve(problem: MeanFieldProblem, cfg: PicardConfig = PicardConfig()) -> PicardResult:
    """Iterate the freezing map to its fixed point.

    Stops when the weighted distance between successive flows drops
    below ``tol * (1 + initial ensemble scale)``.  Raises a divergence
    error (with the report attached) if the budget is exhausted or the
    measured ratios sit at or above 1 on two consecutive steps.
    """
    flow0 = _initial_flow(problem, cfg.n_particles)
    initial_scale = l2_norm(problem.u0)
    threshold = cfg.tol * (1.0 + initial_scale)
    tiny = 10.0 * np.finfo(float).eps * (1.0 + initial_scale)

    auto_curve = None
    flows: list[MeasureFlow] = [flow0]
    if cfg.lambda_weight == "auto":
        image0 = apply_phi(problem, flow0)
        image1 = apply_phi(problem, image0)
        scaled = MeasureFlow(flow0.grid, flow0.times, 1.25 * flow0.states)
        image_s = apply_phi(problem, scaled)
        lam, auto_curve = auto_lambda(
            problem, [flow0, image0, scaled], images=[image0, image1, image_s]
        )
        flows.extend([image0, image1])
    else:
        lam = float(cfg.lambda_weight)

    distances: list[float] = []
    for prev, cur in zip(flows, flows[1:]):
        distances.append(flow_distance(prev, cur, lam))

    def ratios_of(ds: list[float]) -> list[float]:
        return [b / a for a, b in zip(ds, ds[1:]) if a > tiny]

    converged = any(d <= threshold for d in distances)
    while not converged and len(flows) - 1 < cfg.max_iters:
        nxt = apply_phi(problem, flows[-1])
        distances.append(flow_distance(flows[-1], nxt, lam))
        flows.append(nxt)
        if distances[-1] <= threshold:
            converged = True
            break
        rs = ratios_of(distances)
        if len(rs) >= 2 and rs[-1] >= 1.0 and rs[-2] >= 1.0:
            report = PicardReport(
                iterations=len(flows) - 1,
                distances=tuple(distances),
                ratios=tuple(rs),
                converged=False,
                lambda_weight=lam,
                threshold=threshold,
                initial_scale=initial_scale,
                auto_curve=auto_curve,
            )
            raise FixedPointDivergenceError(
                "freezing map is not contracting (two successive ratios >= 1)", report
            )

    report = PicardReport(
        iterations=len(flows) - 1,
        distances=tuple(distances),
        ratios=tuple(ratios_of(distances)),
        converged=converged,
        lambda_weight=lam,
        threshold=threshold,
        initial_scale=initial_scale,
        auto_curve=auto_curve,
    )
    if not converged:
        raise FixedPointDivergenceError(
            f"no convergence within {cfg.max_iters} iterations "
            f"(last distance {distances[-1]:.3e} vs threshold {threshold:.3e})",
            report,
        )
    return PicardResult(flow=flows[-1], report=report)


@dataclass(frozen=True)
class SmallNoiseSweep:
    """Mean squared sup deviation from the zero-noise path, per intensity.

    Rows are ``(epsilon, estimate, stderr)`` with the standard error
    taken over replicas; the slope is the log-log regression of the
    estimate against the positive intensities.
    """

    rows: tuple[tuple[float, float, float], ...]
    slope: float
    base_norm_sq: float


def small_noise_sweep(
    problem: MeanFieldProblem,
    eps_list: list[float],
    n_replicas: int,
    cfg: PicardConfig | None = None,
) -> SmallNoiseSweep:
    """Estimate ``E sup_t ||u_eps - u_0||^2`` across noise intensities.

    Each intensity gets its own fixed-point solve with ``n_replicas``
    particles sharing the master seed, so the estimates use common
    random numbers across the sweep.  The zero intensity decouples:
    the law rides the deterministic path exactly, so its row is 0.
    """
    base_cfg = cfg or PicardConfig()
    cfg = replace(base_cfg, n_particles=int(n_replicas))
    base = solve_deterministic(problem.u0, problem.coeffs, problem.tgrid)
    w = problem.grid.cell_volume
    rows = []
    for eps in eps_list:
        e = float(eps)
        if e == 0.0:
            rows.append((0.0, 0.0, 0.0))
            continue
        sub = replace(problem, epsilon=e)
        res = picard_solve(sub, cfg)
        diff = res.flow.states - base.values[:, None]
        flat = diff.reshape(diff.shape[0], diff.shape[1], -1)
        sup_sq = np.max(w * np.sum(flat**2, axis=2), axis=0)
        stderr = (
            float(np.std(sup_sq, ddof=1) / math.sqrt(sup_sq.size))
            if sup_sq.size > 1
            else 0.0
        )
        rows.append((e, float(np.mean(sup_sq)), stderr))
    pos = [(e, v) for e, v, _ in rows if e > 0.0 and v > 0.0]
    if len(pos) >= 2:
        xs = np.log([e for e, _ in pos])
        ys = np.log([v for _, v in pos])
        slope = float(np.polyfit(xs, ys, 1)[0])
    else:
        slope = float("nan")
    return SmallNoiseSweep(
        rows=tuple(rows), slope=slope, base_norm_sq=l2_norm(problem.u0) ** 2
    )
