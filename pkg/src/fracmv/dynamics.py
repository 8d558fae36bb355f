"""Time stepping for the frozen-measure, deterministic, and controlled equations.

One semi-implicit step from node ``s`` reads::

    u~      = u_s + dt * (g_s - f_s / (1 + dt |f_s|))
              + dt * sigma_s(v_s) + sqrt(eps) * sigma_s(dW_s)
    u_{s+1} = (I + dt (-lap)^alpha)^(-1) u~

with every coefficient evaluated at the left node (the measure argument
is frozen there as well).  The polynomial drift is tamed pointwise, the
fractional diffusion is treated by the exact spectral resolvent, and a
non-finite state aborts the run with the offending step attached.

Three solvers share this kernel and differ only in where the measure
comes from: a caller-supplied flow (``solve_frozen``), the Dirac mass
at the current state (``solve_deterministic``), or the Dirac mass along
a precomputed deterministic path (``solve_controlled``).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .coefficients import CoefficientSet, capped_mean_norm
from .errors import BlowUpError, GridMismatchError, ValidationError
from .grid import (
    GridFunction,
    SpatialGrid,
    h_alpha_seminorm,
    l2_norm,
    load_grid_function,
    save_grid_function,
)
from .measure import EmpiricalMeasure, MeasureFlow, second_moment

__all__ = [
    "TimeGrid",
    "NoisePath",
    "Control",
    "Trajectory",
    "stable_seed_key",
    "step_frozen",
    "solve_frozen",
    "solve_deterministic",
    "solve_controlled",
    "energy_residual",
    "sup_distance",
    "integrated_v_distance",
    "save_trajectory",
    "load_trajectory",
    "save_control",
    "load_control",
]


@dataclass(frozen=True)
class TimeGrid:
    """Uniform time nodes ``t_s = s * T / S`` for ``s = 0 .. S``."""

    horizon: float
    steps: int

    def __post_init__(self):
        if not (float(self.horizon) > 0.0):
            raise ValidationError(f"time.horizon must be positive, got {self.horizon!r}")
        if not (isinstance(self.steps, (int, np.integer)) and self.steps >= 1):
            raise ValidationError(f"time.steps must be an integer >= 1, got {self.steps!r}")

    @property
    def dt(self) -> float:
        return float(self.horizon) / self.steps

    @property
    def nodes(self) -> np.ndarray:
        return self.dt * np.arange(self.steps + 1)


def stable_seed_key(master_seed: int, role: str, index: int = 0) -> int:
    """Derive a 128-bit stream key from ``(master, role, index)``.

    Hash-based so distinct roles and indices give independent streams
    and the derivation is stable across platforms and processes.
    """
    payload = f"{int(master_seed)}|{role}|{int(index)}".encode()
    digest = hashlib.blake2b(payload, digest_size=16).digest()
    return int.from_bytes(digest, "little")


@dataclass(frozen=True)
class NoisePath:
    """Brownian increments ``dW`` with shape ``(steps, modes)``.

    Entry ``(s, k)`` is draw number ``s * K + k`` of a counter-based
    stream keyed by ``(master seed, particle index)``, hence a pure
    function of ``(seed, particle, step, mode)`` regardless of how many
    paths are generated or in what order.
    """

    increments: np.ndarray
    dt: float

    def __post_init__(self):
        arr = np.asarray(self.increments, dtype=float)
        if arr.ndim != 2:
            raise ValidationError(f"noise increments must be 2-d, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("noise increments contain non-finite values")
        if not (float(self.dt) > 0.0):
            raise ValidationError(f"noise dt must be positive, got {self.dt!r}")
        object.__setattr__(self, "increments", arr)

    @classmethod
    def generate(
        cls, tgrid: TimeGrid, n_modes: int, master_seed: int, particle: int = 0
    ) -> "NoisePath":
        key = stable_seed_key(master_seed, "noise", particle)
        gen = np.random.Generator(np.random.Philox(key=key))
        draws = gen.standard_normal((tgrid.steps, int(n_modes)))
        return cls(draws * math.sqrt(tgrid.dt), tgrid.dt)

    @property
    def steps(self) -> int:
        return self.increments.shape[0]

    @property
    def n_modes(self) -> int:
        return self.increments.shape[1]


@dataclass(frozen=True)
class Control:
    """Piecewise-constant control, one row of mode coefficients per step."""

    values: np.ndarray
    dt: float

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=float)
        if arr.ndim != 2:
            raise ValidationError(f"control values must be 2-d, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("control contains non-finite values")
        if not (float(self.dt) > 0.0):
            raise ValidationError(f"control dt must be positive, got {self.dt!r}")
        object.__setattr__(self, "values", arr)

    @classmethod
    def zero(cls, tgrid: TimeGrid, n_modes: int) -> "Control":
        return cls(np.zeros((tgrid.steps, int(n_modes))), tgrid.dt)

    @property
    def steps(self) -> int:
        return self.values.shape[0]

    @property
    def n_modes(self) -> int:
        return self.values.shape[1]

    def l2_norm_sq(self) -> float:
        """Squared norm in L2(0, T; l2): ``sum_s dt * |v_s|^2``."""
        return float(self.dt * np.sum(self.values**2))

    def scaled(self, c: float) -> "Control":
        return Control(float(c) * self.values, self.dt)


@dataclass(frozen=True)
class Trajectory:
    """A path of fields over the time nodes, shape ``(S+1, *grid.shape)``."""

    grid: SpatialGrid
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        arr = np.asarray(self.values, dtype=float)
        if t.ndim != 1 or arr.shape != (t.size,) + self.grid.shape:
            raise ValidationError(
                f"trajectory arrays inconsistent: times {t.shape}, values {arr.shape}, "
                f"grid {self.grid.shape}"
            )
        if t.size > 1 and np.any(np.diff(t) <= 0.0):
            raise ValidationError("trajectory times must be strictly increasing")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("trajectory contains non-finite values")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", arr)

    @property
    def n_nodes(self) -> int:
        return self.times.size

    def state(self, s: int) -> GridFunction:
        return GridFunction(self.grid, self.values[s])

    def terminal(self) -> GridFunction:
        return GridFunction(self.grid, self.values[-1])


# -- measure statistics consumed by the stepper -------------------------


@dataclass(frozen=True)
class _MeasureStats:
    """The three scalars through which the measure enters the coefficients."""

    hbar_f: float
    hbar1: float
    root_m2: float


def _stats_from_measure(mu: EmpiricalMeasure, h_cap: float) -> _MeasureStats:
    return _MeasureStats(
        hbar_f=capped_mean_norm(mu, h_cap),
        hbar1=capped_mean_norm(mu, 1.0),
        root_m2=math.sqrt(second_moment(mu)),
    )


def _stats_from_state(vals: np.ndarray, grid: SpatialGrid, h_cap: float) -> _MeasureStats:
    """Statistics of the Dirac mass at a single field."""
    n = math.sqrt(grid.cell_volume * float(np.sum(vals**2)))
    return _MeasureStats(hbar_f=min(n, float(h_cap)), hbar1=min(n, 1.0), root_m2=n)


def _check_epsilon(eps: float) -> float:
    e = float(eps)
    if not (0.0 <= e < 1.0):
        raise ValidationError(f"noise intensity epsilon must lie in [0, 1), got {eps!r}")
    return e


def _step_values(
    grid: SpatialGrid,
    coeffs: CoefficientSet,
    vals: np.ndarray,
    stats: _MeasureStats,
    t: float,
    dt: float,
    res_mult: np.ndarray,
    eps: float = 0.0,
    v_s: np.ndarray | None = None,
    dw_s: np.ndarray | None = None,
) -> np.ndarray:
    """One semi-implicit step on raw arrays; may return non-finite values."""
    F, G, sig = coeffs.f, coeffs.g, coeffs.sigma
    with np.errstate(over="ignore", invalid="ignore"):
        f_vals = F.power_values(vals) + F.phi.values(t, grid) * stats.hbar_f
        tamed = f_vals / (1.0 + dt * np.abs(f_vals))
        g_vals = G.psi.values(t, grid) * (G.c0 + G.c1 * np.tanh(vals) + G.c2 * stats.hbar1)
        tilde = vals + dt * (g_vals - tamed)
        if v_s is not None or (dw_s is not None and eps > 0.0):
            sig2 = sig._bshape(sig.beta) * stats.root_m2 + sig._bshape(sig.gamma) * vals[None]
            fields = sig.profile(t) * sig.shape_stack() + sig.kappa.values[None] * sig2
            if v_s is not None:
                tilde = tilde + dt * np.tensordot(v_s, fields, axes=(0, 0))
            if dw_s is not None and eps > 0.0:
                tilde = tilde + math.sqrt(eps) * np.tensordot(dw_s, fields, axes=(0, 0))
        return grid.apply_multiplier(tilde, res_mult)


def step_frozen(
    u: GridFunction,
    mu: EmpiricalMeasure,
    t: float,
    dt: float,
    coeffs: CoefficientSet,
    eps: float = 0.0,
    control_vec: np.ndarray | None = None,
    noise_vec: np.ndarray | None = None,
) -> GridFunction:
    """Advance one step against a frozen measure.

    ``control_vec`` and ``noise_vec`` are per-mode coefficient vectors
    (the control slot is multiplied by ``dt``, the noise slot by
    ``sqrt(eps)``).  Raises a blow-up error if the step leaves the
    finite range.
    """
    if u.grid != mu.grid or u.grid != coeffs.sigma.grid:
        raise GridMismatchError("state, measure, and coefficients must share one grid")
    if not (float(dt) > 0.0):
        raise ValidationError(f"dt must be positive, got {dt!r}")
    eps = _check_epsilon(eps)
    K = coeffs.sigma.n_modes
    for name, vec in (("control_vec", control_vec), ("noise_vec", noise_vec)):
        if vec is not None and np.asarray(vec).shape != (K,):
            raise ValidationError(f"{name} must have shape ({K},)")
    stats = _stats_from_measure(mu, coeffs.f.h_cap)
    res_mult = u.grid.resolvent_multiplier(coeffs.alpha, float(dt))
    out = _step_values(
        u.grid, coeffs, u.values, stats, float(t), float(dt), res_mult, eps,
        None if control_vec is None else np.asarray(control_vec, dtype=float),
        None if noise_vec is None else np.asarray(noise_vec, dtype=float),
    )
    if not np.all(np.isfinite(out)):
        raise BlowUpError(step=0, time=float(t) + float(dt))
    return GridFunction(u.grid, out)


def _run_steps(
    grid: SpatialGrid,
    coeffs: CoefficientSet,
    u0_vals: np.ndarray,
    tgrid: TimeGrid,
    stats_at,
    eps: float = 0.0,
    control: Control | None = None,
    noise: NoisePath | None = None,
) -> np.ndarray:
    """Shared solver loop.  ``stats_at(s, vals)`` supplies the measure scalars."""
    S, dt = tgrid.steps, tgrid.dt
    nodes = tgrid.nodes
    res_mult = grid.resolvent_multiplier(coeffs.alpha, dt)
    out = np.empty((S + 1,) + grid.shape)
    out[0] = u0_vals
    vals = u0_vals
    for s in range(S):
        v_s = None if control is None else control.values[s]
        dw_s = None if noise is None else noise.increments[s]
        vals = _step_values(
            grid, coeffs, vals, stats_at(s, vals), float(nodes[s]), dt, res_mult,
            eps, v_s, dw_s,
        )
        if not np.all(np.isfinite(vals)):
            raise BlowUpError(step=s, time=float(nodes[s + 1]))
        out[s + 1] = vals
    return out


def _validate_run_args(
    u0: GridFunction,
    coeffs: CoefficientSet,
    tgrid: TimeGrid,
    control: Control | None,
    noise: NoisePath | None,
    eps: float,
) -> None:
    if u0.grid != coeffs.sigma.grid:
        raise GridMismatchError("initial state and coefficients must share one grid")
    K = coeffs.sigma.n_modes
    if control is not None:
        if control.steps != tgrid.steps or control.n_modes != K:
            raise ValidationError(
                f"control shape ({control.steps}, {control.n_modes}) does not match "
                f"(steps, modes) = ({tgrid.steps}, {K})"
            )
    if eps > 0.0:
        if noise is None:
            raise ValidationError("epsilon > 0 requires a noise path")
        if noise.steps != tgrid.steps or noise.n_modes != K:
            raise ValidationError(
                f"noise shape ({noise.steps}, {noise.n_modes}) does not match "
                f"(steps, modes) = ({tgrid.steps}, {K})"
            )


def solve_frozen(
    u0: GridFunction,
    mu_flow: MeasureFlow,
    coeffs: CoefficientSet,
    tgrid: TimeGrid,
    eps: float = 0.0,
    control: Control | None = None,
    noise: NoisePath | None = None,
) -> Trajectory:
    """Integrate against a prescribed measure flow (left-node freezing)."""
    eps = _check_epsilon(eps)
    _validate_run_args(u0, coeffs, tgrid, control, noise, eps)
    if mu_flow.grid != u0.grid:
        raise GridMismatchError("measure flow and initial state live on different grids")
    if mu_flow.n_times != tgrid.steps + 1 or not np.array_equal(mu_flow.times, tgrid.nodes):
        raise GridMismatchError("measure flow is not sampled on the solver's time nodes")
    h_cap = coeffs.f.h_cap
    stats = [_stats_from_measure(mu_flow.measure(s), h_cap) for s in range(tgrid.steps)]
    vals = _run_steps(
        u0.grid, coeffs, u0.values, tgrid, lambda s, _v: stats[s], eps, control, noise
    )
    return Trajectory(u0.grid, tgrid.nodes, vals)


def solve_deterministic(u0: GridFunction, coeffs: CoefficientSet, tgrid: TimeGrid) -> Trajectory:
    """Zero-noise dynamics with the measure argument set to the current state.

    Self-consistent because the law of a deterministic path is the
    point mass travelling along it.
    """
    _validate_run_args(u0, coeffs, tgrid, None, None, 0.0)
    g, h_cap = u0.grid, coeffs.f.h_cap
    vals = _run_steps(
        g, coeffs, u0.values, tgrid, lambda _s, v: _stats_from_state(v, g, h_cap)
    )
    return Trajectory(g, tgrid.nodes, vals)


def solve_controlled(
    u0: GridFunction,
    control: Control,
    base: Trajectory,
    coeffs: CoefficientSet,
    tgrid: TimeGrid,
) -> Trajectory:
    """Deterministic dynamics driven by a control through the noise operator.

    The measure argument is frozen to the point mass along ``base``, the
    zero-noise solution from the same initial state; it is not the law
    of the controlled path itself.
    """
    _validate_run_args(u0, coeffs, tgrid, control, None, 0.0)
    if base.grid != u0.grid:
        raise GridMismatchError("base trajectory lives on a different grid")
    if base.n_nodes != tgrid.steps + 1 or not np.array_equal(base.times, tgrid.nodes):
        raise GridMismatchError("base trajectory is not sampled on the solver's time nodes")
    if not np.array_equal(base.values[0], u0.values):
        raise ValidationError("base trajectory does not start at the given initial state")
    g, h_cap = u0.grid, coeffs.f.h_cap
    base_stats = [
        _stats_from_state(base.values[s], g, h_cap) for s in range(tgrid.steps)
    ]
    vals = _run_steps(
        g, coeffs, u0.values, tgrid, lambda s, _v: base_stats[s], 0.0, control, None
    )
    return Trajectory(g, tgrid.nodes, vals)


# -- energy bookkeeping --------------------------------------------------


def energy_residual(
    traj: Trajectory,
    coeffs: CoefficientSet,
    control: Control | None = None,
    base: Trajectory | None = None,
) -> np.ndarray:
    """Per-node defect of the zero-noise energy balance.

    The continuous identity balances ``||u(t)||^2`` against the initial
    energy, the fractional dissipation, the drift work, and (for
    controlled paths) the control work::

        ||u(t)||^2 + 2 int (|u|_alpha^2 + <f, u>) = ||u_0||^2
                   + 2 int (<g, u> + <sigma v, u>)

    Discretely, dissipation is charged at the right node (matching the
    implicit resolvent) and the drift terms at the left node (matching
    the explicit evaluation), giving a first-order residual in ``dt``.
    The untamed drift enters here: the defect includes what taming
    discarded, which is itself first order.  ``base`` supplies the
    measure argument for controlled paths; by default the measure is
    the point mass at the trajectory's own state.
    """
    g = traj.grid
    F, G, sig = coeffs.f, coeffs.g, coeffs.sigma
    S = traj.n_nodes - 1
    if S < 1:
        raise ValidationError("trajectory must contain at least one step")
    dt = float(traj.times[1] - traj.times[0])
    if control is not None and (control.steps != S or control.n_modes != sig.n_modes):
        raise ValidationError("control shape does not match the trajectory")
    if base is not None and (base.grid != g or not np.array_equal(base.times, traj.times)):
        raise GridMismatchError("base trajectory does not match the path's nodes")
    w = g.cell_volume
    h_cap = F.h_cap

    res = np.zeros(S + 1)
    e0 = w * float(np.sum(traj.values[0] ** 2))
    acc = 0.0
    for s in range(S):
        t = float(traj.times[s])
        u_s = traj.values[s]
        u_next = traj.values[s + 1]
        ref = u_s if base is None else base.values[s]
        stats = _stats_from_state(ref, g, h_cap)
        f_vals = F.power_values(u_s) + F.phi.values(t, g) * stats.hbar_f
        g_vals = G.psi.values(t, g) * (G.c0 + G.c1 * np.tanh(u_s) + G.c2 * stats.hbar1)
        semi_sq = h_alpha_seminorm(GridFunction(g, u_next), coeffs.alpha) ** 2
        work = w * float(np.sum((f_vals - g_vals) * u_s))
        if control is not None:
            sig2 = sig._bshape(sig.beta) * stats.root_m2 + sig._bshape(sig.gamma) * u_s[None]
            fields = sig.profile(t) * sig.shape_stack() + sig.kappa.values[None] * sig2
            drive = np.tensordot(control.values[s], fields, axes=(0, 0))
            work -= w * float(np.sum(drive * u_s))
        acc += 2.0 * dt * (semi_sq + work)
        res[s + 1] = w * float(np.sum(u_next**2)) - e0 + acc
    return res


# -- trajectory comparisons ----------------------------------------------


def _check_comparable(a: Trajectory, b: Trajectory) -> None:
    if a.grid != b.grid:
        raise GridMismatchError("trajectories live on different grids")
    if a.times.shape != b.times.shape or not np.array_equal(a.times, b.times):
        raise GridMismatchError("trajectories are sampled on different time nodes")


def sup_distance(a: Trajectory, b: Trajectory) -> float:
    """``sup_s || a(t_s) - b(t_s) ||`` in the discrete L2 norm."""
    _check_comparable(a, b)
    w = a.grid.cell_volume
    diff = a.values - b.values
    flat = diff.reshape(diff.shape[0], -1)
    return float(np.sqrt(w * np.max(np.sum(flat**2, axis=1))))


def integrated_v_distance(a: Trajectory, b: Trajectory, alpha: float, c_v: float = 1.0) -> float:
    """Left-sum approximation of the L2(0, T; V) distance."""
    _check_comparable(a, b)
    dt = float(a.times[1] - a.times[0])
    total = 0.0
    for s in range(a.n_nodes - 1):
        d = GridFunction(a.grid, a.values[s] - b.values[s])
        total += dt * (l2_norm(d) ** 2 + float(c_v) * h_alpha_seminorm(d, alpha) ** 2)
    return float(np.sqrt(total))


# -- persistence ---------------------------------------------------------

_TRAJ_MAGIC = b"FRACMVTRAJ1\n"


def save_trajectory(traj: Trajectory, path: str | Path, fmt: str = "blob") -> Path:
    """Persist a trajectory.

    ``blob`` writes a single self-describing binary file: a magic line,
    a JSON header, then the time and value arrays as little-endian
    float64.  The bytes are a pure function of the payload, so equal
    trajectories give identical files.  ``csv`` writes one grid-function
    CSV per node into a directory, plus the node times.
    """
    path = Path(path)
    if fmt == "blob":
        header = {
            "grid": {
                "dim": traj.grid.dim,
                "half_width": traj.grid.half_width,
                "points_per_dim": traj.grid.points_per_dim,
            },
            "n_nodes": traj.n_nodes,
            "dtype": "<f8",
        }
        with open(path, "wb") as fh:
            fh.write(_TRAJ_MAGIC)
            fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
            fh.write(np.ascontiguousarray(traj.times, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(traj.values, dtype="<f8").tobytes())
        return path
    if fmt == "csv":
        path.mkdir(parents=True, exist_ok=True)
        np.savetxt(path / "times.csv", traj.times, delimiter=",", header="t", comments="", fmt="%.17g")
        for s in range(traj.n_nodes):
            save_grid_function(traj.state(s), path / f"node_{s:05d}.csv")
        return path
    raise ValidationError(f"unknown trajectory format {fmt!r} (expected blob or csv)")


def load_trajectory(path: str | Path) -> Trajectory:
    """Read a trajectory written by :func:`save_trajectory` (either format)."""
    path = Path(path)
    if path.is_dir():
        times = np.loadtxt(path / "times.csv", delimiter=",", skiprows=1, ndmin=1)
        nodes = sorted(path.glob("node_*.csv"))
        fns = [load_grid_function(p) for p in nodes]
        if not fns or len(fns) != times.size:
            raise ValidationError(f"{path}: node files do not match the time array")
        return Trajectory(fns[0].grid, times, np.stack([f.values for f in fns]))
    with open(path, "rb") as fh:
        magic = fh.read(len(_TRAJ_MAGIC))
        if magic != _TRAJ_MAGIC:
            raise ValidationError(f"{path}: not a trajectory blob")
        header = json.loads(fh.readline().decode())
        ginfo = header["grid"]
        grid = SpatialGrid(int(ginfo["dim"]), float(ginfo["half_width"]), int(ginfo["points_per_dim"]))
        n = int(header["n_nodes"])
        times = np.frombuffer(fh.read(8 * n), dtype="<f8")
        count = n * grid.n_cells
        values = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape((n,) + grid.shape)
    return Trajectory(grid, times, values)


def save_control(v: Control, path: str | Path) -> Path:
    """Write a control matrix as CSV with the step size in the header."""
    path = Path(path)
    header = f"dt={v.dt!r} steps={v.steps} modes={v.n_modes}"
    np.savetxt(path, v.values, delimiter=",", header=header, fmt="%.17g")
    return path


def load_control(path: str | Path) -> Control:
    path = Path(path)
    first = path.read_text().splitlines()[0]
    if not first.startswith("# dt="):
        raise ValidationError(f"{path}: missing control header")
    dt = float(first.split("dt=")[1].split()[0])
    values = np.loadtxt(path, delimiter=",", ndmin=2)
    return Control(values, dt)
