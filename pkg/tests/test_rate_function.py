import math

import numpy as np
import pytest

from helpers import build_coeffs, build_grid, build_u0

from fracmv.dynamics import Control, TimeGrid, solve_controlled, solve_deterministic
from fracmv.errors import GridMismatchError, ValidationError
from fracmv.grid import GridFunction
from fracmv.rate_function import (
    RateProblem,
    control_cost,
    estimate_rate,
    level_set_probe,
    weak_convergence_experiment,
)


@pytest.fixture(scope="module")
def instance():
    """One small controllable instance shared by the expensive tests."""
    g = build_grid(half_width=4.0, points=32)
    coeffs = build_coeffs(g, n_modes=2)
    u0 = build_u0(g)
    tg = TimeGrid(horizon=0.3, steps=30)
    base = solve_deterministic(u0, coeffs, tg)
    return g, coeffs, u0, tg, base


@pytest.fixture(scope="module")
def manufactured(instance):
    """A known control, its trajectory, and the recovered estimate."""
    g, coeffs, u0, tg, base = instance
    t_left = tg.nodes[:-1]
    vbar = Control(
        np.column_stack(
            [
                0.6 * np.sin(2.0 * np.pi * t_left / tg.horizon),
                0.4 * np.cos(np.pi * t_left / tg.horizon),
            ]
        ),
        tg.dt,
    )
    target = solve_controlled(u0, vbar, base, coeffs, tg)
    problem = RateProblem(target=target, eta_ladder=(1e-2, 1e-3, 1e-4, 1e-5),
                          max_stage_iters=80)
    est = estimate_rate(problem, u0, coeffs, tg, base=base)
    return vbar, target, est


# -- the cost functional ---------------------------------------------------


def test_control_cost_closed_form_and_brute(rng):
    tg = TimeGrid(horizon=0.5, steps=20)
    c = 0.7
    v_const = Control(np.full((tg.steps, 3), c), tg.dt)
    assert control_cost(v_const) == pytest.approx(0.5 * tg.horizon * 3 * c**2, rel=1e-14)

    v = Control(rng.standard_normal((tg.steps, 3)), tg.dt)
    brute = 0.0
    for s in range(tg.steps):
        for k in range(3):
            brute += 0.5 * tg.dt * v.values[s, k] ** 2
    assert control_cost(v) == pytest.approx(brute, rel=1e-12)
    # quadratic scaling
    assert control_cost(v.scaled(2.0)) == pytest.approx(4.0 * control_cost(v), rel=1e-14)
    assert control_cost(v.scaled(0.0)) == 0.0


# -- floor and recovery ------------------------------------------------------


def test_cost_floor_at_the_free_path(instance):
    """Steering onto the uncontrolled path costs nothing."""
    g, coeffs, u0, tg, base = instance
    est = estimate_rate(RateProblem(target=base), u0, coeffs, tg, base=base)
    assert est.value <= 1e-6
    assert est.converged
    assert float(np.max(np.abs(est.v_star.values))) <= 1e-4


def test_manufactured_control_is_recovered(manufactured):
    vbar, target, est = manufactured
    ref = control_cost(vbar)
    assert est.converged
    assert est.gap_rel <= 1e-3
    assert est.value <= 1.05 * ref
    # feasibility of vbar also bounds the optimum from above in exact
    # arithmetic; allow the optimizer a generous floor for rounding
    assert est.value >= 0.0


def test_stage_ladder_accounting(manufactured):
    vbar, target, est = manufactured
    etas = [s[0] for s in est.stages]
    assert etas == [1e-2, 1e-3, 1e-4, 1e-5]
    values = [s[1] for s in est.stages]
    gaps = [s[2] for s in est.stages]
    assert all(v >= 0.0 for v in values) and all(g >= 0.0 for g in gaps)
    # tightening the penalty buys attainment
    assert gaps[-1] < gaps[0]
    # the reported value is exactly the cost of the final stage control
    assert est.value == pytest.approx(values[-1], rel=1e-12)
    assert est.n_evaluations > 0


def test_unreachable_target_reports_non_attainment(instance):
    """Weak noise cannot bridge an O(1) terminal offset: the estimator
    must say so rather than return a pretend-finite certificate."""
    g, coeffs, u0, tg, _ = instance
    sig = coeffs.sigma
    from fracmv.coefficients import CoefficientSet, NoiseSigma

    feeble = NoiseSigma(
        shapes=tuple(GridFunction(g, 1e-4 * s.values) for s in sig.shapes),
        kappa=GridFunction(g, np.zeros(g.shape)),
        beta=np.zeros(sig.n_modes),
        gamma=np.zeros(sig.n_modes),
        profile=sig.profile,
    )
    weak_coeffs = CoefficientSet(f=coeffs.f, g=coeffs.g, sigma=feeble, alpha=coeffs.alpha)
    base = solve_deterministic(u0, weak_coeffs, tg)
    far = GridFunction(g, u0.values + 3.0)
    problem = RateProblem(target=far, eta_ladder=(1e-2, 1e-3), max_stage_iters=40)
    est = estimate_rate(problem, u0, weak_coeffs, tg, base=base)
    assert not est.converged
    assert math.isfinite(est.value)
    assert est.gap_rel > 1e-3


def test_target_validation(instance):
    g, coeffs, u0, tg, base = instance
    other = build_grid(points=16)
    with pytest.raises(GridMismatchError):
        estimate_rate(RateProblem(target=build_u0(other)), u0, coeffs, tg, base=base)
    short = solve_deterministic(u0, coeffs, TimeGrid(horizon=0.15, steps=15))
    with pytest.raises(GridMismatchError):
        estimate_rate(RateProblem(target=short), u0, coeffs, tg, base=base)
    with pytest.raises(ValidationError):
        RateProblem(target=base, eta_ladder=())
    with pytest.raises(ValidationError):
        RateProblem(target=base, gap_tol=0.0)


# -- weak-convergence experiment --------------------------------------------


def test_oscillatory_perturbations_fade(instance):
    """Responses collapse onto u_v as the frequency grows while the
    control offsets hold at the exact whole-period value A sqrt(T/2)."""
    g, coeffs, u0, _, _ = instance
    T = 2.0 * math.pi
    tg = TimeGrid(horizon=T, steps=128)
    t_left = tg.nodes[:-1]
    v = Control(
        np.column_stack([0.3 * np.ones_like(t_left), 0.1 * np.sin(t_left / 2.0)]),
        tg.dt,
    )
    A = 0.5
    table = weak_convergence_experiment(v, 0, A, [1, 2, 4, 8], u0, coeffs, tg)
    sups = [row[1] for row in table.rows]
    assert all(a > b for a, b in zip(sups, sups[1:]))
    exact_offset = A * math.sqrt(T / 2.0)
    for row in table.rows:
        assert row[4] == pytest.approx(exact_offset, rel=1e-12)
    assert table.lp_diag is None

    with_lp = weak_convergence_experiment(v, 0, A, [1, 2], u0, coeffs, tg, include_lp=True)
    assert with_lp.lp_diag is not None and len(with_lp.lp_diag) == 2
    assert all(x >= 0.0 for x in with_lp.lp_diag)


def test_zero_amplitude_gives_identical_paths(instance):
    g, coeffs, u0, tg, base = instance
    v = Control(np.zeros((tg.steps, coeffs.sigma.n_modes)), tg.dt)
    table = weak_convergence_experiment(v, 1, 0.0, [1, 3], u0, coeffs, tg, base=base)
    for row in table.rows:
        assert row[1] == 0.0  # sup distance
        assert row[4] == 0.0  # control offset


def test_weak_experiment_validation(instance):
    g, coeffs, u0, tg, base = instance
    v = Control(np.zeros((tg.steps, coeffs.sigma.n_modes)), tg.dt)
    with pytest.raises(ValidationError):
        weak_convergence_experiment(v, 5, 0.5, [1], u0, coeffs, tg)
    bad_v = Control(np.zeros((tg.steps + 1, coeffs.sigma.n_modes)), tg.dt)
    with pytest.raises(ValidationError):
        weak_convergence_experiment(bad_v, 0, 0.5, [1], u0, coeffs, tg)


# -- level sets --------------------------------------------------------------


def test_level_set_probe_separates_cheap_and_dear(instance, manufactured):
    g, coeffs, u0, tg, base = instance
    vbar, target, est = manufactured
    level_hi = 2.0 * est.value
    report = level_set_probe(
        level_hi, [base, target], u0, coeffs, tg,
        eta_ladder=(1e-2, 1e-3, 1e-4, 1e-5), max_stage_iters=80, base=base,
    )
    assert report.inside() == [0, 1]
    level_lo = 0.25 * est.value
    report_lo = level_set_probe(
        level_lo, [target], u0, coeffs, tg,
        eta_ladder=(1e-2, 1e-3, 1e-4, 1e-5), max_stage_iters=80, base=base,
    )
    assert report_lo.inside() == []
    assert report_lo.rows[0][1] > level_lo  # best value found exceeds the level
    with pytest.raises(ValidationError):
        level_set_probe(-1.0, [base], u0, coeffs, tg, base=base)
