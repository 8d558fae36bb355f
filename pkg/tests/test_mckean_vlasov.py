import numpy as np
import pytest

from helpers import build_coeffs, build_grid, build_tgrid, build_u0

from fracmv.dynamics import NoisePath, solve_frozen, sup_distance
from fracmv.errors import FixedPointDivergenceError, ValidationError
from fracmv.grid import l2_norm
from fracmv.measure import EmpiricalMeasure, MeasureFlow, flow_distance, second_moment
from fracmv.mckean_vlasov import (
    MeanFieldProblem,
    PicardConfig,
    apply_phi,
    auto_lambda,
    picard_solve,
    small_noise_sweep,
)


def make_problem(grid, coeffs, tgrid, u0=None, eps=0.01, seed=99, workers=1, **kw):
    return MeanFieldProblem(
        grid=grid,
        tgrid=tgrid,
        coeffs=coeffs,
        u0=u0 if u0 is not None else build_u0(grid),
        epsilon=eps,
        master_seed=seed,
        workers=workers,
        **kw,
    )


def constant_flow(grid, values, n, nodes):
    mu = EmpiricalMeasure(grid, np.broadcast_to(values, (n,) + grid.shape).copy())
    return MeasureFlow.constant(mu, nodes)


# -- the frozen-measure map ----------------------------------------------


def test_apply_phi_is_deterministic_and_worker_invariant(small_grid, small_coeffs, small_tgrid):
    """Common random numbers make the update a pure function of the input
    flow, independent of thread count."""
    p1 = make_problem(small_grid, small_coeffs, small_tgrid, workers=1)
    p3 = make_problem(small_grid, small_coeffs, small_tgrid, workers=3)
    flow = constant_flow(small_grid, p1.u0.values, 6, small_tgrid.nodes)
    out_a = apply_phi(p1, flow)
    out_b = apply_phi(p1, flow)
    out_c = apply_phi(p3, flow)
    assert np.array_equal(out_a.states, out_b.states)
    assert np.array_equal(out_a.states, out_c.states)


def test_particles_differ_but_share_the_initial_state(small_grid, small_coeffs, small_tgrid):
    p = make_problem(small_grid, small_coeffs, small_tgrid)
    flow = constant_flow(small_grid, p.u0.values, 4, small_tgrid.nodes)
    out = apply_phi(p, flow)
    assert np.array_equal(out.states[0, 0], p.u0.values)
    assert not np.array_equal(out.states[-1, 0], out.states[-1, 1])


def test_contraction_on_separated_probe_flows(small_grid, small_coeffs, small_tgrid):
    p = make_problem(small_grid, small_coeffs, small_tgrid)
    mu = constant_flow(small_grid, p.u0.values, 8, small_tgrid.nodes)
    nu = constant_flow(small_grid, 1.5 * p.u0.values, 8, small_tgrid.nodes)
    d0 = flow_distance(mu, nu, 0.0)
    d1 = flow_distance(apply_phi(p, mu), apply_phi(p, nu), 0.0)
    assert d1 < 0.5 * d0


def test_measure_independent_coefficients_decouple(small_grid, small_tgrid):
    """Kill every law-coupling channel; the map then ignores its argument
    and the fixed point is found immediately."""
    coeffs = build_coeffs(small_grid, phi_amp=0.0, c2=0.0, beta_amp=0.0)
    p = make_problem(small_grid, coeffs, small_tgrid, eps=0.02)
    flow_a = constant_flow(small_grid, p.u0.values, 4, small_tgrid.nodes)
    flow_b = constant_flow(small_grid, 5.0 * p.u0.values, 4, small_tgrid.nodes)
    out_a = apply_phi(p, flow_a)
    out_b = apply_phi(p, flow_b)
    assert np.array_equal(out_a.states, out_b.states)

    result = picard_solve(p, PicardConfig(n_particles=4, lambda_weight=0.0))
    assert result.report.converged
    assert result.report.iterations <= 2
    # each particle solves the frozen equation with its own noise
    noise = NoisePath.generate(small_tgrid, coeffs.sigma.n_modes, p.master_seed, particle=2)
    ref = solve_frozen(p.u0, flow_a, coeffs, small_tgrid, eps=0.02, noise=noise)
    assert sup_distance(result.particle_trajectory(2), ref) <= 1e-12


# -- the fixed-point loop ------------------------------------------------


def test_picard_converges_and_iterates_contract(small_grid, small_coeffs, small_tgrid):
    p = make_problem(small_grid, small_coeffs, small_tgrid)
    result = picard_solve(p, PicardConfig(n_particles=8, tol=1e-6, max_iters=20,
                                          lambda_weight="auto"))
    rep = result.report
    assert rep.converged
    assert rep.iterations <= 20
    assert rep.distances[-1] <= rep.threshold
    assert all(r <= 0.5 for r in rep.ratios[1:])
    assert rep.lambda_weight >= 0.0
    assert rep.auto_curve  # calibration curve recorded when auto

    # the returned flow is a fixed point up to the loop's own tolerance
    residual = flow_distance(apply_phi(p, result.flow), result.flow, rep.lambda_weight)
    assert residual <= 2.0 * rep.threshold


def test_picard_fixed_weight_matches_auto_outcome(small_grid, small_coeffs, small_tgrid):
    """On a dissipative instance the plain sup metric already contracts,
    so a fixed zero weight converges to the same flow."""
    p = make_problem(small_grid, small_coeffs, small_tgrid)
    r_auto = picard_solve(p, PicardConfig(n_particles=6, lambda_weight="auto"))
    r_zero = picard_solve(p, PicardConfig(n_particles=6, lambda_weight=0.0))
    assert flow_distance(r_auto.flow, r_zero.flow, 0.0) <= 10 * r_auto.report.threshold


def test_exhausted_iterations_raise_with_report(small_grid, small_coeffs, small_tgrid):
    p = make_problem(small_grid, small_coeffs, small_tgrid)
    with pytest.raises(FixedPointDivergenceError) as exc_info:
        picard_solve(p, PicardConfig(n_particles=4, tol=1e-30, max_iters=1,
                                     lambda_weight=0.0))
    rep = exc_info.value.report
    assert rep is not None
    assert rep.iterations == 1
    assert not rep.converged


def test_custom_initial_ensemble(small_grid, small_coeffs, small_tgrid, rng):
    u0 = build_u0(small_grid)
    states = u0.values[None] * (1.0 + 0.1 * rng.standard_normal((4, 1)))
    p = make_problem(small_grid, small_coeffs, small_tgrid, initial_states=states)
    result = picard_solve(p, PicardConfig(n_particles=4, lambda_weight=0.0))
    assert np.array_equal(result.flow.states[0], states)
    with pytest.raises(ValidationError):
        picard_solve(p, PicardConfig(n_particles=8, lambda_weight=0.0))


def test_problem_validation(small_grid, small_coeffs, small_tgrid):
    with pytest.raises(ValidationError):
        make_problem(small_grid, small_coeffs, small_tgrid, eps=1.0)
    with pytest.raises(ValidationError):
        make_problem(small_grid, small_coeffs, small_tgrid, workers=0)
    with pytest.raises(ValidationError):
        make_problem(small_grid, small_coeffs, small_tgrid,
                     initial_states=np.zeros((4, 7)))
    other = build_grid(points=16)
    with pytest.raises(Exception):
        make_problem(other, small_coeffs, small_tgrid)
    with pytest.raises(ValidationError):
        PicardConfig(lambda_weight="fast")
    with pytest.raises(ValidationError):
        PicardConfig(lambda_weight=-1.0)


def test_auto_lambda_rejects_identical_probes(small_grid, small_coeffs, small_tgrid):
    p = make_problem(small_grid, small_coeffs, small_tgrid)
    flow = constant_flow(small_grid, p.u0.values, 4, small_tgrid.nodes)
    with pytest.raises(ValidationError):
        auto_lambda(p, [flow, flow])


# -- stability of the mean-field estimate ---------------------------------


def test_particle_doubling_moves_the_law_estimate_little(small_grid, small_coeffs, small_tgrid):
    cfgs = [(8, None), (16, None)]
    moments = []
    for n, _ in cfgs:
        p = make_problem(small_grid, small_coeffs, small_tgrid)
        r = picard_solve(p, PicardConfig(n_particles=n, lambda_weight=0.0))
        moments.append(second_moment(r.flow.measure(small_tgrid.steps)))
    assert abs(moments[0] - moments[1]) / moments[1] < 0.05


def test_second_moment_stays_bounded_by_initial_scale(small_grid, small_coeffs, small_tgrid):
    """E sup_t ||u||^2 <= C (1 + ||u0||^2) with one C across scales; the
    dissipative drift keeps C at 1 for this family."""
    for amp in (0.5, 1.0, 2.0):
        u0 = build_u0(small_grid, amp=amp)
        p = make_problem(small_grid, small_coeffs, small_tgrid, u0=u0)
        r = picard_solve(p, PicardConfig(n_particles=8, lambda_weight=0.0))
        w = small_grid.cell_volume
        norms_sq = w * np.sum(r.flow.states**2, axis=tuple(range(2, 2 + small_grid.dim)))
        est = float(np.mean(np.max(norms_sq, axis=0)))
        assert est <= 1.0 * (1.0 + l2_norm(u0) ** 2)


# -- small-noise sweep -----------------------------------------------------


def test_small_noise_sweep_zero_row_and_slope(small_grid, small_coeffs, small_tgrid):
    p = make_problem(small_grid, small_coeffs, small_tgrid, eps=0.0)
    sweep = small_noise_sweep(p, [0.0, 3e-3, 1e-2], 4,
                              PicardConfig(n_particles=4, lambda_weight=0.0))
    eps0, est0, err0 = sweep.rows[0]
    assert eps0 == 0.0 and est0 == 0.0 and err0 == 0.0
    assert 0.8 <= sweep.slope <= 1.2
    assert all(est > 0.0 for _, est, _ in sweep.rows[1:])


def test_sweep_deviation_shrinks_with_epsilon(small_grid, small_coeffs, small_tgrid):
    p = make_problem(small_grid, small_coeffs, small_tgrid, eps=0.0)
    sweep = small_noise_sweep(p, [1e-3, 1e-2], 4,
                              PicardConfig(n_particles=4, lambda_weight=0.0))
    assert sweep.rows[0][1] < sweep.rows[1][1]
    assert sweep.base_norm_sq == pytest.approx(l2_norm(p.u0) ** 2, rel=1e-12)
