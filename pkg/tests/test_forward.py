import numpy as np
import pytest

import fracheat as fh
from fracheat.forward import exterior_source, picard_solve_source
from fracheat.semigroup import duhamel_G

from conftest import control_data, smooth_interior_field


def constant_nl(grid, tgrid, pairs):
    return fh.Nonlinearity.constant(grid, tgrid, pairs)


# ---------------------------------------------------------------------------
# nonlinearity evaluation
# ---------------------------------------------------------------------------


def test_nonlinearity_validation(coarse):
    grid, tgrid, op, sg = coarse
    with pytest.raises(ValueError, match="increasing"):
        constant_nl(grid, tgrid, [(1.0, 1.0), (0.5, 1.0)])
    with pytest.raises(ValueError, match="positive"):
        constant_nl(grid, tgrid, [(-1.0, 1.0)])
    bad = fh.SpaceTimeField.from_values(
        grid, tgrid, -np.ones((grid.n_nodes, tgrid.n_times)), "interior"
    )
    with pytest.raises(ValueError, match="nonnegative"):
        fh.Nonlinearity(terms=((1.0, bad),))


def test_eval_nonlinearity_pointwise(coarse):
    grid, tgrid, op, sg = coarse
    nl = constant_nl(grid, tgrid, [(1.0, 1.0)])
    zero = fh.SpaceTimeField.zeros(grid, tgrid, "interior")
    assert np.all(fh.eval_nonlinearity(nl, zero).values == 0.0)

    vals = np.zeros((grid.n_nodes, tgrid.n_times))
    node = grid.interior_indices[1]
    vals[node, 2] = -2.0
    u = fh.SpaceTimeField.from_values(grid, tgrid, vals, "interior")
    out = fh.eval_nonlinearity(nl, u)
    assert out.values[node, 2] == pytest.approx(-4.0)  # |-2| * (-2)


def test_eval_nonlinearity_odd_and_monotone(coarse):
    grid, tgrid, op, sg = coarse
    rng = np.random.default_rng(0)
    nl = constant_nl(grid, tgrid, [(0.5, 0.7), (2.0, 0.3)])
    vals = rng.standard_normal((grid.n_nodes, tgrid.n_times))
    u = fh.SpaceTimeField.from_values(grid, tgrid, vals, "interior")
    minus = fh.SpaceTimeField.from_values(grid, tgrid, -vals, "interior")
    np.testing.assert_allclose(
        fh.eval_nonlinearity(nl, minus).values, -fh.eval_nonlinearity(nl, u).values
    )
    # monotone in z at fixed coefficients: (a(z2) - a(z1))(z2 - z1) >= 0
    intr = grid.interior_indices
    z1 = rng.standard_normal(50)
    z2 = rng.standard_normal(50)
    for zz1, zz2 in zip(z1, z2):
        w1 = np.full((intr.size, tgrid.n_times), zz1)
        w2 = np.full((intr.size, tgrid.n_times), zz2)
        d = (nl.eval_interior(w2, intr) - nl.eval_interior(w1, intr)) * (zz2 - zz1)
        assert d.min() >= -1e-14


def test_eval_fractional_power_zero_branch(coarse):
    grid, tgrid, op, sg = coarse
    nl = constant_nl(grid, tgrid, [(0.5, 1.0)])
    vals = np.zeros((grid.n_nodes, tgrid.n_times))
    u = fh.SpaceTimeField.from_values(grid, tgrid, vals, "interior")
    out = fh.eval_nonlinearity(nl, u)
    assert np.all(out.values == 0.0)
    assert np.all(np.isfinite(out.values))


# ---------------------------------------------------------------------------
# fixed-point solver
# ---------------------------------------------------------------------------


def test_picard_linear_case_equals_duhamel(coarse):
    grid, tgrid, op, sg = coarse
    rng = np.random.default_rng(1)
    F = np.outer(smooth_interior_field(grid, rng), np.sin(np.pi * tgrid.times))
    rep = picard_solve_source(sg, fh.Nonlinearity.empty(), F, tgrid, tol=1e-12)
    expected = duhamel_G(sg, F, tgrid)
    assert np.max(np.abs(rep.u.values[grid.interior_indices] - expected)) <= 1e-12
    assert rep.converged


def test_picard_contraction_ratios_small_data(coarse):
    grid, tgrid, op, sg = coarse
    nl = constant_nl(grid, tgrid, [(1.0, 1.0)])
    g = control_data(grid, tgrid, amplitude=0.1)
    rep = fh.solve_with_exterior_data(sg, op, nl, g, tol=1e-11)
    assert rep.converged
    assert any(r <= 0.5 for r in rep.contraction_ratios[:5])
    assert rep.ball_radius > 0


def test_picard_noncontraction_raises(coarse):
    grid, tgrid, op, sg = coarse
    nl = constant_nl(grid, tgrid, [(2.0, 40.0)])
    g = control_data(grid, tgrid, amplitude=60.0)
    with pytest.raises(fh.SolverError):
        fh.solve_with_exterior_data(sg, op, nl, g, tol=1e-11, max_iter=40)


def test_solve_requires_zero_initial_slice(coarse):
    grid, tgrid, op, sg = coarse
    nl = fh.Nonlinearity.empty()
    vals = np.ones((grid.n_nodes, tgrid.n_times))
    g = fh.SpaceTimeField.from_values(grid, tgrid, vals, "control-window")
    with pytest.raises(ValueError, match="initial"):
        fh.solve_with_exterior_data(sg, op, nl, g)


def test_zero_data_zero_solution(coarse):
    grid, tgrid, op, sg = coarse
    nl = constant_nl(grid, tgrid, [(1.0, 1.0)])
    g = fh.SpaceTimeField.zeros(grid, tgrid, "exterior")
    rep = fh.solve_with_exterior_data(sg, op, nl, g, tol=1e-12)
    assert np.max(np.abs(rep.u.values)) == 0.0


def test_linear_superposition_in_data(coarse):
    grid, tgrid, op, sg = coarse
    nl = fh.Nonlinearity.empty()
    g1 = control_data(grid, tgrid, amplitude=0.2, time_profile="sin2")
    g2 = control_data(grid, tgrid, amplitude=0.1, time_profile="linear")
    gsum = fh.SpaceTimeField.from_values(
        grid, tgrid, g1.values + g2.values, "control-window"
    )
    u1 = fh.solve_with_exterior_data(sg, op, nl, g1, tol=1e-13).u.values
    u2 = fh.solve_with_exterior_data(sg, op, nl, g2, tol=1e-13).u.values
    usum = fh.solve_with_exterior_data(sg, op, nl, gsum, tol=1e-13).u.values
    assert np.max(np.abs(usum - u1 - u2)) <= 1e-10


def test_pde_residual_small_for_smooth_data(coarse):
    grid, tgrid, op, sg = coarse
    nl = constant_nl(grid, tgrid, [(1.0, 1.0)])
    g = control_data(grid, tgrid, amplitude=0.05)
    rep = fh.solve_with_exterior_data(sg, op, nl, g, tol=1e-12)
    res = fh.pde_residual(op, nl, rep.u)
    scale = max(np.abs(exterior_source(op, g)).max(), 1.0)
    assert res <= 5.0 * max(tgrid.dt, grid.h**2) * scale


# ---------------------------------------------------------------------------
# stepping oracle
# ---------------------------------------------------------------------------


def test_imex_zero_case(coarse):
    grid, tgrid, op, sg = coarse
    u = fh.imex_oracle(op, fh.Nonlinearity.empty(), None, None, tgrid)
    assert np.all(u.values == 0.0)


def test_imex_linear_matches_semigroup_first_order(coarse):
    grid, tgrid, op, sg = coarse
    rng = np.random.default_rng(2)
    F = np.outer(smooth_interior_field(grid, rng), tgrid.times)
    errs = []
    for refine in (1, 2):
        tg = fh.build_time_grid(tgrid.T, tgrid.n_steps * refine)
        Fr = np.outer(F[:, -1] / tgrid.times[-1], tg.times)
        u_imex = fh.imex_oracle(op, fh.Nonlinearity.empty(), None, Fr, tg)
        u_duh = duhamel_G(sg, Fr, tg)
        errs.append(np.max(np.abs(u_imex.values[grid.interior_indices] - u_duh)))
    assert errs[1] <= 0.7 * errs[0]


def test_imex_vs_picard_refinement(coarse):
    grid, tgrid, op, sg = coarse
    nl = constant_nl(grid, tgrid, [(1.0, 1.0)])
    dists = []
    for refine in (1, 4):
        tg = fh.build_time_grid(tgrid.T, tgrid.n_steps * refine)
        nl_r = constant_nl(grid, tg, [(1.0, 1.0)])
        g = control_data(grid, tg, amplitude=0.1, time_profile="linear")
        rep = fh.solve_with_exterior_data(sg, op, nl_r, g, tol=1e-12)
        u_imex = fh.imex_oracle(op, nl_r, g, None, tg)
        diff = fh.SpaceTimeField.from_values(grid, tg, rep.u.values - u_imex.values)
        dists.append(
            fh.l2_spacetime_norm(diff, "interior")
            / fh.l2_spacetime_norm(rep.u, "interior")
        )
    assert dists[1] <= 0.35 * dists[0]  # first order in dt


# ---------------------------------------------------------------------------
# maximum-principle checks
# ---------------------------------------------------------------------------


def test_nonnegativity_for_nonnegative_data(coarse):
    grid, tgrid, op, sg = coarse
    nl = constant_nl(grid, tgrid, [(1.0, 0.5)])
    g = control_data(grid, tgrid, amplitude=0.1)  # bump profile is nonnegative
    rep = fh.solve_with_exterior_data(sg, op, nl, g, tol=1e-12)
    assert rep.u.values.min() >= -1e-8


def test_monotone_envelope(coarse):
    grid, tgrid, op, sg = coarse
    rng = np.random.default_rng(3)
    nl = constant_nl(grid, tgrid, [(1.0, 1.0)])
    ctrl = grid.control_indices
    prof = np.zeros(grid.n_nodes)
    prof[ctrl] = rng.standard_normal(ctrl.size) * 0.05
    tprof = np.sin(0.5 * np.pi * tgrid.times) ** 2
    g = fh.SpaceTimeField.from_values(grid, tgrid, np.outer(prof, tprof), "control-window")
    u = fh.solve_with_exterior_data(sg, op, nl, g, tol=1e-12).u.values

    g_abs = fh.SpaceTimeField.from_values(grid, tgrid, np.abs(g.values), "control-window")
    env = fh.solve_with_exterior_data(
        sg, op, fh.Nonlinearity.empty(), g_abs, tol=1e-12
    ).u.values
    assert np.max(np.abs(u) - env) <= 1e-8


def test_linf_bound_examples(coarse):
    grid, tgrid, op, sg = coarse
    nl = constant_nl(grid, tgrid, [(1.0, 1.0)])
    # f = 0, sup|g| = small amplitude
    g = control_data(grid, tgrid, amplitude=1.0)
    rep = fh.solve_with_exterior_data(sg, op, nl, g, tol=1e-11)
    br = fh.check_linf_bound(rep.u, 0.0, float(np.abs(g.values).max()), tgrid.T)
    assert br.ok
    # g = 0, f constant in the interior
    c = 0.3
    F = np.full((sg.n_interior, tgrid.n_times), c)
    rep2 = picard_solve_source(sg, nl, F, tgrid, tol=1e-11)
    br2 = fh.check_linf_bound(rep2.u, c, 0.0, tgrid.T)
    assert br2.ok
    assert br2.lhs <= tgrid.T * c + 1e-8


def test_linf_bound_randomized(coarse):
    grid, tgrid, op, sg = coarse
    rng = np.random.default_rng(4)
    nl = constant_nl(grid, tgrid, [(1.0, 1.0)])
    tprof = np.sin(0.5 * np.pi * tgrid.times) ** 2
    for _ in range(10):
        F = np.outer(smooth_interior_field(grid, rng, scale=0.05), tprof)
        ctrl = grid.control_indices
        prof = np.zeros(grid.n_nodes)
        prof[ctrl] = rng.standard_normal(ctrl.size) * 0.03
        g = fh.SpaceTimeField.from_values(grid, tgrid, np.outer(prof, tprof), "control-window")
        src = F + exterior_source(op, g)
        rep = picard_solve_source(sg, nl, src, tgrid, tol=1e-11)
        u = fh.SpaceTimeField.from_values(grid, tgrid, rep.u.values + g.values)
        br = fh.check_linf_bound(u, np.abs(F).max(), np.abs(g.values).max(), tgrid.T)
        assert br.ok, br


def test_uniqueness_multistart(coarse):
    grid, tgrid, op, sg = coarse
    nl = constant_nl(grid, tgrid, [(1.0, 1.0)])
    g = control_data(grid, tgrid, amplitude=0.1)
    tol = 1e-11
    rep = fh.check_uniqueness(sg, op, nl, g, tol=tol)
    assert rep.picard_pair_distance <= 10.0 * tol
    # distances do not grow when the iteration budget doubles
    rep2 = fh.check_uniqueness(sg, op, nl, g, tol=tol, max_iter=120)
    assert rep2.picard_pair_distance <= rep.picard_pair_distance + 10.0 * tol
    # the stepping oracle sits at its own discretization distance
    assert rep.imex_distance <= 10.0 * tgrid.dt


def test_solve_report_serialization(coarse):
    grid, tgrid, op, sg = coarse
    nl = constant_nl(grid, tgrid, [(1.0, 1.0)])
    g = control_data(grid, tgrid, amplitude=0.05)
    rep = fh.solve_with_exterior_data(sg, op, nl, g, tol=1e-10)
    payload = rep.to_dict()
    assert payload["converged"] is True
    assert payload["iterations"] == rep.iterations
    assert len(payload["exponents_qpr"]) == 3
    import json

    json.dumps(payload)  # serializable
