import numpy as np
import pytest

import fracheat as fh


def desk_windows(h):
    """Two-sided control and observation windows hugging the interior region."""
    return (
        ("union", (-2.5, -1.0 - h), (1.0 + h, 2.5)),
        ("union", (-3.9, -2.5 - h), (2.5 + h, 3.9)),
    )


@pytest.fixture(scope="session")
def coarse():
    """Fast 1-d setup: h = 1/8, s = 1/2, 16 time steps."""
    h = 1.0 / 8
    grid = fh.build_grid(1, 4.0, h, (-1.0, 1.0), desk_windows(h))
    tgrid = fh.build_time_grid(1.0, 16)
    op = fh.assemble_frac_laplacian(grid, 0.5)
    sg = fh.RestrictedSemigroup.from_operator(op)
    return grid, tgrid, op, sg


@pytest.fixture(scope="session")
def medium():
    """Inverse-problem unit-test scale: h = 1/16, 32 time steps."""
    h = 1.0 / 16
    grid = fh.build_grid(1, 4.0, h, (-1.0, 1.0), desk_windows(h))
    tgrid = fh.build_time_grid(1.0, 32)
    op = fh.assemble_frac_laplacian(grid, 0.5)
    sg = fh.RestrictedSemigroup.from_operator(op)
    return grid, tgrid, op, sg


@pytest.fixture(scope="session")
def desk():
    """Acceptance scale: h = 1/32, s = 1/2, 64 time steps."""
    h = 1.0 / 32
    grid = fh.build_grid(1, 4.0, h, (-1.0, 1.0), desk_windows(h))
    tgrid = fh.build_time_grid(1.0, 64)
    op = fh.assemble_frac_laplacian(grid, 0.5)
    sg = fh.RestrictedSemigroup.from_operator(op)
    return grid, tgrid, op, sg


@pytest.fixture(scope="session")
def desk_control(desk):
    """Synthesized constant-one control at desk scale (shared: the factorization
    dominates the acceptance runtime)."""
    grid, tgrid, op, sg = desk
    from fracheat.inverse import RungeSynthesizer

    target = fh.SpaceTimeField.from_values(
        grid, tgrid, np.ones((grid.n_nodes, tgrid.n_times)), "interior"
    )
    syn = RungeSynthesizer(op, sg)
    ctrl = syn.synthesize(target, 1e-8)
    return syn, target, ctrl


def smooth_interior_field(grid, rng, n_modes=4, scale=1.0):
    """Random smooth field on interior nodes (sine combination on the region)."""
    x = grid.nodes[grid.interior_indices, 0]
    c = rng.standard_normal(n_modes) * scale
    return sum(c[j] * np.sin((j + 1) * np.pi * (x + 1) / 2) for j in range(n_modes))


def window_bump(grid, lo, hi):
    """Smooth compactly supported bump on (lo, hi), evaluated at grid nodes."""
    x = grid.nodes[:, 0]
    t = (x - lo) / (hi - lo)
    out = np.zeros_like(t)
    m = (t > 0) & (t < 1)
    out[m] = np.exp(-1.0 / (t[m] * (1.0 - t[m])) + 4.0)
    return out


def control_data(grid, tgrid, amplitude=0.1, time_profile="sin2"):
    """Exterior data supported on the right lobe of the control window."""
    h = grid.h
    prof = window_bump(grid, 1.0 + h, 2.5)
    prof = prof / max(prof.max(), 1e-300)
    if time_profile == "sin2":
        tvals = np.sin(0.5 * np.pi * tgrid.times / tgrid.T) ** 2
    elif time_profile == "linear":
        tvals = tgrid.times / tgrid.T
    else:
        raise ValueError(time_profile)
    vals = amplitude * np.outer(prof, tvals)
    return fh.SpaceTimeField.from_values(grid, tgrid, vals, "control-window")
