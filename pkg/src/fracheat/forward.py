"""Well-posedness machinery: power nonlinearity, fixed-point solver, oracles.

The driven problem on the interior region is converted to the integral
equation u = G(f - a(., ., u)) and solved by successive substitution from
zero; the per-iteration contraction ratio is monitored and data that fail
to contract are rejected (the smallness constants behind the fixed-point
argument are not quantified, so smallness is enforced operationally).

An implicit-explicit time stepper (backward Euler in the linear stiff
term, explicit in the nonlinearity) serves as an independent oracle, and
the discrete maximum-principle consequences (sup bound, nonnegativity,
monotone envelope) are exposed as checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .fracop import FracOperator
from .geometry import SpaceTimeField, TimeGrid, l2_spacetime_norm, linf_norm
from .semigroup import (
    AdmissibleTriple,
    RestrictedSemigroup,
    choose_exponents,
    duhamel_G,
    x_norm,
)

__all__ = [
    "SolverError",
    "NonContractionError",
    "IterationLimitError",
    "Nonlinearity",
    "SolveReport",
    "eval_nonlinearity",
    "picard_solve_source",
    "solve_with_exterior_data",
    "imex_oracle",
    "check_linf_bound",
    "check_uniqueness",
    "pde_residual",
    "BoundReport",
    "UniquenessReport",
]


class SolverError(RuntimeError):
    """Forward solve failed."""


class NonContractionError(SolverError):
    """Iterates stopped contracting: the data are too large for the fixed point."""


class IterationLimitError(SolverError):
    """Iteration budget exhausted before the residual tolerance."""


# ---------------------------------------------------------------------------
# nonlinearity
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Nonlinearity:
    """Ordered power terms sum_k a_k(x,t) |z|^{b_k} z with 0 < b_1 < ... < b_m.

    Coefficients are interior-supported space-time fields with a_k >= 0.
    """

    terms: tuple  # of (float exponent, SpaceTimeField coefficient)

    def __post_init__(self):
        bs = [b for b, _ in self.terms]
        if any(b <= 0 for b in bs) or any(b2 <= b1 for b1, b2 in zip(bs, bs[1:])):
            raise ValueError(f"exponents must be positive and increasing, got {bs}")
        for _, a in self.terms:
            if a.support != "interior":
                raise ValueError("coefficient fields must have interior support")
            if np.any(a.values < 0.0):
                raise ValueError("coefficient fields must be nonnegative")

    @classmethod
    def empty(cls) -> "Nonlinearity":
        return cls(terms=())

    @classmethod
    def single(cls, b, a_field) -> "Nonlinearity":
        return cls(terms=((float(b), a_field),))

    @classmethod
    def constant(cls, grid, tgrid, pairs) -> "Nonlinearity":
        """Terms with spatially constant coefficients: pairs of (b, value)."""
        terms = []
        for b, val in pairs:
            a = SpaceTimeField.from_values(
                grid, tgrid, np.full((grid.n_nodes, tgrid.n_times), float(val)), "interior"
            )
            terms.append((float(b), a))
        return cls(terms=tuple(terms))

    @property
    def exponents(self):
        return tuple(b for b, _ in self.terms)

    def eval_interior(self, u_int: np.ndarray, interior_idx: np.ndarray, step=None) -> np.ndarray:
        """sum_k a_k |u|^{b_k} u on interior values (n_interior x n_times).

        step selects a single time column of the coefficients when u_int
        holds one time slice.
        """
        out = np.zeros_like(u_int)
        if not self.terms:
            return out
        absu = np.abs(u_int)
        nz = absu > 0.0
        for b, a in self.terms:
            powed = np.zeros_like(u_int)
            # |u|^b via exp(b log|u|); the zero branch stays exactly zero
            powed[nz] = np.exp(b * np.log(absu[nz]))
            coeff = a.values[interior_idx]
            if step is not None:
                coeff = coeff[:, step : step + 1]
            out += coeff * powed * u_int
        return out


def eval_nonlinearity(nl: Nonlinearity, u: SpaceTimeField) -> SpaceTimeField:
    """Pointwise sum_k a_k(x,t) |u|^{b_k} u as an interior-supported field."""
    grid, tgrid = u.grid, u.tgrid
    intr = grid.interior_indices
    vals = np.zeros_like(u.values)
    vals[intr] = nl.eval_interior(u.values[intr], intr)
    return SpaceTimeField(grid, tgrid, vals, "interior")


# ---------------------------------------------------------------------------
# fixed-point solver
# ---------------------------------------------------------------------------


@dataclass
class SolveReport:
    """Outcome of a fixed-point (or stepper) solve."""

    u: SpaceTimeField
    iterations: int
    final_residual: float
    contraction_ratios: list
    ball_radius: float
    triple: AdmissibleTriple
    converged: bool
    tol: float
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "final_residual": self.final_residual,
            "contraction_ratios": list(map(float, self.contraction_ratios)),
            "ball_radius": self.ball_radius,
            "exponents_qpr": [self.triple.q, self.triple.p, self.triple.r],
            "converged": self.converged,
            "tol": self.tol,
            **{k: v for k, v in self.extras.items() if np.isscalar(v)},
        }


def _solution_triple(nl: Nonlinearity, grid, s) -> AdmissibleTriple:
    if nl.terms:
        return choose_exponents(nl.exponents, grid.dim, s)
    return AdmissibleTriple(q=math.inf, p=2.0, r=2.0)


def _ball_radius(nl, f, tgrid, triple, cell_volume):
    """Reported fixed-point ball radius: sqrt of the source norm.

    The norm is L^{q/(b+1)}(0,T; L^{p/(b+1)}) with b the top exponent,
    matching the choice made in the existence proof; reporting only.
    """
    if not nl.terms:
        b_top = 0.0
    else:
        b_top = nl.exponents[-1]
    from .semigroup import lp_space_norm, lq_time_norm

    p_eff = triple.p / (b_top + 1.0)
    q_eff = triple.q / (b_top + 1.0) if not math.isinf(triple.q) else math.inf
    series = lp_space_norm(f, p_eff, cell_volume)
    return float(math.sqrt(lq_time_norm(series, q_eff, tgrid)))


def picard_solve_source(
    sg: RestrictedSemigroup,
    nl: Nonlinearity,
    f: np.ndarray,
    tgrid: TimeGrid,
    tol: float = 1e-10,
    max_iter: int = 60,
) -> SolveReport:
    """Solve u = G(f - a(.,.,u)) on interior nodes by successive substitution.

    Parameters
    ----------
    f : ndarray (n_interior, n_times)
        Interior source per time node.
    tol : float
        Sup-node absolute residual between successive iterates.

    Raises
    ------
    NonContractionError
        If the contraction ratio is >= 1 for three consecutive iterations.
    IterationLimitError
        If max_iter is reached first.
    """
    grid = sg.grid
    intr = grid.interior_indices
    triple = _solution_triple(nl, grid, sg.s)
    cell = grid.cell_volume

    u = np.zeros_like(f)
    prev_diff_norm = None
    ratios: list[float] = []
    bad_streak = 0
    blowup = 1e6 * (1.0 + float(np.max(np.abs(f))))
    for it in range(1, max_iter + 1):
        rhs = f - nl.eval_interior(u, intr)
        u_new = duhamel_G(sg, rhs, tgrid)
        diff = u_new - u
        residual = float(np.max(np.abs(diff)))
        if not math.isfinite(residual) or residual > blowup:
            raise NonContractionError(
                "iterates diverged; exterior data too large for the fixed-point regime"
            )
        diff_norm = x_norm(diff, triple, cell, tgrid)
        if prev_diff_norm is not None and prev_diff_norm > 0:
            ratio = diff_norm / prev_diff_norm
            ratios.append(ratio)
            bad_streak = bad_streak + 1 if ratio >= 1.0 else 0
            if bad_streak >= 3:
                raise NonContractionError(
                    f"contraction ratio >= 1 for three iterations (last {ratio:.3g}); "
                    "exterior data too large for the fixed-point regime"
                )
        prev_diff_norm = diff_norm
        u = u_new
        if residual <= tol:
            return SolveReport(
                u=_interior_field(grid, tgrid, u),
                iterations=it,
                final_residual=residual,
                contraction_ratios=ratios,
                ball_radius=_ball_radius(nl, f, tgrid, triple, cell),
                triple=triple,
                converged=True,
                tol=tol,
            )
    raise IterationLimitError(
        f"no convergence within {max_iter} iterations (residual {residual:.3g}, tol {tol:.3g})"
    )


def _interior_field(grid, tgrid, u_int):
    vals = np.zeros((grid.n_nodes, tgrid.n_times))
    vals[grid.interior_indices] = u_int
    return SpaceTimeField(grid, tgrid, vals, "interior")


def exterior_source(op: FracOperator, g: SpaceTimeField) -> np.ndarray:
    """Interior source -(A g) induced by exterior data g (n_interior x n_times)."""
    intr = op.grid.interior_indices
    return -(op.matrix[intr] @ g.values)


def solve_with_exterior_data(
    sg: RestrictedSemigroup,
    op: FracOperator,
    nl: Nonlinearity,
    g: SpaceTimeField,
    tol: float = 1e-10,
    max_iter: int = 60,
) -> SolveReport:
    """Solve the exterior-data problem by lifting: u = w + g.

    g must be exterior-supported with a zero initial slice; w solves the
    zero-exterior problem with source -(A g) restricted to the interior.
    The returned field carries u = w + g on all nodes.
    """
    if g.support not in ("exterior", "control-window"):
        raise ValueError("exterior data must be exterior-supported")
    if np.any(g.values[:, 0] != 0.0):
        raise ValueError("exterior data must vanish on the initial slice")
    grid, tgrid = g.grid, g.tgrid
    f = exterior_source(op, g)
    report = picard_solve_source(sg, nl, f, tgrid, tol=tol, max_iter=max_iter)
    u_vals = report.u.values + g.values
    report.u = SpaceTimeField(grid, tgrid, u_vals, "everywhere")
    report.extras["lift"] = "interior solution plus exterior data"
    return report


def imex_oracle(
    op: FracOperator,
    nl: Nonlinearity,
    g: SpaceTimeField | None,
    f: np.ndarray | None,
    tgrid: TimeGrid,
) -> SpaceTimeField:
    """First-order time stepper: implicit linear part, explicit nonlinearity.

    Step: (I + dt A_II) u^{j+1} = u^j + dt (f^{j+1} - a(u^j)) - dt A_IE g^{j+1}.
    Independent of the spectral/convolution route; used as an oracle.
    """
    grid = op.grid
    intr = grid.interior_indices
    ext = grid.exterior_indices
    K = intr.size
    dt = tgrid.dt
    n_times = tgrid.n_times

    if f is None:
        f = np.zeros((K, n_times))
    if g is not None and np.any(g.values[:, 0] != 0.0):
        raise ValueError("exterior data must vanish on the initial slice")

    A_II = op.interior_matrix
    A_IE = op.matrix[np.ix_(intr, ext)]
    system = np.eye(K) + dt * A_II
    cho = linalg.cho_factor(system)

    u = np.zeros((K, n_times))
    for j in range(n_times - 1):
        a_now = nl.eval_interior(u[:, j : j + 1], intr, step=j)[:, 0]
        rhs = u[:, j] + dt * (f[:, j + 1] - a_now)
        if g is not None:
            rhs -= dt * (A_IE @ g.values[ext, j + 1])
        u[:, j + 1] = linalg.cho_solve(cho, rhs)

    vals = np.zeros((grid.n_nodes, n_times))
    vals[intr] = u
    if g is not None:
        vals += g.values
    return SpaceTimeField(grid, tgrid, vals, "everywhere")


def pde_residual(
    op: FracOperator, nl: Nonlinearity, u: SpaceTimeField, f: np.ndarray | None = None
) -> float:
    """Max interior residual of the forward-difference form of the equation.

    residual_j = (u_{j+1} - u_j)/dt + (A u)_j + a(u)_j - f_j, computed
    independently of any solver; first-order in dt for smooth-in-time data.
    """
    grid, tgrid = u.grid, u.tgrid
    intr = grid.interior_indices
    dt = tgrid.dt
    Au = (op.matrix @ u.values)[intr]
    a_u = nl.eval_interior(u.values[intr], intr)
    du = (u.values[intr][:, 1:] - u.values[intr][:, :-1]) / dt
    res = du + Au[:, :-1] + a_u[:, :-1]
    if f is not None:
        res -= f[:, :-1]
    return float(np.max(np.abs(res)))


# ---------------------------------------------------------------------------
# maximum-principle style checks
# ---------------------------------------------------------------------------


@dataclass
class BoundReport:
    ok: bool
    lhs: float
    rhs: float
    worst_node: int
    worst_step: int


def check_linf_bound(
    u: SpaceTimeField, f_sup: float, g_sup: float, T: float, slack: float = 1e-8
) -> BoundReport:
    """Sup bound |u| <= T * sup|f| + sup|g| (+ slack) with worst location."""
    vals = np.abs(u.values)
    lhs = float(vals.max())
    i, j = np.unravel_index(np.argmax(vals), vals.shape)
    rhs = T * f_sup + g_sup + slack
    return BoundReport(ok=lhs <= rhs, lhs=lhs, rhs=rhs, worst_node=int(i), worst_step=int(j))


@dataclass
class UniquenessReport:
    picard_pair_distance: float
    imex_distance: float
    distances: dict


def check_uniqueness(
    sg: RestrictedSemigroup,
    op: FracOperator,
    nl: Nonlinearity,
    g: SpaceTimeField,
    tol: float = 1e-10,
    max_iter: int = 60,
) -> UniquenessReport:
    """Multi-start uniqueness probe.

    Runs the fixed-point iteration from zero and from the linear lift
    G(-A g), plus the implicit-explicit stepper.  The two fixed-point runs
    must agree to ~10x the solver tolerance; the stepper distance is
    reported for reference (it carries its own O(dt) discretization error).
    """
    grid, tgrid = g.grid, g.tgrid
    f = exterior_source(op, g)

    rep_zero = picard_solve_source(sg, nl, f, tgrid, tol=tol, max_iter=max_iter)

    # second start: the linear solution (fixed point of the a = 0 map)
    lift = duhamel_G(sg, f, tgrid)
    u = lift
    intr = grid.interior_indices
    for _ in range(max_iter):
        u_new = duhamel_G(sg, f - nl.eval_interior(u, intr), tgrid)
        if np.max(np.abs(u_new - u)) <= tol:
            u = u_new
            break
        u = u_new
    u_lift = _interior_field(grid, tgrid, u)

    u_imex = imex_oracle(op, nl, g, None, tgrid)

    def dist(a, b, support="interior"):
        diff = SpaceTimeField.from_values(
            grid, tgrid, a.values - b.values, "everywhere"
        )
        return l2_spacetime_norm(diff, "interior")

    d_pair = dist(rep_zero.u, u_lift)
    # compare interiors only: the imex field carries g on the exterior
    d_imex = max(dist(rep_zero.u, u_imex), dist(u_lift, u_imex))
    return UniquenessReport(
        picard_pair_distance=d_pair,
        imex_distance=d_imex,
        distances={"picard_pair": d_pair, "imex_vs_picard": d_imex},
    )
