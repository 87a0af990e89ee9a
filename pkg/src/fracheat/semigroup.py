"""Evolution operators: restricted and free semigroups, time convolution.

The restricted semigroup is the solution operator of the homogeneous
problem with zero exterior values, computed exactly (for the discrete
operator) through the eigendecomposition of the interior block.  The free
semigroup convolves with the heat kernel on the box.  The time-convolution
operator

    (G f)(t) = integral_0^t S_restricted(t - tau) f(tau) dtau

uses trapezoid weights; the integrand is smooth since the semigroup at
zero lag is the identity.

Also here: the exponent bookkeeping for the (q, p, r) scaling triples that
close the fixed-point argument, and the decay / comparison diagnostics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, linalg

from .fracop import FracOperator, heat_kernel_cell_integral, heat_kernel_eval
from .geometry import SpaceGrid, SpaceTimeField, TimeGrid

__all__ = [
    "RestrictedSemigroup",
    "FreePropagator",
    "AdmissibleTriple",
    "restricted_apply",
    "duhamel_G",
    "check_decay_free",
    "check_decay_restricted",
    "check_comparison",
    "admissible",
    "exponent_q",
    "choose_exponents",
    "lp_space_norm",
    "lq_time_norm",
    "x_norm",
    "DecayReport",
    "ComparisonReport",
]


# ---------------------------------------------------------------------------
# restricted semigroup
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RestrictedSemigroup:
    """Spectral form of the zero-exterior evolution on interior nodes.

    eigvals are strictly positive and ascending; eigvecs columns are the
    orthonormal eigenvectors of the interior block.
    """

    grid: SpaceGrid
    s: float
    eigvals: np.ndarray
    eigvecs: np.ndarray

    def __post_init__(self):
        self.eigvals.flags.writeable = False
        self.eigvecs.flags.writeable = False

    @classmethod
    def from_operator(cls, op: FracOperator) -> "RestrictedSemigroup":
        A_II = op.interior_matrix
        vals, vecs = linalg.eigh(A_II)
        if vals[0] <= 0:
            raise ValueError(f"interior operator not positive definite: min eig {vals[0]}")
        return cls(grid=op.grid, s=op.s, eigvals=vals, eigvecs=vecs)

    @property
    def n_interior(self) -> int:
        return self.eigvals.shape[0]

    def eigen_residual(self, op: FracOperator) -> float:
        """Max residual |A_II v - mu v| over eigenpairs."""
        A_II = op.interior_matrix
        res = A_II @ self.eigvecs - self.eigvecs * self.eigvals[None, :]
        return float(np.max(np.abs(res)))

    def apply(self, t: float, f: np.ndarray) -> np.ndarray:
        """exp(-t A_II) f for interior values f (vector or stacked columns)."""
        if t < 0:
            raise ValueError("semigroup time must be nonnegative")
        fh = self.eigvecs.T @ f
        decay = np.exp(-self.eigvals * t)
        if fh.ndim == 1:
            return self.eigvecs @ (decay * fh)
        return self.eigvecs @ (decay[:, None] * fh)


def restricted_apply(sg: RestrictedSemigroup, t: float, f: np.ndarray) -> np.ndarray:
    """Functional form of RestrictedSemigroup.apply."""
    return sg.apply(t, f)


# ---------------------------------------------------------------------------
# free semigroup (kernel convolution on the box)
# ---------------------------------------------------------------------------


class FreePropagator:
    """Convolution with the heat kernel on the truncated box.

    Weights are exact cell integrals of the kernel (Fourier-side quadrature
    in 1-d, tensor Gauss per cell in 2-d), so the discrete convolution is
    exact for piecewise-constant data up to the kernel-evaluation tolerance;
    tables are cached per time.
    """

    _GAUSS_X = np.array([-0.861136311594053, -0.339981043584856,
                         0.339981043584856, 0.861136311594053])
    _GAUSS_W = np.array([0.347854845137454, 0.652145154862546,
                         0.652145154862546, 0.347854845137454])

    def __init__(self, grid: SpaceGrid, s: float):
        self.grid = grid
        self.s = s
        self._tables: dict[float, np.ndarray] = {}

    def _offset_weights(self, t: float) -> np.ndarray:
        grid = self.grid
        h = grid.h
        if grid.dim == 1:
            m = round(2.0 * grid.L / h)
            offsets = np.arange(0, m + 1) * h  # kernel is even: tabulate d >= 0
            half = np.empty_like(offsets)
            for k, d in enumerate(offsets):
                half[k] = heat_kernel_cell_integral(self.s, d, h, t)
            # table index t corresponds to the signed offset (t - m) * h
            return np.concatenate([half[m:0:-1], half])
        # 2-d: tensor Gauss over the square cell, radially symmetric kernel
        m = round(2.0 * grid.L / h)
        axis = np.arange(-m, m + 1) * h
        w = np.empty((axis.size, axis.size))
        kernel_cache: dict[float, float] = {}

        def k_of(r):
            key = round(r / (1e-6 * h)) * (1e-6 * h)
            if key not in kernel_cache:
                kernel_cache[key] = heat_kernel_eval(self.s, key, t, n=2)
            return kernel_cache[key]

        gx = 0.5 * h * self._GAUSS_X
        gw = 0.5 * h * self._GAUSS_W
        for i, dx in enumerate(axis):
            for j, dy in enumerate(axis):
                if j < i:
                    w[i, j] = w[j, i]
                    continue
                acc = 0.0
                for a, wa in zip(gx, gw):
                    for b, wb in zip(gx, gw):
                        acc += wa * wb * k_of(math.hypot(dx + a, dy + b))
                w[i, j] = acc
        return w

    def _table(self, t: float) -> np.ndarray:
        if t not in self._tables:
            self._tables[t] = self._offset_weights(t)
        return self._tables[t]

    def apply(self, t: float, values: np.ndarray) -> np.ndarray:
        """Free evolution of node values (vector over nodes) at time t > 0."""
        if t <= 0:
            raise ValueError("free propagation requires t > 0")
        grid = self.grid
        table = self._table(t)
        m = round(2.0 * grid.L / grid.h)
        if grid.dim == 1:
            out = np.empty(grid.n_nodes)
            for i in range(grid.n_nodes):
                out[i] = table[m - i : 2 * m + 1 - i] @ values
            return out
        n_ax = m + 1
        vals = values.reshape(n_ax, n_ax)
        out = np.empty_like(vals)
        for i in range(n_ax):
            for j in range(n_ax):
                block = table[m - i : 2 * m + 1 - i, m - j : 2 * m + 1 - j]
                out[i, j] = np.sum(block * vals)
        return out.ravel()


# ---------------------------------------------------------------------------
# time convolution
# ---------------------------------------------------------------------------


def duhamel_G(sg: RestrictedSemigroup, f: np.ndarray, tgrid: TimeGrid) -> np.ndarray:
    """Trapezoid discretization of the source-to-solution convolution.

    Parameters
    ----------
    sg : RestrictedSemigroup
    f : ndarray, shape (n_interior, n_times)
        Source on interior nodes per time node.
    tgrid : TimeGrid

    Returns
    -------
    ndarray, shape (n_interior, n_times) with zero first column.
    """
    K, n_times = f.shape
    if K != sg.n_interior or n_times != tgrid.n_times:
        raise ValueError("source shape does not match semigroup/time grid")
    dt = tgrid.dt
    fh = sg.eigvecs.T @ f
    decay = np.exp(-np.outer(sg.eigvals, dt * np.arange(n_times)))
    gh = np.zeros_like(fh)
    for j in range(1, n_times):
        w = np.full(j + 1, dt)
        w[0] = 0.5 * dt
        w[j] = 0.5 * dt
        # sum_i w_i exp(-mu (t_j - tau_i)) fh_i
        gh[:, j] = np.einsum("i,ki->k", w, decay[:, j::-1] * fh[:, : j + 1])
    return sg.eigvecs @ gh


# ---------------------------------------------------------------------------
# norms
# ---------------------------------------------------------------------------


def lp_space_norm(values: np.ndarray, p: float, cell_volume: float) -> np.ndarray:
    """L^p norm over nodes, applied per time column (p = inf allowed).

    A one-dimensional input is treated as a single column; the result is
    then a length-one array.  The peak is factored out before powering so
    large exponents cannot overflow.
    """
    a = np.abs(values)
    if a.ndim == 1:
        a = a[:, None]
    if math.isinf(p):
        return a.max(axis=0)
    peak = a.max(axis=0)
    safe = np.where(peak > 0.0, peak, 1.0)
    return peak * (np.sum((a / safe) ** p, axis=0) * cell_volume) ** (1.0 / p)


def lq_time_norm(series: np.ndarray, q: float, tgrid: TimeGrid) -> float:
    """L^q norm in time of a per-time-node series (trapezoid weights)."""
    if math.isinf(q):
        return float(np.max(np.abs(series)))
    a = np.abs(series)
    peak = float(a.max())
    if peak == 0.0:
        return 0.0
    w = tgrid.trapezoid_weights
    return float(peak * np.sum((a / peak) ** q * w) ** (1.0 / q))


def x_norm(values: np.ndarray, triple: "AdmissibleTriple", cell_volume: float, tgrid: TimeGrid) -> float:
    """Solution-space norm: L^q(0,T; L^p) + sup_t L^r."""
    lq = lq_time_norm(lp_space_norm(values, triple.p, cell_volume), triple.q, tgrid)
    lr = float(np.max(lp_space_norm(values, triple.r, cell_volume)))
    return lq + lr


# ---------------------------------------------------------------------------
# scaling exponents
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdmissibleTriple:
    """Exponents with 1/q = (n/2s)(1/r - 1/p) under the usual constraints."""

    q: float
    p: float
    r: float


def exponent_q(r: float, p: float, n: int, s: float) -> float:
    """The q determined by the scaling identity (inf when r = p)."""
    gap = 1.0 / r - 1.0 / p
    if gap == 0.0:
        return math.inf
    return 1.0 / ((n / (2.0 * s)) * gap)


def admissible(q: float, p: float, r: float, n: int, s: float) -> bool:
    """Check the defining relations of an admissible exponent triple."""
    if not 1.0 < r <= p:
        return False
    if n > 2.0 * s and not p < n * r / (n - 2.0 * s):
        return False
    q_expected = exponent_q(r, p, n, s)
    if math.isinf(q_expected):
        return math.isinf(q)
    return abs(1.0 / q - 1.0 / q_expected) < 1e-12


def choose_exponents(b_list, n: int, s: float, max_r: int = 10_000) -> AdmissibleTriple:
    """Pick (q, p, r) serving every exponent in b_list simultaneously.

    Follows the recipe: r above both n*b_m/(2s) and 2(b_m+1); then p > r
    with p/r strictly below n/(n-2s) (dropped when n <= 2s) and below
    b_1 + 1; q from the scaling identity.  Integer r and p are preferred;
    raises ValueError if no integer pair exists below max_r.
    """
    b_list = sorted(float(b) for b in b_list)
    if not b_list or b_list[0] <= 0:
        raise ValueError("exponents must be positive")
    b_min, b_max = b_list[0], b_list[-1]
    r_floor = max(n * b_max / (2.0 * s), 2.0 * (b_max + 1.0))
    ratio_cap = b_min + 1.0
    if n > 2.0 * s:
        ratio_cap = min(ratio_cap, n / (n - 2.0 * s))
    r = int(math.floor(r_floor)) + 1
    while r <= max_r:
        p = r + 1
        if p / r < ratio_cap - 1e-12:
            q = exponent_q(r, p, n, s)
            triple = AdmissibleTriple(q=q, p=float(p), r=float(r))
            _check_serves(triple, b_list, n, s)
            return triple
        r += 1
    raise ValueError(f"no integer exponent pair below r={max_r} for b={b_list}")


def _check_serves(triple, b_list, n, s):
    q, p, r = triple.q, triple.p, triple.r
    if not admissible(q, p, r, n, s):
        raise ValueError(f"chosen triple {triple} not admissible")
    for b in b_list:
        ok = (
            r > n * b / (2.0 * s)
            and 2.0 * (b + 1.0) <= p < r * (b + 1.0)
        )
        if not ok:
            raise ValueError(f"triple {triple} fails the estimate hypotheses at b={b}")


# ---------------------------------------------------------------------------
# decay and comparison diagnostics
# ---------------------------------------------------------------------------


@dataclass
class DecayReport:
    r: float
    p: float
    exponent: float
    slope: float
    max_ratio: float
    rows: list = field(default_factory=list)  # (t, norm, theory, ratio)


def _decay_rows(norms, t_list, f_norm_r, exponent):
    rows = []
    for t, nrm in zip(t_list, norms):
        theory = t ** (-exponent) * f_norm_r
        rows.append((float(t), float(nrm), float(theory), float(nrm / theory)))
    return rows


def _fit_slope(t_list, norms):
    if len(t_list) < 3:
        raise ValueError("need at least 3 samples to fit a decay slope")
    logt = np.log(np.asarray(t_list))
    logn = np.log(np.maximum(np.asarray(norms), 1e-300))
    return float(np.polyfit(logt, logn, 1)[0])


def check_decay_free(
    prop: FreePropagator, f: np.ndarray, r: float, p: float, t_list
) -> DecayReport:
    """Measured free-evolution norms against the dispersive-decay rate.

    Computes |S(t) f|_p / (t^{-(n/2s)(1/r - 1/p)} |f|_r) over t_list, the
    fitted log-log slope of the norms, and the worst ratio to the theory
    rate (the bound asserts the ratio admits a uniform constant).
    """
    if not 2.0 <= r <= p:
        raise ValueError("decay estimate requires 2 <= r <= p")
    grid = prop.grid
    n, s = grid.dim, prop.s
    exponent = (n / (2.0 * s)) * (1.0 / r - 1.0 / p)
    f_r = float(lp_space_norm(f, r, grid.cell_volume)[0])
    norms = [float(lp_space_norm(prop.apply(t, f), p, grid.cell_volume)[0]) for t in t_list]
    rows = _decay_rows(norms, t_list, f_r, exponent)
    return DecayReport(
        r=r,
        p=p,
        exponent=exponent,
        slope=_fit_slope(t_list, norms),
        max_ratio=max(row[3] for row in rows),
        rows=rows,
    )


def check_decay_restricted(
    sg: RestrictedSemigroup, f_int: np.ndarray, r: float, p: float, t_list
) -> DecayReport:
    """Same ratio diagnostic for the zero-exterior evolution on interior nodes."""
    if not 2.0 <= r <= p:
        raise ValueError("decay estimate requires 2 <= r <= p")
    grid = sg.grid
    n, s = grid.dim, sg.s
    exponent = (n / (2.0 * s)) * (1.0 / r - 1.0 / p)
    f_r = float(lp_space_norm(f_int, r, grid.cell_volume)[0])
    norms = [
        float(lp_space_norm(sg.apply(t, f_int), p, grid.cell_volume)[0]) for t in t_list
    ]
    rows = _decay_rows(norms, t_list, f_r, exponent)
    return DecayReport(
        r=r,
        p=p,
        exponent=exponent,
        slope=_fit_slope(t_list, norms),
        max_ratio=max(row[3] for row in rows),
        rows=rows,
    )


@dataclass
class ComparisonReport:
    ok: bool
    max_violation_first: float
    max_violation_second: float
    worst_node: int


def check_comparison(
    sg: RestrictedSemigroup,
    free_flow,
    f_int: np.ndarray,
    t: float,
    slack: float = 1e-8,
) -> ComparisonReport:
    """Pointwise chain |S_res(t) f| <= S_res(t)|f| <= S_free(t)|f| on interior nodes.

    free_flow supplies the whole-box evolution: either a FracOperator (the
    flow exp(-t A) of the same discretization, computed by a Pade matrix
    exponential -- a different solver than the spectral route -- for which
    both inequalities are entrywise-exact M-matrix facts), or a
    FreePropagator (the heat-kernel convolution, an independent
    discretization whose agreement is limited by quadrature error; use a
    correspondingly looser slack).
    """
    grid = sg.grid
    intr = grid.interior_indices
    if t == 0.0:
        lhs = np.abs(f_int)
        mid = np.abs(f_int)
        free = np.abs(f_int)
    else:
        lhs = np.abs(sg.apply(t, f_int))
        mid = sg.apply(t, np.abs(f_int))
        full = np.zeros(grid.n_nodes)
        full[intr] = np.abs(f_int)
        if isinstance(free_flow, FreePropagator):
            free = free_flow.apply(t, full)[intr]
        else:
            free = (linalg.expm(-t * free_flow.matrix) @ full)[intr]
    v1 = float(np.max(lhs - mid))
    v2 = float(np.max(mid - free))
    worst = int(intr[np.argmax(mid - free)])
    return ComparisonReport(
        ok=(v1 <= slack and v2 <= slack),
        max_violation_first=v1,
        max_violation_second=v2,
        worst_node=worst,
    )
