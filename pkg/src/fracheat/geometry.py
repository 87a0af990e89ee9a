"""Discrete geometry: truncated domains, exterior windows, space-time fields.

The computational box is [-L, L]^n (n = 1 or 2) with uniform spacing h.
Nodes are split into an interior region (the diffusion domain), its
complement inside the box (the truncated exterior), and two disjoint
exterior windows: a control window where driving data lives and an
observation window where measurements are read off.  Functions are
extended by zero beyond the box; all the exterior data we ever use is
compactly supported, so the truncation radius L is a convergence
parameter, not part of the model.

Space integrals use the rectangle rule with cell volume h^n; time
integrals use trapezoid weights on the uniform time grid.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "GeometryError",
    "SpaceGrid",
    "TimeGrid",
    "SpaceTimeField",
    "SUPPORT_TAGS",
    "build_grid",
    "build_time_grid",
    "l2_spacetime_norm",
    "linf_norm",
    "grid_to_csv",
    "grid_header",
    "field_to_csv",
    "field_from_csv",
]

# Tolerance for "is this coordinate on the grid / inside a region" tests.
_GEOM_TOL = 1e-9

SUPPORT_TAGS = (
    "everywhere",
    "interior",
    "exterior",
    "control-window",
    "observation-window",
)


class GeometryError(ValueError):
    """Invalid grid construction request (region overlap, box violation, ...)."""


# ---------------------------------------------------------------------------
# region specs
# ---------------------------------------------------------------------------
#
# A region spec is a plain tuple:
#   (lo, hi)                     1-d open interval (sugar)
#   ("interval", lo, hi)         1-d open interval
#   ("ball", r)                  open ball of radius r centred at the origin
#   ("ball", (cx, cy), r)        open ball centred at (cx, cy)
#   ("box", (lo, hi), (lo, hi))  open axis-aligned box (2-d)
#   ("union", spec, spec, ...)   union of open regions


def _normalize_region(spec, dim):
    if dim == 1 and len(spec) == 2 and not isinstance(spec[0], str):
        spec = ("interval", float(spec[0]), float(spec[1]))
    kind = spec[0]
    if kind == "union":
        parts = tuple(_normalize_region(p, dim) for p in spec[1:])
        if not parts:
            raise GeometryError("empty union region")
        return ("union",) + parts
    if kind == "interval":
        if dim != 1:
            raise GeometryError("interval regions are one-dimensional")
        lo, hi = float(spec[1]), float(spec[2])
        if not lo < hi:
            raise GeometryError(f"empty interval ({lo}, {hi})")
        return ("interval", lo, hi)
    if kind == "ball":
        if len(spec) == 2:
            center, r = (0.0,) * dim, float(spec[1])
        else:
            center = tuple(float(c) for c in np.atleast_1d(spec[1]))
            r = float(spec[2])
        if len(center) != dim:
            raise GeometryError("ball center has wrong dimension")
        if r <= 0:
            raise GeometryError("ball radius must be positive")
        return ("ball", center, r)
    if kind == "box":
        if dim != 2:
            raise GeometryError("box regions are two-dimensional")
        (xlo, xhi), (ylo, yhi) = spec[1], spec[2]
        if not (xlo < xhi and ylo < yhi):
            raise GeometryError("empty box region")
        return ("box", (float(xlo), float(xhi)), (float(ylo), float(yhi)))
    raise GeometryError(f"unknown region kind {kind!r}")


def _region_mask(spec, nodes):
    """Boolean mask of nodes strictly inside the open region."""
    kind = spec[0]
    tol = _GEOM_TOL
    if kind == "union":
        mask = np.zeros(nodes.shape[0], dtype=bool)
        for part in spec[1:]:
            mask |= _region_mask(part, nodes)
        return mask
    if kind == "interval":
        x = nodes[:, 0]
        return (x > spec[1] + tol) & (x < spec[2] - tol)
    if kind == "ball":
        center = np.asarray(spec[1])
        return np.linalg.norm(nodes - center, axis=1) < spec[2] - tol
    if kind == "box":
        (xlo, xhi), (ylo, yhi) = spec[1], spec[2]
        x, y = nodes[:, 0], nodes[:, 1]
        return (
            (x > xlo + tol) & (x < xhi - tol) & (y > ylo + tol) & (y < yhi - tol)
        )
    raise GeometryError(f"unknown region kind {kind!r}")


def _region_bounds(spec, dim):
    """Axis-aligned bounding box of the region, as (lo, hi) per axis."""
    kind = spec[0]
    if kind == "union":
        parts = [_region_bounds(p, dim) for p in spec[1:]]
        return [
            (min(p[ax][0] for p in parts), max(p[ax][1] for p in parts))
            for ax in range(dim)
        ]
    if kind == "interval":
        return [(spec[1], spec[2])]
    if kind == "ball":
        c, r = spec[1], spec[2]
        return [(c[i] - r, c[i] + r) for i in range(dim)]
    if kind == "box":
        return [tuple(spec[1]), tuple(spec[2])]
    raise GeometryError(f"unknown region kind {kind!r}")


def _regions_overlap(spec_a, spec_b, dim, gap=0.0):
    """Conservative overlap test via bounding boxes (+ exact for ball/ball)."""
    if spec_a[0] == "union":
        return any(_regions_overlap(p, spec_b, dim, gap) for p in spec_a[1:])
    if spec_b[0] == "union":
        return any(_regions_overlap(spec_a, p, dim, gap) for p in spec_b[1:])
    if spec_a[0] == "ball" and spec_b[0] == "ball":
        d = np.linalg.norm(np.array(spec_a[1]) - np.array(spec_b[1]))
        return d < spec_a[2] + spec_b[2] + gap
    for (alo, ahi), (blo, bhi) in zip(
        _region_bounds(spec_a, dim), _region_bounds(spec_b, dim)
    ):
        if ahi + gap <= blo or bhi + gap <= alo:
            return False
    return True


# ---------------------------------------------------------------------------
# grids
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SpaceGrid:
    """Uniform grid on [-L, L]^dim with interior/exterior/window masks.

    Attributes
    ----------
    dim : int
        Spatial dimension, 1 or 2.
    L : float
        Truncation radius of the computational box.
    h : float
        Grid spacing (the same along every axis).
    nodes : ndarray, shape (n_nodes, dim)
        Node coordinates, lexicographically ordered.
    interior_mask, exterior_mask, control_mask, observation_mask : ndarray of bool
        Node classification.  Interior and exterior partition the nodes;
        both windows are subsets of the exterior.
    margin : float
        Declared minimal distance between the interior region and the
        box boundary.
    """

    dim: int
    L: float
    h: float
    nodes: np.ndarray
    interior_mask: np.ndarray
    exterior_mask: np.ndarray
    control_mask: np.ndarray
    observation_mask: np.ndarray
    margin: float
    omega_spec: tuple = field(default=(), compare=False)

    def __post_init__(self):
        for arr in (
            self.nodes,
            self.interior_mask,
            self.exterior_mask,
            self.control_mask,
            self.observation_mask,
        ):
            arr.flags.writeable = False

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def cell_volume(self) -> float:
        return self.h**self.dim

    @property
    def interior_indices(self) -> np.ndarray:
        return np.flatnonzero(self.interior_mask)

    @property
    def exterior_indices(self) -> np.ndarray:
        return np.flatnonzero(self.exterior_mask)

    @property
    def control_indices(self) -> np.ndarray:
        return np.flatnonzero(self.control_mask)

    @property
    def observation_indices(self) -> np.ndarray:
        return np.flatnonzero(self.observation_mask)

    def support_mask(self, tag: str) -> np.ndarray:
        """Boolean node mask for a support tag."""
        if tag == "everywhere":
            return np.ones(self.n_nodes, dtype=bool)
        if tag == "interior":
            return self.interior_mask
        if tag == "exterior":
            return self.exterior_mask
        if tag == "control-window":
            return self.control_mask
        if tag == "observation-window":
            return self.observation_mask
        raise GeometryError(f"unknown support tag {tag!r}")

    def content_hash(self) -> str:
        """Stable hash of the grid layout (used in measurement file headers)."""
        digest = hashlib.sha256()
        digest.update(f"{self.dim}:{self.L}:{self.h}:{self.margin}".encode())
        digest.update(self.nodes.tobytes())
        for m in (
            self.interior_mask,
            self.exterior_mask,
            self.control_mask,
            self.observation_mask,
        ):
            digest.update(np.packbits(m).tobytes())
        return digest.hexdigest()[:16]


@dataclass(frozen=True)
class TimeGrid:
    """Uniform time grid t_j = j*dt, j = 0..n_steps, on [0, T]."""

    T: float
    n_steps: int

    def __post_init__(self):
        if not self.T > 0:
            raise GeometryError("time horizon must be positive")
        if self.n_steps < 2:
            raise GeometryError("need at least 2 time steps")

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def n_times(self) -> int:
        return self.n_steps + 1

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_times)

    @property
    def trapezoid_weights(self) -> np.ndarray:
        w = np.full(self.n_times, self.dt)
        w[0] *= 0.5
        w[-1] *= 0.5
        return w


def build_time_grid(T: float, n_steps: int) -> TimeGrid:
    return TimeGrid(float(T), int(n_steps))


def _axis_coords(L, h):
    n_cells = 2.0 * L / h
    m = int(round(n_cells))
    if abs(n_cells - m) > 1e-9 or m < 2:
        raise GeometryError(f"spacing h={h} does not evenly divide [-L, L]")
    return np.linspace(-L, L, m + 1)


def build_grid(dim, L, h, omega_spec, window_specs, margin=None):
    """Build the truncated computational grid with all region masks.

    Parameters
    ----------
    dim : int
        1 or 2.
    L : float
        Box truncation radius.
    h : float
        Grid spacing; must evenly divide 2L.
    omega_spec : tuple
        Region spec for the interior diffusion domain (see module notes);
        must sit strictly inside the box with clearance >= margin.
    window_specs : (tuple, tuple)
        Region specs for the control and observation windows.  Both must
        lie in the exterior, away from the interior region's closure, and
        must not overlap each other.
    margin : float, optional
        Required clearance between the interior region and the box
        boundary.  Defaults to h.

    Returns
    -------
    SpaceGrid

    Raises
    ------
    GeometryError
        If the interior region touches the box, a window overlaps the
        interior region or the other window, or a window contains no
        grid node with all its axis neighbours.
    """
    if dim not in (1, 2):
        raise GeometryError("dim must be 1 or 2")
    L, h = float(L), float(h)
    if h <= 0 or L <= 0:
        raise GeometryError("L and h must be positive")
    margin = h if margin is None else float(margin)

    omega = _normalize_region(omega_spec, dim)
    if len(window_specs) != 2:
        raise GeometryError("expected exactly two windows (control, observation)")
    w_control = _normalize_region(window_specs[0], dim)
    w_observe = _normalize_region(window_specs[1], dim)

    # interior region strictly inside the box with the declared clearance
    for lo, hi in _region_bounds(omega, dim):
        if lo - (-L) < margin - _GEOM_TOL or L - hi < margin - _GEOM_TOL:
            raise GeometryError(
                f"interior region {omega} closer than margin={margin} to the box [-{L}, {L}]"
            )

    # windows: inside the box, clear of the interior region, disjoint
    for name, w in (("control", w_control), ("observation", w_observe)):
        for lo, hi in _region_bounds(w, dim):
            if lo < -L - _GEOM_TOL or hi > L + _GEOM_TOL:
                raise GeometryError(f"{name} window {w} leaves the box [-{L}, {L}]")
        if _regions_overlap(w, omega, dim):
            raise GeometryError(
                f"{name} window {w} overlaps the closure of the interior region {omega}"
            )
    if _regions_overlap(w_control, w_observe, dim):
        raise GeometryError(
            f"windows overlap: control {w_control} and observation {w_observe}"
        )

    axis = _axis_coords(L, h)
    if dim == 1:
        nodes = axis[:, None].copy()
    else:
        X, Y = np.meshgrid(axis, axis, indexing="ij")
        nodes = np.column_stack([X.ravel(), Y.ravel()])

    interior = _region_mask(omega, nodes)
    if not interior.any():
        raise GeometryError("interior region contains no grid node")
    exterior = ~interior
    control = _region_mask(w_control, nodes)
    observe = _region_mask(w_observe, nodes)

    for name, mask in (("control", control), ("observation", observe)):
        if not mask.any():
            raise GeometryError(f"{name} window contains no grid node")
        if (mask & interior).any():
            raise GeometryError(f"{name} window intersects the interior region")

    return SpaceGrid(
        dim=dim,
        L=L,
        h=h,
        nodes=nodes,
        interior_mask=interior,
        exterior_mask=exterior,
        control_mask=control,
        observation_mask=observe,
        margin=margin,
        omega_spec=omega,
    )


# ---------------------------------------------------------------------------
# space-time fields
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SpaceTimeField:
    """Real values on grid nodes x time nodes with a declared support tag.

    Values outside the tagged support are exactly zero; the constructor
    enforces this.
    """

    grid: SpaceGrid
    tgrid: TimeGrid
    values: np.ndarray
    support: str = "everywhere"

    def __post_init__(self):
        if self.support not in SUPPORT_TAGS:
            raise GeometryError(f"unknown support tag {self.support!r}")
        vals = np.ascontiguousarray(self.values, dtype=float)
        expected = (self.grid.n_nodes, self.tgrid.n_times)
        if vals.shape != expected:
            raise GeometryError(
                f"field shape {vals.shape} does not match grid/time {expected}"
            )
        if not np.all(np.isfinite(vals)):
            raise GeometryError("field contains non-finite values")
        outside = ~self.grid.support_mask(self.support)
        if outside.any() and np.any(vals[outside] != 0.0):
            raise GeometryError(
                f"field has nonzero values outside its {self.support!r} support"
            )
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    @classmethod
    def zeros(cls, grid, tgrid, support="everywhere"):
        return cls(grid, tgrid, np.zeros((grid.n_nodes, tgrid.n_times)), support)

    @classmethod
    def from_values(cls, grid, tgrid, values, support="everywhere"):
        """Wrap an array, zeroing anything outside the declared support."""
        vals = np.array(values, dtype=float)
        vals[~grid.support_mask(support)] = 0.0
        return cls(grid, tgrid, vals, support)

    @classmethod
    def from_profile(cls, grid, tgrid, space_fn, time_fn=None, support="everywhere"):
        """Separable field space_fn(x) * time_fn(t) on the tagged support."""
        space = np.apply_along_axis(space_fn, 1, grid.nodes).astype(float)
        time = (
            np.ones(tgrid.n_times)
            if time_fn is None
            else np.array([time_fn(t) for t in tgrid.times], dtype=float)
        )
        return cls.from_values(grid, tgrid, np.outer(space, time), support)

    def content_hash(self) -> str:
        digest = hashlib.sha256()
        digest.update(self.support.encode())
        digest.update(self.values.tobytes())
        return digest.hexdigest()[:16]

    def restricted(self, mask) -> np.ndarray:
        """Submatrix of values on the masked nodes (mask: tag or bool array)."""
        if isinstance(mask, str):
            mask = self.grid.support_mask(mask)
        return self.values[mask]


def _resolve_mask(grid, mask):
    if mask is None:
        return np.ones(grid.n_nodes, dtype=bool)
    if isinstance(mask, str):
        return grid.support_mask(mask)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (grid.n_nodes,):
        raise GeometryError("mask length does not match the grid")
    return mask


def l2_spacetime_norm(f: SpaceTimeField, mask=None) -> float:
    """Discrete L^2 norm over (masked nodes) x (0, T).

    Rectangle rule in space (weight h^n per node), trapezoid rule in time.
    """
    m = _resolve_mask(f.grid, mask)
    w_t = f.tgrid.trapezoid_weights
    sq = np.sum(f.values[m] ** 2 * w_t[None, :]) * f.grid.cell_volume
    return float(np.sqrt(sq))


def linf_norm(f: SpaceTimeField, mask=None) -> float:
    """Max of |values| over masked nodes and all times (0 on an empty mask)."""
    m = _resolve_mask(f.grid, mask)
    if not m.any():
        return 0.0
    return float(np.max(np.abs(f.values[m])))


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def grid_header(grid: SpaceGrid, tgrid: TimeGrid | None = None, **extra) -> str:
    """JSON header describing a grid (and optionally its time grid)."""
    payload = {
        "dim": grid.dim,
        "L": grid.L,
        "h": grid.h,
        "margin": grid.margin,
        "n_nodes": grid.n_nodes,
        "grid_hash": grid.content_hash(),
    }
    if tgrid is not None:
        payload["T"] = tgrid.T
        payload["N_t"] = tgrid.n_steps
    payload.update(extra)
    return json.dumps(payload, sort_keys=True, indent=2)


def grid_to_csv(grid: SpaceGrid) -> str:
    """One row per node: id, coordinates, mask flags."""
    buf = io.StringIO()
    coords = ",".join(f"x{i}" for i in range(grid.dim))
    buf.write(f"node,{coords},interior,exterior,control,observation\n")
    for i in range(grid.n_nodes):
        xs = ",".join(repr(float(c)) for c in grid.nodes[i])
        flags = ",".join(
            str(int(m[i]))
            for m in (
                grid.interior_mask,
                grid.exterior_mask,
                grid.control_mask,
                grid.observation_mask,
            )
        )
        buf.write(f"{i},{xs},{flags}\n")
    return buf.getvalue()


def field_to_csv(f: SpaceTimeField) -> str:
    """One row per (node, time step): node, step, value."""
    buf = io.StringIO()
    buf.write("node,step,value\n")
    n_nodes, n_times = f.values.shape
    for i in range(n_nodes):
        row = f.values[i]
        for j in range(n_times):
            buf.write(f"{i},{j},{float(row[j])!r}\n")
    return buf.getvalue()


def field_from_csv(text: str, grid: SpaceGrid, tgrid: TimeGrid, support="everywhere"):
    values = np.zeros((grid.n_nodes, tgrid.n_times))
    lines = text.strip().splitlines()
    for line in lines[1:]:
        i, j, v = line.split(",")
        values[int(i), int(j)] = float(v)
    return SpaceTimeField(grid, tgrid, values, support)
