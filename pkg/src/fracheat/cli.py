"""Batch experiment runner: verify | forward | dtn | control | invert.

Experiments are described by a YAML config (human-editable tree of plain
keys); every run writes CSV data files plus JSON sidecars carrying the
config hash, and a run manifest.  Identical config and seed produce
byte-identical CSV output.

Exit codes: 0 success, 1 check violation, 2 config error, 3 solver failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from . import geometry
from .forward import (
    Nonlinearity,
    SolverError,
    check_linf_bound,
    check_uniqueness,
    exterior_source,
    imex_oracle,
    picard_solve_source,
    solve_with_exterior_data,
)
from .fracop import assemble_frac_laplacian, heat_kernel_eval, heat_kernel_mass
from .geometry import (
    GeometryError,
    SpaceTimeField,
    build_grid,
    build_time_grid,
    grid_header,
    grid_to_csv,
    l2_spacetime_norm,
)
from .inverse import (
    RecoveryError,
    RungeSynthesizer,
    dtn,
    load_measure_fn,
    recover_coefficients,
    recover_exponent,
    save_measurements,
    simulated_measure_fn,
)
from .semigroup import (
    FreePropagator,
    RestrictedSemigroup,
    check_comparison,
    check_decay_restricted,
    choose_exponents,
)

EXIT_OK = 0
EXIT_CHECK = 1
EXIT_CONFIG = 2
EXIT_SOLVER = 3


class ConfigError(ValueError):
    """Invalid experiment configuration."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    raw: dict
    path: str

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def section(self, name, default=None):
        return self.raw.get(name, {} if default is None else default)

    def build_grids(self):
        g = self.section("grid")
        t = self.section("time")
        try:
            grid = build_grid(
                dim=int(g.get("dim", 1)),
                L=float(g.get("extent", 4.0)),
                h=float(g.get("spacing", 1.0 / 32)),
                omega_spec=_as_region(g.get("interior", [-1.0, 1.0])),
                window_specs=(
                    _as_region(g["control_window"]),
                    _as_region(g["observation_window"]),
                ),
                margin=g.get("margin"),
            )
        except KeyError as exc:
            raise ConfigError(f"grid section missing {exc}") from exc
        tgrid = build_time_grid(float(t.get("horizon", 1.0)), int(t.get("steps", 64)))
        return grid, tgrid

    def order(self) -> float:
        s = float(self.section("operator").get("order", 0.5))
        if not 0.0 < s < 1.0:
            raise ConfigError(f"operator order s={s} outside (0, 1)")
        return s

    def nonlinearity(self, grid, tgrid) -> Nonlinearity:
        spec = self.section("nonlinearity")
        terms = []
        for term in spec.get("terms", []):
            b = float(term["exponent"])
            coeff = _coefficient_field(term["coefficient"], grid, tgrid, self.path)
            terms.append((b, coeff))
        return Nonlinearity(terms=tuple(terms))

    def exterior_data(self, grid, tgrid) -> SpaceTimeField:
        spec = self.section("exterior_data")
        profile = _space_profile(spec.get("profile", {"kind": "window-bump"}), grid)
        tprof = _time_profile(spec.get("time_profile", {"kind": "sin2"}), tgrid)
        amp = float(spec.get("amplitude", 0.1))
        vals = amp * np.outer(profile, tprof)
        return SpaceTimeField.from_values(grid, tgrid, vals, "control-window")

    def solver(self) -> dict:
        s = self.section("solver")
        return {
            "tol": float(s.get("tol", 1e-10)),
            "max_iter": int(s.get("max_iter", 60)),
            "kind": s.get("kind", "picard"),
        }

    def inversion(self) -> dict:
        s = self.section("inversion")
        return {
            "lambdas": [float(v) for v in s.get("lambdas", [2.0**-k for k in range(3, 9)])],
            "reg_weight": float(s.get("reg_weight", 1e-12)),
            "control_reg": float(s.get("control_reg", 1e-8)),
            "sweeps": int(s.get("sweeps", 2)),
            "smooth_x": float(s.get("smooth_x", 1.0)),
            "smooth_t": float(s.get("smooth_t", 1.0)),
            "measurements": s.get("measurements"),
            "exponents": s.get("exponents"),
            "recover_exponents": bool(s.get("recover_exponents", True)),
        }


def _as_region(spec):
    if isinstance(spec, (list, tuple)):
        if spec and isinstance(spec[0], str):
            if spec[0] == "union":
                return ("union",) + tuple(_as_region(p) for p in spec[1:])
            if spec[0] == "ball" and len(spec) == 3 and isinstance(spec[1], (list, tuple)):
                return ("ball", tuple(float(c) for c in spec[1]), float(spec[2]))
            return tuple([spec[0]] + [
                tuple(float(x) for x in v) if isinstance(v, (list, tuple)) else float(v)
                for v in spec[1:]
            ])
        return tuple(float(v) for v in spec)
    raise ConfigError(f"cannot parse region spec {spec!r}")


def _coefficient_field(spec, grid, tgrid, config_path):
    kind = spec.get("kind", "constant")
    if kind == "constant":
        value = float(spec["value"])
        vals = np.full((grid.n_nodes, tgrid.n_times), value)
    elif kind == "gaussian-bump":
        amp = float(spec.get("amplitude", 1.0))
        width = float(spec.get("width", 0.45))
        center = np.atleast_1d(spec.get("center", 0.0)).astype(float)
        d2 = np.sum((grid.nodes - center[None, : grid.dim]) ** 2, axis=1)
        vals = np.outer(amp * np.exp(-d2 / (2.0 * width**2)), np.ones(tgrid.n_times))
    elif kind == "tabulated":
        path = Path(spec["path"])
        if not path.is_absolute():
            path = Path(config_path).parent / path
        if not path.exists():
            raise ConfigError(f"tabulated coefficient file {path} does not exist")
        text = path.read_text()
        return geometry.field_from_csv(text, grid, tgrid, "interior")
    else:
        raise ConfigError(f"unknown coefficient kind {kind!r}")
    if np.any(vals < 0):
        raise ConfigError("coefficient fields must be nonnegative")
    return SpaceTimeField.from_values(grid, tgrid, vals, "interior")


def _space_profile(spec, grid):
    kind = spec.get("kind", "window-bump")
    x = grid.nodes
    if kind == "window-bump":
        # smooth bump on each connected run of control nodes
        mask = grid.control_mask
        prof = np.zeros(grid.n_nodes)
        idx = np.flatnonzero(mask)
        if grid.dim == 1:
            runs = np.split(idx, np.flatnonzero(np.diff(idx) > 1) + 1)
            for run in runs:
                tt = np.linspace(0.0, 1.0, run.size + 2)[1:-1]
                prof[run] = np.exp(-1.0 / (tt * (1.0 - tt)) + 4.0)
        else:
            prof[idx] = 1.0
        return prof / max(prof.max(), 1e-300)
    if kind == "gaussian-bump":
        amp = float(spec.get("amplitude", 1.0))
        width = float(spec.get("width", 0.3))
        center = np.atleast_1d(spec.get("center", 0.0)).astype(float)
        d2 = np.sum((x - center[None, : grid.dim]) ** 2, axis=1)
        return amp * np.exp(-d2 / (2.0 * width**2)) * grid.control_mask
    raise ConfigError(f"unknown exterior profile kind {kind!r}")


def _time_profile(spec, tgrid):
    kind = spec.get("kind", "sin2")
    t = tgrid.times
    T = tgrid.T
    if kind == "sin2":
        return np.sin(0.5 * np.pi * t / T) ** 2
    if kind == "linear":
        return t / T
    if kind == "ramp-hold":
        tau = float(spec.get("ramp", 0.25)) * T
        return np.where(t < tau, 0.5 * (1 - np.cos(np.pi * t / tau)), 1.0)
    raise ConfigError(f"unknown time profile kind {kind!r}")


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config parse error in {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    cfg = ExperimentConfig(raw=raw, path=str(path))
    cfg.build_grids()  # precondition validation at load time
    cfg.order()
    return cfg


# ---------------------------------------------------------------------------
# output plumbing
# ---------------------------------------------------------------------------


class RunWriter:
    """Collects CSV outputs with JSON sidecars and a manifest."""

    def __init__(self, out_dir, cfg: ExperimentConfig, quiet=False):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.cfg = cfg
        self.quiet = quiet
        self.files: list[str] = []

    def csv(self, name, header_cols, rows, **meta):
        path = self.dir / f"{name}.csv"
        with open(path, "w") as fh:
            fh.write(",".join(header_cols) + "\n")
            for row in rows:
                fh.write(",".join(_fmt(v) for v in row) + "\n")
        side = {"config_hash": self.cfg.config_hash, "columns": list(header_cols)}
        side.update(meta)
        with open(self.dir / f"{name}.json", "w") as fh:
            json.dump(side, fh, sort_keys=True, indent=2)
        self.files.append(f"{name}.csv")
        self.log(f"wrote {path}")

    def text(self, name, content, **meta):
        path = self.dir / name
        path.write_text(content)
        side = {"config_hash": self.cfg.config_hash}
        side.update(meta)
        with open(path.with_suffix(".json"), "w") as fh:
            json.dump(side, fh, sort_keys=True, indent=2)
        self.files.append(name)
        self.log(f"wrote {path}")

    def json(self, name, payload):
        path = self.dir / f"{name}.json"
        body = {"config_hash": self.cfg.config_hash}
        body.update(payload)
        with open(path, "w") as fh:
            json.dump(body, fh, sort_keys=True, indent=2, default=_json_default)
        self.files.append(f"{name}.json")
        self.log(f"wrote {path}")

    def manifest(self, command, seed, status):
        payload = {
            "command": command,
            "config_hash": self.cfg.config_hash,
            "config_path": self.cfg.path,
            "seed": seed,
            "status": status,
            "files": sorted(self.files),
        }
        with open(self.dir / "manifest.json", "w") as fh:
            json.dump(payload, fh, sort_keys=True, indent=2)

    def log(self, msg):
        if not self.quiet:
            print(msg)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def _field_rows(field: SpaceTimeField):
    n_nodes, n_times = field.values.shape
    for i in range(n_nodes):
        for j in range(n_times):
            yield (i, j, float(field.values[i, j]))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _setup(cfg):
    grid, tgrid = cfg.build_grids()
    s = cfg.order()
    op = assemble_frac_laplacian(grid, s)
    sg = RestrictedSemigroup.from_operator(op)
    return grid, tgrid, s, op, sg


def cmd_verify(cfg: ExperimentConfig, writer: RunWriter, seed: int) -> int:
    """Invariant battery at the configured scale; nonzero exit on violation."""
    rng = np.random.default_rng(seed)
    grid, tgrid, s, op, sg = _setup(cfg)
    rows = []
    failures = 0

    def record(name, value, bound, ok):
        nonlocal failures
        rows.append((name, float(value), float(bound), int(bool(ok))))
        if not ok:
            failures += 1
        writer.log(f"  [{'ok' if ok else 'FAIL'}] {name}: {value:.3e} (bound {bound:.3e})")

    A = op.matrix
    record("operator_symmetry", np.max(np.abs(A - A.T)), 1e-12, np.max(np.abs(A - A.T)) <= 1e-12)
    off = A - np.diag(np.diag(A))
    record("m_matrix_offdiag", off.max(), 0.0, off.max() <= 0.0)
    record("m_matrix_diag", -np.min(np.diag(A)), 0.0, np.min(np.diag(A)) > 0.0)
    op0 = assemble_frac_laplacian(grid, s, include_tail=False)
    rs = np.max(np.abs(op0.matrix.sum(axis=1)))
    record("row_sums_no_tail", rs, 1e-10, rs <= 1e-10)
    record("eigen_residual", sg.eigen_residual(op), 1e-8, sg.eigen_residual(op) <= 1e-8)
    record("interior_spd", -sg.eigvals[0], 0.0, sg.eigvals[0] > 0.0)

    mass = heat_kernel_mass(s, 1.0)
    record("kernel_mass", abs(mass - 1.0), 1e-6, abs(mass - 1.0) <= 1e-6)
    k_val = heat_kernel_eval(s, 0.3, 0.5, n=grid.dim if grid.dim == 1 else 2)
    record("kernel_positive", -k_val, 0.0, k_val > 0.0)

    K = sg.n_interior
    worst_id = worst_law = 0.0
    for _ in range(5):
        f = rng.standard_normal(K)
        worst_id = max(worst_id, np.max(np.abs(sg.apply(0.0, f) - f)))
        worst_law = max(
            worst_law,
            np.max(np.abs(sg.apply(0.7, f) - sg.apply(0.3, sg.apply(0.4, f)))),
        )
    record("semigroup_identity", worst_id, 1e-10, worst_id <= 1e-10)
    record("semigroup_law", worst_law, 1e-10, worst_law <= 1e-10)

    x_int = grid.nodes[grid.interior_indices, 0] if grid.dim == 1 else None
    worst1 = worst2 = 0.0
    for _ in range(5):
        if grid.dim == 1:
            c = rng.standard_normal(4)
            f = sum(c[j] * np.sin((j + 1) * np.pi * (x_int + 1) / 2) for j in range(4))
        else:
            f = rng.standard_normal(K)
        for t in (0.05, 0.2, 1.0):
            rep = check_comparison(sg, op, f, t, slack=1e-6)
            worst1 = max(worst1, rep.max_violation_first)
            worst2 = max(worst2, rep.max_violation_second)
    record("comparison_first", worst1, 1e-6, worst1 <= 1e-6)
    record("comparison_second", worst2, 1e-6, worst2 <= 1e-6)

    if grid.dim == 1:
        t_list = np.geomspace(0.01, 1.0, 7)
        ratios = []
        for _ in range(10):
            c = rng.standard_normal(4)
            f = sum(c[j] * np.sin((j + 1) * np.pi * (x_int + 1) / 2) for j in range(4))
            rep = check_decay_restricted(sg, f, 2.0, np.inf, t_list)
            ratios += [row[3] for row in rep.rows]
        spread = max(ratios) / np.median(ratios)
        record("decay_ratio_spread", spread, 3.0, spread <= 3.0)

    try:
        nl = cfg.nonlinearity(grid, tgrid)
        g = cfg.exterior_data(grid, tgrid)
        rep = solve_with_exterior_data(sg, op, nl, g, **{k: v for k, v in cfg.solver().items() if k != "kind"})
        u_imex = imex_oracle(op, nl, g, None, tgrid)
        diff = SpaceTimeField.from_values(grid, tgrid, rep.u.values - u_imex.values)
        rel = l2_spacetime_norm(diff) / max(l2_spacetime_norm(rep.u), 1e-300)
        bound = 10.0 * tgrid.dt
        record("picard_imex_consistency", rel, bound, rel <= bound)
        fsup = 0.0
        gsup = float(np.abs(g.values).max())
        br = check_linf_bound(rep.u, fsup, gsup, tgrid.T)
        record("sup_bound", br.lhs, br.rhs, br.ok)
    except SolverError as exc:
        writer.log(f"solver failure during verify: {exc}")
        return EXIT_SOLVER

    writer.csv("verify", ("check", "value", "bound", "ok"), rows)
    writer.log(f"verify: {len(rows) - failures}/{len(rows)} checks passed")
    return EXIT_OK if failures == 0 else EXIT_CHECK


def cmd_forward(cfg: ExperimentConfig, writer: RunWriter, seed: int, solver_kind=None) -> int:
    grid, tgrid, s, op, sg = _setup(cfg)
    nl = cfg.nonlinearity(grid, tgrid)
    g = cfg.exterior_data(grid, tgrid)
    opts = cfg.solver()
    kind = solver_kind or opts["kind"]

    payload = {}
    u_field = None
    if kind in ("picard", "both"):
        rep = solve_with_exterior_data(sg, op, nl, g, tol=opts["tol"], max_iter=opts["max_iter"])
        writer.csv("solution_picard", ("node", "step", "value"), _field_rows(rep.u))
        payload["picard"] = rep.to_dict()
        u_field = rep.u
    if kind in ("imex", "both"):
        u_imex = imex_oracle(op, nl, g, None, tgrid)
        writer.csv("solution_imex", ("node", "step", "value"), _field_rows(u_imex))
        payload["imex"] = {"steps": tgrid.n_steps}
        if u_field is not None:
            diff = SpaceTimeField.from_values(grid, tgrid, u_field.values - u_imex.values)
            payload["picard_imex_distance_l2"] = l2_spacetime_norm(diff)
    writer.json("forward_report", payload)
    return EXIT_OK


def cmd_dtn(cfg: ExperimentConfig, writer: RunWriter, seed: int) -> int:
    grid, tgrid, s, op, sg = _setup(cfg)
    nl = cfg.nonlinearity(grid, tgrid)
    g = cfg.exterior_data(grid, tgrid)
    inv = cfg.inversion()
    measurements = []
    for lam in inv["lambdas"]:
        measurements.append(dtn(op, sg, nl, g, lam=lam, tol=cfg.solver()["tol"]))
        writer.log(f"measured amplitude {lam}")
    save_measurements(
        writer.dir / "measurements.csv", writer.dir / "measurements.json", measurements, grid, g
    )
    writer.files += ["measurements.csv"]
    writer.json(
        "dtn_report",
        {"lambdas": inv["lambdas"], "n_obs": int(grid.observation_indices.size)},
    )
    return EXIT_OK


def cmd_control(cfg: ExperimentConfig, writer: RunWriter, seed: int) -> int:
    grid, tgrid, s, op, sg = _setup(cfg)
    inv = cfg.inversion()
    target = SpaceTimeField.from_values(
        grid, tgrid, np.ones((grid.n_nodes, tgrid.n_times)), "interior"
    )
    syn = RungeSynthesizer(op, sg)
    sweep = syn.residual_curve(target, [inv["control_reg"] * 10.0**k for k in range(3, -3, -1)])
    ctrl = syn.synthesize(target, inv["control_reg"])
    writer.csv("control_field", ("node", "step", "value"), _field_rows(ctrl.g))
    writer.csv("control_sweep", ("reg_weight", "delta"), sweep)
    writer.json(
        "control_report",
        {
            "delta_achieved": ctrl.delta_achieved,
            "reg_weight": ctrl.reg_weight,
            "condition": ctrl.condition,
            "g_sup": float(np.abs(ctrl.g.values).max()),
        },
    )
    return EXIT_OK


def cmd_invert(cfg: ExperimentConfig, writer: RunWriter, seed: int) -> int:
    grid, tgrid, s, op, sg = _setup(cfg)
    inv = cfg.inversion()
    opts = cfg.solver()
    target = SpaceTimeField.from_values(
        grid, tgrid, np.ones((grid.n_nodes, tgrid.n_times)), "interior"
    )
    syn = RungeSynthesizer(op, sg)
    ctrl = syn.synthesize(target, inv["control_reg"])
    writer.log(f"control delta = {ctrl.delta_achieved:.4f}")

    if inv["measurements"]:
        meas_base = Path(inv["measurements"])
        if not meas_base.exists():
            writer.log(f"missing measurement file: {meas_base}")
            return EXIT_CONFIG
        measure = load_measure_fn(
            meas_base, meas_base.with_suffix(".json"), grid, tgrid, ctrl.g
        )
        truth = None
    else:
        truth = cfg.nonlinearity(grid, tgrid)
        if not truth.terms:
            writer.log("invert without measurements needs a synthetic nonlinearity")
            return EXIT_CONFIG
        measure = simulated_measure_fn(op, sg, truth, tol=opts["tol"])

    lams = inv["lambdas"]
    exponents = inv["exponents"]
    recovered_exponents = []
    if inv["recover_exponents"]:
        b1 = recover_exponent(op, sg, measure, ctrl.g, lams, tol=opts["tol"])
        recovered_exponents.append(b1)
        writer.log(f"recovered leading exponent {b1:.3f}")
    if exponents is None:
        if truth is not None:
            exponents = list(truth.exponents)
        else:
            exponents = [round(b) if abs(b - round(b)) < 0.2 else b for b in recovered_exponents]

    result = recover_coefficients(
        op,
        sg,
        measure,
        exponents,
        ctrl,
        lams,
        reg_weight=inv["reg_weight"],
        sweeps=inv["sweeps"],
        tol=opts["tol"],
        smooth_x=inv["smooth_x"],
        smooth_t=inv["smooth_t"],
    )
    if inv["recover_exponents"] and len(exponents) > 1:
        b_next = recover_exponent(
            op, sg, measure, ctrl.g, lams, tol=opts["tol"],
            subtract_terms=[(exponents[0], result.coefficients[0])],
        )
        recovered_exponents.append(b_next)
        writer.log(f"recovered next exponent {b_next:.3f}")

    for k, a_hat in enumerate(result.coefficients):
        writer.csv(f"coefficient_{k}", ("node", "step", "value"), _field_rows(a_hat))
    payload = {
        "exponents_used": list(map(float, exponents)),
        "exponents_recovered": recovered_exponents,
        "control_delta": ctrl.delta_achieved,
        "guard_fraction": result.guard_fraction,
        "clip_fraction": result.clip_fraction,
        "reg_weight": result.reg_weight,
        "stage_lams": [list(p) for p in result.stage_lams],
        "stage_residuals": [
            {"sweep": sw, "stage": k, "before": a, "after": b}
            for sw, k, a, b in result.stage_residuals
        ],
    }
    if truth is not None:
        payload["relative_errors"] = result.relative_errors(truth)
    writer.json("recovery_report", payload)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


COMMANDS = {
    "verify": cmd_verify,
    "forward": cmd_forward,
    "dtn": cmd_dtn,
    "control": cmd_control,
    "invert": cmd_invert,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="fracheat",
        description="Exterior-data fractional diffusion lab: forward solves, window measurements, coefficient recovery.",
    )
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="YAML experiment config")
    parser.add_argument("--out", default=None, help="output directory (default: config 'output' or ./out)")
    parser.add_argument("--seed", type=int, default=None, help="RNG seed override")
    parser.add_argument("--solver", choices=("picard", "imex", "both"), default=None)
    parser.add_argument("--quiet", action="store_true")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config)
    except (ConfigError, GeometryError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    seed = args.seed if args.seed is not None else int(cfg.raw.get("seed", 0))
    out_dir = args.out or cfg.raw.get("output", "out")
    writer = RunWriter(out_dir, cfg, quiet=args.quiet)

    try:
        if args.command == "forward":
            status = cmd_forward(cfg, writer, seed, solver_kind=args.solver)
        else:
            status = COMMANDS[args.command](cfg, writer, seed)
    except (ConfigError, GeometryError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        writer.manifest(args.command, seed, "solver-failure")
        return EXIT_SOLVER
    except RecoveryError as exc:
        print(f"recovery failure: {exc}", file=sys.stderr)
        writer.manifest(args.command, seed, "recovery-failure")
        return EXIT_SOLVER

    writer.manifest(args.command, seed, "ok" if status == EXIT_OK else "check-violation")
    return status


if __name__ == "__main__":
    sys.exit(main())
