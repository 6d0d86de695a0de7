"""Batch front end: config ingestion, pipeline orchestration, artifacts.

A run is described by a flat sectioned text config (sections [model],
[grid], [seeds], [run]; ``key = value`` lines; '#' comments).  The reader
defines the canonical form: fixed section and key order, floats in shortest
round-trip notation, single spaces, one blank line between sections.  A
parsed config always echoes back byte-identically through
``canonical_text``.

Stages run sequentially in the configured order, each writing JSON/CSV
artifacts (and one binary grid) into the run directory, then a manifest
with the config hash and library versions.  All randomness is seeded from
the config, so identical config means bit-identical artifacts.  Exit codes:
0 success, 2 invalid config, 3 stage failure (message names the stage),
4 I/O failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

Array = np.ndarray

ENV_OUTPUT_ROOT = "HKGLUE_OUTPUT_ROOT"


class CliError(Exception):
    exit_code = 1


class ConfigInvalid(CliError):
    exit_code = 2


class StageFailure(CliError):
    exit_code = 3

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage}: {message}")
        self.stage = stage


class IoError(CliError):
    exit_code = 4


# ---------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs: geometry, scan parameters, grid, seeds,
    stage order, and where to write."""

    centers: tuple[tuple[float, float, float], ...]
    weights: tuple[float, ...]
    hole_weight: float
    epsilon_list: tuple[float, ...]
    delta: float
    grid_extent: float
    grid_n: int
    seed_fuzz: int
    seed_battery: int
    pipeline: tuple[str, ...]
    output_dir: str


def default_config() -> RunConfig:
    return RunConfig(
        centers=((0.0, 0.0, 1.0), (0.0, 0.0, -1.0)),
        weights=(0.5, 0.5),
        hole_weight=-2.0,
        epsilon_list=(0.02, 0.01, 0.005, 0.0025),
        delta=0.3,
        grid_extent=6.0,
        grid_n=32,
        seed_fuzz=7,
        seed_battery=20,
        pipeline=("potential", "connection", "triples", "glue", "solve", "perturb"),
        output_dir="runs/default",
    )


_SCHEMA: dict[str, tuple[str, ...]] = {
    "model": ("centers", "weights", "hole_weight", "epsilon_list", "delta"),
    "grid": ("extent", "n"),
    "seeds": ("fuzz", "battery"),
    "run": ("pipeline", "output_dir"),
}


def _fmt_float(x: float) -> str:
    return repr(float(x))


def canonical_text(cfg: RunConfig) -> str:
    """The unique text form of a config; parsing it returns cfg and
    re-emitting returns the same bytes."""
    lines = [
        "[model]",
        "centers = "
        + " ; ".join(" ".join(_fmt_float(c) for c in p) for p in cfg.centers),
        "weights = " + " ".join(_fmt_float(w) for w in cfg.weights),
        "hole_weight = " + _fmt_float(cfg.hole_weight),
        "epsilon_list = " + " ".join(_fmt_float(e) for e in cfg.epsilon_list),
        "delta = " + _fmt_float(cfg.delta),
        "",
        "[grid]",
        "extent = " + _fmt_float(cfg.grid_extent),
        "n = " + str(cfg.grid_n),
        "",
        "[seeds]",
        "fuzz = " + str(cfg.seed_fuzz),
        "battery = " + str(cfg.seed_battery),
        "",
        "[run]",
        "pipeline = " + " ".join(cfg.pipeline),
        "output_dir = " + cfg.output_dir,
    ]
    return "\n".join(lines) + "\n"


def _parse_floats(text: str, what: str) -> tuple[float, ...]:
    try:
        return tuple(float(tok) for tok in text.split())
    except ValueError as exc:
        raise ConfigInvalid(f"bad number in {what}: {exc}") from None


def parse_config(text: str) -> RunConfig:
    """Parse the sectioned text form; raises ConfigInvalid with the line on
    any syntax, schema, or cross-field problem."""
    raw: dict[str, dict[str, str]] = {}
    section: str | None = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if body.startswith("[") and body.endswith("]"):
            section = body[1:-1].strip()
            if section not in _SCHEMA:
                raise ConfigInvalid(f"line {lineno}: unknown section [{section}]")
            if section in raw:
                raise ConfigInvalid(f"line {lineno}: duplicate section [{section}]")
            raw[section] = {}
            continue
        if "=" not in body:
            raise ConfigInvalid(f"line {lineno}: expected 'key = value'")
        if section is None:
            raise ConfigInvalid(f"line {lineno}: key outside any section")
        key, value = (part.strip() for part in body.split("=", 1))
        if key not in _SCHEMA[section]:
            raise ConfigInvalid(f"line {lineno}: unknown key {key!r} in [{section}]")
        if key in raw[section]:
            raise ConfigInvalid(f"line {lineno}: duplicate key {key!r}")
        raw[section][key] = value

    def need(sec: str, key: str) -> str:
        try:
            return raw[sec][key]
        except KeyError:
            raise ConfigInvalid(f"missing {key!r} in section [{sec}]") from None

    center_field = need("model", "centers")
    centers = []
    for part in center_field.split(";"):
        trip = _parse_floats(part, "centers")
        if len(trip) != 3:
            raise ConfigInvalid(f"center {part.strip()!r} is not a 3-vector")
        centers.append(trip)
    weights = _parse_floats(need("model", "weights"), "weights")
    try:
        hole_weight = float(need("model", "hole_weight"))
        delta = float(need("model", "delta"))
        extent = float(need("grid", "extent"))
    except ValueError as exc:
        raise ConfigInvalid(str(exc)) from None
    eps_list = _parse_floats(need("model", "epsilon_list"), "epsilon_list")
    try:
        n = int(need("grid", "n"))
        fuzz = int(need("seeds", "fuzz"))
        battery = int(need("seeds", "battery"))
    except ValueError as exc:
        raise ConfigInvalid(str(exc)) from None
    pipeline = tuple(need("run", "pipeline").split())
    output_dir = need("run", "output_dir")

    cfg = RunConfig(
        centers=tuple(centers),
        weights=weights,
        hole_weight=hole_weight,
        epsilon_list=eps_list,
        delta=delta,
        grid_extent=extent,
        grid_n=n,
        seed_fuzz=fuzz,
        seed_battery=battery,
        pipeline=pipeline,
        output_dir=output_dir,
    )
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig) -> None:
    """All cross-field constraints, checked before any stage runs."""
    if len(cfg.weights) != len(cfg.centers):
        raise ConfigInvalid(
            f"{len(cfg.centers)} centers but {len(cfg.weights)} weights"
        )
    from .fields3d import PotentialSpec

    try:
        PotentialSpec.from_centers(
            cfg.centers, epsilon=1.0, weights=cfg.weights, hole_weight=cfg.hole_weight
        )
    except ValueError as exc:
        raise ConfigInvalid(str(exc)) from None
    if not 0.0 < cfg.delta < 0.5:
        raise ConfigInvalid(f"delta must lie in (0, 1/2), got {cfg.delta!r}")
    if not cfg.epsilon_list or any(e <= 0.0 for e in cfg.epsilon_list):
        raise ConfigInvalid("epsilon_list must be a nonempty positive list")
    if any(b >= a for a, b in zip(cfg.epsilon_list, cfg.epsilon_list[1:])):
        raise ConfigInvalid("epsilon_list must be strictly decreasing")
    if max(cfg.epsilon_list) >= cfg.delta**2:
        raise ConfigInvalid(
            f"every epsilon must stay below delta^2 = {cfg.delta**2:g}; "
            f"got {max(cfg.epsilon_list):g}"
        )
    if cfg.grid_extent <= 0.0:
        raise ConfigInvalid("grid extent must be positive")
    if cfg.grid_n < 8:
        raise ConfigInvalid("grid n must be at least 8")
    if not cfg.pipeline:
        raise ConfigInvalid("no stages")
    unknown = [s for s in cfg.pipeline if s not in STAGES]
    if unknown:
        raise ConfigInvalid(
            f"unknown stage(s) {unknown}; available: {sorted(STAGES)}"
        )
    if not cfg.output_dir:
        raise ConfigInvalid("output_dir must be nonempty")


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(canonical_text(cfg).encode()).hexdigest()


# ---------------------------------------------------------------------------
# Artifact helpers


def write_json(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise IoError(f"corrupt JSON in {path}: {exc}") from None


def write_csv_rows(path, header: Sequence[str], rows) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow(
                ["%.17g" % v if isinstance(v, float) else str(v) for v in row]
            )


def write_grid_binary(path, values: Array, meta: dict | None = None) -> None:
    """Binary grid artifact: one JSON header line, then the row-major
    little-endian float64 payload."""
    header = {"dtype": "<f8", "order": "C", "shape": list(values.shape)}
    if meta:
        header.update(meta)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(np.ascontiguousarray(values, dtype="<f8").tobytes())


def read_grid_binary(path) -> tuple[Array, dict]:
    try:
        with open(path, "rb") as fh:
            header = json.loads(fh.readline().decode())
            payload = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read grid {path}: {exc}") from None
    data = np.frombuffer(payload, dtype="<f8").reshape(header["shape"])
    return data, header


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Shared stage ingredients


def _potential_spec(cfg: RunConfig, eps: float):
    from .fields3d import PotentialSpec

    return PotentialSpec.from_centers(
        cfg.centers, epsilon=eps, weights=cfg.weights, hole_weight=cfg.hole_weight
    )


def _stage_epsilon(cfg: RunConfig) -> float:
    """Single-epsilon stages run at the deepest (smallest) scan value."""
    return min(cfg.epsilon_list)


def _narrow_delta(cfg: RunConfig) -> float:
    """Solver-side cutoff width: the log-scale transition family needs
    4 delta below the center separation, so fall back to the canonical 0.2
    when the gluing delta is wider."""
    return cfg.delta if cfg.delta < 0.25 else 0.2


def _sample_points(cfg: RunConfig, n_points: int, seed: int) -> Array:
    """Seeded sample cloud on radii [0.35, 2.5] x scene scale, kept away
    from every center and the origin."""
    spec = _potential_spec(cfg, _stage_epsilon(cfg))
    rng = np.random.default_rng(seed)
    pts = []
    centers = spec.centers
    scale = spec.scene_scale
    while len(pts) < n_points:
        u = rng.normal(size=3)
        u /= np.linalg.norm(u)
        r = scale * rng.uniform(0.35, 2.5)
        x = r * u
        d = np.linalg.norm(centers - x, axis=1).min() if len(centers) else np.inf
        if d > 0.25 * scale:
            pts.append(x)
    return np.asarray(pts)


# ---------------------------------------------------------------------------
# Stages


def stage_potential(cfg: RunConfig, run_dir: Path) -> dict:
    """Sample the multi-center potential on the box grid (binary artifact)
    and export the far-field multipole table."""
    from .adiabatic_solver import BoxGrid
    from .fields3d import eval_potential, multipole_expand

    eps = _stage_epsilon(cfg)
    spec = _potential_spec(cfg, eps)
    grid = BoxGrid(extent=cfg.grid_extent, n=cfg.grid_n)
    h = eval_potential(spec, grid.mesh())
    write_grid_binary(
        run_dir / "potential.grid",
        h,
        meta={"extent": cfg.grid_extent, "epsilon": eps, "field": "potential"},
    )
    exp = multipole_expand(spec, order=4)
    write_csv_rows(
        run_dir / "multipole.csv",
        ["ell", "m", "coefficient"],
        [(ell, m, float(c)) for (ell, m, c) in exp.rows()],
    )
    summary = {
        "epsilon": eps,
        "total_charge": spec.total_charge,
        "grid_min": float(h.min()),
        "grid_max": float(h.max()),
        "artifacts": ["potential.grid", "multipole.csv"],
    }
    write_json(run_dir / "potential.json", summary)
    return summary


def stage_connection(cfg: RunConfig, run_dir: Path) -> dict:
    """Quadrature flux of the connection around every source and at
    infinity; values over 2 pi must sit on integers."""
    from .gauge import flux_report

    eps = _stage_epsilon(cfg)
    spec = _potential_spec(cfg, eps)
    records = flux_report(spec)
    worst = max(r["error"] for r in records)
    payload = {"epsilon": eps, "records": records, "max_flux_error": worst}
    write_json(run_dir / "flux.json", payload)
    return {"max_flux_error": worst, "artifacts": ["flux.json"]}


def stage_triples(cfg: RunConfig, run_dir: Path) -> dict:
    """Pointwise 2-form triple diagnostics on a seeded cloud: normalized
    Gram defect of the full multi-center triple (analytic potential and
    connection values) and reconstruction of the closed-form metric."""
    from .fields3d import eval_potential
    from .gauge import assemble_connection
    from .triples import gh_triple, gram_and_defect, metric_from_triple

    eps = _stage_epsilon(cfg)
    spec = _potential_spec(cfg, eps)
    conn = assemble_connection(spec)
    pts = _sample_points(cfg, 1000, cfg.seed_fuzz)
    h_vals = eval_potential(spec, pts)
    a_vals = conn.base_form(pts)
    worst_defect = 0.0
    worst_metric = 0.0
    for x, h, a in zip(pts, h_vals, a_vals):
        alpha_row = np.array([eps * a[0], eps * a[1], eps * a[2], 1.0])
        t = gh_triple(float(h), alpha_row, epsilon=eps)
        q, defect = gram_and_defect(t)
        worst_defect = max(
            worst_defect, float(np.abs(defect).max() / np.abs(q).max())
        )
        g = metric_from_triple(t).components
        g_closed = _closed_form_metric(float(h), eps * a)
        worst_metric = max(worst_metric, float(np.abs(g - g_closed).max()))
    payload = {
        "epsilon": eps,
        "n_points": int(len(pts)),
        "max_normalized_defect": worst_defect,
        "max_metric_mismatch": worst_metric,
    }
    write_json(run_dir / "triples.json", payload)
    return {**payload, "artifacts": ["triples.json"]}


def _closed_form_metric(h: float, a_scaled: Array) -> Array:
    """Multi-center metric in the rescaled coframe (e_j, fiber): the kinetic
    block h delta + h^-1 a a^T with fiber cross terms h^-1 a and fiber-fiber
    1/h, where a collects the rescaled horizontal connection components."""
    g = np.zeros((4, 4))
    g[:3, :3] = h * np.eye(3) + np.outer(a_scaled, a_scaled) / h
    g[:3, 3] = g[3, :3] = a_scaled / h
    g[3, 3] = 1.0 / h
    return g


def stage_glue(cfg: RunConfig, run_dir: Path) -> dict:
    """Patched triple at the deepest epsilon: worst annulus defect and the
    Gram floor certifying definiteness."""
    from .gluing import PatchConfig, build_patched_triple

    spec = _potential_spec(cfg, 1.0)
    pc = PatchConfig(spec=spec, delta=cfg.delta, epsilon_list=cfg.epsilon_list)
    eps = _stage_epsilon(cfg)
    field = build_patched_triple(pc, eps)
    payload = {
        "epsilon": eps,
        "delta": cfg.delta,
        "sup_defect": float(field.defect.max()),
        "min_gram_eigenvalue": field.min_gram_eigenvalue(),
    }
    write_json(run_dir / "glue.json", payload)
    return {**payload, "artifacts": ["glue.json"]}


def stage_glue_scan(cfg: RunConfig, run_dir: Path) -> dict:
    """Defect scaling scan across the configured epsilon ladder, with the
    fitted log-log slope."""
    from .gluing import PatchConfig, defect_scan

    spec = _potential_spec(cfg, 1.0)
    pc = PatchConfig(spec=spec, delta=cfg.delta, epsilon_list=cfg.epsilon_list)
    scan = defect_scan(pc)
    scan.write_csv(run_dir / "glue_scan.csv")
    scan.write_json(run_dir / "glue_scan.json")
    return {
        "fitted_slope": scan.fitted_slope,
        "slope_stderr": scan.slope_stderr,
        "artifacts": ["glue_scan.csv", "glue_scan.json"],
    }


def stage_defect_scan(cfg: RunConfig, run_dir: Path) -> dict:
    """Radial defect profile at the deepest epsilon: the defect must be
    supported inside the cutoff transition shell."""
    from .gluing import PatchConfig, build_patched_triple

    spec = _potential_spec(cfg, 1.0)
    pc = PatchConfig(spec=spec, delta=cfg.delta, epsilon_list=cfg.epsilon_list)
    eps = _stage_epsilon(cfg)
    field = build_patched_triple(pc, eps)
    nd = pc.annulus_grid.n_directions
    profile = field.defect.reshape(-1, nd).max(axis=1)
    radii = pc.annulus_grid.radii(eps, cfg.delta)
    # transition shell in radius: rho = eps/|x| crosses [delta/2, delta]
    r_lo, r_hi = eps / cfg.delta, 2.0 * eps / cfg.delta
    in_shell = (radii >= r_lo) & (radii <= r_hi)
    write_csv_rows(
        run_dir / "defect_profile.csv",
        ["radius", "sup_normalized_defect", "in_shell"],
        [
            (float(r), float(d), int(s))
            for r, d, s in zip(radii, profile, in_shell)
        ],
    )
    payload = {
        "epsilon": eps,
        "shell_radii": [r_lo, r_hi],
        "in_shell_sup": float(profile[in_shell].max()) if in_shell.any() else 0.0,
        "outside_sup": float(profile[~in_shell].max()) if (~in_shell).any() else 0.0,
    }
    write_json(run_dir / "defect.json", payload)
    return {**payload, "artifacts": ["defect_profile.csv", "defect.json"]}


def stage_solve(cfg: RunConfig, run_dir: Path) -> dict:
    """Patched inverse of the adiabatic Laplacian on the box: composite
    residual, three Neumann refinement passes, and a screened single-mode
    solve checked against a high-order stencil."""
    from .adiabatic_solver import (
        BoxGrid,
        FibredField,
        build_cutoff_family,
        flat_laplacian,
        mode_poisson,
        neumann_refine,
        patched_inverse,
    )

    eps = _stage_epsilon(cfg)
    spec = _potential_spec(cfg, eps)
    grid = BoxGrid(extent=cfg.grid_extent, n=cfg.grid_n)
    pts = grid.mesh()
    r2 = np.sum(pts**2, axis=-1)
    sigma = cfg.grid_extent / 3.0
    bump = np.exp(-0.5 * r2 / sigma**2)
    cutoffs = build_cutoff_family(spec, _narrow_delta(cfg))
    f = FibredField.invariant(grid, bump, eps)
    _u, report = patched_inverse(f, spec, cutoffs)
    composite = report["regions"]["total"]
    _u2, history = neumann_refine(f, spec, cutoffs, iters=3)

    mode_src = bump.astype(complex)
    u1 = mode_poisson(grid, mode_src, n=1, eps=eps)
    lhs = eps**2 * flat_laplacian(u1.real, grid.step, order=6) + u1.real
    mask = grid.interior_mask(margin=4)
    mode_residual = float(
        np.abs(lhs - mode_src.real)[mask].max() / np.abs(mode_src.real).max()
    )
    payload = {
        "epsilon": eps,
        "composite_residual": composite,
        "region_residuals": report["regions"],
        "neumann_history": history,
        "mode_residual": mode_residual,
    }
    write_json(run_dir / "solve.json", payload)
    return {
        "composite_residual": composite,
        "neumann_history": history,
        "mode_residual": mode_residual,
        "artifacts": ["solve.json"],
    }


def stage_perturb(cfg: RunConfig, run_dir: Path) -> dict:
    """Nonlinear corrector on the 4-torus: contraction history of the
    trace-free Gram defect and the measured linearization order."""
    from .perturb import (
        Torus4Grid,
        _d_triple,
        contract_solve,
        flat_triple,
        linearization_check,
        random_one_form_triple,
    )

    grid = Torus4Grid(12)
    bg = flat_triple(grid) + _d_triple(
        grid,
        random_one_form_triple(grid, cfg.seed_fuzz, amplitude=1e-2, max_mode=1),
    )
    _a, rows = contract_solve(grid, bg, tol=1e-10)
    rep = linearization_check(grid)
    write_csv_rows(
        run_dir / "perturb.csv",
        ["step", "residual_defect", "residual_fixed_point"],
        [(r.step, r.residual_defect, r.residual_fixed_point) for r in rows],
    )
    payload = {
        "torus_n": grid.n,
        "steps": len(rows),
        "final_defect": rows[-1].residual_defect,
        "linearization_min_order": rep["min_order"],
        "assembly_anchor": rep["assembly_anchor"],
    }
    write_json(run_dir / "perturb.json", payload)
    return {**payload, "artifacts": ["perturb.csv", "perturb.json"]}


def stage_verify_appendix_a(cfg: RunConfig, run_dir: Path) -> dict:
    """Spinor-pair projector identity suite, the duality involution, SO(3)
    equivariance, and the worked dual pair; fails unless every residual is
    below 1e-10."""
    from scipy.spatial.transform import Rotation

    from .ellipse import (
        SpinorPair,
        act_so3,
        dualize,
        identity_report,
        random_admissible_pair,
        to_ellipse,
    )

    report = identity_report(n_samples=10_000, seed=cfg.seed_fuzz)
    rng = np.random.default_rng(cfg.seed_fuzz + 1)
    worst_inv = 0.0
    worst_equi = 0.0
    for _ in range(300):
        sp = random_admissible_pair(rng)
        for flavor in ("X", "Y"):
            e = to_ellipse(sp, flavor)
            back = dualize(dualize(e))
            worst_inv = max(worst_inv, float(np.abs(back.vector - e.vector).max()))
        # unit quaternion -> SU(2) element and its vector rotation
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        U = q[3] * np.eye(2) - 1j * (
            q[0] * _PAULI[0] + q[1] * _PAULI[1] + q[2] * _PAULI[2]
        )
        G = Rotation.from_quat(q).as_matrix()
        moved = SpinorPair(z=U @ sp.z, w=U @ sp.w)
        for flavor in ("X", "Y"):
            lhs = to_ellipse(moved, flavor).vector
            rhs = act_so3(G, to_ellipse(sp, flavor)).vector
            worst_equi = max(worst_equi, float(np.abs(lhs - rhs).max()))

    sp0 = SpinorPair(z=(1.0, 0.0), w=(1.0 / np.sqrt(2.0), 1.0 / np.sqrt(2.0)))
    y0 = to_ellipse(sp0, "Y").vector
    x0 = dualize(to_ellipse(sp0, "Y")).vector
    worked = {
        "Y": [[v.real, v.imag] for v in y0],
        "X": [[v.real, v.imag] for v in x0],
        "Y_residual": float(np.abs(y0 - np.array([1.0, 1.0j, 1.0])).max()),
        "X_residual": float(np.abs(x0 - np.array([-1.0, -1.0j, 1.0])).max()),
    }
    max_residual = max(
        max(report["max_residuals"].values()),
        worst_inv,
        worst_equi,
        worked["Y_residual"],
        worked["X_residual"],
    )
    payload = {
        "identities": report["max_residuals"],
        "involution_residual": worst_inv,
        "equivariance_residual": worst_equi,
        "worked_pair": worked,
        "max_residual": max_residual,
        "samples": report["samples"],
    }
    write_json(run_dir / "appendix_a.json", payload)
    if max_residual >= 1e-10:
        raise StageFailure(
            "verify-appendix-a", f"max residual {max_residual:g} >= 1e-10"
        )
    return {"max_residual": max_residual, "artifacts": ["appendix_a.json"]}


_PAULI = np.array(
    [
        [[0.0, 1.0], [1.0, 0.0]],
        [[0.0, -1.0j], [1.0j, 0.0]],
        [[1.0, 0.0], [0.0, -1.0]],
    ]
)


def stage_commutator_scan(cfg: RunConfig, run_dir: Path) -> dict:
    """Cutoff-commutator norm proxies along the delta -> delta^2 ladder;
    squaring delta should halve the proxy."""
    from .adiabatic_solver import BoxGrid, commutator_scan

    eps = _stage_epsilon(cfg)
    spec = _potential_spec(cfg, eps)
    grid = BoxGrid(extent=cfg.grid_extent, n=cfg.grid_n)
    d0 = _narrow_delta(cfg)
    deltas = [d0, d0**2, d0**4]
    rows = commutator_scan(
        spec, grid, deltas, eps=eps, n_battery=8, seed=cfg.seed_battery
    )
    write_csv_rows(
        run_dir / "commutator.csv",
        ["delta", "norm_proxy", "ratio_to_prev", "predicted_ratio"],
        [
            (r["delta"], r["norm_proxy"], r["ratio_to_prev"], r["predicted_ratio"])
            for r in rows
        ],
    )
    payload = {"base_delta": d0, "rows": rows}
    write_json(run_dir / "commutator.json", payload)
    first_ratio = rows[1]["ratio_to_prev"]
    return {
        "base_delta": d0,
        "first_ratio": first_ratio,
        "artifacts": ["commutator.csv", "commutator.json"],
    }


def stage_profile_ah(cfg: RunConfig, run_dir: Path) -> dict:
    """Radial profile of the rotationally symmetric core model: integrate
    from the asymptotic seed, check the closed-form asymptote, and fit the
    exponential channel-splitting rate."""
    from .atiyah_hitchin import (
        TNAsymptote,
        integrate_profile,
        split_decay_rate,
        write_profile_csv,
    )

    profile = integrate_profile(tau_seed=60.0)
    write_profile_csv(profile, run_dir / "ah_profile.csv")
    tau_chk = 30.0
    a, b, c, f = profile.evaluate(tau_chk)
    asym = TNAsymptote()
    fac = np.sqrt(1.0 - 2.0 / tau_chk)
    a_residual = abs(a / (tau_chk * fac) - 1.0)
    c_residual = abs(c * fac + 2.0)
    rate = split_decay_rate(profile, window=(15.0, 30.0))
    payload = {
        "tau_seed": 60.0,
        "tau_check": tau_chk,
        "a_asymptote_residual": float(a_residual),
        "c_asymptote_residual": float(c_residual),
        "asymptote_values": list(map(float, asym.values(tau_chk))),
        "split_decay_rate": float(rate),
        "tau_star": float(profile.tau_star),
    }
    write_json(run_dir / "ah.json", payload)
    return {
        "a_asymptote_residual": float(a_residual),
        "c_asymptote_residual": float(c_residual),
        "split_decay_rate": float(rate),
        "artifacts": ["ah_profile.csv", "ah.json"],
    }


def stage_report(cfg: RunConfig, run_dir: Path) -> dict:
    """Summarize prior-stage artifacts into the machine-readable pass/fail
    report."""
    payload = emit_report(run_dir)
    return {"pass": payload["pass"], "artifacts": ["report.json"]}


STAGES: dict[str, Callable[[RunConfig, Path], dict]] = {
    "potential": stage_potential,
    "connection": stage_connection,
    "triples": stage_triples,
    "glue": stage_glue,
    "glue-scan": stage_glue_scan,
    "defect-scan": stage_defect_scan,
    "solve": stage_solve,
    "perturb": stage_perturb,
    "verify-appendix-a": stage_verify_appendix_a,
    "commutator-scan": stage_commutator_scan,
    "profile-ah": stage_profile_ah,
    "report": stage_report,
}


# ---------------------------------------------------------------------------
# Report


def _criterion(name: str, source: str, passed, values: dict) -> dict:
    entry = {"name": name, "source": source, "values": values}
    if passed is None:
        entry["status"] = "not-run"
        entry["pass"] = None
    else:
        entry["status"] = "evaluated"
        entry["pass"] = bool(passed)
    return entry


def emit_report(run_dir) -> dict:
    """Pass/fail per acceptance criterion from whichever stage artifacts
    exist in run_dir; criteria without artifacts are listed as not-run.
    Writes report.json and returns the payload."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise IoError(f"run directory {run_dir} does not exist")

    def maybe(name: str):
        p = run_dir / name
        return read_json(p) if p.is_file() else None

    criteria = []

    tri = maybe("triples.json")
    criteria.append(
        _criterion(
            "gh-identity",
            "triples.json",
            None if tri is None else tri["max_normalized_defect"] < 1e-9,
            {} if tri is None else {"max_normalized_defect": tri["max_normalized_defect"]},
        )
    )
    criteria.append(
        _criterion(
            "metric-reconstruction",
            "triples.json",
            None if tri is None else tri["max_metric_mismatch"] < 1e-12,
            {} if tri is None else {"max_metric_mismatch": tri["max_metric_mismatch"]},
        )
    )

    app = maybe("appendix_a.json")
    criteria.append(
        _criterion(
            "spinor-identities",
            "appendix_a.json",
            None if app is None else app["max_residual"] < 1e-10,
            {} if app is None else {"max_residual": app["max_residual"]},
        )
    )

    ah = maybe("ah.json")
    ah_ok = None
    if ah is not None:
        ah_ok = (
            ah["a_asymptote_residual"] < 1e-6
            and ah["c_asymptote_residual"] < 1e-6
            and abs(ah["split_decay_rate"] + 1.0) <= 0.15
        )
    criteria.append(
        _criterion(
            "core-profile",
            "ah.json",
            ah_ok,
            {}
            if ah is None
            else {
                "a_asymptote_residual": ah["a_asymptote_residual"],
                "c_asymptote_residual": ah["c_asymptote_residual"],
                "split_decay_rate": ah["split_decay_rate"],
            },
        )
    )

    gscan = maybe("glue_scan.json")
    criteria.append(
        _criterion(
            "defect-scaling",
            "glue_scan.json",
            None if gscan is None else 2.7 <= gscan["fitted_slope"] <= 3.5,
            {} if gscan is None else {"fitted_slope": gscan["fitted_slope"]},
        )
    )

    dloc = maybe("defect.json")
    criteria.append(
        _criterion(
            "defect-localization",
            "defect.json",
            None if dloc is None else dloc["outside_sup"] < 1e-12,
            {} if dloc is None else {"outside_sup": dloc["outside_sup"]},
        )
    )

    flux = maybe("flux.json")
    criteria.append(
        _criterion(
            "flux-quantization",
            "flux.json",
            None if flux is None else flux["max_flux_error"] < 1e-6,
            {} if flux is None else {"max_flux_error": flux["max_flux_error"]},
        )
    )

    solve = maybe("solve.json")
    solve_ok = None
    mode_ok = None
    if solve is not None:
        hist = solve["neumann_history"]
        geometric = all(b < 0.9 * a for a, b in zip(hist, hist[1:]))
        solve_ok = solve["composite_residual"] < 0.5 and geometric
        mode_ok = solve["mode_residual"] < 1e-6
    criteria.append(
        _criterion(
            "mode-solvers",
            "solve.json",
            mode_ok,
            {} if solve is None else {"mode_residual": solve["mode_residual"]},
        )
    )
    criteria.append(
        _criterion(
            "patched-inverse",
            "solve.json",
            solve_ok,
            {}
            if solve is None
            else {
                "composite_residual": solve["composite_residual"],
                "neumann_history": solve["neumann_history"],
            },
        )
    )

    comm = maybe("commutator.json")
    comm_ok = None
    if comm is not None:
        ratio = comm["rows"][1]["ratio_to_prev"]
        comm_ok = 0.35 <= ratio <= 0.65
    criteria.append(
        _criterion(
            "commutator-halving",
            "commutator.json",
            comm_ok,
            {} if comm is None else {"ratio": comm["rows"][1]["ratio_to_prev"]},
        )
    )

    pert = maybe("perturb.json")
    pert_ok = None
    if pert is not None:
        pert_ok = (
            pert["steps"] <= 8
            and pert["final_defect"] < 1e-10
            and pert["linearization_min_order"] >= 1.9
        )
    criteria.append(
        _criterion(
            "nonlinear-corrector",
            "perturb.json",
            pert_ok,
            {}
            if pert is None
            else {
                "steps": pert["steps"],
                "final_defect": pert["final_defect"],
                "linearization_min_order": pert["linearization_min_order"],
            },
        )
    )

    evaluated = [c for c in criteria if c["status"] == "evaluated"]
    overall = bool(evaluated) and all(c["pass"] for c in evaluated)
    payload = {"pass": overall, "criteria": criteria}
    write_json(run_dir / "report.json", payload)
    return payload


# ---------------------------------------------------------------------------
# Pipeline driver


def _package_versions() -> dict:
    import platform

    import scipy

    from . import __name__ as pkg_name

    try:
        from importlib.metadata import version

        pkg_version = version("hkglue")
    except Exception:
        pkg_version = "unknown"
    return {
        "package": pkg_name,
        "package_version": pkg_version,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "python": platform.python_version(),
    }


def resolve_run_dir(cfg: RunConfig, output_root: str | None = None) -> Path:
    root = output_root or os.environ.get(ENV_OUTPUT_ROOT) or "."
    return Path(root) / cfg.output_dir


def run_pipeline(cfg: RunConfig, output_root: str | None = None) -> Path:
    """Execute the configured stages in order; returns the run directory.
    Raises StageFailure naming the first failing stage."""
    validate_config(cfg)
    run_dir = resolve_run_dir(cfg, output_root)
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.canonical").write_text(canonical_text(cfg))
    except OSError as exc:
        raise IoError(f"cannot prepare run directory {run_dir}: {exc}") from None

    manifest = {
        "config_hash": config_hash(cfg),
        "versions": _package_versions(),
        "stages": [],
    }
    for name in cfg.pipeline:
        fn = STAGES[name]
        t0 = time.perf_counter()
        try:
            summary = fn(cfg, run_dir)
        except CliError:
            manifest["stages"].append({"name": name, "status": "failed"})
            write_json(run_dir / "manifest.json", manifest)
            raise
        except Exception as exc:
            manifest["stages"].append({"name": name, "status": "failed"})
            write_json(run_dir / "manifest.json", manifest)
            raise StageFailure(name, f"{type(exc).__name__}: {exc}") from exc
        artifacts = [
            {"name": a, "sha256": _sha256_file(run_dir / a)}
            for a in summary.get("artifacts", [])
        ]
        manifest["stages"].append(
            {
                "name": name,
                "status": "ok",
                "seconds": round(time.perf_counter() - t0, 3),
                "artifacts": artifacts,
            }
        )
    write_json(run_dir / "manifest.json", manifest)
    return run_dir


# ---------------------------------------------------------------------------
# Entry points


def _single_stage_config(stage: str, config_path: str | None) -> RunConfig:
    from dataclasses import replace

    cfg = load_config(config_path) if config_path else default_config()
    return replace(cfg, pipeline=(stage,), output_dir=f"runs/{stage}")


VERIFY_SUITES = {
    "appendix-a": "verify-appendix-a",
    "gh": "triples",
    "flux": "connection",
}

SCAN_STAGES = {
    "glue": "glue-scan",
    "commutator": "commutator-scan",
    "defect": "defect-scan",
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hkglue",
        description="Multi-center gluing pipeline: runs, scans, and reports.",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    p_run = sub.add_parser("run", help="execute the configured pipeline")
    p_run.add_argument("config", help="path to a run config")

    p_verify = sub.add_parser("verify", help="run one verification suite")
    p_verify.add_argument("suite", choices=sorted(VERIFY_SUITES))
    p_verify.add_argument("--config", default=None)

    p_scan = sub.add_parser("scan", help="run one scaling scan")
    p_scan.add_argument("kind", choices=sorted(SCAN_STAGES))
    p_scan.add_argument("--config", default=None)

    p_ah = sub.add_parser("profile-ah", help="integrate the core radial profile")
    p_ah.add_argument("--config", default=None)

    p_rep = sub.add_parser("report", help="summarize a finished run directory")
    p_rep.add_argument("run_dir")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.verb == "run":
            run_dir = run_pipeline(load_config(args.config))
            print(f"ok: {run_dir}")
            return 0
        if args.verb == "verify":
            stage = VERIFY_SUITES[args.suite]
            cfg = _single_stage_config(stage, args.config)
            run_dir = run_pipeline(cfg)
            print(f"ok: {run_dir}")
            return 0
        if args.verb == "scan":
            stage = SCAN_STAGES[args.kind]
            cfg = _single_stage_config(stage, args.config)
            run_dir = run_pipeline(cfg)
            print(f"ok: {run_dir}")
            return 0
        if args.verb == "profile-ah":
            cfg = _single_stage_config("profile-ah", args.config)
            run_dir = run_pipeline(cfg)
            print(f"ok: {run_dir}")
            return 0
        if args.verb == "report":
            payload = emit_report(args.run_dir)
            print("pass" if payload["pass"] else "fail")
            return 0
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    raise AssertionError("unreachable verb")


if __name__ == "__main__":
    sys.exit(main())
