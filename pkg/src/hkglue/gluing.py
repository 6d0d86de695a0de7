"""Patched hyperKaehler triples on the matching annulus.

The model triple (radial potential H = c + mu*eps + w0*eps/|x|) and the full
multi-center triple differ by an exact form d b.  Interpolating the primitive
with a cutoff in the stretched radius rho = eps/|x| produces a field that is
the exact multi-center triple outside the transition shell, the exact model
inside it, and almost hyperKaehler in between, with sup defect O(eps^3).

Everything is assembled in the rescaled coframe (e_j, alpha_H) where alpha_H
is the model connection; in that frame both endpoint triples are Gibbons-
Hawking shaped, so the defect comes only from the d(chi) ^ b cross terms and
can be evaluated without finite differences.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .cutoffs import chi, d_ramp
from .fields3d import (
    NearZeroSplit,
    PotentialSpec,
    eval_potential,
    grad_potential,
    split_near_zero,
)
from .gauge import alpha1_at, flux_over_2pi, monopole_connection, primitive_at
from .triples import Triple, gh_components, gram_matrix

Array = np.ndarray

CYCLIC = ((0, 1, 2), (1, 2, 0), (2, 0, 1))


class InsideHole(ValueError):
    """Evaluation at a point where the model potential is nonpositive."""


class BadScan(ValueError):
    """Scan preconditions (epsilon count or span) not met."""


def hole_radius(spec: PotentialSpec, eps: float, mu: float) -> float:
    """Radius below which the radial model c + mu*eps + w0*eps/r stops being
    positive (2 eps / (1 + mu eps) for the default weights)."""
    far = spec.constant + mu * eps
    if spec.hole_weight >= 0.0 or far <= 0.0:
        return 0.0
    return -spec.hole_weight * eps / far


def model_triple(spec: PotentialSpec, eps: float, x: Array) -> Triple:
    """Pointwise triple of the radial model potential, rescaled coframe
    (e_j, alpha_H); raises InsideHole once the potential turns nonpositive."""
    x = np.asarray(x, dtype=float)
    if x.shape != (3,):
        raise ValueError(f"x must be a single point of shape (3,), got {x.shape}")
    spec_e = replace(spec, epsilon=eps)
    split = split_near_zero(spec_e)
    r = float(np.linalg.norm(x))
    if r <= hole_radius(spec_e, eps, split.mu):
        raise InsideHole(f"|x| = {r:g} is inside the model hole")
    H = float(split.model(x))
    return Triple(coframe=f"rescaled(eps={eps:g})", components=gh_components(np.asarray(H)))


def model_connection(spec: PotentialSpec, eps: float, chart: str = "north"):
    """Exact monopole connection of the model's hole term (charge w0)."""
    return monopole_connection(np.zeros(3), spec.hole_weight, eps, chart)


# ---------------------------------------------------------------------------
# Annulus sampling


def _fibonacci_sphere(n: int) -> Array:
    i = np.arange(n, dtype=float) + 0.5
    z = 1.0 - 2.0 * i / n
    phi = i * (math.pi * (3.0 - math.sqrt(5.0)))
    s = np.sqrt(np.clip(1.0 - z**2, 0.0, None))
    return np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=-1)


@dataclass(frozen=True)
class AnnulusGrid:
    """Deterministic sampling of eps/delta < |x| < delta.

    Directions come in antipodal pairs so every sample set is invariant under
    x -> -x; the transition shell [eps/delta, 2 eps/delta] gets its own
    radial refinement on top of the full-annulus ladder.
    """

    n_radii: int = 28
    n_directions: int = 64
    shell_refine: int = 20

    def __post_init__(self) -> None:
        if self.n_radii < 4 or self.shell_refine < 2:
            raise ValueError("need at least 4 annulus radii and 2 shell radii")
        if self.n_directions < 8 or self.n_directions % 2:
            raise ValueError("n_directions must be even and >= 8")

    def radii(self, eps: float, delta: float) -> Array:
        inner = eps / delta
        base = np.geomspace(inner, delta, self.n_radii)
        shell = np.geomspace(inner, 2.0 * inner, self.shell_refine + 1)
        return np.unique(np.concatenate([base, shell]))

    def directions(self) -> Array:
        half = _fibonacci_sphere(self.n_directions // 2)
        return np.concatenate([half, -half])

    def points(self, eps: float, delta: float) -> Array:
        r = self.radii(eps, delta)
        d = self.directions()
        return (r[:, None, None] * d[None, :, :]).reshape(-1, 3)


# ---------------------------------------------------------------------------
# Patch configuration


@dataclass(frozen=True)
class PatchConfig:
    """Geometry, scan epsilons, annulus sampling, and the cutoff profile.

    The cutoff is applied to rho = eps/|x| with junctions at delta/2 and
    delta: identically 1 for rho <= delta/2 (|x| >= 2 eps/delta, full triple)
    and identically 0 for rho >= delta (|x| <= eps/delta, model triple).
    """

    spec: PotentialSpec
    delta: float
    epsilon_list: tuple[float, ...]
    annulus_grid: AnnulusGrid = field(default_factory=AnnulusGrid)

    def __post_init__(self) -> None:
        if not 0.0 < self.delta < 0.5:
            raise ValueError(f"delta must lie in (0, 1/2), got {self.delta}")
        eps = tuple(float(e) for e in self.epsilon_list)
        if not eps or any(e <= 0.0 for e in eps):
            raise ValueError("epsilon_list must be positive")
        if any(b >= a for a, b in zip(eps, eps[1:])):
            raise ValueError("epsilon_list must be strictly decreasing")
        if max(eps) >= self.delta**2:
            raise ValueError(
                f"max epsilon {max(eps):g} must stay below delta^2 = {self.delta**2:g}"
            )
        object.__setattr__(self, "epsilon_list", eps)
        self._check_junctions()

    @property
    def cutoff_lo(self) -> float:
        return self.delta / 2.0

    @property
    def cutoff_hi(self) -> float:
        return self.delta

    def cutoff(self, rho: Array) -> Array:
        return chi(rho, self.cutoff_lo, self.cutoff_hi)

    def cutoff_deriv(self, rho: Array) -> Array:
        width = self.cutoff_hi - self.cutoff_lo
        s = (np.asarray(rho, dtype=float) - self.cutoff_lo) / width
        return -d_ramp(s) / width

    def _check_junctions(self) -> None:
        # C^2 matching at the junctions: the profile must leave each plateau
        # with at least quartic contact (all derivatives through third order
        # continuous), checked at steps where the signal beats roundoff.
        width = self.cutoff_hi - self.cutoff_lo
        for t0, inward, plateau in (
            (self.cutoff_lo, 1.0, 1.0),
            (self.cutoff_hi, -1.0, 0.0),
        ):
            if abs(float(self.cutoff(np.array([t0 - inward * width / 4]))[0]) - plateau) != 0.0:
                raise ValueError("cutoff plateaus must be exact beyond the junctions")
            gaps = []
            for frac in (1e-2, 2e-2):
                u = frac * width
                gaps.append(abs(float(self.cutoff(np.array([t0 + inward * u]))[0]) - plateau))
                if gaps[-1] > 40.0 * frac**4:
                    raise ValueError(
                        f"cutoff leaves the plateau at t = {t0:g} faster than quartic"
                    )
            if not 8.0 <= gaps[1] / gaps[0] <= 32.0:
                raise ValueError("cutoff plateau contact is not quartic order")


# ---------------------------------------------------------------------------
# Patched components


def patched_components(
    cfg: PatchConfig, eps: float, xs: Array, n_nodes: int = 32
) -> Array:
    """Components of the patched triple at xs (..., 3) in the rescaled
    coframe (e_j, alpha_H), volume unit 1.

    Outside the transition shell this returns bitwise the full multi-center
    triple (cutoff == 1) or the model triple (cutoff == 0); on the shell the
    d(chi) ^ b cross term is added to the interpolated Gibbons-Hawking data.
    """
    xs = np.asarray(xs, dtype=float)
    single = xs.ndim == 1
    if single:
        xs = xs[None]
    spec_e = replace(cfg.spec, epsilon=eps)
    split = split_near_zero(spec_e)
    r = np.linalg.norm(xs, axis=-1)
    if np.any(r <= hole_radius(spec_e, eps, split.mu)):
        raise InsideHole("patched triple sampled inside the model hole")

    rho = eps / r
    ch = cfg.cutoff(rho)
    dch = cfg.cutoff_deriv(rho)

    h = eval_potential(spec_e, xs)
    H = split.model(xs)
    v = ch * h + (1.0 - ch) * H

    row = np.zeros(xs.shape[:-1] + (4,))
    row[..., 3] = 1.0
    active = ch > 0.0
    if np.any(active):
        a1 = alpha1_at(split.remainder_grad, xs[active], eps, n_nodes)
        row[active, :3] = eps * ch[active, None] * a1

    comps = gh_components(v, row)

    shell = dch != 0.0
    if np.any(shell):
        xsh = xs[shell]
        rsh = r[shell]
        b = primitive_at(split, xsh, eps, n_nodes)  # (m, 3, 3) dx-components
        drho = -(eps**2) * xsh / rsh[:, None] ** 3  # rescaled-frame covector
        bres = eps * b
        cross = np.einsum("m,ma,mjc->mjac", dch[shell], drho, bres)
        cross -= np.swapaxes(cross, -1, -2)
        comps[shell, :, :3, :3] += cross
    return comps[0] if single else comps


def defect_norm(components: Array) -> Array:
    """Frobenius norm of the traceless Gram part over tr q / 3, batched."""
    q = gram_matrix(components, 1.0)
    tr3 = np.trace(q, axis1=-2, axis2=-1) / 3.0
    Q = q - tr3[..., None, None] * np.eye(3)
    return np.sqrt((Q**2).sum(axis=(-2, -1))) / tr3


@dataclass(frozen=True)
class PatchedField:
    """Patched triple sampled over the annulus grid for one epsilon."""

    config: PatchConfig
    epsilon: float
    points: Array
    components: Array

    @property
    def defect(self) -> Array:
        return defect_norm(self.components)

    @property
    def gram(self) -> Array:
        return gram_matrix(self.components, 1.0)

    def min_gram_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.gram).min())

    def triple_at(self, i: int) -> Triple:
        return Triple(
            coframe=f"rescaled(eps={self.epsilon:g})",
            components=self.components[i],
        )

    def evaluate(self, xs: Array, n_nodes: int = 32) -> Array:
        return patched_components(self.config, self.epsilon, xs, n_nodes)


def build_patched_triple(cfg: PatchConfig, eps: float, n_nodes: int = 32) -> PatchedField:
    """Assemble the patched triple over the annulus sampling for one epsilon."""
    if eps not in cfg.epsilon_list:
        # allowed, but keep the annulus consistent with the requested eps
        if eps <= 0.0 or eps >= cfg.delta**2:
            raise ValueError(f"eps = {eps:g} incompatible with delta = {cfg.delta:g}")
    pts = cfg.annulus_grid.points(eps, cfg.delta)
    comps = patched_components(cfg, eps, pts, n_nodes)
    return PatchedField(config=cfg, epsilon=eps, points=pts, components=comps)


# ---------------------------------------------------------------------------
# Coordinate-basis components and closure checks


def coordinate_components(
    cfg: PatchConfig, eps: float, xs: Array, chart: str = "north", n_nodes: int = 32
) -> Array:
    """Patched components re-expressed in the coordinate basis
    (dx1, dx2, dx3, dpsi), expanding alpha_H = dpsi + A.dx in the given chart.

    All x-dependence then sits in the component functions, so exterior
    derivatives can be taken by finite differences."""
    xs = np.asarray(xs, dtype=float)
    M = patched_components(cfg, eps, xs, n_nodes)
    A = model_connection(cfg.spec, eps, chart).base_form(xs)
    fibre = M[..., :3, 3]  # (..., 3 triples, 3 base rows)
    corr = fibre[..., :, :, None] * A[..., None, None, :] / eps
    C = np.zeros_like(M)
    C[..., :3, :3] = M[..., :3, :3] / eps**2 + corr - np.swapaxes(corr, -1, -2)
    C[..., :3, 3] = fibre / eps
    C[..., 3, :3] = -fibre / eps
    return C


def closure_residual(
    cfg: PatchConfig,
    eps: float,
    x: Array,
    step: float = 1e-3,
    chart: str = "north",
    n_nodes: int = 32,
) -> float:
    """Max |d omega| component of the patched triple at x by central FD in the
    coordinate basis; O(step^2) for the smooth exact field."""
    x = np.asarray(x, dtype=float)
    eye = np.eye(3)
    vals = {}
    for a in range(3):
        for s in (-1.0, 1.0):
            vals[(a, s)] = coordinate_components(
                cfg, eps, x + s * step * eye[a], chart, n_nodes
            )
    grad = np.stack(
        [(vals[(a, 1.0)] - vals[(a, -1.0)]) / (2.0 * step) for a in range(3)]
    )  # (3, 3, 4, 4): d/dx_a of C[j, b, c]
    worst = 0.0
    for j in range(3):
        # pure-base component (dx1 dx2 dx3)
        res = grad[0, j, 1, 2] - grad[1, j, 0, 2] + grad[2, j, 0, 1]
        worst = max(worst, abs(float(res)))
        # mixed components (dx_a dx_b dpsi); psi-derivatives vanish
        for a in range(3):
            for b_i in range(a + 1, 3):
                res = grad[a, j, b_i, 3] - grad[b_i, j, a, 3]
                worst = max(worst, abs(float(res)))
    return worst


# ---------------------------------------------------------------------------
# Defect scans


@dataclass(frozen=True)
class ScanRow:
    epsilon: float
    sup_defect: float
    min_gram_eigenvalue: float
    radii: Array
    profile: Array  # per-radius sup of the normalized defect


@dataclass(frozen=True)
class DefectScan:
    rows: tuple[ScanRow, ...]
    fitted_slope: float
    slope_stderr: float
    confidence_band: tuple[float, float]
    delta: float

    def running_slopes(self) -> list[float]:
        eps = np.array([r.epsilon for r in self.rows])
        sup = np.array([r.sup_defect for r in self.rows])
        out: list[float] = []
        for i in range(len(self.rows)):
            if i == 0:
                out.append(float("nan"))
            else:
                out.append(
                    float(np.polyfit(np.log(eps[: i + 1]), np.log(sup[: i + 1]), 1)[0])
                )
        return out

    def write_csv(self, path) -> None:
        slopes = self.running_slopes()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epsilon", "sup_defect", "slope_running"])
            for row, s in zip(self.rows, slopes):
                w.writerow(
                    ["%.17g" % row.epsilon, "%.17g" % row.sup_defect, "%.17g" % s]
                )

    def summary(self) -> dict:
        return {
            "delta": self.delta,
            "n_epsilon": len(self.rows),
            "epsilons": [r.epsilon for r in self.rows],
            "sup_defects": [r.sup_defect for r in self.rows],
            "min_gram_eigenvalues": [r.min_gram_eigenvalue for r in self.rows],
            "fitted_slope": self.fitted_slope,
            "slope_stderr": self.slope_stderr,
            "confidence_band": list(self.confidence_band),
        }

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2)
            fh.write("\n")


def defect_scan(cfg: PatchConfig, n_nodes: int = 32) -> DefectScan:
    """Sup of the normalized defect over the annulus per epsilon, with the
    log-log OLS slope of sup_defect against epsilon.

    Requires at least 4 epsilons spanning a factor >= 8."""
    eps_list = cfg.epsilon_list
    if len(eps_list) < 4:
        raise BadScan(f"need at least 4 epsilons, got {len(eps_list)}")
    if max(eps_list) / min(eps_list) < 8.0:
        raise BadScan("epsilon span must cover at least a factor of 8")

    rows = []
    nd = cfg.annulus_grid.n_directions
    for eps in eps_list:
        f = build_patched_triple(cfg, eps, n_nodes)
        d = f.defect.reshape(-1, nd)
        radii = cfg.annulus_grid.radii(eps, cfg.delta)
        profile = d.max(axis=1)
        rows.append(
            ScanRow(
                epsilon=eps,
                sup_defect=float(d.max()),
                min_gram_eigenvalue=f.min_gram_eigenvalue(),
                radii=radii,
                profile=profile,
            )
        )

    x = np.log([r.epsilon for r in rows])
    y = np.log([r.sup_defect for r in rows])
    (slope, _), cov = np.polyfit(x, y, 1, cov=True)
    stderr = float(np.sqrt(cov[0, 0]))
    return DefectScan(
        rows=tuple(rows),
        fitted_slope=float(slope),
        slope_stderr=stderr,
        confidence_band=(float(slope - 2.0 * stderr), float(slope + 2.0 * stderr)),
        delta=cfg.delta,
    )


# ---------------------------------------------------------------------------
# The chart map between the adiabatic and model descriptions


@dataclass(frozen=True)
class GluingMap:
    """Chart map x -> x/eps with a free fibre rotation.

    On the hole's circle bundle both descriptions carry the same charge-w0
    monopole connection; the base map matches them exactly, and the fibre
    phase is the residual gauge freedom."""

    epsilon: float
    phase: float
    hole_weight: float = -2.0

    def base_map(self, x: Array) -> Array:
        return np.asarray(x, dtype=float) / self.epsilon

    def fibre_map(self, psi: Array) -> Array:
        return np.asarray(psi, dtype=float) + self.phase

    def _loop(self, radius: float, n_samples: int) -> Array:
        t = np.linspace(0.0, 2.0 * np.pi, n_samples, endpoint=False)
        return radius * np.stack(
            [np.cos(t), np.sin(t), np.zeros_like(t)], axis=-1
        )

    def connection_mismatch(self, radius: float, n_samples: int = 181) -> float:
        """sup |kappa^* alpha' - alpha_0| along the equator loop |x| = radius."""
        xs = self._loop(radius, n_samples)
        A0 = monopole_connection(np.zeros(3), self.hole_weight, self.epsilon).base_form
        Ap = monopole_connection(np.zeros(3), self.hole_weight, 1.0).base_form
        pulled = Ap(self.base_map(xs)) / self.epsilon
        return float(np.abs(pulled - A0(xs)).max())

    def holonomy_gap(self, radius: float, n_samples: int = 181) -> float:
        """Line integral of the connection mismatch around the equator."""
        xs = self._loop(radius, n_samples)
        A0 = monopole_connection(np.zeros(3), self.hole_weight, self.epsilon).base_form
        Ap = monopole_connection(np.zeros(3), self.hole_weight, 1.0).base_form
        diff = Ap(self.base_map(xs)) / self.epsilon - A0(xs)
        t = np.linspace(0.0, 2.0 * np.pi, n_samples, endpoint=False)
        tangent = radius * np.stack(
            [-np.sin(t), np.cos(t), np.zeros_like(t)], axis=-1
        )
        integrand = np.sum(diff * tangent, axis=-1)
        return float(abs(integrand.mean() * 2.0 * np.pi))

    def degrees(self, radius: float) -> tuple[float, float]:
        """Bundle degrees over the sphere |x| = radius on both sides."""
        c = self.hole_weight

        def grad0(xs: Array) -> Array:
            r = np.linalg.norm(xs, axis=-1, keepdims=True)
            return -c * self.epsilon * xs / r**3

        def gradp(xs: Array) -> Array:
            r = np.linalg.norm(xs, axis=-1, keepdims=True)
            return -c * xs / r**3

        d0 = flux_over_2pi(grad0, np.zeros(3), radius, self.epsilon)
        dp = flux_over_2pi(gradp, np.zeros(3), radius / self.epsilon, 1.0)
        return d0, dp


def gluing_map_kappa(eps: float, phase: float = 0.0) -> GluingMap:
    """The chart map between the adiabatic annulus and the model chart."""
    if eps <= 0.0:
        raise ValueError(f"eps must be positive, got {eps}")
    return GluingMap(epsilon=eps, phase=float(phase))
