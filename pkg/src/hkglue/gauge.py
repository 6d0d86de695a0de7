"""Connection 1-forms for multi-center potentials and homotopy primitives.

A potential term c*eps/|x - p| sources the curvature 2-form
F = *_eps d(c*eps/|x-p|) = -c sin(theta) dtheta^dphi in spherical coordinates
about p, with total flux -4*pi*c.  The connection is realized in the usual
two-chart form: the north chart c(cos(theta)-1) dphi is regular away from the
ray theta = pi, the south chart c(cos(theta)+1) dphi away from theta = 0, and
the charts differ by the pure gauge 2c dphi, single-valued iff 2c is an
integer.

The second half of the module is a quantitative Poincare lemma: the radial
homotopy K with (K F)_m(x) = int_0^1 t x_i F_im(t x) dt inverts d on closed
2-forms, and is used to produce the connection correction alpha1 with
d(alpha1) = *_eps du and the triple of primitives b_j with db_j = eta_j,
eta_j = (dx_j/eps) ^ alpha1 + (u/eps^2) dx_k ^ dx_l.  The homotopy gains one
order of vanishing at 0, which is what the gluing step needs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Literal

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.integrate import quad_vec

from .fields3d import NearZeroSplit, PotentialSpec, grad_potential

Array = np.ndarray


class QuadratureFailure(RuntimeError):
    """A homotopy line integral failed to reach the requested tolerance."""


# ---------------------------------------------------------------------------
# Sphere quadrature (product Gauss-Legendre x trapezoid; ~590 nodes)


def sphere_quadrature(n_theta: int = 17, n_phi: int = 35) -> tuple[Array, Array]:
    """Unit-sphere nodes and weights (weights sum to 4 pi).

    Product rule: Gauss-Legendre in cos(theta), uniform in phi; exact for
    spherical polynomials up to degree ~ min(2*n_theta-1, n_phi-1), plenty for
    1e-6 flux detection at the default 17 x 35 = 595 nodes.
    """
    ct, wt = leggauss(n_theta)
    phi = 2.0 * np.pi * np.arange(n_phi) / n_phi
    st = np.sqrt(1.0 - ct**2)
    nodes = np.stack(
        [
            np.outer(st, np.cos(phi)).ravel(),
            np.outer(st, np.sin(phi)).ravel(),
            np.outer(ct, np.ones(n_phi)).ravel(),
        ],
        axis=-1,
    )
    weights = np.outer(wt, np.full(n_phi, 2.0 * np.pi / n_phi)).ravel()
    return nodes, weights


# ---------------------------------------------------------------------------
# Monopole connections


@dataclass(frozen=True)
class ConnectionForm:
    """One chart of a circle-bundle connection alpha = (dtheta) + A_i dx_i.

    base_form maps x of shape (..., 3) to the horizontal components A
    (unrescaled dx basis); fiber_term records whether the canonical dtheta
    summand is present.
    """

    chart: Literal["north", "south"]
    base_form: Callable[[Array], Array]
    fiber_term: bool = True


def _monopole_base(center: Array, coeff: float, chart: str) -> Callable[[Array], Array]:
    sign = -1.0 if chart == "north" else 1.0

    def A(x: Array) -> Array:
        x = np.asarray(x, dtype=float)
        d = x - center
        r = np.linalg.norm(d, axis=-1)
        rho2 = d[..., 0] ** 2 + d[..., 1] ** 2
        # c (cos(theta) -+ 1) dphi in cartesian components
        f = coeff * (d[..., 2] / r + sign) / rho2
        out = np.zeros_like(d)
        out[..., 0] = -f * d[..., 1]
        out[..., 1] = f * d[..., 0]
        return out

    return A


def monopole_connection(
    center: Array, coeff: float, eps: float, chart: str = "north"
) -> ConnectionForm:
    """Connection chart for the single potential term coeff*eps/|x-center|.

    The curvature is chart-independent and integrates to -4*pi*coeff over any
    enclosing sphere; the chart transition is the gauge shift 2*coeff*dphi.
    (eps enters the potential and the star but cancels in A.)
    """
    if chart not in ("north", "south"):
        raise ValueError(f"chart must be north or south, got {chart!r}")
    center = np.asarray(center, dtype=float)
    return ConnectionForm(chart=chart, base_form=_monopole_base(center, coeff, chart))


def assemble_connection(spec: PotentialSpec, chart: str = "north") -> ConnectionForm:
    """North-chart connection for the full multi-center potential: the sum of
    per-center monopole charts (hole term included).  Exact multi-center
    potentials leave no smooth remainder, so no homotopy term is needed;
    model potentials with one go through curl_solve separately."""
    parts = [_monopole_base(np.zeros(3), spec.hole_weight, chart)]
    for rep, w in zip(spec.pair_centers, spec.pair_weights):
        p = np.asarray(rep, dtype=float)
        parts.append(_monopole_base(p, w, chart))
        parts.append(_monopole_base(-p, w, chart))

    def A(x: Array) -> Array:
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape)
        for part in parts:
            out += part(x)
        return out

    return ConnectionForm(chart=chart, base_form=A)


def chart_transition(center: Array, coeff: float, x: Array) -> tuple[Array, Array]:
    """(A_south - A_north)(x) and the predicted gauge shift 2*coeff*dphi."""
    center = np.asarray(center, dtype=float)
    diff = _monopole_base(center, coeff, "south")(x) - _monopole_base(
        center, coeff, "north"
    )(x)
    d = np.asarray(x, dtype=float) - center
    rho2 = d[..., 0] ** 2 + d[..., 1] ** 2
    dphi = np.zeros_like(d)
    dphi[..., 0] = -d[..., 1] / rho2
    dphi[..., 1] = d[..., 0] / rho2
    return diff, 2.0 * coeff * dphi


def curvature(spec: PotentialSpec, x: Array) -> Array:
    """Analytic curvature components of the assembled connection:
    F = *_eps dh, i.e. F_kl = (1/eps) * epshat_jkl * d_j h, as antisymmetric
    (..., 3, 3) matrices in the dx basis."""
    g = grad_potential(spec, x) / spec.epsilon
    F = np.zeros(g.shape[:-1] + (3, 3))
    F[..., 1, 2] = g[..., 0]
    F[..., 2, 0] = g[..., 1]
    F[..., 0, 1] = g[..., 2]
    F[..., 2, 1] = -g[..., 0]
    F[..., 0, 2] = -g[..., 1]
    F[..., 1, 0] = -g[..., 2]
    return F


def flux_over_2pi(
    grad_h: Callable[[Array], Array],
    center: Array,
    radius: float,
    eps: float,
    n_theta: int = 17,
    n_phi: int = 35,
) -> float:
    """(1/2pi) int_S *_eps dh over the sphere |x - center| = radius.

    For a potential term c*eps/|x-p| enclosed by S this is -2c.
    """
    nodes, weights = sphere_quadrature(n_theta, n_phi)
    center = np.asarray(center, dtype=float)
    xs = center + radius * nodes
    gn = np.sum(grad_h(xs) * nodes, axis=-1)
    return float(radius**2 / eps * np.sum(weights * gn) / (2.0 * np.pi))


def flux_report(spec: PotentialSpec, radius_frac: float = 0.25) -> list[dict]:
    """Per-center flux records plus hole and total (large-sphere) entries.

    Each record: {center, coeff, flux_over_2pi, nearest_integer, error}.
    """
    grad = lambda x: grad_potential(spec, x)
    sep = _min_separation(spec)
    records = []

    def record(label_center: Array, coeff: float, radius: float) -> dict:
        f = flux_over_2pi(grad, label_center, radius, spec.epsilon)
        n = round(f)
        return {
            "center": [float(c) for c in label_center],
            "coeff": float(coeff),
            "flux_over_2pi": f,
            "nearest_integer": int(n),
            "error": abs(f - n),
        }

    records.append(record(np.zeros(3), spec.hole_weight, radius_frac * sep))
    for rep, w in zip(spec.pair_centers, spec.pair_weights):
        p = np.asarray(rep, dtype=float)
        records.append(record(p, w, radius_frac * sep))
        records.append(record(-p, w, radius_frac * sep))
    R = 20.0 * max(1.0, spec.max_source_radius())
    total = record(np.zeros(3), spec.total_charge, R)
    total["center"] = "infinity"
    records.append(total)
    return records


def _min_separation(spec: PotentialSpec) -> float:
    pts = np.concatenate([spec.centers, np.zeros((1, 3))])
    if len(pts) == 1:
        return 1.0
    d = np.linalg.norm(pts[:, None] - pts[None, :], axis=-1)
    np.fill_diagonal(d, np.inf)
    return float(d.min())


# ---------------------------------------------------------------------------
# Radial homotopy primitives


def _fd_grad(u: Callable[[Array], Array], step: float) -> Callable[[Array], Array]:
    eye = np.eye(3)

    def grad(x: Array) -> Array:
        x = np.asarray(x, dtype=float)
        cols = [
            (u(x + step * eye[i]) - u(x - step * eye[i])) / (2.0 * step)
            for i in range(3)
        ]
        return np.stack(cols, axis=-1)

    return grad


def curl_solve(
    u: Callable[[Array], Array],
    ball_radius: float,
    eps: float,
    grad_u: Callable[[Array], Array] | None = None,
    tol: float = 1e-10,
) -> Callable[[Array], Array]:
    """1-form alpha1 with d(alpha1) = *_eps du on the ball, via the radial
    homotopy: alpha1(x) = (1/eps) int_0^1 t (grad u(t x) x x) dt.

    u must be smooth (and in practice harmonic) on the ball; grad_u analytic
    if available, else a central-difference fallback.  Evaluations accept
    (..., 3) arrays.  Raises QuadratureFailure if the adaptive rule reports
    an error estimate above tol * (1 + |result|).
    """
    if grad_u is None:
        grad_u = _fd_grad(u, 1e-6 * max(ball_radius, 1.0))

    def alpha1(x: Array) -> Array:
        x = np.asarray(x, dtype=float)

        def integrand(t: float) -> Array:
            return t * np.cross(grad_u(t * x), x)

        val, err = quad_vec(integrand, 0.0, 1.0, epsabs=tol, epsrel=tol)
        if err > 100.0 * tol * max(1.0, float(np.abs(val).max(initial=0.0))):
            raise QuadratureFailure(f"homotopy integral error estimate {err:g}")
        return val / eps

    return alpha1


def alpha1_at(
    grad_u: Callable[[Array], Array], xs: Array, eps: float, n_nodes: int = 32
) -> Array:
    """Vectorized fixed-order Gauss-Legendre version of curl_solve at points
    xs of shape (..., 3)."""
    xs = np.asarray(xs, dtype=float)
    t, w = _unit_gauss(n_nodes)
    # node axis just before the vector axis
    pts = xs[..., None, :] * t[(None,) * (xs.ndim - 1) + (slice(None), None)]
    g = grad_u(pts.reshape(-1, 3)).reshape(pts.shape)
    integ = np.cross(g, xs[..., None, :])
    return np.einsum("a,...ac->...c", w * t, integ) / eps


def _unit_gauss(n: int) -> tuple[Array, Array]:
    t, w = leggauss(n)
    return 0.5 * (t + 1.0), 0.5 * w


@dataclass(frozen=True)
class PrimitiveForm:
    """Triple of 1-forms b with db_j = eta_j, plus the measured vanishing
    order of |b|_eps at the origin."""

    component_forms: Callable[[Array], Array]  # x (...,3) -> (..., 3, 3) rows b_j
    growth_exponent: float


def eta_components(
    split: NearZeroSplit,
    alpha1: Callable[[Array], Array],
    xs: Array,
    eps: float,
) -> Array:
    """eta_j = (dx_j/eps)^alpha1 + (u/eps^2) dx_k^dx_l as (..., 3, 3, 3):
    leading index j, then the antisymmetric dx-component matrix."""
    xs = np.asarray(xs, dtype=float)
    a = np.asarray(alpha1(xs))
    u = np.asarray(split.remainder(xs))
    out = np.zeros(xs.shape[:-1] + (3, 3, 3))
    for j, k, l in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
        M = out[..., j, :, :]
        M[..., j, :] += a / eps
        M[..., :, j] -= a / eps
        M[..., k, l] += u / eps**2
        M[..., l, k] -= u / eps**2
    return out


def primitive_at(
    split: NearZeroSplit, xs: Array, eps: float, n_nodes: int = 32
) -> Array:
    """b_j(x) = K(eta_j) at points xs (..., 3), returned as (..., 3, 3)
    (row j = dx-components of b_j).  Uses nested fixed Gauss-Legendre rules.
    """
    xs = np.asarray(xs, dtype=float)
    t, w = _unit_gauss(n_nodes)
    shp = xs.shape[:-1]
    pts = xs[..., None, :] * t[(None,) * len(shp) + (slice(None), None)]
    flat = pts.reshape(-1, 3)
    a1 = alpha1_at(split.remainder_grad, flat, eps, n_nodes).reshape(pts.shape)
    uv = split.remainder(flat).reshape(pts.shape[:-1])

    b = np.zeros(shp + (3, 3))
    xa = np.sum(xs[..., None, :] * a1, axis=-1)  # x . alpha1(t x)
    for j, k, l in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
        # x_i eta_j(tx)_{im} = (x_j a1 - (x.a1) e_j)/eps + u (x_k e_l - x_l e_k)/eps^2
        term = xs[..., None, j, None] * a1 / eps
        term[..., j] -= xa / eps
        term[..., l] += xs[..., None, k] * uv / eps**2
        term[..., k] -= xs[..., None, l] * uv / eps**2
        b[..., j, :] = np.einsum("a,...ac->...c", w * t, term)
    return b


def triple_primitive(
    split: NearZeroSplit,
    eps: float,
    fit_radii: tuple[float, ...] = (0.2, 0.1, 0.05),
    n_nodes: int = 32,
) -> PrimitiveForm:
    """Primitives b of the difference 2-forms eta (db_j = eta_j), with the
    vanishing order of |b|_eps fitted over fit_radii."""

    def forms(x: Array) -> Array:
        return primitive_at(split, x, eps, n_nodes)

    rng = np.random.default_rng(7)
    dirs = rng.normal(size=(8, 3))
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    mags = []
    for r in fit_radii:
        vals = forms(r * dirs)
        mags.append(eps * np.sqrt((vals**2).sum(axis=(-2, -1))).mean())
    slope = np.polyfit(np.log(fit_radii), np.log(mags), 1)[0]
    return PrimitiveForm(component_forms=forms, growth_exponent=float(slope))


def fit_growth_exponent(
    form: Callable[[Array], Array],
    radii: tuple[float, ...],
    eps: float,
    seed: int = 3,
) -> float:
    """Log-log slope of eps * |components| against radius, averaged over a
    fixed direction set."""
    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(8, 3))
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    mags = []
    for r in radii:
        v = np.asarray(form(r * dirs))
        mags.append(eps * np.sqrt((v**2).sum(axis=-1)).mean())
    return float(np.polyfit(np.log(radii), np.log(mags), 1)[0])
