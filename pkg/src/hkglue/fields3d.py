"""Multi-center harmonic potentials on R^3.

The basic object is a potential of the form

    h(x) = c + w0 * eps / |x| + sum_p  w_p * eps / |x - p|

where the source set P is symmetric under x -> -x (every p comes with -p,
carrying the same weight) and w0 is the coefficient of the central "hole"
term, negative in the geometries we care about.  The module provides exact
evaluation, the near-zero splitting h = H + u into a radial model plus a
smooth even remainder, and exterior multipole expansions of the far field.

Centers are stored as canonical pairs: the lexicographically larger of
{p, -p} is kept and each pair is summed together before accumulation, so
evaluated quantities are exactly even in x.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import eval_legendre, lpmv

Array = np.ndarray

MAX_MULTIPOLE_ORDER = 12


class EvaluationAtSingularity(ValueError):
    """Raised when a field is evaluated inside the exclusion radius of a source."""


class RadiusInsideSources(ValueError):
    """Raised when an exterior expansion is used at or inside the source radius."""


def _canonical_pair(p: Array) -> Array:
    """Return the lexicographically larger of p and -p."""
    for c in p:
        if c > 0.0:
            return p
        if c < 0.0:
            return -p
    raise ValueError("center at the origin is not a valid pair member")


@dataclass(frozen=True)
class PotentialSpec:
    """A symmetric multi-center potential.

    pair_centers holds one representative per {p, -p} pair; pair_weights the
    (shared) weight of both members.  hole_weight multiplies eps/|x| at the
    origin, constant is the value at infinity.
    """

    pair_centers: tuple[tuple[float, float, float], ...]
    pair_weights: tuple[float, ...]
    epsilon: float
    hole_weight: float = -2.0
    constant: float = 1.0

    def __post_init__(self) -> None:
        if self.epsilon <= 0.0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if len(self.pair_centers) != len(self.pair_weights):
            raise ValueError("one weight per center pair required")
        pts = np.asarray(self.pair_centers, dtype=float)
        if pts.size:
            if pts.ndim != 2 or pts.shape[1] != 3:
                raise ValueError("pair_centers must be 3-vectors")
            if np.any(np.linalg.norm(pts, axis=1) == 0.0):
                raise ValueError("centers must be nonzero")
            # Distinctness across the full symmetric set {±p}.
            full = np.concatenate([pts, -pts])
            d = np.linalg.norm(full[:, None, :] - full[None, :, :], axis=-1)
            np.fill_diagonal(d, np.inf)
            if d.min() == 0.0:
                raise ValueError("centers must be pairwise distinct")

    @classmethod
    def from_centers(
        cls,
        centers: Sequence[Sequence[float]],
        epsilon: float,
        weights: Sequence[float] | None = None,
        hole_weight: float = -2.0,
        constant: float = 1.0,
    ) -> "PotentialSpec":
        """Build a spec from a full symmetric center list (each p with its -p)."""
        pts = [np.asarray(c, dtype=float) for c in centers]
        if weights is None:
            wts = [0.5] * len(pts)
        else:
            wts = [float(w) for w in weights]
            if len(wts) != len(pts):
                raise ValueError("need one weight per center")
        seen: dict[tuple[float, float, float], float] = {}
        order: list[tuple[float, float, float]] = []
        matched: dict[tuple[float, float, float], int] = {}
        for p, w in zip(pts, wts):
            rep = tuple(_canonical_pair(p))
            if rep in seen:
                if seen[rep] != w:
                    raise ValueError(f"pair {rep} has mismatched weights")
                matched[rep] += 1
            else:
                seen[rep] = w
                matched[rep] = 1
                order.append(rep)
        bad = [rep for rep, n in matched.items() if n != 2]
        if bad:
            raise ValueError(f"center set is not symmetric under x -> -x: {bad}")
        return cls(
            pair_centers=tuple(order),
            pair_weights=tuple(seen[rep] for rep in order),
            epsilon=epsilon,
            hole_weight=hole_weight,
            constant=constant,
        )

    @classmethod
    def from_pairs(
        cls,
        pairs: Sequence[Sequence[float]],
        epsilon: float,
        weights: Sequence[float] | None = None,
        hole_weight: float = -2.0,
        constant: float = 1.0,
    ) -> "PotentialSpec":
        """Build a spec from one representative per pair (the -p twins are implied)."""
        pts = [np.asarray(c, dtype=float) for c in pairs]
        full = [q for p in pts for q in (p, -p)]
        wts = None if weights is None else [w for w in weights for _ in range(2)]
        return cls.from_centers(full, epsilon, wts, hole_weight, constant)

    @property
    def k(self) -> int:
        """Number of symmetric pairs."""
        return len(self.pair_centers)

    @property
    def centers(self) -> Array:
        """Full symmetric center array, shape (2k, 3), ordered (+p, -p) per pair."""
        if not self.pair_centers:
            return np.zeros((0, 3))
        reps = np.asarray(self.pair_centers, dtype=float)
        return np.stack([reps, -reps], axis=1).reshape(-1, 3)

    @property
    def center_weights(self) -> Array:
        return np.repeat(np.asarray(self.pair_weights, dtype=float), 2)

    @property
    def scene_scale(self) -> float:
        if not self.pair_centers:
            return 1.0
        return max(1.0, float(np.max(np.linalg.norm(self.pair_centers, axis=1))))

    @property
    def exclusion_radius(self) -> float:
        return 1e-9 * self.scene_scale

    @property
    def total_charge(self) -> float:
        """hole_weight + sum of all center weights; the far-field monopole is
        eps * total_charge / |x|."""
        return self.hole_weight + 2.0 * float(np.sum(self.pair_weights))

    def max_source_radius(self) -> float:
        if not self.pair_centers:
            return 0.0
        return float(np.max(np.linalg.norm(self.pair_centers, axis=1)))


def _check_clear(r: Array, r_excl: float) -> None:
    if np.any(r < r_excl):
        raise EvaluationAtSingularity(
            f"evaluation within exclusion radius {r_excl:g} of a source"
        )


def eval_potential(spec: PotentialSpec, x: Array) -> Array:
    """h(x) for x of shape (..., 3); raises inside the exclusion radius.

    Pair members are summed before accumulation, so h(-x) == h(x) bitwise.
    """
    x = np.asarray(x, dtype=float)
    r = np.linalg.norm(x, axis=-1)
    _check_clear(r, spec.exclusion_radius)
    out = spec.constant + spec.hole_weight * spec.epsilon / r
    for rep, w in zip(spec.pair_centers, spec.pair_weights):
        p = np.asarray(rep)
        rm = np.linalg.norm(x - p, axis=-1)
        rp = np.linalg.norm(x + p, axis=-1)
        _check_clear(rm, spec.exclusion_radius)
        _check_clear(rp, spec.exclusion_radius)
        out = out + (w * spec.epsilon) * (1.0 / rm + 1.0 / rp)
    return out


def grad_potential(spec: PotentialSpec, x: Array) -> Array:
    """Analytic gradient of h, shape (..., 3)."""
    x = np.asarray(x, dtype=float)
    r = np.linalg.norm(x, axis=-1, keepdims=True)
    _check_clear(r[..., 0], spec.exclusion_radius)
    out = -spec.hole_weight * spec.epsilon * x / r**3
    for rep, w in zip(spec.pair_centers, spec.pair_weights):
        p = np.asarray(rep)
        dm = x - p
        dp = x + p
        rm = np.linalg.norm(dm, axis=-1, keepdims=True)
        rp = np.linalg.norm(dp, axis=-1, keepdims=True)
        _check_clear(rm[..., 0], spec.exclusion_radius)
        _check_clear(rp[..., 0], spec.exclusion_radius)
        out = out - (w * spec.epsilon) * (dm / rm**3 + dp / rp**3)
    return out


# ---------------------------------------------------------------------------
# Near-zero splitting h = H + u


@dataclass(frozen=True)
class NearZeroSplit:
    """h = H + u near the origin: H(x) = c + mu*eps + hole*eps/|x| is the
    radial model and u is smooth, even, harmonic away from the outer sources,
    with u(0) = 0 and grad u(0) = 0."""

    mu: float
    model: Callable[[Array], Array]
    remainder: Callable[[Array], Array]
    remainder_grad: Callable[[Array], Array] = field(repr=False, default=None)  # type: ignore[assignment]


def split_near_zero(spec: PotentialSpec) -> NearZeroSplit:
    """Split h into the radial near-zero model and the O(eps |x|^2) remainder.

    mu = sum over pairs of 2*w/|p| (with default weights 1/2 this is
    sum 1/|p_nu|).  The remainder subtracts each pair's value at the origin
    inside the pair loop, so u(0) = 0 exactly.
    """
    reps = [np.asarray(p, dtype=float) for p in spec.pair_centers]
    dists = [float(np.linalg.norm(p)) for p in reps]
    mu = float(sum(2.0 * w / d for w, d in zip(spec.pair_weights, dists)))
    eps = spec.epsilon
    r_excl = spec.exclusion_radius

    def model(x: Array) -> Array:
        x = np.asarray(x, dtype=float)
        r = np.linalg.norm(x, axis=-1)
        _check_clear(r, r_excl)
        return spec.constant + mu * eps + spec.hole_weight * eps / r

    def remainder(x: Array) -> Array:
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1])
        for p, w, d in zip(reps, spec.pair_weights, dists):
            rm = np.linalg.norm(x - p, axis=-1)
            rp = np.linalg.norm(x + p, axis=-1)
            _check_clear(rm, r_excl)
            _check_clear(rp, r_excl)
            out = out + (w * eps) * ((1.0 / rm + 1.0 / rp) - 2.0 / d)
        return out

    def remainder_grad(x: Array) -> Array:
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape)
        for p, w in zip(reps, spec.pair_weights):
            dm = x - p
            dp = x + p
            rm = np.linalg.norm(dm, axis=-1, keepdims=True)
            rp = np.linalg.norm(dp, axis=-1, keepdims=True)
            _check_clear(rm[..., 0], r_excl)
            _check_clear(rp[..., 0], r_excl)
            out = out - (w * eps) * (dm / rm**3 + dp / rp**3)
        return out

    return NearZeroSplit(mu=mu, model=model, remainder=remainder,
                         remainder_grad=remainder_grad)


def quadrupole_matrix(spec: PotentialSpec) -> Array:
    """Q with u(x) = eps * x.Qx + O(eps |x|^4): the quadratic Taylor data of
    the near-zero remainder.  Q = sum_pairs (w/|p|^3) (3 phat phat^T - Id)."""
    Q = np.zeros((3, 3))
    for rep, w in zip(spec.pair_centers, spec.pair_weights):
        p = np.asarray(rep, dtype=float)
        d = np.linalg.norm(p)
        n = p / d
        Q += (w / d**3) * (3.0 * np.outer(n, n) - np.eye(3))
    return Q


# ---------------------------------------------------------------------------
# Real solid harmonics (Schmidt semi-normalized) and multipole expansions


def schmidt_harmonics(n: Array, order: int) -> Array:
    """C_{lm}(n) for unit vectors n (..., 3), returned as (..., L) where L runs
    over (l, m) with l = 0..order, m = -l..l.

    Schmidt semi-normalization: the addition theorem reads
    P_l(a.b) = sum_m C_{lm}(a) C_{lm}(b) with no extra factors.
    """
    n = np.asarray(n, dtype=float)
    ct = np.clip(n[..., 2], -1.0, 1.0)
    phi = np.arctan2(n[..., 1], n[..., 0])
    cols = []
    for ell in range(order + 1):
        for m in range(-ell, ell + 1):
            am = abs(m)
            if am == 0:
                cols.append(eval_legendre(ell, ct))
                continue
            # lpmv carries the Condon-Shortley (-1)^m; cancel it.
            norm = (-1.0) ** am * math.sqrt(
                2.0 * math.factorial(ell - am) / math.factorial(ell + am)
            )
            plm = norm * lpmv(am, ell, ct)
            cols.append(plm * (np.cos(am * phi) if m > 0 else np.sin(am * phi)))
    return np.stack(cols, axis=-1)


def _lm_index(order: int) -> list[tuple[int, int]]:
    return [(ell, m) for ell in range(order + 1) for m in range(-ell, ell + 1)]


@dataclass(frozen=True)
class MultipoleExpansion:
    """Exterior expansion of h - constant:
    sum_{l<=order} sum_m c_{lm} C_{lm}(xhat) / |x|^{l+1}."""

    order: int
    coefficients: Array  # flat over (l, m), same layout as schmidt_harmonics
    source_radius: float

    def coefficient(self, ell: int, m: int) -> float:
        idx = _lm_index(self.order).index((ell, m))
        return float(self.coefficients[idx])

    def degree_coefficients(self, ell: int) -> Array:
        i0 = ell * ell
        return self.coefficients[i0 : i0 + 2 * ell + 1]

    def __call__(self, x: Array) -> Array:
        x = np.asarray(x, dtype=float)
        r = np.linalg.norm(x, axis=-1)
        if np.any(r <= self.source_radius):
            raise RadiusInsideSources(
                f"exterior expansion evaluated at |x| <= {self.source_radius:g}"
            )
        C = schmidt_harmonics(x / r[..., None], self.order)
        ells = np.array([lm[0] for lm in _lm_index(self.order)])
        return np.sum(self.coefficients * C / r[..., None] ** (ells + 1), axis=-1)

    def rows(self) -> list[tuple[int, int, float]]:
        """(ell, m, coefficient) rows for CSV export."""
        return [
            (ell, m, float(c))
            for (ell, m), c in zip(_lm_index(self.order), self.coefficients)
        ]


def multipole_expand(spec: PotentialSpec, order: int) -> MultipoleExpansion:
    """Exterior multipole coefficients of h - constant.

    Pair contributions are folded through the exact parity relation
    C_{lm}(-n) = (-1)^l C_{lm}(n), so odd degrees vanish identically.
    The degree-0 coefficient is eps * (hole_weight + sum of weights).
    """
    if order < 0:
        raise ValueError("order must be non-negative")
    if order > MAX_MULTIPOLE_ORDER:
        raise ValueError(f"order capped at {MAX_MULTIPOLE_ORDER}")
    lm = _lm_index(order)
    coeffs = np.zeros(len(lm))
    coeffs[0] = spec.hole_weight * spec.epsilon
    for rep, w in zip(spec.pair_centers, spec.pair_weights):
        p = np.asarray(rep, dtype=float)
        d = np.linalg.norm(p)
        C = schmidt_harmonics(p / d, order)
        for i, (ell, _) in enumerate(lm):
            if ell % 2 == 1:
                continue  # the -p twin cancels odd degrees exactly
            coeffs[i] += 2.0 * w * spec.epsilon * d**ell * C[i]
    return MultipoleExpansion(
        order=order, coefficients=coeffs, source_radius=spec.max_source_radius()
    )
