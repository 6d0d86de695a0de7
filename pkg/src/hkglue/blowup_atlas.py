"""Real blow-up of (x, eps) = (0, 0) in R^n x [0, eps0): charts and lifts.

Points are homogeneous triples [Z, R, S] with (Z, R) != (0, 0), S >= 0, under
the scaling t.(Z, R, S) = (tZ, tR, S/t); representatives are stored with
|Z|^2 + R^2 = 1.  The blow-down is beta[Z,R,S] = (SZ, SR) and the projection
pi = RS reads off eps in every chart.  Three charts cover the space:

    plain   (x, eps)        = (SZ, SR)         away from the front face S = 0
    prime   (x', eps')      = (Z/R, RS)        away from the face R = 0
    corner  (y, rho, sigma) = (Z/|Z|, R/|Z|, S|Z|)   away from Z = 0

so x' = x/eps, y = x/|x|, rho = eps/|x|, sigma = |x|.

The second half of the module builds the boundary-defining-function suite of
the multi-center gluing region: sigma_nu per center, sigma_I at infinity, and
rho := eps / (sigma_0 ... sigma_k), which makes the product identity
rho * sigma_0 ... sigma_k = eps exact by construction.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .cutoffs import log_blend
from .fields3d import PotentialSpec

Array = np.ndarray

NORMALIZATION_TOL = 1e-14


class ChartDomainViolation(ValueError):
    """Requested chart does not cover the point."""


class BadDelta(ValueError):
    """Gluing parameter outside the admissible window."""


@dataclass(frozen=True)
class HomogeneousPoint:
    """Normalized representative [Z, R, S] with |Z|^2 + R^2 = 1."""

    Z: Array
    R: float
    S: float
    eps0: float = math.inf

    def __post_init__(self):
        Z = np.asarray(self.Z, dtype=float)
        R = float(self.R)
        S = float(self.S)
        if R < 0 or S < 0:
            raise ValueError("R and S must be non-negative")
        norm2 = float(Z @ Z) + R * R
        if norm2 == 0.0:
            raise ValueError("(Z, R) must not vanish")
        t = 1.0 / math.sqrt(norm2)
        Z = Z * t
        R = R * t
        S = S / t
        if abs(float(Z @ Z) + R * R - 1.0) > NORMALIZATION_TOL:
            # one more Newton step of the scale factor
            t2 = 1.0 / math.sqrt(float(Z @ Z) + R * R)
            Z, R, S = Z * t2, R * t2, S / t2
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "S", S)
        if self.pi >= self.eps0:
            raise ValueError(f"pi = {self.pi:g} exceeds eps0 = {self.eps0:g}")

    # -- chart constructors -------------------------------------------------

    @classmethod
    def from_plain(cls, x, eps, eps0=math.inf):
        return cls(Z=np.asarray(x, dtype=float), R=float(eps), S=1.0,
                   eps0=eps0)

    @classmethod
    def from_prime(cls, x_prime, eps_prime, eps0=math.inf):
        return cls(Z=np.asarray(x_prime, dtype=float), R=1.0,
                   S=float(eps_prime), eps0=eps0)

    @classmethod
    def from_corner(cls, y, rho, sigma, eps0=math.inf):
        y = np.asarray(y, dtype=float)
        if abs(y @ y - 1.0) > 1e-10:
            raise ValueError("corner chart needs a unit direction")
        return cls(Z=y, R=float(rho), S=float(sigma), eps0=eps0)

    # -- invariant maps -----------------------------------------------------

    @property
    def pi(self) -> float:
        """The parameter eps, chart-independently."""
        return self.R * self.S

    def blow_down(self):
        """beta[Z,R,S] = (SZ, SR), defined on all of the blow-up."""
        return (self.S * self.Z, self.S * self.R)

    def scale_ratio(self) -> float:
        """Lift of eps/|x|: equals rho in the corner chart, 0 on R = 0."""
        nz = float(np.linalg.norm(self.Z))
        if nz == 0.0:
            return math.inf
        return self.R / nz


def chart_convert(p: HomogeneousPoint, target: str):
    """Coordinates of p in the requested chart.

    Returns (x, eps) for "plain", (x', eps') for "prime", and
    (y, rho, sigma) for "corner".
    """
    if target == "plain":
        if p.S <= 0.0:
            raise ChartDomainViolation("plain chart misses the front face")
        return (p.S * p.Z, p.S * p.R)
    if target == "prime":
        if p.R <= 0.0:
            raise ChartDomainViolation("prime chart misses the face R = 0")
        return (p.Z / p.R, p.R * p.S)
    if target == "corner":
        nz = float(np.linalg.norm(p.Z))
        if nz <= 0.0:
            raise ChartDomainViolation("corner chart misses Z = 0")
        return (p.Z / nz, p.R / nz, p.S * nz)
    raise ValueError(f"unknown chart {target!r}")


def lift_rescale(p: HomogeneousPoint) -> HomogeneousPoint:
    """The extension of (x, eps) -> x/eps: drop S to the front face."""
    return HomogeneousPoint(Z=p.Z, R=p.R, S=0.0, eps0=p.eps0)


class LiftedVectorField:
    """The lift of eps * d/dx_j through the three charts.

    Chart expressions:
        prime   d/dx'_j
        plain   eps * d/dx_j
        corner  -y_j (rho^2 d_rho - rho sigma d_sigma) + rho (e_j - y_j y) . d_y
    """

    def __init__(self, axis: int, n: int = 3):
        if not 0 <= axis < n:
            raise ValueError("axis out of range")
        self.axis = axis
        self.n = n

    def prime_coefficients(self) -> Array:
        e = np.zeros(self.n)
        e[self.axis] = 1.0
        return e

    def corner_coefficients(self, y, rho):
        """(radial coefficient, tangential coefficient vector).

        The radial coefficient multiplies the field rho^2 d_rho - rho sigma
        d_sigma; the tangential vector is already scaled by rho.
        """
        y = np.asarray(y, dtype=float)
        e = np.zeros(self.n)
        e[self.axis] = 1.0
        return -y[self.axis], rho * (e - y[self.axis] * y)

    # -- numeric application (for cross-chart consistency checks) ----------

    @staticmethod
    def _diff(g, step):
        """Fourth-order centered derivative of g at 0."""
        return (g(-2 * step) - 8 * g(-step) + 8 * g(step) - g(2 * step)) \
            / (12 * step)

    def apply_plain(self, fn, x, eps, step=5e-4):
        x = np.asarray(x, dtype=float)
        e = np.zeros(self.n)
        e[self.axis] = 1.0
        return eps * self._diff(lambda t: fn(x + t * e, eps), step)

    def apply_prime(self, fn, x_prime, eps_prime, step=5e-4):
        xp = np.asarray(x_prime, dtype=float)
        e = np.zeros(self.n)
        e[self.axis] = 1.0
        return self._diff(lambda t: fn(xp + t * e, eps_prime), step)

    def apply_corner(self, fn, y, rho, sigma, step=5e-4):
        y = np.asarray(y, dtype=float)
        rad, tan = self.corner_coefficients(y, rho)
        d_rho = self._diff(lambda t: fn(y, rho + t, sigma), step)
        d_sigma = self._diff(lambda t: fn(y, rho, sigma + t), step)
        out = rad * (rho * rho * d_rho - rho * sigma * d_sigma)
        tn = float(np.linalg.norm(tan))
        if tn > 0.0:
            w = tan / tn

            def along(t):
                yy = y + t * w
                return fn(yy / np.linalg.norm(yy), rho, sigma)

            out += tn * self._diff(along, step)
        return out


# ---------------------------------------------------------------------------
# boundary-defining-function suite
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BdfSuite:
    """Defining functions of the faces of the glued space, on the plain chart.

    ``centers`` lists one representative per face: the origin first, then one
    member of each center pair; each sigma_nu is symmetric under the central
    involution.  rho is derived so that rho * prod(sigma) = eps exactly.
    """

    spec: PotentialSpec
    delta: float
    centers: Array = field(init=False, repr=False)

    def __post_init__(self):
        d = float(self.delta)
        eps = self.spec.epsilon
        if not 0.0 < d < 0.5:
            raise BadDelta("delta must lie in (0, 1/2)")
        if not eps < d * d:
            raise BadDelta("need eps < delta^2")
        reps = np.vstack([np.zeros(3), self.spec.pair_centers])
        seps = [np.linalg.norm(a - b)
                for i, a in enumerate(reps) for b in reps[i + 1:]]
        seps += [2.0 * np.linalg.norm(p) for p in self.spec.pair_centers]
        if seps and 4.0 * d >= min(seps):
            raise BadDelta("delta too large for the center separation")
        object.__setattr__(self, "centers", reps)

    @property
    def epsilon(self) -> float:
        return self.spec.epsilon

    @property
    def n_faces(self) -> int:
        """Number of center faces (hole plus pairs)."""
        return 1 + self.spec.k

    def _center_distance(self, nu: int, x: Array):
        """Involution-invariant distance to the nu-th center set."""
        x = np.asarray(x, dtype=float)
        p = self.centers[nu]
        if nu == 0:
            return np.linalg.norm(x, axis=-1)
        dplus = np.linalg.norm(x - p, axis=-1)
        dminus = np.linalg.norm(x + p, axis=-1)
        return np.minimum(dplus, dminus)

    def sigma_nu(self, nu: int, x):
        """Defining function of the nu-th center face.

        Equals eps in the deep core (t <= eps/delta), the center distance t
        through the corner window [2 eps/delta, delta], and 1 outside 2 delta,
        with C^3 log-scale blends between.
        """
        if not 0 <= nu < self.n_faces:
            raise ValueError("face index out of range")
        eps = self.epsilon
        d = self.delta
        t = np.asarray(self._center_distance(nu, x), dtype=float)
        t_safe = np.maximum(t, 1e-300)
        inner = log_blend(t_safe, eps / d, 2 * eps / d)
        outer = log_blend(t_safe, d, 2 * d)
        log_sigma = (1.0 - inner) * math.log(eps) \
            + inner * (1.0 - outer) * np.log(t_safe)
        out = np.exp(log_sigma)
        # exact values on the normalization regions, bit for bit
        out = np.where(inner == 0.0, eps, out)
        out = np.where((inner == 1.0) & (outer == 0.0), t, out)
        out = np.where(outer == 1.0, 1.0, out)
        return float(out) if out.ndim == 0 else out

    def sigma_I(self, x):
        """Defining function of the face at infinity: 1/|x| far out."""
        r0 = max(1.0, 2.0 * self.spec.max_source_radius())
        t = np.asarray(np.linalg.norm(np.asarray(x, dtype=float), axis=-1))
        t_safe = np.maximum(t, 1e-300)
        b = log_blend(t_safe, r0, 2 * r0)
        out = np.exp(-b * np.log(t_safe))
        return float(out) if out.ndim == 0 else out

    def sigma_product(self, x):
        out = 1.0
        for nu in range(self.n_faces):
            out = out * self.sigma_nu(nu, x)
        return out

    def rho(self, x):
        """Defining function of the adiabatic face: eps / prod sigma_nu."""
        return self.epsilon / self.sigma_product(x)

    def sigma(self, x):
        """The product sigma_0 ... sigma_k sigma_I."""
        return self.sigma_product(x) * self.sigma_I(x)

    def product_residual(self, x):
        """|rho * sigma_0 ... sigma_k - eps|; zero by construction."""
        return abs(self.rho(x) * self.sigma_product(x) - self.epsilon)


def build_bdf_suite(spec: PotentialSpec, delta: float) -> BdfSuite:
    return BdfSuite(spec=spec, delta=delta)


def write_chart_table(points, path) -> None:
    """CSV rows (chart, coords..., pi, rho, sigma) for external plotting."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        n = int(np.asarray(points[0].Z).size)
        head = ["chart"] + [f"c{i}" for i in range(n + 2)] \
            + ["pi", "rho", "sigma"]
        writer.writerow(head)
        for p in points:
            y, rho, sigma = chart_convert(p, "corner")
            for chart in ("plain", "prime", "corner"):
                try:
                    coords = chart_convert(p, chart)
                except ChartDomainViolation:
                    continue
                flat = []
                for c in coords:
                    arr = np.atleast_1d(np.asarray(c, dtype=float))
                    flat.extend(float(v) for v in arr)
                while len(flat) < n + 2:
                    flat.append(math.nan)
                writer.writerow([chart] + [f"{v:.17g}" for v in flat]
                                + [f"{p.pi:.17g}", f"{rho:.17g}",
                                   f"{sigma:.17g}"])
