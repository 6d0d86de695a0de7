"""Projector algebra on C^2 pairs and the associated complex ellipse vectors.

A pair (z, w) of complex 2-vectors with z ^ w != 0 and <w, z> != 0 determines
two rank-one projectors

    P u = z (w ^ u) / (w ^ z)          (range z, kernel w),
    Q u = z <w, u> / <w, z>            (range z, kernel w-perp),

with z ^ w = z1 w2 - w1 z2 and <w, z> = conj(w1) z1 + conj(w2) z2.  Their
reflections M = 2P - id and N = 2Q - id are traceless involutions, hence
M = X.sigma and N = Y.sigma for complex 3-vectors X, Y on the quadric
sum Z_i^2 = 1.  Writing X = xt + i xi (and Y = y + i eta) gives real axis
pairs with |major|^2 = 1 + |minor|^2 and major.minor = 0: the data of an
ellipse.  The two flavors are exchanged by an involutive duality, and carry
commuting actions of a Klein four-group {1, s, r, a}, of SO(3), and of the
binary dihedral generators realized inside SU(2).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy.spatial.transform import Rotation

Array = np.ndarray

PAULI = np.array(
    [
        [[0, 1], [1, 0]],
        [[0, -1j], [1j, 0]],
        [[1, 0], [0, -1]],
    ],
    dtype=complex,
)

DEGENERACY_TOL = 1e-12


class OnDiagonal(ValueError):
    """z and w are parallel: the P-side denominator z ^ w vanishes."""


class OnAntidiagonal(ValueError):
    """z and w are Hermitian-orthogonal: the Q-side denominator <w, z> vanishes."""


class DegenerateMinorAxis(ValueError):
    """The minor axis vanishes; the duality map is undefined."""


def cwedge(a: Array, b: Array) -> complex:
    """a ^ b = a1 b2 - b1 a2."""
    return complex(a[0] * b[1] - b[0] * a[1])


def cinner(a: Array, b: Array) -> complex:
    """<a, b> = conj(a1) b1 + conj(a2) b2 (conjugate-linear in the first slot)."""
    return complex(np.conj(a[0]) * b[0] + np.conj(a[1]) * b[1])


def perp(w: Array) -> Array:
    """w-perp = (-conj(w2), conj(w1)); satisfies <w, perp(w)> = 0 and
    w ^ u = <perp(w), u>."""
    return np.array([-np.conj(w[1]), np.conj(w[0])])


@dataclass(frozen=True)
class SpinorPair:
    z: Array
    w: Array

    def __post_init__(self) -> None:
        z = np.asarray(self.z, dtype=complex).reshape(2)
        w = np.asarray(self.w, dtype=complex).reshape(2)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "w", w)

    def _scale(self) -> float:
        return float(np.linalg.norm(self.z) * np.linalg.norm(self.w))


def projector_p(sp: SpinorPair) -> Array:
    """P with range z and kernel w; undefined when z and w are parallel."""
    wz = cwedge(sp.w, sp.z)
    if abs(wz) <= DEGENERACY_TOL * max(sp._scale(), 1e-300):
        raise OnDiagonal("z and w are parallel")
    return np.outer(sp.z, np.conj(perp(sp.w))) / wz


def projector_q(sp: SpinorPair) -> Array:
    """Q with range z and kernel the Hermitian orthogonal of w."""
    ip = cinner(sp.w, sp.z)
    if abs(ip) <= DEGENERACY_TOL * max(sp._scale(), 1e-300):
        raise OnAntidiagonal("z and w are Hermitian-orthogonal")
    return np.outer(sp.z, np.conj(sp.w)) / ip


def projectors(sp: SpinorPair) -> tuple[Array, Array]:
    """(P, Q) as 2x2 complex matrices; raises on the degenerate loci."""
    return projector_p(sp), projector_q(sp)


def reflections(sp: SpinorPair) -> tuple[Array, Array]:
    """M = 2P - id, N = 2Q - id."""
    P, Q = projectors(sp)
    eye = np.eye(2)
    return 2.0 * P - eye, 2.0 * Q - eye


def pauli_vector(M: Array) -> Array:
    """Coefficients Z with M = Z . sigma for traceless 2x2 M."""
    return np.array([0.5 * np.trace(M @ PAULI[i]) for i in range(3)])


def vector_pauli(Z: Array) -> Array:
    return np.einsum("i,ijk->jk", np.asarray(Z, dtype=complex), PAULI)


@dataclass(frozen=True)
class EllipseState:
    """A point on the quadric sum Z_i^2 = 1, in one of the two flavors.

    major/minor are the real and imaginary parts of the complex vector:
    (xt, xi) for flavor X, (y, eta) for flavor Y.
    """

    flavor: Literal["X", "Y"]
    vector: Array

    def __post_init__(self) -> None:
        v = np.asarray(self.vector, dtype=complex).reshape(3)
        object.__setattr__(self, "vector", v)
        res = abs(np.sum(v**2) - 1.0)
        if res > 1e-10:
            raise ValueError(f"quadric constraint violated by {res:g}")

    @property
    def major(self) -> Array:
        return self.vector.real.copy()

    @property
    def minor(self) -> Array:
        return self.vector.imag.copy()

    def constraint_residuals(self) -> tuple[float, float, float]:
        """(quadric, norm relation, orthogonality) residuals."""
        v = self.vector
        a, b = v.real, v.imag
        return (
            abs(np.sum(v**2) - 1.0),
            abs(a @ a - b @ b - 1.0),
            abs(a @ b),
        )


def to_ellipse(sp: SpinorPair, flavor: Literal["X", "Y"]) -> EllipseState:
    """Ellipse vector from the Pauli expansion of M (flavor X) or N (flavor Y);
    only the needed projector is formed, so e.g. z = w still has a Y-state."""
    R = 2.0 * (projector_p(sp) if flavor == "X" else projector_q(sp)) - np.eye(2)
    return EllipseState(flavor=flavor, vector=pauli_vector(R))


def dualize(e: EllipseState) -> EllipseState:
    """The involutive duality between the two flavors:
    xt = y x eta / |eta|^2, xi = -eta / |eta|^2 (and the same formulas back:
    y = xt x xi / |xi|^2, eta = -xi / |xi|^2)."""
    a, b = e.major, e.minor
    n2 = float(b @ b)
    if np.sqrt(n2) < DEGENERACY_TOL:
        raise DegenerateMinorAxis(f"minor axis of {e.flavor}-state vanishes")
    major = np.cross(a, b) / n2
    minor = -b / n2
    return EllipseState(
        flavor="X" if e.flavor == "Y" else "Y", vector=major + 1j * minor
    )


_SYMMETRY_SIGNS = {
    # flavor Y: (sign of y, sign of eta);  flavor X: (sign of xt, sign of xi)
    "1": {"Y": (1.0, 1.0), "X": (1.0, 1.0)},
    "s": {"Y": (1.0, -1.0), "X": (-1.0, -1.0)},
    "r": {"Y": (-1.0, -1.0), "X": (1.0, -1.0)},
    "a": {"Y": (-1.0, 1.0), "X": (-1.0, 1.0)},
}


def act_symmetry(sigma: str, e: EllipseState) -> EllipseState:
    """Klein four-group action {1, s, r, a = s o r} in the flavor-dependent
    sign convention; commutes with dualize."""
    if sigma not in _SYMMETRY_SIGNS:
        raise ValueError(f"unknown symmetry {sigma!r}")
    sa, sb = _SYMMETRY_SIGNS[sigma][e.flavor]
    return EllipseState(flavor=e.flavor, vector=sa * e.major + 1j * sb * e.minor)


def compose_symmetries(s1: str, s2: str) -> str:
    """Klein four-group law (every element is its own inverse)."""
    enc = {"1": (1, 1), "s": (1, -1), "r": (-1, -1), "a": (-1, 1)}
    dec = {v: k for k, v in enc.items()}
    a, b = enc[s1], enc[s2]
    return dec[(a[0] * b[0], a[1] * b[1])]


# ---------------------------------------------------------------------------
# Group actions: SO(3), the binary dihedral generators in SU(2), and the
# axis-fixing circle action


def act_so3(G: Array, e: EllipseState) -> EllipseState:
    """Componentwise action Z -> G Z of G in SO(3); preserves the quadric."""
    G = np.asarray(G, dtype=float)
    return EllipseState(flavor=e.flavor, vector=G @ e.vector)


def rotation_generator(ell: int) -> Array:
    """R_ell = diag(exp(-i pi/ell), exp(i pi/ell)) in SU(2)."""
    if ell == 0:
        raise ValueError("use rotation_angle for the generic rotation")
    return np.diag([np.exp(-1j * np.pi / ell), np.exp(1j * np.pi / ell)])


def rotation_angle(phi: float) -> Array:
    """diag(exp(-i phi), exp(i phi))."""
    return np.diag([np.exp(-1j * phi), np.exp(1j * phi)])


S_MATRIX = np.array([[0.0, -1.0], [1.0, 0.0]], dtype=complex)


def su2_lift(e: EllipseState) -> tuple[Array, Array]:
    """Both SU(2) elements +-g with M = g (|major| s3 + i |minor| s1) g-dagger.

    The sign of g is genuinely ambiguous (double cover); both lifts are
    returned and no preferred one is asserted.  Requires a nondegenerate
    minor axis (the frame needs both axes).
    """
    a, b = e.major, e.minor
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if nb < DEGENERACY_TOL:
        raise DegenerateMinorAxis("minor axis vanishes; frame undefined")
    m = a / na
    n = b / nb
    # columns (e1, e2, e3) -> (n, m x n, m): proper rotation
    G = np.stack([n, np.cross(m, n), m], axis=1)
    q = Rotation.from_matrix(G).as_quat()  # (x, y, z, w)
    g = q[3] * np.eye(2) - 1j * (q[0] * PAULI[0] + q[1] * PAULI[1] + q[2] * PAULI[2])
    return g, -g


def act_su2_right(U: Array, e: EllipseState) -> EllipseState:
    """Right-multiplication of the frame lift: M -> (gU) D (gU)-dagger with
    D = |major| s3 + i |minor| s1.  Right-multiplying by S realizes s, by
    R_2 realizes r; the result is independent of the lift sign."""
    g, _ = su2_lift(e)
    na = np.linalg.norm(e.major)
    nb = np.linalg.norm(e.minor)
    D = na * PAULI[2] + 1j * nb * PAULI[0]
    gU = g @ np.asarray(U, dtype=complex)
    M = gU @ D @ np.conj(gU.T)
    return EllipseState(flavor=e.flavor, vector=pauli_vector(M))


def rotate_minor_about_major(e: EllipseState, theta: float) -> EllipseState:
    """The circle action fixing the major axis: rotate the minor axis by theta
    about the major direction."""
    a = e.major
    m = a / np.linalg.norm(a)
    R = Rotation.from_rotvec(theta * m).as_matrix()
    return EllipseState(flavor=e.flavor, vector=a + 1j * (R @ e.minor))


def random_admissible_pair(rng: np.random.Generator) -> SpinorPair:
    """Complex-normal pair, resampled away from both degenerate loci."""
    while True:
        z = rng.normal(size=2) + 1j * rng.normal(size=2)
        w = rng.normal(size=2) + 1j * rng.normal(size=2)
        s = np.linalg.norm(z) * np.linalg.norm(w)
        if abs(cwedge(w, z)) > 1e-6 * s and abs(cinner(w, z)) > 1e-6 * s:
            return SpinorPair(z=z, w=w)


def identity_report(n_samples: int = 10_000, seed: int = 11) -> dict:
    """Max residuals of the projector identities over seeded random pairs."""
    rng = np.random.default_rng(seed)
    eye = np.eye(2)
    names = [
        "P2_P", "Q2_Q", "PQ_Q", "PQdag", "QP_P", "QPdag",
        "M2_id", "N2_id", "MN_id_N_M", "MNdag_Ndag_M_id",
    ]
    worst = {k: 0.0 for k in names}
    for _ in range(n_samples):
        sp = random_admissible_pair(rng)
        P, Q = projectors(sp)
        M, N = 2 * P - eye, 2 * Q - eye
        Nd = np.conj(N.T)
        vals = {
            "P2_P": P @ P - P,
            "Q2_Q": Q @ Q - Q,
            "PQ_Q": P @ Q - Q,
            "PQdag": P @ np.conj(Q.T),
            "QP_P": Q @ P - P,
            "QPdag": Q @ np.conj(P.T),
            "M2_id": M @ M - eye,
            "N2_id": N @ N - eye,
            "MN_id_N_M": M @ N - (eye + N - M),
            "MNdag_Ndag_M_id": M @ Nd + Nd + M + eye,
        }
        for k, v in vals.items():
            worst[k] = max(worst[k], float(np.abs(v).max()))
    return {"samples": n_samples, "seed": seed, "max_residuals": worst}
