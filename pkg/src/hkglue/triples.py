"""Pointwise algebra of 2-form triples on an oriented 4-dimensional coframe.

Conventions used throughout the package:

* coframe order (e0, e1, e2, e3) with e0..e2 the (rescaled) base covectors
  and e3 the fiber form; orientation e0^e1^e2^e3 positive;
* 2-forms are antisymmetric 4x4 component matrices M with
  omega = sum_{a<b} M[a,b] e^a ^ e^b;
* 3-forms are stored as length-4 vectors c with
  lambda = sum_d c[d] * e^{(d)}, e^{(d)} the increasing wedge of the three
  indices other than d;
* a triple is symplectic where its Gram matrix q_ij = omega_i ^ omega_j
  (divided by the reference volume) is positive-definite, and hyperkaehler
  where the traceless part Q of q vanishes.

The metric reconstruction follows the constructive route: orthonormalize the
triple by the inverse symmetric square root of q, contract the three
generators against the Levi-Civita symbol, and normalize so the metric volume
equals tr(q)/6 times the reference volume (the value forced by the flat and
Gibbons-Hawking model triples).
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np

Array = np.ndarray

CYCLIC = ((0, 1, 2), (1, 2, 0), (2, 0, 1))

_COMPLEMENT = ((1, 2, 3), (0, 2, 3), (0, 1, 3), (0, 1, 2))
# sign of the permutation (complement(d), d) relative to (0,1,2,3)
_SIGN_3TO1 = np.array([-1.0, 1.0, -1.0, 1.0])
# sign of the permutation (d, complement(d))
_SIGN_1TO3 = np.array([1.0, -1.0, 1.0, -1.0])


def _levi4() -> Array:
    eps = np.zeros((4, 4, 4, 4))
    for perm in permutations(range(4)):
        sgn = 1.0
        p = list(perm)
        for i in range(4):
            for j in range(i + 1, 4):
                if p[i] > p[j]:
                    sgn = -sgn
        eps[perm] = sgn
    return eps


LEVI4 = _levi4()


class NonpositivePotential(ValueError):
    """The Gibbons-Hawking potential is not positive at this point."""


class NotSymplectic(ValueError):
    """The triple's Gram matrix is not positive-definite."""


# ---------------------------------------------------------------------------
# Wedge products and flat Hodge stars


def wedge22(A: Array, B: Array) -> Array:
    """(A ^ B) / (e0^e1^e2^e3) for antisymmetric component matrices (..., 4, 4)."""
    return (
        A[..., 0, 1] * B[..., 2, 3]
        - A[..., 0, 2] * B[..., 1, 3]
        + A[..., 0, 3] * B[..., 1, 2]
        + A[..., 2, 3] * B[..., 0, 1]
        - A[..., 1, 3] * B[..., 0, 2]
        + A[..., 1, 2] * B[..., 0, 3]
    )


def wedge21(A: Array, beta: Array) -> Array:
    """2-form ^ 1-form -> 3-form in missing-index storage.

    A: (..., 4, 4) antisymmetric, beta: (..., 4); result (..., 4).
    """
    out = np.zeros(np.broadcast_shapes(A.shape[:-2], beta.shape[:-1]) + (4,))
    for d, (a, b, c) in enumerate(_COMPLEMENT):
        out[..., d] = (
            A[..., a, b] * beta[..., c]
            - A[..., a, c] * beta[..., b]
            + A[..., b, c] * beta[..., a]
        )
    return out


def star3_flat(c: Array) -> Array:
    """Hodge star 3-form -> 1-form in the flat orthonormal coframe."""
    return _SIGN_3TO1 * c


def star1_flat(beta: Array) -> Array:
    """Hodge star 1-form -> 3-form (missing-index storage)."""
    return _SIGN_1TO3 * beta


def star2_flat(A: Array) -> Array:
    """Hodge star on 2-forms in the flat orthonormal coframe."""
    out = np.empty_like(A)
    out[..., 0, 1] = A[..., 2, 3]
    out[..., 2, 3] = A[..., 0, 1]
    out[..., 0, 2] = -A[..., 1, 3]
    out[..., 1, 3] = -A[..., 0, 2]
    out[..., 0, 3] = A[..., 1, 2]
    out[..., 1, 2] = A[..., 0, 3]
    for a in range(4):
        out[..., a, a] = 0.0
        for b in range(a):
            out[..., a, b] = -out[..., b, a]
    return out


def threeform_to_tensor(c: Array) -> Array:
    """Missing-index storage -> fully antisymmetric (..., 4, 4, 4) tensor."""
    T = np.zeros(c.shape[:-1] + (4, 4, 4))
    for d, (a, b, cc) in enumerate(_COMPLEMENT):
        val = c[..., d]
        for perm in permutations((a, b, cc)):
            sgn = 1.0
            p = list(perm)
            for i in range(3):
                for j in range(i + 1, 3):
                    if p[i] > p[j]:
                        sgn = -sgn
            T[(...,) + perm] = sgn * val
    return T


def tensor_to_threeform(T: Array) -> Array:
    out = np.zeros(T.shape[:-3] + (4,))
    for d, (a, b, cc) in enumerate(_COMPLEMENT):
        out[..., d] = T[..., a, b, cc]
    return out


# ---------------------------------------------------------------------------
# Triples


@dataclass(frozen=True)
class Triple:
    """Three 2-forms at a point, with the scale of the reference volume.

    components: (3, 4, 4) antisymmetric; volume_unit: the factor by which the
    reference 4-volume exceeds e0^e1^e2^e3 of this coframe (1 for the
    rescaled coframe, eps^-3 for the coordinate coframe dx, dtheta).
    """

    coframe: str
    components: Array
    volume_unit: float = 1.0

    def __post_init__(self) -> None:
        comps = np.asarray(self.components, dtype=float)
        if comps.shape != (3, 4, 4):
            raise ValueError(f"components must be (3,4,4), got {comps.shape}")
        scale = max(1.0, float(np.abs(comps).max()))
        if np.abs(comps + np.swapaxes(comps, -1, -2)).max() > 1e-12 * scale:
            raise ValueError("triple components must be antisymmetric")
        if self.volume_unit <= 0.0:
            raise ValueError("volume_unit must be positive")
        object.__setattr__(self, "components", comps)


@dataclass(frozen=True)
class FrameMetric:
    """Symmetric metric components in the tagged coframe."""

    coframe: str
    components: Array

    def __post_init__(self) -> None:
        comps = np.asarray(self.components, dtype=float)
        if comps.shape != (4, 4):
            raise ValueError("metric components must be 4x4")
        object.__setattr__(self, "components", comps)


def gram_matrix(components: Array, volume_unit: float = 1.0) -> Array:
    """q_ij = omega_i ^ omega_j / volume for components (..., 3, 4, 4)."""
    q = wedge22(components[..., :, None, :, :], components[..., None, :, :, :])
    q = 0.5 * (q + np.swapaxes(q, -1, -2))
    return q / volume_unit


def gram_and_defect(t: Triple) -> tuple[Array, Array]:
    """Gram matrix q and its traceless part Q = q - (tr q / 3) Id."""
    q = gram_matrix(t.components, t.volume_unit)
    Q = q - (np.trace(q) / 3.0) * np.eye(3)
    return q, Q


def defect_of_components(components: Array, volume_unit: float = 1.0) -> Array:
    """Traceless Gram part for batched components (..., 3, 4, 4)."""
    q = gram_matrix(components, volume_unit)
    tr = np.trace(q, axis1=-2, axis2=-1)
    return q - (tr[..., None, None] / 3.0) * np.eye(3)


def is_symplectic(t: Triple, tol: float = 0.0) -> bool:
    q = gram_matrix(t.components, t.volume_unit)
    return bool(np.linalg.eigvalsh(q).min() > tol)


def gh_components(h: Array, alpha: Array | None = None) -> Array:
    """Gibbons-Hawking triple components in the rescaled coframe (e_j, alpha):
    omega_j = e_j ^ alpha + h e_k ^ e_l, (j,k,l) cyclic.

    h: (...,), alpha: (..., 4) with last entry the fiber coefficient
    (default the pure fiber covector e3).  Returns (..., 3, 4, 4).
    """
    h = np.asarray(h, dtype=float)
    if alpha is None:
        alpha = np.zeros(h.shape + (4,))
        alpha[..., 3] = 1.0
    else:
        alpha = np.broadcast_to(np.asarray(alpha, dtype=float), h.shape + (4,))
    out = np.zeros(h.shape + (3, 4, 4))
    for j, k, l in CYCLIC:
        M = out[..., j, :, :]
        # e_j ^ alpha
        M[..., j, :] += alpha
        M[..., :, j] -= alpha
        # + h e_k ^ e_l
        M[..., k, l] += h
        M[..., l, k] -= h
    return out


def gh_triple(h_val: float, alpha_row: Array | None = None, epsilon: float = 1.0) -> Triple:
    """Pointwise Gibbons-Hawking triple in the rescaled coframe.

    epsilon only tags the coframe; the rescaled components are eps-free.
    """
    if h_val <= 0.0:
        raise NonpositivePotential(f"potential must be positive, got {h_val}")
    comps = gh_components(np.asarray(float(h_val)), alpha_row)
    return Triple(coframe=f"rescaled(eps={epsilon:g})", components=comps)


# ---------------------------------------------------------------------------
# Metric reconstruction and complex structures


def _orthonormalize(components: Array, volume_unit: float) -> tuple[Array, float]:
    """phi_i = (S^{-1/2})_ij omega_j with S = q/(2 nu); returns (phis, nu)."""
    q = gram_matrix(components, volume_unit)
    evals = np.linalg.eigvalsh(q)
    if evals.min() <= 0.0:
        raise NotSymplectic(f"Gram matrix not positive-definite: eigs {evals}")
    nu = float(np.trace(q)) / 6.0
    S = q / (2.0 * nu)
    w, V = np.linalg.eigh(S)
    S_inv_half = V @ np.diag(1.0 / np.sqrt(w)) @ V.T
    phis = np.einsum("ij,jab->iab", S_inv_half, components)
    return phis, nu


def metric_from_triple(t: Triple) -> FrameMetric:
    """The unique metric whose self-dual forms are spanned by the triple,
    normalized so the metric volume is tr(q)/6 times the reference volume."""
    phis, nu = _orthonormalize(t.components, t.volume_unit)
    g = np.einsum("cdef,ac,de,fb->ab", LEVI4, phis[0], phis[1], phis[2])
    g = 0.5 * (g + g.T)
    det = np.linalg.det(g)
    if det <= 0.0:
        raise NotSymplectic("triple does not induce a positive metric")
    # sqrt(det(c*g)) = c^2 sqrt(det g) must equal nu * volume_unit
    c = np.sqrt(nu * t.volume_unit / np.sqrt(det))
    return FrameMetric(coframe=t.coframe, components=c * g)


def hodge_star_1form(g: Array, beta: Array) -> Array:
    """*_g on 1-forms -> 3-forms (missing-index storage), orientation from the
    coframe order."""
    A = _sym_sqrt(g)
    Ainv = np.linalg.inv(A)
    beta_f = Ainv @ beta
    c_f = star1_flat(beta_f)
    return _threeform_push(c_f, A)


def hodge_star_3form(g: Array, c: Array) -> Array:
    """*_g on 3-forms -> 1-forms."""
    A = _sym_sqrt(g)
    Ainv = np.linalg.inv(A)
    c_f = _threeform_push(c, Ainv)
    return A @ star3_flat(c_f)


def hodge_star_2form(g: Array, M: Array) -> Array:
    """*_g on 2-forms."""
    A = _sym_sqrt(g)
    Ainv = np.linalg.inv(A)
    M_f = Ainv @ M @ Ainv
    return A @ star2_flat(M_f) @ A


def _sym_sqrt(g: Array) -> Array:
    w, V = np.linalg.eigh(np.asarray(g, dtype=float))
    if w.min() <= 0.0:
        raise NotSymplectic("metric not positive-definite")
    return V @ np.diag(np.sqrt(w)) @ V.T


def _threeform_push(c: Array, B: Array) -> Array:
    """Transform missing-index storage under component map beta -> B^T beta...
    i.e. the 3-form components pulled through the basis change with matrix B
    applied to each slot."""
    T = threeform_to_tensor(c)
    T2 = np.einsum("abc,aA,bB,cC->ABC", T, B, B, B)
    return tensor_to_threeform(T2)


def complex_structures(t: Triple, g: FrameMetric) -> Array:
    """I_j beta = *_g(omega_j ^ beta) as 4x4 matrices acting on 1-form
    components; satisfies I_j^2 = -Id and I1 I2 I3 = -Id for hyperkaehler
    triples."""
    G = g.components
    A = _sym_sqrt(G)
    Ainv = np.linalg.inv(A)
    out = np.zeros((3, 4, 4))
    basis = np.eye(4)
    for j in range(3):
        om_f = Ainv @ t.components[j] @ Ainv
        for d in range(4):
            c = wedge21(om_f, basis[d])
            out[j, :, d] = A @ star3_flat(c)
        # input side: beta_f = Ainv beta_e
        out[j] = out[j] @ Ainv
    return out


def torsion_coefficients(phis: Triple, dphis: Array) -> Array:
    """Connection 1-forms from the first-order torsion system.

    phis: orthonormalized triple; dphis: (3, 4) exterior derivatives in
    missing-index storage.  Returns u = (u1, u2, u3) as (3, 4) 1-forms with

        u_j = (*(dphi_j) + I_l *(dphi_k) - I_k *(dphi_l)) / 2,

    (j,k,l) cyclic; the outputs satisfy dphi_j = u_k ^ phi_l - u_l ^ phi_k.
    All vanish iff the triple is closed (torsion-free, hyperkaehler case).
    """
    g = metric_from_triple(phis)
    I = complex_structures(phis, g)
    v = np.stack([hodge_star_3form(g.components, dphis[j]) for j in range(3)])
    u = np.zeros((3, 4))
    for j, k, l in CYCLIC:
        u[j] = 0.5 * (v[j] + I[l] @ v[k] - I[k] @ v[l])
    return u


def torsion_residual(phis: Triple, dphis: Array, u: Array) -> float:
    """Max-norm of dphi_j - (u_k ^ phi_l - u_l ^ phi_k) over j."""
    res = 0.0
    for j, k, l in CYCLIC:
        target = wedge21(phis.components[l], u[k]) - wedge21(phis.components[k], u[l])
        res = max(res, float(np.abs(dphis[j] - target).max()))
    return res
