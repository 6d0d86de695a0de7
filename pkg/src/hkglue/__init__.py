"""Numerical toolkit for multi-center gluing constructions.

Subpackages by concern:

- ``fields3d``: harmonic multi-center potentials with a negative-weight
  core, smeared sources, and multipole expansion.
- ``gauge``: connection 1-forms for those potentials and quadrature flux
  quantization checks.
- ``triples``: pointwise algebra of 2-form triples (Gram matrices,
  trace-free defect, metric reconstruction).
- ``atiyah_hitchin``: the rotationally symmetric core profile ODE, its
  asymptote, and exponential channel splitting.
- ``ellipse``: spinor-pair to ellipse dictionary with its duality
  involution and symmetry actions.
- ``blowup_atlas``: rescaled coordinate charts near the sources and the
  overlap transition maps.
- ``cutoffs``: the nested logarithmic cutoff family used for patching.
- ``gluing``: model triples per region and the patched interpolation with
  defect scans.
- ``adiabatic_solver``: circle-invariant and mode Poisson solvers on a
  box, the patched parametrix, and commutator scans.
- ``perturb``: nonlinear corrector on the 4-torus driving the trace-free
  Gram defect to zero.
- ``cli``: config-driven pipeline orchestration and reporting.
"""

__version__ = "0.1.0"

__all__ = [
    "adiabatic_solver",
    "atiyah_hitchin",
    "blowup_atlas",
    "cli",
    "cutoffs",
    "ellipse",
    "fields3d",
    "gauge",
    "gluing",
    "perturb",
    "triples",
]
