"""Solve and differentiate parametric monotone inclusions ``0 in A_theta(x) + B_theta(x)``.

The solution map of a forward-backward fixed point is differentiated through
the implicit conservative Jacobian ``(I - V(I - gamma Z))^{-1}(U - gamma V W)``,
which is well defined whenever the fixed-point map is a contraction.
"""

from .core import (
    ContractionCertificate,
    DimensionMismatch,
    DivergenceDetected,
    ImplicitJacobian,
    InadmissibleStepSize,
    InvarianceViolated,
    JacobianBlocks,
    MaxIterationsExceeded,
    MonodiffError,
    NonPositiveModulus,
    NotContractive,
    ProblemSpec,
    Selection,
    SingularSystem,
    SolveReport,
    SpecViolation,
    StalePoint,
    SurjectivityLost,
    UnknownRegistryName,
    validate,
)
from .implicit import (
    assemble_blocks,
    contraction_certificate,
    differentiate,
    fd_jacobian,
    implicit_jacobian,
    theory_bound,
    vjp,
)
from .operators import make_forward, make_prox, moreau_conjugate_prox, smooth_gradient_handle
from .solver import apply_H, fixed_point_solve, residual, solution_gamma_invariance, step_size_default

__version__ = "0.1.0"
