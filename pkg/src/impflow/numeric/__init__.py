from .linalg import (PowerIterationResult, SingularMatrixError, eig_2x2, lu_logdet,
                     power_iteration_norm)
from .rng import RandomState, rng_draw
from .tape import (GradientTape, Tensor, UnrecordedLeafError, custom, grad, logdet,
                   no_grad)

__all__ = [
    "GradientTape", "PowerIterationResult", "RandomState", "SingularMatrixError",
    "Tensor", "UnrecordedLeafError", "custom", "eig_2x2", "grad", "logdet",
    "lu_logdet", "no_grad", "power_iteration_norm", "rng_draw",
]
