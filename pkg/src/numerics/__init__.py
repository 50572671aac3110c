"""Float64 tensor engine with a record-on-execute tape."""
from numerics.tensor import Tape, Tensor, active_tape, as_tensor, backward, no_grad
from numerics.gradcheck import grad_check

__all__ = ["Tape", "Tensor", "active_tape", "as_tensor", "backward", "no_grad", "grad_check"]
