"""Quantized-weight training with relaxed (Moreau-envelope) projections."""

from .quantizer import (QuantScheme, QuantizedPoint, Solver, binarize, brute_force_quantize,
                        dist_to_q, lloyd_quantize, project, ternarize_exact,
                        ternarize_threshold)
from .relaxation import (LambdaState, RelaxationSchedule, advance_lambda, envelope_value,
                         relaxed_prox)

__version__ = "0.1.0"

__all__ = [
    "QuantScheme", "QuantizedPoint", "Solver", "binarize", "brute_force_quantize",
    "dist_to_q", "lloyd_quantize", "project", "ternarize_exact", "ternarize_threshold",
    "LambdaState", "RelaxationSchedule", "advance_lambda", "envelope_value", "relaxed_prox",
]
