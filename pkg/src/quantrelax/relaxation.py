"""Moreau-envelope relaxation of the quantization constraint.

The indicator of ``Q`` is replaced by ``(lam / 2) * dist(x, Q)**2``. Its
proximal map is a plain interpolation between a point and its
quantization, and ``lam`` grows geometrically over training so the
iterates are pushed onto ``Q``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .quantizer import QuantScheme, dist_to_q, project

# Phase I should end with lambda inside this window.
LAMBDA_WINDOW = (100.0, 200.0)

_TICK_EPS = 1e-9


def relaxed_prox(y, lam: float, scheme: QuantScheme) -> np.ndarray:
    """Minimizer of ``0.5 ||x - y||^2 + (lam / 2) dist(x, Q)^2``.

    Equals ``(lam * proj(y) + y) / (lam + 1)``.
    """
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    y = np.asarray(y, dtype=np.float64)
    p = project(y, scheme).materialized
    return (lam * p + y) / (lam + 1.0)


def relaxed_prox_objective(x, y, lam: float, scheme: QuantScheme) -> float:
    x = np.asarray(x, dtype=np.float64)
    diff = x - np.asarray(y, dtype=np.float64)
    return 0.5 * float(diff @ diff) + envelope_value(x, lam, scheme)


def envelope_value(x, lam: float, scheme: QuantScheme) -> float:
    """Moreau envelope of the indicator of ``Q``: ``(lam / 2) dist(x, Q)^2``."""
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    return 0.5 * lam * dist_to_q(x, scheme) ** 2


@dataclass(frozen=True)
class RelaxationSchedule:
    """Geometric continuation ``lam <- rho * lam`` every ``cadence`` epochs.

    ``phase2_epoch`` is the number of relaxed epochs; exact projection
    takes over from then on. ``phase2_epoch=0`` skips the relaxed phase
    entirely and ``rho=1`` freezes ``lam``.
    """

    lambda0: float = 1.0
    rho: float = 1.02
    cadence: float = 1.0
    phase2_epoch: int = 240

    def errors(self) -> list[str]:
        errs = []
        if not self.lambda0 > 0:
            errs.append(f"relax.lambda0 must be > 0, got {self.lambda0}")
        if not self.rho >= 1:
            errs.append(f"relax.rho must be >= 1, got {self.rho}")
        if not self.cadence > 0:
            errs.append(f"relax.cadence must be > 0, got {self.cadence}")
        if self.phase2_epoch < 0:
            errs.append(f"relax.phase2_epoch must be >= 0, got {self.phase2_epoch}")
        return errs

    def validate(self) -> None:
        errs = self.errors()
        if errs:
            raise ValueError("; ".join(errs))

    def initial_state(self) -> "LambdaState":
        return LambdaState(self.lambda0, 0.0, 0)

    def lambda_at_switch(self) -> float:
        return self.lambda0 * self.rho ** ticks_elapsed(self.phase2_epoch, self.cadence)

    def window_warning(self) -> str | None:
        lo, hi = LAMBDA_WINDOW
        lam = self.lambda_at_switch()
        if self.phase2_epoch > 0 and not lo < lam < hi:
            return (f"lambda reaches {lam:.4g} when phase II starts at epoch "
                    f"{self.phase2_epoch}; expected inside ({lo:g}, {hi:g})")
        return None


@dataclass(frozen=True)
class LambdaState:
    lam: float
    epochs_elapsed: float
    ticks: int


def ticks_elapsed(epochs: float, cadence: float) -> int:
    return int(math.floor(epochs / cadence + _TICK_EPS))


def advance_lambda(schedule: RelaxationSchedule, state: LambdaState,
                   epochs_delta: float) -> LambdaState:
    """Account for ``epochs_delta`` more epochs of training.

    ``lam`` is recomputed as ``lambda0 * rho**ticks`` rather than
    multiplied in place, so resumed runs reproduce it exactly.
    """
    if epochs_delta < 0:
        raise ValueError("epochs_delta must be nonnegative")
    if epochs_delta == 0:
        return state
    elapsed = state.epochs_elapsed + epochs_delta
    ticks = ticks_elapsed(elapsed, schedule.cadence)
    if ticks == state.ticks:
        return replace(state, epochs_elapsed=elapsed)
    return LambdaState(schedule.lambda0 * schedule.rho ** ticks, elapsed, ticks)
