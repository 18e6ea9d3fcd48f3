"""Instruments for the convergence analysis of the exact-projection phase.

``Q`` is a finite union of lines through the origin. Most quantities
here come from that fact:

* ``alpha_k`` solves
  ``alpha ||x1 - x0||^2 + ||y - x0||^2 = ||y - x1||^2`` for a step
  ``x0 = proj(y) -> x1``. It is nonnegative and equals 1 when both
  points lie on one line.
* ``theta_min`` is the smallest angle between two lines of ``Q``.
* ``stationarity_proxy`` is ``||x1 - x0||^2 / gamma^2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .quantizer import (OracleSizeError, QuantScheme, canonical_line, dist_to_q,
                        enumerate_lines, project)

UNDEFINED_STEP = 1e-12
PROJECTION_TOL = 1e-9
SAME_LINE_TOL = 1e-12

THETA_MAX_N = {1: 12, 2: 8}
THETA_MAX_LINES = 5000


class ContractError(ValueError):
    """A diagnostic was called outside its preconditions."""


@dataclass(frozen=True)
class AlphaRecord:
    k: int
    alpha: float | None
    same_line: bool | None
    step_norm: float


def alpha_value(y, x0, x1) -> float | None:
    """``alpha_k`` for the step ``x0 -> x1`` with ``x0 = proj(y)``; None if the step is ~0.

    Written as ``1 - 2 <d, y - x0> / ||d||^2`` (``d = x1 - x0``), which is
    algebraically the defining ratio but keeps ``alpha = 1`` accurate for
    tiny steps along a line.
    """
    d = np.asarray(x1, dtype=np.float64) - np.asarray(x0, dtype=np.float64)
    dd = float(d @ d)
    if math.sqrt(dd) < UNDEFINED_STEP:
        return None
    r = np.asarray(y, dtype=np.float64) - np.asarray(x0, dtype=np.float64)
    return 1.0 - 2.0 * float(d @ r) / dd


def same_line(a, b, groups=None) -> bool | None:
    """Whether two points of ``Q`` sit on the same line (per group); None at the origin."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    slices = [slice(None)] if groups is None else [g.slice for g in groups if g.quantized]
    for sl in slices:
        u, v = a[sl], b[sl]
        nu, nv = np.linalg.norm(u), np.linalg.norm(v)
        if nu == 0 or nv == 0:
            return None
        if abs(abs(float(u @ v)) - nu * nv) > SAME_LINE_TOL * nu * nv * max(1, u.size):
            return False
    return True


def alpha_k(y_k, x_k, x_k1, scheme: QuantScheme | None = None, k: int = 0) -> AlphaRecord:
    """Approximate-orthogonality coefficient of one exact-projection step.

    If ``scheme`` is given, ``x_k`` must be a projection of ``y_k`` (its
    residual within 1e-9 of ``dist(y_k, Q)``), else ``ContractError``.
    """
    y_k, x_k, x_k1 = (np.asarray(v, dtype=np.float64) for v in (y_k, x_k, x_k1))
    if not y_k.shape == x_k.shape == x_k1.shape:
        raise ContractError("y_k, x_k and x_k1 must have equal length")
    if scheme is not None:
        gap = np.linalg.norm(y_k - x_k) - dist_to_q(y_k, scheme)
        if gap > PROJECTION_TOL:
            raise ContractError(f"x_k is not a projection of y_k (residual excess {gap:.3g})")
    step = float(np.linalg.norm(x_k1 - x_k))
    groups = None if scheme is None or scheme.groups is None else scheme.groups
    return AlphaRecord(k, alpha_value(y_k, x_k, x_k1), same_line(x_k, x_k1, groups), step)


def theta_min(scheme: QuantScheme, n: int) -> float:
    """Smallest angle (radians) between two distinct lines of ``Q`` in ``R^n``.

    Enumerates every line, so it refuses binary ``n > 12``, ternary
    ``n > 8`` and, for other level sets, more than 5000 lines.
    """
    levels = scheme.levels
    bound = THETA_MAX_N.get(len(levels))
    if bound is not None and n > bound:
        raise OracleSizeError(f"theta_min enumeration is limited to n <= {bound} for these levels")
    if n < 1:
        raise ValueError("n must be >= 1")
    lines = enumerate_lines(levels, n, max_lines=THETA_MAX_LINES)
    if len(lines) < 2:
        return math.pi / 2
    best = 0.0
    chunk = 512
    for i in range(0, len(lines), chunk):
        block = np.abs(lines[i:i + chunk] @ lines.T)
        rows = np.arange(block.shape[0])
        block[rows, rows + i] = -1.0
        best = max(best, float(block.max()))
    return float(np.arccos(min(1.0, best)))


def stationarity_proxy(x_k, x_k1, gamma_k: float) -> float:
    if not gamma_k > 0:
        raise ValueError("gamma_k must be positive")
    d = np.asarray(x_k1, dtype=np.float64) - np.asarray(x_k, dtype=np.float64)
    return float(d @ d) / gamma_k**2


def line_projection(y, direction) -> np.ndarray:
    """Orthogonal projection of ``y`` onto the line spanned by ``direction``."""
    u = np.asarray(direction, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return (float(u @ y) / float(u @ u)) * u


DEFAULT_BETAS = (1e-2, 1e-3, 1e-4, 1e-5, 1e-6)


def descent_check(x_star, oracle, lam: float, scheme: QuantScheme,
                  betas: Sequence[float] = DEFAULT_BETAS) -> tuple[bool, float | None]:
    """Look for a step ``x* - beta grad f(x*)`` that lowers the relaxed objective.

    Returns ``(True, beta)`` for the first witnessing step size, else
    ``(False, None)``. A point of ``Q`` with nonzero gradient always has one
    for small enough ``beta``; zero gradient is outside the contract.
    """
    x_star = np.asarray(x_star, dtype=np.float64)
    g = oracle.grad(x_star)
    if float(np.linalg.norm(g)) <= 1e-8:
        raise ContractError("descent_check needs a nonzero gradient at x_star")
    base = oracle.full_loss(x_star) + 0.5 * lam * dist_to_q(x_star, scheme) ** 2
    for beta in betas:
        x = x_star - beta * g
        if oracle.full_loss(x) + 0.5 * lam * dist_to_q(x, scheme) ** 2 < base:
            return True, float(beta)
    return False, None


def _line_minimizer(diag: np.ndarray, c: np.ndarray, u: np.ndarray, lam: float) -> np.ndarray:
    # argmin 0.5 sum d_i (x_i - c_i)^2 + (lam / 2) ||(I - u u^T) x||^2
    n = c.size
    perp = np.eye(n) - np.outer(u, u)
    return np.linalg.solve(np.diag(diag) + lam * perp, diag * c)


def relaxed_minimizer_quadratic(c, lam: float, scheme: QuantScheme, diag=None) -> np.ndarray:
    """Global minimizer of ``f(x) + (lam / 2) dist(x, Q)^2`` for a diagonal quadratic.

    ``dist(x, Q)^2`` is a minimum over lines, so the problem splits into
    one linear solve per line of ``Q``; the best line wins (first on ties).
    """
    c = np.asarray(c, dtype=np.float64)
    d = np.ones_like(c) if diag is None else np.asarray(diag, dtype=np.float64)
    best, best_val = None, math.inf
    for u in enumerate_lines(scheme.levels, c.size, max_lines=THETA_MAX_LINES):
        x = _line_minimizer(d, c, u, lam)
        r = x - c
        val = 0.5 * float(np.sum(d * r * r)) + 0.5 * lam * float(np.sum((x - (x @ u) * u) ** 2))
        if val < best_val - 1e-15:
            best, best_val = x, val
    return best


def constrained_minimizer_quadratic(c, scheme: QuantScheme, diag=None) -> tuple[np.ndarray, float]:
    """Minimizer of ``0.5 sum d_i (x_i - c_i)^2`` over ``Q`` by line enumeration.

    Returns the point and its objective value.
    """
    c = np.asarray(c, dtype=np.float64)
    d = np.ones_like(c) if diag is None else np.asarray(diag, dtype=np.float64)
    best, best_val = np.zeros_like(c), 0.5 * float(np.sum(d * c * c))
    for u in enumerate_lines(scheme.levels, c.size, max_lines=THETA_MAX_LINES):
        t = float(np.sum(d * u * c)) / float(np.sum(d * u * u))
        x = t * u
        r = x - c
        val = 0.5 * float(np.sum(d * r * r))
        if val < best_val - 1e-15:
            best, best_val = x, val
    return best, best_val


def projection_line(y, scheme: QuantScheme) -> tuple[float, ...] | None:
    """Canonical line of ``proj(y)`` (single group)."""
    return canonical_line(project(y, scheme).codes)


def lemma_upper_gap(y_k, x_k, x_k1) -> float:
    """``alpha_k ||x1 - x0||^2 - ||x1 - x~||^2`` with ``x~`` = projection of ``y_k`` onto the line of ``x1``.

    Nonnegative for genuine exact-projection steps.
    """
    x_k, x_k1 = np.asarray(x_k, dtype=np.float64), np.asarray(x_k1, dtype=np.float64)
    a = alpha_value(y_k, x_k, x_k1)
    if a is None or not np.any(x_k1):
        return 0.0
    x_tilde = line_projection(y_k, x_k1)
    return a * float(np.sum((x_k1 - x_k) ** 2)) - float(np.sum((x_k1 - x_tilde) ** 2))


def alternative_update_error(y_k, x_k1, grad, gamma: float) -> float:
    """``||x1 - proj_L(x~ - gamma g)||`` where ``L`` is the line of ``x1``.

    Zero (up to rounding) whenever ``x1 = proj(y_k - gamma g)``.
    """
    x_k1 = np.asarray(x_k1, dtype=np.float64)
    if not np.any(x_k1):
        return 0.0
    x_tilde = line_projection(y_k, x_k1)
    target = line_projection(x_tilde - gamma * np.asarray(grad, dtype=np.float64), x_k1)
    return float(np.linalg.norm(x_k1 - target))


def descent_lemma_gap(oracle, x, y, lipschitz: float) -> float:
    """``f(y) + <grad f(y), x - y> + (L/2)||x - y||^2 - f(x)``; nonnegative when ``L`` is valid."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    d = x - y
    return (oracle.full_loss(y) + float(oracle.grad(y) @ d) + 0.5 * lipschitz * float(d @ d)
            - oracle.full_loss(x))


def summarize_alphas(records: Sequence[AlphaRecord]) -> dict[str, float | int]:
    vals = [r.alpha for r in records if r.alpha is not None]
    return {
        "count": len(vals),
        "undefined": sum(1 for r in records if r.alpha is None),
        "min": min(vals) if vals else math.nan,
        "max": max(vals) if vals else math.nan,
        "mean": float(np.mean(vals)) if vals else math.nan,
    }
