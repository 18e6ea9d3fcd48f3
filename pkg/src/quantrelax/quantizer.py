"""Projections onto the quantization set ``Q = R+ x {±q_1, ..., ±q_m}^n``.

A point of ``Q`` factors as a nonnegative scale times a discrete code
vector. ``Q`` is a finite union of lines through the origin, so the
projection is generally non-unique; every solver here breaks ties
deterministically.

Exact solvers exist for binarization (sign + mean magnitude) and
ternarization (sort + prefix-sum scan). Wider bit-widths use a few rounds
of 1-D Lloyd iterations, and small problems can be checked against
``brute_force_quantize``.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class QuantizerError(ValueError):
    """Invalid input vector for a quantizer."""


class SchemeError(ValueError):
    """Inconsistent quantization scheme."""


class OracleSizeError(QuantizerError):
    """Brute-force enumeration would exceed its size bound."""


class Solver(str, enum.Enum):
    BINARY_EXACT = "binary_exact"
    TERNARY_EXACT = "ternary_exact"
    TERNARY_THRESHOLD = "ternary_threshold"
    LLOYD = "lloyd"


BINARY_LEVELS = (1.0,)
TERNARY_LEVELS = (0.0, 1.0)

# Enumeration bounds for the brute-force oracle: 2**14 binary codes,
# 3**10 ternary codes; other level sets get the larger of the two.
BRUTE_FORCE_MAX_N = {1: 14, 2: 10}
BRUTE_FORCE_MAX_CODES = 3**10

TWN_THRESHOLD_FACTOR = 0.7


@dataclass(frozen=True)
class Group:
    """Contiguous index range ``[start, stop)`` with its own scale."""

    start: int
    stop: int
    quantized: bool = True

    @property
    def size(self) -> int:
        return self.stop - self.start

    @property
    def slice(self) -> slice:
        return slice(self.start, self.stop)


@dataclass(frozen=True)
class QuantScheme:
    """Quantization levels, solver choice and group layout.

    ``groups`` of ``None`` means one global group spanning the whole
    vector. Groups flagged ``quantized=False`` (e.g. biases) are passed
    through untouched by every projection.
    """

    levels: tuple[float, ...] = TERNARY_LEVELS
    solver: Solver = Solver.TERNARY_EXACT
    max_iters: int = 1
    bit_width: int | None = None
    groups: tuple[Group, ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "levels", tuple(float(q) for q in self.levels))
        object.__setattr__(self, "solver", Solver(self.solver))
        if self.bit_width is None:
            object.__setattr__(self, "bit_width", default_bit_width(self.levels))
        if self.groups is not None:
            object.__setattr__(self, "groups", tuple(self.groups))
        self.validate()

    def validate(self) -> None:
        levels = self.levels
        if not levels:
            raise SchemeError("at least one quantization level is required")
        if levels[0] < 0 or any(b <= a for a, b in zip(levels, levels[1:])):
            raise SchemeError(f"levels must satisfy 0 <= q_1 < ... < q_m, got {levels}")
        if self.bit_width < 1:
            raise SchemeError("bit_width must be >= 1")
        if self.solver is Solver.BINARY_EXACT and levels != BINARY_LEVELS:
            raise SchemeError(f"solver binary_exact requires levels (1,), got {levels}")
        if self.solver in (Solver.TERNARY_EXACT, Solver.TERNARY_THRESHOLD) and levels != TERNARY_LEVELS:
            raise SchemeError(f"solver {self.solver.value} requires levels (0, 1), got {levels}")
        if self.solver is Solver.LLOYD:
            if len(levels) < 2:
                raise SchemeError("lloyd solver needs at least two levels")
            if self.max_iters < 1:
                raise SchemeError("lloyd max_iters must be >= 1")
        if self.groups is not None:
            pos = 0
            for g in self.groups:
                if g.start != pos or g.stop <= g.start:
                    raise SchemeError(f"groups must partition [0, n) contiguously; bad group {g}")
                pos = g.stop

    @property
    def exact(self) -> bool:
        """Whether ``project`` returns a true (global) projection."""
        return self.solver in (Solver.BINARY_EXACT, Solver.TERNARY_EXACT)

    def layout(self, n: int) -> tuple[Group, ...]:
        if self.groups is None:
            return (Group(0, n),)
        if self.groups[-1].stop != n:
            raise SchemeError(f"groups cover [0, {self.groups[-1].stop}) but vector has length {n}")
        return self.groups

    def with_groups(self, groups: Sequence[Group] | None) -> "QuantScheme":
        return QuantScheme(self.levels, self.solver, self.max_iters, self.bit_width,
                           None if groups is None else tuple(groups))


def default_bit_width(levels: Sequence[float]) -> int:
    # 2m signed values, minus one when 0 is a level.
    count = 2 * len(levels) - (1 if levels and levels[0] == 0 else 0)
    return max(1, int(np.ceil(np.log2(count))))


def binary_scheme(groups=None) -> QuantScheme:
    return QuantScheme(BINARY_LEVELS, Solver.BINARY_EXACT, groups=groups)


def ternary_scheme(groups=None, *, threshold: bool = False) -> QuantScheme:
    solver = Solver.TERNARY_THRESHOLD if threshold else Solver.TERNARY_EXACT
    return QuantScheme(TERNARY_LEVELS, solver, groups=groups)


@dataclass
class QuantizedPoint:
    """Per-group scales and codes, plus the materialized vector ``s * Q``.

    Entries of full-precision groups are copied verbatim into
    ``materialized``; their scale is reported as ``nan`` and their codes
    as the raw values.
    """

    scales: np.ndarray
    codes: np.ndarray
    materialized: np.ndarray
    groups: tuple[Group, ...] = field(default=())

    @property
    def scale(self) -> float:
        """Scale of the first group (the only one in the single-group case)."""
        return float(self.scales[0])

    def residual(self, y) -> float:
        return float(np.linalg.norm(np.asarray(y, dtype=np.float64) - self.materialized))


def _as_vector(y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 1:
        y = y.ravel()
    if y.size == 0:
        raise QuantizerError("cannot quantize an empty vector")
    if not np.all(np.isfinite(y)):
        raise QuantizerError("input vector contains non-finite values")
    return y


def _single(y: np.ndarray, s: float, codes: np.ndarray) -> QuantizedPoint:
    codes = np.asarray(codes, dtype=np.float64)
    return QuantizedPoint(np.array([s]), codes, s * codes, (Group(0, y.size),))


def _mean_magnitude(mags: np.ndarray) -> float:
    # Equal magnitudes return that value bit-exactly, so projecting a point of Q is idempotent.
    top = mags.max()
    if top == mags.min():
        return float(top)
    return float(mags.mean())


def binarize(y) -> QuantizedPoint:
    """Exact projection onto ``R+ x {±1}^n``: ``s = mean|y|``, ``Q = sign(y)``.

    Zeros map to ``+1``.
    """
    y = _as_vector(y)
    codes = np.where(y >= 0, 1.0, -1.0)
    return _single(y, _mean_magnitude(np.abs(y)), codes)


def ternarize_exact(y) -> QuantizedPoint:
    """Exact projection onto ``R+ x {0, ±1}^n`` in O(n log n).

    Keeping the ``t`` largest magnitudes scores ``(sum of them)**2 / t``;
    the best ``t`` (smallest on ties) gives ``s = sum / t`` and the codes
    are the signs of the kept entries.
    """
    y = _as_vector(y)
    mags = np.abs(y)
    order = np.argsort(-mags, kind="stable")
    csum = np.cumsum(mags[order])
    t = np.arange(1, y.size + 1)
    scores = csum * csum / t
    best = int(np.argmax(scores))  # first maximum -> smallest t
    keep = order[: best + 1]
    codes = np.zeros_like(y)
    codes[keep] = np.sign(y[keep])
    return _single(y, _mean_magnitude(mags[keep]), codes)


def ternarize_threshold(y) -> QuantizedPoint:
    """Approximate ternarization by thresholding at ``0.7 * mean|y|``."""
    y = _as_vector(y)
    mags = np.abs(y)
    delta = TWN_THRESHOLD_FACTOR * mags.mean()
    mask = mags >= delta
    if not mask.any() or mags.max() == 0:
        return _single(y, 0.0, np.zeros_like(y))
    codes = np.where(mask, np.sign(y), 0.0)
    return _single(y, _mean_magnitude(mags[mask]), codes)


def code_alphabet(levels: Sequence[float]) -> np.ndarray:
    """Sorted distinct signed code values ``{±q_j}``."""
    levels = np.asarray(levels, dtype=np.float64)
    return np.unique(np.concatenate([-levels, levels]))


def _nearest_codes(y: np.ndarray, s: float, alphabet: np.ndarray) -> np.ndarray:
    # Nearest centroid s*c to each y_i; ties go to the smaller magnitude code.
    centroids = s * alphabet
    dist = np.abs(y[:, None] - centroids[None, :])
    tie_order = np.argsort(np.abs(alphabet), kind="stable")
    idx = tie_order[np.argmin(dist[:, tie_order], axis=1)]
    return alphabet[idx]


def lloyd_quantize(y, levels: Sequence[float], max_iters: int = 1,
                   init_scale: float | None = None,
                   history: list[float] | None = None) -> QuantizedPoint:
    """Alternate nearest-level assignment and least-squares scale update.

    The scale starts at ``max|y| / q_m`` unless ``init_scale`` is given,
    so the largest weight maps to the top level. Iteration stops after
    ``max_iters`` rounds or once the codes stop changing. If ``history``
    is given, the objective ``||s Q - y||^2`` is appended after the
    initial assignment and after every scale update; it never increases.
    """
    y = _as_vector(y)
    levels = tuple(float(q) for q in levels)
    if max_iters < 1:
        raise QuantizerError("max_iters must be >= 1")
    alphabet = code_alphabet(levels)
    s = float(np.abs(y).max() / levels[-1]) if init_scale is None else float(init_scale)
    if s < 0:
        raise QuantizerError("init_scale must be nonnegative")
    zero_code = np.full_like(y, alphabet[np.argmin(np.abs(alphabet))])
    if s == 0:
        return _single(y, 0.0, zero_code)

    codes = None
    for _ in range(max_iters):
        new_codes = _nearest_codes(y, s, alphabet)
        if history is not None:
            history.append(float(np.sum((s * new_codes - y) ** 2)))
        if codes is not None and np.array_equal(new_codes, codes):
            break
        codes = new_codes
        qq = float(codes @ codes)
        if qq == 0:
            return _single(y, 0.0, zero_code)
        s = max(0.0, float(codes @ y) / qq)
        if history is not None:
            history.append(float(np.sum((s * codes - y) ** 2)))
    return _single(y, s, codes)


def _solve(y: np.ndarray, scheme: QuantScheme) -> QuantizedPoint:
    if scheme.solver is Solver.BINARY_EXACT:
        return binarize(y)
    if scheme.solver is Solver.TERNARY_EXACT:
        return ternarize_exact(y)
    if scheme.solver is Solver.TERNARY_THRESHOLD:
        return ternarize_threshold(y)
    return lloyd_quantize(y, scheme.levels, scheme.max_iters)


def project(y, scheme: QuantScheme) -> QuantizedPoint:
    """Quantize ``y`` group by group with the scheme's solver."""
    y = _as_vector(y)
    groups = scheme.layout(y.size)
    scales = np.empty(len(groups))
    codes = np.empty_like(y)
    out = np.empty_like(y)
    for i, g in enumerate(groups):
        part = y[g.slice]
        if not g.quantized:
            scales[i] = np.nan
            codes[g.slice] = part
            out[g.slice] = part
            continue
        q = _solve(part, scheme)
        scales[i] = q.scale
        codes[g.slice] = q.codes
        out[g.slice] = q.materialized
    return QuantizedPoint(scales, codes, out, groups)


def dist_to_q(y, scheme: QuantScheme) -> float:
    """Euclidean distance from ``y`` to its quantization.

    Exact for binary/ternary-exact schemes; for approximate solvers
    (``scheme.exact`` is False) it is only an upper bound.
    """
    y = _as_vector(y)
    return float(np.linalg.norm(y - project(y, scheme).materialized))


def brute_force_quantize(y, levels: Sequence[float]) -> QuantizedPoint:
    """Global minimizer of ``||s Q - y||^2`` by enumerating every code vector.

    Verification oracle only. Ties keep the first code in lexicographic
    order of the sorted alphabet.
    """
    y = _as_vector(y)
    levels = tuple(float(q) for q in levels)
    alphabet = code_alphabet(levels)
    n = y.size
    bound = BRUTE_FORCE_MAX_N.get(len(levels)) if levels in (BINARY_LEVELS, TERNARY_LEVELS) else None
    too_big = n > bound if bound is not None else alphabet.size ** n > BRUTE_FORCE_MAX_CODES
    if too_big:
        raise OracleSizeError(
            f"brute force over {alphabet.size}**{n} codes exceeds the enumeration bound")
    codes = np.array(list(itertools.product(alphabet, repeat=n)), dtype=np.float64)
    qq = np.einsum("ij,ij->i", codes, codes)
    qy = codes @ y
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(qq > 0, np.maximum(qy, 0.0) / qq, 0.0)
    obj = np.sum((s[:, None] * codes - y[None, :]) ** 2, axis=1)
    best = int(np.argmin(obj))
    return _single(y, float(s[best]), codes[best])


def canonical_line(codes) -> tuple[float, ...] | None:
    """Canonical direction of the line spanned by a code vector.

    The vector is scaled to unit length with its first nonzero entry
    positive, so codes spanning the same line (``Q`` and ``-Q``, or
    ``[1, 1]`` and ``[2, 2]``) map to the same tuple. Returns ``None``
    for the zero vector.
    """
    v = np.asarray(codes, dtype=np.float64)
    nz = np.flatnonzero(v)
    if nz.size == 0:
        return None
    v = v / np.linalg.norm(v)
    if v[nz[0]] < 0:
        v = -v
    return tuple(np.round(v, 12) + 0.0)


def enumerate_lines(levels: Sequence[float], n: int, max_lines: int | None = None) -> np.ndarray:
    """Unit direction vectors of the distinct lines composing ``Q``."""
    alphabet = code_alphabet(levels)
    seen: dict[tuple[float, ...], np.ndarray] = {}
    for code in itertools.product(alphabet, repeat=n):
        key = canonical_line(code)
        if key is None or key in seen:
            continue
        v = np.asarray(code, dtype=np.float64)
        v = v / np.linalg.norm(v)
        seen[key] = -v if v[np.flatnonzero(v)[0]] < 0 else v
        if max_lines is not None and len(seen) > max_lines:
            raise OracleSizeError(f"more than {max_lines} lines in Q for n={n}")
    return np.array(list(seen.values()), dtype=np.float64).reshape(-1, n)
