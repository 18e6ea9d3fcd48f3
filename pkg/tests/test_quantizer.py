import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import best_residual_sq
from quantrelax.quantizer import (Group, OracleSizeError, QuantScheme, SchemeError, Solver,
                                  binarize, binary_scheme, brute_force_quantize, canonical_line,
                                  dist_to_q, enumerate_lines, lloyd_quantize, project,
                                  ternarize_exact, ternarize_threshold, ternary_scheme)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def vectors(min_size=1, max_size=9):
    return st.integers(min_size, max_size).flatmap(lambda n: arrays(np.float64, n, elements=finite))


# -- binarize -----------------------------------------------------------------

def test_binarize_mixed_signs():
    q = binarize([2, -4, 6])
    assert q.scale == 4
    assert q.codes.tolist() == [1, -1, 1]
    assert best_residual_sq([2, -4, 6], (-1, 1)) == pytest.approx(8)


def test_binarize_zero_input_maps_to_plus_one():
    q = binarize([0.0, 0.0])
    assert q.scale == 0
    assert q.codes.tolist() == [1, 1]
    assert q.materialized.tolist() == [0, 0]


def test_binarize_constant_vector_is_exact():
    q = binarize([0.3, 0.3, 0.3])
    assert q.scale == 0.3
    assert q.residual([0.3, 0.3, 0.3]) == 0


# -- ternarize_exact ----------------------------------------------------------

@pytest.mark.parametrize("y, scale, codes, residual_sq", [
    ([3, 1], 3.0, [1, 0], 1.0),
    ([-5, 4, 1], 4.5, [-1, 1, 0], 42 - 40.5),
    ([2, 2], 2.0, [1, 1], 0.0),
])
def test_ternarize_exact_examples(y, scale, codes, residual_sq):
    q = ternarize_exact(y)
    assert q.scale == pytest.approx(scale, rel=1e-15)
    assert q.codes.tolist() == codes
    assert q.residual(y) ** 2 == pytest.approx(residual_sq, abs=1e-12)
    assert q.residual(y) ** 2 == pytest.approx(best_residual_sq(y, (-1, 0, 1)), abs=1e-12)


def test_ternarize_exact_prefers_fewest_nonzeros_on_ties():
    # Keeping 1 or 4 entries of [3, 1, 1, 1] both score 9.
    assert ternarize_exact([3.0, 1.0, 1.0, 1.0]).codes.tolist() == [1, 0, 0, 0]
    assert ternarize_exact([4.0, 0.0, 0.0]).codes.tolist() == [1, 0, 0]


# -- ternarize_threshold ------------------------------------------------------

def test_threshold_example():
    q = ternarize_threshold([1, -0.5, 0.1])
    assert q.codes.tolist() == [1, -1, 0]
    assert q.scale == pytest.approx(0.75)


def test_threshold_uniform_and_zero():
    q = ternarize_threshold([1, 1, 1, 1])
    assert q.scale == 1 and q.codes.tolist() == [1, 1, 1, 1]
    z = ternarize_threshold([0.0, 0.0])
    assert z.scale == 0 and z.codes.tolist() == [0, 0]


# -- lloyd ---------------------------------------------------------------------

def test_lloyd_objective_never_increases_and_is_bounded_by_brute_force():
    y = np.array([1.0, 2.0, 3.0, 4.0])
    history = []
    q = lloyd_quantize(y, (1, 2, 3), max_iters=20, history=history)
    assert all(b <= a + 1e-12 for a, b in zip(history, history[1:]))
    assert history[-1] <= history[0]
    assert q.residual(y) ** 2 >= best_residual_sq(y, (-3, -2, -1, 1, 2, 3)) - 1e-12


def test_lloyd_fixed_point_from_feasible_input():
    codes = np.array([1.0, -3.0, 2.0, 1.0])
    y = 0.5 * codes
    history = []
    q = lloyd_quantize(y, (1, 2, 3), max_iters=5, init_scale=0.5, history=history)
    assert q.residual(y) == 0
    assert q.codes.tolist() == codes.tolist()
    assert history[0] == 0


def test_lloyd_single_iteration_is_the_default():
    y = np.array([0.1, 0.9, 2.2, -3.1, 1.7])
    assert np.array_equal(lloyd_quantize(y, (1, 2, 3)).materialized,
                          lloyd_quantize(y, (1, 2, 3), max_iters=1).materialized)
    assert QuantScheme((1, 2, 3), Solver.LLOYD).max_iters == 1


@given(vectors(2, 6))
@settings(max_examples=60, deadline=None)
def test_lloyd_monotone_property(y):
    history = []
    lloyd_quantize(y, (0, 1, 2), max_iters=8, history=history)
    assert all(b <= a * (1 + 1e-12) + 1e-12 for a, b in zip(history, history[1:]))


# -- project / dist_to_q -----------------------------------------------------

def test_project_binary_dispatch():
    assert np.array_equal(project([2, -4, 6], binary_scheme()).materialized,
                          binarize([2, -4, 6]).materialized)


def test_project_two_groups():
    scheme = ternary_scheme(groups=[Group(0, 2), Group(2, 4)])
    q = project([2, -4, 3, 1], scheme)
    assert q.scales.tolist() == [3, 3]
    assert q.codes.tolist() == [1, -1, 1, 0]
    for part in ([2, -4], [3, 1]):
        sub = project(part, ternary_scheme())
        assert sub.residual(part) ** 2 == pytest.approx(best_residual_sq(part, (-1, 0, 1)))


def test_unquantized_group_passes_through():
    scheme = ternary_scheme(groups=[Group(0, 3), Group(3, 5, quantized=False)])
    y = np.array([3.0, 1.0, 0.0, 0.123, -7.5])
    q = project(y, scheme)
    assert q.materialized[3:].tolist() == [0.123, -7.5]
    assert math.isnan(q.scales[1])


def test_point_of_q_is_fixed():
    y = 1.7 * np.array([1.0, 0.0, -1.0, 1.0])
    assert np.array_equal(project(y, ternary_scheme()).materialized, y)
    assert dist_to_q(y, ternary_scheme()) == 0


def test_dist_example():
    assert dist_to_q([3, 1], ternary_scheme()) == pytest.approx(1.0, rel=1e-15)


def test_dist_scales_with_input():
    y = np.array([0.3, -1.2, 2.2, 0.05])
    for c in (0.5, 3.0, 17.0):
        assert dist_to_q(c * y, ternary_scheme()) == pytest.approx(c * dist_to_q(y, ternary_scheme()))


@pytest.mark.parametrize("fast, alphabet", [(binarize, (-1, 1)), (ternarize_exact, (-1, 0, 1))])
@given(y=vectors(1, 7))
@settings(max_examples=80, deadline=None)
def test_exact_solvers_match_enumeration(fast, alphabet, y):
    got = fast(y).residual(y) ** 2
    want = best_residual_sq(y, alphabet)
    assert got == pytest.approx(want, rel=1e-10, abs=1e-9)


@pytest.mark.parametrize("scheme", [binary_scheme(), ternary_scheme()], ids=["binary", "ternary"])
@given(y=vectors())
@settings(max_examples=80, deadline=None)
def test_projection_is_idempotent(scheme, y):
    p = project(y, scheme).materialized
    assert np.array_equal(project(p, scheme).materialized, p)


@pytest.mark.parametrize("scheme", [binary_scheme(), ternary_scheme()], ids=["binary", "ternary"])
@given(y=vectors(), c=st.sampled_from([0.25, 0.5, 2.0, 4.0, 8.0]))
@settings(max_examples=60, deadline=None)
def test_positive_homogeneity(scheme, y, c):
    # Powers of two keep the scaling exact in floating point.
    a, b = project(y, scheme), project(c * y, scheme)
    assert np.array_equal(a.codes, b.codes)
    assert b.scale == pytest.approx(c * a.scale, rel=1e-14, abs=1e-300)


@given(y=vectors())
@settings(max_examples=60, deadline=None)
def test_sign_equivariance_ternary(y):
    a, b = project(y, ternary_scheme()), project(-y, ternary_scheme())
    assert np.array_equal(b.codes, -a.codes)
    assert b.scale == a.scale


def test_sign_equivariance_binary_away_from_zero():
    y = np.array([0.4, -2.0, 1.1, -0.3])
    a, b = binarize(y), binarize(-y)
    assert np.array_equal(b.codes, -a.codes) and b.scale == a.scale


@given(y=vectors(2, 8))
@settings(max_examples=100, deadline=None)
def test_threshold_never_beats_exact(y):
    assert ternarize_threshold(y).residual(y) >= ternarize_exact(y).residual(y) - 1e-9


def test_threshold_strictly_worse_somewhere():
    # delta = 0.525 drops the 0.5 entry, but keeping both entries is optimal.
    y = np.array([1.0, 0.5])
    assert ternarize_threshold(y).residual(y) ** 2 == pytest.approx(0.25)
    assert ternarize_exact(y).residual(y) ** 2 == pytest.approx(0.125)


# -- brute force and helpers ----------------------------------------------------

def test_brute_force_bounds():
    brute_force_quantize(np.ones(14), (1,))
    brute_force_quantize(np.ones(10), (0, 1))
    with pytest.raises(OracleSizeError):
        brute_force_quantize(np.ones(15), (1,))
    with pytest.raises(OracleSizeError):
        brute_force_quantize(np.ones(11), (0, 1))


def test_brute_force_zero_input():
    q = brute_force_quantize(np.zeros(4), (0, 1))
    assert q.scale == 0 and not q.materialized.any()


def test_canonical_line_identifies_sign_and_scale():
    assert canonical_line([1, -1]) == canonical_line([-2, 2])
    assert canonical_line([1, 0]) != canonical_line([1, 1])
    assert canonical_line([0, 0]) is None


def test_enumerate_lines_counts():
    assert len(enumerate_lines((0, 1), 2)) == 4
    assert len(enumerate_lines((1,), 3)) == 4
    assert len(enumerate_lines((0, 1), 3)) == 13


@pytest.mark.parametrize("kwargs", [
    dict(levels=(1,), solver="ternary_exact"),
    dict(levels=(0, 1), solver="binary_exact"),
    dict(levels=(2, 1), solver="lloyd"),
    dict(levels=(-1, 1), solver="lloyd"),
    dict(levels=(0, 1), solver="ternary_exact", groups=(Group(0, 2), Group(3, 4))),
])
def test_invalid_schemes_rejected(kwargs):
    with pytest.raises(SchemeError):
        QuantScheme(**kwargs)


def test_group_layout_must_cover_vector():
    scheme = ternary_scheme(groups=[Group(0, 2)])
    with pytest.raises(SchemeError):
        project(np.ones(3), scheme)


def test_non_finite_input_rejected():
    with pytest.raises(ValueError):
        binarize([1.0, np.nan])
