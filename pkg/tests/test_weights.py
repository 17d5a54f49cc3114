from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bidyadic.errors import ConfigError, DomainError, InfeasibleConfiguration
from bidyadic.haar import StepFunction
from bidyadic.lattice import LatticeParams
from bidyadic.weights import (
    INF,
    Weight,
    WeightVector,
    ap_constant,
    as_exponent,
    conjugate,
    interpolate_weights,
    lp_norm,
    multilinear_ap_constant,
    square_function_norm,
    strong_maximal,
    strong_maximal_bruteforce,
    weighted_norm,
)

from conftest import random_step

P = LatticeParams(M=1, L=1)
seeds = st.integers(0, 2**31)


def lognormal(seed, sigma=0.5, params=P):
    v = np.exp(sigma * np.random.default_rng(seed).standard_normal((params.cells(1), params.cells(2))))
    return StepFunction(params, (1, 2), v)


def test_exponent_conventions():
    assert conjugate(1) is INF and conjugate(INF) == 1 and conjugate(3) == Fraction(3, 2)
    assert as_exponent("inf") is INF and as_exponent(float("inf")) is INF and as_exponent(2.5) == Fraction(5, 2)


@pytest.mark.parametrize("p", [1, 2, 3, INF])
def test_constant_weight_has_unit_constant(p):
    assert ap_constant(StepFunction.constant(P, 1.0), p).value == 1.0


@given(seeds)
def test_ap_at_least_one_and_monotone(seed):
    w = lognormal(seed)
    vals = [ap_constant(w, p).value for p in (1, 2, 4, INF)]
    assert vals[-1] >= 1 - 1e-12
    for a, b in zip(vals, vals[1:]):
        assert b <= a * (1 + 1e-12)


@given(seeds, st.floats(0.1, 10))
def test_ap_scale_invariant(seed, c):
    w = lognormal(seed)
    a = ap_constant(w, 2).value
    assert ap_constant(StepFunction(P, (1, 2), c * w.values), 2).value == pytest.approx(a, rel=1e-12)


def test_single_weight_vector_matches_scalar_class():
    w = lognormal(3)
    one = multilinear_ap_constant(WeightVector((w,), (1,))).value
    assert one == pytest.approx(ap_constant(w, 1).value, rel=1e-12)
    wp = StepFunction(P, (1, 2), w.values ** 3)
    three = multilinear_ap_constant(WeightVector((w,), (3,))).value
    assert three == pytest.approx(ap_constant(wp, 3).value ** (1 / 3), rel=1e-12)


def test_vector_endpoints():
    w1, w2 = lognormal(1), lognormal(2)
    assert multilinear_ap_constant(WeightVector((w1, w2), (1, INF))).value >= 1 - 1e-12
    assert multilinear_ap_constant(WeightVector((w1, w2), (2, INF))).value >= 1 - 1e-12
    with pytest.raises(ConfigError):
        WeightVector((w1, w2), (INF, INF))
    with pytest.raises(ConfigError):
        WeightVector((w1,), (Fraction(1, 2),))
    with pytest.raises(DomainError):
        Weight(StepFunction.zeros(P))


@given(seeds, st.integers(1, 3))
def test_strong_maximal_matches_exhaustive_search(seed, m):
    rng = np.random.default_rng(seed)
    fs = [random_step(P, rng, dyadic=True) for _ in range(m)]
    fast, slow = strong_maximal(*fs), strong_maximal_bruteforce(*fs)
    assert np.array_equal(fast.values, slow.values)
    if m == 1:
        assert np.all(fast.values >= np.abs(fs[0].values))


@given(seeds)
def test_square_function_offset_invariance(seed):
    f = random_step(P, np.random.default_rng(seed))
    base = square_function_norm(f, 2)
    for off in [(1, 0), (0, 1), (2, 1)]:
        assert square_function_norm(f, 2, offsets=off) == pytest.approx(base, rel=1e-12)


def test_square_function_rejects_bad_input(rng):
    with pytest.raises(DomainError):
        square_function_norm(random_step(P, rng, axes=(1,)), 2)
    with pytest.raises(DomainError):
        square_function_norm(random_step(P, rng), 2, offsets=(-1, 0))


def test_weighted_norms(rng):
    f = random_step(P, rng)
    w = lognormal(5)
    wp = StepFunction(P, (1, 2), w.values ** 2)
    assert weighted_norm(f, 2, w) == pytest.approx(lp_norm(f, 2, wp), rel=1e-12)
    assert lp_norm(f, INF) == pytest.approx(np.abs(f.values).max())


def test_interpolation_holder_bound():
    u = WeightVector((lognormal(1, 0.3), lognormal(2, 0.3)), (2, 2))
    v = WeightVector((lognormal(3, 0.3), lognormal(4, 0.3)), (4, 4))
    res = interpolate_weights(u, v, ladder=8)
    assert 0 < res.theta < 1 and res.certificate["bound_holds"]
    fixed = interpolate_weights(u, v, r=(Fraction(8, 3), Fraction(8, 3)))
    assert fixed.theta == pytest.approx(0.5)
    with pytest.raises(InfeasibleConfiguration):
        interpolate_weights(u, v, r=(Fraction(8, 3), 3))
