import numpy as np
import pytest
from hypothesis import given, strategies as st

from bidyadic.errors import ConfigError, DomainError
from bidyadic.haar import StepFunction
from bidyadic.kernels import (
    DiscreteOperator,
    bruteforce_form,
    builtin_kernels,
    check_kernel_conditions,
    hypothesis_tests,
    kernel_integral,
)
from bidyadic.lattice import LatticeParams

from conftest import random_step

P = LatticeParams(M=1, L=1)
seeds = st.integers(0, 2**31)


@pytest.fixture(scope="module")
def compact():
    return builtin_kernels("compact_cz", P).operator()


@pytest.mark.parametrize("name", ["compact_cz", "riesz_tensor", "plain_cz", "rough_cz"])
def test_builtin_kernels_meet_their_bounds(name):
    rep = check_kernel_conditions(builtin_kernels(name, P), budget=200)
    assert rep.passed
    assert all(0 <= v <= 1 + 1e-12 for v in rep.worst.values())


def test_unknown_kernel():
    with pytest.raises(ConfigError):
        builtin_kernels("nope", P)


@given(seeds)
def test_apply_pairs_with_form(seed):
    T = builtin_kernels("compact_cz", P).operator()
    rng = np.random.default_rng(seed)
    f1, f2, f3 = (random_step(P, rng) for _ in range(3))
    assert T.apply(f1, f2).inner(f3) == pytest.approx(T.form(f1, f2, f3), rel=1e-10, abs=1e-12)


def test_pointwise_kernel_agrees_on_separated_supports(compact):
    spec = builtin_kernels("compact_cz", P)
    C = P.cells(1)
    f1 = StepFunction(P, (1, 2), np.outer(np.eye(C)[0], np.eye(C)[0]))
    f2 = StepFunction(P, (1, 2), np.outer(np.eye(C)[3], np.eye(C)[5]))
    f3 = StepFunction(P, (1, 2), np.outer(np.eye(C)[6], np.eye(C)[2]))
    direct = kernel_integral(spec, f1, f2, f3)
    assert direct != 0
    assert compact.form(f1, f2, f3) == pytest.approx(direct, rel=1e-10)


@given(seeds, st.sampled_from([(0, 0), (1, 0), (2, 1), (1, 2), (2, 2)]))
def test_adjoints(seed, js):
    T = builtin_kernels("compact_cz", P).operator()
    rng = np.random.default_rng(seed)
    fs = [random_step(P, rng) for _ in range(3)]
    j1, j2 = js
    A = T.adjoint(j1, j2)
    back = A.adjoint(j1, j2)
    assert back.form(*fs) == pytest.approx(T.form(*fs), rel=1e-12, abs=1e-14)
    if j1 == j2:
        # the same swap on both axes permutes the inputs of the form; slot 0 is the output itself
        perm = list(fs)
        if j1:
            perm[j1 - 1], perm[2] = fs[2], fs[j1 - 1]
        assert A.form(*perm) == pytest.approx(T.form(*fs), rel=1e-10, abs=1e-12)
    with pytest.raises(DomainError):
        T.adjoint(3, 0)


def test_dense_round_trip(compact):
    rng = np.random.default_rng(0)
    fs = [random_step(P, rng) for _ in range(3)]
    again = DiscreteOperator.from_dense(P, compact.dense())
    assert again.form(*fs) == pytest.approx(compact.form(*fs), rel=1e-10)
    assert bruteforce_form(compact, *fs) == compact.form(*fs)


def test_operator_algebra(compact):
    rng = np.random.default_rng(1)
    fs = [random_step(P, rng) for _ in range(3)]
    two = compact + compact.scaled(1.0)
    assert two.form(*fs) == pytest.approx(2 * compact.form(*fs), rel=1e-12)
    assert DiscreteOperator.zero(P).form(*fs) == 0.0
    with pytest.raises(DomainError):
        compact.form(random_step(P, rng, axes=(1,)), fs[1], fs[2])
    with pytest.raises(ConfigError):
        DiscreteOperator(P, [(1.0, np.zeros((2, 2, 2)), np.zeros((2, 2, 2)))])


def test_decay_verdicts_separate_kernels():
    p = LatticeParams(M=1, L=2)
    good = hypothesis_tests(builtin_kernels("compact_cz", p)).verdicts
    flat = hypothesis_tests(builtin_kernels("riesz_tensor", p)).verdicts
    assert good["axis1"]["small_scale"] == "decaying"
    assert flat["axis1"]["small_scale"] == "flat"
