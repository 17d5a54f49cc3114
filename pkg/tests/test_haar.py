import numpy as np
import pytest
from hypothesis import given, strategies as st

from bidyadic.errors import ConfigError, DomainError
from bidyadic.haar import (
    D,
    DeltaI,
    DeltaIk,
    E,
    HaarIndex,
    StepFunction,
    axis_basis,
    expand,
    haar,
    haar_tensor,
    martingale,
    mean_zero_part,
    project_N,
    reconstruct,
    telescoping_sides,
)
from bidyadic.lattice import LatticeParams, ProductGrid, enumerate_grid

from conftest import random_step

P = LatticeParams(M=1, L=2)
seeds = st.integers(0, 2**31)
omegas = st.tuples(*[st.integers(0, 1)] * 4)


def grids(om1, om2=(0, 0, 0, 0)):
    return ProductGrid(enumerate_grid(P, om1, 1), enumerate_grid(P, om2, 2))


@given(omegas)
def test_axis_basis_orthonormal_and_complete(om):
    b = axis_basis(enumerate_grid(P, om, 1))
    gram = b.B @ b.B.T * b.vol
    assert np.abs(gram - np.eye(len(gram))).max() < 1e-12
    assert b.complete


@given(omegas, seeds)
def test_expand_reconstruct(om, seed):
    pg = grids(om)
    f = random_step(P, np.random.default_rng(seed))
    ex = expand(f, pg)
    assert np.abs(reconstruct(ex).values - f.values).max() < 1e-12
    assert abs(ex.parseval_sum() - f.norm(2) ** 2) < 1e-12 * max(1.0, f.norm(2) ** 2)
    assert ex.mean == pytest.approx(f.mean(), abs=1e-12)


@given(omegas, seeds)
def test_martingale_differences_sum_to_identity(om, seed):
    g = enumerate_grid(P, om, 1)
    f = random_step(P, np.random.default_rng(seed), axes=(1,))
    top = P.top - P.L
    total = martingale(f, E(top), g).values.copy()
    for k in range(-P.L + 1, top + 1):
        d = martingale(f, D(k), g)
        e_diff = martingale(f, E(k - 1), g).values - martingale(f, E(k), g).values
        assert np.abs(d.values - e_diff).max() < 1e-12
        total += d.values
    assert np.abs(total - f.values).max() < 1e-12


def test_delta_sum_over_level_is_difference():
    g = enumerate_grid(P, (1, 0, 1, 1), 1)
    f = random_step(P, np.random.default_rng(1), axes=(1,))
    for lev in range(1, P.top + 1):
        s = sum(martingale(f, DeltaI(c), g).values for c in g.cubes(lev))
        assert np.abs(s - martingale(f, D(lev - P.L), g).values).max() < 1e-12


def test_delta_k_collects_descendants():
    g = enumerate_grid(P, (0, 1, 0, 1), 1)
    f = random_step(P, np.random.default_rng(2), axes=(1,))
    top = g.cubes(P.top)[0]
    direct = sum(martingale(f, DeltaI(c), g).values for c in g.cubes(P.top - 1))
    assert np.abs(martingale(f, DeltaIk(top, 1), g).values - direct).max() < 1e-12
    with pytest.raises(DomainError):
        martingale(f, DeltaIk(top, P.top), g)


@given(omegas, seeds)
def test_telescoping(om, seed):
    g = enumerate_grid(P, om, 1)
    rng = np.random.default_rng(seed)
    g1, g2 = random_step(P, rng, axes=(1,)), random_step(P, rng, axes=(1,))
    for lev in range(P.top):
        for c in g.cubes(lev):
            lhs, rhs = telescoping_sides(g1, g2, c, g)
            assert abs(lhs - rhs) < 1e-12


def test_haar_functions_are_normalized_and_cancellative():
    pg = grids((1, 1, 0, 0), (0, 1, 0, 1))
    c1, c2 = pg.grid1.cubes(2)[1], pg.grid2.cubes(1)[3]
    h = haar_tensor(HaarIndex(c1, (1,)), HaarIndex(c2, (1,)), pg)
    assert h.norm(2) == pytest.approx(1.0, abs=1e-12)
    assert abs(h.integral()) < 1e-15


def test_single_cell_cannot_carry_haar():
    g = enumerate_grid(P, (0, 0, 0, 0), 1)
    with pytest.raises(DomainError):
        haar(HaarIndex(g.cubes(0)[0], (1,)), g)
    with pytest.raises(ConfigError):
        HaarIndex(g.cubes(1)[0], (2,))


def test_projection_splits_function():
    pg = grids((0, 1, 1, 0), (1, 0, 0, 1))
    f = random_step(P, np.random.default_rng(4))
    pieces = [project_N(f, pg, N) for N in range(3)]
    for pr in pieces:
        assert np.abs((pr.pn + pr.perp).values - f.values).max() < 1e-12
    # larger N keeps more terms
    norms = [pr.pn.norm(2) for pr in pieces]
    assert norms == sorted(norms)


def test_mean_zero_part_kills_slice_means(rng):
    f = random_step(P, rng)
    z = mean_zero_part(f).values
    assert np.abs(z.mean(axis=0)).max() < 1e-12 and np.abs(z.mean(axis=1)).max() < 1e-12


def test_step_function_arithmetic_and_checks(rng):
    f = random_step(P, rng)
    g = StepFunction.constant(P, 2.0)
    assert np.allclose((f + g).values, f.values + 2.0)
    assert f.inner(g) == pytest.approx(2.0 * f.integral())
    with pytest.raises(ConfigError):
        StepFunction(P, (3,), np.zeros(4))
    with pytest.raises(ConfigError):
        StepFunction(P, (1,), np.zeros(5))
