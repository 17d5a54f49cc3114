import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bidyadic.errors import ConfigError
from bidyadic.lattice import (
    AncestorCase,
    LatticeParams,
    ProductGrid,
    TripleClass,
    all_omegas,
    classify_triple,
    common_ancestor,
    count_DN,
    effective_levels,
    enumerate_grid,
    pack_omega,
    pi_good,
    pi_good_for_cube,
    unpack_omega,
)

omegas3 = st.tuples(*[st.integers(0, 1)] * 4)


@pytest.mark.parametrize("bad", [dict(M=-1), dict(L=0), dict(n1=0), dict(r=0), dict(delta1=1.5), dict(theta=1.0),
                                 dict(M=0, L=1)])
def test_invalid_params_rejected(bad):
    with pytest.raises(ConfigError):
        LatticeParams(**bad)


def test_params_dict_round_trip():
    p = LatticeParams(n1=1, n2=2, M=2, L=1, periodic=False)
    assert LatticeParams.from_dict(p.to_dict()) == p


def test_default_gamma_in_range():
    p = LatticeParams()
    assert 0 < p.gamma1 < 0.5 and p.gamma1 == pytest.approx(1 / 6)


@given(st.lists(st.integers(0, 3), min_size=1, max_size=6))
def test_omega_packing_round_trip(om):
    assert unpack_omega(pack_omega(om, 2), 2) == tuple(om)


@given(omegas3)
def test_levels_tile_the_lattice(om):
    p = LatticeParams(M=1, L=2)
    g = enumerate_grid(p, om, 1)
    for level in range(p.top + 1):
        cover = sum(g.indicator(c).astype(int) for c in g.cubes(level))
        assert np.array_equal(cover, np.ones(p.cells(1), dtype=int))
        assert g.count(level) == p.cells(1) >> level


@given(omegas3)
def test_children_partition_parent(om):
    p = LatticeParams(M=1, L=2)
    g = enumerate_grid(p, om, 1)
    for level in range(1, p.top + 1):
        for c in g.cubes(level):
            kids = g.children(c)
            assert len(kids) == 2
            assert all(g.parent(k) == c and g.contains(c, k) for k in kids)
            assert np.array_equal(sum(g.indicator(k).astype(int) for k in kids), g.indicator(c).astype(int))


def test_ancestor_chain_reaches_top():
    p = LatticeParams(M=1, L=2)
    g = enumerate_grid(p, (1, 1, 0, 1), 1)
    for c in g.cubes(0):
        assert g.ancestor(c, p.top) == g.cubes(p.top)[0]


def test_two_dimensional_axis():
    p = LatticeParams(n1=2, n2=1, M=1, L=1)
    g = enumerate_grid(p, (3, 0, 2), 1)
    assert g.count(0) == p.cells(1) and len(g.children(g.cubes(1)[0])) == 4


def test_effective_ensemble_size():
    p = LatticeParams(M=1, L=2)
    assert effective_levels(p) == 3
    assert len(list(all_omegas(p, effective_only=True))) == 8


def test_pi_good_exact_rational_and_positive():
    p = LatticeParams(M=1, L=2, r=2)
    pg = pi_good(p, 1)
    assert pg.mode == "exact" and pg.feasible
    assert all(isinstance(v, Fraction) and 0 < v <= 1 for v in pg.by_level.values())


def test_pi_good_independent_of_reference_cube():
    p = LatticeParams(M=1, L=1, r=2)
    base = pi_good(p, 1).by_level
    for ref in range(p.cells(1)):
        assert pi_good(p, 1, ref_pos=(ref,)).by_level == base
    assert pi_good_for_cube(p, 1, 1, (3,)) == base[1]


def test_dn_cardinality_bound():
    p = LatticeParams(M=1, L=2)
    for om in all_omegas(p, 1, effective_only=True):
        g = enumerate_grid(p, om, 1)
        for N in range(4):
            assert count_DN(g, N) <= 2 ** (3 * N + 2)
        assert count_DN(g, 0) <= count_DN(g, 1) <= count_DN(g, 2)


def test_classify_triple_partition():
    p = LatticeParams(M=1, L=1)
    g = enumerate_grid(p, (0, 1, 1), 1)
    cubes = g.all_cubes()
    seen = set()
    count = 0
    for I, J, K in itertools.product(cubes, repeat=3):
        li, lj, lk = g.level_of(I), g.level_of(J), g.level_of(K)
        if not (lk <= li and li - lj in (0, 1) and g.is_good(K)):
            continue
        count += 1
        cls = classify_triple(I, J, K, g)
        assert cls in TripleClass
        res = common_ancestor(I, J, K, g)
        assert all(g.contains(res.Q, c) for c in (I, J, K))
        expected = {TripleClass.SEPARATED: AncestorCase.SEPARATED_BOUND,
                    TripleClass.ADJACENT: AncestorCase.ADJACENT_BOUND,
                    TripleClass.NESTED: AncestorCase.NESTED}[cls]
        assert res.case == expected
        seen.add(cls)
    assert count > 0 and seen == set(TripleClass)


def test_product_grid_axes():
    p = LatticeParams(M=1, L=1)
    pg = ProductGrid(enumerate_grid(p, (0, 0, 1), 1), enumerate_grid(p, (1, 0, 0), 2))
    assert pg.params is p and pg.grid(2).grid_id != pg.grid(1).grid_id
