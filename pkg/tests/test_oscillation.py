import numpy as np
import pytest
from hypothesis import given, strategies as st

from bidyadic.errors import ConfigError, DomainError
from bidyadic.haar import StepFunction
from bidyadic.lattice import LatticeParams, enumerate_grid
from bidyadic.oscillation import (
    CarlesonFamily,
    bmo_norm,
    carleson_embed,
    carleson_sup,
    carleson_sup_bruteforce,
    cmo_defect,
    defect_curve,
    h1_bmo_pair,
    haar_square_table,
    standard_product_grid,
)

P = LatticeParams(M=1, L=1)
seeds = st.integers(0, 2**31)
FLAVORS = [("oneparam", 1), ("oneparam", 2), "littlebmo", "productBMO"]


def dyadic_data(seed, params=P):
    rng = np.random.default_rng(seed)
    return StepFunction(params, (1, 2), rng.integers(-64, 65, size=(params.cells(1), params.cells(2))) / 4.0)


@given(seeds, st.integers(-50, 50))
def test_bmo_ignores_constants(seed, c):
    b = dyadic_data(seed)
    for fl in FLAVORS:
        assert bmo_norm(b + float(c), fl) == bmo_norm(b, fl)


def test_product_bmo_ignores_one_variable_terms():
    b = dyadic_data(4)
    g = np.arange(P.cells(1), dtype=float)[:, None] * np.ones((1, P.cells(2)))
    assert bmo_norm(b + StepFunction(P, (1, 2), g)) == pytest.approx(bmo_norm(b), rel=1e-12)


def test_bmo_of_constant_is_zero():
    c = StepFunction.constant(P, 3.0)
    assert all(bmo_norm(c, fl) == 0.0 for fl in FLAVORS)
    with pytest.raises(ConfigError):
        bmo_norm(c, "nope")
    with pytest.raises(DomainError):
        bmo_norm(StepFunction.zeros(P, axes=(1,)), "littlebmo")


@given(seeds)
def test_cmo_defect_monotone_and_terminal(seed):
    b = dyadic_data(seed)
    vals = [v for _, v in defect_curve(b, range(P.top + 2))]
    for x, y in zip(vals, vals[1:]):
        assert y <= x * (1 + 1e-12) + 1e-15
    assert vals[-1] <= 1e-12 * max(vals[0], 1.0)
    assert cmo_defect(b, 0, "littlebmo") >= 0


def random_table(pg, rng, density=0.5):
    S = pg.params.top
    return {(a, b): rng.exponential(size=(pg.grid1.count(a), pg.grid2.count(b))) * (rng.random(
        (pg.grid1.count(a), pg.grid2.count(b))) < density) for a in range(S + 1) for b in range(S + 1)}


def test_carleson_sup_matches_bruteforce():
    p = LatticeParams(M=0, L=2)
    pg = standard_product_grid(p)
    rng = np.random.default_rng(8)
    for _ in range(3):
        t = random_table(pg, rng)
        fast = carleson_sup(pg, t, singles_only=True).value
        slow = carleson_sup_bruteforce(pg, t, max_blocks=1)
        assert fast == pytest.approx(slow, rel=1e-12)
        # unions of several blocks only give lower bounds for the full supremum
        assert carleson_sup_bruteforce(pg, t, max_blocks=2) <= carleson_sup(pg, t).value * (1 + 1e-12)


@given(seeds)
def test_carleson_embedding_holds(seed):
    p = LatticeParams(M=0, L=2)
    pg = standard_product_grid(p)
    rng = np.random.default_rng(seed)
    lam = CarlesonFamily(pg, random_table(pg, rng, 0.3))
    res = carleson_embed(lam, random_table(pg, rng, 0.3))
    assert res["holds"]
    assert res["lhs"] <= max(res["C1"], res["C_levelsets"]) * res["rhs"] * (1 + 1e-12) + 1e-300


def test_carleson_family_checks_shapes_and_signs():
    pg = standard_product_grid(LatticeParams(M=0, L=2))
    with pytest.raises(ConfigError):
        CarlesonFamily(pg, {(0, 0): np.zeros((1, 1))})
    with pytest.raises(DomainError):
        CarlesonFamily(pg, {(3, 3): -np.ones((1, 1))})


def test_product_bmo_is_root_of_haar_carleson_constant():
    b = dyadic_data(2)
    pg = standard_product_grid(P)
    assert bmo_norm(b) ** 2 == pytest.approx(carleson_sup(pg, haar_square_table(b, pg)).value, rel=1e-12)


@given(seeds)
def test_h1_bmo_pairing_bounded(seed):
    p = LatticeParams(M=0, L=2)
    rng = np.random.default_rng(seed)
    g = enumerate_grid(p, tuple(int(x) for x in rng.integers(0, 2, p.top)), 1)
    cubes = [c for s in range(1, g.S + 1) for c in g.cubes(s)]
    a = {c: float(rng.standard_normal()) for c in cubes}
    b = {c: float(rng.standard_normal()) for c in cubes}
    r = h1_bmo_pair(a, b, g)
    assert 0 <= r["constant"] <= 2.0
