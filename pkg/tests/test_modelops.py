import itertools
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bidyadic.errors import ConfigError, DomainError
from bidyadic.haar import StepFunction, project_N
from bidyadic.lattice import LatticeParams, ProductGrid, all_omegas, enumerate_grid
from bidyadic.modelops import (
    AxisEntries,
    FullParaproductOp,
    PartialParaproductOp,
    ShiftOp,
    grid_average,
    per_cube_bound,
    single_q_shift,
    validate,
)
from bidyadic.representation import operator_from_models

from conftest import random_step

P = LatticeParams(M=1, L=1)
seeds = st.integers(0, 2**31)
PATTERNS = [("h", "h", "h"), ("h", "h", "h0"), ("h", "h0", "h"), ("h0", "h", "h")]


def product_grid(rng, params=P):
    S = params.top
    return ProductGrid(enumerate_grid(params, tuple(int(x) for x in rng.integers(0, 2, S)), 1),
                       enumerate_grid(params, tuple(int(x) for x in rng.integers(0, 2, S)), 2))


def axis_entries(grid, k, kinds):
    """Every entry of complexity ``k`` below every cube that can host it."""
    items = []
    for lq in range(max(k) + 1, grid.S + 1):
        for Q in grid.cubes(lq):
            per_slot = []
            for kj, kind in zip(k, kinds):
                cubes = [c for c in grid.cubes(lq - kj) if grid.contains(Q, c)]
                eta = (1,) if kind == "h" else (0,)
                per_slot.append([(c, eta) for c in cubes])
            items.extend((Q, list(combo)) for combo in itertools.product(*per_slot))
    return AxisEntries.build(grid, items, kinds)


def random_shift(rng, params=P) -> ShiftOp:
    """A shift over all reference rectangles with coefficients inside the normalization."""
    pg = product_grid(rng, params)
    axes = []
    for grid in (pg.grid1, pg.grid2):
        kinds = PATTERNS[rng.integers(len(PATTERNS))]
        k = tuple(int(x) for x in rng.integers(0, 2, 3))
        axes.append(axis_entries(grid, k, kinds))
    nu = []
    for a in axes:
        nu.append(a.q_volumes() ** 2 / np.sqrt(np.prod(a.volumes(), axis=1)))
    C = rng.uniform(-1, 1, size=(axes[0].size, axes[1].size)) / np.outer(nu[0], nu[1])
    return ShiftOp(pg, 2, axes, coeffs=C)


@given(seeds)
def test_random_shift_validates_and_apply_matches_form(seed):
    rng = np.random.default_rng(seed)
    op = random_shift(rng)
    rep = validate(op)
    assert rep.valid and rep.ratio <= 1 + 1e-12
    fs = [random_step(P, rng) for _ in range(3)]
    assert op.apply(fs[:2]).inner(fs[2]) == pytest.approx(op.form(fs), rel=1e-10, abs=1e-13)


@given(seeds)
def test_per_cube_bound(seed):
    rng = np.random.default_rng(seed)
    op = random_shift(rng)
    fs = [random_step(P, rng) for _ in range(2)]
    res = per_cube_bound(op, fs)
    assert res["ratio"] <= 1 + 1e-12
    assert res["outside"] <= 1e-12


@given(seeds, st.integers(0, 2), st.integers(0, 2))
def test_adjoint_involution(seed, j1, j2):
    rng = np.random.default_rng(seed)
    op = random_shift(rng)
    fs = [random_step(P, rng) for _ in range(3)]
    back = op.adjoint(j1, j2).adjoint(j1, j2)
    assert back.form(fs) == pytest.approx(op.form(fs), rel=1e-12, abs=1e-14)
    with pytest.raises(ConfigError):
        op.adjoint(3, 0)


def test_cell_terms_reproduce_form():
    rng = np.random.default_rng(3)
    op = random_shift(rng)
    fs = [random_step(P, rng) for _ in range(3)]
    T = operator_from_models([op])
    assert T.form(*fs) == pytest.approx(op.form(fs), rel=1e-10, abs=1e-13)


def test_serialization_and_restriction():
    rng = np.random.default_rng(4)
    op = random_shift(rng)
    d = json.loads(op.to_json())
    assert d["family"] == "shift" and len(d["entries"][0]) == op.axes[0].size
    zero = op.restricted(np.zeros(op.coefficients.shape, dtype=bool))
    fs = [random_step(P, rng) for _ in range(3)]
    assert zero.form(fs) == 0.0
    assert op.scaled(2.0).form(fs) == pytest.approx(2 * op.form(fs))


def test_oversized_shift_is_flagged():
    rng = np.random.default_rng(5)
    pg = product_grid(rng)
    Q = (pg.grid1.cubes(2)[0], pg.grid2.cubes(2)[1])
    op = single_q_shift(pg, Q, ((1, 1, 1), (1, 1, 1)), (("h",) * 3, ("h",) * 3), coeff=1.5)
    rep = op.validate()
    assert not rep.valid and rep.ratio == pytest.approx(1.5) and rep.witness is not None


def test_shift_pattern_checks():
    rng = np.random.default_rng(6)
    pg = product_grid(rng)
    with pytest.raises(ConfigError):
        ShiftOp(pg, 2, [axis_entries(pg.grid1, (0, 0, 0), ("h", "h0", "h0")),
                        axis_entries(pg.grid2, (0, 0, 0), ("h",) * 3)], coeffs=np.zeros((0, 0)))
    with pytest.raises(DomainError):
        single_q_shift(pg, (pg.grid1.cubes(1)[0], pg.grid2.cubes(1)[0]), ((1, 1, 1), (0, 0, 0)),
                       (("h",) * 3, ("h",) * 3))


def paraproduct_entries(grid, kinds):
    items = []
    for lq in range(1, grid.S + 1):
        for Q in grid.cubes(lq):
            items.append((Q, [(Q, (1,) if k == "h" else (0,)) for k in kinds]))
    return AxisEntries.build(grid, items, kinds)


def test_full_paraproduct_carleson_normalization():
    rng = np.random.default_rng(7)
    pg = product_grid(rng)
    kinds = ("bar", "bar", "h")
    a1, a2 = paraproduct_entries(pg.grid1, kinds), paraproduct_entries(pg.grid2, kinds)
    C = rng.standard_normal((a1.size, a2.size))
    op = FullParaproductOp(pg, 2, (a1, a2), coeffs=C)
    rep = op.validate()
    scaled = op.scaled(1 / np.sqrt(rep.ratio)).validate()
    assert scaled.valid and scaled.ratio == pytest.approx(1.0, rel=1e-12)
    tails = [scaled.tail[N] for N in sorted(scaled.tail)]
    assert all(b <= a * (1 + 1e-12) for a, b in zip(tails, tails[1:]))
    fs = [random_step(P, rng) for _ in range(3)]
    assert op.apply(fs[:2]).inner(fs[2]) == pytest.approx(op.form(fs), rel=1e-10, abs=1e-13)
    with pytest.raises(ConfigError):
        FullParaproductOp(pg, 2, (paraproduct_entries(pg.grid1, ("h", "h", "bar")), a2), coeffs=C)


def test_partial_paraproduct_validation():
    rng = np.random.default_rng(8)
    pg = product_grid(rng)
    ha = axis_entries(pg.grid1, (1, 1, 0), ("h", "h", "h"))
    pa = paraproduct_entries(pg.grid2, ("bar", "h", "bar"))
    C = rng.standard_normal((ha.size, pa.size))
    op = PartialParaproductOp(pg, 2, (ha, pa), coeffs=C, haar_axis=1)
    rep = op.validate()
    assert rep.ratio > 0
    unit = op.scaled(1 / rep.ratio).validate()
    assert unit.valid
    fs = [random_step(P, rng) for _ in range(3)]
    assert op.apply(fs[:2]).inner(fs[2]) == pytest.approx(op.form(fs), rel=1e-10, abs=1e-13)


def test_grid_average_exact_vs_montecarlo():
    params = LatticeParams(M=1, L=2)
    f = random_step(params, np.random.default_rng(9))
    oms = list(all_omegas(params, 1, effective_only=True))
    pairs = [(a, b) for a in oms for b in oms]

    def builder(pair):
        pg = ProductGrid(enumerate_grid(params, pair[0], 1), enumerate_grid(params, pair[1], 2))
        return project_N(f, pg, 1).pn.norm(2)

    exact = grid_average(builder, pairs, "exact")
    mc = grid_average(builder, pairs, "montecarlo", samples=400, seed=1)
    assert exact.stderr == 0.0 and mc.stderr > 0
    assert abs(exact.value - mc.value) <= 3 * mc.stderr
    with pytest.raises(ConfigError):
        grid_average(builder, [], "exact")
    with pytest.raises(ConfigError):
        grid_average(builder, pairs, "exact", budget=10)
