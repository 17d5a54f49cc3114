import json

import numpy as np
import pytest

from bidyadic.errors import ConfigError, InfeasibleConfiguration
from bidyadic.haar import StepFunction
from bidyadic.kernels import DiscreteOperator, builtin_kernels
from bidyadic.lattice import LatticeParams, ProductGrid, enumerate_grid, pi_good
from bidyadic.modelops import single_q_shift
from bidyadic.representation import (
    assemble,
    decay_report,
    decompose_case,
    extract_G,
    mean_adjust,
    operator_from_models,
    random_tuples,
    recover_coefficients,
    telescoping_check,
    verify,
)

P = LatticeParams(M=1, L=1)


@pytest.fixture(scope="module")
def kernel():
    return builtin_kernels("compact_cz", P)


@pytest.fixture(scope="module")
def bundle(kernel):
    return assemble(kernel, P)


def test_bundle_reproduces_form(kernel, bundle):
    rep = verify(kernel, bundle, random_tuples(P, 5, seed=2))
    assert rep.passed and rep.max_relerr <= 1e-8
    assert rep.max_coverage_err <= 1e-10
    assert rep.piece_check["relerr"] <= 1e-12
    assert {"brute", "bundle", "relerr"} <= set(rep.rows[0])
    assert rep.to_csv().splitlines()[0].startswith("tuple")


def test_pieces_valid_after_tuning(bundle):
    cert = bundle.certificates
    assert cert["all_valid"] and not cert["invalid"]
    c0 = bundle.C0
    assert c0 >= 1 and np.log2(c0) == int(np.log2(c0))


def test_case_ledger_partition(bundle):
    led = bundle.ledger
    assert led.partition_ok()
    assert set(led.triple_pairs) == {"SS", "SA", "SN", "AA", "AN", "NN"}
    d = led.to_dict()
    assert d["partition_ok"] and sum(r["pairs"] for r in d["cases"] if r["case"] == "NN") > 0


def test_bundle_serializes(bundle):
    text = json.dumps(bundle.to_dict(), sort_keys=True, default=str)
    assert "C0" in text


def test_decay_report_shapes(bundle):
    rep = decay_report(bundle)
    assert len(rep.overall) == len(rep.ladder)
    assert rep.overall[-1] <= rep.overall[0]
    assert rep.to_csv().count("\n") >= len(rep.ladder)


def test_mean_adjust():
    f = random_tuples(P, 1, seed=3)[0][0]
    g = mean_adjust(f).values
    assert np.abs(g.sum(axis=0)).max() < 1e-12 and np.abs(g.sum(axis=1)).max() < 1e-12


def test_extract_G_is_tensor_pairing(kernel):
    pg = ProductGrid(enumerate_grid(P, (0, 1, 0), 1), enumerate_grid(P, (1, 1, 0), 2))
    I = (pg.grid1.cubes(1)[0], pg.grid2.cubes(1)[1])
    K = (pg.grid1.cubes(2)[1], pg.grid2.cubes(1)[3])
    g = extract_G(kernel, pg, I, I, K, pattern=("h", "h0", "h"))
    assert np.isfinite(g)
    # constant slots integrate the kernel against constants
    T = kernel.operator()
    one = StepFunction.constant(P, 1.0)
    top = (pg.grid1.cubes(P.top)[0], pg.grid2.cubes(P.top)[0])
    full = extract_G(kernel, pg, top, top, top, pattern=("one", "one", "one"))
    assert full == pytest.approx(T.form(one, one, one), rel=1e-10, abs=1e-14)


def test_decompose_case_counts(kernel):
    pg = ProductGrid(enumerate_grid(P, (0, 0, 1), 1), enumerate_grid(P, (1, 0, 1), 2))
    out = decompose_case(kernel, pg, "sn")
    assert out and all(v["pairs"] > 0 for v in out.values())
    with pytest.raises(ConfigError):
        decompose_case(kernel, pg, "xx")


def test_telescoping_collapse():
    g = enumerate_grid(P, (1, 0, 1), 1)
    rng = np.random.default_rng(4)
    u, v = rng.standard_normal(P.cells(1)), rng.standard_normal(P.cells(1))
    u, v = u - u.mean(), v - v.mean()
    for S in g.cubes(0) + g.cubes(1):
        lhs, rhs = telescoping_check(g, S, u, v)
        assert lhs == pytest.approx(rhs, abs=1e-12)


def test_model_round_trip():
    rng = np.random.default_rng(3)
    g1, g2 = enumerate_grid(P, (1, 0, 1), 1), enumerate_grid(P, (0, 1, 1), 2)
    pg = ProductGrid(g1, g2)
    ops = [single_q_shift(pg, (g1.cubes(2)[0], g2.cubes(2)[1]), ((1, 1, 0), (1, 0, 1)), (("h",) * 3,) * 2, rng=rng),
           single_q_shift(pg, (g1.cubes(3)[0], g2.cubes(2)[0]), ((0, 1, 1), (1, 1, 1)), (("h",) * 3,) * 2, rng=rng)]
    T = operator_from_models(ops)
    assert isinstance(T, DiscreteOperator)
    for op in ops:
        assert np.abs(recover_coefficients(T, op) - op.coefficients).max() <= 1e-12
    with pytest.raises(ConfigError):
        operator_from_models([])


def test_montecarlo_mode_reports_stderr(kernel):
    b = assemble(kernel, P, mode="montecarlo", samples=3, seed=1, validate_pieces=False)
    rep = verify(kernel, b, random_tuples(P, 2, seed=5))
    for r in rep.rows:
        assert r["stderr"] > 0
        assert abs(r["bundle"] - r["brute"]) <= 6 * r["stderr"] + 1e-12


def test_infeasible_goodness_is_reported():
    tight = LatticeParams(M=0, L=2, r=1)
    assert not pi_good(tight, 1).feasible
    with pytest.raises(InfeasibleConfiguration):
        assemble(builtin_kernels("compact_cz", tight), tight)
