import json

import numpy as np
import pytest

from bidyadic.compactprobe import (
    VARIANTS,
    default_A_ladder,
    finite_rank_family,
    probe_operator,
    resolved_r_ladder,
    rk_functionals,
    sample_inputs,
    shrinking_haar_family,
    subcell_r_ladder,
    tensor_noncompact_demo,
)
from bidyadic.errors import ConfigError
from bidyadic.haar import StepFunction
from bidyadic.kernels import DiscreteOperator
from bidyadic.lattice import LatticeParams

P = LatticeParams(M=1, L=1)


def test_ladders():
    assert default_A_ladder(P)[0] == 0.5
    r = resolved_r_ladder(P)
    assert r[0] == 0.0 and r[1] == 0.5
    sub = subcell_r_ladder(P, depth=5)
    assert sub[1] == 2.0 ** -6 and sub[-len(r) + 1:] == r[1:]


@pytest.mark.parametrize("variant", VARIANTS)
def test_finite_rank_family_passes_on_subcell_ladder(variant):
    fam = finite_rank_family(P, 1, count=20, seed=1)
    rep = rk_functionals(fam, 2, r_ladder=subcell_r_ladder(P), variant=variant, tol=1e-6)
    assert rep.verdict == "consistent-with-compact"
    assert rep.oscillation_end <= 1e-6 * rep.uniform_bound
    assert rep.tail_end <= 1e-6 * rep.uniform_bound


def test_shrinking_haar_fails_oscillation():
    fam = shrinking_haar_family(LatticeParams(M=1, L=3))
    rep = rk_functionals(fam, 2, tol=1e-6)
    assert rep.verdict == "fails-oscillation"
    # a normalized Haar function moves by at least its own L^2 size under tiny shifts
    assert rep.oscillation_end >= 2 ** -0.5 * rep.uniform_bound - 1e-12


def test_any_finite_family_settles_below_the_cell_scale():
    rep = rk_functionals(shrinking_haar_family(P), 2, r_ladder=subcell_r_ladder(P), tol=1e-6)
    assert rep.oscillation_end <= 1e-6 * rep.uniform_bound


def test_oscillation_vanishes_at_zero_radius():
    fam = sample_inputs(P, 5, seed=2)
    rep = rk_functionals([f[0] for f in fam], 2)
    assert rep.oscillation_curve[0] == pytest.approx(0.0, abs=1e-12)
    assert all(b >= a - 1e-12 for a, b in zip(rep.tail_curve[1:], rep.tail_curve))


def test_zero_family_is_compact():
    rep = rk_functionals([StepFunction.zeros(P)] * 3, 2)
    assert rep.uniform_bound == 0.0 and rep.verdict == "consistent-with-compact"


def test_report_serialization():
    rep = rk_functionals(finite_rank_family(P, 1, count=5, seed=0), 2)
    d = json.loads(rep.to_json())
    assert d["verdict"] == rep.verdict and len(d["tail"]) == len(rep.A_ladder)
    assert rep.tail_csv().startswith("A,tail\n") and rep.oscillation_csv().startswith("r,oscillation\n")


def test_weighted_variants():
    w = StepFunction(P, (1, 2), np.exp(0.3 * np.random.default_rng(0).standard_normal((8, 8))))
    fam = finite_rank_family(P, 1, count=10, seed=3)
    rep = rk_functionals(fam, 2, w=w, variant="KRWA", r_ladder=subcell_r_ladder(P))
    assert rep.settings["p0"] >= 1 and 0 < rep.settings["a"] < min(2 / rep.settings["p0"], 1)
    with pytest.raises(ConfigError):
        rk_functionals(fam, 2, w=w, variant="KRWA", a=5.0)
    with pytest.raises(ConfigError):
        rk_functionals(fam, 2, variant="nope")
    with pytest.raises(ConfigError):
        rk_functionals(fam, "inf")


def test_probe_zero_operator():
    rep = probe_operator(DiscreteOperator.zero(P), samples=4)
    assert rep.uniform_bound == 0.0 and rep.verdict == "consistent-with-compact"
    assert "evidence" in rep.settings["note"]


def test_tensor_demo_identity():
    rep = tensor_noncompact_demo(count=4)
    assert rep.applicable and rep.A0 > 0
    assert rep.max_identity_error <= 1e-12
    assert rep.min_image_distance > 0
    trivial = tensor_noncompact_demo(count=3, g=np.zeros(LatticeParams(M=1, L=3, periodic=False).cells(2)))
    assert not trivial.applicable
    with pytest.raises(ConfigError):
        tensor_noncompact_demo(P)
