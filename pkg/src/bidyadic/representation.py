"""Dyadic representation of bilinear bi-parameter operators on the torus lattice.

The form ``<T(f1, f2), f3>`` of a :class:`~bidyadic.kernels.DiscreteOperator`
is rewritten, for functions with zero mean along each parameter, as

    C0 * E_omega sum_{k1, k2} 2^(-k1 d1/2) 2^(-k2 d2/2) <U^{k1,k2}_omega(f1, f2), f3>

where every ``U`` is a shift, a partial paraproduct or a full paraproduct
with normalized coefficients.

One parameter at a time the expansion goes as follows (``D_t`` is the Haar
projection onto level ``t`` and ``E_t = sum_{s>t} D_s`` the conditional
expectation onto level ``t``):

* ``g1 (x) g2 (x) g3 = sum_t [E E D + E D E' + D E' E']`` where the slot with
  ``D_t`` holds the *small* cube ``S`` and ``E`` means ``E_{t-1}`` and ``E'``
  means ``E_t``.  These are the three orderings (output, second or first slot
  small).
* The two remaining slots are expanded with
  ``E_a (x) E_b - E_t (x) E_t`` (near terms at level ``t``) and
  ``E_t (x) E_t = sum_{b>t} D_b (x) E_{b-1} + E_b (x) D_b`` (far terms,
  branches alpha and beta).  Each term is a triple ``(S, B, C)`` with ``B``
  the big Haar cube and ``C`` the cube of the average slot.
* Only good ``S`` are kept, weighted by ``1 / pi_good(level(S))``.  Goodness of
  ``S`` reads the shift bits at and above its level while the term reads the
  bits below, so the expectation over grids is unchanged.
* Nested triples ``S in C in B`` are split into a collapse part, whose sum
  over all chains above ``S`` telescopes to ``<g_u>_S <g_v>_S`` (a paraproduct
  entry ``(1_S/|S|, 1_S/|S|, h_S)`` with coefficient ``A(1, 1, h_S)``), and two
  remainders that stay shift entries with reference cube ``B``.

A bi-parameter coefficient is the product of the two axis factors summed over
the kernel's tensor terms, so coefficient tables are stored factored.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
import time
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .errors import ConfigError, DomainError, InfeasibleConfiguration
from .haar import StepFunction, _haar_vector
from .kernels import DiscreteOperator, _as_operator
from .lattice import (AncestorCase, LatticeParams, ProductGrid, ShiftedGrid, all_omegas, common_ancestor,
                      enumerate_grid, pi_good)
from .modelops import (AxisEntries, FullParaproductOp, PartialParaproductOp, ShiftOp, _contract, _cube_id,
                       axis_dictionary)

__all__ = [
    "extract_G",
    "AxisTerms",
    "expand_axis",
    "RepresentationBundle",
    "CaseLedger",
    "assemble",
    "decompose_case",
    "verify",
    "VerifyReport",
    "decay_report",
    "DecayReport",
    "mean_adjust",
    "random_tuples",
    "telescoping_check",
    "operator_from_models",
    "recover_coefficients",
]

# (small slot, u, v, u uses E_{t-1}, v uses E_{t-1}); slot 2 is the output
ORDERINGS = ((2, 0, 1, 1, 1), (1, 0, 2, 1, 0), (0, 1, 2, 0, 0))
TAGS = ("S", "A", "N")
SUBTERMS = ("plain", "collapse", "rest_a", "rest_b")
_CASE_TAG = {AncestorCase.SEPARATED_BOUND: 0, AncestorCase.ADJACENT_BOUND: 1, AncestorCase.NESTED: 2}


# -- single coefficients --------------------------------------------------------------------------
def _slot_vector(grid: ShiftedGrid, kind: str, cube, eta=None) -> np.ndarray:
    if kind == "h":
        return _haar_vector(grid, cube, eta if eta is not None else (1,) * grid.n, "h")
    if kind == "h0":
        return _haar_vector(grid, cube, (0,) * grid.n, "h")
    if kind == "bar":
        return _haar_vector(grid, cube, (0,) * grid.n, "bar")
    if kind == "one":
        return np.ones(grid.params.cells(grid.axis))
    raise ConfigError(f"unknown slot kind {kind!r}")


def extract_G(T, pgrid: ProductGrid, I, J, K, pattern=("h", "h0", "h"), etas=None) -> float:
    """Pairing ``<T(phi_I, phi_J), phi_K>`` of the operator with tensor Haar-type functions.

    ``I``, ``J``, ``K`` are rectangles ``(cube1, cube2)`` for the first input,
    second input and output slot; ``pattern`` gives the slot kinds (``h``,
    ``h0``, ``bar`` or ``one``), either one triple for both parameters or a
    pair of triples.
    """
    T = _as_operator(T)
    if T.params != pgrid.params:
        raise DomainError("operator and grid live on different lattices")
    pats = pattern if isinstance(pattern[0], (tuple, list)) else (pattern, pattern)
    etas = etas or (((1,) * pgrid.grid1.n,) * 3, ((1,) * pgrid.grid2.n,) * 3)
    vecs = []
    for slot, rect in enumerate((I, J, K)):
        vecs.append(tuple(_slot_vector(pgrid.grid(a + 1), pats[a][slot], rect[a], etas[a][slot]) for a in range(2)))
    return float(T.form_tensor(vecs[0], vecs[1], vecs[2]))


# -- one-parameter expansion ----------------------------------------------------------------------
@dataclass
class AxisTerms:
    """All entries of one parameter's expansion on one grid.

    Per entry: the slot kinds (``pattern`` index into ``patterns``), the
    dictionary rows of the pairing functions, the reference cube, the small
    cube's level ``t``, the complexity ``k = level(Q) - t``, the triple class
    (``0`` separated, ``1`` adjacent, ``2`` nested), the sub-term
    (``SUBTERMS``), the ordering, the multiplier and the kernel values
    ``kval[e, r]`` of every tensor term with the entry's test functions.
    """

    grid: ShiftedGrid
    patterns: list
    pattern: np.ndarray
    rows: np.ndarray
    levels: np.ndarray
    q: np.ndarray
    t: np.ndarray
    k: np.ndarray
    tag: np.ndarray
    sub: np.ndarray
    ordering: np.ndarray
    small: np.ndarray
    mult: np.ndarray
    wgood: np.ndarray
    kval: np.ndarray
    delta: float
    triples: int
    _entries: dict = field(default_factory=dict, repr=False)

    @property
    def size(self) -> int:
        return int(self.rows.shape[0])

    @property
    def effective(self) -> np.ndarray:
        """``mult * kval * wgood``: the factor whose products give the raw coefficients."""
        return self.kval * (self.mult * self.wgood)[:, None]

    @property
    def decay(self) -> np.ndarray:
        return 2.0 ** (-self.k * self.delta / 2.0)

    def family(self, p: int) -> str:
        return "para" if "bar" in self.patterns[p] else "shift"

    def groups(self) -> dict:
        """``(pattern, k) -> entry indices``, in a fixed order."""
        out = defaultdict(list)
        for e, key in enumerate(zip(self.pattern.tolist(), self.k.tolist())):
            out[key].append(e)
        return {key: np.array(v, dtype=np.int64) for key, v in sorted(out.items())}

    def entries(self, idx: np.ndarray) -> AxisEntries:
        key = idx.tobytes()
        ent = self._entries.get(key)
        if ent is None:
            kinds = self.patterns[int(self.pattern[idx[0]])]
            ent = AxisEntries(self.grid, self.rows[idx], self.levels[idx], self.q[idx], kinds)
            self._entries[key] = ent
        return ent

    def cell_tensor(self, weights: np.ndarray) -> np.ndarray:
        """``sum_e w[e] psi_out (x) psi_1 (x) psi_2`` on cells, volumes included."""
        mat = axis_dictionary(self.grid).matrix
        vol = self.grid.params.cell_volume(self.grid.axis) ** 3
        nz = np.flatnonzero(weights)
        return np.einsum("e,ex,ey,ez->xyz", weights[nz], mat[self.rows[nz, 2]], mat[self.rows[nz, 0]],
                         mat[self.rows[nz, 1]], optimize=True) * vol

    def tag_counts(self) -> dict:
        """Number of expansion triples per class (nested triples counted once)."""
        base = (self.sub == 0) | (self.sub == 2)
        return {TAGS[i]: int(((self.tag == i) & base).sum()) for i in range(3)}


def _etas(n: int) -> list:
    return [e for e in itertools.product((0, 1), repeat=n) if any(e)]


def expand_axis(grid: ShiftedGrid, tensors: Sequence[np.ndarray], pig, delta: float) -> AxisTerms:
    """Expansion entries of one parameter on one grid (see the module docstring)."""
    p = grid.params
    if not p.periodic:
        raise DomainError("the representation engine runs on the torus (periodic lattice)")
    d = axis_dictionary(grid)
    C = p.cells(grid.axis)
    ones = np.ones(C)
    cv = p.cell_volume(grid.axis)
    etas = _etas(grid.n)
    pat_index: dict = {}
    cols = defaultdict(list)
    phis = ([], [], [])
    triples = 0

    def vec(kind, cube, eta=None):
        return d._rows[d.row(kind, cube, eta)] if kind != "one" else ones

    def add(kinds, slots, phi, Q, t, tag, sub, o, small, mult):
        pi = pat_index.setdefault(kinds, len(pat_index))
        cols["pattern"].append(pi)
        cols["rows"].append([d.row(kd, c, e) for kd, (c, e) in zip(kinds, slots)])
        lv = [grid.level_of(c) for c, _ in slots]
        cols["levels"].append(lv)
        lq = grid.level_of(Q)
        cols["q"].append(_cube_id(grid, Q))
        cols["t"].append(t)
        cols["k"].append(lq - t)
        cols["tag"].append(tag)
        cols["sub"].append(sub)
        cols["ordering"].append(o)
        cols["small"].append(small)
        cols["mult"].append(mult)
        cols["wgood"].append(wg)
        if max(lq - x for x in lv) > lq - t + 1:
            raise DomainError("complexity cap exceeded")
        for j in range(3):
            phis[j].append(phi[j])

    for t in range(1, grid.S + 1):
        prob = pig[t]
        if prob == 0:
            raise InfeasibleConfiguration(f"pi_good vanishes at level {t}")
        wg = 1.0 / float(prob)
        for S in grid.cubes(t):
            if not grid.is_good(S):
                continue
            for o, (s, u, v, du, dv) in enumerate(ORDERINGS):
                fams = []
                if du:
                    fams.append(("near", u, v, t, t - dv))
                if dv:
                    fams.append(("near", v, u, t, t))
                for b in range(t + 1, grid.S + 1):
                    fams.append(("alpha", u, v, b, b - 1))
                    fams.append(("beta", v, u, b, b))
                kinds = [None] * 3
                for eS in etas:
                    hS = vec("h", S, eS)
                    if t < grid.S:
                        ck = ["bar"] * 3
                        ck[s] = "h"
                        phi = [ones, ones, ones]
                        phi[s] = hS
                        add(tuple(ck), [(S, eS) if j == s else (S, None) for j in range(3)], phi, S, t, 2, 1, o, s,
                            1.0)
                    for branch, hslot, aslot, b, cl in fams:
                        kinds = [None] * 3
                        kinds[s], kinds[hslot], kinds[aslot] = "h", "h", "h0"
                        kinds = tuple(kinds)
                        for B in grid.cubes(b):
                            for eB in etas:
                                hB = vec("h", B, eB)
                                for Cc in grid.cubes(cl):
                                    triples += 1
                                    anc = common_ancestor(B, Cc, S, grid)
                                    tag = _CASE_TAG[anc.case]
                                    slots = [None] * 3
                                    slots[s], slots[hslot], slots[aslot] = (S, eS), (B, eB), (Cc, None)
                                    if tag != 2:
                                        phi = [None] * 3
                                        phi[s], phi[hslot], phi[aslot] = hS, hB, vec("h0", Cc)
                                        add(kinds, slots, phi, anc.Q, t, tag, 0, o, s, 1.0)
                                        continue
                                    _nested(add, kinds, slots, grid, S, B, Cc, hS, hB, branch, s, hslot, aslot,
                                            t, o, ones, cv)
    n = len(cols["q"])
    pats = [None] * len(pat_index)
    for kd, i in pat_index.items():
        pats[i] = kd
    R = len(tensors)
    kval = np.zeros((n, R))
    if n:
        P0, P1, P2 = (np.array(ph) for ph in phis)
        for r, A in enumerate(tensors):
            X = (P2 @ A.reshape(C, C * C)).reshape(n, C, C)
            kval[:, r] = np.einsum("eyz,ey,ez->e", X, P0, P1, optimize=True)
    arr = lambda key, dt=np.int64: np.array(cols[key], dtype=dt)  # noqa: E731
    return AxisTerms(grid, pats, arr("pattern"), arr("rows").reshape(n, 3), arr("levels").reshape(n, 3), arr("q"),
                     arr("t"), arr("k"), arr("tag"), arr("sub"), arr("ordering"), arr("small"),
                     arr("mult", float), arr("wgood", float), kval, float(delta), triples)


def _nested(add, kinds, slots, grid, S, B, Cc, hS, hB, branch, s, hslot, aslot, t, o, ones, cv):
    """The two remainder entries of a nested triple; the collapse part is global per ``S``."""
    if branch == "alpha":
        ind = grid.indicator(Cc)
        vol = ind.sum() * cv
        avg = float(hB[ind > 0].mean())
        first = {hslot: ones, aslot: 1.0 - ind}
        second = {hslot: (1.0 - ind) * (hB - avg), aslot: ind}
    else:
        ind = grid.indicator(B)
        vol = ind.sum() * cv
        child = grid.indicator(grid.ancestor(S, grid.level_of(B) - 1))
        avg = float(hB[child > 0].mean())
        first = {aslot: 1.0 - ind, hslot: ones}
        second = {aslot: ind, hslot: (1.0 - child) * (hB - avg)}
    for sub, mult, part in ((2, -avg / math.sqrt(vol), first), (3, 1.0 / math.sqrt(vol), second)):
        phi = [None] * 3
        phi[s] = hS
        phi[hslot], phi[aslot] = part[hslot], part[aslot]
        add(kinds, slots, phi, B, t, 2, sub, o, s, mult)


# -- bundle ---------------------------------------------------------------------------------------------------
@dataclass
class CaseLedger:
    """Entry-pair counts and normalized coefficient maxima per case and sub-term.

    A case is the unordered pair of triple classes (``SS``, ``SA``, ..., ``NN``);
    the sub-term index follows the nested split on each side (``G1`` for pairs
    without a nested side, ``G1..G3`` for one nested side, ``G1..G9`` for two).
    """

    rows: dict = field(default_factory=dict)
    triple_pairs: Counter = field(default_factory=Counter)
    total_triple_pairs: int = 0

    def add(self, case: str, sub: str, pairs: int, ratio: float):
        r = self.rows.setdefault((case, sub), {"pairs": 0, "max_ratio": 0.0})
        r["pairs"] += int(pairs)
        r["max_ratio"] = max(r["max_ratio"], float(ratio))

    def partition_ok(self) -> bool:
        return sum(self.triple_pairs.values()) == self.total_triple_pairs

    def to_dict(self) -> dict:
        return {
            "cases": [{"case": c, "subterm": s, **v} for (c, s), v in sorted(self.rows.items())],
            "triple_pairs": dict(sorted(self.triple_pairs.items())),
            "total_triple_pairs": self.total_triple_pairs,
            "partition_ok": self.partition_ok(),
        }


def _case_label(tag1: int, tag2: int) -> str:
    a, b = sorted((tag1, tag2))
    return TAGS[a] + TAGS[b]


def _sub_index(tag: int, sub: int) -> int:
    """0 for non-nested sides, 1..3 for the nested split (collapse, rest_a, rest_b)."""
    return 0 if tag != 2 else sub


def _sub_label(tag1, sub1, tag2, sub2) -> str:
    i, j = _sub_index(tag1, sub1), _sub_index(tag2, sub2)
    if i and j:
        return f"G{3 * (i - 1) + j}"
    return f"G{max(i, j) or 1}"


@dataclass
class RepresentationBundle:
    """Everything needed to evaluate and audit the representation.

    ``axis_terms[a][omega]`` holds the expansion of parameter ``a + 1`` on the
    grid shifted by ``omega``; ``grid_pairs`` lists the product grids of the
    average (all pairs in exact mode, samples in Monte Carlo mode).
    """

    params: LatticeParams
    name: str
    coefficients: list
    deltas: tuple
    pi_good: tuple
    omegas: tuple
    axis_terms: tuple
    grid_pairs: list
    mode: str
    seed: int | None = None
    C0: float = 1.0
    certificates: dict = field(default_factory=dict)
    ledger: CaseLedger = field(default_factory=CaseLedger)
    timings: dict = field(default_factory=dict)
    _avg: dict = field(default_factory=dict, repr=False)

    # -- pieces ---------------------------------------------------------------------------------------
    def pieces(self, w1, w2, C0: float | None = None) -> list:
        """``(weight, operator)`` pairs on the product grid ``(w1, w2)``."""
        C0 = self.C0 if C0 is None else C0
        A1, A2 = self.axis_terms[0][w1], self.axis_terms[1][w2]
        pg = ProductGrid(A1.grid, A2.grid)
        c = np.asarray(self.coefficients, dtype=float)
        E1 = A1.effective * c[None, :] / A1.decay[:, None] / C0
        E2 = A2.effective / A2.decay[:, None]
        out = []
        for (p1, k1), i1 in A1.groups().items():
            f1 = A1.family(p1)
            for (p2, k2), i2 in A2.groups().items():
                f2 = A2.family(p2)
                weight = 2.0 ** (-k1 * self.deltas[0] / 2.0) * 2.0 ** (-k2 * self.deltas[1] / 2.0)
                axes = [A1.entries(i1), A2.entries(i2)]
                fac = (E1[i1], E2[i2])
                name = f"{A1.patterns[p1]}|{A2.patterns[p2]}|k=({k1},{k2})"
                if f1 == "shift" and f2 == "shift":
                    op = ShiftOp(pg, 2, axes, factors=fac, name=name)
                elif f1 == "para" and f2 == "para":
                    op = FullParaproductOp(pg, 2, axes, factors=fac, name=name)
                else:
                    op = PartialParaproductOp(pg, 2, axes, factors=fac, haar_axis=1 if f1 == "shift" else 2,
                                              name=name)
                out.append((weight, op))
        return out

    def all_pieces(self):
        for w1, w2 in self._distinct_pairs():
            for weight, op in self.pieces(w1, w2):
                yield (w1, w2), weight, op

    def _distinct_pairs(self) -> list:
        return sorted(set(self.grid_pairs))

    # -- evaluation -----------------------------------------------------------------------------------
    def _axis_tensors(self, axis: int, w) -> list:
        key = (axis, w)
        if key not in self._avg:
            A = self.axis_terms[axis][w]
            eff = A.effective
            c = self.coefficients if axis == 0 else [1.0] * len(self.coefficients)
            self._avg[key] = [A.cell_tensor(eff[:, r] * c[r]) for r in range(eff.shape[1])]
        return self._avg[key]

    def _mean_tensors(self, axis: int) -> list:
        key = (axis, "mean")
        if key not in self._avg:
            ws = self.omegas[axis]
            acc = None
            for w in ws:
                ts = self._axis_tensors(axis, w)
                acc = [t.copy() for t in ts] if acc is None else [a + t for a, t in zip(acc, ts)]
            self._avg[key] = [a / len(ws) for a in acc]
        return self._avg[key]

    def grid_form(self, w1, w2, fs: Sequence[StepFunction]) -> float:
        """Form of the representation on one product grid (no averaging)."""
        vals = [f.values for f in fs]
        return float(sum(_contract(W1, W2, [vals[0], vals[1], vals[2]], 2)
                         for W1, W2 in zip(self._axis_tensors(0, w1), self._axis_tensors(1, w2))))

    def pieces_form(self, w1, w2, fs: Sequence[StepFunction]) -> float:
        """The same value computed from the model operators themselves."""
        return math.fsum(self.C0 * weight * op.form(fs) for weight, op in self.pieces(w1, w2))

    def form(self, fs: Sequence[StepFunction]) -> tuple:
        """``(value, stderr)`` of the averaged representation form."""
        if self.mode == "exact":
            vals = [f.values for f in fs]
            v = sum(_contract(W1, W2, vals, 2) for W1, W2 in zip(self._mean_tensors(0), self._mean_tensors(1)))
            return float(v), 0.0
        samples = np.array([self.grid_form(w1, w2, fs) for w1, w2 in self.grid_pairs])
        se = float(samples.std(ddof=1) / math.sqrt(len(samples))) if len(samples) > 1 else math.inf
        return float(samples.mean()), se

    # -- serialization -----------------------------------------------------------------------------
    def to_dict(self, pieces: bool = False) -> dict:
        out = {
            "name": self.name,
            "params": self.params.to_dict(),
            "mode": self.mode,
            "seed": self.seed,
            "C0": self.C0,
            "piGood": [pg.to_dict() for pg in self.pi_good],
            "grids": [len(self.omegas[0]), len(self.omegas[1])],
            "gridPairs": len(self.grid_pairs),
            "entries": [[self.axis_terms[a][w].size for w in self.omegas[a]] for a in range(2)],
            "certificates": self.certificates,
            "ledger": self.ledger.to_dict(),
        }
        if pieces:
            rows = []
            for (w1, w2), weight, op in self.all_pieces():
                rep = op.validate()
                rows.append({"grid": [list(w1), list(w2)], "family": op.family, "name": op.name, "weight": weight,
                             "ratio": rep.ratio, "tail": {str(k): v for k, v in rep.tail.items()}})
            out["pieces"] = rows
        return out


def _ensemble(params: LatticeParams, axis: int) -> list:
    return list(all_omegas(params, axis, effective_only=True))


def assemble(T, params: LatticeParams | None = None, mode: str = "exact", samples: int = 64, seed: int = 0,
             budget: int = 4096, validate_pieces: bool = True, name: str | None = None) -> RepresentationBundle:
    """Build the representation of ``T`` over the shifted-grid ensemble.

    ``exact`` enumerates every product grid (at most ``budget``);
    ``montecarlo`` draws ``samples`` product grids with the given seed.  With
    ``validate_pieces`` every model operator is validated and ``C0`` is the
    smallest power of two making all of them valid.
    """
    T = _as_operator(T)
    params = params or T.params
    if params != T.params:
        raise DomainError("operator lives on another lattice")
    if not params.periodic:
        raise DomainError("the representation engine runs on the torus (periodic lattice)")
    t0 = time.perf_counter()
    pig = (pi_good(params, 1, require_feasible=True), pi_good(params, 2, require_feasible=True))
    oms = (_ensemble(params, 1), _ensemble(params, 2))
    if mode == "exact":
        if len(oms[0]) * len(oms[1]) > budget:
            raise ConfigError(f"{len(oms[0]) * len(oms[1])} product grids exceed the exact budget {budget}")
        pairs = [(a, b) for a in oms[0] for b in oms[1]]
        used = oms
    elif mode == "montecarlo":
        rng = np.random.default_rng(seed)
        pairs = [(oms[0][int(i)], oms[1][int(j)])
                 for i, j in zip(rng.integers(len(oms[0]), size=samples), rng.integers(len(oms[1]), size=samples))]
        used = (sorted({a for a, _ in pairs}), sorted({b for _, b in pairs}))
    else:
        raise ConfigError(f"unknown mode {mode!r}")
    coeffs = [c for c, _, _ in T.terms]
    terms = []
    for axis in (1, 2):
        tens = [A1 if axis == 1 else A2 for _, A1, A2 in T.terms]
        delta = params.delta(axis)
        terms.append({w: expand_axis(enumerate_grid(params, w, axis), tens, pig[axis - 1], delta) for w in used[axis - 1]})
    bundle = RepresentationBundle(params, name or T.name, coeffs, (params.delta1, params.delta2), pig, oms,
                                  tuple(terms), pairs, mode, seed if mode == "montecarlo" else None)
    bundle.timings["expand"] = time.perf_counter() - t0
    _fill_ledger(bundle)
    if validate_pieces and coeffs:
        _tune_and_certify(bundle)
    bundle.timings["total"] = time.perf_counter() - t0
    return bundle


def _shift_nu(A: AxisTerms) -> np.ndarray:
    lv = A.levels
    L, n = A.grid.params.L, A.grid.n
    vol = (2.0 ** (lv - L)) ** n
    qv = (2.0 ** (A.k + A.t - L)) ** n
    return qv ** 2 / np.sqrt(np.prod(vol, axis=1))


def _fill_ledger(bundle: RepresentationBundle):
    """Pair counts and entry-level shift ratios (``C0 = 1``) per case and sub-term."""
    led = CaseLedger()
    c = np.abs(np.asarray(bundle.coefficients, dtype=float))
    for w1, w2 in bundle._distinct_pairs():
        A1, A2 = bundle.axis_terms[0][w1], bundle.axis_terms[1][w2]
        r1 = np.abs(A1.effective) * c[None, :] / A1.decay[:, None] * _shift_nu(A1)[:, None]
        r2 = np.abs(A2.effective) / A2.decay[:, None] * _shift_nu(A2)[:, None]
        k1, k2 = A1.tag * 4 + A1.sub, A2.tag * 4 + A2.sub
        for key1 in np.unique(k1):
            m1 = k1 == key1
            for key2 in np.unique(k2):
                m2 = k2 == key2
                t1, s1, t2, s2 = int(key1) // 4, int(key1) % 4, int(key2) // 4, int(key2) % 4
                ratio = float(r1[m1].sum(1).max() * r2[m2].sum(1).max()) if m1.any() and m2.any() else 0.0
                led.add(_case_label(t1, t2), _sub_label(t1, s1, t2, s2), int(m1.sum()) * int(m2.sum()), ratio)
        tc1, tc2 = A1.tag_counts(), A2.tag_counts()
        for a in TAGS:
            for b in TAGS:
                led.triple_pairs[_case_label(TAGS.index(a), TAGS.index(b))] += tc1[a] * tc2[b]
        led.total_triple_pairs += sum(tc1.values()) * sum(tc2.values())
    bundle.ledger = led


def _tune_and_certify(bundle: RepresentationBundle):
    """Raw ratios with ``C0 = 1``, then the smallest admissible power of two and a final pass."""
    from .modelops import _cube_offsets

    t0 = time.perf_counter()
    raw_lin, raw_sq = 0.0, 0.0
    for (w1, w2) in bundle._distinct_pairs():
        for _, op in bundle.pieces(w1, w2, C0=1.0):
            r = op.validate(ladder=[]).ratio
            if op.family == "full":
                raw_sq = max(raw_sq, r)
            else:
                raw_lin = max(raw_lin, r)
    C0 = 1.0
    while raw_lin / C0 > 1.0 + 1e-12 or raw_sq / C0 ** 2 > 1.0 + 1e-12:
        C0 *= 2.0
    bundle.C0 = C0
    ladder = _terminal_ladder(bundle.params, bundle)
    S = bundle.params.top
    fam = defaultdict(lambda: {"pieces": 0, "valid": 0, "max_ratio": 0.0, "tail": [0.0] * len(ladder)})
    prof = np.zeros((S + 1, S + 1))
    invalid = []
    for (w1, w2) in bundle._distinct_pairs():
        for weight, op in bundle.pieces(w1, w2):
            rep = op.validate(ladder=ladder)
            f = fam[op.family]
            f["pieces"] += 1
            f["valid"] += int(rep.valid)
            f["max_ratio"] = max(f["max_ratio"], rep.ratio)
            f["tail"] = [max(a, rep.tail[N]) for a, N in zip(f["tail"], ladder)]
            if op.family == "shift":
                F = op.profile()
                o1, o2 = _cube_offsets(op.pgrid.grid1), _cube_offsets(op.pgrid.grid2)
                for l1 in range(S + 1):
                    for l2 in range(S + 1):
                        blk = F[o1[l1]:o1[l1 + 1], o2[l2]:o2[l2 + 1]]
                        if blk.size:
                            prof[l1, l2] = max(prof[l1, l2], float(blk.max()))
            if not rep.valid and len(invalid) < 10:
                invalid.append({"grid": [list(w1), list(w2)], "name": op.name, "witness": rep.witness})
    bundle.certificates = {
        "raw_max_ratio": raw_lin,
        "raw_max_carleson": raw_sq,
        "C0": C0,
        "ladder": ladder,
        "families": {k: dict(v) for k, v in sorted(fam.items())},
        "shift_level_profile": prof.tolist(),
        "all_valid": all(v["pieces"] == v["valid"] for v in fam.values()),
        "invalid": invalid,
    }
    bundle.timings["validate"] = time.perf_counter() - t0


def _terminal_ladder(params: LatticeParams, bundle) -> list:
    """``0, 1, ...`` up to the first ``N`` with every cube of every grid in ``D(N)``."""
    from .modelops import _dn_ids

    grids = [bundle.axis_terms[a][w].grid for a in range(2) for w in bundle.axis_terms[a]]
    N = 0
    while not all(_dn_ids(g, N).all() for g in grids):
        N += 1
    return list(range(N + 1))


def decompose_case(T, pgrid: ProductGrid, case: str, pig=None) -> dict:
    """Coefficient tables of one case on one product grid.

    Returns per sub-term the pair count, the raw factors (``C0 = 1``) and the
    validation reports of the pieces that carry entries of the case.
    """
    T = _as_operator(T)
    case = case.upper()
    if len(case) != 2 or any(ch not in TAGS for ch in case):
        raise ConfigError(f"case must be two of {TAGS}, got {case!r}")
    case = "".join(sorted(case, key=TAGS.index))
    params = pgrid.params
    pig = pig or (pi_good(params, 1, require_feasible=True), pi_good(params, 2, require_feasible=True))
    A = []
    for axis, g in ((1, pgrid.grid1), (2, pgrid.grid2)):
        tens = [A1 if axis == 1 else A2 for _, A1, A2 in T.terms]
        A.append(expand_axis(g, tens, pig[axis - 1], params.delta(axis)))
    c = np.asarray([cc for cc, _, _ in T.terms], dtype=float)
    out = {}
    for tag1 in range(3):
        for tag2 in range(3):
            if _case_label(tag1, tag2) != case:
                continue
            for s1 in ((0,) if tag1 != 2 else (1, 2, 3)):
                for s2 in ((0,) if tag2 != 2 else (1, 2, 3)):
                    i1 = np.flatnonzero((A[0].tag == tag1) & (A[0].sub == s1))
                    i2 = np.flatnonzero((A[1].tag == tag2) & (A[1].sub == s2))
                    if not len(i1) or not len(i2):
                        continue
                    label = _sub_label(tag1, s1, tag2, s2)
                    U1 = A[0].effective[i1] * c[None, :] / A[0].decay[i1, None]
                    U2 = A[1].effective[i2] / A[1].decay[i2, None]
                    reps = []
                    for p1 in np.unique(A[0].pattern[i1]):
                        j1 = i1[A[0].pattern[i1] == p1]
                        for p2 in np.unique(A[1].pattern[i2]):
                            j2 = i2[A[1].pattern[i2] == p2]
                            axes = [A[0].entries(j1), A[1].entries(j2)]
                            fac = (A[0].effective[j1] * c[None, :] / A[0].decay[j1, None],
                                   A[1].effective[j2] / A[1].decay[j2, None])
                            fam = (A[0].family(int(p1)), A[1].family(int(p2)))
                            if fam == ("shift", "shift"):
                                op = ShiftOp(pgrid, 2, axes, factors=fac)
                            elif fam == ("para", "para"):
                                op = FullParaproductOp(pgrid, 2, axes, factors=fac)
                            else:
                                op = PartialParaproductOp(pgrid, 2, axes, factors=fac,
                                                          haar_axis=1 if fam[0] == "shift" else 2)
                            reps.append(op.validate(ladder=[]).to_dict())
                    entry = out.setdefault(label, {"pairs": 0, "factors": [], "reports": []})
                    entry["pairs"] += len(i1) * len(i2)
                    entry["factors"].append((U1, U2))
                    entry["reports"].extend(reps)
    return out


# -- verification -------------------------------------------------------------------------------------------------
def mean_adjust(f: StepFunction) -> StepFunction:
    """Remove the mean along each parameter (uniform cells on the torus)."""
    F = f.values
    G = F - F.mean(axis=0, keepdims=True) - F.mean(axis=1, keepdims=True) + F.mean()
    return StepFunction(f.params, f.axes, G)


def random_tuples(params: LatticeParams, count: int, seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    shape = (params.cells(1), params.cells(2))
    return [tuple(StepFunction(params, (1, 2), rng.standard_normal(shape)) for _ in range(3)) for _ in range(count)]


@dataclass
class VerifyReport:
    rows: list
    max_relerr: float
    max_coverage_err: float
    piece_check: dict | None
    threshold: float

    @property
    def passed(self) -> bool:
        return self.max_relerr <= self.threshold

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["tuple", "brute", "bundle", "relerr", "stderr"])
        for r in self.rows:
            w.writerow([r["tuple"], f"{r['brute']:.17g}", f"{r['bundle']:.17g}", f"{r['relerr']:.17g}",
                        f"{r['stderr']:.17g}"])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"max_relerr": self.max_relerr, "max_coverage_err": self.max_coverage_err,
                "piece_check": self.piece_check, "threshold": self.threshold, "passed": self.passed,
                "rows": self.rows}


def verify(T, bundle: RepresentationBundle, tuples: Sequence, threshold: float = 1e-8, eps: float = 1e-300,
           piece_check: bool = True) -> VerifyReport:
    """Compare the operator's form with the representation on mean-adjusted tuples.

    Each tuple is mean-adjusted along both parameters; the removed parts are
    paired with ``T`` directly and the coverage error checks that the pieces
    add back to the form of the original tuple.  With ``piece_check`` the
    first tuple is also evaluated on the first product grid through the model
    operators themselves.
    """
    T = _as_operator(T)
    rows, cov = [], 0.0
    for i, fs in enumerate(tuples):
        adj = [mean_adjust(f) for f in fs]
        brute = T.form(*adj)
        val, se = bundle.form(adj)
        rel = abs(brute - val) / max(abs(brute), eps)
        parts = [(a, f - a) for a, f in zip(adj, fs)]
        mixed = math.fsum(T.form(*(parts[j][c[j]] for j in range(3)))
                          for c in itertools.product((0, 1), repeat=3) if any(c))
        full = T.form(*fs)
        cov = max(cov, abs(full - (val + mixed)) / max(abs(full), eps))
        rows.append({"tuple": i, "brute": brute, "bundle": val, "relerr": rel, "stderr": se})
    pc = None
    if piece_check and tuples:
        w1, w2 = bundle.grid_pairs[0]
        adj = [mean_adjust(f) for f in tuples[0]]
        a, b = bundle.grid_form(w1, w2, adj), bundle.pieces_form(w1, w2, adj)
        pc = {"grid": [list(w1), list(w2)], "tensor": a, "pieces": b, "relerr": abs(a - b) / max(abs(a), eps)}
    rel = max((r["relerr"] for r in rows), default=0.0)
    if bundle.mode != "exact":
        threshold = math.inf
    return VerifyReport(rows, rel, cov, pc, threshold)


# -- decay ----------------------------------------------------------------------------------------------------------
@dataclass
class DecayReport:
    """Tail curves ``N -> sup_{Q not in D(N)} F(Q)`` per family and overall.

    ``vanishing`` compares the last rung before the terminal one (where every
    cube lies in ``D(N)`` and the tail is 0 by construction) with the first:
    the tail vanishes when it has dropped below ``tol`` times its start.
    ``level_profile[l1][l2]`` is the largest shift ``F(Q)`` over rectangles
    with those levels.
    """

    ladder: list
    curves: dict
    overall: list
    strictly_decreasing: bool
    vanishing: bool
    tol: float
    level_profile: list

    @property
    def flat(self) -> bool:
        return not self.vanishing

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["family", "N", "F_N"])
        for fam, curve in sorted(self.curves.items()):
            for N, v in zip(self.ladder, curve):
                w.writerow([fam, N, f"{v:.17g}"])
        for N, v in zip(self.ladder, self.overall):
            w.writerow(["all", N, f"{v:.17g}"])
        return buf.getvalue()

    def profile_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["level1", "level2", "F"])
        for l1, row in enumerate(self.level_profile):
            for l2, v in enumerate(row):
                w.writerow([l1, l2, f"{v:.17g}"])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"ladder": self.ladder, "curves": self.curves, "overall": self.overall,
                "strictly_decreasing": self.strictly_decreasing, "vanishing": self.vanishing, "flat": self.flat,
                "tol": self.tol, "level_profile": self.level_profile}


def decay_report(bundle: RepresentationBundle, ladder: Sequence[int] | None = None, tol: float = 0.1
                 ) -> DecayReport:
    """Per family, the maximum over all pieces of the tail outside ``D(N)``.

    Reuses the certification pass when it ran on the default ladder;
    otherwise every piece is validated again on ``ladder``.
    """
    cert = bundle.certificates
    if ladder is None and cert.get("families"):
        ladder = list(cert["ladder"])
        curves = {k: list(v["tail"]) for k, v in cert["families"].items()}
        prof = cert["shift_level_profile"]
    else:
        ladder = list(ladder) if ladder is not None else _terminal_ladder(bundle.params, bundle)
        curves = defaultdict(lambda: [0.0] * len(ladder))
        S = bundle.params.top
        prof = [[0.0] * (S + 1) for _ in range(S + 1)]
        for _, _, op in bundle.all_pieces():
            rep = op.validate(ladder=ladder)
            curves[op.family] = [max(a, rep.tail[N]) for a, N in zip(curves[op.family], ladder)]
        curves = dict(curves)
    overall = [max(c[i] for c in curves.values()) if curves else 0.0 for i in range(len(ladder))]
    strict = all(b < a for a, b in zip(overall, overall[1:]))
    pre = overall[:-1] if len(overall) > 1 else overall
    vanishing = not pre or pre[0] == 0 or pre[-1] <= tol * pre[0]
    return DecayReport(ladder, curves, overall, strict, bool(vanishing), tol, prof)


# -- telescoping -----------------------------------------------------------------------------------------------------
def telescoping_check(grid: ShiftedGrid, S, g_u: np.ndarray, g_v: np.ndarray) -> tuple:
    """Both sides of the collapse identity on one axis for mean-zero ``g_u``, ``g_v``.

    Left: the sum over every chain ``S in C in B`` (both branches) of the pairings
    times the collapse multiplier.  Right: ``<g_u>_S <g_v>_S``.
    """
    cv = grid.params.cell_volume(grid.axis)
    t = grid.level_of(S)
    terms = []
    for b in range(t + 1, grid.S + 1):
        B = grid.ancestor(S, b)
        C = grid.ancestor(S, b - 1)
        for eta in _etas(grid.n):
            hB = _haar_vector(grid, B, eta, "h")
            indC, indB = grid.indicator(C), grid.indicator(B)
            volC, volB = indC.sum() * cv, indB.sum() * cv
            avgC = float(hB[indC > 0].mean())
            pu, pv = float(g_u @ hB) * cv, float(g_v @ (indC / math.sqrt(volC))) * cv
            terms.append(pu * pv * avgC / math.sqrt(volC))
            pu, pv = float(g_u @ (indB / math.sqrt(volB))) * cv, float(g_v @ hB) * cv
            terms.append(pu * pv * avgC / math.sqrt(volB))
    ind = grid.indicator(S) > 0
    return math.fsum(terms), float(g_u[ind].mean() * g_v[ind].mean())


# -- model operators as discrete operators ------------------------------------------------------------------------
def operator_from_models(ops: Sequence, weights: Sequence[float] | None = None, name: str = "models"
                         ) -> DiscreteOperator:
    """The bilinear operator whose form is ``sum_i w_i <U_i(f1, f2), f3>``."""
    if not ops:
        raise ConfigError("need at least one model operator")
    weights = [1.0] * len(ops) if weights is None else list(weights)
    terms = []
    for w, op in zip(weights, ops):
        terms.extend((w * c, A1, A2) for c, A1, A2 in op.cell_terms())
    return DiscreteOperator(ops[0].params, terms, name=name)


def recover_coefficients(T, op) -> np.ndarray:
    """``<T(phi_e^0, phi_e^1), phi_e^2>`` for every entry pair ``e`` of a bilinear model operator.

    For a shift whose slots are all cancellative Haar functions this is the
    coefficient table itself, so it inverts :func:`operator_from_models`.
    """
    T = _as_operator(T)
    if op.m != 2:
        raise DomainError("recover_coefficients handles bilinear operators")
    P1 = [op.axes[0].functions(j) for j in range(3)]
    P2 = [op.axes[1].functions(j) for j in range(3)]
    out = np.zeros((op.axes[0].size, op.axes[1].size))
    for c, A1, A2 in T.terms:
        g1 = np.einsum("xyz,ex,ey,ez->e", A1, P1[2], P1[0], P1[1], optimize=True)
        g2 = np.einsum("xyz,ex,ey,ez->e", A2, P2[2], P2[0], P2[1], optimize=True)
        out += c * np.outer(g1, g2)
    return out
