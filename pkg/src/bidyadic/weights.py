"""Muckenhoupt constants, strong maximal functions, square functions and
weight interpolation on the rectangles of the standard dyadic grids."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Sequence

import numpy as np

from .errors import ConfigError, DomainError, InfeasibleConfiguration
from .haar import StepFunction, _expectation_matrix
from .lattice import DyadicCube, LatticeParams, ProductGrid, ShiftedGrid, enumerate_grid

__all__ = [
    "INF",
    "as_exponent",
    "Weight",
    "WeightVector",
    "RectangleFamily",
    "rectangle_family",
    "APReport",
    "ap_constant",
    "multilinear_ap_constant",
    "strong_maximal",
    "strong_maximal_bruteforce",
    "weighted_norm",
    "lp_norm",
    "square_function_norm",
    "interpolate_weights",
]


class _Infinity:
    """The exponent ``infinity``; kept apart from floats on purpose."""

    _inst = None

    def __new__(cls):
        if cls._inst is None:
            cls._inst = super().__new__(cls)
        return cls._inst

    def __repr__(self):
        return "INF"

    def __str__(self):
        return "inf"

    def __reduce__(self):
        return "INF"


INF = _Infinity()


def as_exponent(p):
    """Normalize an exponent to a Fraction or ``INF``."""
    if p is INF:
        return INF
    if isinstance(p, str):
        if p.strip().lower() in ("inf", "infinity", "oo"):
            return INF
        return Fraction(p.strip())
    if isinstance(p, float):
        if math.isinf(p):
            return INF
        return Fraction(str(p))
    return Fraction(p)


def reciprocal(p) -> Fraction:
    p = as_exponent(p)
    return Fraction(0) if p is INF else 1 / p


def conjugate(p):
    """Hoelder conjugate ``p'`` (``1' = INF``, ``INF' = 1``)."""
    p = as_exponent(p)
    if p is INF:
        return Fraction(1)
    if p == 1:
        return INF
    return p / (p - 1)


def _exp_str(p) -> str:
    p = as_exponent(p)
    return "inf" if p is INF else str(p)


@dataclass(frozen=True)
class Weight:
    w: StepFunction

    def __post_init__(self):
        if not np.all(np.isfinite(self.w.values)) or self.w.values.min() <= 0:
            raise DomainError("a weight must be finite and strictly positive")

    @property
    def values(self) -> np.ndarray:
        return self.w.values


@dataclass(frozen=True)
class WeightVector:
    weights: tuple
    exponents: tuple

    def __post_init__(self):
        ws = tuple(w if isinstance(w, Weight) else Weight(w) for w in self.weights)
        ex = tuple(as_exponent(p) for p in self.exponents)
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "exponents", ex)
        if len(ws) != len(ex) or not ws:
            raise ConfigError("need one exponent per weight")
        for p in ex:
            if p is not INF and p < 1:
                raise ConfigError("exponents must lie in [1, inf]")
        if self.inv_p <= 0:
            raise ConfigError("need 1/p = sum 1/p_j > 0")

    @property
    def inv_p(self) -> Fraction:
        return sum((reciprocal(p) for p in self.exponents), Fraction(0))

    @property
    def p(self):
        return 1 / self.inv_p

    def product(self) -> np.ndarray:
        out = np.ones_like(self.weights[0].values)
        for w in self.weights:
            out = out * w.values
        return out


class RectangleFamily:
    """All products of standard-grid cubes (every level) of the two axes."""

    def __init__(self, params: LatticeParams):
        self.params = params
        S = params.top
        self.grids = tuple(enumerate_grid(params, (0,) * S, a) for a in (1, 2))
        self.cubes = []
        self.inc = []
        self.levels = []
        self.level_index = []
        for g in self.grids:
            cubes, rows, levs = [], [], []
            lvl_idx = np.zeros((S + 1, params.cells(g.axis)), dtype=int)
            for s in range(S + 1):
                mem = g.membership(s)
                start = len(cubes)
                cubes.extend(g.cubes(s))
                rows.append(mem)
                levs.extend([s] * mem.shape[0])
                lvl_idx[s] = start + np.argmax(mem, axis=0)
            self.cubes.append(cubes)
            self.inc.append(np.vstack(rows))
            self.levels.append(np.array(levs))
            self.level_index.append(lvl_idx)
        self.counts = tuple(m.sum(axis=1) for m in self.inc)

    def averages(self, values: np.ndarray) -> np.ndarray:
        """Averages of a two-parameter array over every rectangle."""
        A1, A2 = self.inc
        return (A1 @ values @ A2.T) / np.outer(self.counts[0], self.counts[1])

    def maxima(self, values: np.ndarray) -> np.ndarray:
        return -self.minima(-values)

    def minima(self, values: np.ndarray) -> np.ndarray:
        A1, A2 = self.inc
        big = np.inf
        col = np.stack([np.where(A2[j][None, :] > 0, values, big).min(axis=1) for j in range(A2.shape[0])], axis=1)
        return np.stack([np.where(A1[i][:, None] > 0, col, big).min(axis=0) for i in range(A1.shape[0])], axis=0)

    def rectangle(self, i: int, j: int) -> tuple:
        return self.cubes[0][i], self.cubes[1][j]


@lru_cache(maxsize=16)
def rectangle_family(params: LatticeParams) -> RectangleFamily:
    return RectangleFamily(params)


@dataclass
class APReport:
    exponents: tuple
    value: float
    argmax: tuple
    table: np.ndarray = field(repr=False, default=None)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["exponents", "constant", "rect_axis1", "rect_axis2"])
        I, J = self.argmax
        w.writerow([";".join(_exp_str(p) for p in self.exponents), format(self.value, ".17g"),
                    f"{I.scale_exp}:{list(I.pos)}", f"{J.scale_exp}:{list(J.pos)}"])
        return buf.getvalue()


def _sup(table: np.ndarray, fam: RectangleFamily, exps) -> APReport:
    i, j = np.unravel_index(int(np.argmax(table)), table.shape)
    return APReport(tuple(exps), float(table[i, j]), fam.rectangle(i, j), table)


def ap_constant(w, p) -> APReport:
    """Bi-parameter A_p constant over all standard dyadic rectangles.

    ``p = 1`` uses ``<w> esssup w^-1``; ``p = INF`` uses the limiting
    ``<w> exp(<log w^-1>)`` form.
    """
    w = w if isinstance(w, Weight) else Weight(w)
    p = as_exponent(p)
    if p is not INF and p < 1:
        raise DomainError("p must be >= 1")
    v = w.values
    if v.ndim != 2:
        raise DomainError("ap_constant expects a two-parameter weight")
    fam = rectangle_family(w.w.params)
    avg = fam.averages(v)
    if p is INF:
        table = avg * np.exp(fam.averages(-np.log(v)))
    elif p == 1:
        table = avg * fam.maxima(1.0 / v)
    else:
        pp = float(conjugate(p))
        table = avg * fam.averages(v ** (1.0 - pp)) ** float(p - 1)
    return _sup(table, fam, (p,))


def multilinear_ap_constant(vec: WeightVector) -> APReport:
    """``sup_R <w^p>^(1/p) prod <w_j^(-p_j')>^(1/p_j')`` with the endpoint conventions."""
    fam = rectangle_family(vec.weights[0].w.params)
    p = vec.p
    wprod = vec.product()
    if p is INF:
        table = fam.maxima(wprod)
    else:
        table = fam.averages(wprod ** float(p)) ** float(1 / p)
    for wj, pj in zip(vec.weights, vec.exponents):
        if pj == 1:
            table = table / fam.minima(wj.values)
        else:
            q = conjugate(pj)
            table = table * fam.averages(wj.values ** (-float(q))) ** float(1 / q)
    return _sup(table, fam, vec.exponents)


def _as_values(f) -> np.ndarray:
    return f.values if isinstance(f, StepFunction) else np.asarray(f)


def strong_maximal(*fs: StepFunction) -> StepFunction:
    """Multilinear dyadic strong maximal function over standard rectangles."""
    if not fs:
        raise ConfigError("need at least one function")
    params = fs[0].params
    fam = rectangle_family(params)
    table = np.ones((fam.inc[0].shape[0], fam.inc[1].shape[0]))
    for f in fs:
        table = table * fam.averages(np.abs(f.values))
    i1, i2 = fam.level_index
    # max over the axis-2 cubes containing each axis-2 cell, then over axis 1
    b = table[:, i2].max(axis=1)
    out = b[i1, :].max(axis=0)
    return StepFunction(params, (1, 2), out)


def strong_maximal_bruteforce(*fs: StepFunction) -> StepFunction:
    """Reference implementation: every rectangle checked for every cell."""
    params = fs[0].params
    fam = rectangle_family(params)
    A1, A2 = fam.inc
    C1, C2 = A1.shape[1], A2.shape[1]
    out = np.zeros((C1, C2))
    absf = [np.abs(f.values) for f in fs]
    for i in range(A1.shape[0]):
        m1 = A1[i] > 0
        for j in range(A2.shape[0]):
            m2 = A2[j] > 0
            val = 1.0
            for a in absf:
                val *= a[np.ix_(m1, m2)].mean()
            sub = out[np.ix_(m1, m2)]
            out[np.ix_(m1, m2)] = np.maximum(sub, val)
    return StepFunction(params, (1, 2), out)


def weighted_norm(f: StepFunction, p, w) -> float:
    """``||f||_{L^p(w^p)} = ||f w||_{L^p}``."""
    wv = w.values if isinstance(w, (Weight, StepFunction)) else np.asarray(w)
    g = StepFunction(f.params, f.axes, f.values * wv)
    p = as_exponent(p)
    return g.norm(math.inf if p is INF else float(p))


def lp_norm(f: StepFunction, p, w=None) -> float:
    """``(integral |f|^p w)^(1/p)``; the measure is ``w dx``."""
    p = as_exponent(p)
    wf = None if w is None else (w.w if isinstance(w, Weight) else w)
    return f.norm(math.inf if p is INF else float(p), wf)


def _level_differences(grid: ShiftedGrid) -> list:
    """``D`` matrices by level: ``E_{s-1} - E_s`` for s = 1..S."""
    return [None] + [_expectation_matrix(grid, s - 1) - _expectation_matrix(grid, s)
                     for s in range(1, grid.S + 1)]


def _offset_square_sum(grid: ShiftedGrid, k: int, vals: np.ndarray, axis_pos: int,
                       virtual_levels: bool) -> list:
    """Per-level list of arrays ``Delta^k_I f`` summed in squares over cubes I.

    A cube ``I`` of level ``t`` collects the differences of its descendants at
    level ``t-k``.  Levels above the top are the whole domain (virtual cubes)
    so that every real difference is counted exactly once.
    """
    Ds = _level_differences(grid)
    top = grid.S + (k if virtual_levels else 0)
    pieces = []
    for t in range(1 + k, top + 1):
        dk = Ds[t - k]
        g = np.tensordot(dk, vals, axes=([1], [axis_pos]))
        g = np.moveaxis(g, 0, axis_pos)
        if t <= grid.S:
            for c in range(grid.count(t)):
                mask = grid.membership(t)[c]
                shape = [1] * vals.ndim
                shape[axis_pos] = -1
                pieces.append(g * mask.reshape(shape))
        else:
            pieces.append(g)
    return pieces


def square_function_norm(f: StepFunction, p, w=None, mode: str = "biparam", offsets=(0, 0),
                         grid: ProductGrid | None = None, virtual_levels: bool = True) -> float:
    """``|| (sum |Delta^{k1}_{I1} Delta^{k2}_{I2} f|^2)^(1/2) ||_{L^p(w)}`` and its one-axis variants."""
    if f.axes != (1, 2):
        raise DomainError("square functions act on two-parameter functions")
    params = f.params
    if grid is None:
        S = params.top
        grid = ProductGrid(enumerate_grid(params, (0,) * S, 1), enumerate_grid(params, (0,) * S, 2))
    k1, k2 = (int(k) for k in offsets)
    if k1 < 0 or k2 < 0:
        raise DomainError("offsets must be nonnegative")
    vals = f.values
    if mode == "biparam":
        total = np.zeros(vals.shape)
        for a in _offset_square_sum(grid.grid1, k1, vals, 0, virtual_levels):
            for b in _offset_square_sum(grid.grid2, k2, a, 1, virtual_levels):
                total += np.abs(b) ** 2
    elif mode == "axis1":
        total = sum(np.abs(a) ** 2 for a in _offset_square_sum(grid.grid1, k1, vals, 0, virtual_levels))
    elif mode == "axis2":
        total = sum(np.abs(b) ** 2 for b in _offset_square_sum(grid.grid2, k2, vals, 1, virtual_levels))
    else:
        raise ConfigError(f"unknown square-function mode {mode!r}")
    sq = StepFunction(params, (1, 2), np.sqrt(total))
    return lp_norm(sq, p, w)


@dataclass
class InterpolationResult:
    theta: float
    weights: WeightVector
    certificate: dict


def _blend(u: WeightVector, v: WeightVector, theta: float, r_exps) -> WeightVector:
    ws = [StepFunction(a.w.params, a.w.axes, a.values ** (1 - theta) * b.values ** theta)
          for a, b in zip(u.weights, v.weights)]
    return WeightVector(tuple(ws), tuple(r_exps))


def _blended_exponents(p_exps, s_exps, theta: Fraction) -> list:
    out = []
    for pj, sj in zip(p_exps, s_exps):
        inv = (1 - theta) * reciprocal(pj) + theta * reciprocal(sj)
        out.append(INF if inv == 0 else 1 / inv)
    return out


def interpolate_weights(u: WeightVector, v: WeightVector, r=None, ladder: int = 64) -> InterpolationResult:
    """Blend ``w_j = u_j^(1-theta) v_j^theta`` and certify the blended class.

    ``u`` carries exponents ``p`` and ``v`` exponents ``s``; the blend is
    measured in ``A_r`` with ``1/r_j = (1-theta)/p_j + theta/s_j``.  With a
    target ``r`` the relation is solved for ``theta`` (a common value in
    (0,1) must exist); otherwise ``theta`` is chosen on a ladder of
    ``ladder`` interior points to minimize the blended constant.  On a finite
    lattice every constant is finite, so the certificate reports the best
    theta together with the Hoelder bound ``[u]^(1-theta) [v]^theta``.
    """
    if len(u.weights) != len(v.weights):
        raise ConfigError("u and v must have the same length")
    cu = multilinear_ap_constant(u).value
    cv = multilinear_ap_constant(v).value
    if r is not None:
        thetas = set()
        for pj, sj, rj in zip(u.exponents, v.exponents, (as_exponent(x) for x in r)):
            a, b, c = reciprocal(pj), reciprocal(sj), reciprocal(rj)
            if a == b:
                if c != a:
                    raise InfeasibleConfiguration("exponent relation has no solution")
                continue
            thetas.add((a - c) / (a - b))
        if len(thetas) > 1:
            raise InfeasibleConfiguration(f"no common theta: {sorted(thetas)}")
        theta = thetas.pop() if thetas else Fraction(1, 2)
        if not 0 < theta < 1:
            raise InfeasibleConfiguration(f"theta = {theta} is not in (0, 1)")
        candidates = [theta]
    else:
        candidates = [Fraction(k, ladder + 1) for k in range(1, ladder + 1)]
    rows = []
    best = None
    for th in candidates:
        r_exps = _blended_exponents(u.exponents, v.exponents, th)
        blended = _blend(u, v, float(th), r_exps)
        c = multilinear_ap_constant(blended).value
        bound = cu ** (1 - float(th)) * cv ** float(th)
        rows.append((float(th), c, bound))
        if best is None or c < best[1]:
            best = (th, c, blended, r_exps, bound)
    th, c, blended, r_exps, bound = best
    cert = {
        "theta": float(th),
        "r": [_exp_str(x) for x in r_exps],
        "constant": c,
        "holder_bound": bound,
        "bound_holds": bool(c <= bound * (1 + 1e-12)),
        "u_constant": cu,
        "v_constant": cv,
        "ladder": rows,
        "note": "finite lattice: all constants are finite; theta is the best ladder value, not a feasibility verdict",
    }
    return InterpolationResult(float(th), blended, cert)
