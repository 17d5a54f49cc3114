"""Dyadic model operators: shifts, partial paraproducts and full paraproducts.

Every operator is stored per parameter as a list of *entries*.  An entry on
one axis fixes, for each of the ``m + 1`` slots, the one-parameter function
used in that slot (a cancellative Haar function ``h``, the normalized
indicator ``h0 = 1_I/|I|^(1/2)`` or the average ``bar = 1_I/|I|``), together
with the reference cube ``Q`` of the entry.  The coefficient of the pair
``(e1, e2)`` of axis-1 and axis-2 entries lives in a coefficient table that is
either dense (a matrix) or factored (``U1 @ U2.T``, used by the
representation engine where the product table is too large to materialize).

The form of an operator is

    <T(f_1..f_m), f_{m+1}> = sum_{e1,e2} c[e1,e2] prod_j <f_j, phi_j(e1) (x) phi_j(e2)>.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, DomainError
from .haar import StepFunction, _haar_vector
from .lattice import DN_mask, DyadicCube, LatticeParams, ProductGrid, ShiftedGrid
from .oscillation import carleson_sup

__all__ = [
    "FN",
    "AxisDictionary",
    "axis_dictionary",
    "AxisEntries",
    "ModelOperator",
    "ShiftOp",
    "PartialParaproductOp",
    "FullParaproductOp",
    "ValidationReport",
    "validate",
    "AverageResult",
    "grid_average",
    "per_cube_bound",
    "single_q_shift",
]

KINDS = ("h", "h0", "bar")


# -- one-parameter function dictionary ------------------------------------------------
class AxisDictionary:
    """Rows of one-parameter functions on one grid, created on demand.

    A key is ``(kind, level, index, eta)`` with ``index`` the cube's position
    in ``grid.cubes(level)``.
    """

    def __init__(self, grid: ShiftedGrid):
        self.grid = grid
        self._rows: list = []
        self._keys: list = []
        self._pos: dict = {}
        self._mat = None

    def row(self, kind: str, cube: DyadicCube, eta=None) -> int:
        if kind not in KINDS:
            raise ConfigError(f"unknown slot function {kind!r}")
        g = self.grid
        lev = g.level_of(cube)
        eta = tuple(int(e) for e in (eta if eta is not None else (0,) * g.n))
        if kind != "h":
            eta = (0,) * g.n
        elif not any(eta):
            raise DomainError("a cancellative slot needs a non-zero eta")
        key = (kind, lev, g.index(cube), eta)
        i = self._pos.get(key)
        if i is None:
            if kind == "h":
                v = _haar_vector(g, cube, eta, "h")
            elif kind == "h0":
                v = _haar_vector(g, cube, (0,) * g.n, "h")
            else:
                v = _haar_vector(g, cube, (0,) * g.n, "bar")
            i = len(self._rows)
            self._rows.append(v)
            self._keys.append(key)
            self._pos[key] = i
            self._mat = None
        return i

    def key(self, i: int) -> tuple:
        return self._keys[i]

    @property
    def matrix(self) -> np.ndarray:
        if self._mat is None or self._mat.shape[0] != len(self._rows):
            self._mat = np.array(self._rows) if self._rows else np.zeros((0, self.grid.params.cells(self.grid.axis)))
        return self._mat

    def __len__(self):
        return len(self._rows)


@lru_cache(maxsize=512)
def axis_dictionary(grid: ShiftedGrid) -> AxisDictionary:
    return AxisDictionary(grid)


def _cube_offsets(grid: ShiftedGrid) -> np.ndarray:
    return np.concatenate([[0], np.cumsum([grid.count(s) for s in range(grid.S + 1)])])


def _cube_id(grid: ShiftedGrid, cube: DyadicCube) -> int:
    return int(_cube_offsets(grid)[grid.level_of(cube)]) + grid.index(cube)


def _cube_from_id(grid: ShiftedGrid, cid: int) -> DyadicCube:
    off = _cube_offsets(grid)
    lev = int(np.searchsorted(off, cid, side="right") - 1)
    return grid.cubes(lev)[cid - int(off[lev])]


@lru_cache(maxsize=4096)
def _dn_ids(grid: ShiftedGrid, N: int) -> np.ndarray:
    """Boolean over global cube ids: is the cube in D(N)?"""
    out = np.concatenate([DN_mask(grid, s, N) for s in range(grid.S + 1)]).astype(bool)
    out.setflags(write=False)
    return out


@lru_cache(maxsize=512)
def _incidence(grid: ShiftedGrid):
    """``inc[c, Q0] = 1`` when cube ``c`` lies in ``Q0`` (global ids), and the measures of all cubes."""
    n = _ncubes(grid)
    off = _cube_offsets(grid)
    inc = np.zeros((n, n))
    vol = np.zeros(n)
    cv = grid.params.cell_volume(grid.axis)
    for lev in range(grid.S + 1):
        mem = grid.membership(lev)
        for i, c in enumerate(grid.cubes(lev)):
            cid = int(off[lev]) + i
            vol[cid] = mem[i].sum() * cv
            for t in range(lev, grid.S + 1):
                inc[cid, _cube_id(grid, grid.ancestor(c, t))] = 1.0
    inc.setflags(write=False)
    vol.setflags(write=False)
    return inc, vol


# -- per-axis entries -------------------------------------------------------------------
@dataclass
class AxisEntries:
    """Slot functions of every entry on one axis.

    ``rows[e, j]`` is the dictionary row of slot ``j`` (slot ``m`` is the
    output slot), ``levels[e, j]`` the level of that slot's cube and
    ``q[e]`` the global id of the entry's reference cube.
    """

    grid: ShiftedGrid
    rows: np.ndarray
    levels: np.ndarray
    q: np.ndarray
    kinds: tuple

    @property
    def size(self) -> int:
        return int(self.rows.shape[0])

    @property
    def slots(self) -> int:
        return int(self.rows.shape[1])

    @classmethod
    def build(cls, grid: ShiftedGrid, items: Iterable, kinds: Sequence[str]) -> "AxisEntries":
        """``items``: iterable of ``(Q, [(cube, eta), ...])`` with one pair per slot."""
        d = axis_dictionary(grid)
        kinds = tuple(kinds)
        rows, levels, qs = [], [], []
        for Q, slots in items:
            if len(slots) != len(kinds):
                raise ConfigError("every entry needs one cube per slot")
            rows.append([d.row(k, c, e) for k, (c, e) in zip(kinds, slots)])
            levels.append([grid.level_of(c) for c, _ in slots])
            qs.append(_cube_id(grid, Q))
        m1 = len(kinds)
        return cls(grid,
                   np.array(rows, dtype=np.int64).reshape(-1, m1),
                   np.array(levels, dtype=np.int64).reshape(-1, m1),
                   np.array(qs, dtype=np.int64), kinds)

    def functions(self, slot: int) -> np.ndarray:
        return axis_dictionary(self.grid).matrix[self.rows[:, slot]]

    def q_levels(self) -> np.ndarray:
        off = _cube_offsets(self.grid)
        return np.searchsorted(off, self.q, side="right") - 1

    def volumes(self) -> np.ndarray:
        """``|I_j|`` for every entry and slot (untruncated cubes)."""
        p = self.grid.params
        return (2.0 ** (self.levels - p.L)) ** self.grid.n

    def q_volumes(self) -> np.ndarray:
        p = self.grid.params
        return (2.0 ** (self.q_levels() - p.L)) ** self.grid.n

    def permuted(self, perm: Sequence[int]) -> "AxisEntries":
        perm = list(perm)
        return AxisEntries(self.grid, self.rows[:, perm], self.levels[:, perm], self.q.copy(),
                           tuple(self.kinds[i] for i in perm))

    def subset(self, idx) -> "AxisEntries":
        return AxisEntries(self.grid, self.rows[idx], self.levels[idx], self.q[idx], self.kinds)

    def to_list(self) -> list:
        d = axis_dictionary(self.grid)
        out = []
        for e in range(self.size):
            Q = _cube_from_id(self.grid, int(self.q[e]))
            slots = []
            for j in range(self.slots):
                kind, lev, idx, eta = d.key(int(self.rows[e, j]))
                slots.append({"kind": kind, "level": int(lev - self.grid.params.L),
                              "pos": [int(v) for v in self.grid.cubes(lev)[idx].pos], "eta": list(eta)})
            out.append({"Q": {"level": int(self.grid.level_of(Q) - self.grid.params.L),
                              "pos": [int(v) for v in Q.pos]}, "slots": slots})
        return out


# -- generic operator -------------------------------------------------------------------------
class ModelOperator:
    """Coefficients over pairs of axis entries; see the module docstring."""

    family = "model"

    def __init__(self, pgrid: ProductGrid, m: int, axes: Sequence[AxisEntries], coeffs=None, factors=None,
                 name: str = ""):
        self.pgrid = pgrid
        self.m = int(m)
        self.axes = tuple(axes)
        self.name = name or self.family
        if len(self.axes) != 2 or any(a.slots != self.m + 1 for a in self.axes):
            raise ConfigError("need two axis entry lists with m+1 slots each")
        if (coeffs is None) == (factors is None):
            raise ConfigError("give exactly one of a dense table or factors")
        n1, n2 = self.axes[0].size, self.axes[1].size
        if coeffs is not None:
            coeffs = np.asarray(coeffs, dtype=float)
            if coeffs.shape != (n1, n2):
                raise ConfigError(f"coefficient table must have shape {(n1, n2)}")
            self._dense, self._factors = coeffs, None
        else:
            U1, U2 = (np.asarray(u, dtype=float) for u in factors)
            U1, U2 = U1.reshape(n1, -1), U2.reshape(n2, -1)
            if U1.shape[1] != U2.shape[1]:
                raise ConfigError("factor ranks differ")
            self._dense, self._factors = None, (U1, U2)
        self._check_pattern()

    # subclasses override
    def _check_pattern(self):
        pass

    @property
    def params(self) -> LatticeParams:
        return self.pgrid.params

    @property
    def factored(self) -> bool:
        return self._factors is not None

    @property
    def coefficients(self) -> np.ndarray:
        if self._dense is not None:
            return self._dense
        U1, U2 = self._factors
        return U1 @ U2.T

    @property
    def factors(self):
        return self._factors

    def rank_one(self):
        """``(u1, u2)`` with ``c = u1 u2^T`` when the table is stored as a rank-one factorization."""
        if self._factors is not None and self._factors[0].shape[1] == 1:
            return self._factors[0][:, 0], self._factors[1][:, 0]
        return None

    def _like(self, axes, coeffs=None, factors=None, name=None):
        op = object.__new__(type(self))
        op.__dict__.update(self.__dict__)
        op.axes = tuple(axes)
        op.name = name or self.name
        if coeffs is not None:
            op._dense, op._factors = np.asarray(coeffs, dtype=float), None
        else:
            op._dense, op._factors = None, factors
        return op

    # -- evaluation -----------------------------------------------------------------------
    def _check_inputs(self, fs):
        for f in fs:
            if f.params != self.params or f.axes != (1, 2):
                raise DomainError("function lives on a different lattice")

    def _pairings(self, f: StepFunction, slot: int) -> np.ndarray:
        """``<f, phi_slot(e1) (x) phi_slot(e2)>`` for all entry pairs."""
        P1 = self.axes[0].functions(slot)
        P2 = self.axes[1].functions(slot)
        return (P1 @ f.values @ P2.T) * f.cell_volume

    def _cell_tensor(self, axis: int, weights: np.ndarray) -> np.ndarray:
        """``sum_e w[e] phi_out(e) (x) phi_1(e) (x) ... (x) phi_m(e)`` on cells."""
        ent = self.axes[axis - 1]
        mats = [ent.functions(self.m)] + [ent.functions(j) for j in range(self.m)]
        letters = "abcdefgh"[: self.m + 1]
        spec = ",".join(f"e{c}" for c in letters)
        return np.einsum(f"e,{spec}->{letters}", weights, *mats, optimize=True)

    def form(self, fs: Sequence[StepFunction]) -> float:
        """``<T(f_1..f_m), f_{m+1}>``; exact finite sum."""
        if len(fs) != self.m + 1:
            raise ConfigError(f"need {self.m + 1} functions")
        self._check_inputs(fs)
        if self.factored and self.axes[0].size * self.axes[1].size > 4_000_000:
            return self._form_by_cells(fs)
        acc = self.coefficients.copy()
        for j, f in enumerate(fs):
            acc *= self._pairings(f, j)
        return float(acc.sum())

    def _form_by_cells(self, fs) -> float:
        U1, U2 = self._factors
        vol = fs[0].cell_volume
        total = 0.0
        for r in range(U1.shape[1]):
            W1 = self._cell_tensor(1, U1[:, r])
            W2 = self._cell_tensor(2, U2[:, r])
            total += _contract(W1, W2, [f.values for f in fs], self.m) * vol ** (self.m + 1)
        return float(total)

    def apply(self, fs: Sequence[StepFunction]) -> StepFunction:
        if len(fs) != self.m:
            raise ConfigError(f"need {self.m} functions")
        self._check_inputs(fs)
        acc = self.coefficients.copy()
        for j, f in enumerate(fs):
            acc *= self._pairings(f, j)
        P1 = self.axes[0].functions(self.m)
        P2 = self.axes[1].functions(self.m)
        return StepFunction(self.params, (1, 2), P1.T @ acc @ P2)

    def adjoint(self, j1: int, j2: int) -> "ModelOperator":
        """Swap the output slot with slot ``j1`` on axis 1 and ``j2`` on axis 2 (0 = none)."""
        axes = []
        for j, ent in zip((j1, j2), self.axes):
            if not 0 <= j <= self.m:
                raise ConfigError(f"adjoint index must be in 0..{self.m}")
            perm = list(range(self.m + 1))
            if j:
                perm[j - 1], perm[self.m] = perm[self.m], perm[j - 1]
            axes.append(ent.permuted(perm))
        if self.factored:
            return self._like(axes, factors=self._factors, name=f"{self.name}^({j1},{j2})*")
        return self._like(axes, coeffs=self._dense, name=f"{self.name}^({j1},{j2})*")

    def scaled(self, c: float) -> "ModelOperator":
        if self.factored:
            U1, U2 = self._factors
            return self._like(self.axes, factors=(U1 * c, U2))
        return self._like(self.axes, coeffs=self._dense * c)

    def cell_terms(self, tol: float = 1e-15) -> list:
        """``[(c, A1, A2)]`` with ``A_i[x, y, z]`` cell tensors (volumes included) whose
        tensor-product sum has the same form as the operator.  Requires ``m = 2``."""
        if self.m != 2:
            raise ConfigError("cell tensors are implemented for m = 2")
        if self.factored:
            U1, U2 = self._factors
        else:
            U, s, Vt = np.linalg.svd(self._dense, full_matrices=False)
            keep = s > tol * (s[0] if s.size else 1.0)
            U1, U2 = U[:, keep] * s[keep], Vt[keep].T
        v1, v2 = self.params.cell_volume(1) ** 3, self.params.cell_volume(2) ** 3
        return [(1.0, self._cell_tensor(1, U1[:, r]) * v1, self._cell_tensor(2, U2[:, r]) * v2)
                for r in range(U1.shape[1])]

    def restricted(self, keep: np.ndarray) -> "ModelOperator":
        """A new operator with the coefficient table zeroed outside ``keep``."""
        return self._like(self.axes, coeffs=np.where(keep, self.coefficients, 0.0))

    # -- serialization --------------------------------------------------------------------
    def to_dict(self) -> dict:
        C = self.coefficients
        nz = np.argwhere(C != 0)
        return {
            "family": self.family,
            "name": self.name,
            "m": self.m,
            "kinds": [list(a.kinds) for a in self.axes],
            "entries": [a.to_list() for a in self.axes],
            "coefficients": [[int(i), int(j), float(C[i, j])] for i, j in nz],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def validate(self) -> "ValidationReport":
        raise NotImplementedError


def _contract(W1: np.ndarray, W2: np.ndarray, fvals: Sequence[np.ndarray], m: int) -> float:
    """``sum W1[x,y,..] W2[x',y',..] f_out[x,x'] f_1[y,y'] ...`` by successive contractions."""
    if m != 2:
        raise ConfigError("cell contraction is implemented for m = 2")
    f1, f2, f3 = fvals
    # W1[a,b,c] W2[x,y,z] f3[a,x] f1[b,y] f2[c,z]
    T = np.einsum("abc,ax->xbc", W1, f3)
    T = np.einsum("xbc,by->xyc", T, f1)
    T = np.einsum("xyc,cz->xyz", T, f2)
    return float(np.sum(T * W2))


# -- normalization helpers ----------------------------------------------------------------------
def _shift_normalizer(ent: AxisEntries, m: int) -> np.ndarray:
    """``|Q|^m / prod_j |I_j|^(1/2)`` per entry."""
    return ent.q_volumes() ** m / np.sqrt(np.prod(ent.volumes(), axis=1))


def _group_max(values: np.ndarray, groups: np.ndarray, ngroups: int, axis: int) -> np.ndarray:
    """Maximum of ``values`` along ``axis`` within groups of entry indices."""
    shape = list(values.shape)
    shape[axis] = ngroups
    out = np.zeros(shape)
    if values.size == 0:
        return out
    order = np.argsort(groups, kind="stable")
    g = groups[order]
    starts = np.flatnonzero(np.r_[True, g[1:] != g[:-1]])
    red = np.maximum.reduceat(np.take(values, order, axis=axis), starts, axis=axis)
    idx = [slice(None)] * values.ndim
    idx[axis] = g[starts]
    out[tuple(idx)] = red
    return out


def _ncubes(grid: ShiftedGrid) -> int:
    return int(_cube_offsets(grid)[-1])


@dataclass
class ValidationReport:
    """Outcome of the normalization checks.

    ``ratio`` is the largest normalized coefficient (valid iff ``<= 1 + tol``);
    ``tail`` maps ``N`` to the sup of the relevant profile outside ``D(N)``.
    """

    family: str
    valid: bool
    ratio: float
    witness: dict | None
    tail: dict
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"family": self.family, "valid": self.valid, "ratio": self.ratio, "witness": self.witness,
                "tail": {str(k): v for k, v in self.tail.items()}, "details": self.details}


TOL = 1e-12


def _default_ladder(params: LatticeParams) -> list:
    return list(range(0, params.M + params.L + 2))


# -- shifts ----------------------------------------------------------------------------------------------
class ShiftOp(ModelOperator):
    """Bi-parameter shift: each axis uses ``h``/``h0`` slots with at least two ``h`` slots."""

    family = "shift"

    def _check_pattern(self):
        for a in self.axes:
            if any(k not in ("h", "h0") for k in a.kinds):
                raise ConfigError("shift slots carry h or h0 functions")
            if sum(k == "h" for k in a.kinds) < 2:
                raise ConfigError("a shift needs two cancellative slots per parameter")
            if a.size and np.any(a.levels > a.q_levels()[:, None]):
                raise ConfigError("every slot cube must lie below its reference cube")

    def complexities(self) -> np.ndarray:
        """``k_j^i = level(Q^i) - level(I_j^i)`` per axis, entry and slot."""
        return [a.q_levels()[:, None] - a.levels for a in self.axes]

    def ratio_matrix(self) -> np.ndarray:
        nu1 = _shift_normalizer(self.axes[0], self.m)
        nu2 = _shift_normalizer(self.axes[1], self.m)
        return np.abs(self.coefficients) * nu1[:, None] * nu2[None, :]

    def profile(self) -> np.ndarray:
        """``F(Q)`` as a matrix over global cube ids of the two axes."""
        g1, g2 = self.pgrid.grid1, self.pgrid.grid2
        r1 = self.rank_one()
        if r1 is not None:
            a = _group_max(np.abs(r1[0]) * _shift_normalizer(self.axes[0], self.m), self.axes[0].q, _ncubes(g1), 0)
            b = _group_max(np.abs(r1[1]) * _shift_normalizer(self.axes[1], self.m), self.axes[1].q, _ncubes(g2), 0)
            return np.outer(a, b)
        R = self.ratio_matrix()
        F = _group_max(R, self.axes[0].q, _ncubes(g1), 0)
        return _group_max(F, self.axes[1].q, _ncubes(g2), 1)

    def validate(self, ladder=None) -> ValidationReport:
        F = self.profile()
        ladder = _default_ladder(self.params) if ladder is None else list(ladder)
        tail = {N: _outside_max(F, self.pgrid, N) for N in ladder}
        ratio = float(F.max()) if F.size else 0.0
        wit = None
        if F.size and ratio > 0:
            i, j = np.unravel_index(int(np.argmax(F)), F.shape)
            wit = {"Q": [_label(self.pgrid.grid1, i), _label(self.pgrid.grid2, j)], "ratio": ratio}
        return ValidationReport(self.family, ratio <= 1 + TOL, ratio, wit, tail)


def _label(grid: ShiftedGrid, cid: int) -> dict:
    c = _cube_from_id(grid, int(cid))
    return {"level": grid.level_of(c) - grid.params.L, "pos": [int(v) for v in c.pos]}


def _outside_max(F: np.ndarray, pg: ProductGrid, N: int) -> float:
    in1 = _dn_ids(pg.grid1, N)
    in2 = _dn_ids(pg.grid2, N)
    a = F[~in1, :].max() if (~in1).any() and F.size else 0.0
    b = F[:, ~in2].max() if (~in2).any() and F.size else 0.0
    return float(max(a, b, 0.0))


# -- partial paraproducts -------------------------------------------------------------------------------
class PartialParaproductOp(ModelOperator):
    """Shift structure on ``haar_axis``; on the other axis one slot carries
    ``h_S`` and the others ``1_S/|S|`` for a single cube ``S`` per entry."""

    family = "partial"

    def __init__(self, pgrid, m, axes, coeffs=None, factors=None, haar_axis: int = 1, name: str = ""):
        if haar_axis not in (1, 2):
            raise ConfigError("haar_axis must be 1 or 2")
        self.haar_axis = haar_axis
        super().__init__(pgrid, m, axes, coeffs, factors, name)

    def _check_pattern(self):
        h = self.axes[self.haar_axis - 1]
        p = self.axes[2 - self.haar_axis]
        if any(k not in ("h", "h0") for k in h.kinds) or sum(k == "h" for k in h.kinds) < 2:
            raise ConfigError("the Haar parameter needs h/h0 slots with two cancellative ones")
        if sorted(p.kinds).count("h") != 1 or any(k not in ("h", "bar") for k in p.kinds):
            raise ConfigError("the paraproduct parameter needs exactly one h slot, the rest averages")
        if p.size and np.any(p.levels != p.levels[:, :1]):
            raise ConfigError("paraproduct slots must share one cube")

    def _bmo_rows(self, C2: np.ndarray) -> np.ndarray:
        """Per Haar-axis entry: ``max_{Q0} (|Q0|^-1 sum_{S in Q0} |a|^2)^(1/2)``."""
        p = self.axes[2 - self.haar_axis]
        g = p.grid
        inc, vol0 = _containment(g, p.q)
        if self.haar_axis == 1:
            acc = C2 @ inc
        else:
            acc = (inc.T @ C2).T
        return np.sqrt((acc / vol0[None, :]).max(axis=1)) if acc.size else np.zeros(acc.shape[0])

    def ratios(self, keep_para: np.ndarray | None = None) -> np.ndarray:
        """Normalized BMO size per Haar-axis entry; ``keep_para`` masks paraproduct-axis entries."""
        h = self.axes[self.haar_axis - 1]
        p = self.axes[2 - self.haar_axis]
        nu = _shift_normalizer(h, self.m)
        r1 = self.rank_one()
        if r1 is not None:
            uh, up = (r1[0], r1[1]) if self.haar_axis == 1 else (r1[1], r1[0])
            w = up ** 2 if keep_para is None else np.where(keep_para, up ** 2, 0.0)
            inc, vol0 = _containment(p.grid, p.q)
            best = float((w @ inc / vol0).max()) if w.size else 0.0
            return np.abs(uh) * math.sqrt(best) * nu
        C2 = self.coefficients ** 2
        if keep_para is not None:
            keep = keep_para[None, :] if self.haar_axis == 1 else keep_para[:, None]
            C2 = np.where(keep, C2, 0.0)
        return self._bmo_rows(C2) * nu

    def validate(self, ladder=None) -> ValidationReport:
        h = self.axes[self.haar_axis - 1]
        p = self.axes[2 - self.haar_axis]
        r = self.ratios()
        gh = h.grid
        F1 = _group_max(r, h.q, _ncubes(gh), 0)
        ladder = _default_ladder(self.params) if ladder is None else list(ladder)
        tail, f1t, f2t = {}, {}, {}
        for N in ladder:
            inh = _dn_ids(gh, N)
            outside = F1[~inh].max() if (~inh).any() and F1.size else 0.0
            keep_p = ~_dn_ids(p.grid, N)[p.q]
            f2 = float(self.ratios(keep_p).max()) if r.size else 0.0
            f1t[N], f2t[N] = float(outside), f2
            tail[N] = float(outside) + f2
        ratio = float(r.max()) if r.size else 0.0
        wit = None
        if r.size and ratio > 0:
            e = int(np.argmax(r))
            wit = {"Q": _label(gh, int(h.q[e])), "entry": e, "ratio": ratio}
        return ValidationReport(self.family, ratio <= 1 + TOL, ratio, wit, tail,
                                {"F_haar_outside": f1t, "F_para_N": f2t})


def _containment(grid: ShiftedGrid, ids: np.ndarray):
    """Rows of the incidence matrix for the given cube ids, and all cube measures."""
    inc, vol = _incidence(grid)
    return inc[np.asarray(ids, dtype=np.int64)], vol


# -- full paraproducts ----------------------------------------------------------------------------------
class FullParaproductOp(ModelOperator):
    """``b_R`` over rectangles; one ``h`` slot per parameter, averages elsewhere."""

    family = "full"

    def _check_pattern(self):
        for a in self.axes:
            if list(a.kinds).count("h") != 1 or any(k not in ("h", "bar") for k in a.kinds):
                raise ConfigError("a full paraproduct needs exactly one h slot per parameter")
            if a.size and np.any(a.levels != a.levels[:, :1]):
                raise ConfigError("all slots of a paraproduct entry share one cube")

    def carleson_table(self, outside: tuple | None = None) -> dict:
        """``sum |b|^2`` per rectangle, as level-pair blocks in cube order.

        ``outside = (k1, k2)`` keeps only entry pairs with ``k1[e1] or k2[e2]``.
        """
        g1, g2 = self.pgrid.grid1, self.pgrid.grid2
        q1, q2 = self.axes[0].q, self.axes[1].q
        n1, n2 = _ncubes(g1), _ncubes(g2)
        r1 = self.rank_one()
        if r1 is not None:
            a, b = r1[0] ** 2, r1[1] ** 2
            B = np.outer(np.bincount(q1, a, n1), np.bincount(q2, b, n2))
            if outside is not None:
                k1, k2 = outside
                B = B - np.outer(np.bincount(q1, np.where(k1, 0.0, a), n1), np.bincount(q2, np.where(k2, 0.0, b), n2))
                B = np.maximum(B, 0.0)
        else:
            C2 = self.coefficients ** 2
            if outside is not None:
                C2 = np.where(outside[0][:, None] | outside[1][None, :], C2, 0.0)
            B = _group_max_sum(C2, q1, n1, q2, n2)
        o1, o2 = _cube_offsets(g1), _cube_offsets(g2)
        table = {}
        for t1 in range(g1.S + 1):
            for t2 in range(g2.S + 1):
                blk = B[o1[t1]:o1[t1 + 1], o2[t2]:o2[t2 + 1]]
                if blk.any():
                    table[(t1, t2)] = blk
        return table

    def carleson_constant(self, keep=None) -> tuple:
        table = self.carleson_table(keep)
        if not table:
            return 0.0, None
        res = carleson_sup(self.pgrid, table)
        return res.value, res.witness

    def validate(self, ladder=None) -> ValidationReport:
        ratio, wit = self.carleson_constant()
        ladder = _default_ladder(self.params) if ladder is None else list(ladder)
        tail = {}
        for N in ladder:
            k1 = ~_dn_ids(self.pgrid.grid1, N)[self.axes[0].q]
            k2 = ~_dn_ids(self.pgrid.grid2, N)[self.axes[1].q]
            tail[N] = float(self.carleson_constant((k1, k2))[0])
        return ValidationReport(self.family, ratio <= 1 + TOL, float(ratio), wit, tail)


def _group_max_sum(C2, q1, n1, q2, n2) -> np.ndarray:
    """Sum of ``C2`` over entries grouped by cube id on both axes."""
    out = np.zeros((n1, n2))
    if C2.size:
        A = np.zeros((n1, C2.shape[0]))
        A[q1, np.arange(C2.shape[0])] = 1.0
        B = np.zeros((C2.shape[1], n2))
        B[np.arange(C2.shape[1]), q2] = 1.0
        out = A @ C2 @ B
    return out


def validate(op: ModelOperator, ladder=None) -> ValidationReport:
    return op.validate(ladder)


# -- per-cube bound ------------------------------------------------------------------------------------------
def per_cube_bound(op: ShiftOp, fs: Sequence[StepFunction]) -> dict:
    """Check ``|A_Q(f)| <= F(Q) prod_j <|f_j|>_Q 1_Q`` for every reference rectangle ``Q``.

    Returns the worst ratio and whether any mass leaks outside ``Q``.
    """
    F = op.profile()
    g1, g2 = op.pgrid.grid1, op.pgrid.grid2
    worst, leak = 0.0, 0.0
    for q1 in np.unique(op.axes[0].q):
        for q2 in np.unique(op.axes[1].q):
            keep = (op.axes[0].q == q1)[:, None] & (op.axes[1].q == q2)[None, :]
            if not keep.any():
                continue
            A = op.restricted(keep).apply(fs).values
            Q1, Q2 = _cube_from_id(g1, int(q1)), _cube_from_id(g2, int(q2))
            m1, m2 = g1.indicator(Q1).astype(float), g2.indicator(Q2).astype(float)
            mask = np.outer(m1, m2)
            avg = 1.0
            for f in fs:
                avg *= float((np.abs(f.values) * mask).sum() / mask.sum())
            bound = F[q1, q2] * avg
            inside = np.abs(A)[mask > 0].max()
            leak = max(leak, float(np.abs(A)[mask == 0].max()) if (mask == 0).any() else 0.0)
            if bound > 0:
                worst = max(worst, inside / bound)
            elif inside > 0:
                worst = math.inf
    return {"ratio": float(worst), "outside": float(leak)}


def single_q_shift(pgrid: ProductGrid, Q: Sequence[DyadicCube], k: Sequence[Sequence[int]],
                   kinds: Sequence[Sequence[str]], coeff: Callable | float = 1.0, m: int = 2,
                   rng: np.random.Generator | None = None) -> ShiftOp:
    """All entries of complexity ``k[i][j]`` below one rectangle ``Q``.

    ``coeff`` may be a number (multiplying the saturating normalization
    ``prod |I_j|^(1/2) / |Q|^m``) or a callable ``(e1, e2) -> value``.  With
    ``rng`` the coefficients are uniform in ``[-1, 1]`` times the
    normalization, so that ``F(Q) <= 1``.
    """
    axes = []
    for i, grid in enumerate((pgrid.grid1, pgrid.grid2)):
        Qi = Q[i]
        lq = grid.level_of(Qi)
        per_slot = []
        for j in range(m + 1):
            lev = lq - k[i][j]
            if lev < 0 or (kinds[i][j] == "h" and lev < 1):
                raise DomainError("complexity too large for the lattice")
            cubes = [c for c in grid.cubes(lev) if grid.contains(Qi, c)]
            etas = [e for e in itertools.product((0, 1), repeat=grid.n) if any(e)] if kinds[i][j] == "h" \
                else [(0,) * grid.n]
            per_slot.append([(c, e) for c in cubes for e in etas])
        items = [(Qi, list(combo)) for combo in itertools.product(*per_slot)]
        axes.append(AxisEntries.build(grid, items, kinds[i]))
    nu = [_shift_normalizer(a, m) for a in axes]
    base = 1.0 / np.outer(nu[0], nu[1])
    if rng is not None:
        C = rng.uniform(-1, 1, size=base.shape) * base
    elif callable(coeff):
        C = np.array([[coeff(a, b) for b in range(axes[1].size)] for a in range(axes[0].size)])
    else:
        C = float(coeff) * base
    return ShiftOp(pgrid, m, axes, coeffs=C)


# -- averaging over grids -------------------------------------------------------------------------------------
@dataclass
class AverageResult:
    value: float
    stderr: float
    mode: str
    samples: int
    seed: int | None

    def to_dict(self) -> dict:
        return {"value": self.value, "stderr": self.stderr, "mode": self.mode, "samples": self.samples,
                "seed": self.seed}


def grid_average(builder: Callable, omegas: Sequence, mode: str = "exact", samples: int = 1000,
                 seed: int = 0, budget: int = 1 << 16) -> AverageResult:
    """``E_omega builder(omega)`` over the listed ensemble.

    ``exact`` enumerates every member (uniform weights); ``montecarlo`` draws
    ``samples`` members with replacement and reports the standard error.
    """
    omegas = list(omegas)
    if not omegas:
        raise ConfigError("empty grid ensemble")
    if mode == "exact":
        if len(omegas) > budget:
            raise ConfigError(f"ensemble of {len(omegas)} grids exceeds the exact budget {budget}")
        vals = [float(builder(w)) for w in omegas]
        return AverageResult(math.fsum(vals) / len(vals), 0.0, "exact", len(vals), None)
    if mode == "montecarlo":
        rng = np.random.default_rng(seed)
        pick = rng.integers(len(omegas), size=int(samples))
        cache: dict = {}
        vals = []
        for i in pick:
            i = int(i)
            if i not in cache:
                cache[i] = float(builder(omegas[i]))
            vals.append(cache[i])
        v = np.array(vals)
        se = float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else math.inf
        return AverageResult(float(v.mean()), se, "montecarlo", len(v), int(seed))
    raise ConfigError(f"unknown averaging mode {mode!r}")


FN = "F_N"
