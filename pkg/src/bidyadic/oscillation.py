"""BMO-type norms, CMO defects, Carleson sequences and the H^1-BMO pairing.

Rectangle-indexed data is stored per level pair: ``table[(t1, t2)]`` is an
array of shape ``(count1(t1), count2(t2))`` over the cubes of a product grid,
in the grid's enumeration order.

The product-BMO and Carleson suprema run over a finite family of open sets:
all single dyadic rectangles, all unions of at most four rectangles sharing a
scale pair, and the whole domain.  :func:`carleson_sup` computes this
supremum exactly without enumerating unions.  If no rectangle of the sequence
straddles two parts of a union, the union's ratio is a weighted mean of the
parts' ratios.  With one-dimensional factors the only connected unions of at
most four blocks are single rectangles and three-quarters of a sibling quad,
so those (plus the domain) suffice.  :func:`carleson_sup_bruteforce`
enumerates the family directly for cross-checking on small lattices.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Mapping

import numpy as np

from .errors import ConfigError, DomainError
from .haar import StepFunction, axis_basis
from .lattice import DyadicCube, LatticeParams, ProductGrid, ShiftedGrid, enumerate_grid, in_DN

__all__ = [
    "standard_grid",
    "standard_product_grid",
    "CarlesonFamily",
    "CarlesonResult",
    "carleson_sup",
    "carleson_sup_bruteforce",
    "cube_carleson_sup",
    "haar_square_table",
    "bmo_norm",
    "cmo_defect",
    "defect_curve",
    "carleson_check",
    "carleson_embed",
    "h1_bmo_pair",
]


def standard_grid(params: LatticeParams, axis: int) -> ShiftedGrid:
    return enumerate_grid(params, (0,) * params.top, axis)


def standard_product_grid(params: LatticeParams) -> ProductGrid:
    return ProductGrid(standard_grid(params, 1), standard_grid(params, 2))


# -- tree helpers --------------------------------------------------------------
class _AxisTree:
    """Parent maps, volumes and children for one grid, cached per grid."""

    def __init__(self, grid: ShiftedGrid):
        self.grid = grid
        S = grid.S
        self.S = S
        self.vol = [grid.membership(s).sum(axis=1) * grid.params.cell_volume(grid.axis) for s in range(S + 1)]
        self.cell_index = [np.argmax(grid.membership(s), axis=0) for s in range(S + 1)]
        # up[s]: index at level s+1 of the parent of every level-s cube
        self.up = []
        for s in range(S):
            first = np.argmax(grid.membership(s), axis=1)
            self.up.append(self.cell_index[s + 1][first])
        self.lift = [self._lift_matrix(s) for s in range(S)]

    def _lift_matrix(self, s: int) -> np.ndarray:
        m = np.zeros((self.grid.count(s + 1), self.grid.count(s)))
        m[self.up[s], np.arange(self.grid.count(s))] = 1.0
        return m

    def children(self, s: int) -> list:
        """For each level-``s`` cube the indices of its level ``s-1`` children."""
        out = [[] for _ in range(self.grid.count(s))]
        for i, p in enumerate(self.up[s - 1]):
            out[p].append(i)
        return out


@lru_cache(maxsize=256)
def _tree(grid: ShiftedGrid) -> _AxisTree:
    return _AxisTree(grid)


def _cumulative(pg: ProductGrid, table: Mapping) -> dict:
    """``A[s1, s2]``: per (s1, s2) block, the sum of entries of rectangles inside it."""
    t1, t2 = _tree(pg.grid1), _tree(pg.grid2)
    S1, S2 = t1.S, t2.S
    A = {}
    for s1 in range(S1 + 1):
        for s2 in range(S2 + 1):
            acc = np.zeros((pg.grid1.count(s1), pg.grid2.count(s2)))
            if (s1, s2) in table:
                acc = acc + np.asarray(table[(s1, s2)], dtype=float)
            if s1 > 0:
                acc = acc + t1.lift[s1 - 1] @ A[(s1 - 1, s2)]
            if s2 > 0:
                acc = acc + A[(s1, s2 - 1)] @ t2.lift[s2 - 1].T
            if s1 > 0 and s2 > 0:
                acc = acc - t1.lift[s1 - 1] @ A[(s1 - 1, s2 - 1)] @ t2.lift[s2 - 1].T
            A[(s1, s2)] = acc
    return A


@dataclass
class CarlesonResult:
    value: float
    witness: dict

    def __float__(self):
        return self.value


def _cube_label(grid: ShiftedGrid, level: int, idx: int) -> list:
    return [level - grid.params.L, list(grid.positions(level)[idx])]


def carleson_sup(pg: ProductGrid, table: Mapping, singles_only: bool = False) -> CarlesonResult:
    """``max_U |U|^-1 sum_{R in U} lambda_R`` over the default open-set family."""
    t1, t2 = _tree(pg.grid1), _tree(pg.grid2)
    A = _cumulative(pg, table)
    best = (-math.inf, None)
    total = A[(t1.S, t2.S)].sum()
    dom = t1.vol[t1.S].sum() * t2.vol[t2.S].sum()
    best = (total / dom, {"kind": "domain"})
    for (s1, s2), acc in A.items():
        area = np.outer(t1.vol[s1], t2.vol[s2])
        r = acc / area
        i, j = np.unravel_index(int(np.argmax(r)), r.shape)
        if r[i, j] > best[0]:
            best = (float(r[i, j]), {"kind": "rectangle", "rect": [_cube_label(pg.grid1, s1, i),
                                                                  _cube_label(pg.grid2, s2, j)]})
    if not singles_only and pg.grid1.n == 1 and pg.grid2.n == 1:
        for s1 in range(t1.S):
            ch1 = t1.children(s1 + 1)
            for s2 in range(t2.S):
                ch2 = t2.children(s2 + 1)
                blk = A[(s1, s2)]
                ar = np.outer(t1.vol[s1], t2.vol[s2])
                # rectangles spanning both axis-1 halves (resp. axis-2 halves)
                X = A[(s1 + 1, s2)] - t1.lift[s1] @ blk
                Y = A[(s1, s2 + 1)] - blk @ t2.lift[s2].T
                for q1, c1 in enumerate(ch1):
                    if len(c1) != 2:
                        continue
                    for q2, c2 in enumerate(ch2):
                        if len(c2) != 2:
                            continue
                        quad = blk[np.ix_(c1, c2)]
                        qa = ar[np.ix_(c1, c2)]
                        for a in range(2):
                            for b in range(2):
                                s = quad.sum() - quad[a, b] + X[q1, c2[1 - b]] + Y[c1[1 - a], q2]
                                v = s / (qa.sum() - qa[a, b])
                                if v > best[0]:
                                    best = (float(v), {"kind": "three_quarter_quad",
                                                       "quad": [_cube_label(pg.grid1, s1 + 1, q1),
                                                                _cube_label(pg.grid2, s2 + 1, q2)],
                                                       "missing": [_cube_label(pg.grid1, s1, c1[a]),
                                                                   _cube_label(pg.grid2, s2, c2[b])]})
    return CarlesonResult(float(best[0]), best[1])


def _rect_masks(pg: ProductGrid):
    """Cell masks (flat bool) and keys of every rectangle of the product grid."""
    g1, g2 = pg.grid1, pg.grid2
    keys, masks = [], []
    for s1 in range(g1.S + 1):
        M1 = g1.membership(s1) > 0
        for s2 in range(g2.S + 1):
            M2 = g2.membership(s2) > 0
            for i in range(M1.shape[0]):
                for j in range(M2.shape[0]):
                    keys.append((s1, i, s2, j))
                    masks.append(np.outer(M1[i], M2[j]).ravel())
    return keys, np.array(masks)


def carleson_sup_bruteforce(pg: ProductGrid, table: Mapping, max_blocks: int = 4,
                            max_unions: int = 200_000) -> float:
    """Enumerate unions of up to ``max_blocks`` same-scale rectangles directly.

    Scale pairs whose union count exceeds ``max_unions`` are skipped; the
    result is then a lower bound for the family supremum.
    """
    keys, masks = _rect_masks(pg)
    lam = np.array([np.asarray(table.get((k[0], k[2]), np.zeros((pg.grid1.count(k[0]), pg.grid2.count(k[2])))))[k[1], k[3]]
                    for k in keys], dtype=float)
    cellvol = pg.params.cell_volume(1) * pg.params.cell_volume(2)
    nz = lam != 0
    lam_nz, masks_nz = lam[nz], masks[nz]
    best = lam.sum() / (masks.shape[1] * cellvol)
    by_pair = {}
    for k, m in zip(keys, masks):
        by_pair.setdefault((k[0], k[2]), []).append(m)
    for pair, ms in by_pair.items():
        ms = np.array(ms)
        for size in range(1, max_blocks + 1):
            if math.comb(len(ms), size) > max_unions:
                break
            for combo in itertools.combinations(range(len(ms)), size):
                U = ms[list(combo)].any(axis=0)
                inside = ~(masks_nz & ~U).any(axis=1)
                v = lam_nz[inside].sum() / (U.sum() * cellvol)
                best = max(best, v)
    return float(best)


def cube_carleson_sup(grid: ShiftedGrid, table: Mapping) -> CarlesonResult:
    """One-parameter ``max_Q |Q|^-1 sum_{I in Q} lambda_I`` (``table[level]`` arrays)."""
    t = _tree(grid)
    best = (-math.inf, None)
    acc = None
    for s in range(t.S + 1):
        cur = np.zeros(grid.count(s))
        if s in table:
            cur = cur + np.asarray(table[s], dtype=float)
        if acc is not None:
            cur = cur + t.lift[s - 1] @ acc
        acc = cur
        r = cur / t.vol[s]
        i = int(np.argmax(r))
        if r[i] > best[0]:
            best = (float(r[i]), {"cube": _cube_label(grid, s, i)})
    return CarlesonResult(best[0], best[1])


# -- Haar coefficient tables ------------------------------------------------------
def _basis_rows(grid: ShiftedGrid):
    b = axis_basis(grid)
    rows = [(grid.level_of(h.cube), grid.index(h.cube)) for h in b.indices]
    return b, rows


def _signed_averages(basis) -> tuple:
    """Rows ``sign / #cells`` with ``<b, h_I> = |I|^(1/2) * (row . b)``.

    Every entry is a power of two, so constants cancel exactly.
    """
    sign = np.sign(basis.H)
    cnt = (basis.H != 0).sum(axis=1)
    return sign / cnt[:, None], cnt * basis.vol


def haar_square_table(b: StepFunction, pg: ProductGrid) -> dict:
    """``sum_eta |<b, h_R^eta>|^2`` for every rectangle, per level pair."""
    if b.axes != (1, 2):
        raise DomainError("product coefficients need a two-parameter function")
    b1, rows1 = _basis_rows(pg.grid1)
    b2, rows2 = _basis_rows(pg.grid2)
    S1, v1 = _signed_averages(b1)
    S2, v2 = _signed_averages(b2)
    C = (S1 @ b.values @ S2.T) ** 2 * np.outer(v1, v2)
    out = {}
    for (l1, i1), row in zip(rows1, np.abs(C)):
        for (l2, i2), v in zip(rows2, row):
            key = (l1, l2)
            if key not in out:
                out[key] = np.zeros((pg.grid1.count(l1), pg.grid2.count(l2)))
            out[key][i1, i2] += v
    return out


def _oscillation_one(vals: np.ndarray, grid: ShiftedGrid) -> float:
    best = 0.0
    for s in range(grid.S + 1):
        M = grid.membership(s)
        cnt = M.sum(axis=1)
        avg = (M @ vals) / cnt
        dev = np.abs(vals - avg[_tree(grid).cell_index[s]])
        best = max(best, float(((M @ dev) / cnt).max()))
    return best


def _oscillation_rect(vals: np.ndarray, pg: ProductGrid) -> float:
    t1, t2 = _tree(pg.grid1), _tree(pg.grid2)
    best = 0.0
    for s1 in range(t1.S + 1):
        M1 = pg.grid1.membership(s1)
        c1 = M1.sum(axis=1)
        for s2 in range(t2.S + 1):
            M2 = pg.grid2.membership(s2)
            cnt = np.outer(c1, M2.sum(axis=1))
            avg = (M1 @ vals @ M2.T) / cnt
            dev = np.abs(vals - avg[np.ix_(t1.cell_index[s1], t2.cell_index[s2])])
            best = max(best, float(((M1 @ dev @ M2.T) / cnt).max()))
    return best


def _parse_flavor(flavor):
    if isinstance(flavor, tuple):
        name, axis = flavor
    else:
        name, axis = flavor, None
    if name not in ("oneparam", "littlebmo", "productBMO"):
        raise ConfigError(f"unknown BMO flavor {flavor!r}")
    return name, axis


def bmo_norm(b: StepFunction, flavor="productBMO", grid=None, singles_only: bool = False) -> float:
    """Dyadic BMO norm of ``b``.

    ``flavor`` is ``("oneparam", axis)``, ``"littlebmo"`` or ``"productBMO"``.
    A one-parameter flavor applied to a two-parameter function takes the
    supremum over all slices along the other axis.
    """
    name, axis = _parse_flavor(flavor)
    params = b.params
    if name == "oneparam":
        axis = axis or (b.axes[0] if len(b.axes) == 1 else 1)
        g = grid if isinstance(grid, ShiftedGrid) else (grid.grid(axis) if grid is not None else standard_grid(params, axis))
        if b.axes == (axis,):
            return _oscillation_one(b.values, g)
        if b.axes != (1, 2):
            raise DomainError("function does not live on the requested axis")
        vals = b.values if axis == 1 else b.values.T
        return max(_oscillation_one(vals[:, j], g) for j in range(vals.shape[1]))
    pg = grid if grid is not None else standard_product_grid(params)
    if b.axes != (1, 2):
        raise DomainError("bi-parameter flavors need a two-parameter function")
    if name == "littlebmo":
        return _oscillation_rect(b.values, pg)
    return math.sqrt(max(carleson_sup(pg, haar_square_table(b, pg), singles_only).value, 0.0))


def _perp_values(b: StepFunction, grid, N: int) -> np.ndarray:
    """Remove every basis term whose cancellative factors all lie in D(N)."""
    def keep(basis):
        return np.concatenate([[True], [in_DN(h.cube, N, basis.grid) for h in basis.indices]])

    if b.axes == (1, 2):
        pg = grid if grid is not None else standard_product_grid(b.params)
        B1, B2 = axis_basis(pg.grid1), axis_basis(pg.grid2)
        k1, k2 = keep(B1), keep(B2)
        C = B1.B[k1] @ b.values @ B2.B[k2].T * (B1.vol * B2.vol)
        return b.values - B1.B[k1].T @ C @ B2.B[k2]
    g = grid if isinstance(grid, ShiftedGrid) else standard_grid(b.params, b.axes[0])
    B = axis_basis(g)
    k = keep(B)
    return b.values - B.B[k].T @ (B.B[k] @ b.values * B.vol)


def cmo_defect(b: StepFunction, N: int, flavor="productBMO", grid=None) -> float:
    """Flavor norm of the part of ``b`` not carried by D(N) Haar terms.

    The mean direction is treated as part of D(N) in every parameter, so
    the defect of a function whose cancellative terms all sit in D(N) is 0.
    """
    perp = StepFunction(b.params, b.axes, _perp_values(b, grid, N))
    return bmo_norm(perp, flavor, grid)


def defect_curve(b: StepFunction, Ns, flavor="productBMO", grid=None) -> list:
    return [(int(N), cmo_defect(b, N, flavor, grid)) for N in Ns]


# -- Carleson embedding ------------------------------------------------------------
@dataclass
class CarlesonFamily:
    """Nonnegative numbers on the rectangles of ``grid`` (per level pair)."""

    grid: ProductGrid
    table: dict

    def __post_init__(self):
        for key, arr in self.table.items():
            arr = np.asarray(arr, dtype=float)
            if arr.shape != (self.grid.grid1.count(key[0]), self.grid.grid2.count(key[1])):
                raise ConfigError(f"table block {key} has the wrong shape")
            if (arr < 0).any():
                raise DomainError("Carleson sequences are nonnegative")
            self.table[key] = arr

    @classmethod
    def from_rectangles(cls, grid: ProductGrid, values: Mapping) -> "CarlesonFamily":
        """Build from ``{(cube1, cube2): value}``."""
        table = {}
        for (c1, c2), v in values.items():
            l1, l2 = grid.grid1.level_of(c1), grid.grid2.level_of(c2)
            arr = table.setdefault((l1, l2), np.zeros((grid.grid1.count(l1), grid.grid2.count(l2))))
            arr[grid.grid1.index(c1), grid.grid2.index(c2)] += v
        return cls(grid, table)

    def scaled(self, c: float) -> "CarlesonFamily":
        return CarlesonFamily(self.grid, {k: c * v for k, v in self.table.items()})


def carleson_check(lam: CarlesonFamily) -> CarlesonResult:
    return carleson_sup(lam.grid, lam.table)


def _union_constant(pg: ProductGrid, lam: dict, a: dict) -> float:
    """Max over the level sets ``{sup a_R > t}`` of ``|U|^-1 sum_{R in U} lambda_R``."""
    keys, masks = _rect_masks(pg)
    lv = np.array([lam.get((k[0], k[2]), None)[k[1], k[3]] if (k[0], k[2]) in lam else 0.0 for k in keys])
    av = np.array([a.get((k[0], k[2]), None)[k[1], k[3]] if (k[0], k[2]) in a else 0.0 for k in keys])
    cellvol = pg.params.cell_volume(1) * pg.params.cell_volume(2)
    best = 0.0
    for t in np.unique(av[av > 0]):
        U = masks[av >= t].any(axis=0)
        inside = ~(masks & ~U).any(axis=1)
        best = max(best, lv[inside].sum() / (U.sum() * cellvol))
    return best


def carleson_embed(lam: CarlesonFamily, a: Mapping) -> dict:
    """Both sides of the embedding ``sum lambda_R a_R <= C int sup_{R ni x} a_R``.

    ``C1`` is the family constant.  The layer-cake argument needs the ratio
    on the actual level sets of ``sup a_R``, which need not belong to the
    family; that constant is computed too and certifies the inequality.
    """
    pg = lam.grid
    a = {k: np.asarray(v, dtype=float) for k, v in a.items()}
    for v in a.values():
        if (v < 0).any():
            raise DomainError("the test sequence must be nonnegative")
    lhs = float(sum((lam.table[k] * a[k]).sum() for k in lam.table if k in a))
    t1, t2 = _tree(pg.grid1), _tree(pg.grid2)
    sup = np.zeros((pg.params.cells(1), pg.params.cells(2)))
    for (s1, s2), arr in a.items():
        sup = np.maximum(sup, arr[np.ix_(t1.cell_index[s1], t2.cell_index[s2])])
    rhs = float(sup.sum() * pg.params.cell_volume(1) * pg.params.cell_volume(2))
    C1 = carleson_check(lam).value
    C_level = _union_constant(pg, lam.table, a)
    holds = lhs <= max(C1, C_level) * rhs * (1 + 1e-12) + 1e-300
    ratio = lhs / (C1 * rhs) if C1 > 0 and rhs > 0 else 0.0
    return {"lhs": lhs, "rhs": rhs, "C1": C1, "C_levelsets": C_level,
            "ratio": ratio, "holds": bool(holds)}


# -- H^1-BMO pairing -----------------------------------------------------------------
def _level_table(grid: ShiftedGrid, coeffs: Mapping) -> dict:
    out = {}
    for cube, v in coeffs.items():
        s = grid.level_of(cube)
        arr = out.setdefault(s, np.zeros(grid.count(s)))
        arr[grid.index(cube)] += v
    return out


def h1_bmo_pair(a: Mapping, b: Mapping, grid: ShiftedGrid) -> dict:
    """Both sides of ``sum |a_I b_I| <= C sup_Q (|Q|^-1 sum_{I in Q} |a_I|^2)^(1/2) ||S b||_1``."""
    common = set(a) & set(b)
    lhs = float(sum(abs(a[I]) * abs(b[I]) for I in sorted(common)))
    A = _level_table(grid, {I: abs(v) ** 2 for I, v in a.items()})
    bmo = math.sqrt(max(cube_carleson_sup(grid, A).value, 0.0))
    t = _tree(grid)
    sq = np.zeros(grid.params.cells(grid.axis))
    for s, arr in _level_table(grid, {I: abs(v) ** 2 for I, v in b.items()}).items():
        sq += (arr / t.vol[s])[t.cell_index[s]]
    s_norm = float(np.sqrt(sq).sum() * grid.params.cell_volume(grid.axis))
    denom = bmo * s_norm
    return {"lhs": lhs, "bmo_factor": bmo, "square_factor": s_norm,
            "constant": lhs / denom if denom > 0 else 0.0}
