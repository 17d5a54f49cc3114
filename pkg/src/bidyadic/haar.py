"""Step functions, Haar systems, martingale operators and D(N) projections."""

from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, DomainError
from .lattice import (
    DyadicCube,
    LatticeParams,
    ProductGrid,
    ShiftedGrid,
    in_DN,
)

__all__ = [
    "StepFunction",
    "HaarIndex",
    "MEAN",
    "haar",
    "haar_tensor",
    "AxisBasis",
    "axis_basis",
    "Expansion",
    "expand",
    "reconstruct",
    "martingale",
    "DeltaI",
    "DeltaIk",
    "E",
    "D",
    "project_N",
    "telescoping_sides",
    "mean_zero_part",
]


def _axes_shape(params: LatticeParams, axes: tuple) -> tuple:
    return tuple(params.cells(a) for a in axes)


class StepFunction:
    """Piecewise constant function on the finest cells of one or both parameters.

    ``values`` has shape ``(C1,)``, ``(C2,)`` or ``(C1, C2)`` where ``Ci`` is
    the number of finest cells of parameter ``i`` (row-major over its ``n``
    coordinates).  Integrals are exact finite sums weighted by cell volume.
    """

    __slots__ = ("params", "axes", "values")

    def __init__(self, params: LatticeParams, axes, values):
        axes = tuple(sorted(set(int(a) for a in axes)))
        if axes not in ((1,), (2,), (1, 2)):
            raise ConfigError(f"axis set must be {{1}}, {{2}} or {{1,2}}, got {axes}")
        arr = np.asarray(values)
        if not (np.issubdtype(arr.dtype, np.floating) or np.issubdtype(arr.dtype, np.complexfloating)):
            arr = arr.astype(float)
        shape = _axes_shape(params, axes)
        if arr.size != int(np.prod(shape)):
            raise ConfigError(f"expected {int(np.prod(shape))} values, got {arr.size}")
        self.params = params
        self.axes = axes
        self.values = np.array(arr.reshape(shape))

    # -- constructors ----------------------------------------------------
    @classmethod
    def zeros(cls, params, axes=(1, 2)):
        axes = tuple(sorted(axes))
        return cls(params, axes, np.zeros(_axes_shape(params, axes)))

    @classmethod
    def constant(cls, params, c=1.0, axes=(1, 2)):
        axes = tuple(sorted(axes))
        return cls(params, axes, np.full(_axes_shape(params, axes), c, dtype=float))

    @classmethod
    def tensor(cls, f1: "StepFunction", f2: "StepFunction") -> "StepFunction":
        if f1.axes != (1,) or f2.axes != (2,) or f1.params != f2.params:
            raise ConfigError("tensor needs an axis-1 and an axis-2 function on one lattice")
        return cls(f1.params, (1, 2), np.outer(f1.values, f2.values))

    # -- geometry ----------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def cell_volume(self) -> float:
        return float(np.prod([self.params.cell_volume(a) for a in self.axes]))

    @property
    def domain_volume(self) -> float:
        return self.cell_volume * self.values.size

    @property
    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)

    # -- arithmetic --------------------------------------------------------
    def _coerce(self, other):
        if isinstance(other, StepFunction):
            if other.params != self.params or other.axes != self.axes:
                raise ConfigError("step functions live on different lattices")
            return other.values
        return other

    def __add__(self, other):
        return StepFunction(self.params, self.axes, self.values + self._coerce(other))

    __radd__ = __add__

    def __sub__(self, other):
        return StepFunction(self.params, self.axes, self.values - self._coerce(other))

    def __rsub__(self, other):
        return StepFunction(self.params, self.axes, self._coerce(other) - self.values)

    def __mul__(self, other):
        return StepFunction(self.params, self.axes, self.values * self._coerce(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return StepFunction(self.params, self.axes, self.values / self._coerce(other))

    def __neg__(self):
        return StepFunction(self.params, self.axes, -self.values)

    def __abs__(self):
        return StepFunction(self.params, self.axes, np.abs(self.values))

    def __pow__(self, p):
        return StepFunction(self.params, self.axes, self.values ** p)

    def copy(self):
        return StepFunction(self.params, self.axes, self.values.copy())

    # -- integrals ---------------------------------------------------------
    def integral(self):
        return self.values.sum() * self.cell_volume

    def inner(self, other: "StepFunction"):
        """Bilinear pairing: integral of the product (no conjugation)."""
        return (self.values * self._coerce(other)).sum() * self.cell_volume

    def average(self, mask) -> float:
        """Average over the cells selected by a boolean/0-1 mask of equal shape."""
        m = np.asarray(mask, dtype=float).reshape(self.shape)
        tot = m.sum()
        if tot == 0:
            raise DomainError("average over an empty set")
        return (self.values * m).sum() / tot

    def mean(self):
        return self.values.mean()

    def norm(self, p=2.0, weight: "StepFunction | None" = None) -> float:
        """``||f||_p``; with ``weight`` the measure is ``weight dx``."""
        a = np.abs(self.values)
        if p == math.inf:
            return float(a.max()) if a.size else 0.0
        w = self.cell_volume if weight is None else self._coerce(weight) * self.cell_volume
        return float(((a ** p) * w).sum() ** (1.0 / p))

    # -- io --------------------------------------------------------------
    def to_csv(self) -> str:
        """Row-major dump: a commented header with the lattice, then one row per axis-1 cell."""
        buf = io.StringIO()
        buf.write("# " + repr(self.params.to_dict()) + f" axes={list(self.axes)}\n")
        w = csv.writer(buf, lineterminator="\n")
        rows = self.values if self.values.ndim == 2 else self.values[None, :]
        for row in rows:
            w.writerow([format(float(v), ".17g") for v in row])
        return buf.getvalue()

    def __repr__(self):
        return f"StepFunction(axes={self.axes}, shape={self.shape})"


@dataclass(frozen=True, order=True)
class HaarIndex:
    """A cube together with its Haar type ``eta`` (all zeros is the non-cancellative one)."""

    cube: DyadicCube
    eta: tuple

    def __post_init__(self):
        object.__setattr__(self, "eta", tuple(int(e) for e in self.eta))
        if any(e not in (0, 1) for e in self.eta):
            raise ConfigError(f"eta must be a 0/1 vector, got {self.eta}")

    @property
    def cancellative(self) -> bool:
        return any(self.eta)


class _Mean:
    """Key for the explicit mean coefficient of an expansion."""

    def __repr__(self):
        return "MEAN"

    def __reduce__(self):
        return "MEAN"


MEAN = _Mean()


def _haar_vector(grid: ShiftedGrid, cube: DyadicCube, eta: Sequence[int], kind: str = "h") -> np.ndarray:
    """Values of h_I^eta (``kind='h'``) or 1_I/|I| (``kind='bar'``) on the axis cells."""
    lev = grid.level_of(cube)
    n = grid.n
    ncell = grid.ncell
    if kind == "h" and any(eta):
        if lev == 0:
            raise DomainError(f"cube {cube} is a single cell and cannot carry a cancellative Haar function")
        if not grid.is_full(cube):
            raise DomainError(f"cube {cube} is truncated by the domain")
    side_len = 2.0 ** (lev - grid.params.L)
    vol = side_len ** n
    vec = np.ones(1)
    for d, lo in enumerate(grid.lower_corner(cube)):
        v = np.zeros(ncell)
        idx = np.arange(lo, lo + (1 << lev))
        sign = np.ones(1 << lev)
        if kind == "h" and eta[d]:
            sign[(1 << (lev - 1)):] = -1.0
        if grid.periodic:
            np.add.at(v, idx % ncell, sign)
        else:
            keep = (idx >= 0) & (idx < ncell)
            v[idx[keep]] = sign[keep]
        vec = np.outer(vec, v).ravel()
    if kind == "h":
        return vec / math.sqrt(vol)
    if kind == "bar":
        return vec / vol
    raise ConfigError(f"unknown kind {kind!r}")


def haar(idx: HaarIndex, grid: ShiftedGrid) -> StepFunction:
    """The L^2-normalized Haar function of ``idx`` on its grid's axis."""
    if len(idx.eta) != grid.n:
        raise DomainError("eta length does not match the dimension")
    grid.index(idx.cube)
    return StepFunction(grid.params, (grid.axis,), _haar_vector(grid, idx.cube, idx.eta))


def haar_tensor(idx1: HaarIndex, idx2: HaarIndex, pgrid: ProductGrid) -> StepFunction:
    return StepFunction.tensor(haar(idx1, pgrid.grid1), haar(idx2, pgrid.grid2))


class AxisBasis:
    """Orthonormal system of one grid: the normalized constant plus all
    cancellative Haar functions on (untruncated) cubes of levels ``1..S``."""

    def __init__(self, grid: ShiftedGrid):
        self.grid = grid
        p = grid.params
        n = grid.n
        etas = [e for e in itertools.product((0, 1), repeat=n) if any(e)]
        idx = []
        for s in range(1, grid.S + 1):
            for c in grid.cubes(s):
                if grid.is_full(c):
                    idx.extend(HaarIndex(c, e) for e in etas)
        self.indices = idx
        self.position = {h: i for i, h in enumerate(idx)}
        C = p.cells(grid.axis)
        self.vol = p.cell_volume(grid.axis)
        self.H = np.array([_haar_vector(grid, h.cube, h.eta) for h in idx]).reshape(len(idx), C)
        self.u = np.full(C, 1.0 / math.sqrt(C * self.vol))
        self.B = np.vstack([self.u[None, :], self.H])
        self.levels = np.array([grid.level_of(h.cube) for h in idx], dtype=int)
        self.complete = self.B.shape[0] == C
        for a in (self.H, self.u, self.B):
            a.setflags(write=False)

    @property
    def keys(self) -> list:
        return [MEAN] + self.indices

    def __len__(self):
        return len(self.indices)


@lru_cache(maxsize=256)
def axis_basis(grid: ShiftedGrid) -> AxisBasis:
    return AxisBasis(grid)


@dataclass
class Expansion:
    """Coefficients of a function in a one- or two-parameter Haar system.

    Row/column ``0`` of ``coeffs`` holds the explicit mean term (the pairing
    with the normalized constant); ``residual`` is whatever the (possibly
    incomplete) system cannot represent and is zero on complete grids.
    """

    grid: object
    coeffs: np.ndarray
    residual: StepFunction

    @property
    def bases(self) -> tuple:
        if isinstance(self.grid, ProductGrid):
            return axis_basis(self.grid.grid1), axis_basis(self.grid.grid2)
        return (axis_basis(self.grid),)

    @property
    def mean(self) -> float:
        """Average of the represented part over the whole domain."""
        scale = 1.0
        for b in self.bases:
            scale *= b.u[0]
        c0 = self.coeffs[(0,) * self.coeffs.ndim]
        return c0 * scale

    def table(self) -> dict:
        """Sparse map from basis keys (HaarIndex or MEAN, or pairs) to coefficients."""
        keys = [b.keys for b in self.bases]
        out = {}
        if len(keys) == 1:
            for k, v in zip(keys[0], self.coeffs):
                if v != 0:
                    out[k] = v
        else:
            nz = np.argwhere(self.coeffs != 0)
            for i, j in nz:
                out[(keys[0][i], keys[1][j])] = self.coeffs[i, j]
        return out

    def parseval_sum(self) -> float:
        return float(np.sum(np.abs(self.coeffs) ** 2))


def expand(f: StepFunction, grid) -> Expansion:
    """Haar expansion of ``f`` with the mean carried explicitly."""
    if isinstance(grid, ProductGrid):
        if f.axes != (1, 2):
            raise DomainError("a product-grid expansion needs a two-parameter function")
        b1, b2 = axis_basis(grid.grid1), axis_basis(grid.grid2)
        C = b1.B @ f.values @ b2.B.T * (b1.vol * b2.vol)
        rec = b1.B.T @ C @ b2.B
    elif isinstance(grid, ShiftedGrid):
        if f.axes != (grid.axis,):
            raise DomainError("a one-parameter expansion needs a function of that axis")
        b = axis_basis(grid)
        C = b.B @ f.values * b.vol
        rec = b.B.T @ C
    else:
        raise ConfigError("grid must be a ShiftedGrid or ProductGrid")
    return Expansion(grid, C, StepFunction(f.params, f.axes, f.values - rec))


def reconstruct(exp: Expansion, include_residual: bool = True) -> StepFunction:
    bases = exp.bases
    if len(bases) == 2:
        vals = bases[0].B.T @ exp.coeffs @ bases[1].B
    else:
        vals = bases[0].B.T @ exp.coeffs
    f = StepFunction(exp.residual.params, exp.residual.axes, vals)
    return f + exp.residual if include_residual else f


# -- martingale operators ---------------------------------------------------
def _along(f: StepFunction, axis: int, mat: np.ndarray) -> StepFunction:
    """Apply an axis-cell linear map ``mat`` to ``f`` along ``axis``."""
    if axis not in f.axes:
        raise DomainError(f"function has no axis {axis}")
    if f.axes == (1, 2):
        vals = mat @ f.values if axis == 1 else f.values @ mat.T
    else:
        vals = mat @ f.values
    return StepFunction(f.params, f.axes, vals)


def _expectation_matrix(grid: ShiftedGrid, level: int) -> np.ndarray:
    """Matrix of E at ``level``: averages divide by the untruncated cube volume."""
    if not 0 <= level <= grid.S:
        raise DomainError(f"level {level} outside the lattice")
    Mm = grid.membership(level)
    full = float(1 << (level * grid.n))
    return Mm.T @ Mm / full


def _delta_matrix(grid: ShiftedGrid, cube: DyadicCube) -> np.ndarray:
    lev = grid.level_of(cube)
    if lev == 0:
        raise DomainError("a single cell has no children")
    C = grid.params.cells(grid.axis)
    out = np.zeros((C, C))
    ind = grid.indicator(cube)
    full = float(1 << (lev * grid.n))
    out -= np.outer(ind, ind) / full
    cfull = float(1 << ((lev - 1) * grid.n))
    for ch in grid.children(cube):
        ci = grid.indicator(ch)
        out += np.outer(ci, ci) / cfull
    return out


@dataclass(frozen=True)
class DeltaI:
    cube: DyadicCube


@dataclass(frozen=True)
class DeltaIk:
    cube: DyadicCube
    k: int


@dataclass(frozen=True)
class E:
    """Conditional expectation onto cubes of side ``2^k``."""
    k: int


@dataclass(frozen=True)
class D:
    """Martingale difference ``E_{2^(k-1)} - E_{2^k}``."""
    k: int


def martingale(f: StepFunction, which, grid: ShiftedGrid) -> StepFunction:
    """Apply Delta_I, Delta_I^k, E_{2^k} or D_{2^k} of ``grid`` along its axis."""
    L = grid.params.L
    if isinstance(which, DeltaI):
        return _along(f, grid.axis, _delta_matrix(grid, which.cube))
    if isinstance(which, DeltaIk):
        lev = grid.level_of(which.cube)
        if which.k < 0 or lev - which.k < 1:
            raise DomainError("Delta_I^k needs 0 <= k < level(I)")
        C = grid.params.cells(grid.axis)
        mat = np.zeros((C, C))
        for c in grid.cubes(lev - which.k):
            if grid.contains(which.cube, c):
                mat += _delta_matrix(grid, c)
        return _along(f, grid.axis, mat)
    if isinstance(which, E):
        return _along(f, grid.axis, _expectation_matrix(grid, which.k + L))
    if isinstance(which, D):
        lev = which.k + L
        if not 1 <= lev <= grid.S:
            raise DomainError(f"D_(2^{which.k}) outside the lattice")
        mat = _expectation_matrix(grid, lev - 1) - _expectation_matrix(grid, lev)
        return _along(f, grid.axis, mat)
    raise ConfigError(f"unknown martingale operator {which!r}")


def telescoping_sides(g1: StepFunction, g2: StepFunction, cube: DyadicCube, grid: ShiftedGrid) -> tuple:
    """Both sides of the parent/child collapse identity for one-parameter g1, g2.

    Left: sum over eta of [<g1,h_P><g2>_I + <g1>_P <g2,h_P>] <h_P>_I with P the
    parent of I; right: <g1>_I <g2>_I - <g1>_P <g2>_P.
    """
    P = grid.parent(cube)
    mI = grid.indicator(cube).astype(bool)
    mP = grid.indicator(P).astype(bool)
    etas = [e for e in itertools.product((0, 1), repeat=grid.n) if any(e)]
    a1I, a2I = g1.average(mI), g2.average(mI)
    a1P, a2P = g1.average(mP), g2.average(mP)
    lhs = 0.0
    for e in etas:
        h = haar(HaarIndex(P, e), grid)
        hI = h.average(mI)
        lhs += (g1.inner(h) * a2I + a1P * g2.inner(h)) * hI
    return lhs, a1I * a2I - a1P * a2P


class Projection(NamedTuple):
    pn: StepFunction
    perp: StepFunction


def _dn_rows(basis: AxisBasis, N: int) -> np.ndarray:
    g = basis.grid
    return np.array([in_DN(h.cube, N, g) for h in basis.indices], dtype=bool)


def project_N(f: StepFunction, grid, N: int) -> Projection:
    """``P_N f`` (Haar terms indexed by D(N)) and ``f - P_N f``."""
    if isinstance(grid, ProductGrid):
        b1, b2 = axis_basis(grid.grid1), axis_basis(grid.grid2)
        m1, m2 = _dn_rows(b1, N), _dn_rows(b2, N)
        H1, H2 = b1.H[m1], b2.H[m2]
        C = H1 @ f.values @ H2.T * (b1.vol * b2.vol)
        vals = H1.T @ C @ H2
    else:
        b = axis_basis(grid)
        m = _dn_rows(b, N)
        H = b.H[m]
        vals = H.T @ (H @ f.values * b.vol) if f.axes == (grid.axis,) else None
        if vals is None:
            raise DomainError("one-parameter projection needs a function of the grid's axis")
    pn = StepFunction(f.params, f.axes, vals)
    return Projection(pn, f - pn)


def mean_zero_part(f: StepFunction) -> StepFunction:
    """Remove the per-parameter means (the projection onto mean-zero slices)."""
    v = f.values
    if f.axes == (1, 2):
        v = v - v.mean(axis=0, keepdims=True) - v.mean(axis=1, keepdims=True) + v.mean()
    else:
        v = v - v.mean()
    return StepFunction(f.params, f.axes, v)
