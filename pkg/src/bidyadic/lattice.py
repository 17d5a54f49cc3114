"""Finite dyadic lattices, shifted grids, goodness and the truncations D(N).

Conventions
-----------
Each parameter lives on ``[-2^M, 2^M)^n`` (optionally a torus) cut into
``2^(M+1+L)`` cells of side ``2^-L`` per coordinate.  Internally everything is
measured in integer cell units.  A cube of *level* ``s`` has side ``2^s``
cells, i.e. ``2^(s-L)`` in length; levels run from ``0`` (single cells) to
``S = M+L+1`` (the whole domain).

A shift sequence ``omega`` holds one ``n``-bit integer per level ``0..S-1``.
Bit ``d`` of ``omega[j]`` translates every cube of level ``> j`` by ``2^j``
cells along coordinate ``d``, so level ``s`` cubes are offset by
``o_s = sum_{j<s} 2^j omega[j]``.  This is the usual random dyadic grid with
the infinite sum truncated to the scales present in the lattice.
"""

from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property, lru_cache
from typing import Iterator, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import (
    ConfigError,
    DomainError,
    InfeasibleConfiguration,
    InvariantViolation,
    LatticeRangeError,
)

__all__ = [
    "LatticeParams",
    "DyadicCube",
    "ShiftedGrid",
    "ProductGrid",
    "TripleClass",
    "AncestorCase",
    "AncestorResult",
    "PiGood",
    "enumerate_grid",
    "all_omegas",
    "effective_levels",
    "is_good",
    "pi_good",
    "in_DN",
    "count_DN",
    "common_ancestor",
    "classify_triple",
    "census",
]


def _default_gamma(delta: float, n: int) -> float:
    return float(delta) / (2.0 * (2 * n + float(delta)))


@dataclass(frozen=True)
class LatticeParams:
    """Geometry and goodness parameters shared by both axes.

    ``gamma1``/``gamma2`` default to ``delta/(2(2n+delta))``.  ``sep_factor``
    is the constant in front of ``l(I)^gamma l(J)^(1-gamma)`` used both for
    badness and for the separated/adjacent threshold.
    """

    n1: int = 1
    n2: int = 1
    M: int = 1
    L: int = 2
    periodic: bool = True
    r: int = 2
    delta1: float = 1.0
    delta2: float = 1.0
    gamma1: float | None = None
    gamma2: float | None = None
    theta: float = 0.5
    sep_factor: float = 0.25

    def __post_init__(self):
        for name in ("n1", "n2", "M", "L", "r"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool):
                raise ConfigError(f"{name} must be an integer, got {v!r}")
        if self.n1 < 1 or self.n2 < 1:
            raise ConfigError("dimensions n1, n2 must be positive")
        if self.M < 0 or self.L < 1 or self.M + self.L + 1 < 3:
            raise ConfigError("need M >= 0, L >= 1 and M+L+1 >= 3")
        if self.r < 1:
            raise ConfigError("goodness gap r must be a positive integer")
        for name in ("delta1", "delta2"):
            d = float(getattr(self, name))
            if not 0.0 < d <= 1.0:
                raise ConfigError(f"{name} must lie in (0, 1]")
        if self.gamma1 is None:
            object.__setattr__(self, "gamma1", _default_gamma(self.delta1, self.n1))
        if self.gamma2 is None:
            object.__setattr__(self, "gamma2", _default_gamma(self.delta2, self.n2))
        for name in ("gamma1", "gamma2"):
            g = float(getattr(self, name))
            if not 0.0 < g < 0.5:
                raise ConfigError(f"{name} must lie in (0, 1/2)")
        if not 0.0 < float(self.theta) < 1.0:
            raise ConfigError("theta must lie in (0, 1)")
        if not float(self.sep_factor) > 0.0:
            raise ConfigError("sep_factor must be positive")

    # -- derived quantities ----------------------------------------------
    @property
    def top(self) -> int:
        """Index S of the coarsest level (the whole domain)."""
        return self.M + self.L + 1

    @property
    def ncell(self) -> int:
        """Cells per coordinate."""
        return 1 << self.top

    def n(self, axis: int) -> int:
        return self.n1 if _check_axis(axis) == 1 else self.n2

    def delta(self, axis: int) -> float:
        return float(self.delta1 if _check_axis(axis) == 1 else self.delta2)

    def gamma(self, axis: int) -> float:
        return float(self.gamma1 if _check_axis(axis) == 1 else self.gamma2)

    def cells(self, axis: int) -> int:
        """Number of finest cells of one parameter."""
        return self.ncell ** self.n(axis)

    def side(self, level: int) -> Fraction:
        """Side length of a level-``level`` cube."""
        return Fraction(2) ** (level - self.L)

    def cell_volume(self, axis: int) -> float:
        return 2.0 ** (-self.L * self.n(axis))

    def cell_centers(self) -> np.ndarray:
        """Coordinates of cell centers along one coordinate direction."""
        h = 2.0 ** (-self.L)
        return -(2.0 ** self.M) + (np.arange(self.ncell) + 0.5) * h

    def to_dict(self) -> dict:
        return {
            "n1": self.n1,
            "n2": self.n2,
            "M": self.M,
            "L": self.L,
            "periodic": bool(self.periodic),
            "r": self.r,
            "delta1": float(self.delta1),
            "delta2": float(self.delta2),
            "gamma1": float(self.gamma1),
            "gamma2": float(self.gamma2),
            "theta": float(self.theta),
            "sep_factor": float(self.sep_factor),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "LatticeParams":
        return cls(**dict(d))


def _check_axis(axis: int) -> int:
    if axis not in (1, 2):
        raise ConfigError(f"axis must be 1 or 2, got {axis!r}")
    return axis


@dataclass(frozen=True, order=True)
class DyadicCube:
    """A cube of side ``2^scale_exp`` at integer position ``pos`` of a grid."""

    scale_exp: int
    pos: tuple
    grid_id: str

    def __post_init__(self):
        object.__setattr__(self, "pos", tuple(int(p) for p in self.pos))


@dataclass(frozen=True)
class ShiftedGrid:
    """One parameter's dyadic grid translated by ``omega``."""

    params: LatticeParams
    axis: int
    omega: tuple

    def __post_init__(self):
        _check_axis(self.axis)
        om = tuple(int(w) for w in self.omega)
        object.__setattr__(self, "omega", om)
        if len(om) != self.params.top:
            raise ConfigError(
                f"omega must have {self.params.top} components (one per level "
                f"below the top), got {len(om)}"
            )
        lim = 1 << self.n
        for w in om:
            if not 0 <= w < lim:
                raise ConfigError(f"omega component {w} is not an {self.n}-bit vector")

    # -- basic geometry ----------------------------------------------------
    @property
    def n(self) -> int:
        return self.params.n(self.axis)

    @property
    def S(self) -> int:
        return self.params.top

    @property
    def ncell(self) -> int:
        return self.params.ncell

    @property
    def periodic(self) -> bool:
        return self.params.periodic

    @cached_property
    def grid_id(self) -> str:
        return f"a{self.axis}:{pack_omega(self.omega, self.n)}"

    @lru_cache(maxsize=None)
    def offset(self, level: int) -> tuple:
        """Translation (in cells, per coordinate) of level-``level`` cubes."""
        return _offset(self.omega, level, self.n)

    def level_of(self, cube: DyadicCube) -> int:
        if cube.grid_id != self.grid_id:
            raise DomainError(f"cube {cube} does not belong to grid {self.grid_id}")
        lev = cube.scale_exp + self.params.L
        if not 0 <= lev <= self.S:
            raise DomainError(f"scale 2^{cube.scale_exp} outside the lattice")
        return lev

    def _pos_ranges(self, level: int) -> list:
        off = self.offset(level)
        size = 1 << level
        if self.periodic:
            return [range(self.ncell >> level)] * self.n
        out = []
        for o in off:
            pmin = -1 if o > 0 else 0
            pmax = (self.ncell - 1 - o) // size
            out.append(range(pmin, pmax + 1))
        return out

    @lru_cache(maxsize=None)
    def positions(self, level: int) -> tuple:
        """All positions at ``level`` in row-major order."""
        if not 0 <= level <= self.S:
            raise DomainError(f"level {level} outside 0..{self.S}")
        return tuple(itertools.product(*self._pos_ranges(level)))

    def count(self, level: int) -> int:
        return len(self.positions(level))

    def cube(self, level: int, pos: Sequence[int]) -> DyadicCube:
        pos = tuple(int(p) for p in pos)
        if pos not in self._pos_index(level):
            raise DomainError(f"position {pos} not in level {level} of {self.grid_id}")
        return DyadicCube(level - self.params.L, pos, self.grid_id)

    def cubes(self, level: int) -> list:
        L = self.params.L
        return [DyadicCube(level - L, p, self.grid_id) for p in self.positions(level)]

    def all_cubes(self, min_level: int = 0) -> list:
        out = []
        for s in range(min_level, self.S + 1):
            out.extend(self.cubes(s))
        return out

    @lru_cache(maxsize=None)
    def _pos_index(self, level: int) -> dict:
        return {p: i for i, p in enumerate(self.positions(level))}

    def index(self, cube: DyadicCube) -> int:
        """Row of ``cube`` inside ``membership(level)``."""
        lev = self.level_of(cube)
        try:
            return self._pos_index(lev)[cube.pos]
        except KeyError:
            raise DomainError(f"{cube} is not a cube of {self.grid_id}") from None

    def lower_corner(self, cube: DyadicCube) -> tuple:
        """Unwrapped lower corner (cells) of the untruncated cube."""
        lev = self.level_of(cube)
        off = self.offset(lev)
        return tuple(o + (p << lev) for o, p in zip(off, cube.pos))

    def intervals(self, cube: DyadicCube) -> list:
        """Per-coordinate half-open cell intervals of the cube as a lattice set.

        Periodic grids report the lower end reduced modulo the period;
        bounded grids report the interval clipped to the domain.
        """
        lev = self.level_of(cube)
        size = 1 << lev
        out = []
        for lo in self.lower_corner(cube):
            if self.periodic:
                out.append((lo % self.ncell, lo % self.ncell + size))
            else:
                out.append((max(lo, 0), min(lo + size, self.ncell)))
        return out

    def is_full(self, cube: DyadicCube) -> bool:
        """True when the untruncated cube lies inside the lattice domain."""
        if self.periodic:
            return True
        lev = self.level_of(cube)
        return all(0 <= lo and lo + (1 << lev) <= self.ncell for lo in self.lower_corner(cube))

    def side(self, cube: DyadicCube) -> Fraction:
        return Fraction(2) ** cube.scale_exp

    def center(self, cube: DyadicCube) -> tuple:
        """Exact center of the untruncated cube (dyadic rationals)."""
        lev = self.level_of(cube)
        h = Fraction(1, 1 << self.params.L)
        base = -(Fraction(2) ** self.params.M)
        return tuple(base + (lo + Fraction(1 << lev, 2)) * h for lo in self.lower_corner(cube))

    def coord_cells(self, cube: DyadicCube) -> list:
        """Per-coordinate arrays of covered cell coordinates."""
        out = []
        for lo, hi in self.intervals(cube):
            a = np.arange(lo, hi)
            if self.periodic:
                a %= self.ncell
            out.append(a)
        return out

    def cells(self, cube: DyadicCube) -> np.ndarray:
        """Flat (row-major) indices of the cells in the cube."""
        coords = self.coord_cells(cube)
        idx = np.zeros(1, dtype=np.int64)
        for a in coords:
            idx = (idx[:, None] * self.ncell + a[None, :]).ravel()
        return np.sort(idx)

    def indicator(self, cube: DyadicCube) -> np.ndarray:
        v = np.zeros(self.params.cells(self.axis))
        v[self.cells(cube)] = 1.0
        return v

    @lru_cache(maxsize=None)
    def membership(self, level: int) -> np.ndarray:
        """Matrix whose rows are the indicators of the level's cubes."""
        cubes = self.cubes(level)
        out = np.zeros((len(cubes), self.params.cells(self.axis)))
        for i, c in enumerate(cubes):
            out[i, self.cells(c)] = 1.0
        out.setflags(write=False)
        return out

    # -- tree structure --------------------------------------------------
    def ancestor(self, cube: DyadicCube, level: int) -> DyadicCube:
        lev = self.level_of(cube)
        if level < lev or level > self.S:
            raise DomainError(f"no ancestor of {cube} at level {level}")
        if level == lev:
            return cube
        off = self.offset(level)
        pos = []
        for lo, o in zip(self.lower_corner(cube), off):
            q = (lo - o) >> level
            if self.periodic:
                q %= self.ncell >> level
            pos.append(q)
        return DyadicCube(level - self.params.L, tuple(pos), self.grid_id)

    def parent(self, cube: DyadicCube) -> DyadicCube:
        return self.ancestor(cube, self.level_of(cube) + 1)

    def children(self, cube: DyadicCube) -> list:
        lev = self.level_of(cube)
        if lev == 0:
            return []
        off = self.offset(lev - 1)
        base = [(lo - o) >> (lev - 1) for lo, o in zip(self.lower_corner(cube), off)]
        valid = self._pos_index(lev - 1)
        out = []
        for e in itertools.product((0, 1), repeat=self.n):
            q = [b + d for b, d in zip(base, e)]
            if self.periodic:
                q = [x % (self.ncell >> (lev - 1)) for x in q]
            q = tuple(q)
            if q in valid:
                out.append(DyadicCube(lev - 1 - self.params.L, q, self.grid_id))
        return out

    def contains(self, big: DyadicCube, small: DyadicCube) -> bool:
        lb, ls = self.level_of(big), self.level_of(small)
        if ls > lb:
            return False
        return self.ancestor(small, lb) == big

    def intersects(self, a: DyadicCube, b: DyadicCube) -> bool:
        return self.contains(a, b) or self.contains(b, a)

    # -- distances -------------------------------------------------------
    def distance_cells(self, a: DyadicCube, b: DyadicCube) -> int:
        """l^inf distance between the cubes (minimal image on the torus)."""
        ia, ib = self.intervals(a), self.intervals(b)
        return max(_gap(x, y, self.ncell if self.periodic else None) for x, y in zip(ia, ib))

    def distance(self, a: DyadicCube, b: DyadicCube) -> Fraction:
        return Fraction(self.distance_cells(a, b), 1 << self.params.L)

    def boundary_distance_cells(self, small: DyadicCube, big: DyadicCube) -> int:
        """d(small, boundary of big) for arbitrary cubes of the grid (brute force).

        For ``small`` inside ``big`` this is the distance to the nearest face of
        the untruncated ``big``; otherwise it is the gap between the two sets.
        A periodic top cube has no boundary; ``math.inf`` is returned.
        """
        lb = self.level_of(big)
        if self.periodic and lb == self.S:
            return math.inf
        if self.contains(big, small):
            ls = self.level_of(small)
            d = math.inf
            for lo_s, lo_b in zip(self.lower_corner(small), self.lower_corner(big)):
                a = lo_s - lo_b
                if self.periodic:
                    a %= self.ncell
                b = (1 << lb) - (1 << ls) - a
                d = min(d, a, b)
            return int(d)
        return self.distance_cells(small, big)

    # -- goodness ----------------------------------------------------------
    def bad_threshold_cells(self, small_level: int, big_level: int) -> float:
        g = self.params.gamma(self.axis)
        return float(self.params.sep_factor) * 2.0 ** (small_level * g + big_level * (1.0 - g))

    def is_good(self, cube: DyadicCube) -> bool:
        lev = self.level_of(cube)
        pos = cube.pos
        return _is_good_raw(self.params, self.axis, self.omega, lev, pos)

    @lru_cache(maxsize=None)
    def good_mask(self, level: int) -> np.ndarray:
        m = np.array([_is_good_raw(self.params, self.axis, self.omega, level, p)
                      for p in self.positions(level)], dtype=bool)
        m.setflags(write=False)
        return m


def _gap(x: tuple, y: tuple, period: int | None) -> int:
    (a0, a1), (b0, b1) = x, y
    if period is None:
        return max(0, b0 - a1, a0 - b1)
    la, lb = a1 - a0, b1 - b0
    if la >= period or lb >= period:
        return 0
    if (b0 - a0) % period < la or (a0 - b0) % period < lb:
        return 0
    return min((b0 - a1) % period, (a0 - b1) % period)


def _offset(omega: Sequence[int], level: int, n: int) -> tuple:
    out = [0] * n
    for j in range(level):
        w = omega[j]
        for d in range(n):
            if (w >> d) & 1:
                out[d] += 1 << j
    return tuple(out)


def _is_good_raw(params: LatticeParams, axis: int, omega, level: int, pos) -> bool:
    n = params.n(axis)
    S = params.top
    last = S - 1 if params.periodic else S
    off = _offset(omega, level, n)
    lower = [o + (p << level) for o, p in zip(off, pos)]
    for t in range(level + params.r, last + 1):
        ot = _offset(omega, t, n)
        thr = float(params.sep_factor) * 2.0 ** (level * params.gamma(axis) + t * (1 - params.gamma(axis)))
        d = math.inf
        span = (1 << t) - (1 << level)
        for lo, o in zip(lower, ot):
            a = (lo - o) % (1 << t)
            d = min(d, a, span - a)
        if d <= thr:
            return False
    return True


def pack_omega(omega: Sequence[int], n: int) -> str:
    """Hex packing: one fixed-width hex group per level, finest first."""
    width = max(1, (n + 3) // 4)
    return "".join(format(int(w), f"0{width}x") for w in omega)


def unpack_omega(text: str, n: int) -> tuple:
    width = max(1, (n + 3) // 4)
    if len(text) % width:
        raise ConfigError(f"packed omega {text!r} has bad length")
    return tuple(int(text[i:i + width], 16) for i in range(0, len(text), width))


@dataclass(frozen=True)
class ProductGrid:
    grid1: ShiftedGrid
    grid2: ShiftedGrid

    def __post_init__(self):
        if self.grid1.axis != 1 or self.grid2.axis != 2:
            raise ConfigError("a product grid needs an axis-1 and an axis-2 grid")
        if self.grid1.params != self.grid2.params:
            raise ConfigError("product grid factors must share LatticeParams")

    @property
    def params(self) -> LatticeParams:
        return self.grid1.params

    def grid(self, axis: int) -> ShiftedGrid:
        return self.grid1 if _check_axis(axis) == 1 else self.grid2


def enumerate_grid(params: LatticeParams, omega: Sequence[int], axis: int = 1) -> ShiftedGrid:
    """Build the shifted grid; raises ConfigError on a malformed ``omega``."""
    return ShiftedGrid(params, axis, tuple(omega))


def effective_levels(params: LatticeParams) -> int:
    """Number of leading shift components that change the grid.

    On a torus the component at level ``S-1`` only translates the top cube,
    which is the whole torus, so it is inert.
    """
    return params.top - 1 if params.periodic else params.top


def all_omegas(params: LatticeParams, axis: int = 1, effective_only: bool = False) -> Iterator[tuple]:
    """Every shift sequence, in lexicographic order (finest level fastest)."""
    S = params.top
    n = params.n(axis)
    k = effective_levels(params) if effective_only else S
    for combo in itertools.product(range(1 << n), repeat=k):
        yield tuple(reversed(combo)) + (0,) * (S - k)


def is_good(I: DyadicCube, grid: ShiftedGrid) -> bool:
    """True when ``I`` keeps its distance from the boundaries of much larger cubes."""
    grid.index(I)
    return grid.is_good(I)


@dataclass(frozen=True)
class PiGood:
    """Per-level probability that a shifted standard cube is good."""

    axis: int
    by_level: Mapping[int, Fraction]
    mode: str
    samples: int
    seed: int | None = None
    ref_pos: tuple = field(default=())

    def __getitem__(self, level: int) -> Fraction:
        return self.by_level[level]

    @property
    def feasible(self) -> bool:
        return all(v > 0 for v in self.by_level.values())

    @property
    def value(self) -> Fraction | None:
        vals = set(self.by_level.values())
        return vals.pop() if len(vals) == 1 else None

    def minimum(self) -> Fraction:
        return min(self.by_level.values())

    def to_dict(self) -> dict:
        return {
            "axis": self.axis,
            "mode": self.mode,
            "samples": self.samples,
            "seed": self.seed,
            "by_level": {str(k): f"{v.numerator}/{v.denominator}" for k, v in sorted(self.by_level.items())},
        }


def pi_good(params: LatticeParams, axis: int = 1, ref_pos: Sequence[int] | None = None,
            budget: int = 1 << 24, samples: int = 4096, seed: int = 0,
            require_feasible: bool = False) -> PiGood:
    """Goodness probability of a fixed standard cube under a random shift.

    Exact enumeration over every ``omega`` when ``2^(n S)`` fits ``budget``;
    otherwise a sampled estimate with the recorded seed.  The result is given
    per level because the finite lattice makes it level dependent.
    """
    _check_axis(axis)
    n = params.n(axis)
    S = params.top
    ref = tuple(ref_pos) if ref_pos is not None else (0,) * n
    total = 1 << (n * S)
    good = {s: 0 for s in range(S + 1)}
    if total <= budget:
        mode, count, rng_seed = "exact", total, None
        source = all_omegas(params, axis)
    else:
        mode, count, rng_seed = "sampled", samples, seed
        rng = np.random.default_rng(seed)
        source = (tuple(int(x) for x in rng.integers(0, 1 << n, size=S)) for _ in range(samples))
    for om in source:
        for s in range(S + 1):
            pos = _reference_position(params, om, s, ref, n)
            if _is_good_raw(params, axis, om, s, pos):
                good[s] += 1
    res = PiGood(axis, {s: Fraction(g, count) for s, g in good.items()}, mode, count, rng_seed, ref)
    if require_feasible and not res.feasible:
        bad = [s for s, v in res.by_level.items() if v == 0]
        raise InfeasibleConfiguration(f"pi_good vanishes at levels {bad}")
    return res


def _reference_position(params, omega, level, ref, n) -> tuple:
    """Position, in grid coordinates, of the standard cube anchored at ``ref``.

    ``ref`` is a position of the standard level grid; the shifted cube keeps
    the same position index (it is the standard cube translated by o_s).
    """
    count = params.ncell >> level
    return tuple(int(p) % count for p in ref)


def pi_good_for_cube(params: LatticeParams, axis: int, level: int, ref_pos: Sequence[int]) -> Fraction:
    """Exact goodness probability of one standard cube (all shifts enumerated)."""
    n = params.n(axis)
    total = 0
    good = 0
    for om in all_omegas(params, axis):
        total += 1
        if _is_good_raw(params, axis, om, level, _reference_position(params, om, level, ref_pos, n)):
            good += 1
    return Fraction(good, total)


# -- truncations D(N) ------------------------------------------------------
def _unit_box_interval(params: LatticeParams, N: int) -> tuple:
    """Cell interval of 2^N times the unit cube [-1/2, 1/2)."""
    c0 = 1 << (params.M + params.L)
    half = Fraction(1 << params.L, 2) * Fraction(2) ** N
    return (c0 - half, c0 + half)


def relative_distance_to_box(grid: ShiftedGrid, cube: DyadicCube, N: int) -> Fraction:
    lo_b, hi_b = _unit_box_interval(grid.params, N)
    side_b = hi_b - lo_b
    period = grid.ncell if grid.periodic else None
    gap = Fraction(0)
    for a0, a1 in grid.intervals(cube):
        if period is not None:
            g = _gap_frac((Fraction(a0), Fraction(a1)), (lo_b, hi_b), period)
        else:
            g = max(Fraction(0), lo_b - a1, a0 - hi_b)
        gap = max(gap, g)
    side_c = Fraction(1 << grid.level_of(cube))
    return gap / max(side_c, side_b)


def _gap_frac(x, y, period) -> Fraction:
    (a0, a1), (b0, b1) = x, y
    la, lb = a1 - a0, b1 - b0
    if la >= period or lb >= period:
        return Fraction(0)
    if (b0 - a0) % period < la or (a0 - b0) % period < lb:
        return Fraction(0)
    return min((b0 - a1) % period, (a0 - b1) % period)


def in_DN(I: DyadicCube, N: int, grid: ShiftedGrid) -> bool:
    """Membership in D(N): scale in [2^-N, 2^N] and rd(I, 2^N unit cube) <= N."""
    if N < 0:
        raise DomainError("N must be a nonnegative integer")
    if not -N <= I.scale_exp <= N:
        return False
    return relative_distance_to_box(grid, I, N) <= N


def DN_mask(grid: ShiftedGrid, level: int, N: int) -> np.ndarray:
    return np.array([in_DN(c, N, grid) for c in grid.cubes(level)], dtype=bool)


def count_DN(grid: ShiftedGrid, N: int) -> int:
    """Number of lattice cubes in D(N); enforces the cardinality bound."""
    cnt = sum(int(DN_mask(grid, s, N).sum()) for s in range(grid.S + 1))
    bound = 2 ** (3 * grid.n * N + grid.n + 1)
    if cnt > bound:
        raise InvariantViolation(f"|D(N)| = {cnt} exceeds {bound}", witness={"N": N, "grid": grid.grid_id})
    return cnt


# -- triples -----------------------------------------------------------------
class AncestorCase(str, enum.Enum):
    SEPARATED_BOUND = "SeparatedBound"
    ADJACENT_BOUND = "AdjacentBound"
    NESTED = "Nested"


class AncestorResult(NamedTuple):
    Q: DyadicCube
    case: AncestorCase
    constant: float


class TripleClass(str, enum.Enum):
    SEPARATED = "Separated"
    ADJACENT = "Adjacent"
    NESTED = "Nested"


def _check_triple(I, J, K, grid: ShiftedGrid, check_good: bool = True):
    li, lj, lk = grid.level_of(I), grid.level_of(J), grid.level_of(K)
    for c in (I, J, K):
        grid.index(c)
    if not (lk <= li and li - lj in (0, 1)):
        raise DomainError(f"need l(K) <= l(I) in {{l(J), 2 l(J)}}; got levels {li}, {lj}, {lk}")
    if check_good and not grid.is_good(K):
        raise DomainError(f"K = {K} is not good")
    return li, lj, lk


def smallest_common_ancestor(grid: ShiftedGrid, cubes: Sequence[DyadicCube]) -> DyadicCube:
    start = max(grid.level_of(c) for c in cubes)
    for t in range(start, grid.S + 1):
        anc = {grid.ancestor(c, t) for c in cubes}
        if len(anc) == 1:
            return anc.pop()
    raise LatticeRangeError("no common ancestor inside the finite lattice; enlarge M")


def _separation(I, J, K, grid: ShiftedGrid):
    lj, lk = grid.level_of(J), grid.level_of(K)
    dmax = max(grid.distance_cells(K, I), grid.distance_cells(K, J))
    return dmax, grid.bad_threshold_cells(lk, lj)


def classify_triple(I: DyadicCube, J: DyadicCube, K: DyadicCube, grid: ShiftedGrid) -> TripleClass:
    """Separated / adjacent / nested, with an explicit exclusivity check.

    ``I`` is the larger (or equal) of the two big cubes.  Nested requires
    ``K`` strictly inside ``I``; the case ``K = I = J`` counts as adjacent.
    """
    _check_triple(I, J, K, grid)
    dmax, thr = _separation(I, J, K, grid)
    nested = grid.contains(J, K) and grid.contains(I, J) and K != I
    separated = dmax > thr
    adjacent = (not separated) and (
        not grid.intersects(K, I) or not grid.intersects(K, J) or K == I
    )
    flags = [separated, adjacent, nested]
    if sum(flags) != 1:
        raise InvariantViolation("triple classification is not a partition",
                                 witness={"I": I, "J": J, "K": K, "flags": flags})
    if nested:
        return TripleClass.NESTED
    return TripleClass.SEPARATED if separated else TripleClass.ADJACENT


def common_ancestor(I: DyadicCube, J: DyadicCube, K: DyadicCube, grid: ShiftedGrid) -> AncestorResult:
    """Smallest cube containing I, J and K together with the applicable bound.

    ``constant`` is, for separated triples, the realized ratio
    ``max(d(K,I), d(K,J)) / (l(K)^gamma l(Q)^(1-gamma))`` and, for adjacent
    triples, ``l(Q)/l(K)`` (asserted ``<= 2^r``).
    """
    tag = classify_triple(I, J, K, grid)
    Q = smallest_common_ancestor(grid, (I, J, K))
    lq, lk = grid.level_of(Q), grid.level_of(K)
    if tag is TripleClass.NESTED:
        return AncestorResult(Q, AncestorCase.NESTED, float(2 ** (lq - lk)))
    if tag is TripleClass.SEPARATED:
        dmax, _ = _separation(I, J, K, grid)
        g = grid.params.gamma(grid.axis)
        c = dmax / 2.0 ** (lk * g + lq * (1 - g))
        if not c > 0:
            raise InvariantViolation("separated triple with vanishing distance", witness=(I, J, K))
        return AncestorResult(Q, AncestorCase.SEPARATED_BOUND, c)
    if lq - lk > grid.params.r:
        raise InvariantViolation("adjacent triple whose common ancestor is too large",
                                 witness={"I": I, "J": J, "K": K, "Q": Q})
    return AncestorResult(Q, AncestorCase.ADJACENT_BOUND, float(2 ** (lq - lk)))


def census(grid: ShiftedGrid) -> dict:
    """JSON-ready summary: parameters, packed omega and good counts per scale."""
    p = grid.params
    return {
        "params": p.to_dict(),
        "axis": grid.axis,
        "omega": pack_omega(grid.omega, grid.n),
        "goodCount": {str(s - p.L): int(grid.good_mask(s).sum()) for s in range(grid.S + 1)},
        "cubeCount": {str(s - p.L): grid.count(s) for s in range(grid.S + 1)},
    }
