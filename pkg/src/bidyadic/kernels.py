"""Bilinear bi-parameter kernels on the lattice, their discrete forms and
numerical checks of the kernel and cancellation hypotheses.

A discrete operator is stored as a finite sum of tensor products
``sum_r c_r A1_r (x) A2_r`` where ``Ai_r[x, y, z]`` is a per-axis array over
(output cell, slot-1 cell, slot-2 cell) that already includes the cell
volumes.  The trilinear form is

    <T(f1, f2), f3> = sum_r c_r sum A1_r[x1,y1,z1] A2_r[x2,y2,z2]
                       f1[y1,y2] f2[z1,z2] f3[x1,x2].

Singular kernels are sampled at cell centers with the triple-diagonal cells
(``x = y = z`` in a parameter) left out; this is the lattice principal value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DomainError
from .haar import StepFunction
from .lattice import DyadicCube, LatticeParams, ShiftedGrid, enumerate_grid

__all__ = [
    "DecayFunction",
    "DecayTriple",
    "AxisKernel",
    "KernelSpec",
    "DiscreteOperator",
    "builtin_kernels",
    "KERNEL_NAMES",
    "bruteforce_form",
    "kernel_integral",
    "adjoint_form",
    "check_kernel_conditions",
    "hypothesis_tests",
    "aux_integral_bounds",
    "f2_tilde",
    "f3_tilde",
    "relative_distance_continuous",
]


# -- decay factors -------------------------------------------------------------
@dataclass(frozen=True)
class DecayFunction:
    """A named monotone profile on ``[0, inf)``.

    ``one``: 1.  ``rise``: ``min(1, (t/scale)^alpha)``.  ``fall``:
    ``(1 + t/scale)^-beta``.  ``const``: ``cap``.
    """

    kind: str = "one"
    alpha: float = 1.0
    beta: float = 1.0
    scale: float = 1.0
    cap: float = 1.0

    def __post_init__(self):
        if self.kind not in ("one", "rise", "fall", "const"):
            raise ConfigError(f"unknown decay profile {self.kind!r}")
        if self.scale <= 0 or self.alpha <= 0 or self.beta <= 0 or self.cap <= 0:
            raise ConfigError("decay parameters must be positive")

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "one":
            return np.ones_like(t)
        if self.kind == "const":
            return np.full_like(t, self.cap)
        if self.kind == "rise":
            return np.minimum(1.0, (t / self.scale) ** self.alpha)
        return (1.0 + t / self.scale) ** (-self.beta)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "alpha": self.alpha, "beta": self.beta, "scale": self.scale, "cap": self.cap}


@dataclass(frozen=True)
class DecayTriple:
    F1: DecayFunction = DecayFunction()
    F2: DecayFunction = DecayFunction()
    F3: DecayFunction = DecayFunction()

    def limits(self, tiny: float = 1e-9, huge: float = 1e9) -> dict:
        return {"F1(0+)": float(self.F1(tiny)), "F2(inf)": float(self.F2(huge)), "F3(inf)": float(self.F3(huge))}

    def vanishing(self, tol: float = 1e-3) -> bool:
        return all(v <= tol for v in self.limits().values())

    def to_dict(self) -> dict:
        return {"F1": self.F1.to_dict(), "F2": self.F2.to_dict(), "F3": self.F3.to_dict()}


# -- geometry helpers -------------------------------------------------------------
def _axis_points(params: LatticeParams, axis: int) -> np.ndarray:
    """Cell-center coordinates of one parameter, shape ``(cells, n)``."""
    c = params.cell_centers()
    n = params.n(axis)
    grids = np.meshgrid(*([c] * n), indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=-1)


def _diff(a: np.ndarray, b: np.ndarray, period: float | None) -> np.ndarray:
    d = a - b
    if period is not None:
        d = (d + period / 2) % period - period / 2
    return d


def _odd_part(d: np.ndarray, period: float | None) -> np.ndarray:
    """Odd numerator of the Riesz term.

    On the torus the minimal-image difference jumps at ``|d| = P/2``; the
    smooth periodic replacement ``(P / 2 pi) sin(2 pi d / P)`` agrees with
    ``d`` to second order and vanishes at the tie, which keeps the kernel
    Lipschitz.  The tie is zeroed explicitly so antisymmetry is exact.
    """
    if period is None:
        return d
    out = period / (2 * np.pi) * np.sin(2 * np.pi * d / period)
    return np.where(np.isclose(np.abs(d), period / 2, rtol=0, atol=1e-12), 0.0, out)


# -- kernels -------------------------------------------------------------------------
@dataclass(frozen=True)
class AxisKernel:
    """One-parameter bilinear kernel ``k(x, y, z)`` (x: output variable).

    ``kind='riesz'``: ``((x-y)_1 + (x-z)_1) / D^(2n+1)``.
    ``kind='cz'``: normalized ``[odd + lam / D^(2n)] F1(D) F2(D) F3(s)
    (1 + mu cos(2 pi x_1 / P)) (1 + rough (-1)^cell(x))`` where the odd part is
    the Riesz term, ``D = |x-y| + |x-z|`` and ``s = |x+y| + |x+z|``.
    """

    kind: str = "cz"
    decay: DecayTriple = DecayTriple()
    lam: float = 0.5
    mu: float = 0.25
    rough: float = 0.0

    def __post_init__(self):
        if self.kind not in ("riesz", "cz"):
            raise ConfigError(f"unknown axis kernel {self.kind!r}")
        if self.lam < 0 or not 0 <= self.mu < 1 or not 0 <= self.rough < 1:
            raise ConfigError("need lam >= 0, 0 <= mu < 1 and 0 <= rough < 1")

    def norm_constant(self) -> float:
        if self.kind == "riesz":
            return 1.0
        return 1.0 / ((1.0 + self.lam) * (1.0 + self.mu) * (1.0 + self.rough))

    def evaluate(self, x, y, z, params: LatticeParams, axis: int, cell_x=None) -> np.ndarray:
        """Kernel values at coordinate arrays of shape ``(..., n)``; 0 where ``D = 0``."""
        n = params.n(axis)
        P = 2.0 ** (params.M + 1) if params.periodic else None
        dxy = _diff(x, y, P)
        dxz = _diff(x, z, P)
        D = np.abs(dxy).max(axis=-1) + np.abs(dxz).max(axis=-1)
        safe = np.where(D > 0, D, 1.0)
        odd = (_odd_part(dxy[..., 0], P) + _odd_part(dxz[..., 0], P)) / safe ** (2 * n + 1)
        if self.kind == "riesz":
            val = odd
        else:
            val = odd + self.lam / safe ** (2 * n)
            val = val * self.decay.F1(D) * self.decay.F2(D)
            if P is None:
                s = np.abs(x + y).max(axis=-1) + np.abs(x + z).max(axis=-1)
                val = val * self.decay.F3(s)
            if self.mu:
                base = P if P is not None else 2.0 ** (params.M + 1)
                val = val * (1.0 + self.mu * np.cos(2 * np.pi * x[..., 0] / base))
            if self.rough:
                if cell_x is None:
                    h = 2.0 ** (-params.L)
                    cell_x = np.floor((x[..., 0] + 2.0 ** params.M) / h).astype(int)
                val = val * (1.0 + self.rough * (-1.0) ** cell_x)
            val = val * self.norm_constant()
        return np.where(D > 0, val, 0.0)

    def envelope(self, x, y, z, params: LatticeParams, axis: int) -> np.ndarray:
        """``F(x,y,z) / D^(2n)`` with the declared product-form ``F``."""
        n = params.n(axis)
        P = 2.0 ** (params.M + 1) if params.periodic else None
        D = np.abs(_diff(x, y, P)).max(axis=-1) + np.abs(_diff(x, z, P)).max(axis=-1)
        F = self.F(x, y, z, params, axis)
        return np.where(D > 0, F / np.where(D > 0, D, 1.0) ** (2 * n), np.inf)

    def F(self, x, y, z, params: LatticeParams, axis: int) -> np.ndarray:
        P = 2.0 ** (params.M + 1) if params.periodic else None
        D = np.abs(_diff(x, y, P)).max(axis=-1) + np.abs(_diff(x, z, P)).max(axis=-1)
        if self.kind == "riesz":
            return np.ones_like(D)
        out = self.decay.F1(D) * self.decay.F2(D)
        if P is None:
            s = np.abs(x + y).max(axis=-1) + np.abs(x + z).max(axis=-1)
            out = out * self.decay.F3(s)
        return out

    def tensor(self, params: LatticeParams, axis: int) -> np.ndarray:
        """Dense ``A[x, y, z] = k(c_x, c_y, c_z) |cell|^3``; triple diagonal is 0."""
        pts = _axis_points(params, axis)
        C = pts.shape[0]
        X = pts[:, None, None, :]
        Y = pts[None, :, None, :]
        Z = pts[None, None, :, :]
        X, Y, Z = np.broadcast_arrays(X, Y, Z)
        cell_x = np.broadcast_to(np.arange(C)[:, None, None], (C, C, C))
        vals = self.evaluate(X, Y, Z, params, axis, cell_x=cell_x)
        return vals * params.cell_volume(axis) ** 3

    def to_dict(self) -> dict:
        return {"kind": self.kind, "decay": self.decay.to_dict(), "lam": self.lam, "mu": self.mu, "rough": self.rough}


@dataclass(frozen=True)
class KernelSpec:
    """A tensor kernel ``K = k1 (x) k2`` with its declared hypotheses.

    ``holder_constant`` is the constant in front of the declared ``F`` in the
    Hoelder-type conditions; the size condition is declared with constant 1.
    """

    name: str
    params: LatticeParams
    k1: AxisKernel
    k2: AxisKernel
    holder_constant: float = 16.0
    partial_constant: float = 8.0
    flags: tuple = ()
    m: int = 2

    def axis_kernel(self, axis: int) -> AxisKernel:
        return self.k1 if axis == 1 else self.k2

    @property
    def deltas(self) -> tuple:
        return (self.params.delta1, self.params.delta2)

    def evaluate(self, x, y, z) -> np.ndarray:
        """Full kernel at points ``x=(x^1, x^2)`` etc., each a pair of ``(..., n_i)`` arrays."""
        v = self.k1.evaluate(x[0], y[0], z[0], self.params, 1)
        return v * self.k2.evaluate(x[1], y[1], z[1], self.params, 2)

    def cube_profile(self, axis: int, grid: ShiftedGrid, cube: DyadicCube) -> float:
        """Declared cube profile ``F1(l) F2(l) F3(rd(I, unit cube))``."""
        k = self.axis_kernel(axis)
        if k.kind == "riesz":
            return 1.0
        ell = float(grid.side(cube))
        out = float(k.decay.F1(ell) * k.decay.F2(ell))
        if not self.params.periodic:
            c = np.array([float(v) for v in grid.center(cube)])
            out *= float(k.decay.F3(relative_distance_continuous(c, ell, np.zeros_like(c), 1.0)))
        return out

    def operator(self) -> "DiscreteOperator":
        return DiscreteOperator(self.params, [(1.0, self.k1.tensor(self.params, 1), self.k2.tensor(self.params, 2))],
                                name=self.name)

    def to_dict(self) -> dict:
        return {"name": self.name, "params": self.params.to_dict(), "k1": self.k1.to_dict(), "k2": self.k2.to_dict(),
                "holder_constant": self.holder_constant,
                "partial_constant": self.partial_constant, "flags": list(self.flags), "m": self.m}


KERNEL_NAMES = ("riesz_tensor", "compact_cz", "plain_cz", "rough_cz")


def _default_decay(periodic: bool, alpha: float, beta: float, scale1: float, scale2: float, beta3: float) -> DecayTriple:
    return DecayTriple(DecayFunction("rise", alpha=alpha, scale=scale1),
                       DecayFunction("fall", beta=beta, scale=scale2),
                       DecayFunction("fall", beta=beta3, scale=1.0))


def builtin_kernels(name: str, params: LatticeParams, **kw) -> KernelSpec:
    """Named kernels.

    ``riesz_tensor``: tensor product of the bilinear Riesz kernels (an SIO with
    no decay).  ``compact_cz``: the decaying model kernel; keywords ``alpha``,
    ``beta``, ``beta3``, ``scale1``, ``scale2``, ``lam``, ``mu``.
    ``plain_cz``: the odd part of the same envelope with every decay factor
    equal to 1.
    ``rough_cz``: ``compact_cz`` times a cell-parity factor of size ``rough``,
    which destroys the Hoelder regularity at the cell scale.
    """
    if name == "riesz_tensor":
        k = AxisKernel("riesz")
        return KernelSpec(name, params, k, k, flags=("H1", "H2"))
    alpha = float(kw.get("alpha", 1.0))
    beta = float(kw.get("beta", 1.0))
    beta3 = float(kw.get("beta3", 2.0))
    scale1 = float(kw.get("scale1", 1.0))
    scale2 = float(kw.get("scale2", 1.0))
    lam = float(kw.get("lam", 0.5))
    mu = float(kw.get("mu", 0.25))
    if name == "compact_cz":
        d = _default_decay(params.periodic, alpha, beta, scale1, scale2, beta3)
        k = AxisKernel("cz", d, lam, mu)
        return KernelSpec(name, params, k, k, flags=("H1", "H2", "H3", "H4", "H5"))
    if name == "plain_cz":
        # the even part needs F1 to be integrable on the diagonal, so the
        # decay-free control keeps only the odd part unless asked otherwise
        k = AxisKernel("cz", DecayTriple(), float(kw.get("lam", 0.0)), mu)
        return KernelSpec(name, params, k, k, flags=("H1", "H2"))
    if name == "rough_cz":
        d = _default_decay(params.periodic, alpha, beta, scale1, scale2, beta3)
        k = AxisKernel("cz", d, lam, mu, rough=float(kw.get("rough", 0.5)))
        return KernelSpec(name, params, k, k, flags=("H1",))
    raise ConfigError(f"unknown kernel {name!r}; known: {', '.join(KERNEL_NAMES)}")


# -- discrete operators -------------------------------------------------------------------
_PERMS = {0: (0, 1, 2), 1: (1, 0, 2), 2: (2, 1, 0)}


class DiscreteOperator:
    """Finite sum of per-axis tensor products acting as a bilinear form."""

    def __init__(self, params: LatticeParams, terms: Sequence, name: str = "operator"):
        self.params = params
        self.name = name
        C1, C2 = params.cells(1), params.cells(2)
        out = []
        for c, A1, A2 in terms:
            A1 = np.asarray(A1, dtype=float)
            A2 = np.asarray(A2, dtype=float)
            if A1.shape != (C1,) * 3 or A2.shape != (C2,) * 3:
                raise ConfigError("per-axis tensors must have shape (cells,)*3")
            out.append((float(c), A1, A2))
        self.terms = out

    @classmethod
    def zero(cls, params: LatticeParams) -> "DiscreteOperator":
        return cls(params, [], name="zero")

    @classmethod
    def from_dense(cls, params: LatticeParams, K6: np.ndarray, tol: float = 1e-14) -> "DiscreteOperator":
        """Split a dense ``K[x1,y1,z1,x2,y2,z2]`` (volumes included) by SVD."""
        C1, C2 = params.cells(1), params.cells(2)
        Mx = np.asarray(K6, dtype=float).reshape(C1 ** 3, C2 ** 3)
        U, s, Vt = np.linalg.svd(Mx, full_matrices=False)
        keep = s > tol * (s[0] if s.size else 1.0)
        terms = [(s[i], U[:, i].reshape((C1,) * 3), Vt[i].reshape((C2,) * 3)) for i in np.flatnonzero(keep)]
        return cls(params, terms, name="dense")

    def __add__(self, other: "DiscreteOperator") -> "DiscreteOperator":
        if other.params != self.params:
            raise ConfigError("operators live on different lattices")
        return DiscreteOperator(self.params, self.terms + other.terms, name=f"{self.name}+{other.name}")

    def scaled(self, c: float) -> "DiscreteOperator":
        return DiscreteOperator(self.params, [(c * a, A1, A2) for a, A1, A2 in self.terms], name=self.name)

    def dense(self) -> np.ndarray:
        C1, C2 = self.params.cells(1), self.params.cells(2)
        out = np.zeros((C1,) * 3 + (C2,) * 3)
        for c, A1, A2 in self.terms:
            out += c * np.multiply.outer(A1, A2)
        return out

    def form(self, f1: StepFunction, f2: StepFunction, f3: StepFunction) -> float:
        """Exact lattice sum of the trilinear form for two-parameter inputs."""
        F1, F2, F3 = (_two_param(f) for f in (f1, f2, f3))
        total = 0.0
        for c, A1, A2 in self.terms:
            G = np.einsum("xyz,yb->xzb", A1, F1, optimize=True)
            H = np.einsum("xzb,zc->xbc", G, F2, optimize=True)
            Wt = np.einsum("ubc,au->abc", A2, F3, optimize=True)
            total += c * float(np.einsum("xbc,xbc->", H, Wt))
        return total

    def apply(self, f1: StepFunction, f2: StepFunction) -> StepFunction:
        """The function ``T(f1, f2)``, so that ``form(f1, f2, f3) = <T(f1, f2), f3>``."""
        F1, F2 = _two_param(f1), _two_param(f2)
        out = np.zeros((self.params.cells(1), self.params.cells(2)))
        for c, A1, A2 in self.terms:
            G = np.einsum("xyz,yb->xzb", A1, F1, optimize=True)
            G = np.einsum("xzb,zc->xbc", G, F2, optimize=True)
            out += c * np.einsum("ubc,xbc->xu", A2, G, optimize=True)
        vol = self.params.cell_volume(1) * self.params.cell_volume(2)
        return StepFunction(self.params, (1, 2), out / vol)

    def form_tensor(self, g1: Sequence, g2: Sequence, g3: Sequence) -> float:
        """Form on tensor inputs ``f_j = g_j[0] (x) g_j[1]`` given as per-axis arrays."""
        total = 0.0
        for c, A1, A2 in self.terms:
            p1 = np.einsum("xyz,x,y,z->", A1, g3[0], g1[0], g2[0], optimize=True)
            p2 = np.einsum("xyz,x,y,z->", A2, g3[1], g1[1], g2[1], optimize=True)
            total += c * p1 * p2
        return float(total)

    def adjoint(self, j1: int, j2: int) -> "DiscreteOperator":
        """Partial adjoints: swap the output slot with slot ``j1`` (axis 1) and ``j2`` (axis 2)."""
        if j1 not in _PERMS or j2 not in _PERMS:
            raise DomainError("adjoint indices must lie in {0, 1, 2}")
        terms = [(c, np.transpose(A1, _PERMS[j1]), np.transpose(A2, _PERMS[j2])) for c, A1, A2 in self.terms]
        return DiscreteOperator(self.params, terms, name=f"{self.name}^({j1},{j2})*")


def _two_param(f) -> np.ndarray:
    if isinstance(f, StepFunction):
        if f.axes != (1, 2):
            raise DomainError("bilinear forms take two-parameter functions")
        return f.values
    return np.asarray(f, dtype=float)


def _as_operator(T) -> DiscreteOperator:
    if isinstance(T, DiscreteOperator):
        return T
    if isinstance(T, KernelSpec):
        return T.operator()
    raise ConfigError(f"cannot evaluate {type(T).__name__} as a discrete operator")


def bruteforce_form(T, f1: StepFunction, f2: StepFunction, f3: StepFunction) -> float:
    """Exact quadrature of the form; also accepts any object with a ``form`` method."""
    if isinstance(T, (DiscreteOperator, KernelSpec)):
        return _as_operator(T).form(f1, f2, f3)
    if hasattr(T, "form"):
        return T.form(f1, f2, f3)
    raise ConfigError(f"cannot evaluate {type(T).__name__}")


def adjoint_form(T, j1: int, j2: int) -> DiscreteOperator:
    return _as_operator(T).adjoint(j1, j2)


def kernel_integral(spec: KernelSpec, f1: StepFunction, f2: StepFunction, f3: StepFunction) -> float:
    """Direct sum of ``K(x, y, z) f1(y) f2(z) f3(x)`` over the support cells.

    Evaluates the full kernel pointwise (no tensor splitting), so it is an
    independent path to the same number for inputs with separated supports.
    """
    p = spec.params
    P1, P2 = _axis_points(p, 1), _axis_points(p, 2)
    vol = (p.cell_volume(1) * p.cell_volume(2)) ** 3
    s1 = np.argwhere(f1.values != 0)
    s2 = np.argwhere(f2.values != 0)
    s3 = np.argwhere(f3.values != 0)
    total = 0.0
    for a, b in s3:
        x = (P1[a][None, None, :], P2[b][None, None, :])
        y = (P1[s1[:, 0]][:, None, :], P2[s1[:, 1]][:, None, :])
        z = (P1[s2[:, 0]][None, :, :], P2[s2[:, 1]][None, :, :])
        K = spec.evaluate(x, y, z)
        w = f1.values[s1[:, 0], s1[:, 1]][:, None] * f2.values[s2[:, 0], s2[:, 1]][None, :]
        total += f3.values[a, b] * float((K * w).sum())
    return total * vol


# -- kernel-condition sampling ---------------------------------------------------------------
def _neighbor(params: LatticeParams, axis: int, idx: int, bound: float, rng) -> tuple | None:
    """A cell at l^inf distance ``2^j h`` from ``idx`` with ``2^j h < bound/2``.

    Half the draws use the neighbouring cell (``j = 0``), where roughness at
    the lattice scale shows; the rest draw ``j`` uniformly from the ladder.
    Returns ``(cell, distance)``.
    """
    h = 2.0 ** (-params.L)
    n = params.n(axis)
    N = params.ncell
    jmax = int(math.floor(math.log2(bound / 2 / h) - 1e-12)) if bound / 2 > h else -1
    if jmax < 0:
        return None
    steps = 1 if rng.random() < 0.5 else 1 << int(rng.integers(jmax + 1))
    coord = list(np.unravel_index(idx, (N,) * n))
    d = int(rng.integers(n))
    sgn = 1 if rng.random() < 0.5 else -1
    c = coord[d] + sgn * steps
    if params.periodic:
        c %= N
    elif not 0 <= c < N:
        c = coord[d] - sgn * steps
        if not 0 <= c < N:
            return None
    coord[d] = c
    return int(np.ravel_multi_index(coord, (N,) * n)), steps * h


def _dist(params, a, b):
    P = 2.0 ** (params.M + 1) if params.periodic else None
    return float(np.abs(_diff(a, b, P)).max())


@dataclass
class ConditionReport:
    worst: dict
    witnesses: dict
    samples: int
    decay_limits: dict
    partial_bounds: dict
    passed: bool

    def to_dict(self) -> dict:
        return {"worst": self.worst, "witnesses": self.witnesses, "samples": self.samples,
                "decay_limits": self.decay_limits, "partial_bounds": self.partial_bounds, "passed": self.passed}


def check_kernel_conditions(spec: KernelSpec, budget: int = 1000, seed: int = 0, tol: float = 1.0 + 1e-12) -> ConditionReport:
    """Sample admissible tuples and report the worst ratio of each kernel condition.

    Ratios are against the declared envelope: constant 1 for the size
    condition, ``holder_constant`` per parameter for the two Hoelder-type
    conditions and ``partial_constant`` for the partial-kernel bounds.
    Tuples with ``|x - x~|`` exactly at the admissibility boundary are not drawn.
    """
    p = spec.params
    rng = np.random.default_rng(seed)
    P = (_axis_points(p, 1), _axis_points(p, 2))
    C = (P[0].shape[0], P[1].shape[0])
    worst = {"size": 0.0, "holder": 0.0, "mixed": 0.0}
    wit: dict = {}
    done = 0
    for _ in range(budget * 4):
        if done >= budget:
            break
        ix = [rng.integers(C[i], size=3) for i in range(2)]
        pts = [(P[i][ix[i][0]], P[i][ix[i][1]], P[i][ix[i][2]]) for i in range(2)]
        D = [_dist(p, a, b) + _dist(p, a, c) for a, b, c in pts]
        if min(D) == 0:
            continue
        mx = [max(_dist(p, a, b), _dist(p, a, c)) for a, b, c in pts]
        nbr = [_neighbor(p, i + 1, int(ix[i][0]), mx[i], rng) for i in range(2)]
        if nbr[0] is None or nbr[1] is None:
            continue
        nb = [t[0] for t in nbr]
        xt = [P[i][nb[i]] for i in range(2)]
        r = [_dist(p, pts[i][0], xt[i]) for i in range(2)]
        done += 1
        ks = [spec.axis_kernel(i + 1) for i in range(2)]
        v = [ks[i].evaluate(pts[i][0], pts[i][1], pts[i][2], p, i + 1, cell_x=int(ix[i][0])) for i in range(2)]
        vt = [ks[i].evaluate(xt[i], pts[i][1], pts[i][2], p, i + 1, cell_x=nb[i]) for i in range(2)]
        env = [ks[i].envelope(pts[i][0], pts[i][1], pts[i][2], p, i + 1) for i in range(2)]
        bound = float(env[0] * env[1])
        K00 = float(v[0] * v[1])
        ratios = {
            "size": abs(K00) / bound,
            # K(x) - K(x^1, x~^2) - K(x~^1, x^2) + K(x~) factors for tensor kernels
            "holder": abs(float((v[0] - vt[0]) * (v[1] - vt[1])))
            / (spec.holder_constant ** 2 * bound
               * (r[0] / D[0]) ** p.delta1 * (r[1] / D[1]) ** p.delta2),
            "mixed": abs(float((v[0] - vt[0]) * v[1])) / (spec.holder_constant * bound * (r[0] / D[0]) ** p.delta1),
        }
        for k, val in ratios.items():
            if val > worst[k]:
                worst[k] = val
                wit[k] = {"axis1": [int(t) for t in ix[0]], "axis2": [int(t) for t in ix[1]],
                          "xtilde": [int(nb[0]), int(nb[1])], "ratio": val}
    partial = _partial_bounds(spec)
    limits = {f"axis{i}": spec.axis_kernel(i).decay.limits() for i in (1, 2)}
    passed = all(v <= tol for v in worst.values()) and all(
        v <= spec.partial_constant * tol for v in partial.values())
    return ConditionReport(worst, wit, done, limits, partial, passed)


def _partial_bounds(spec: KernelSpec) -> dict:
    """Worst ``(C(1,1,1) + C(a,1,1)) / (F(I) |I|)`` over standard cubes, per axis.

    For a tensor kernel the partial kernel in one parameter is the other
    parameter's pairing times the one-parameter kernel, so the bound ``C``
    is that pairing.  ``a`` ranges over the two-sided sign profiles.
    """
    p = spec.params
    out = {}
    for axis in (1, 2):
        g = enumerate_grid(p, (0,) * p.top, axis)
        A = spec.axis_kernel(axis).tensor(p, axis)
        worst = 0.0
        for s in range(1, g.S + 1):
            for c in g.cubes(s):
                ind = g.indicator(c)
                prof = spec.cube_profile(axis, g, c)
                if prof <= 0:
                    continue
                a = _sign_profile(g, c)
                c0 = abs(np.einsum("xyz,x,y,z->", A, ind, ind, ind))
                c1 = abs(np.einsum("xyz,x,y,z->", A, ind, a, ind))
                vol = ind.sum() * p.cell_volume(axis)
                worst = max(worst, (c0 + c1) / (prof * vol))
        out[f"axis{axis}"] = float(worst)
    return out


def _sign_profile(grid: ShiftedGrid, cube: DyadicCube) -> np.ndarray:
    """``+1`` on the lower half of the cube, ``-1`` on the upper half (first coordinate)."""
    v = np.zeros(grid.params.cells(grid.axis))
    cells = grid.cells(cube)
    n = grid.n
    coords = np.array(np.unravel_index(cells, (grid.ncell,) * n))[0]
    lo = grid.lower_corner(cube)[0]
    rel = (coords - lo) % grid.ncell if grid.periodic else coords - lo
    half = 1 << (grid.level_of(cube) - 1)
    v[cells] = np.where(rel < half, 1.0, -1.0)
    return v


# -- hypotheses (H3), (H4) ------------------------------------------------------------------
@dataclass
class HypothesisReport:
    wcp: dict
    diag: dict
    scale_curves: dict
    position_curves: dict
    verdicts: dict

    def to_dict(self) -> dict:
        return {"wcp": self.wcp, "diag": self.diag, "scale_curves": self.scale_curves,
                "position_curves": self.position_curves, "verdicts": self.verdicts}


def _axis_pairings(A: np.ndarray, grid: ShiftedGrid, profiles: int, rng) -> list:
    """Per cube: (level, |center|, |<A(1,1),1>|/|I|, max diag-CMO pairing/|I|)."""
    p = grid.params
    rows = []
    for s in range(1, grid.S + 1):
        for c in grid.cubes(s):
            ind = grid.indicator(c)
            vol = ind.sum() * p.cell_volume(grid.axis)
            w = abs(np.einsum("xyz,x,y,z->", A, ind, ind, ind)) / vol
            best = 0.0
            prof = [_sign_profile(grid, c)]
            for _ in range(profiles):
                a = rng.uniform(-1, 1, size=ind.size) * ind
                a -= ind * (a.sum() / ind.sum())
                a /= max(1.0, np.abs(a).max())
                prof.append(a)
            for a in prof:
                for slot in range(3):
                    vecs = [ind, ind, ind]
                    vecs[slot] = a
                    best = max(best, abs(np.einsum("xyz,x,y,z->", A, *vecs)) / vol)
            cen = max(abs(float(t)) for t in grid.center(c))
            rows.append((s, cen, w, best))
    return rows


def _tail_verdict(curve: list, tol: float) -> str:
    """``decaying`` when every value in the last half of the curve is at most
    ``tol`` times the peak; a single finite-domain uptick at the end does not
    flip the verdict as long as it stays below that level."""
    vals = [v for _, v in curve]
    if len(vals) < 2 or max(vals) == 0:
        return "vanishing" if (vals and max(vals) == 0) else "undetermined"
    tail = vals[len(vals) // 2:]
    return "decaying" if max(tail) <= tol * max(vals) else "flat"


def hypothesis_tests(T, profiles: int = 4, seed: int = 0, tol: float = 0.5) -> HypothesisReport:
    """Weak-compactness and diagonal-CMO pairings of a tensor operator over all standard cubes.

    ``T`` must be a KernelSpec or a single-term DiscreteOperator, so that
    every rectangle pairing is the product of the per-axis pairings listed
    here; the per-axis rows are the fitted envelopes ``F^i(I^i)``.
    """
    op = _as_operator(T)
    if len(op.terms) != 1:
        raise ConfigError("hypothesis tests need a single tensor term")
    c, A1, A2 = op.terms[0]
    p = op.params
    rng = np.random.default_rng(seed)
    wcp, diag, scurves, pcurves, verdicts = {}, {}, {}, {}, {}
    for axis, A in ((1, A1), (2, A2)):
        g = enumerate_grid(p, (0,) * p.top, axis)
        rows = _axis_pairings(A * (abs(c) ** 0.5), g, profiles, rng)
        wcp[f"axis{axis}"] = [(r[0] - p.L, r[1], r[2]) for r in rows]
        diag[f"axis{axis}"] = [(r[0] - p.L, r[1], r[3]) for r in rows]
        env = {}
        h = 2.0 ** (-p.L)
        for s, cen, w, d in rows:
            # in bounded mode only cubes with the origin in their closure, so
            # that the scale curves do not pick up the position factor
            if p.periodic or cen <= 2.0 ** s * h / 2 + 1e-12:
                env[s] = max(env.get(s, 0.0), w, d)
        # small-scale limit: read the curve from coarse to fine
        sc = [(s - p.L, env[s]) for s in sorted(env, reverse=True)]
        scurves[f"axis{axis}"] = sc
        v = {"small_scale": _tail_verdict(sc, tol)}
        if not p.periodic:
            large = [(s - p.L, env[s]) for s in sorted(env)]
            v["large_scale"] = _tail_verdict(large, tol)
            # dyadic distance shells [0, 1), [1, 2), [2, 4), ... keyed by lower edge
            bins = {}
            for s, cen, w, d in rows:
                key = 0.0 if cen < 1 else 2.0 ** math.floor(math.log2(cen))
                bins[key] = max(bins.get(key, 0.0), w, d)
            pc = sorted(bins.items())
            pcurves[f"axis{axis}"] = pc
            v["far"] = _tail_verdict(pc, tol)
        verdicts[f"axis{axis}"] = v
    return HypothesisReport(wcp, diag, scurves, pcurves, verdicts)


# -- auxiliary integral estimates --------------------------------------------------------------
def relative_distance_continuous(c1, l1: float, c2, l2: float) -> float:
    """``d(A, B) / max(l(A), l(B))`` for cubes given by centers and sides (l^inf)."""
    gap = np.maximum(np.abs(np.asarray(c1, float) - np.asarray(c2, float)) - (l1 + l2) / 2, 0.0)
    return float(gap.max()) / max(l1, l2)


def f2_tilde(F2: DecayFunction, t: float, theta: float) -> float:
    kmax = int(math.ceil(60 / theta))
    return float(sum(2.0 ** (-k * theta) * float(F2(2.0 ** (-k) * t)) for k in range(kmax + 1)))


def f3_tilde(F3: DecayFunction, center, ell: float, theta: float) -> float:
    kmax = int(math.ceil(60 / theta))
    c = np.asarray(center, float)
    z = np.zeros_like(c)
    return float(sum(2.0 ** (-k * theta) * float(F3(relative_distance_continuous(c, 2.0 ** k * ell, z, 1.0)))
                     for k in range(kmax + 1)))


def _cells_coords(grid: ShiftedGrid, cells: np.ndarray) -> np.ndarray:
    pts = _axis_points(grid.params, grid.axis)
    return pts[cells]


def _dilated_cells(grid: ShiftedGrid, cube: DyadicCube, factor: int) -> np.ndarray:
    pts = _axis_points(grid.params, grid.axis)
    c = np.array([float(v) for v in grid.center(cube)])
    half = factor * float(grid.side(cube)) / 2
    inside = (np.abs(pts - c) < half).all(axis=1)
    return np.flatnonzero(inside)


def aux_integral_bounds(case: str, cubes: dict, spec: KernelSpec, axis: int = 1, grid: ShiftedGrid | None = None,
                        ancestor_const: float | None = None) -> dict:
    """Lattice quadrature of one auxiliary triple integral and its claimed bound.

    ``case`` is ``P``, ``Q``, ``R1`` or ``R2``; ``cubes`` holds ``I, J, K, Q``
    (P, Q) or ``J, K`` and optionally ``ell`` (R1, R2).  Returns lhs, rhs and
    their ratio.  Geometric preconditions are checked first.
    """
    p = spec.params
    g = grid or enumerate_grid(p, (0,) * p.top, axis)
    n = p.n(axis)
    delta = p.delta(axis)
    gam = p.gamma(axis)
    theta = float(p.theta)
    dec = spec.axis_kernel(axis).decay
    sep = float(p.sep_factor)
    if ancestor_const is None:
        ancestor_const = sep * 2.0 ** (-(1 - gam) * p.r)
    vol = p.cell_volume(axis)
    side = lambda c: float(g.side(c))
    cen = lambda c: np.array([float(v) for v in g.center(c)])
    meas = lambda c: len(g.cells(c)) * vol
    pts = _axis_points(p, axis)
    P = 2.0 ** (p.M + 1) if p.periodic else None

    def integrand(xs, ys, zs, f1_arg, power, factor):
        X = pts[xs][:, None, None, :]
        Y = pts[ys][None, :, None, :]
        Z = pts[zs][None, None, :, :]
        dxy = np.abs(_diff(X, Y, P)).max(axis=-1)
        dxz = np.abs(_diff(X, Z, P)).max(axis=-1)
        D = dxy + dxz
        s = np.abs(X + Y).max(axis=-1) + np.abs(X + Z).max(axis=-1)
        F = dec.F1(f1_arg(X, D)) * dec.F2(D) * dec.F3(1.0 + s / (1.0 + D))
        val = np.where(D > 0, F * factor / np.where(D > 0, D, 1.0) ** power, 0.0)
        return float(val.sum()) * vol ** 3

    if case in ("P", "Q"):
        I, J, K, Q = (cubes[k] for k in ("I", "J", "K", "Q"))
        for c in (I, J, K):
            if not g.contains(Q, c):
                raise DomainError(f"precondition failed: {c} is not inside Q")
        dKI, dKJ = g.distance_cells(K, I) * 2.0 ** (-p.L), g.distance_cells(K, J) * 2.0 ** (-p.L)
        dmax = max(dKI, dKJ)
        thr = sep * side(K) ** gam * side(J) ** (1 - gam)
        if case == "P":
            if side(K) > 2 * side(J):
                raise DomainError("precondition failed: l(K) <= 2 l(J)")
            if not dmax > thr:
                raise DomainError("precondition failed: max(d(K,I), d(K,J)) > c l(K)^gamma l(J)^(1-gamma)")
            if dmax < ancestor_const * side(K) ** gam * side(Q) ** (1 - gam):
                raise DomainError("precondition failed: max(d(K,I), d(K,J)) >= c' l(K)^gamma l(Q)^(1-gamma)")
            cK = cen(K)
            lhs = integrand(g.cells(K), g.cells(I), g.cells(J),
                            lambda X, D: np.abs(X - cK).max(axis=-1), 2 * n + delta, side(I) ** delta)
        else:
            if side(Q) > 4 * min(side(I), side(J), side(K)):
                raise DomainError("precondition failed: comparable sides, l(Q) <= 4 min(l(I), l(J), l(K))")
            if not dmax <= thr:
                raise DomainError("precondition failed: max(d(K,I), d(K,J)) <= c l(K)^gamma l(J)^(1-gamma)")
            if g.intersects(K, I) and g.intersects(K, J):
                raise DomainError("precondition failed: K meets neither I nor J disjointly")
            lhs = integrand(g.cells(K), g.cells(I), g.cells(J), lambda X, D: D, 2 * n, 1.0)
        FKQ = float(dec.F1(side(K))) * f2_tilde(dec.F2, side(K), theta) * f3_tilde(dec.F3, cen(Q), side(Q), theta)
        rhs = (side(K) / side(Q)) ** (delta / 2) * FKQ * meas(I) * meas(J) * meas(K) / meas(Q) ** 2
    elif case in ("R1", "R2"):
        J, K = cubes["J"], cubes["K"]
        if not g.contains(J, K):
            raise DomainError("precondition failed: K inside J")
        inJ = np.zeros(pts.shape[0], bool)
        inJ[g.cells(J)] = True
        if inJ.all():
            raise DomainError("precondition failed: J^c is empty on the lattice")
        Kc = g.cells(K)
        gap = np.abs(pts[Kc][:, None, :] - pts[~inJ][None, :, :]).max(axis=-1) if (~inJ).any() else np.array([[np.inf]])
        dKJc = float(gap.min()) - 2.0 ** (-p.L) if np.isfinite(gap.min()) else math.inf
        ell = float(cubes.get("ell", dKJc))
        if not (dKJc >= ell >= side(K)):
            raise DomainError("precondition failed: d(K, J^c) >= ell >= l(K)")
        three = _dilated_cells(g, K, 3)
        ys = three if case == "R1" else np.setdiff1d(np.arange(pts.shape[0]), three)
        cK = cen(K)
        lhs = integrand(Kc, ys, np.flatnonzero(~inJ), lambda X, D: np.abs(X - cK).max(axis=-1),
                        2 * n + delta, side(K) ** delta)
        rhs = (float(dec.F1(side(K)) * dec.F2(side(K))) * f3_tilde(dec.F3, cen(J), side(J), theta)
               * meas(K) * (side(K) / ell) ** delta)
    else:
        raise ConfigError(f"unknown case {case!r}")
    return {"case": case, "lhs": lhs, "rhs": rhs, "ratio": lhs / rhs if rhs > 0 else math.inf}
