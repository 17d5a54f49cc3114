"""Riesz-Kolmogorov compactness functionals for finite families of step functions.

Three oscillation functionals are available:

``KRWA``
    ``|| (avg_{y in B(0,r)} |tau_y f - f|^a)^(1/a) ||_{L^p(w)}``
``RKB``
    ``|| f - <f>_{B(., r)} ||_{L^p(w)}``
``KRLpq``
    ``sup_{|y| < r} || tau_y f - f ||_{L^p(w)}``

Balls use the sum over parameters of the sup norm inside each parameter.
Translations are exact for every real shift: a shifted step function is
constant on the pieces cut out of each cell by the fractional part of the
shift, so ladders may go below the cell side.  Averages and suprema over a
ball are taken over a fixed midpoint quadrature of translations scaled to
the radius.

On a bounded lattice functions are extended by zero and the weight by 1 so
that mass translated out of the domain is still counted.

Every finite family is precompact, so a verdict only describes the
behaviour down to the terminal rung of the ladders it was computed on.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, DomainError
from .haar import StepFunction, axis_basis
from .kernels import AxisKernel, _as_operator
from .lattice import LatticeParams
from .oscillation import standard_grid
from .weights import INF, Weight, as_exponent, ap_constant, weighted_norm

__all__ = [
    "VARIANTS",
    "CompactnessReport",
    "default_A_ladder",
    "resolved_r_ladder",
    "subcell_r_ladder",
    "rk_functionals",
    "sample_inputs",
    "probe_operator",
    "finite_rank_family",
    "shrinking_haar_family",
    "TensorDemoReport",
    "tensor_noncompact_demo",
]

VARIANTS = ("KRWA", "RKB", "KRLpq")
_P0_LADDER = (1.0, 1.25, 1.5, 2.0, 3.0, 4.0, 8.0)


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


@dataclass
class CompactnessReport:
    uniform_bound: float
    A_ladder: list
    tail_curve: list
    r_ladder: list
    oscillation_curve: list
    verdict: str
    settings: dict = field(default_factory=dict)

    @property
    def tail_end(self) -> float:
        return self.tail_curve[-1] if self.tail_curve else 0.0

    @property
    def oscillation_end(self) -> float:
        """Oscillation at the smallest positive radius."""
        pos = [v for r, v in zip(self.r_ladder, self.oscillation_curve) if r > 0]
        return pos[0] if pos else 0.0

    def to_dict(self) -> dict:
        return {
            "uniform_bound": self.uniform_bound,
            "tail": [[a, v] for a, v in zip(self.A_ladder, self.tail_curve)],
            "oscillation": [[r, v] for r, v in zip(self.r_ladder, self.oscillation_curve)],
            "verdict": self.verdict,
            "settings": self.settings,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def tail_csv(self) -> str:
        rows = ["A,tail"] + [f"{_fmt(a)},{_fmt(v)}" for a, v in zip(self.A_ladder, self.tail_curve)]
        return "\n".join(rows) + "\n"

    def oscillation_csv(self) -> str:
        rows = ["r,oscillation"] + [f"{_fmt(r)},{_fmt(v)}" for r, v in zip(self.r_ladder, self.oscillation_curve)]
        return "\n".join(rows) + "\n"


# -- ladders ----------------------------------------------------------------------
def default_A_ladder(params: LatticeParams) -> list:
    """Radii from the cell side up to a ball that covers the whole domain."""
    return [2.0 ** k for k in range(-params.L, params.M + 3)]


def resolved_r_ladder(params: LatticeParams) -> list:
    """``0`` and the dyadic radii from the cell side up to the domain side."""
    return [0.0] + [2.0 ** k for k in range(-params.L, params.M + 2)]


def subcell_r_ladder(params: LatticeParams, depth: int = 60) -> list:
    """The resolved ladder continued ``depth`` dyadic steps below the cell side."""
    return [0.0] + [2.0 ** k for k in range(-params.L - depth, -params.L)] + resolved_r_ladder(params)[1:]


# -- geometry ----------------------------------------------------------------------
class _Layout:
    """Coordinate layout of a family: one array dimension per coordinate."""

    def __init__(self, params: LatticeParams, axes: tuple, pad: int):
        self.params = params
        self.axes = axes
        self.owner = [a for a in axes for _ in range(params.n(a))]
        self.ndim = len(self.owner)
        self.h = 2.0 ** (-params.L)
        self.periodic = params.periodic
        self.pad = 0 if params.periodic else pad
        self.ncell = params.ncell
        self.shape = (self.ncell + 2 * self.pad,) * self.ndim
        self.cell_volume = self.h ** self.ndim

    def embed(self, values: np.ndarray, fill: float = 0.0) -> np.ndarray:
        """``(F, C...)`` family values -> ``(F, *shape)`` with padding."""
        arr = values.reshape((values.shape[0],) + (self.ncell,) * self.ndim)
        if not self.pad:
            return arr.astype(float)
        widths = [(0, 0)] + [(self.pad, self.pad)] * self.ndim
        return np.pad(arr.astype(float), widths, constant_values=fill)

    def radius(self) -> np.ndarray:
        """Sum over parameters of the sup norm of the cell center."""
        c = -(2.0 ** self.params.M) + (np.arange(self.shape[0]) - self.pad + 0.5) * self.h
        grids = np.meshgrid(*([np.abs(c)] * self.ndim), indexing="ij")
        out = np.zeros(self.shape)
        for a in self.axes:
            dims = [d for d in range(self.ndim) if self.owner[d] == a]
            out = out + np.max(np.stack([grids[d] for d in dims]), axis=0)
        return out

    def shift(self, arr: np.ndarray, offsets: tuple) -> np.ndarray:
        """``out[i] = arr[i + o]`` per coordinate, zero outside a bounded domain."""
        out = arr
        for d, o in enumerate(offsets):
            if o == 0:
                continue
            ax = d + 1
            if self.periodic:
                out = np.roll(out, -o, axis=ax)
            else:
                n = out.shape[ax]
                res = np.zeros_like(out)
                src = [slice(None)] * out.ndim
                dst = [slice(None)] * out.ndim
                if abs(o) < n:
                    if o > 0:
                        src[ax], dst[ax] = slice(o, n), slice(0, n - o)
                    else:
                        src[ax], dst[ax] = slice(0, n + o), slice(-o, n)
                    res[tuple(dst)] = out[tuple(src)]
                out = res
        return out

    def quadrature(self, r: float, q: int) -> np.ndarray:
        """Midpoint translations inside the open ball of radius ``r`` (rows are shifts)."""
        u = (2.0 * np.arange(q) + 1.0) / q - 1.0
        pts = np.array(list(itertools.product(u, repeat=self.ndim))) * r
        if pts.size == 0:
            return np.zeros((1, self.ndim))
        rad = np.zeros(len(pts))
        for a in self.axes:
            dims = [d for d in range(self.ndim) if self.owner[d] == a]
            rad += np.max(np.abs(pts[:, dims]), axis=1)
        return pts[rad < r]

    def pieces(self, shifts: np.ndarray):
        """Sub-cell pieces common to all ``shifts``: yields ``(volume fraction, offsets per shift)``."""
        s = shifts / self.h
        per_dim = []
        for d in range(self.ndim):
            br = np.unique(np.concatenate([[0.0], np.mod(s[:, d], 1.0)]))
            br = br[br < 1.0]
            edges = np.append(br, 1.0)
            widths = np.diff(edges)
            mids = 0.5 * (edges[:-1] + edges[1:])
            offs = np.floor(mids[:, None] - s[None, :, d]).astype(int)
            keep = widths > 0
            per_dim.append((widths[keep], offs[keep]))
        for combo in itertools.product(*[range(len(w)) for w, _ in per_dim]):
            frac = 1.0
            for d, j in enumerate(combo):
                frac *= per_dim[d][0][j]
            offsets = [tuple(int(per_dim[d][1][j][k]) for d, j in enumerate(combo)) for k in range(len(shifts))]
            yield frac, offsets


def _family_values(family: Sequence[StepFunction]) -> tuple:
    if not family:
        raise DomainError("the family is empty")
    f0 = family[0]
    for f in family:
        if f.params != f0.params or f.axes != f0.axes:
            raise ConfigError("family members must share lattice and parameters")
    vals = np.stack([np.asarray(f.values, dtype=float).reshape(-1) for f in family])
    return f0.params, f0.axes, vals


def _weight_values(w, params, axes) -> np.ndarray | None:
    if w is None:
        return None
    if isinstance(w, Weight):
        w = w.w
    if isinstance(w, StepFunction):
        if w.axes != axes:
            raise ConfigError("weight and family live on different parameters")
        return np.asarray(w.values, dtype=float).reshape(-1)
    return np.asarray(w, dtype=float).reshape(-1)


def _select_p0(w, params, axes, p: float, threshold: float) -> float:
    """Smallest tested ``p0`` with a lattice A_p0 constant below ``threshold``."""
    if w is None or axes != (1, 2):
        return 1.0
    wf = w if isinstance(w, (Weight, StepFunction)) else StepFunction(params, axes, w)
    for p0 in _P0_LADDER:
        if p0 > p:
            break
        if ap_constant(wf, p0).value <= threshold:
            return p0
    return float(p)


def rk_functionals(family: Sequence[StepFunction], p=2, w=None, A_ladder=None, r_ladder=None,
                   variant: str = "KRLpq", a: float | None = None, p0: float | None = None,
                   tol: float = 1e-6, quadrature: int = 4, ap_threshold: float = 1e3) -> CompactnessReport:
    """Uniform bound, tail curve and oscillation curve of a finite family.

    ``w`` is a measure density: norms are ``(int |f|^p w)^(1/p)``.  The
    verdict compares the tail at the largest ``A`` and the oscillation at
    the smallest positive ``r`` with ``tol`` times the uniform bound.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}")
    p = as_exponent(p)
    if p is INF:
        raise ConfigError("compactness functionals need a finite exponent")
    p = float(p)
    params, axes, vals = _family_values(family)
    A_ladder = sorted(float(x) for x in (A_ladder if A_ladder is not None else default_A_ladder(params)))
    r_ladder = sorted(float(x) for x in (r_ladder if r_ladder is not None else resolved_r_ladder(params)))
    if any(x < 0 for x in A_ladder + r_ladder):
        raise ConfigError("ladders must be nonnegative")
    if variant == "KRWA":
        if p0 is None:
            p0 = _select_p0(w, params, axes, p, ap_threshold)
        cap = min(p / p0, 1.0)
        if a is None:
            a = cap / 2.0
        if not 0.0 < a < cap:
            raise ConfigError(f"KRWA needs 0 < a < min(p/p0, 1) = {cap}")
    wv = _weight_values(w, params, axes)

    rmax = max(r_ladder) if r_ladder else 0.0
    pad = int(math.ceil(rmax / 2.0 ** (-params.L))) + 1
    lay = _Layout(params, axes, pad)
    F = lay.embed(vals)
    W = lay.embed(wv[None, :], fill=1.0)[0] if wv is not None else np.ones(lay.shape)
    dv = lay.cell_volume

    def norms(arr: np.ndarray) -> np.ndarray:
        return (np.abs(arr) ** p * W).reshape(arr.shape[0], -1).sum(axis=1) * dv

    bound = float(norms(F).max() ** (1.0 / p))
    rad = lay.radius()
    tails = []
    for A in A_ladder:
        mask = (rad >= A).astype(float)
        tails.append(float(norms(F * mask).max() ** (1.0 / p)))

    osc = []
    for r in r_ladder:
        if r == 0.0:
            osc.append(0.0)
            continue
        Y = lay.quadrature(r, quadrature)
        K = len(Y)
        acc = np.zeros(F.shape[0]) if variant != "KRLpq" else np.zeros((K, F.shape[0]))
        cache: dict = {}
        for frac, offsets in lay.pieces(Y):
            shifted = []
            for o in offsets:
                if o not in cache:
                    cache[o] = lay.shift(F, o)
                shifted.append(cache[o])
            if variant == "KRLpq":
                for k, S in enumerate(shifted):
                    acc[k] += frac * norms(S - F)
            elif variant == "KRWA":
                g = sum(np.abs(S - F) ** a for S in shifted) / K
                acc += frac * norms(g ** (1.0 / a))
            else:
                g = F - sum(shifted) / K
                acc += frac * norms(g)
        osc.append(float(max(acc.max(), 0.0) ** (1.0 / p)))

    if bound == 0.0:
        verdict = "consistent-with-compact"
    else:
        t_end = tails[-1] if tails else 0.0
        pos = [v for r, v in zip(r_ladder, osc) if r > 0]
        o_end = pos[0] if pos else 0.0
        if t_end > tol * bound:
            verdict = "fails-tail"
        elif o_end > tol * bound:
            verdict = "fails-oscillation"
        else:
            verdict = "consistent-with-compact"
    settings = {
        "p": p,
        "variant": variant,
        "a": a,
        "p0": p0,
        "weighted": wv is not None,
        "family_size": int(vals.shape[0]),
        "axes": list(axes),
        "tol": tol,
        "quadrature": quadrature,
        "cell_side": 2.0 ** (-params.L),
        "lattice": params.to_dict(),
    }
    return CompactnessReport(bound, A_ladder, tails, r_ladder, osc, verdict, settings)


# -- families ------------------------------------------------------------------------
def _haar_rows(params: LatticeParams, axis: int) -> tuple:
    b = axis_basis(standard_grid(params, axis))
    return b.H, b.levels


def shrinking_haar_family(params: LatticeParams, p=2, axes=(1, 2)) -> list:
    """L^p-normalized Haar functions on nested cubes around the origin, one per level down to cell pairs.

    In two parameters the functions are tensors of such one-parameter Haar functions at equal levels.
    """
    p = float(as_exponent(p))
    out = []
    rows = {a: _haar_rows(params, a) for a in axes}
    for s in range(params.top, 0, -1):
        vecs = []
        for a in axes:
            H, lev = rows[a]
            mid = (params.cells(a) - 1) / 2.0
            cands = np.flatnonzero(lev == s)
            dist = [abs(float(np.flatnonzero(H[i]).mean()) - mid) for i in cands]
            vecs.append(H[cands[int(np.argmin(dist))]])
        vals = vecs[0] if len(vecs) == 1 else np.outer(vecs[0], vecs[1])
        f = StepFunction(params, axes, vals)
        out.append(f / f.norm(p))
    return out


def sample_inputs(params: LatticeParams, count: int, seed: int = 0, p=(2, 2), w=(None, None),
                  kinds=("haar", "signs", "bumps")) -> list:
    """Input tuples normalized to ``||f_j||_{L^{p_j}(w_j^{p_j})} = 1``.

    ``haar``: random tensor Haar functions; ``signs``: random signs on every
    cell; ``bumps``: indicators of random dyadic rectangles.
    """
    rng = np.random.default_rng(seed)
    H1, _ = _haar_rows(params, 1)
    H2, _ = _haar_rows(params, 2)
    C1, C2 = params.cells(1), params.cells(2)

    def bump(H):
        return (H[rng.integers(len(H))] != 0).astype(float)

    def draw(kind):
        if kind == "haar":
            return np.outer(H1[rng.integers(len(H1))], H2[rng.integers(len(H2))])
        if kind == "signs":
            return rng.choice([-1.0, 1.0], size=(C1, C2))
        if kind == "bumps":
            return np.outer(bump(H1), bump(H2))
        raise ConfigError(f"unknown sampler {kind!r}")

    out = []
    for i in range(count):
        kind = kinds[i % len(kinds)]
        tup = []
        for j in range(len(p)):
            f = StepFunction(params, (1, 2), draw(kind))
            wj = w[j] if w[j] is not None else np.ones((C1, C2))
            nrm = weighted_norm(f, p[j], wj)
            tup.append(f / nrm)
        out.append(tuple(tup))
    return out


def finite_rank_family(params: LatticeParams, N: int, count: int = 200, seed: int = 0, p=2) -> list:
    """``P_N B f`` for ``count`` random unit vectors ``f`` and a fixed random bounded ``B``."""
    from .haar import project_N
    from .oscillation import standard_product_grid

    rng = np.random.default_rng(seed)
    C1, C2 = params.cells(1), params.cells(2)
    B1 = rng.normal(size=(C1, C1)) / math.sqrt(C1)
    B2 = rng.normal(size=(C2, C2)) / math.sqrt(C2)
    pg = standard_product_grid(params)
    out = []
    for _ in range(count):
        f = StepFunction(params, (1, 2), rng.normal(size=(C1, C2)))
        f = f / f.norm(float(as_exponent(p)))
        g = StepFunction(params, (1, 2), B1 @ f.values @ B2.T)
        out.append(project_N(g, pg, N).pn)
    return out


def probe_operator(T, p=(2, 2), w=(None, None), samples: int = 200, seed: int = 0,
                   kinds=("haar", "signs", "bumps"), A_ladder=None, r_ladder=None,
                   variant: str = "KRLpq", tol: float = 0.25, **kw) -> CompactnessReport:
    """Compactness functionals of the image of sampled unit-ball tuples.

    The target space is ``L^p(w^p)`` with ``1/p = sum 1/p_j`` and
    ``w = prod w_j``.  A probe is evidence, not proof.
    """
    if hasattr(T, "terms") or not hasattr(T, "apply"):
        op = _as_operator(T)
        params = op.params
        run = lambda fs: op.apply(fs[0], fs[1])
    else:
        op = T
        params = T.params
        run = lambda fs: T.apply(list(fs))
    p = tuple(as_exponent(q) for q in p)
    if len(p) != 2 or len(w) != 2:
        raise ConfigError("probe_operator handles bilinear operators: two exponents and two weights")
    inv = sum(0.0 if q is INF else 1.0 / float(q) for q in p)
    if inv <= 0:
        raise ConfigError("need 1/p > 0")
    pt = 1.0 / inv
    wv = [None if x is None else (x.values if isinstance(x, (Weight, StepFunction)) else np.asarray(x)) for x in w]
    prod = None
    if any(x is not None for x in wv):
        prod = np.ones((params.cells(1), params.cells(2)))
        for x in wv:
            if x is not None:
                prod = prod * x
        prod = prod ** pt
    tuples = sample_inputs(params, samples, seed, p, wv, kinds)
    images = [run(fs) for fs in tuples]
    rep = rk_functionals(images, pt, None if prod is None else StepFunction(params, (1, 2), prod),
                         A_ladder, r_ladder, variant, tol=tol, **kw)
    rep.settings.update({
        "operator": getattr(op, "name", type(op).__name__),
        "input_exponents": [str(q) for q in p],
        "samples": samples,
        "seed": seed,
        "sampler": list(kinds),
        "note": "probe on a finite sample: evidence, not proof",
    })
    return rep


# -- tensor non-compactness ----------------------------------------------------------------
@dataclass
class TensorDemoReport:
    applicable: bool
    A0: float
    p: float
    image_distances: list
    factor_distances: list
    min_image_distance: float
    max_identity_error: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _axis_apply(A: np.ndarray, f: np.ndarray, g: np.ndarray, vol: float) -> np.ndarray:
    return np.einsum("xyz,y,z->x", A, f, g, optimize=True) / vol


def tensor_noncompact_demo(params: LatticeParams | None = None, p=(2, 2), g=None, count: int = 6
                           ) -> TensorDemoReport:
    """Images of tensor inputs ``f_k (x) g`` under the tensor of two one-parameter Riesz forms.

    The inputs ``f_k`` are normalized indicators of distinct cells; ``g`` is
    fixed (default: normalized indicator of the right half of the domain).
    Image distances equal ``A0`` times the one-parameter distances, so the
    image sequence is not Cauchy whenever ``A0 > 0``.
    """
    params = params or LatticeParams(M=1, L=3, periodic=False)
    if params.periodic or params.n1 != 1 or params.n2 != 1:
        raise ConfigError("the demo runs on a bounded lattice with n1 = n2 = 1")
    p = tuple(float(as_exponent(q)) for q in p)
    pt = 1.0 / sum(1.0 / q for q in p)
    C1, C2 = params.cells(1), params.cells(2)
    v1, v2 = params.cell_volume(1), params.cell_volume(2)
    A1 = AxisKernel("riesz").tensor(params, 1)
    A2 = AxisKernel("riesz").tensor(params, 2)
    if g is None:
        g = np.zeros(C2)
        g[C2 // 2:] = 1.0
    g = np.asarray(g, dtype=float)
    gn = (np.abs(g) ** p[1]).sum() * v2
    g = g / gn ** (1.0 / p[1]) if gn > 0 else g
    v = _axis_apply(A2, g, g, v2)
    A0 = float(((np.abs(v) ** pt).sum() * v2) ** (1.0 / pt))
    cells = np.linspace(0, C1 - 1, count).round().astype(int)
    us = []
    for c in cells:
        f = np.zeros(C1)
        f[c] = v1 ** (-1.0 / p[0])
        us.append(_axis_apply(A1, f, f, v1))
    if A0 == 0.0:
        return TensorDemoReport(False, 0.0, pt, [], [], 0.0, 0.0)
    img, fac = [], []
    err = 0.0
    for i in range(count):
        for j in range(i + 1, count):
            d1 = float(((np.abs(us[i] - us[j]) ** pt).sum() * v1) ** (1.0 / pt))
            D = float(((np.abs(np.outer(us[i] - us[j], v)) ** pt).sum() * v1 * v2) ** (1.0 / pt))
            fac.append(d1)
            img.append(D)
            err = max(err, abs(D - A0 * d1) / max(1.0, D))
    return TensorDemoReport(True, A0, pt, img, fac, min(img) if img else 0.0, err)
