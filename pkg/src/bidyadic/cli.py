"""Config-driven experiment runner.

Usage::

    bidyadic SUBCOMMAND [--config PATH] [--out DIR] [--threads N] [--seed S]

Configs are INI files (``key = value`` under ``[section]`` headers).  Every
subcommand reads ``[lattice]`` and ``[run]`` and its own section.  Payload
files (JSON and CSV) depend only on the config; wall-clock data goes to a
``*.meta.json`` sidecar.

Exit codes: 0 when every hard assertion passes, 2 when one fails (a
``*.witness.json`` file is written), 1 for configuration errors.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import math
import os
import re
import sys
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from fractions import Fraction
from pathlib import Path

from .errors import BidyadicError, ConfigError, DomainError, InfeasibleConfiguration, InvariantViolation

SUBCOMMANDS = (
    "haar-check", "grid-census", "ap", "bmo", "carleson", "kernel-check", "represent",
    "verify", "decay", "probe", "demo-riesz", "interpolate-weights",
)

_REQUIRED = object()
_LATTICE_KEYS = {
    "n1": int, "n2": int, "M": int, "L": int, "periodic": bool, "r": int, "delta1": float,
    "delta2": float, "gamma1": float, "gamma2": float, "theta": float, "sep_factor": float,
}


# -- serialization ---------------------------------------------------------------------
def _plain(x):
    """Convert numpy scalars/arrays, fractions and tuples to JSON-ready values."""
    import numpy as np

    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        return float(x)
    if isinstance(x, Fraction):
        return f"{x.numerator}/{x.denominator}"
    if x is None or isinstance(x, str):
        return x
    return str(x)


def fmt_num(x: float) -> str:
    x = float(x)
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    return format(x, ".17g")


def dumps(obj, indent: int = 0) -> str:
    """Deterministic JSON: sorted keys, floats with 17 significant digits."""
    pad = "  " * indent
    inner = "  " * (indent + 1)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{inner}{json.dumps(k)}: {dumps(obj[k], indent + 1)}" for k in sorted(obj)]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, list):
        if not obj:
            return "[]"
        if all(not isinstance(v, (dict, list)) for v in obj):
            return "[" + ", ".join(dumps(v) for v in obj) + "]"
        return "[\n" + ",\n".join(inner + dumps(v, indent + 1) for v in obj) + "\n" + pad + "]"
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, float):
        return fmt_num(obj)
    return json.dumps(obj)


def csv_text(header: list, rows: list, echo: dict) -> str:
    buf = io.StringIO()
    buf.write("# config: " + json.dumps(echo, sort_keys=True, separators=(",", ":")) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt_num(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


# -- configuration ---------------------------------------------------------------------
class Config:
    """Typed access to an INI file with line numbers in every diagnostic."""

    def __init__(self, text: str = "", source: str = "<defaults>"):
        self.source = source
        self.parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        self.parser.optionxform = str
        try:
            self.parser.read_string(text, source=source)
        except configparser.Error as exc:
            raise ConfigError(f"{source}: {exc}".replace("\n", " ")) from None
        self.lines = {}
        section = None
        for no, line in enumerate(text.splitlines(), 1):
            s = line.strip()
            m = re.match(r"^\[([^\]]+)\]", s)
            if m:
                section = m.group(1).strip()
                self.lines[(section, None)] = no
            elif section and "=" in s and not s.startswith(("#", ";")):
                self.lines[(section, s.split("=", 1)[0].strip())] = no
        self.overrides = {}

    @classmethod
    def load(cls, path: str | None) -> "Config":
        if path is None:
            return cls()
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {path} not found")
        return cls(p.read_text(), str(p))

    def _where(self, section, key) -> str:
        no = self.lines.get((section, key)) or self.lines.get((section, None))
        return f"{self.source}:{no}" if no else self.source

    def has(self, section: str, key: str) -> bool:
        return (section, key) in self.overrides or self.parser.has_option(section, key)

    def raw(self, section: str, key: str):
        if (section, key) in self.overrides:
            return self.overrides[(section, key)]
        if self.parser.has_option(section, key):
            return self.parser.get(section, key)
        return None

    def get(self, section: str, key: str, kind=str, default=_REQUIRED):
        text = self.raw(section, key)
        if text is None:
            if default is _REQUIRED:
                raise ConfigError(f"{self._where(section, None)}: missing required field [{section}] {key}")
            return default
        try:
            return _convert(text, kind)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{self._where(section, key)}: field [{section}] {key} = {text!r}: {exc}") from None

    def check_keys(self, section: str, allowed) -> None:
        if not self.parser.has_section(section):
            return
        for key in self.parser.options(section):
            if key not in allowed:
                raise ConfigError(f"{self._where(section, key)}: unknown field [{section}] {key}")

    def echo(self) -> dict:
        out = {s: dict(self.parser.items(s)) for s in self.parser.sections()}
        for (s, k), v in self.overrides.items():
            out.setdefault(s, {})[k] = str(v)
        return out


def _convert(text, kind):
    if not isinstance(text, str):
        return kind(text) if kind not in (list, "floats", "strs", "exp") else text
    t = text.strip()
    if kind is bool:
        low = t.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError("expected a boolean")
    if kind is int:
        return int(t, 0)
    if kind is float:
        return float(t)
    if kind == "floats":
        return [float(x) for x in t.replace(",", " ").split()]
    if kind == "strs":
        return [x for x in t.replace(",", " ").split()]
    if kind == "exp":
        from .weights import as_exponent

        return as_exponent(math.inf if t.lower() in ("inf", "infinity") else Fraction(t))
    return t


def lattice_from(cfg: Config, defaults: dict):
    from .lattice import LatticeParams

    cfg.check_keys("lattice", _LATTICE_KEYS)
    kw = dict(defaults)
    for key, kind in _LATTICE_KEYS.items():
        if cfg.has("lattice", key):
            kw[key] = cfg.get("lattice", key, kind)
    try:
        return LatticeParams(**kw)
    except ConfigError as exc:
        raise ConfigError(f"{cfg._where('lattice', None)}: [lattice] {exc}") from None


def weight_from(cfg: Config, section: str, params, axes=(1, 2)):
    """``kind = one | power | lognormal`` with ``alpha1``/``alpha2`` or ``sigma``/``seed``."""
    import numpy as np

    from .haar import StepFunction

    kind = cfg.get(section, "kind", str, "one")
    shape = tuple(params.cells(a) for a in axes)
    if kind == "one":
        vals = np.ones(shape)
    elif kind == "power":
        c = np.abs(params.cell_centers())
        a1 = cfg.get(section, "alpha1", float, 0.0)
        a2 = cfg.get(section, "alpha2", float, 0.0)
        if params.n1 != 1 or params.n2 != 1:
            raise ConfigError(f"{cfg._where(section, 'kind')}: power weights need n1 = n2 = 1")
        vals = np.outer(c ** a1, c ** a2)
    elif kind == "lognormal":
        rng = np.random.default_rng(cfg.get(section, "seed", int, 0))
        vals = np.exp(cfg.get(section, "sigma", float, 0.5) * rng.standard_normal(shape))
    else:
        raise ConfigError(f"{cfg._where(section, 'kind')}: unknown weight kind {kind!r}")
    return StepFunction(params, axes, vals)


# -- outcome ---------------------------------------------------------------------------
@dataclass
class Outcome:
    payload: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)
    checks: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def check(self, name: str, passed: bool, value=None, witness=None):
        self.checks.append({"name": name, "passed": bool(passed), "value": _plain(value),
                            "witness": _plain(witness)})

    def table(self, name: str, header: list, rows: list):
        self.tables[name] = (header, rows)


# -- subcommands ------------------------------------------------------------------------
def _rng(seed: int):
    import numpy as np

    return np.random.default_rng(seed)


def _random_omega(params, axis, rng) -> tuple:
    return tuple(int(x) for x in rng.integers(0, 1 << params.n(axis), size=params.top))


def cmd_haar_check(cfg: Config, seed: int) -> Outcome:
    import itertools

    import numpy as np

    from .haar import D, DeltaI, E, StepFunction, axis_basis, expand, martingale, reconstruct, telescoping_sides
    from .lattice import ProductGrid, enumerate_grid

    params = lattice_from(cfg, {"M": 1, "L": 5})
    cfg.check_keys("haar", {"samples", "tol"})
    samples = cfg.get("haar", "samples", int, 2)
    tol = cfg.get("haar", "tol", float, 1e-12)
    rng = _rng(seed)
    out = Outcome()
    grids = [("standard", tuple([0] * params.top), tuple([0] * params.top)),
             ("shifted", _random_omega(params, 1, rng), _random_omega(params, 2, rng))]
    worst = {k: 0.0 for k in ("orthonormality", "reconstruction", "E/D", "delta-sum", "telescoping", "parseval")}
    rows = []
    L = params.L
    for label, om1, om2 in grids:
        g1, g2 = enumerate_grid(params, om1, 1), enumerate_grid(params, om2, 2)
        pg = ProductGrid(g1, g2)
        errs = {k: 0.0 for k in worst}
        for g in (g1, g2):
            b = axis_basis(g)
            G = b.B @ b.B.T * b.vol
            errs["orthonormality"] = max(errs["orthonormality"], float(np.abs(G - np.eye(len(G))).max()))
        for _ in range(samples):
            f = StepFunction(params, (1, 2), rng.standard_normal((params.cells(1), params.cells(2))))
            ex = expand(f, pg)
            rec = reconstruct(ex, include_residual=False)
            errs["reconstruction"] = max(errs["reconstruction"], float(np.abs(rec.values - f.values).max()))
            nrm2 = f.norm(2) ** 2
            errs["parseval"] = max(errs["parseval"], abs(ex.parseval_sum() - nrm2) / nrm2)
            for g in (g1, g2):
                a = g.axis
                u = StepFunction(params, (a,), rng.standard_normal(params.cells(a)))
                scale = float(np.abs(u.values).max())
                for k in range(-L + 1, params.M + 2):
                    lhs = martingale(u, E(k - 1), g).values
                    rhs = martingale(u, E(k), g).values + martingale(u, D(k), g).values
                    errs["E/D"] = max(errs["E/D"], float(np.abs(lhs - rhs).max()) / scale)
                    acc = np.zeros_like(u.values)
                    for c in g.cubes(k + L):
                        acc += martingale(u, DeltaI(c), g).values
                    errs["delta-sum"] = max(errs["delta-sum"],
                                            float(np.abs(acc - martingale(u, D(k), g).values).max()) / scale)
                v = StepFunction(params, (a,), rng.standard_normal(params.cells(a)))
                for s in range(0, g.S):
                    for c in g.cubes(s):
                        lhs, rhs = telescoping_sides(u, v, c, g)
                        errs["telescoping"] = max(errs["telescoping"], abs(lhs - rhs))
        for k, v in errs.items():
            worst[k] = max(worst[k], v)
            rows.append([label, k, v])
    for k, v in worst.items():
        out.check(k, v <= tol, v)
    out.payload = {"lattice": params.to_dict(), "tol": tol, "samples": samples, "max_error": worst,
                   "grids": {label: [list(a), list(b)] for label, a, b in grids}}
    out.table("haar_check", ["grid", "identity", "max_error"], rows)
    return out


def cmd_grid_census(cfg: Config, seed: int) -> Outcome:
    import numpy as np

    from .lattice import (all_omegas, census, common_ancestor, count_DN, enumerate_grid, pi_good)

    params = lattice_from(cfg, {})
    cfg.check_keys("census", {"Nmax", "triples"})
    Nmax = cfg.get("census", "Nmax", int, 3)
    do_triples = cfg.get("census", "triples", bool, True)
    out = Outcome()
    payload = {"lattice": params.to_dict()}
    tiling_bad = []
    dn_rows = []
    dn_ok = True
    censuses = []
    for axis in (1, 2):
        n = params.n(axis)
        for om in all_omegas(params, axis, effective_only=True):
            g = enumerate_grid(params, om, axis)
            for s in range(g.S + 1):
                cover = g.membership(s).sum(axis=0)
                if not np.all(cover == 1):
                    tiling_bad.append({"axis": axis, "omega": list(om), "level": s})
            if axis == 1:
                censuses.append(census(g))
            for N in range(Nmax + 1):
                bound = 2 ** (3 * n * N + n + 1)
                try:
                    cnt = count_DN(g, N)
                except InvariantViolation as exc:
                    cnt = exc.witness
                    dn_ok = False
                    dn_rows.append([axis, g.grid_id, N, -1, bound])
                    continue
                dn_ok &= cnt <= bound
                dn_rows.append([axis, g.grid_id, N, cnt, bound])
    out.check("tiling", not tiling_bad, len(tiling_bad), tiling_bad[:5])
    out.check("car-DN", dn_ok, max(r[3] for r in dn_rows))
    pis = {}
    for axis in (1, 2):
        pg = pi_good(params, axis)
        pis[axis] = pg
        out.check(f"pi_good exact axis {axis}", pg.mode == "exact", pg.mode)
        out.check(f"pi_good positive axis {axis}", pg.feasible, str(pg.minimum()))
    refs = sorted({0, 1, params.ncell // 2, params.ncell - 1})
    inv_bad = []
    for ref in refs:
        alt = pi_good(params, 1, ref_pos=(ref,) * params.n1)
        if alt.by_level != pis[1].by_level:
            inv_bad.append({"ref": ref, "by_level": alt.to_dict()["by_level"]})
    out.check("pi_good reference invariance", not inv_bad, len(refs), inv_bad[:3])
    payload["piGood"] = [pis[a].to_dict() for a in (1, 2)]
    payload["census"] = censuses
    if do_triples:
        rng = _rng(seed)
        counts = {}
        bad = []
        grids = [tuple([0] * params.top), _random_omega(params, 1, rng)]
        for om in grids:
            g = enumerate_grid(params, om, 1)
            cubes = {s: g.cubes(s) for s in range(g.S + 1)}
            for lk in range(g.S + 1):
                for K in cubes[lk]:
                    if not g.is_good(K):
                        continue
                    for li in range(lk, g.S + 1):
                        for lj in (li, li - 1):
                            if lj < 0:
                                continue
                            for I in cubes[li]:
                                for J in cubes[lj]:
                                    try:
                                        res = common_ancestor(I, J, K, g)
                                    except InvariantViolation as exc:
                                        bad.append(str(exc))
                                        continue
                                    counts[res.case.value] = counts.get(res.case.value, 0) + 1
        out.check("classify_triple partition", not bad, sum(counts.values()), bad[:3])
        payload["triples"] = {"grids": [list(x) for x in grids], "counts": counts}
    out.payload = payload
    out.table("dn_counts", ["axis", "grid", "N", "count", "bound"], dn_rows)
    return out


def cmd_ap(cfg: Config, seed: int) -> Outcome:
    import numpy as np

    from .haar import StepFunction
    from .lattice import ProductGrid, enumerate_grid
    from .weights import INF, WeightVector, ap_constant, multilinear_ap_constant, square_function_norm
    from .weights import strong_maximal, strong_maximal_bruteforce

    params = lattice_from(cfg, {})
    cfg.check_keys("ap", {"exponents", "trials", "tol"})
    cfg.check_keys("weight", {"kind", "alpha1", "alpha2", "sigma", "seed"})
    trials = cfg.get("ap", "trials", int, 20)
    tol = cfg.get("ap", "tol", float, 1e-12)
    rng = _rng(seed)
    out = Outcome()
    C1, C2 = params.cells(1), params.cells(2)
    one = StepFunction.constant(params, 1.0)
    ones = {}
    for p in (1, 1.5, 2, 3, INF):
        ones[str(p)] = ap_constant(one, p).value
    out.check("A_p(1) = 1", all(v == 1.0 for v in ones.values()), ones)
    worst = 0.0
    for _ in range(trials):
        # dyadic-rational data keeps every average exact, so agreement is bitwise
        fs = [StepFunction(params, (1, 2), rng.integers(-64, 65, size=(C1, C2)) / 4.0)
              for _ in range(int(rng.integers(1, 3)))]
        a, b = strong_maximal(*fs).values, strong_maximal_bruteforce(*fs).values
        worst = max(worst, float(np.abs(a - b).max()))
    out.check("strong maximal brute force", worst == 0.0, worst)
    w = weight_from(cfg, "weight", params)
    u = StepFunction(params, (1, 2), np.exp(0.3 * rng.standard_normal((C1, C2))))
    conv = {}
    for exps in ((1, 1), (1, 2), (INF, 2), (INF, INF)):
        try:
            conv[",".join(str(e) for e in exps)] = multilinear_ap_constant(WeightVector((w, u), exps)).value
        except ConfigError as exc:
            conv[",".join(str(e) for e in exps)] = f"rejected: {exc}"
    out.check("A_p vector endpoint conventions", isinstance(conv["1,1"], float)
              and isinstance(conv["inf,2"], float) and str(conv["inf,inf"]).startswith("rejected"), conv)
    f = StepFunction(params, (1, 2), rng.standard_normal((C1, C2)))
    g1, g2 = enumerate_grid(params, _random_omega(params, 1, rng), 1), enumerate_grid(params, _random_omega(params, 2, rng), 2)
    pg = ProductGrid(g1, g2)
    base = square_function_norm(f, 2, grid=pg)
    offs = {}
    for off in ((0, 0), (1, 0), (0, 1), (1, 1), (2, 1)):
        offs[str(off)] = square_function_norm(f, 2, grid=pg, offsets=off)
    spread = max(abs(v - base) for v in offs.values()) / base
    out.check("square function offset invariance", spread <= tol, spread)
    exps = cfg.get("ap", "exponents", "strs", ["2"])
    table = []
    for e in exps:
        rep = ap_constant(w, _convert(e, "exp"))
        table.append([e, rep.value])
    out.payload = {"lattice": params.to_dict(), "ones": ones, "strong_maximal_max_diff": worst,
                   "vector_conventions": conv, "square_offsets": offs,
                   "weight_constants": {str(r[0]): r[1] for r in table}}
    out.table("ap_constants", ["p", "constant"], table)
    return out


def cmd_bmo(cfg: Config, seed: int) -> Outcome:
    import numpy as np

    from .haar import StepFunction
    from .oscillation import bmo_norm, defect_curve

    params = lattice_from(cfg, {})
    cfg.check_keys("bmo", {"trials", "tol"})
    trials = cfg.get("bmo", "trials", int, 5)
    rng = _rng(seed)
    out = Outcome()
    flavors = [("oneparam", 1), ("oneparam", 2), "littlebmo", "productBMO"]
    worst = {str(f): 0.0 for f in flavors}
    mono_bad, term_bad = [], []
    Ns = list(range(0, params.top + 2))
    rows = []
    for t in range(trials):
        # dyadic-rational data and an integer constant: exact arithmetic on both sides
        b = StepFunction(params, (1, 2), rng.integers(-64, 65, size=(params.cells(1), params.cells(2))) / 4.0)
        c = float(rng.integers(-100, 101))
        for fl in flavors:
            d = abs(bmo_norm(b + c, fl) - bmo_norm(b, fl))
            worst[str(fl)] = max(worst[str(fl)], d)
        curve = defect_curve(b, Ns)
        vals = [v for _, v in curve]
        rows.extend([[t, N, v] for N, v in curve])
        if any(y > x * (1 + 1e-12) + 1e-15 for x, y in zip(vals, vals[1:])):
            mono_bad.append(t)
        if vals[-1] > 1e-12 * max(vals[0], 1.0):
            term_bad.append((t, vals[-1]))
    out.check("bmo invariant under constants", all(v == 0.0 for v in worst.values()), worst)
    out.check("cmo_defect monotone in N", not mono_bad, len(mono_bad), mono_bad[:3])
    out.check("cmo_defect 0 at terminal N", not term_bad, len(term_bad), term_bad[:3])
    out.payload = {"lattice": params.to_dict(), "constant_shift_diff": worst, "ladder": Ns}
    out.table("cmo_defect", ["trial", "N", "defect"], rows)
    return out


def cmd_carleson(cfg: Config, seed: int) -> Outcome:
    import numpy as np

    from .lattice import enumerate_grid
    from .oscillation import CarlesonFamily, carleson_embed, h1_bmo_pair, standard_product_grid

    params = lattice_from(cfg, {"M": 0, "L": 2})
    cfg.check_keys("carleson", {"trials", "density", "h1bmo_constant"})
    trials = cfg.get("carleson", "trials", int, 100)
    density = cfg.get("carleson", "density", float, 0.3)
    h1_bound = cfg.get("carleson", "h1bmo_constant", float, 2.0)
    rng = _rng(seed)
    out = Outcome()
    pg = standard_product_grid(params)
    S = params.top
    emb_rows, h1_rows = [], []
    emb_bad, h1_bad = [], []
    for t in range(trials):
        lam, a = {}, {}
        for l1 in range(S + 1):
            for l2 in range(S + 1):
                shape = (pg.grid1.count(l1), pg.grid2.count(l2))
                lam[(l1, l2)] = rng.exponential(size=shape) * (rng.random(shape) < density)
                a[(l1, l2)] = rng.exponential(size=shape) * (rng.random(shape) < density)
        res = carleson_embed(CarlesonFamily(pg, lam), a)
        emb_rows.append([t, res["lhs"], res["rhs"], res["C1"], res["C_levelsets"], res["ratio"]])
        if not res["holds"]:
            emb_bad.append(t)
        g = enumerate_grid(params, _random_omega(params, 1, rng), 1)
        cubes = [c for s in range(1, g.S + 1) for c in g.cubes(s)]
        ca = {c: float(rng.standard_normal()) for c in cubes if rng.random() < 0.6}
        cb = {c: float(rng.standard_normal()) for c in cubes if rng.random() < 0.6}
        r = h1_bmo_pair(ca, cb, g)
        h1_rows.append([t, r["lhs"], r["bmo_factor"], r["square_factor"], r["constant"]])
        if r["constant"] > h1_bound:
            h1_bad.append(t)
    c_emb = max(r[5] for r in emb_rows)
    c_h1 = max(r[4] for r in h1_rows)
    out.check("Carleson embedding", not emb_bad, c_emb, emb_bad[:3])
    out.check("H1-BMO pairing", not h1_bad, c_h1, h1_bad[:3])
    out.payload = {"lattice": params.to_dict(), "trials": trials, "max_embedding_ratio": c_emb,
                   "max_h1bmo_constant": c_h1, "h1bmo_bound": h1_bound}
    out.table("embedding", ["trial", "lhs", "rhs", "C1", "C_levelsets", "ratio"], emb_rows)
    out.table("h1bmo", ["trial", "lhs", "bmo_factor", "square_factor", "constant"], h1_rows)
    return out


def _kernel(cfg: Config, params, section: str = "kernel"):
    from .kernels import builtin_kernels

    name = cfg.get(section, "name", str)
    kw = {}
    for key in ("alpha", "beta", "beta3", "scale1", "scale2", "lam", "mu", "rough"):
        if cfg.has(section, key):
            kw[key] = cfg.get(section, key, float)
    return builtin_kernels(name, params, **kw)


_KERNEL_KEYS = {"name", "alpha", "beta", "beta3", "scale1", "scale2", "lam", "mu", "rough"}


def cmd_kernel_check(cfg: Config, seed: int) -> Outcome:
    from .kernels import check_kernel_conditions, hypothesis_tests

    params = lattice_from(cfg, {})
    cfg.check_keys("kernel", _KERNEL_KEYS | {"budget", "expect"})
    spec = _kernel(cfg, params)
    budget = cfg.get("kernel", "budget", int, 1000)
    rep = check_kernel_conditions(spec, budget=budget, seed=seed)
    hyp = hypothesis_tests(spec.operator(), seed=seed)
    out = Outcome()
    out.check("kernel conditions", rep.passed, rep.worst, rep.witnesses)
    expect = cfg.get("kernel", "expect", str, "")
    if expect:
        verdicts = {v for per_axis in hyp.verdicts.values() for v in per_axis.values()}
        out.check(f"hypothesis verdicts {expect}", verdicts == {expect}, hyp.verdicts,
                  {"scale_curves": hyp.scale_curves})
    out.payload = {"lattice": params.to_dict(), "kernel": spec.to_dict(), "conditions": rep.to_dict(),
                   "hypotheses": hyp.to_dict()}
    return out


def _assemble(cfg: Config, params, T, validate: bool):
    from .representation import assemble

    mode = cfg.get("represent", "mode", str, "exact")
    samples = cfg.get("represent", "samples", int, 64)
    return assemble(T, params, mode=mode, samples=samples, seed=cfg.get("run", "seed", int, 0), validate_pieces=validate)


_REPRESENT_KEYS = {"mode", "samples", "tuples", "threshold", "pieces"}


def cmd_represent(cfg: Config, seed: int) -> Outcome:
    from .representation import random_tuples, verify

    params = lattice_from(cfg, {})
    cfg.check_keys("kernel", _KERNEL_KEYS)
    cfg.check_keys("represent", _REPRESENT_KEYS)
    spec = _kernel(cfg, params)
    T = spec.operator()
    bundle = _assemble(cfg, params, T, True)
    count = cfg.get("represent", "tuples", int, 20)
    thr = cfg.get("represent", "threshold", float, 1e-8)
    rep = verify(T, bundle, random_tuples(params, count, seed), threshold=thr)
    out = Outcome()
    out.check("representation relative error", rep.max_relerr <= thr, rep.max_relerr)
    out.check("ensemble coverage", rep.max_coverage_err <= thr, rep.max_coverage_err)
    if rep.piece_check is not None:
        out.check("piece reconstruction", rep.piece_check["relerr"] <= thr, rep.piece_check["relerr"])
    out.check("all pieces validate", bundle.certificates.get("all_valid", False),
              bundle.certificates.get("families"), bundle.certificates.get("invalid"))
    out.check("case ledger partition", bundle.ledger.partition_ok(), bundle.ledger.total_triple_pairs)
    out.payload = {"bundle": bundle.to_dict(pieces=cfg.get("represent", "pieces", bool, False)),
                   "verify": {"max_relerr": rep.max_relerr, "max_coverage_err": rep.max_coverage_err,
                              "piece_check": rep.piece_check, "threshold": thr}}
    out.extra["verify.csv"] = rep.to_csv()
    out.extra["timings"] = bundle.timings
    return out


def cmd_verify(cfg: Config, seed: int) -> Outcome:
    from .representation import random_tuples, verify

    params = lattice_from(cfg, {})
    cfg.check_keys("kernel", _KERNEL_KEYS)
    cfg.check_keys("represent", _REPRESENT_KEYS)
    spec = _kernel(cfg, params)
    T = spec.operator()
    bundle = _assemble(cfg, params, T, False)
    count = cfg.get("represent", "tuples", int, 20)
    thr = cfg.get("represent", "threshold", float, 1e-8)
    rep = verify(T, bundle, random_tuples(params, count, seed), threshold=thr)
    out = Outcome()
    if bundle.mode == "exact":
        out.check("representation relative error", rep.max_relerr <= thr, rep.max_relerr)
    else:
        # sampled ensembles: the residual must sit inside three standard errors
        worst = max((abs(r["brute"] - r["bundle"]) / max(r["stderr"], 1e-300) for r in rep.rows), default=0.0)
        out.check("within 3 standard errors", worst <= 3.0, worst)
    out.payload = {"lattice": params.to_dict(), "mode": bundle.mode, "max_relerr": rep.max_relerr,
                   "max_coverage_err": rep.max_coverage_err, "threshold": thr}
    out.extra["verify.csv"] = rep.to_csv()
    out.extra["timings"] = bundle.timings
    return out


def cmd_decay(cfg: Config, seed: int) -> Outcome:
    from .kernels import builtin_kernels
    from .representation import decay_report

    params = lattice_from(cfg, {})
    cfg.check_keys("represent", _REPRESENT_KEYS)
    cfg.check_keys("decay", {"kernels", "expect_decreasing", "expect_flat", "tol"})
    names = cfg.get("decay", "kernels", "strs")
    dec = set(cfg.get("decay", "expect_decreasing", "strs", ["compact_cz"]))
    flat = set(cfg.get("decay", "expect_flat", "strs", ["riesz_tensor"]))
    tol = cfg.get("decay", "tol", float, 0.1)
    out = Outcome()
    rows, prof_rows = [], []
    reports = {}
    for name in names:
        T = builtin_kernels(name, params).operator()
        bundle = _assemble(cfg, params, T, True)
        rep = decay_report(bundle, tol=tol)
        reports[name] = rep.to_dict()
        reports[name]["C0"] = bundle.C0
        for fam, curve in sorted(rep.curves.items()):
            rows.extend([[name, fam, N, v] for N, v in zip(rep.ladder, curve)])
        rows.extend([[name, "all", N, v] for N, v in zip(rep.ladder, rep.overall)])
        for l1, row in enumerate(rep.level_profile):
            prof_rows.extend([[name, l1, l2, v] for l2, v in enumerate(row)])
        if name in dec:
            out.check(f"{name} strictly decreasing", rep.strictly_decreasing, rep.overall)
        if name in flat:
            out.check(f"{name} flat (non-vanishing before the terminal rung)", rep.flat, rep.overall)
        out.check(f"{name} pieces validate", bundle.certificates.get("all_valid", False),
                  None, bundle.certificates.get("invalid"))
    out.payload = {"lattice": params.to_dict(), "reports": reports}
    out.table("decay", ["kernel", "family", "N", "F_N"], rows)
    out.table("level_profile", ["kernel", "level1", "level2", "F"], prof_rows)
    return out


def cmd_probe(cfg: Config, seed: int) -> Outcome:
    from . import compactprobe as cp
    from .kernels import DiscreteOperator

    params = lattice_from(cfg, {})
    cfg.check_keys("probe", {"operator", "samples", "variant", "tol", "p1", "p2", "expect", "controls",
                             "control_tol", "finite_rank_N"})
    cfg.check_keys("weight1", {"kind", "alpha1", "alpha2", "sigma", "seed"})
    cfg.check_keys("weight2", {"kind", "alpha1", "alpha2", "sigma", "seed"})
    name = cfg.get("probe", "operator", str)
    if name == "zero":
        T = DiscreteOperator.zero(params)
    else:
        from .kernels import builtin_kernels

        T = builtin_kernels(name, params).operator()
    p = (cfg.get("probe", "p1", "exp", 2), cfg.get("probe", "p2", "exp", 2))
    w = tuple(weight_from(cfg, s, params) if cfg.parser.has_section(s) else None for s in ("weight1", "weight2"))
    variant = cfg.get("probe", "variant", str, "KRLpq")
    rep = cp.probe_operator(T, p, w, samples=cfg.get("probe", "samples", int, 60), seed=seed,
                            variant=variant, tol=cfg.get("probe", "tol", float, 0.25))
    out = Outcome()
    expect = cfg.get("probe", "expect", str, "")
    if expect:
        out.check(f"probe verdict {expect}", rep.verdict == expect, rep.verdict)
    payload = {"lattice": params.to_dict(), "probe": rep.to_dict()}
    out.table("probe_tail", ["A", "tail"], [[a, v] for a, v in zip(rep.A_ladder, rep.tail_curve)])
    out.table("probe_oscillation", ["r", "oscillation"], [[r, v] for r, v in zip(rep.r_ladder, rep.oscillation_curve)])
    if cfg.get("probe", "controls", bool, False):
        ctol = cfg.get("probe", "control_tol", float, 1e-6)
        N = cfg.get("probe", "finite_rank_N", int, 1)
        fam = cp.finite_rank_family(params, N, 200, seed)
        pos = {}
        for v in cp.VARIANTS:
            r = cp.rk_functionals(fam, 2, r_ladder=cp.subcell_r_ladder(params), variant=v, tol=ctol)
            pos[v] = r.to_dict()
            out.check(f"finite-rank control {v}", r.verdict == "consistent-with-compact",
                      {"tail": r.tail_end, "oscillation": r.oscillation_end, "bound": r.uniform_bound})
        sh = cp.shrinking_haar_family(params, 2)
        r = cp.rk_functionals(sh, 2, variant="KRLpq")
        lower = min(v for rr, v in zip(r.r_ladder, r.oscillation_curve) if rr > 0)
        out.check("shrinking Haar fails oscillation", r.verdict == "fails-oscillation", r.verdict)
        out.check("shrinking Haar lower bound >= 2^-1/2", lower >= 2 ** -0.5 * r.uniform_bound, lower)
        payload["controls"] = {"finite_rank": pos, "shrinking_haar": r.to_dict(), "shrinking_haar_lower_bound": lower}
    out.payload = payload
    return out


def cmd_demo_riesz(cfg: Config, seed: int) -> Outcome:
    import numpy as np

    from . import compactprobe as cp

    params = lattice_from(cfg, {"M": 1, "L": 3, "periodic": False})
    cfg.check_keys("demo", {"count", "p1", "p2", "g", "tol"})
    count = cfg.get("demo", "count", int, 6)
    p = (cfg.get("demo", "p1", "exp", 2), cfg.get("demo", "p2", "exp", 2))
    tol = cfg.get("demo", "tol", float, 1e-12)
    g = None
    if cfg.get("demo", "g", str, "half") == "zero":
        g = np.zeros(params.cells(2))
    rep = cp.tensor_noncompact_demo(params, p, g, count)
    out = Outcome()
    out.check("demo applicable", rep.applicable, rep.A0)
    if rep.applicable:
        out.check("image distances = A0 x factor distances", rep.max_identity_error <= tol, rep.max_identity_error)
        out.check("image sequence not Cauchy", rep.min_image_distance > 0, rep.min_image_distance)
    out.payload = {"lattice": params.to_dict(), "demo": rep.to_dict()}
    out.table("demo_distances", ["pair", "image_distance", "factor_distance"],
              [[i, a, b] for i, (a, b) in enumerate(zip(rep.image_distances, rep.factor_distances))])
    return out


def cmd_interpolate_weights(cfg: Config, seed: int) -> Outcome:
    from .weights import WeightVector, interpolate_weights

    params = lattice_from(cfg, {})
    cfg.check_keys("interpolate", {"p", "s", "r", "ladder"})
    for s in ("u1", "u2", "v1", "v2"):
        cfg.check_keys(s, {"kind", "alpha1", "alpha2", "sigma", "seed"})
    pex = [_convert(x, "exp") for x in cfg.get("interpolate", "p", "strs", ["2", "2"])]
    sex = [_convert(x, "exp") for x in cfg.get("interpolate", "s", "strs", ["4", "4"])]
    u = WeightVector(tuple(weight_from(cfg, s, params) for s in ("u1", "u2")), tuple(pex))
    v = WeightVector(tuple(weight_from(cfg, s, params) for s in ("v1", "v2")), tuple(sex))
    r = cfg.get("interpolate", "r", "strs", None)
    res = interpolate_weights(u, v, None if r is None else [_convert(x, "exp") for x in r],
                              ladder=cfg.get("interpolate", "ladder", int, 16))
    out = Outcome()
    out.check("blended constant within the Hoelder bound", res.certificate["bound_holds"], res.certificate["constant"])
    out.payload = {"lattice": params.to_dict(), "certificate": res.certificate}
    out.table("interpolation", ["theta", "constant", "holder_bound"], [list(r) for r in res.certificate["ladder"]])
    return out


COMMANDS = {
    "haar-check": cmd_haar_check,
    "grid-census": cmd_grid_census,
    "ap": cmd_ap,
    "bmo": cmd_bmo,
    "carleson": cmd_carleson,
    "kernel-check": cmd_kernel_check,
    "represent": cmd_represent,
    "verify": cmd_verify,
    "decay": cmd_decay,
    "probe": cmd_probe,
    "demo-riesz": cmd_demo_riesz,
    "interpolate-weights": cmd_interpolate_weights,
}


# -- runner ----------------------------------------------------------------------------
@dataclass
class RunResult:
    code: int
    outcome: Outcome | None
    files: list
    message: str = ""


def run(subcommand: str, config: str | None = None, out: str | None = None, threads: int | None = None,
        seed: int | None = None, text: str | None = None) -> RunResult:
    """Run one subcommand; returns the exit code, the outcome and the written files."""
    if subcommand not in COMMANDS:
        return RunResult(1, None, [], f"unknown subcommand {subcommand!r}; choose from {', '.join(SUBCOMMANDS)}")
    try:
        cfg = Config(text, "<text>") if text is not None else Config.load(config)
        cfg.check_keys("run", {"seed", "out"})
        if seed is not None:
            cfg.overrides[("run", "seed")] = str(int(seed))
        run_seed = cfg.get("run", "seed", int, 0)
        outdir = Path(out or cfg.get("run", "out", str, "out"))
    except ConfigError as exc:
        return RunResult(1, None, [], str(exc))
    started = datetime.now(timezone.utc)
    t0 = time.perf_counter()
    try:
        outcome = COMMANDS[subcommand](cfg, run_seed)
    except (ConfigError, InfeasibleConfiguration) as exc:
        return RunResult(1, None, [], f"configuration error: {exc}")
    except (InvariantViolation, DomainError, BidyadicError) as exc:
        outcome = Outcome()
        outcome.check(type(exc).__name__, False, str(exc), getattr(exc, "witness", None))
    elapsed = time.perf_counter() - t0
    echo = cfg.echo()
    stem = subcommand.replace("-", "_")
    outdir.mkdir(parents=True, exist_ok=True)
    files = []
    ok = all(c["passed"] for c in outcome.checks)
    doc = {"subcommand": subcommand, "config": echo, "seed": run_seed, "passed": ok,
           "assertions": [{k: v for k, v in c.items() if k != "witness"} for c in outcome.checks],
           "results": _plain(outcome.payload)}
    path = outdir / f"{stem}.json"
    path.write_text(dumps(doc) + "\n")
    files.append(path)
    for name, (header, rows) in outcome.tables.items():
        path = outdir / f"{name}.csv"
        path.write_text(csv_text(header, _plain(rows), echo))
        files.append(path)
    if "verify.csv" in outcome.extra:
        path = outdir / "verify.csv"
        path.write_text("# config: " + json.dumps(echo, sort_keys=True, separators=(",", ":")) + "\n"
                        + outcome.extra["verify.csv"])
        files.append(path)
    if subcommand == "represent":
        path = outdir / "bundle.json"
        path.write_text(dumps({"config": echo, "bundle": _plain(outcome.payload["bundle"])}) + "\n")
        files.append(path)
    failed = [c for c in outcome.checks if not c["passed"]]
    if failed:
        path = outdir / f"{stem}.witness.json"
        path.write_text(dumps({"config": echo, "failed": _plain(failed)}) + "\n")
        files.append(path)
    meta = {"subcommand": subcommand, "started": started.isoformat(), "elapsed_seconds": elapsed,
            "threads": threads, "argv": sys.argv, "timings": _plain(outcome.extra.get("timings", {}))}
    (outdir / f"{stem}.meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    msg = "\n".join(f"{'PASS' if c['passed'] else 'FAIL'} {c['name']}" for c in outcome.checks)
    return RunResult(0 if ok else 2, outcome, files, msg)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="bidyadic", description="Bi-parameter dyadic experiments.")
    ap.add_argument("subcommand", choices=SUBCOMMANDS)
    ap.add_argument("--config", help="INI config file")
    ap.add_argument("--out", help="output directory (overrides [run] out)")
    ap.add_argument("--threads", type=int, help="BLAS/OpenMP thread count")
    ap.add_argument("--seed", type=int, help="override [run] seed")
    args = ap.parse_args(argv)
    if args.threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    res = run(args.subcommand, args.config, args.out, args.threads, args.seed)
    stream = sys.stderr if res.code == 1 else sys.stdout
    if res.message:
        print(res.message, file=stream)
    return res.code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
