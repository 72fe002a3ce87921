"""Solver-agnostic conic program representation, big-M helpers and text export.

A :class:`ConicProgram` holds variables, linear rows, second-order cone
constraints ``||u||_2 <= t`` over affine expressions, and a linear objective
that is always minimized. Programs are immutable; :class:`ProgramBuilder`
accumulates the pieces and freezes them.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from functools import cached_property
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .data import Dataset
from .errors import FairDROError
from .metrics import NormKind

CONTINUOUS = "continuous"
BINARY = "binary"
SENSES = ("<=", "==", ">=")


@dataclass(frozen=True)
class Variable:
    name: str
    kind: str = CONTINUOUS
    lb: float = -math.inf
    ub: float = math.inf


@dataclass(frozen=True)
class AffineExpr:
    """sum(coef * var) + constant."""

    terms: tuple = ()
    constant: float = 0.0

    @classmethod
    def of(cls, terms=(), constant=0.0) -> "AffineExpr":
        return cls(_merge_terms(terms), float(constant))


@dataclass(frozen=True)
class LinearConstraint:
    name: str
    terms: tuple
    sense: str
    rhs: float


@dataclass(frozen=True)
class SOCConstraint:
    """||(u_1, ..., u_k)||_2 <= t."""

    name: str
    t: AffineExpr
    u: tuple


@dataclass(frozen=True)
class Objective:
    terms: tuple = ()
    constant: float = 0.0
    sense: str = "min"


def _merge_terms(terms) -> tuple:
    if isinstance(terms, Mapping):
        terms = terms.items()
    acc: dict[str, float] = {}
    for name, coef in terms:
        coef = float(coef)
        if coef != 0.0:
            acc[name] = acc.get(name, 0.0) + coef
    return tuple((k, v) for k, v in acc.items() if v != 0.0)


@dataclass(frozen=True)
class CompiledProgram:
    """Matrix form: ``row_lo <= A x <= row_hi``, ``lb <= x <= ub``, cones, ``min c'x + c0``."""

    names: tuple
    c: np.ndarray
    c0: float
    A: sp.csr_matrix
    row_lo: np.ndarray
    row_hi: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    is_binary: np.ndarray
    cones: tuple  # each: (G csr (k+1) x n, h (k+1,)) meaning G x + h = (t, u)

    @property
    def n(self) -> int:
        return len(self.names)


@dataclass(frozen=True)
class ConicProgram:
    variables: tuple
    linear_constraints: tuple
    soc_constraints: tuple
    objective: Objective
    metadata: Mapping = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "metadata", MappingProxyType(dict(self.metadata)))

    # -- convenience -----------------------------------------------------
    @property
    def tags(self) -> Mapping[str, tuple]:
        return self.metadata.get("tags", {})

    @cached_property
    def index(self) -> dict:
        return {v.name: k for k, v in enumerate(self.variables)}

    @property
    def binaries(self) -> list:
        return [v.name for v in self.variables if v.kind == BINARY]

    @property
    def num_binaries(self) -> int:
        return sum(v.kind == BINARY for v in self.variables)

    @property
    def has_soc(self) -> bool:
        return bool(self.soc_constraints)

    @cached_property
    def compiled(self) -> CompiledProgram:
        return compile_program(self)

    def objective_value(self, x) -> float:
        cp = self.compiled
        return float(cp.c @ np.asarray(x, float) + cp.c0)

    def max_violation(self, x) -> dict:
        """Largest violation of rows, bounds, cones and integrality at ``x``."""
        cp = self.compiled
        x = np.asarray(x, float)
        ax = cp.A @ x if cp.A.shape[0] else np.zeros(0)
        rows = np.maximum(np.maximum(cp.row_lo - ax, ax - cp.row_hi), 0.0)
        bounds = np.maximum(np.maximum(cp.lb - x, x - cp.ub), 0.0)
        cone = 0.0
        for g, h in cp.cones:
            v = g @ x + h
            cone = max(cone, float(np.linalg.norm(v[1:]) - v[0]))
        xb = x[cp.is_binary]
        integ = float(np.max(np.minimum(xb, 1 - xb).clip(0))) if xb.size else 0.0
        return {"linear": float(rows.max(initial=0.0)), "bounds": float(bounds.max(initial=0.0)),
                "soc": max(cone, 0.0), "integrality": integ}


def compile_program(program: ConicProgram) -> CompiledProgram:
    index = program.index
    n = len(program.variables)
    c = np.zeros(n)
    for name, coef in program.objective.terms:
        c[index[name]] += coef
    rows, cols, vals = [], [], []
    lo, hi = [], []
    for r, con in enumerate(program.linear_constraints):
        for name, coef in con.terms:
            rows.append(r)
            cols.append(index[name])
            vals.append(coef)
        lo.append(con.rhs if con.sense in ("==", ">=") else -math.inf)
        hi.append(con.rhs if con.sense in ("==", "<=") else math.inf)
    m = len(program.linear_constraints)
    A = sp.csr_matrix((vals, (rows, cols)), shape=(m, n))
    cones = []
    for soc in program.soc_constraints:
        exprs = (soc.t, *soc.u)
        gr, gc, gv = [], [], []
        h = np.zeros(len(exprs))
        for k, e in enumerate(exprs):
            h[k] = e.constant
            for name, coef in e.terms:
                gr.append(k)
                gc.append(index[name])
                gv.append(coef)
        cones.append((sp.csr_matrix((gv, (gr, gc)), shape=(len(exprs), n)), h))
    return CompiledProgram(
        names=tuple(v.name for v in program.variables),
        c=c, c0=float(program.objective.constant), A=A,
        row_lo=np.array(lo, float), row_hi=np.array(hi, float),
        lb=np.array([v.lb for v in program.variables], float),
        ub=np.array([v.ub for v in program.variables], float),
        is_binary=np.array([v.kind == BINARY for v in program.variables], bool),
        cones=tuple(cones))


def split_name(name: str) -> tuple:
    """``"tau[3,1]"`` -> ``("tau", (3, 1))``; plain names get an empty index."""
    m = re.fullmatch(r"(.*?)\[([-\d,]+)\]", name)
    if not m:
        return name, ()
    return m.group(1), tuple(int(k) for k in m.group(2).split(","))


def indexed(tag: str, *idx) -> str:
    return f"{tag}[{','.join(str(int(k)) for k in idx)}]"


class ProgramBuilder:
    """Mutable accumulator for a :class:`ConicProgram`."""

    def __init__(self):
        self._vars: dict[str, Variable] = {}
        self._rows: list[LinearConstraint] = []
        self._row_names: set = set()
        self._socs: list[SOCConstraint] = []
        self._objective = Objective()
        self._tags: dict[str, list] = {}

    def add_var(self, name, kind=CONTINUOUS, lb=-math.inf, ub=math.inf, tag=None) -> str:
        if name in self._vars:
            raise FairDROError(f"duplicate variable {name!r}")
        if kind == BINARY:
            lb, ub = 0.0, 1.0
        self._vars[name] = Variable(name, kind, float(lb), float(ub))
        self._tags.setdefault(tag or split_name(name)[0], []).append(name)
        return name

    def add_vars(self, tag, idx: Iterable, kind=CONTINUOUS, lb=-math.inf, ub=math.inf) -> list:
        out = []
        for k in idx:
            k = k if isinstance(k, tuple) else (k,)
            out.append(self.add_var(indexed(tag, *k), kind, lb, ub, tag=tag))
        return out

    def add_row(self, name, terms, sense, rhs) -> None:
        if sense not in SENSES:
            raise FairDROError(f"bad sense {sense!r}")
        if name in self._row_names:
            raise FairDROError(f"duplicate constraint {name!r}")
        self._row_names.add(name)
        self._rows.append(LinearConstraint(name, _merge_terms(terms), sense, float(rhs)))

    def add_soc(self, name, t: AffineExpr, u: Sequence[AffineExpr]) -> None:
        self._socs.append(SOCConstraint(name, t, tuple(u)))

    def set_objective(self, terms, constant=0.0) -> None:
        self._objective = Objective(_merge_terms(terms), float(constant))

    def tag(self, tag, names) -> None:
        self._tags[tag] = list(names)

    def build(self, **metadata) -> ConicProgram:
        meta = dict(metadata)
        meta["tags"] = {k: tuple(v) for k, v in self._tags.items()}
        return ConicProgram(tuple(self._vars.values()), tuple(self._rows),
                            tuple(self._socs), self._objective, meta)


# ---------------------------------------------------------------------------
# classifier box and big-M


@dataclass(frozen=True)
class BoxBounds:
    """Bounds ||w||_inf <= w_max and |b| <= b_max that make big-M values finite."""

    w_max: float = 100.0
    b_max: float = 100.0

    def __post_init__(self):
        for label, v in (("w_max", self.w_max), ("b_max", self.b_max)):
            if not (math.isfinite(v) and v > 0):
                raise FairDROError(f"{label} must be finite and positive, got {v}")


def dual_norm_bound(norm, w_max: float, d: int) -> float:
    """sup of the dual norm of w over the box ||w||_inf <= w_max."""
    if w_max <= 0:
        raise FairDROError("w_max must be positive")
    norm = NormKind.parse(norm)
    if norm is NormKind.Linf:
        return w_max * d
    if norm is NormKind.L2:
        return w_max * math.sqrt(d)
    return float(w_max)


def big_m(data: Dataset, box: BoxBounds, rho: float, norm, eps: float) -> np.ndarray:
    """Per-sample big-M bounding every indicator row's left-hand side over the box."""
    if rho < 0:
        raise FairDROError("rho must be nonnegative")
    pad = rho * dual_norm_bound(norm, box.w_max, data.d)
    return box.w_max * np.abs(data.features).sum(axis=1) + pad + box.b_max + max(eps, 1.0)


def add_classifier(builder: ProgramBuilder, d: int, box: BoxBounds | None = None):
    """Declare w[0..d-1] and b, boxed if ``box`` is given."""
    wm = box.w_max if box else math.inf
    bm = box.b_max if box else math.inf
    w = builder.add_vars("w", range(d), lb=-wm, ub=wm)
    b = builder.add_var("b", lb=-bm, ub=bm)
    return w, b


def add_dual_norm(builder: ProgramBuilder, w: Sequence[str], norm,
                  box: BoxBounds | None = None) -> str:
    """Epigraph variable ``s_w >= ||w||_*``.

    Absolute-value splits for the polyhedral norms, a single cone for L2.
    Only valid where ``s_w`` enters rows so that larger values never help.
    """
    norm = NormKind.parse(norm)
    d = len(w)
    ub = dual_norm_bound(norm, box.w_max, d) if box else math.inf
    s = builder.add_var("s_w", lb=0.0, ub=ub)
    if norm is NormKind.L2:
        builder.add_soc("norm_w", AffineExpr.of({s: 1.0}), [AffineExpr.of({wj: 1.0}) for wj in w])
        return s
    if norm is NormKind.Linf:
        u = builder.add_vars("u_abs", range(d), lb=0.0, ub=box.w_max if box else math.inf)
        for j in range(d):
            builder.add_row(indexed("abs_pos", j), {u[j]: 1.0, w[j]: -1.0}, ">=", 0.0)
            builder.add_row(indexed("abs_neg", j), {u[j]: 1.0, w[j]: 1.0}, ">=", 0.0)
        terms = {s: 1.0}
        terms.update({uj: -1.0 for uj in u})
        builder.add_row("norm_w", terms, ">=", 0.0)
        return s
    for j in range(d):
        builder.add_row(indexed("abs_pos", j), {s: 1.0, w[j]: -1.0}, ">=", 0.0)
        builder.add_row(indexed("abs_neg", j), {s: 1.0, w[j]: 1.0}, ">=", 0.0)
    return s


# ---------------------------------------------------------------------------
# validation


def validate(program: ConicProgram) -> list:
    """Return a list of defect strings; an empty list means the program is well formed."""
    defects = []
    declared = set()
    for v in program.variables:
        if v.name in declared:
            defects.append(f"duplicate variable {v.name}")
        declared.add(v.name)
        if v.kind not in (CONTINUOUS, BINARY):
            defects.append(f"variable {v.name}: unknown kind {v.kind!r}")
        if v.kind == BINARY and (v.lb, v.ub) != (0.0, 1.0):
            defects.append(f"variable {v.name}: binary bounds [{v.lb}, {v.ub}] are not [0, 1]")
        if v.lb > v.ub:
            defects.append(f"variable {v.name}: empty bounds [{v.lb}, {v.ub}]")

    def check_terms(where, terms):
        for name, coef in terms:
            if name not in declared:
                defects.append(f"{where}: unknown variable {name}")
            if not math.isfinite(coef):
                defects.append(f"{where}: non-finite coefficient on {name}")

    for con in program.linear_constraints:
        check_terms(f"constraint {con.name}", con.terms)
        if con.sense not in SENSES:
            defects.append(f"constraint {con.name}: bad sense {con.sense!r}")
    for soc in program.soc_constraints:
        if len(soc.u) < 1:
            defects.append(f"cone {soc.name}: needs at least one entry under the norm (k >= 1)")
        for e in (soc.t, *soc.u):
            check_terms(f"cone {soc.name}", e.terms)
    check_terms("objective", program.objective.terms)
    if program.objective.sense != "min":
        defects.append("objective: only minimization is supported")
    tags = program.tags
    if not program.metadata.get("classifier", False):
        return defects
    if "w" not in tags or "b" not in tags:
        defects.append("metadata: missing w/b tags")
    else:
        d = program.metadata.get("d")
        if d is not None and len(tags["w"]) != d:
            defects.append(f"metadata: w tag has {len(tags['w'])} entries, expected d={d}")
        if len(tags["b"]) != 1:
            defects.append("metadata: b tag must name exactly one variable")
        for name in (*tags["w"], *tags["b"]):
            if name not in declared:
                defects.append(f"metadata: tagged unknown variable {name}")
    return defects


# ---------------------------------------------------------------------------
# text interchange


def _sort_key(name: str):
    tag, idx = split_name(name)
    return (tag, idx)


def _lp_name(name: str) -> str:
    return name.replace("[", "(").replace("]", ")")


def _ir_name(name: str) -> str:
    return name.replace("(", "[").replace(")", "]")


def _fmt(x: float) -> str:
    return repr(float(x))


def _expr(terms, constant=0.0, with_constant=False) -> str:
    parts = []
    for name, coef in sorted(terms, key=lambda kv: _sort_key(kv[0])):
        sign = "-" if coef < 0 else "+"
        parts.append(f"{sign} {_fmt(abs(coef))} {_lp_name(name)}")
    if with_constant and constant != 0.0:
        parts.append(f"{'-' if constant < 0 else '+'} {_fmt(abs(constant))}")
    return " ".join(parts)


def _bound_line(v: Variable) -> str:
    name = _lp_name(v.name)
    lo_inf, hi_inf = math.isinf(v.lb), math.isinf(v.ub)
    if lo_inf and hi_inf:
        return f" {name} free"
    if lo_inf:
        return f" -inf <= {name} <= {_fmt(v.ub)}"
    if hi_inf:
        return f" {name} >= {_fmt(v.lb)}"
    return f" {_fmt(v.lb)} <= {name} <= {_fmt(v.ub)}"


def export_text(program: ConicProgram) -> str:
    """Serialize ``program`` as text.

    Without cones the output is the CPLEX LP format. With cones the same
    sections are followed by a ``Cones`` section (before ``End``) made of
    blocks::

        cone NAME
          t: <affine expression>
          u: <affine expression>      (one line per entry under the norm)

    meaning ``||u||_2 <= t``. Expressions write every coefficient
    explicitly; a trailing bare number is the constant. Variables, rows and
    cones are sorted by tag then index, and ``[..]`` in names becomes ``(..)``.
    """
    kind = program.metadata.get("model", "program")
    lines = [f"\\ fairdro {kind}" + ("; sectioned conic format" if program.has_soc else "")]
    lines.append("Minimize")
    obj = program.objective
    body = _expr(obj.terms, obj.constant, with_constant=True) if (obj.terms or obj.constant) else ""
    if not obj.terms:
        body = (body + " " if body else "") + f"+ 0 {_lp_name(program.variables[0].name)}"
    lines.append(f" obj: {body}")
    lines.append("Subject To")
    for con in sorted(program.linear_constraints, key=lambda c: _sort_key(c.name)):
        if not con.terms:
            continue
        sense = {"<=": "<=", ">=": ">=", "==": "="}[con.sense]
        lines.append(f" {_lp_name(con.name)}: {_expr(con.terms)} {sense} {_fmt(con.rhs)}")
    lines.append("Bounds")
    variables = sorted(program.variables, key=lambda v: _sort_key(v.name))
    for v in variables:
        if v.kind != BINARY:
            lines.append(_bound_line(v))
    bins = [_lp_name(v.name) for v in variables if v.kind == BINARY]
    if bins:
        lines.append("Binaries")
        for k in range(0, len(bins), 8):
            lines.append(" " + " ".join(bins[k:k + 8]))
    if program.has_soc:
        lines.append("Cones")
        for soc in sorted(program.soc_constraints, key=lambda s: _sort_key(s.name)):
            lines.append(f" cone {_lp_name(soc.name)}")
            lines.append(f"  t: {_affine_text(soc.t)}")
            for u in soc.u:
                lines.append(f"  u: {_affine_text(u)}")
    lines.append("End")
    return "\n".join(lines) + "\n"


def _affine_text(e: AffineExpr) -> str:
    text = _expr(e.terms, e.constant, with_constant=True) if e.terms else ""
    if not e.terms:
        text = f"+ {_fmt(e.constant)}" if e.constant >= 0 else f"- {_fmt(-e.constant)}"
    return text


_NUM = re.compile(r"^[-+]?(\d+\.?\d*([eE][-+]?\d+)?|\.\d+([eE][-+]?\d+)?|inf(inity)?)$", re.I)


def _parse_expr(text: str):
    """Parse ``+ 1.5 x - 2 y + 3`` into (terms, constant)."""
    tokens = text.split()
    terms, const = [], 0.0
    k = 0
    sign = 1.0
    while k < len(tokens):
        tok = tokens[k]
        if tok in "+-":
            sign = -1.0 if tok == "-" else 1.0
            k += 1
            continue
        if _NUM.match(tok):
            coef = float(tok)
            nxt = tokens[k + 1] if k + 1 < len(tokens) else None
            if nxt is not None and nxt not in "+-" and not _NUM.match(nxt):
                terms.append((_ir_name(nxt), sign * coef))
                k += 2
            else:
                const += sign * coef
                k += 1
        else:
            terms.append((_ir_name(tok), sign))
            k += 1
        sign = 1.0
    return terms, const


def parse_text(text: str) -> ConicProgram:
    """Inverse of :func:`export_text` (for the subset of the format it writes)."""
    section = None
    obj_terms, obj_const = [], 0.0
    rows, bounds, bins, cones = [], {}, [], []
    names: list[str] = []
    seen: set = set()

    def note(name):
        if name not in seen:
            seen.add(name)
            names.append(name)

    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("\\"):
            continue
        low = line.lower()
        if low in ("minimize", "subject to", "bounds", "binaries", "cones", "end"):
            section = low
            continue
        if section == "minimize":
            body = line.split(":", 1)[1] if ":" in line else line
            obj_terms, obj_const = _parse_expr(body)
            for n_, _ in obj_terms:
                note(n_)
        elif section == "subject to":
            name, body = line.split(":", 1)
            m = re.search(r"(<=|>=|=)\s*(\S+)\s*$", body)
            sense = {"<=": "<=", ">=": ">=", "=": "=="}[m.group(1)]
            terms, _ = _parse_expr(body[:m.start()])
            for n_, _ in terms:
                note(n_)
            rows.append(LinearConstraint(_ir_name(name.strip()), _merge_terms(terms), sense,
                                         float(m.group(2))))
        elif section == "bounds":
            parts = line.split()
            if len(parts) == 2 and parts[1] == "free":
                bounds[_ir_name(parts[0])] = (-math.inf, math.inf)
            elif len(parts) == 3:
                bounds[_ir_name(parts[0])] = (float(parts[2]), math.inf)
            else:
                bounds[_ir_name(parts[2])] = (float(parts[0]), float(parts[4]))
            note(_ir_name(parts[2] if len(parts) == 5 else parts[0]))
        elif section == "binaries":
            for tok in line.split():
                bins.append(_ir_name(tok))
                note(_ir_name(tok))
        elif section == "cones":
            if low.startswith("cone "):
                cones.append([_ir_name(line.split(None, 1)[1]), None, []])
            else:
                key, body = line.split(":", 1)
                terms, const = _parse_expr(body)
                for n_, _ in terms:
                    note(n_)
                expr = AffineExpr.of(terms, const)
                if key.strip() == "t":
                    cones[-1][1] = expr
                else:
                    cones[-1][2].append(expr)
    bin_set = set(bins)
    variables = []
    for name in names:
        if name in bin_set:
            variables.append(Variable(name, BINARY, 0.0, 1.0))
        else:
            lb, ub = bounds.get(name, (0.0, math.inf))
            variables.append(Variable(name, CONTINUOUS, lb, ub))
    tags: dict[str, list] = {}
    for v in variables:
        tags.setdefault(split_name(v.name)[0], []).append(v.name)
    return ConicProgram(tuple(variables), tuple(rows),
                        tuple(SOCConstraint(n_, t, tuple(u)) for n_, t, u in cones),
                        Objective(_merge_terms(obj_terms), obj_const),
                        {"tags": {k: tuple(v) for k, v in tags.items()}})
