"""Continuous conic solves, a deterministic branch-and-bound, and solution read-back.

Continuous relaxations are delegated to HiGHS (pure LPs, warm-started
across branch-and-bound nodes) and Clarabel (programs with cones). The
branch-and-bound itself is implemented here: best-bound node selection with
a depth-first tiebreak, most-fractional branching, eager child evaluation.
"""

from __future__ import annotations

import copy
import dataclasses
import enum
import heapq
import json
import logging
import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .data import Dataset
from .errors import BoxBindingWarning, FairDROError, MissingTags, NumericalFailure
from .metrics import Hyperplane
from .model import BINARY, ConicProgram, ProgramBuilder, indexed

log = logging.getLogger("fairdro.solve")

INT_TOL = 1e-6
LP_TOL = 1e-9
# Inactive big-M rows are pushed this far inside their bound before read-back,
# so that strict indicator comparisons agree with the binaries.
STRICT_MARGIN = 1e-7


class Status(str, enum.Enum):
    Optimal = "Optimal"
    Infeasible = "Infeasible"
    Unbounded = "Unbounded"
    GapLimit = "GapLimit"
    TimeLimit = "TimeLimit"

    def __str__(self):
        return self.value


@dataclass(frozen=True)
class SolveOptions:
    mip_gap_tol: float = 1e-6
    node_limit: int = 10_000_000
    time_limit_s: float = math.inf
    branching: str = "most_fractional"
    node_selection: str = "best_bound"

    def __post_init__(self):
        if not (self.mip_gap_tol >= 0 and self.node_limit > 0 and self.time_limit_s > 0):
            raise ValueError("solve limits must be positive")
        if self.branching != "most_fractional" or self.node_selection != "best_bound":
            raise ValueError("only most_fractional branching with best_bound selection is available")


@dataclass
class SolveResult:
    status: Status
    objective: float
    x: np.ndarray | None
    names: tuple
    mip_gap: float = 0.0
    node_count: int = 0
    wall_time: float = 0.0
    dual_bound: float = math.nan
    log: list = field(default_factory=list)

    @property
    def assignment(self) -> dict:
        if self.x is None:
            return {}
        return dict(zip(self.names, self.x.tolist()))

    @property
    def has_solution(self) -> bool:
        return self.x is not None

    @property
    def proven(self) -> bool:
        return self.status is Status.Optimal

    def value(self, name) -> float:
        return float(self.x[self.names.index(name)])

    def summary(self) -> dict:
        return {"status": self.status.value, "objective": _jsonable(self.objective),
                "mip_gap": _jsonable(self.mip_gap), "node_count": self.node_count,
                "wall_time": self.wall_time, "dual_bound": _jsonable(self.dual_bound)}

    def to_json(self) -> str:
        return json.dumps(self.summary())


def _jsonable(v):
    v = float(v)
    return v if math.isfinite(v) else None


# ---------------------------------------------------------------------------
# relaxation engines


class _HighsEngine:
    """Persistent HiGHS model; bound changes keep the simplex basis for warm starts."""

    def __init__(self, program: ConicProgram):
        import highspy

        self._hs = highspy
        cp = program.compiled
        self.cp = cp
        h = highspy.Highs()
        for key, val in (("output_flag", False), ("presolve", "off"), ("threads", 1),
                         ("primal_feasibility_tolerance", LP_TOL),
                         ("dual_feasibility_tolerance", LP_TOL), ("random_seed", 0)):
            h.setOptionValue(key, val)
        lp = highspy.HighsLp()
        lp.num_col_ = cp.n
        lp.num_row_ = cp.A.shape[0]
        lp.col_cost_ = cp.c
        lp.col_lower_ = cp.lb
        lp.col_upper_ = cp.ub
        lp.row_lower_ = cp.row_lo
        lp.row_upper_ = cp.row_hi
        lp.offset_ = cp.c0
        A = cp.A.tocsr()
        lp.a_matrix_.format_ = highspy.MatrixFormat.kRowwise
        lp.a_matrix_.start_ = A.indptr.astype(np.int32)
        lp.a_matrix_.index_ = A.indices.astype(np.int32)
        lp.a_matrix_.value_ = A.data.astype(float)
        lp.a_matrix_.num_col_ = cp.n
        lp.a_matrix_.num_row_ = cp.A.shape[0]
        h.passModel(lp)
        self.h = h

    def set_bounds(self, cols, lo, hi):
        if len(cols):
            self.h.changeColsBounds(len(cols), np.asarray(cols, np.int32),
                                    np.asarray(lo, float), np.asarray(hi, float))

    def solve(self):
        hs = self._hs
        self.h.run()
        st = self.h.getModelStatus()
        if st == hs.HighsModelStatus.kOptimal:
            sol = self.h.getSolution()
            x = np.array(sol.col_value)
            return "optimal", float(self.h.getInfo().objective_function_value), x
        if st == hs.HighsModelStatus.kInfeasible:
            return "infeasible", math.inf, None
        if st in (hs.HighsModelStatus.kUnbounded, hs.HighsModelStatus.kUnboundedOrInfeasible):
            return self._disambiguate(), -math.inf, None
        raise NumericalFailure(f"HiGHS stopped with status {self.h.modelStatusToString(st)}",
                               {"status": self.h.modelStatusToString(st)})

    def _disambiguate(self):
        """Tell infeasible from unbounded by solving the feasibility problem."""
        hs = self._hs
        cp = self.cp
        self.h.changeColsCost(cp.n, np.arange(cp.n, dtype=np.int32), np.zeros(cp.n))
        self.h.clearSolver()
        self.h.run()
        st = self.h.getModelStatus()
        self.h.changeColsCost(cp.n, np.arange(cp.n, dtype=np.int32), cp.c)
        self.h.clearSolver()
        return "infeasible" if st == hs.HighsModelStatus.kInfeasible else "unbounded"

    def dual_bound(self) -> float:
        """Dual objective from row and column duals of the last optimal solve."""
        sol = self.h.getSolution()
        if not sol.dual_valid:
            return math.nan
        cp = self.cp
        y = np.array(sol.row_dual)
        z = np.array(sol.col_dual)
        lp = self.h.getLp()
        lb, ub = np.array(lp.col_lower_), np.array(lp.col_upper_)
        total = cp.c0
        for duals, lo, hi in ((y, cp.row_lo, cp.row_hi), (z, lb, ub)):
            bound = np.where(duals > 0, lo, hi)
            active = np.abs(duals) > 0
            if np.any(~np.isfinite(bound[active])):
                return math.nan
            total += float(duals[active] @ bound[active])
        return total


class _ClarabelEngine:
    """Clarabel interior-point solve; rebuilt per call since bounds change between nodes."""

    def __init__(self, program: ConicProgram):
        self.cp = program.compiled
        self.lb = self.cp.lb.copy()
        self.ub = self.cp.ub.copy()
        A = self.cp.A.tocsr()
        lo, hi = self.cp.row_lo, self.cp.row_hi
        eq = np.flatnonzero(lo == hi)
        up = np.flatnonzero((lo != hi) & np.isfinite(hi))
        dn = np.flatnonzero((lo != hi) & np.isfinite(lo))
        self._eq = (A[eq], hi[eq])
        self._ineq = (sp.vstack([A[up], -A[dn]]).tocsr(), np.concatenate([hi[up], -lo[dn]]))
        self._cones = [(-g, h) for g, h in self.cp.cones]
        self._last = None

    def set_bounds(self, cols, lo, hi):
        self.lb[cols] = lo
        self.ub[cols] = hi

    def solve(self):
        import clarabel

        n = self.cp.n
        eye = sp.identity(n, format="csr")
        fixed = np.flatnonzero(self.lb == self.ub)
        lo_idx = np.flatnonzero(np.isfinite(self.lb) & (self.lb != self.ub))
        hi_idx = np.flatnonzero(np.isfinite(self.ub) & (self.lb != self.ub))
        blocks_a = [self._eq[0], eye[fixed], self._ineq[0], -eye[lo_idx], eye[hi_idx]]
        blocks_b = [self._eq[1], self.ub[fixed], self._ineq[1], -self.lb[lo_idx], self.ub[hi_idx]]
        cones = []
        n_zero = self._eq[0].shape[0] + len(fixed)
        n_pos = self._ineq[0].shape[0] + len(lo_idx) + len(hi_idx)
        if n_zero:
            cones.append(clarabel.ZeroConeT(n_zero))
        if n_pos:
            cones.append(clarabel.NonnegativeConeT(n_pos))
        for g, h in self._cones:
            blocks_a.append(g)
            blocks_b.append(h)
            cones.append(clarabel.SecondOrderConeT(g.shape[0]))
        A = sp.vstack(blocks_a).tocsc()
        b = np.concatenate(blocks_b)
        st = clarabel.DefaultSettings()
        st.verbose = False
        st.tol_gap_abs = 1e-10
        st.tol_gap_rel = 1e-10
        st.tol_feas = 1e-10
        st.tol_ktratio = 1e-8
        st.max_iter = 400
        st.max_threads = 1
        solver = clarabel.DefaultSolver(sp.csc_matrix((n, n)), self.cp.c, A, b, cones, st)
        res = solver.solve()
        self._last = res
        status = str(res.status)
        if status in ("Solved", "AlmostSolved"):
            x = np.array(res.x)
            return "optimal", float(self.cp.c @ x + self.cp.c0), x
        if status in ("PrimalInfeasible", "AlmostPrimalInfeasible"):
            return "infeasible", math.inf, None
        if status in ("DualInfeasible", "AlmostDualInfeasible"):
            return "unbounded", -math.inf, None
        raise NumericalFailure(f"Clarabel stopped with status {status}",
                               {"status": status, "iterations": res.iterations})

    def dual_bound(self) -> float:
        res = self._last
        val = getattr(res, "obj_val_dual", None)
        return float(val) + self.cp.c0 if val is not None else math.nan


def _engine(program: ConicProgram):
    return _ClarabelEngine(program) if program.has_soc else _HighsEngine(program)


_STATUS = {"optimal": Status.Optimal, "infeasible": Status.Infeasible,
           "unbounded": Status.Unbounded}


def solve_continuous(program: ConicProgram) -> SolveResult:
    """Solve the program with binaries relaxed to [0, 1]."""
    start = time.perf_counter()
    eng = _engine(program)
    status, obj, x = eng.solve()
    bound = eng.dual_bound() if status == "optimal" else math.nan
    return SolveResult(_STATUS[status], obj, x, program.compiled.names, 0.0, 1,
                       time.perf_counter() - start, bound)


# ---------------------------------------------------------------------------
# branch and bound


def _objective_unit(program: ConicProgram) -> float | None:
    """Common coefficient when the objective is a constant-free sum of binaries, else None."""
    cp = program.compiled
    nz = np.flatnonzero(cp.c)
    if cp.c0 != 0.0 or nz.size == 0 or not np.all(cp.is_binary[nz]):
        return None
    unit = cp.c[nz[0]]
    if unit <= 0 or not np.allclose(cp.c[nz], unit, rtol=0, atol=1e-15):
        return None
    return float(unit)


@dataclass(order=True)
class _Node:
    bound: float
    neg_depth: int
    nid: int
    lo: np.ndarray = field(compare=False)
    hi: np.ndarray = field(compare=False)
    x: np.ndarray = field(compare=False)


class _BranchAndBound:
    def __init__(self, program, opts, start):
        self.program = program
        self.opts = opts
        self.cp = program.compiled
        self.bins = np.flatnonzero(self.cp.is_binary)
        self.engine = _engine(program)
        self.unit = _objective_unit(program)
        self.incumbent = math.inf
        self.inc_x = None
        self.nodes = 0
        self.next_id = 0
        self.lines: list = []
        self.t0 = time.perf_counter()
        self.start = start

    # bound helpers --------------------------------------------------------
    def _round_bound(self, obj):
        if self.unit is None or not math.isfinite(obj):
            return obj
        return math.ceil(obj / self.unit - 1e-6) * self.unit

    def _prunable(self, bound):
        return bound >= self.incumbent - self.opts.mip_gap_tol

    def _solve(self, lo, hi, count=True):
        self.engine.set_bounds(self.bins, lo, hi)
        self.nodes += count
        return self.engine.solve()

    def _fractional(self, x):
        xb = x[self.bins]
        frac = np.minimum(xb - np.floor(xb), np.ceil(xb) - xb)
        return frac

    def _try_incumbent(self, lo, hi, x, node_id):
        """Fix the (near-)integral binaries of ``x`` and re-solve for an exact point."""
        fixed = np.clip(np.round(x[self.bins]), lo, hi)
        status, obj, xs = self._solve(fixed, fixed, count=False)
        if status != "optimal":
            return
        xs = xs.copy()
        xs[self.bins] = fixed
        obj = self.program.objective_value(xs)
        if obj < self.incumbent - 1e-12:
            self.incumbent = obj
            self.inc_x = xs
            line = f"node={node_id} obj={obj:.10g} gap={self._gap():.3g}"
            self.lines.append(line)
            log.info(line)

    def _gap(self):
        if not math.isfinite(self.incumbent):
            return math.inf
        if not self.heap and self.nodes == 0:
            return math.inf
        best = min((nd.bound for nd in self.heap), default=self.incumbent)
        return max(self.incumbent - min(best, self.incumbent), 0.0)

    def _apply_start(self, start):
        names = self.cp.names
        vals = np.zeros(len(self.bins))
        for k, j in enumerate(self.bins):
            vals[k] = float(start.get(names[j], 0.0)) if isinstance(start, dict) else start[k]
        x = np.zeros(self.cp.n)
        x[self.bins] = vals
        self._try_incumbent(np.zeros(len(self.bins)), np.ones(len(self.bins)), x, 0)

    # main loop ------------------------------------------------------------
    def run(self) -> SolveResult:
        self.heap: list = []
        nb = len(self.bins)
        lo0 = self.cp.lb[self.bins].copy()
        hi0 = self.cp.ub[self.bins].copy()
        if self.start is not None:
            self._apply_start(self.start)
        status, obj, x = self._solve(lo0, hi0)
        if status == "infeasible":
            if math.isfinite(self.incumbent):
                raise NumericalFailure("root relaxation infeasible but a start point was feasible")
            return self._result(Status.Infeasible, math.inf)
        if status == "unbounded":
            return self._result(Status.Unbounded, -math.inf)
        self._consider(lo0, hi0, obj, x, depth=0)
        limit_hit = None
        while self.heap:
            if self.nodes >= self.opts.node_limit:
                limit_hit = Status.GapLimit
                break
            if time.perf_counter() - self.t0 > self.opts.time_limit_s:
                limit_hit = Status.TimeLimit
                break
            node = heapq.heappop(self.heap)
            if self._prunable(node.bound):
                continue
            frac = self._fractional(node.x)
            k = int(np.argmax(frac))  # first index wins ties
            for val in (0.0, 1.0):
                lo, hi = node.lo.copy(), node.hi.copy()
                lo[k] = hi[k] = val
                st, ob, xc = self._solve(lo, hi)
                if st == "optimal":
                    self._consider(lo, hi, ob, xc, depth=-node.neg_depth + 1)
                elif st == "unbounded":
                    return self._result(Status.Unbounded, -math.inf)
        if self.inc_x is not None:
            self._push_inside()
        if limit_hit is None:
            if not math.isfinite(self.incumbent):
                return self._result(Status.Infeasible, math.inf)
            return self._result(Status.Optimal, self.incumbent)
        return self._result(limit_hit, self.incumbent)

    def _push_inside(self):
        """Re-solve the incumbent's fixing with its switched-off big-M rows tightened.

        LP tolerances let an optimal point sit a hair outside ``row <= rhs``
        when the binary that would relax the row is 0; an evaluator that
        counts strict violations then disagrees with the objective. The
        tightened solve keeps the same binaries and objective when it works;
        otherwise the original point is kept.
        """
        cp = self.cp
        fixed = self.inc_x[self.bins]
        A = cp.A.tocsc()[:, self.bins]
        neg_off = (A.multiply(A < 0) @ (fixed < 0.5).astype(float)) < 0
        rows = np.flatnonzero(neg_off & np.isfinite(cp.row_hi) & ~np.isfinite(cp.row_lo))
        if rows.size == 0:
            return
        hi = cp.row_hi.copy()
        hi[rows] -= STRICT_MARGIN
        lb, ub = cp.lb.copy(), cp.ub.copy()
        lb[self.bins] = ub[self.bins] = fixed
        tight = copy.copy(self.program)
        tight.__dict__["compiled"] = dataclasses.replace(cp, row_hi=hi, lb=lb, ub=ub)
        status, _, xs = _engine(tight).solve()
        if status != "optimal":
            return
        xs = xs.copy()
        xs[self.bins] = fixed
        obj = self.program.objective_value(xs)
        if obj <= self.incumbent + LP_TOL:
            self.inc_x = xs

    def _consider(self, lo, hi, obj, x, depth):
        bound = self._round_bound(obj)
        if self._prunable(bound):
            return
        nid = self.next_id
        self.next_id += 1
        if np.all(self._fractional(x) <= INT_TOL):
            self._try_incumbent(lo, hi, x, nid)
            return
        heapq.heappush(self.heap, _Node(bound, -depth, nid, lo, hi, x))

    def _result(self, status, objective):
        best = min((nd.bound for nd in self.heap), default=objective)
        if math.isfinite(objective):
            best = min(best, objective)
            gap = max(objective - best, 0.0)
        else:
            gap = math.inf if status in (Status.GapLimit, Status.TimeLimit) else 0.0
        if status is Status.Optimal:
            gap = max(self.incumbent - min(best, self.incumbent), 0.0)
        return SolveResult(status, objective, self.inc_x, self.cp.names, gap, self.nodes,
                           time.perf_counter() - self.t0, best, list(self.lines))


def solve_mip(program: ConicProgram, opts: SolveOptions | None = None,
              start=None) -> SolveResult:
    """Branch-and-bound over the binary variables.

    ``start`` optionally supplies binary values (a mapping from variable
    name, or a sequence in declaration order) that seed the incumbent.
    """
    opts = opts or SolveOptions()
    if program.num_binaries == 0:
        return solve_continuous(program)
    return _BranchAndBound(program, opts, start).run()


def solve(program: ConicProgram, opts: SolveOptions | None = None, start=None) -> SolveResult:
    return solve_mip(program, opts, start) if program.num_binaries else solve_continuous(program)


# ---------------------------------------------------------------------------
# read-back


def extract_hyperplane(result: SolveResult, program: ConicProgram,
                       warn_box: bool = True) -> Hyperplane:
    """Read the tagged (w, b) out of a solution."""
    tags = program.tags
    if "w" not in tags or "b" not in tags:
        raise MissingTags("program metadata does not tag w and b")
    if not result.has_solution:
        raise FairDROError(f"no solution to extract (status {result.status.value})")
    amap = dict(zip(result.names, result.x))
    w = np.array([amap[n] for n in tags["w"]])
    b = float(amap[tags["b"][0]])
    box = program.metadata.get("box")
    if warn_box and box and w.size and np.max(np.abs(w)) >= box["w_max"] - 1e-6:
        warnings.warn(f"|w|_inf reached the box bound {box['w_max']}; the box may be binding",
                      BoxBindingWarning, stacklevel=2)
    return Hyperplane(w, b)


# ---------------------------------------------------------------------------
# CVaR approximation by bisection


def build_cvar_program(data: Dataset, t: float) -> ConicProgram:
    """min -beta + (1/t) mean(xi) with xi >= beta - y(w'x + b), xi >= 0, beta in [0, 1]."""
    bld = ProgramBuilder()
    w = bld.add_vars("w", range(data.d))
    b = bld.add_var("b")
    beta = bld.add_var("beta", lb=0.0, ub=1.0)
    xi = bld.add_vars("xi", range(data.n), lb=0.0)
    for i in range(data.n):
        yi = float(data.labels[i])
        terms = {wj: yi * float(xj) for wj, xj in zip(w, data.features[i])}
        terms[b] = yi
        terms[xi[i]] = 1.0
        terms[beta] = -1.0
        bld.add_row(indexed("tail", i), terms, ">=", 0.0)
    obj = {v: 1.0 / (t * data.n) for v in xi}
    obj[beta] = -1.0
    bld.set_objective(obj)
    return bld.build(model="cvar", classifier=True, d=data.d, n=data.n)


def cvar_feasible(data: Dataset, t: float, strict: float = 1e-9):
    """(feasible, program, result) for the CVaR constraint at level ``t``."""
    prog = build_cvar_program(data, t)
    res = solve_continuous(prog)
    if res.status is not Status.Optimal:
        raise NumericalFailure(f"CVaR LP at t={t} ended {res.status.value}")
    return res.objective <= -strict, prog, res


def cvar_bisection(data: Dataset, t_range=(0.0, 2.0), tol: float = 1e-4) -> float:
    """Smallest level t at which the CVaR constraint is satisfiable, to within ``tol``.

    ``t_range[0]`` is assumed infeasible and ``t_range[1]`` feasible; the
    upper end must exceed the hinge-loss optimum (at most 1) so the default
    (0, 2] is always valid.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    lo, hi = float(t_range[0]), float(t_range[1])
    if not cvar_feasible(data, hi)[0]:
        raise FairDROError(f"upper end t={hi} of the bisection range is infeasible")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if cvar_feasible(data, mid)[0]:
            hi = mid
        else:
            lo = mid
    return hi


def cvar_classifier(data: Dataset, tol: float = 1e-4) -> tuple[float, Hyperplane]:
    """Bisection level plus the classifier (w/beta, b/beta) certifying it."""
    t = cvar_bisection(data, tol=tol)
    _, prog, res = cvar_feasible(data, t)
    beta = res.value("beta")
    h = extract_hyperplane(res, prog, warn_box=False)
    return t, Hyperplane(h.w / beta, h.b / beta)
