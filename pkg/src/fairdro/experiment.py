"""Training dispatch, evaluation, cross-validation of the radius, frontier sweeps and timing."""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
import statistics
import time
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ._atomic import atomic_write_text
from .data import Dataset, gen_synthetic, group_index, split
from .errors import EmptyProtectedGroup, FairDROError
from .metrics import (Hyperplane, accuracy, eo_unfairness, worst_case_eps_unfairness,
                      worst_case_misclass)
from .model import ConicProgram
from .reformulate import ModelSpec, Variant, build
from .solve import (SolveOptions, SolveResult, Status, cvar_classifier, extract_hyperplane,
                    solve)

log = logging.getLogger("fairdro.experiment")

SWEEP_PARAMS = ("eta", "zeta", "rho")


# ---------------------------------------------------------------------------
# training


@dataclass
class Trained:
    hyperplane: Hyperplane | None
    status: Status
    objective: float
    result: SolveResult | None
    program: ConicProgram | None

    @property
    def ok(self) -> bool:
        return self.hyperplane is not None


def _indicator_start(data: Dataset, spec: ModelSpec, h: Hyperplane) -> dict:
    """Binary values that make ``h`` a point of the absolute-trust eps model."""
    pad = spec.rho * spec.norm.dual_value(h.w)
    s = h.scores(data.features)
    y = data.labels
    start = {f"t[{i}]": float(-y[i] * s[i] + pad > -spec.eps) for i in range(data.n)}
    groups = group_index(data)
    for a, ap in ((0, 1), (1, 0)):
        for i in groups.index_sets[(a, 1)]:
            start[f"lam{a}[{i}]"] = float(s[i] + pad > -spec.eps)
        for i in groups.index_sets[(ap, 1)]:
            start[f"lam{a}[{i}]"] = float(-s[i] + pad > 0)
    return start


def _start_candidates(data: Dataset, spec: ModelSpec):
    yield Hyperplane.zero(data.d)
    for template in (ModelSpec("svm"), ModelSpec("hdrfc", zeta=1.0 + spec.eta, rho=spec.rho,
                                                   norm=spec.norm)):
        try:
            prog = build(data, template)
            res = solve(prog)
        except FairDROError:
            continue
        if res.has_solution:
            yield extract_hyperplane(res, prog, warn_box=False)


def heuristic_start(data: Dataset, spec: ModelSpec) -> dict | None:
    """Best feasible start among the trivial, SVM and hinge-model classifiers.

    Each candidate is clipped into the box, then scored with the closed-form
    worst-case evaluators; only candidates meeting the fairness bound qualify.
    """
    best, best_val = None, math.inf
    for h in _start_candidates(data, spec):
        scale = max(np.max(np.abs(h.w), initial=0.0) / spec.box.w_max,
                    abs(h.b) / spec.box.b_max, 1.0)
        h = Hyperplane(h.w / scale, h.b / scale)
        if worst_case_eps_unfairness(h, data, spec.rho, spec.eps, spec.norm) > spec.eta:
            continue
        val = worst_case_misclass(h, data, spec.rho, spec.eps, spec.norm)
        if val < best_val:
            best, best_val = h, val
    return None if best is None else _indicator_start(data, spec, best)


def train(data: Dataset, spec: ModelSpec, opts: SolveOptions | None = None,
          start="auto") -> Trained:
    """Fit the classifier described by ``spec``.

    ``start="auto"`` seeds the absolute-trust eps model with
    :func:`heuristic_start`; pass ``None`` to disable or a mapping of binary
    values to supply one.
    """
    if spec.variant is Variant.CVaRApprox:
        t, h = cvar_classifier(data)
        return Trained(h, Status.Optimal, t, None, None)
    program = build(data, spec)
    if isinstance(start, str):
        if start != "auto":
            raise ValueError(f"start must be 'auto', None or a mapping, got {start!r}")
        start = heuristic_start(data, spec) if spec.variant is Variant.EpsDRFC else None
    result = solve(program, opts, start=start)
    h = extract_hyperplane(result, program) if result.has_solution else None
    return Trained(h, result.status, result.objective, result, program)


def evaluate(h: Hyperplane, test: Dataset) -> dict:
    """Test accuracy and equal-opportunity gap."""
    groups = group_index(test)
    for a in (0, 1):
        if groups.size((a, 1)) == 0:
            raise EmptyProtectedGroup((a, 1))
    return {"accuracy": accuracy(h, test), "eo_unfairness": eo_unfairness(h, test)}


# ---------------------------------------------------------------------------
# cross-validation over the radius


def _subsplit(data: Dataset, subtrain_n: int, rng: np.random.Generator):
    perm = rng.permutation(data.n)
    return data.subset(np.sort(perm[:subtrain_n])), data.subset(np.sort(perm[subtrain_n:]))


def cross_validate(data: Dataset, rho_grid: Sequence[float], template: ModelSpec,
                   K1: int = 5, subtrain_n: int = 200, seed: int = 0,
                   score_weight: float = 0.5, opts: SolveOptions | None = None,
                   return_scores: bool = False):
    """Radius with the best mean validation score ``accuracy - score_weight * unfairness``.

    Every radius sees the same ``K1`` random sub-splits. A fold whose
    training or evaluation raises is skipped with a warning; a radius losing
    more than half its folds is disqualified. Ties go to the smaller radius,
    then to the earlier grid entry.
    """
    grid = [float(r) for r in rho_grid]
    if not grid:
        raise ValueError("rho_grid is empty")
    if K1 < 1:
        raise ValueError("K1 must be at least 1")
    if not 2 <= subtrain_n <= data.n - 2:
        raise ValueError(f"subtrain_n={subtrain_n} leaves no room for validation in N={data.n}")
    rng = np.random.default_rng(seed)
    folds = [_subsplit(data, subtrain_n, rng) for _ in range(K1)]
    scores = []
    for rho in grid:
        spec = dataclasses.replace(template, rho=rho)
        vals = []
        for k, (tr, va) in enumerate(folds):
            try:
                fit = train(tr, spec, opts)
                if not fit.ok:
                    raise FairDROError(f"solver ended {fit.status.value}")
                rep = evaluate(fit.hyperplane, va)
            except FairDROError as exc:
                warnings.warn(f"rho={rho} fold {k} skipped: {exc}", RuntimeWarning, stacklevel=2)
                continue
            vals.append(rep["accuracy"] - score_weight * rep["eo_unfairness"])
        if len(vals) * 2 < K1:
            scores.append(-math.inf)
        else:
            scores.append(float(np.mean(vals)))
    top = max(scores)
    best = min((i for i, v in enumerate(scores) if v == top), key=lambda i: (grid[i], i))
    if not math.isfinite(scores[best]):
        raise FairDROError("every radius lost more than half of its folds")
    return (grid[best], scores) if return_scores else grid[best]


# ---------------------------------------------------------------------------
# frontier sweeps


@dataclass(frozen=True)
class SweepGrid:
    param: str
    values: tuple
    seeds: tuple

    def __post_init__(self):
        if self.param not in SWEEP_PARAMS:
            raise ValueError(f"sweep parameter must be one of {SWEEP_PARAMS}, got {self.param!r}")
        vals = tuple(float(v) for v in self.values)
        if not vals:
            raise ValueError("sweep grid is empty")
        if any(b <= a for a, b in zip(vals, vals[1:])):
            raise ValueError("sweep values must be strictly increasing")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.seeds:
            raise ValueError("sweep needs at least one seed")


@dataclass(frozen=True)
class FrontierPoint:
    param: str
    value: float
    mean_acc: float
    std_acc: float
    mean_unf: float
    std_unf: float
    trials: int
    seeds: tuple = ()

    def row(self) -> list:
        return [self.param, repr(self.value), repr(self.mean_acc), repr(self.std_acc),
                repr(self.mean_unf), repr(self.std_unf), self.trials]


FRONTIER_HEADER = ("param", "value", "mean_acc", "std_acc", "mean_unf", "std_unf", "trials")


def _has_positive_groups(data: Dataset) -> bool:
    g = group_index(data)
    return g.size((0, 1)) > 0 and g.size((1, 1)) > 0


def synthetic_source(n_train: int = 50, n_test: int = 150,
                     max_redraws: int = 100) -> Callable[[int], tuple]:
    """Seeded (train, test) pairs from the synthetic generator.

    The minority positive group is small, so a draw can leave it empty on
    one side of the split. Such a draw is replaced by the next one from the
    seed sequence ``(seed, k)``, ``k = 1, 2, ...``, which keeps every trial a
    pure function of its seed.
    """
    frac = n_train / (n_train + n_test)

    def draw(seed):
        for k in range(max_redraws + 1):
            sub = seed if k == 0 else int(np.random.SeedSequence([seed, k]).generate_state(1)[0])
            tr, te = split(gen_synthetic(n_train + n_test, sub), frac, sub)
            if _has_positive_groups(tr) and _has_positive_groups(te):
                return tr, te
        raise FairDROError(f"no draw with both positive groups after {max_redraws} tries")

    return draw


def _std(xs):
    return statistics.pstdev(xs) if len(xs) > 1 else 0.0


def pareto_sweep(source, template: ModelSpec, grid: SweepGrid,
                 opts: SolveOptions | None = None) -> list[FrontierPoint]:
    """One frontier point per grid value, averaged over the grid's seeds.

    ``source`` is either a callable ``seed -> (train, test)`` or a fixed
    ``(train, test)`` pair reused for every seed. A failing trial is logged
    and left out of its point's averages.
    """
    draw = source if callable(source) else (lambda seed: source)
    pairs = {seed: draw(seed) for seed in grid.seeds}
    points = []
    for value in grid.values:
        spec = dataclasses.replace(template, **{grid.param: value})
        accs, unfs, used = [], [], []
        for seed in grid.seeds:
            tr, te = pairs[seed]
            try:
                fit = train(tr, spec, opts)
                if not fit.ok:
                    raise FairDROError(f"solver ended {fit.status.value}")
                rep = evaluate(fit.hyperplane, te)
            except FairDROError as exc:
                log.warning("%s=%g seed %d failed: %s", grid.param, value, seed, exc)
                continue
            accs.append(rep["accuracy"])
            unfs.append(rep["eo_unfairness"])
            used.append(seed)
        nan = math.nan
        points.append(FrontierPoint(
            grid.param, value,
            statistics.fmean(accs) if accs else nan, _std(accs),
            statistics.fmean(unfs) if unfs else nan, _std(unfs),
            len(used), tuple(used)))
    return points


def frontier_csv(points: Sequence[FrontierPoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FRONTIER_HEADER)
    for p in points:
        w.writerow(p.row())
    return buf.getvalue()


def write_frontier_csv(points: Sequence[FrontierPoint], path) -> None:
    atomic_write_text(path, frontier_csv(points))


# ---------------------------------------------------------------------------
# runtime benchmark


@dataclass(frozen=True)
class BenchRow:
    dataset: str
    N: int
    variant: str
    seconds: float
    status: str


BENCH_HEADER = ("dataset", "N", "variant", "seconds", "status")


def benchmark_runtime(sizes: Sequence[int], variants: Sequence[ModelSpec],
                      dataset: str = "synthetic", seed: int = 0, repeats: int = 3,
                      opts: SolveOptions | None = None,
                      loader: Callable[[int, int], Dataset] | None = None) -> list[BenchRow]:
    """Median wall-clock of ``repeats`` build-and-solve runs per (size, variant).

    The status column carries the first non-optimal status seen across the
    repeats, so a run that hit its time limit is flagged even if others finished.
    """
    if repeats < 1:
        raise ValueError("repeats must be at least 1")
    loader = loader or (lambda n, s: gen_synthetic(n, s))
    rows = []
    for n in sizes:
        if n < 50:
            raise ValueError(f"benchmark sizes must be at least 50, got {n}")
        data = loader(int(n), seed)
        for spec in variants:
            times, statuses = [], []
            for _ in range(repeats):
                t0 = time.perf_counter()
                fit = train(data, spec, opts, start=None)
                times.append(time.perf_counter() - t0)
                statuses.append(fit.status)
            flagged = [s for s in statuses if s is not Status.Optimal]
            status = flagged[0] if flagged else Status.Optimal
            rows.append(BenchRow(dataset, int(n), spec.variant.value,
                                 statistics.median(times), status.value))
    return rows


def bench_csv(rows: Sequence[BenchRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BENCH_HEADER)
    for r in rows:
        w.writerow([r.dataset, r.N, r.variant, f"{r.seconds:.6f}", r.status])
    return buf.getvalue()


def write_bench_csv(rows: Sequence[BenchRow], path) -> None:
    atomic_write_text(path, bench_csv(rows))
