import itertools

import numpy as np
import pytest

from fairdro.data import CELLS, Dataset, group_index
from fairdro.metrics import Hyperplane


def random_dataset(rng, n, d, need_positive_groups=True, need_all_cells=False, scale=1.0):
    """Random small dataset; resamples until the requested groups are populated."""
    for _ in range(1000):
        x = np.round(rng.normal(scale=scale, size=(n, d)), 3)
        a = rng.integers(0, 2, n)
        y = rng.choice([-1, 1], n)
        data = Dataset(x, a, y)
        g = group_index(data)
        if need_positive_groups and (g.size((0, 1)) == 0 or g.size((1, 1)) == 0):
            continue
        if need_all_cells and any(g.size(c) == 0 for c in CELLS):
            continue
        return data
    raise RuntimeError("could not draw a dataset with the requested groups")


def random_hyperplane(rng, d, scale=2.0):
    return Hyperplane(np.round(rng.normal(scale=scale, size=d), 3), float(np.round(rng.normal(), 3)))


def linf_ball_points(center, radius):
    """2^d corners plus the center of an L-inf ball."""
    pts = [np.asarray(center, float)]
    for signs in itertools.product((-1.0, 1.0), repeat=len(center)):
        pts.append(np.asarray(center, float) + radius * np.array(signs))
    return pts


@pytest.fixture
def four_points():
    """The four positive samples used in several hand-computed examples."""
    return Dataset(np.array([[2.0], [-1.0], [1.0], [3.0]]), np.array([1, 1, 0, 0]),
                   np.array([1, 1, 1, 1]))


# -- grid-search oracles ------------------------------------------------------
# Vectorized restatements of the absolute-trust closed forms (L-inf feature
# norm, so the dual is L1). test_reformulate checks them against the metrics
# module at sampled points before they are trusted as oracles.

def grid(w_max, b_max, d, k=51):
    """All points of a k^(d+1) grid over the box, as (W, b) with shape (K, d), (K,)."""
    axes = [np.linspace(-w_max, w_max, k)] * d + [np.linspace(-b_max, b_max, k)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d + 1)
    return mesh[:, :d], mesh[:, d]


def _pad_scores(data, W, b, rho):
    s = W @ data.features.T + b[:, None]
    pad = rho * np.abs(W).sum(axis=1)[:, None]
    return s, pad


def _positive_sets(data):
    g = group_index(data)
    return {a: g.index_sets[(a, 1)] for a in (0, 1)}


def eps_grid_values(data, W, b, rho, eps):
    """(worst-case misclassification, worst-case eps-unfairness) at every grid point."""
    s, pad = _pad_scores(data, W, b, rho)
    obj = np.mean(-data.labels * s + pad > -eps, axis=1)
    pos = _positive_sets(data)
    unf = np.full(len(b), -np.inf)
    for a, ap in ((0, 1), (1, 0)):
        term = (np.mean(s[:, pos[a]] + pad > -eps, axis=1)
                + np.mean(-s[:, pos[ap]] + pad > 0, axis=1) - 1.0)
        unf = np.maximum(unf, term)
    return obj, unf


def hinge_grid_values(data, W, b, rho):
    """(worst-case hinge loss, worst-case hinge unfairness) at every grid point."""
    s, pad = _pad_scores(data, W, b, rho)
    obj = np.mean(np.maximum(0.0, 1 - data.labels * s + pad), axis=1)
    pos = _positive_sets(data)
    unf = np.full(len(b), -np.inf)
    for a, ap in ((0, 1), (1, 0)):
        term = (np.mean(np.maximum(0.0, 1 + s[:, pos[a]] + pad), axis=1)
                + np.mean(np.maximum(0.0, 1 - s[:, pos[ap]] + pad), axis=1) - 1.0)
        unf = np.maximum(unf, term)
    return obj, unf


def cell_variation(values, d, k=51):
    """Largest max-minus-min of ``values`` over the corners of one grid cell."""
    from numpy.lib.stride_tricks import sliding_window_view

    v = values.reshape((k,) * (d + 1))
    win = sliding_window_view(v, (2,) * (d + 1))
    axes = tuple(range(d + 1, 2 * (d + 1)))
    return float(np.max(win.max(axis=axes) - win.min(axis=axes)))


def grid_minimum(obj, unf, cap):
    """Smallest objective over grid points meeting the unfairness cap, with its index."""
    feasible = unf <= cap
    masked = np.where(feasible, obj, np.inf)
    k = int(np.argmin(masked))
    return float(masked[k]), k


# -- brute-force fixing oracle --------------------------------------------------

def brute_force_mip(program):
    """Minimum over every 0/1 fixing of the binaries of the continuous subproblem.

    Subproblems are LPs solved with scipy's linprog, not the package's engine.
    A fixing is skipped only when the objective has no continuous part and its
    binary part already reaches the best value (it cannot improve on it).
    """
    import scipy.sparse as sp
    from scipy.optimize import linprog

    cp = program.compiled
    assert not cp.cones
    bins = np.flatnonzero(cp.is_binary)
    cont_free = not np.any(cp.c[~cp.is_binary])
    A = cp.A.tocsr()
    up, dn = np.isfinite(cp.row_hi), np.isfinite(cp.row_lo)
    a_ub = sp.vstack([A[up], -A[dn]]).tocsr()
    b_ub = np.concatenate([cp.row_hi[up], -cp.row_lo[dn]])
    best = np.inf
    for bits in itertools.product((0.0, 1.0), repeat=len(bins)):
        bits = np.array(bits)
        if cont_free and cp.c[bins] @ bits + cp.c0 >= best:
            continue
        lb, ub = cp.lb.copy(), cp.ub.copy()
        lb[bins] = ub[bins] = bits
        res = linprog(cp.c, A_ub=a_ub, b_ub=b_ub, bounds=list(zip(lb, ub)), method="highs")
        if res.status == 0:
            best = min(best, res.fun + cp.c0)
    return best


def micro_eps_dataset(rng, n=8, d=2):
    """n samples with exactly one positive per sensitive group, so eps-DRFC has n + 4 binaries."""
    x = np.round(rng.normal(size=(n, d)), 3)
    y = -np.ones(n, dtype=int)
    a = rng.integers(0, 2, n)
    pos = rng.choice(n, 2, replace=False)
    y[pos] = 1
    a[pos] = [0, 1]
    return Dataset(x, a, y)


def svm_value_oracle(data):
    """SVM optimum by scipy linprog on (w, b, xi)."""
    from scipy.optimize import linprog

    n, d = data.n, data.d
    c = np.concatenate([np.zeros(d + 1), np.full(n, 1.0 / n)])
    a = np.hstack([-data.labels[:, None] * data.features, -data.labels[:, None], -np.eye(n)])
    bounds = [(None, None)] * (d + 1) + [(0, None)] * n
    return linprog(c, A_ub=a, b_ub=-np.ones(n), bounds=bounds, method="highs").fun


# -- acceptance summary ---------------------------------------------------------

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
