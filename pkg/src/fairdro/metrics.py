"""Empirical and worst-case evaluators for classifiers and fairness measures.

Every worst-case quantity here is computed from a closed form (or, for the
flip-budget ambiguity set, from the primal transport LP) and never from the
program builders, so these functions serve as independent checks of the
reformulations in :mod:`fairdro.reformulate`.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .data import CELLS, Dataset, group_index
from .errors import (DimensionMismatch, EmptyProtectedGroup, FairDROError,
                     LevelOutOfRange)

DEFAULT_EPS = 1e-2

#: Fairness blocks, one per ordered pair (a, a') of sensitive values.
PAIRS = ((0, 1), (1, 0))


class NormKind(enum.Enum):
    """Norm on the feature space; its dual norm prices feature perturbations."""

    L1 = "l1"
    L2 = "l2"
    Linf = "linf"

    @classmethod
    def parse(cls, value) -> "NormKind":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower()
        for member in cls:
            if member.value == key or member.name.lower() == key:
                return member
        raise ValueError(f"unknown norm {value!r}; expected one of l1, l2, linf")

    @property
    def dual(self) -> "NormKind":
        return {NormKind.L1: NormKind.Linf, NormKind.L2: NormKind.L2,
                NormKind.Linf: NormKind.L1}[self]

    def value_of(self, v) -> float:
        v = np.asarray(v, dtype=float)
        if self is NormKind.L1:
            return float(np.abs(v).sum())
        if self is NormKind.L2:
            return float(np.sqrt(v @ v))
        return float(np.abs(v).max()) if v.size else 0.0

    def dual_value(self, v) -> float:
        return self.dual.value_of(v)


@dataclass(frozen=True)
class Hyperplane:
    w: np.ndarray
    b: float

    def __post_init__(self):
        w = np.array(self.w, dtype=float).ravel()
        if not np.all(np.isfinite(w)) or not math.isfinite(float(self.b)):
            raise FairDROError("hyperplane parameters must be finite")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "b", float(self.b))

    @property
    def d(self) -> int:
        return self.w.shape[0]

    def scores(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.d:
            raise DimensionMismatch(f"hyperplane has d={self.d}, input has d={x.shape[-1]}")
        return x @ self.w + self.b

    @classmethod
    def zero(cls, d) -> "Hyperplane":
        return cls(np.zeros(d), 0.0)


def _check_dim(h: Hyperplane, data: Dataset):
    if h.d != data.d:
        raise DimensionMismatch(f"hyperplane has d={h.d}, dataset has d={data.d}")


def _dual(h: Hyperplane, norm) -> float:
    return NormKind.parse(norm).dual_value(h.w)


def _positive_groups(data: Dataset):
    groups = group_index(data)
    for a in (0, 1):
        if groups.size((a, 1)) == 0:
            raise EmptyProtectedGroup((a, 1))
    return groups


# ---------------------------------------------------------------------------
# empirical quantities


def predict(h: Hyperplane, x):
    """Label +1 iff the score is nonnegative. Accepts one sample or a matrix."""
    s = h.scores(x)
    out = np.where(s >= 0, 1, -1)
    return int(out) if np.ndim(s) == 0 else out


def accuracy(h: Hyperplane, data: Dataset) -> float:
    """Fraction of samples with y * score > 0; points on the hyperplane count as errors."""
    _check_dim(h, data)
    return float(np.mean(data.labels * h.scores(data.features) > 0))


def true_positive_rates(h: Hyperplane, data: Dataset) -> tuple[float, float]:
    _check_dim(h, data)
    groups = _positive_groups(data)
    s = h.scores(data.features)
    return tuple(float(np.mean(s[groups.index_sets[(a, 1)]] >= 0)) for a in (0, 1))


def eo_unfairness(h: Hyperplane, data: Dataset) -> float:
    """Equal-opportunity gap |TPR(a=1) - TPR(a=0)|."""
    tpr0, tpr1 = true_positive_rates(h, data)
    return abs(tpr1 - tpr0)


# ---------------------------------------------------------------------------
# worst case under the absolute-trust type-infinity ball


def worst_case_misclass(h, data, rho, eps=DEFAULT_EPS, norm=NormKind.Linf) -> float:
    """sup over the ball of Q(Y (w'X + b) < eps), one closed form per sample."""
    _check_dim(h, data)
    margin = -data.labels * h.scores(data.features) + rho * _dual(h, norm)
    return float(np.mean(margin > -eps))


def _pair_terms(h, data, rho, norm):
    groups = _positive_groups(data)
    s = h.scores(data.features)
    pad = rho * _dual(h, norm)
    return groups, s, pad


def eps_unfairness_pairs(h, data, rho, eps=DEFAULT_EPS, norm=NormKind.Linf) -> dict:
    """Worst-case eps-unfairness of each ordered pair (a, a'), before the max."""
    _check_dim(h, data)
    groups, s, pad = _pair_terms(h, data, rho, norm)
    out = {}
    for a, ap in PAIRS:
        sa = s[groups.index_sets[(a, 1)]]
        sap = s[groups.index_sets[(ap, 1)]]
        out[(a, ap)] = float(np.mean(sa + pad > -eps) + np.mean(-sap + pad > 0) - 1.0)
    return out


def worst_case_eps_unfairness(h, data, rho, eps=DEFAULT_EPS, norm=NormKind.Linf) -> float:
    return max(eps_unfairness_pairs(h, data, rho, eps, norm).values())


def hinge_unfairness_pairs(h, data, rho, norm=NormKind.Linf) -> dict:
    _check_dim(h, data)
    groups, s, pad = _pair_terms(h, data, rho, norm)
    out = {}
    for a, ap in PAIRS:
        sa = s[groups.index_sets[(a, 1)]]
        sap = s[groups.index_sets[(ap, 1)]]
        out[(a, ap)] = float(np.mean(np.maximum(0.0, 1 + sa + pad))
                             + np.mean(np.maximum(0.0, 1 - sap + pad)) - 1.0)
    return out


def hinge_unfairness(h, data, rho=0.0, norm=NormKind.Linf) -> float:
    """Worst-case hinge unfairness; ``rho=0`` gives the empirical measure. Always >= 1."""
    return max(hinge_unfairness_pairs(h, data, rho, norm).values())


def worst_case_hinge_loss(h, data, rho=0.0, norm=NormKind.Linf) -> float:
    _check_dim(h, data)
    s = h.scores(data.features)
    return float(np.mean(np.maximum(0.0, 1 - data.labels * s + rho * _dual(h, norm))))


def cvar(losses, t: float) -> float:
    """Empirical CVaR at tail level ``t``: mean of the worst ``t`` fraction of losses.

    Uses the sorted-tail formula, with a fractional weight on the boundary atom.
    """
    if not (0.0 < t <= 1.0):
        raise LevelOutOfRange(f"CVaR level must lie in (0, 1], got {t}")
    z = np.sort(np.asarray(losses, dtype=float).ravel())[::-1]
    n = z.size
    if n == 0:
        raise ValueError("cvar needs at least one loss")
    mass = t * n
    k = int(math.floor(mass + 1e-12))
    k = min(k, n)
    total = z[:k].sum()
    rest = mass - k
    if rest > 1e-12 and k < n:
        total += rest * z[k]
    return float(total / mass)


# ---------------------------------------------------------------------------
# worst case under the flip-budget ambiguity set with a general ground metric


def cell_radius(rho, kappa_a, kappa_y, a_hat, y_hat, a, y) -> float:
    """Remaining feature radius after moving (a_hat, y_hat) to (a, y); -inf if unreachable."""
    cost = 0.0
    for kappa, diff in ((kappa_a, abs(a - a_hat)), (kappa_y, abs(y - y_hat))):
        if diff:
            cost += kappa * diff
    return rho - cost if cost <= rho else -math.inf


def radius_table(data: Dataset, rho, kappa_a, kappa_y) -> np.ndarray:
    """N x 4 array of remaining radii per cell (columns in :data:`CELLS` order)."""
    out = np.empty((data.n, 4))
    for i in range(data.n):
        for c, (a, y) in enumerate(CELLS):
            out[i, c] = cell_radius(rho, kappa_a, kappa_y, data.sensitive[i], data.labels[i], a, y)
    return out


def transport_lp_value(values: np.ndarray, data: Dataset, gamma: float) -> float:
    """sup over the flip-budget set of E[phi] given per-(sample, cell) sup values.

    ``values[i, c]`` is the supremum of the loss over the reachable feature
    ball of sample ``i`` moved to cell ``c`` (``-inf`` when unreachable).
    Solves the finite transport LP over the cell weights directly.
    """
    n = data.n
    groups = group_index(data)
    p_hat = groups.p_vector()
    obs = np.array([CELLS.index((int(a), int(y))) for a, y in zip(data.sensitive, data.labels)])
    active = np.isfinite(values)
    idx = np.argwhere(active)
    m = len(idx)
    c = -values[active] / n
    a_eq, b_eq = [], []
    for i in range(n):
        row = np.zeros(m)
        row[idx[:, 0] == i] = 1.0
        a_eq.append(row)
        b_eq.append(1.0)
    for cell in range(4):
        row = np.zeros(m)
        row[idx[:, 1] == cell] = 1.0
        a_eq.append(row)
        b_eq.append(n * p_hat[cell])
    keep = idx[:, 1] == obs[idx[:, 0]]
    a_ub = [-keep.astype(float)]
    b_ub = [-(1.0 - gamma) * n]
    res = linprog(c, A_ub=np.array(a_ub), b_ub=np.array(b_ub), A_eq=np.array(a_eq),
                  b_eq=np.array(b_eq), bounds=(0, None), method="highs")
    if res.status != 0:
        raise FairDROError(f"transport LP failed: {res.message}")
    return float(-res.fun)


def _general_values(h, data, rho, kappa_a, kappa_y, norm, cell_loss):
    _check_dim(h, data)
    radii = radius_table(data, rho, kappa_a, kappa_y)
    dual = _dual(h, norm)
    wx = data.features @ h.w
    vals = np.full((data.n, 4), -math.inf)
    for i in range(data.n):
        for c, (a, y) in enumerate(CELLS):
            r = radii[i, c]
            if math.isfinite(r):
                vals[i, c] = cell_loss(wx[i], r * dual, a, y)
    return vals


def general_worst_case_hinge_loss(h, data, rho, kappa_a, kappa_y, gamma,
                                  norm=NormKind.Linf) -> float:
    vals = _general_values(h, data, rho, kappa_a, kappa_y, norm,
                           lambda wx, pad, a, y: max(0.0, 1 - y * (wx + h.b) + pad))
    return transport_lp_value(vals, data, gamma)


def general_worst_case_misclass(h, data, rho, kappa_a, kappa_y, gamma,
                                eps=DEFAULT_EPS, norm=NormKind.Linf) -> float:
    vals = _general_values(h, data, rho, kappa_a, kappa_y, norm,
                           lambda wx, pad, a, y: float(-y * (wx + h.b) + pad > -eps))
    return transport_lp_value(vals, data, gamma)


def _general_pair_values(h, data, rho, kappa_a, kappa_y, norm, pos_term, neg_term):
    p_hat = _positive_groups(data).marginals
    out = {}
    for a, ap in PAIRS:
        def loss(wx, pad, ca, cy, a=a, ap=ap):
            if cy == 1 and ca == a:
                return pos_term(wx + h.b, pad) / p_hat[(a, 1)]
            if cy == 1 and ca == ap:
                return neg_term(wx + h.b, pad) / p_hat[(ap, 1)]
            return 0.0
        out[(a, ap)] = _general_values(h, data, rho, kappa_a, kappa_y, norm, loss)
    return out


def general_hinge_unfairness(h, data, rho, kappa_a, kappa_y, gamma,
                             norm=NormKind.Linf) -> float:
    vals = _general_pair_values(h, data, rho, kappa_a, kappa_y, norm,
                                lambda s, pad: max(0.0, 1 + s + pad),
                                lambda s, pad: max(0.0, 1 - s + pad))
    return max(transport_lp_value(v, data, gamma) for v in vals.values()) - 1.0


def general_eps_unfairness(h, data, rho, kappa_a, kappa_y, gamma,
                           eps=DEFAULT_EPS, norm=NormKind.Linf) -> float:
    # the a'-term is minus the smallest reachable TPR indicator
    vals = _general_pair_values(h, data, rho, kappa_a, kappa_y, norm,
                                lambda s, pad: float(s + pad > -eps),
                                lambda s, pad: -float(s - pad >= 0))
    return max(transport_lp_value(v, data, gamma) for v in vals.values())


def report(h, data, rho=0.0, eps=DEFAULT_EPS, norm=NormKind.Linf) -> dict:
    """Evaluation report with empirical and worst-case quantities."""
    return {
        "accuracy": accuracy(h, data),
        "eo_unfairness": eo_unfairness(h, data),
        "worst_case_misclass": worst_case_misclass(h, data, rho, eps, norm),
        "worst_case_eps_unfairness": worst_case_eps_unfairness(h, data, rho, eps, norm),
        "worst_case_hinge_loss": worst_case_hinge_loss(h, data, rho, norm),
        "worst_case_hinge_unfairness": hinge_unfairness(h, data, rho, norm),
    }
