import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import linf_ball_points, random_dataset, random_hyperplane
from fairdro.data import CELLS, Dataset, group_index
from fairdro.errors import DimensionMismatch, EmptyProtectedGroup, LevelOutOfRange
from fairdro.metrics import (Hyperplane, NormKind, accuracy, cell_radius, cvar, eo_unfairness,
                             eps_unfairness_pairs, general_worst_case_hinge_loss,
                             general_worst_case_misclass, hinge_unfairness,
                             hinge_unfairness_pairs, predict, radius_table, report,
                             transport_lp_value, worst_case_eps_unfairness,
                             worst_case_hinge_loss, worst_case_misclass)

W1 = Hyperplane(np.array([1.0]), 0.0)


# -- norms ----------------------------------------------------------------

def test_dual_pairs():
    assert NormKind.L1.dual is NormKind.Linf
    assert NormKind.Linf.dual is NormKind.L1
    assert NormKind.L2.dual is NormKind.L2
    v = np.array([3.0, -4.0])
    assert NormKind.Linf.dual_value(v) == 7.0
    assert NormKind.L1.dual_value(v) == 4.0
    assert NormKind.L2.dual_value(v) == 5.0


def test_norm_parse():
    assert NormKind.parse("LINF") is NormKind.Linf
    with pytest.raises(ValueError):
        NormKind.parse("l3")


# -- empirical quantities ---------------------------------------------------

def test_trivial_classifier_predicts_plus_one():
    assert predict(Hyperplane.zero(3), np.array([-5.0, 2.0, 0.1])) == 1


def test_sign_rule_and_boundary():
    assert predict(W1, np.array([-0.5])) == -1
    assert predict(Hyperplane(np.array([1.0, 1.0]), -2.0), np.array([1.0, 1.0])) == 1


def test_predict_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        predict(W1, np.array([1.0, 2.0]))


def test_accuracy_separable():
    data = Dataset(np.array([[-1.0], [1.0]]), np.array([0, 1]), np.array([-1, 1]))
    assert accuracy(W1, data) == 1.0


def test_boundary_point_counts_as_error():
    data = Dataset(np.array([[-1.0], [1.0], [0.0]]), np.array([0, 1, 1]), np.array([-1, 1, 1]))
    assert accuracy(W1, data) == pytest.approx(2 / 3)


def test_accuracy_four_points(four_points):
    assert accuracy(W1, four_points) == 0.75


def test_eo_unfairness_examples(four_points):
    assert eo_unfairness(Hyperplane.zero(1), four_points) == 0.0
    assert eo_unfairness(W1, four_points) == 0.5
    assert eo_unfairness(Hyperplane(np.array([1.0]), 2.0), four_points) == 0.0


def test_eo_unfairness_names_empty_group():
    data = Dataset(np.zeros((2, 1)), np.array([1, 0]), np.array([1, -1]))
    with pytest.raises(EmptyProtectedGroup) as err:
        eo_unfairness(W1, data)
    assert err.value.cell == (0, 1)
    assert "a=0, y=1" in str(err.value)


# -- closed forms: hand-computed values --------------------------------------

def one_point():
    return Dataset(np.array([[1.0]]), np.array([1]), np.array([1]))


def test_worst_case_misclass_trivial():
    data = random_dataset(np.random.default_rng(0), 5, 2)
    assert worst_case_misclass(Hyperplane.zero(2), data, 0.3, 1e-4) == 1.0


@pytest.mark.parametrize("rho,expected", [(0.25, 0.0), (1.0, 1.0)])
def test_worst_case_misclass_single_point(rho, expected):
    h = Hyperplane(np.array([2.0]), 0.0)
    assert worst_case_misclass(h, one_point(), rho, 0.01, NormKind.Linf) == expected
    # the L-inf ball of radius rho around x=1 has extremes 1 - rho and 1 + rho
    worst = max(float(-(2 * x) > -0.01) for x in (1 - rho, 1 + rho))
    assert worst == expected


def test_eps_unfairness_four_points(four_points):
    pairs = eps_unfairness_pairs(W1, four_points, 0.5, 0.1, NormKind.Linf)
    assert pairs[(0, 1)] == 0.5 and pairs[(1, 0)] == -0.5
    assert worst_case_eps_unfairness(W1, four_points, 0.5, 0.1) == 0.5


def test_eps_unfairness_separating_hyperplane(four_points):
    h = Hyperplane(np.array([0.0]), 1.0)
    assert worst_case_eps_unfairness(h, four_points, 0.5, 0.01) == 0.0


def test_eps_unfairness_bounds_eo_as_eps_shrinks(four_points):
    u = eo_unfairness(W1, four_points)
    for eps in (1e-1, 1e-3, 1e-6):
        assert worst_case_eps_unfairness(W1, four_points, 0.0, eps) >= u - 1e-12


def test_hinge_unfairness_zero_classifier(four_points):
    assert hinge_unfairness(Hyperplane.zero(1), four_points, 0.0) == 1.0


def test_hinge_unfairness_four_points(four_points):
    # a=1 scores (2, -1), a=0 scores (1, 3)
    # pair (0,1): mean(max(0,1+s) over a=0) + mean(max(0,1-s) over a=1) - 1 = 3 + 1 - 1
    # pair (1,0): mean(max(0,1+s) over a=1) + mean(max(0,1-s) over a=0) - 1 = 1.5 + 0 - 1
    pairs = hinge_unfairness_pairs(W1, four_points, 0.0)
    assert pairs[(0, 1)] == 3.0 and pairs[(1, 0)] == 0.5
    assert hinge_unfairness(W1, four_points, 0.0) == 3.0


def test_worst_case_hinge_examples():
    h = Hyperplane(np.array([1.0]), -1.0)
    assert worst_case_hinge_loss(h, one_point(), 0.25, NormKind.Linf) == 1.25
    data = random_dataset(np.random.default_rng(1), 6, 2)
    assert worst_case_hinge_loss(Hyperplane.zero(2), data, 0.7) == 1.0
    sep = Dataset(np.array([[-2.0], [2.0]]), np.array([0, 1]), np.array([-1, 1]))
    assert worst_case_hinge_loss(W1, sep, 0.0) == 0.0


# -- closed forms vs enumeration over ball extremes ---------------------------

def _enum_sup(fn, x, rho):
    return max(fn(p) for p in linf_ball_points(x, rho))


def enum_misclass(h, data, rho, eps):
    vals = [_enum_sup(lambda p, y=y: float(-y * (p @ h.w + h.b) > -eps), x, rho)
            for x, y in zip(data.features, data.labels)]
    return float(np.mean(vals))


def enum_pair_values(h, data, rho, pos_loss, neg_loss):
    g = group_index(data)
    out = {}
    for a, ap in ((0, 1), (1, 0)):
        ia, iap = g.index_sets[(a, 1)], g.index_sets[(ap, 1)]
        first = np.mean([_enum_sup(lambda p: pos_loss(p @ h.w + h.b), data.features[i], rho)
                         for i in ia])
        second = np.mean([_enum_sup(lambda p: neg_loss(p @ h.w + h.b), data.features[i], rho)
                          for i in iap])
        out[(a, ap)] = first + second - 1.0
    return out


def enum_hinge_loss(h, data, rho):
    vals = [_enum_sup(lambda p, y=y: max(0.0, 1 - y * (p @ h.w + h.b)), x, rho)
            for x, y in zip(data.features, data.labels)]
    return float(np.mean(vals))


@pytest.mark.parametrize("seed", range(200))
def test_closed_forms_match_enumeration(seed):
    rng = np.random.default_rng(seed)
    n, d = int(rng.integers(2, 7)), int(rng.integers(1, 3))
    data = random_dataset(rng, n, d)
    h = random_hyperplane(rng, d)
    rho = float(rng.choice([0.0, 0.1, 0.5, 1.3]))
    eps = float(rng.choice([0.01, 0.1, 0.5]))
    assert worst_case_misclass(h, data, rho, eps) == enum_misclass(h, data, rho, eps)
    e = enum_pair_values(h, data, rho, lambda s: float(s > -eps), lambda s: float(-s > 0))
    assert eps_unfairness_pairs(h, data, rho, eps) == pytest.approx(e, abs=1e-12)
    e = enum_pair_values(h, data, rho, lambda s: max(0.0, 1 + s), lambda s: max(0.0, 1 - s))
    assert hinge_unfairness_pairs(h, data, rho) == pytest.approx(e, abs=1e-9)
    assert worst_case_hinge_loss(h, data, rho) == pytest.approx(enum_hinge_loss(h, data, rho),
                                                                abs=1e-9)


# -- properties ---------------------------------------------------------------

seeds = st.integers(0, 2**31 - 1)


@settings(max_examples=200, deadline=None)
@given(seeds, st.floats(0, 2), st.floats(0, 2), st.floats(1e-4, 1), st.floats(1e-4, 1))
def test_misclass_monotone_in_rho_and_eps(seed, r1, r2, e1, e2):
    rng = np.random.default_rng(seed)
    data = random_dataset(rng, 8, 2)
    h = random_hyperplane(rng, 2)
    lo, hi = sorted((r1, r2))
    assert worst_case_misclass(h, data, lo, e1) <= worst_case_misclass(h, data, hi, e1)
    lo, hi = sorted((e1, e2))
    assert worst_case_misclass(h, data, r1, lo) <= worst_case_misclass(h, data, r1, hi)


@settings(max_examples=200, deadline=None)
@given(seeds, st.floats(1e-6, 1))
def test_eo_below_eps_unfairness(seed, eps):
    rng = np.random.default_rng(seed)
    data = random_dataset(rng, 10, 2)
    h = random_hyperplane(rng, 2)
    assert eo_unfairness(h, data) <= worst_case_eps_unfairness(h, data, 0.0, eps) + 1e-12


@settings(max_examples=200, deadline=None)
@given(seeds, st.floats(0, 3), st.sampled_from(list(NormKind)))
def test_hinge_unfairness_at_least_one(seed, rho, norm):
    rng = np.random.default_rng(seed)
    data = random_dataset(rng, int(rng.integers(2, 12)), 3)
    h = random_hyperplane(rng, 3, scale=10)
    assert hinge_unfairness(h, data, rho, norm) >= 1 - 1e-9


# -- cvar -----------------------------------------------------------------

def cvar_min_form(z, t):
    z = np.asarray(z, float)
    return min(tau + np.mean(np.maximum(0.0, z - tau)) / t for tau in z)


def test_cvar_examples():
    assert cvar([0, 0, 0, 4], 0.25) == 4.0
    z = [1.0, 5.0, -2.0, 3.5]
    assert cvar(z, 1.0) == pytest.approx(np.mean(z))
    assert cvar([2.5] * 7, 0.3) == pytest.approx(2.5)


@pytest.mark.parametrize("t", [0.0, -0.1, 1.01])
def test_cvar_level_range(t):
    with pytest.raises(LevelOutOfRange):
        cvar([1.0, 2.0], t)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=12), st.floats(0.01, 1),
       st.floats(0.01, 1))
def test_cvar_properties(z, t1, t2):
    assert cvar(z, t1) == pytest.approx(cvar_min_form(z, t1), abs=1e-9)
    lo, hi = sorted((t1, t2))
    assert cvar(z, hi) <= cvar(z, lo) + 1e-9
    assert cvar(z, t1) >= np.mean(z) - 1e-9


# -- flip-budget evaluators ----------------------------------------------------

def test_cell_radius():
    assert cell_radius(1.0, 0.3, 0.2, 0, 1, 0, 1) == 1.0
    assert cell_radius(1.0, 0.3, 0.2, 0, 1, 1, 1) == pytest.approx(0.7)
    assert cell_radius(1.0, 0.3, 0.2, 0, 1, 1, -1) == pytest.approx(0.3)
    assert cell_radius(0.5, 0.3, 0.2, 0, 1, 1, -1) == -math.inf
    assert cell_radius(0.5, math.inf, math.inf, 1, -1, 1, -1) == 0.5
    assert cell_radius(0.5, math.inf, 0.0, 1, -1, 0, -1) == -math.inf


def enum_transport(values, data, gamma):
    """Max over assignments of samples to cells that preserve cell counts (gamma in {0, 1})."""
    obs = [CELLS.index((int(a), int(y))) for a, y in zip(data.sensitive, data.labels)]
    counts = sorted(obs)
    best = -math.inf
    for assign in itertools.product(range(4), repeat=data.n):
        if sorted(assign) != counts:
            continue
        if any(not np.isfinite(values[i, c]) for i, c in enumerate(assign)):
            continue
        stay = sum(c == o for c, o in zip(assign, obs))
        if stay < (1 - gamma) * data.n - 1e-9:
            continue
        best = max(best, float(np.mean([values[i, c] for i, c in enumerate(assign)])))
    return best


@pytest.mark.parametrize("seed", range(40))
@pytest.mark.parametrize("gamma", [0.0, 1.0])
def test_transport_lp_matches_assignment_enumeration(seed, gamma):
    rng = np.random.default_rng(seed)
    data = random_dataset(rng, int(rng.integers(2, 6)), 1, need_positive_groups=False)
    rho = float(rng.uniform(0, 1.5))
    radii = radius_table(data, rho, float(rng.uniform(0, 1)), float(rng.uniform(0, 1)))
    values = np.where(np.isfinite(radii), rng.normal(size=radii.shape), -np.inf)
    assert transport_lp_value(values, data, gamma) == pytest.approx(
        enum_transport(values, data, gamma), abs=1e-9)


@pytest.mark.parametrize("seed", range(20))
def test_transport_value_monotone_in_gamma(seed):
    rng = np.random.default_rng(seed)
    data = random_dataset(rng, 6, 1)
    radii = radius_table(data, 1.0, 0.4, 0.3)
    values = np.where(np.isfinite(radii), rng.normal(size=radii.shape), -np.inf)
    vals = [transport_lp_value(values, data, g) for g in (0.0, 0.2, 0.5, 0.8, 1.0)]
    assert all(b >= a - 1e-9 for a, b in zip(vals, vals[1:]))


@pytest.mark.parametrize("seed", range(20))
def test_general_evaluators_reduce_to_absolute_trust(seed):
    rng = np.random.default_rng(seed)
    data = random_dataset(rng, 7, 2)
    h = random_hyperplane(rng, 2)
    rho = 0.4
    # costs above the radius leave only the observed cell reachable
    for gamma in (0.0, 0.5, 1.0):
        assert general_worst_case_hinge_loss(h, data, rho, 1.0, 1.0, gamma) == pytest.approx(
            worst_case_hinge_loss(h, data, rho), abs=1e-9)
        assert general_worst_case_misclass(h, data, rho, 1.0, 1.0, gamma, 0.05) == pytest.approx(
            worst_case_misclass(h, data, rho, 0.05), abs=1e-9)


def test_report_keys(four_points):
    rep = report(W1, four_points, 0.1)
    assert {"accuracy", "eo_unfairness"} <= set(rep)
    assert all(k.startswith("worst_case") for k in set(rep) - {"accuracy", "eo_unfairness"})
