import dataclasses
import math

import highspy
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fairdro.data import Dataset
from fairdro.errors import FairDROError
from fairdro.metrics import NormKind
from fairdro.model import (BINARY, AffineExpr, BoxBounds, ProgramBuilder, Variable, big_m, dual_norm_bound,
                           export_text, parse_text, validate)
from fairdro.solve import Status, solve_continuous


# -- dual_norm_bound ---------------------------------------------------------

@pytest.mark.parametrize("norm, w_max, d, expected", [
    (NormKind.Linf, 10, 3, 30.0),
    (NormKind.L1, 10, 3, 10.0),
    (NormKind.L2, 1, 4, 2.0),
])
def test_dual_norm_bound_examples(norm, w_max, d, expected):
    assert dual_norm_bound(norm, w_max, d) == pytest.approx(expected, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.sampled_from(list(NormKind)), st.floats(0.01, 100), st.floats(0.01, 100),
       st.integers(1, 6))
def test_dual_norm_bound_linear_in_w_max(norm, a, b, d):
    lhs = dual_norm_bound(norm, a + b, d)
    assert lhs == pytest.approx(dual_norm_bound(norm, a, d) + dual_norm_bound(norm, b, d))


@pytest.mark.parametrize("norm", list(NormKind))
def test_dual_norm_bound_is_attained_at_box_corner(norm):
    # the sup over the box is attained at the all-w_max corner
    rng = np.random.default_rng(0)
    d, w_max = 3, 2.5
    dual = {NormKind.Linf: 1, NormKind.L2: 2, NormKind.L1: np.inf}[norm]
    bound = dual_norm_bound(norm, w_max, d)
    w = rng.uniform(-w_max, w_max, size=(2000, d))
    assert np.max(np.linalg.norm(w, ord=dual, axis=1)) <= bound + 1e-12
    assert np.linalg.norm(np.full(d, w_max), ord=dual) == pytest.approx(bound)


def test_dual_norm_bound_rejects_nonpositive_box():
    with pytest.raises(FairDROError):
        dual_norm_bound(NormKind.L2, 0.0, 2)


# -- big_m -------------------------------------------------------------------

def one_point(x):
    return Dataset(np.array([x], float), np.array([1]), np.array([1]))


def test_big_m_example():
    m = big_m(one_point([1.0, -2.0]), BoxBounds(10, 10), 0.5, NormKind.L1, 0.01)
    assert m.tolist() == [46.0]


def test_big_m_only_intercept():
    m = big_m(one_point([0.0]), BoxBounds(1, 1), 0.0, NormKind.Linf, 1.0)
    assert m.tolist() == [2.0]


def test_big_m_rejects_negative_radius():
    with pytest.raises(FairDROError):
        big_m(one_point([1.0]), BoxBounds(), -0.1, NormKind.L2, 0.01)


def test_box_bounds_invariants():
    for bad in (0.0, -1.0, math.inf, math.nan):
        with pytest.raises(FairDROError):
            BoxBounds(bad, 1.0)


@pytest.mark.parametrize("norm", list(NormKind))
def test_big_m_monte_carlo_validity(norm):
    # every big-M row has the form +-y(w'x + b) +- rho ||w||_* +- eps (or +-1)
    rng = np.random.default_rng(7)
    n, d = 5, 3
    data = Dataset(rng.normal(scale=3, size=(n, d)), rng.integers(0, 2, n), rng.choice([-1, 1], n))
    box, rho, eps = BoxBounds(4.0, 2.0), 0.3, 0.05
    m = big_m(data, box, rho, norm, eps)
    dual = {NormKind.Linf: 1, NormKind.L2: 2, NormKind.L1: np.inf}[norm]
    w = rng.uniform(-box.w_max, box.w_max, size=(10_000, d))
    b = rng.uniform(-box.b_max, box.b_max, size=10_000)
    pad = rho * np.linalg.norm(w, ord=dual, axis=1)
    scores = w @ data.features.T + b[:, None]
    worst = np.abs(scores) + pad[:, None] + max(eps, 1.0)
    assert np.all(worst <= m[None, :] + 1e-9)


# -- validate ----------------------------------------------------------------

def small_classifier_program():
    bld = ProgramBuilder()
    w = bld.add_vars("w", range(2), lb=-1, ub=1)
    b = bld.add_var("b", lb=-1, ub=1)
    t = bld.add_var("t", kind=BINARY, lb=0, ub=1)
    bld.add_row("r", {w[0]: 1.0, b: 1.0, t: -3.0}, "<=", 0.5)
    bld.set_objective({t: 1.0})
    return bld, bld.build(model="test", classifier=True, d=2)


def test_validate_ok():
    _, prog = small_classifier_program()
    assert validate(prog) == []


def test_validate_unknown_variable():
    bld, _ = small_classifier_program()
    bld.add_row("bad", {"ghost": 1.0}, ">=", 0.0)
    defects = validate(bld.build(model="test", classifier=True, d=2))
    assert any("unknown variable" in d and "bad" in d for d in defects)


def test_validate_binary_bounds():
    # the builder normalizes binary bounds, so corrupt a built program
    _, prog = small_classifier_program()
    bad = dataclasses.replace(prog, variables=prog.variables + (Variable("z", BINARY, 0.0, 2.0),))
    defects = validate(bad)
    assert any("binary bounds" in d and "z" in d for d in defects)


def test_validate_empty_cone():
    bld, _ = small_classifier_program()
    bld.add_soc("c", AffineExpr.of({"t": 1.0}), [])
    defects = validate(bld.build(model="test", classifier=True, d=2))
    assert any("cone c" in d for d in defects)


def test_validate_tag_dimension():
    _, prog = small_classifier_program()
    bld, _ = small_classifier_program()
    assert validate(bld.build(model="test", classifier=True, d=3)) != []
    assert validate(prog) == []


def test_validate_missing_classifier_tags():
    bld = ProgramBuilder()
    x = bld.add_var("x", lb=0)
    bld.set_objective({x: 1.0})
    assert any("w/b" in d for d in validate(bld.build(classifier=True, d=1)))
    assert validate(bld.build(classifier=False)) == []


# -- export_text / parse_text --------------------------------------------------

def simple_lp():
    bld = ProgramBuilder()
    x = bld.add_var("x")
    bld.add_row("lower", {x: 1.0}, ">=", 3.0)
    bld.set_objective({x: 1.0})
    return bld.build(model="simple")


def test_export_objective_section():
    text = export_text(simple_lp())
    lines = text.splitlines()
    obj = lines[lines.index("Minimize") + 1]
    assert obj.strip() == "obj: + 1.0 x"
    assert " lower: + 1.0 x >= 3.0" in lines
    assert lines[-1] == "End"


def test_export_binary_section():
    _, prog = small_classifier_program()
    lines = export_text(prog).splitlines()
    k = lines.index("Binaries")
    assert lines[k + 1].split() == ["t"]
    assert lines[k + 2] == "End"


def test_export_is_sorted_by_tag_then_index():
    bld = ProgramBuilder()
    xs = bld.add_vars("x", [10, 2, 1], lb=0)
    bld.add_var("a", lb=0)
    for i, v in enumerate(xs):
        bld.add_row(f"r[{[10, 2, 1][i]}]", {v: 1.0}, ">=", 1.0)
    bld.set_objective({v: 1.0 for v in xs})
    text = export_text(bld.build())
    bounds = text.split("Bounds\n")[1].split("End")[0].split()
    assert [t for t in bounds if t[0] in "ax"] == ["a", "x(1)", "x(2)", "x(10)"]
    rows = [ln.split(":")[0].strip() for ln in text.split("Subject To\n")[1].split("Bounds")[0]
            .splitlines()]
    assert rows == ["r(1)", "r(2)", "r(10)"]


def test_export_cone_blocks_round_trip():
    bld = ProgramBuilder()
    x = bld.add_vars("x", range(2))
    s = bld.add_var("s", lb=0)
    bld.add_soc("norm", AffineExpr.of({s: 1.0}),
                [AffineExpr.of({x[0]: 1.0}, -1.0), AffineExpr.of({x[1]: 1.0}, 2.0)])
    bld.set_objective({s: 1.0})
    prog = bld.build()
    text = export_text(prog)
    assert "Cones\n cone norm\n  t: + 1.0 s\n  u: + 1.0 x(0) - 1.0\n  u: + 1.0 x(1) + 2.0\nEnd" in text
    back = parse_text(text)
    assert solve_continuous(back).objective == pytest.approx(0.0, abs=1e-7)
    assert export_text(back).split("\n", 1)[1] == text.split("\n", 1)[1]


def random_lp(rng):
    """Bounded random LP: box-bounded variables, random rows, always feasible at a known point."""
    n, m = int(rng.integers(2, 6)), int(rng.integers(1, 6))
    bld = ProgramBuilder()
    xs = [bld.add_var(f"x[{j}]", lb=float(-rng.integers(0, 5)), ub=float(rng.integers(1, 6)))
          for j in range(n)]
    if rng.random() < 0.5:
        xs.append(bld.add_var("z", lb=0.0))
    x0 = np.zeros(len(xs))
    for i in range(m):
        coefs = np.round(rng.normal(size=len(xs)), 3)
        lhs = float(coefs @ x0)
        sense = ["<=", ">=", "=="][int(rng.integers(0, 3))]
        rhs = lhs + (0.0 if sense == "==" else (1.0 if sense == "<=" else -1.0)) * rng.uniform(0, 2)
        bld.add_row(f"c[{i}]", dict(zip(xs, coefs)), sense, round(rhs, 3))
    obj = np.round(rng.normal(size=len(xs)), 3)
    if "z" in xs:
        obj[-1] = abs(obj[-1]) + 0.1
    bld.set_objective(dict(zip(xs, obj)), constant=round(float(rng.normal()), 3))
    return bld.build()


def highs_value(path):
    h = highspy.Highs()
    h.setOptionValue("output_flag", False)
    assert h.readModel(str(path)) == highspy.HighsStatus.kOk
    h.run()
    assert h.getModelStatus() == highspy.HighsModelStatus.kOptimal
    return h.getInfo().objective_function_value


def test_round_trip_random_lps(tmp_path):
    rng = np.random.default_rng(42)
    for k in range(20):
        prog = random_lp(rng)
        text = export_text(prog)
        ref = solve_continuous(prog)
        assert ref.status is Status.Optimal
        back = solve_continuous(parse_text(text))
        assert back.status is Status.Optimal
        assert back.objective == pytest.approx(ref.objective, abs=1e-7)
        path = tmp_path / f"p{k}.lp"
        path.write_text(text)
        # an external reader of the standard format agrees
        assert highs_value(path) == pytest.approx(ref.objective, abs=1e-7)


def test_programs_are_immutable():
    prog = simple_lp()
    with pytest.raises(Exception):
        prog.variables = ()
    with pytest.raises(TypeError):
        prog.metadata["model"] = "x"
