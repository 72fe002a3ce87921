"""Program builders: dataset + :class:`ModelSpec` -> :class:`ConicProgram`.

Each builder writes the exact finite reformulation of one robust training
problem. Variable names follow ``tag[index]`` and the tag map is stored in
the program metadata so solutions can be read back.

Cells (a, y) are indexed 0..3 in :data:`fairdro.data.CELLS` order.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .data import CELLS, Dataset, group_index
from .errors import (BadSimplexPoint, DomainError, EmptyCell, EmptyProtectedGroup,
                     FairDROError, GammaOutOfRange, InfeasibleSpec)
from .metrics import DEFAULT_EPS, PAIRS, NormKind, radius_table
from .model import (BINARY, AffineExpr, BoxBounds, ConicProgram, ProgramBuilder,
                    add_classifier, add_dual_norm, big_m, indexed)

# Radius used to keep the primal chi-square weights strictly positive.
P_FLOOR = 1e-12


class Variant(enum.Enum):
    EpsDRFC = "eps-drfc"
    HDRFC = "hdrfc"
    HDRFCGeneral = "hdrfc-general"
    EpsDRFCGeneral = "eps-drfc-general"
    GeneralizedEpsDRFC = "generalized-eps-drfc"
    SVM = "svm"
    CVaRApprox = "cvar"

    @classmethod
    def parse(cls, value) -> "Variant":
        if isinstance(value, cls):
            return value
        key = str(value).strip()
        for member in cls:
            if key in (member.value, member.name) or key.lower() == member.name.lower():
                return member
        raise ValueError(f"unknown model variant {value!r}; expected one of "
                         + ", ".join(m.value for m in cls))

    @property
    def is_binary(self) -> bool:
        return self in (Variant.EpsDRFC, Variant.EpsDRFCGeneral, Variant.GeneralizedEpsDRFC)


# fields each variant reads; everything else must stay unset
_FIELDS = {
    Variant.EpsDRFC: {"eps", "eta", "rho", "norm", "box", "legacy_rhs_one"},
    Variant.HDRFC: {"zeta", "rho", "norm"},
    Variant.HDRFCGeneral: {"zeta", "rho", "kappa_a", "kappa_y", "gamma", "norm"},
    Variant.EpsDRFCGeneral: {"eps", "eta", "rho", "kappa_a", "kappa_y", "gamma", "norm", "box",
                             "legacy_rhs_one"},
    Variant.GeneralizedEpsDRFC: {"eps", "eta", "rho", "rho_ay", "delta_p", "norm", "box",
                                 "legacy_rhs_one"},
    Variant.SVM: set(),
    Variant.CVaRApprox: set(),
}
_OPTIONAL = {"eps", "box", "norm", "rho", "legacy_rhs_one", "rho_ay"}
_KEYS = ("variant", "eps", "eta", "zeta", "rho", "rho_ay", "delta_p", "kappa_a", "kappa_y",
         "gamma", "norm", "w_max", "b_max", "legacy_rhs_one")


@dataclass(frozen=True)
class ModelSpec:
    """Model configuration.

    Only the fields read by ``variant`` may be set. ``eps`` defaults to
    1e-2 and ``box`` to ``BoxBounds()`` for the mixed-binary variants.
    Bounds that make the model infeasible (``eta < 0``, ``zeta < 1``) are
    accepted here and reported by the builders as :class:`InfeasibleSpec`.
    """

    variant: Variant
    eps: float | None = None
    eta: float | None = None
    zeta: float | None = None
    rho: float | None = None
    rho_ay: tuple | None = None
    delta_p: float | None = None
    kappa_a: float | None = None
    kappa_y: float | None = None
    gamma: float | None = None
    norm: NormKind | None = None
    box: BoxBounds | None = None
    legacy_rhs_one: bool = False

    def __post_init__(self):
        v = Variant.parse(self.variant)
        object.__setattr__(self, "variant", v)
        allowed = _FIELDS[v]
        for name in ("eps", "eta", "zeta", "rho", "rho_ay", "delta_p", "kappa_a", "kappa_y",
                     "gamma", "norm", "box"):
            value = getattr(self, name)
            if value is not None and name not in allowed:
                raise ValueError(f"{name} is not a parameter of the {v.value} model")
            if value is None and name in allowed and name not in _OPTIONAL:
                raise ValueError(f"the {v.value} model needs {name}")
        if self.legacy_rhs_one and "legacy_rhs_one" not in allowed:
            raise ValueError(f"legacy_rhs_one is not a parameter of the {v.value} model")
        if "eps" in allowed:
            eps = DEFAULT_EPS if self.eps is None else float(self.eps)
            if not eps > 0:
                raise ValueError(f"eps must be positive, got {eps}")
            object.__setattr__(self, "eps", eps)
        if "box" in allowed and self.box is None:
            object.__setattr__(self, "box", BoxBounds())
        if "norm" in allowed:
            object.__setattr__(self, "norm", NormKind.parse(self.norm or NormKind.Linf))
        if "rho" in allowed:
            rho = 0.0 if self.rho is None else float(self.rho)
            if not rho >= 0:
                raise ValueError(f"rho must be nonnegative, got {rho}")
            object.__setattr__(self, "rho", rho)
        if self.rho_ay is not None:
            r = tuple(float(x) for x in self.rho_ay)
            if len(r) != 4 or any(not x >= 0 for x in r):
                raise ValueError("rho_ay must be four nonnegative radii")
            object.__setattr__(self, "rho_ay", r)
        for name in ("kappa_a", "kappa_y"):
            val = getattr(self, name)
            if val is not None:
                val = float(val)
                if not val >= 0:
                    raise ValueError(f"{name} must be nonnegative (inf allowed), got {val}")
                object.__setattr__(self, name, val)
        if self.delta_p is not None and not float(self.delta_p) >= 0:
            raise ValueError(f"delta_p must be nonnegative, got {self.delta_p}")
        for name in ("eta", "zeta", "gamma", "delta_p"):
            if getattr(self, name) is not None:
                object.__setattr__(self, name, float(getattr(self, name)))

    def cell_radii(self) -> tuple:
        """Per-cell radii for the generalized model (``rho_ay`` or ``rho`` broadcast)."""
        if self.rho_ay is not None:
            return self.rho_ay
        return (self.rho or 0.0,) * 4

    # -- flat config document -------------------------------------------
    def to_dict(self) -> dict:
        out = {"variant": self.variant.value}
        for key in ("eps", "eta", "zeta", "rho", "delta_p", "kappa_a", "kappa_y", "gamma"):
            if getattr(self, key) is not None:
                out[key] = getattr(self, key)
        if self.rho_ay is not None:
            out["rho_ay"] = list(self.rho_ay)
        if self.norm is not None:
            out["norm"] = self.norm.value
        if self.box is not None:
            out["w_max"] = self.box.w_max
            out["b_max"] = self.box.b_max
        if self.legacy_rhs_one:
            out["legacy_rhs_one"] = True
        return out

    @classmethod
    def from_dict(cls, obj) -> "ModelSpec":
        unknown = sorted(set(obj) - set(_KEYS))
        if unknown:
            raise ValueError(f"unknown model keys: {', '.join(unknown)}")
        if "variant" not in obj:
            raise ValueError("model document needs a variant")
        kw = {k: obj[k] for k in obj if k not in ("w_max", "b_max")}
        if "w_max" in obj or "b_max" in obj:
            kw["box"] = BoxBounds(float(obj.get("w_max", 100.0)), float(obj.get("b_max", 100.0)))
        if "rho_ay" in kw:
            kw["rho_ay"] = tuple(kw["rho_ay"])
        return cls(**kw)

    def to_toml(self) -> str:
        lines = []
        for key, value in self.to_dict().items():
            lines.append(f"{key} = {_toml_value(value)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_toml(cls, text: str) -> "ModelSpec":
        import tomli

        return cls.from_dict(tomli.loads(text))


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    value = float(value)
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return repr(value)


# ---------------------------------------------------------------------------
# shared pieces


def _positive_groups(data: Dataset):
    groups = group_index(data)
    for a in (0, 1):
        if groups.size((a, 1)) == 0:
            raise EmptyProtectedGroup((a, 1))
    return groups


def _expect(spec: ModelSpec, *variants):
    if spec.variant not in variants:
        raise FairDROError(f"builder expects {[v.value for v in variants]}, got {spec.variant.value}")


def _score(w, b, x, scale=1.0) -> dict:
    """Terms of scale * (w'x + b)."""
    terms = {wj: scale * float(xj) for wj, xj in zip(w, x)}
    terms[b] = terms.get(b, 0.0) + scale
    return terms


def _plus(terms: dict, more: dict) -> dict:
    out = dict(terms)
    for k, v in more.items():
        out[k] = out.get(k, 0.0) + v
    return out


def _metadata(spec, data, **extra):
    meta = {"model": spec.variant.value, "classifier": True, "d": data.d, "n": data.n,
            "spec": spec.to_dict()}
    if spec.box is not None:
        meta["box"] = {"w_max": spec.box.w_max, "b_max": spec.box.b_max}
    meta.update(extra)
    return meta


def _objective_rhs(spec) -> float:
    return -1.0 if spec.legacy_rhs_one else -spec.eps


# ---------------------------------------------------------------------------
# absolute trust


def build_eps_drfc(data: Dataset, spec: ModelSpec) -> ConicProgram:
    """Mixed-binary program for the eps-DRFC model under absolute trust.

    Binaries: ``t`` for every sample and ``lam0``/``lam1`` only on positive
    samples. Objective rows use ``M t_i - eps`` (``M t_i - 1`` with
    ``legacy_rhs_one``).
    """
    _expect(spec, Variant.EpsDRFC)
    if spec.eta < 0:
        raise InfeasibleSpec(f"eta must be nonnegative, got {spec.eta}")
    groups = _positive_groups(data)
    x, y = data.features, data.labels
    M = big_m(data, spec.box, spec.rho, spec.norm, spec.eps)
    bld = ProgramBuilder()
    w, b = add_classifier(bld, data.d, spec.box)
    s = add_dual_norm(bld, w, spec.norm, spec.box)
    t = bld.add_vars("t", range(data.n), kind=BINARY)
    for i in range(data.n):
        terms = _plus(_score(w, b, x[i], -float(y[i])), {s: spec.rho, t[i]: -M[i]})
        bld.add_row(indexed("obj", i), terms, "<=", _objective_rhs(spec))
    _fairness_indicator_blocks(bld, data, groups, w, b, s, M, spec.eps, spec.eta,
                               (spec.rho,) * 4)
    bld.set_objective({ti: 1.0 / data.n for ti in t})
    return bld.build(**_metadata(spec, data, big_m=M.tolist()))


def _fairness_indicator_blocks(bld, data, groups, w, b, s, M, eps, eta, radii):
    x = data.features
    for a, ap in PAIRS:
        pos = groups.index_sets[(a, 1)]
        neg = groups.index_sets[(ap, 1)]
        lam = {int(i): bld.add_var(indexed(f"lam{a}", i), BINARY, tag=f"lam{a}")
               for i in sorted(np.concatenate([pos, neg]))}
        rho_pos = radii[CELLS.index((a, 1))]
        rho_neg = radii[CELLS.index((ap, 1))]
        for i in pos:
            terms = _plus(_score(w, b, x[i]), {s: rho_pos, lam[int(i)]: -M[i]})
            bld.add_row(indexed(f"fair{a}_pos", i), terms, "<=", -eps)
        for i in neg:
            terms = _plus(_score(w, b, x[i], -1.0), {s: rho_neg, lam[int(i)]: -M[i]})
            bld.add_row(indexed(f"fair{a}_neg", i), terms, "<=", 0.0)
        cap = {lam[int(i)]: 1.0 / len(pos) for i in pos}
        cap.update({lam[int(i)]: 1.0 / len(neg) for i in neg})
        bld.add_row(indexed("fair_cap", a), cap, "<=", eta + 1.0)


def build_hdrfc(data: Dataset, spec: ModelSpec) -> ConicProgram:
    """Linear (or SOC for the L2 norm) program for the hinge model under absolute trust."""
    _expect(spec, Variant.HDRFC)
    if spec.zeta < 1:
        raise InfeasibleSpec(f"zeta = {spec.zeta} < 1: hinge unfairness is always at least 1")
    groups = _positive_groups(data)
    x, y = data.features, data.labels
    bld = ProgramBuilder()
    w, b = add_classifier(bld, data.d)
    s = add_dual_norm(bld, w, spec.norm)
    t = bld.add_vars("t", range(data.n), lb=0.0)
    for i in range(data.n):
        terms = _plus(_score(w, b, x[i], -float(y[i])), {s: spec.rho, t[i]: -1.0})
        bld.add_row(indexed("obj", i), terms, "<=", -1.0)
    for a, ap in PAIRS:
        pos = groups.index_sets[(a, 1)]
        neg = groups.index_sets[(ap, 1)]
        lam = {int(i): bld.add_var(indexed(f"lam{a}", i), lb=0.0, tag=f"lam{a}")
               for i in sorted(np.concatenate([pos, neg]))}
        for i in pos:
            terms = _plus(_score(w, b, x[i]), {s: spec.rho, lam[int(i)]: -1.0})
            bld.add_row(indexed(f"fair{a}_pos", i), terms, "<=", -1.0)
        for i in neg:
            terms = _plus(_score(w, b, x[i], -1.0), {s: spec.rho, lam[int(i)]: -1.0})
            bld.add_row(indexed(f"fair{a}_neg", i), terms, "<=", -1.0)
        cap = {lam[int(i)]: 1.0 / len(pos) for i in pos}
        cap.update({lam[int(i)]: 1.0 / len(neg) for i in neg})
        bld.add_row(indexed("fair_cap", a), cap, "<=", spec.zeta + 1.0)
    bld.set_objective({ti: 1.0 / data.n for ti in t})
    return bld.build(**_metadata(spec, data))


def build_svm(data: Dataset, spec: ModelSpec | None = None) -> ConicProgram:
    """Empirical hinge-loss minimization as an LP."""
    spec = spec or ModelSpec(Variant.SVM)
    x, y = data.features, data.labels
    bld = ProgramBuilder()
    w, b = add_classifier(bld, data.d)
    t = bld.add_vars("t", range(data.n), lb=0.0)
    for i in range(data.n):
        terms = _plus(_score(w, b, x[i], -float(y[i])), {t[i]: -1.0})
        bld.add_row(indexed("obj", i), terms, "<=", -1.0)
    bld.set_objective({ti: 1.0 / data.n for ti in t})
    return bld.build(**_metadata(spec, data))


# ---------------------------------------------------------------------------
# flip budget with a general ground metric


def _check_gamma(gamma):
    if not (0.0 <= gamma <= 1.0):
        raise GammaOutOfRange(f"gamma must lie in [0, 1], got {gamma}")


def _dual_block(bld, data, suffix, gamma):
    """nu (N), theta >= 0 and mu (4 cells) of one flip-budget dual."""
    nu = bld.add_vars(f"nu{suffix}", range(data.n))
    theta = bld.add_var(f"theta{suffix}", lb=0.0, ub=0.0 if gamma >= 1.0 else math.inf)
    mu = bld.add_vars(f"mu{suffix}", range(4))
    return nu, theta, mu


def _dual_value_terms(data, p_hat, nu, theta, mu, gamma) -> dict:
    terms = {v: 1.0 / data.n for v in nu}
    terms.update({mu[c]: p_hat[c] for c in range(4)})
    terms[theta] = -(1.0 - gamma)
    return terms


def _dual_rhs(nu_i, theta, mu_c, observed, scale=1.0) -> dict:
    """scale * (mu_c - theta * [c observed] + nu_i)."""
    terms = {mu_c: scale, nu_i: scale}
    if observed:
        terms[theta] = -scale
    return terms


def _observed_cells(data):
    return [CELLS.index((int(a), int(y))) for a, y in zip(data.sensitive, data.labels)]


def _general_setup(data, spec):
    _check_gamma(spec.gamma)
    groups = _positive_groups(data)
    radii = radius_table(data, spec.rho, spec.kappa_a, spec.kappa_y)
    return groups, radii, groups.p_vector(), _observed_cells(data)


def build_hdrfc_general(data: Dataset, spec: ModelSpec) -> ConicProgram:
    """Hinge model over the flip-budget ambiguity set with a general ground metric.

    A continuous conic program: the flip-budget worst case is replaced by its
    LP dual, with rows only for (sample, cell) pairs the metric can reach.
    ``gamma = 0`` reduces to :func:`build_hdrfc`; ``gamma = 1`` pins theta to 0.
    """
    _expect(spec, Variant.HDRFCGeneral)
    if spec.zeta < 1:
        raise InfeasibleSpec(f"zeta = {spec.zeta} < 1: hinge unfairness is always at least 1")
    _check_gamma(spec.gamma)
    if spec.gamma == 0.0:
        return build_hdrfc(data, ModelSpec(Variant.HDRFC, zeta=spec.zeta, rho=spec.rho,
                                           norm=spec.norm))
    groups, radii, p_hat, obs = _general_setup(data, spec)
    x = data.features
    bld = ProgramBuilder()
    w, b = add_classifier(bld, data.d)
    s = add_dual_norm(bld, w, spec.norm)
    nu, theta, mu = _dual_block(bld, data, "", spec.gamma)
    for i in range(data.n):
        for c, (ca, cy) in enumerate(CELLS):
            r = radii[i, c]
            if not math.isfinite(r):
                continue
            rhs = _dual_rhs(nu[i], theta, mu[c], c == obs[i])
            bld.add_row(indexed("obj_pos", i, c), rhs, ">=", 0.0)
            # R - (1 - y (w'x + b) + r ||w||_*) >= 0
            bld.add_row(indexed("obj_hinge", i, c),
                        _plus(_plus(rhs, _score(w, b, x[i], float(cy))), {s: -r}), ">=", 1.0)
    bld.set_objective(_dual_value_terms(data, p_hat, nu, theta, mu, spec.gamma))

    for a, ap in PAIRS:
        nua, thetaa, mua = _dual_block(bld, data, f"_a{a}", spec.gamma)
        ca_pos, ca_neg = CELLS.index((a, 1)), CELLS.index((ap, 1))
        for i in range(data.n):
            for c, (ca, cy) in enumerate(CELLS):
                r = radii[i, c]
                if not math.isfinite(r):
                    continue
                if c == ca_pos:
                    rhs = _dual_rhs(nua[i], thetaa, mua[c], c == obs[i], p_hat[c])
                    bld.add_row(indexed(f"fair{a}_pos0", i), rhs, ">=", 0.0)
                    bld.add_row(indexed(f"fair{a}_pos", i),
                                _plus(_plus(rhs, _score(w, b, x[i], -1.0)), {s: -r}), ">=", 1.0)
                elif c == ca_neg:
                    rhs = _dual_rhs(nua[i], thetaa, mua[c], c == obs[i], p_hat[c])
                    bld.add_row(indexed(f"fair{a}_neg0", i), rhs, ">=", 0.0)
                    bld.add_row(indexed(f"fair{a}_neg", i),
                                _plus(_plus(rhs, _score(w, b, x[i], 1.0)), {s: -r}), ">=", 1.0)
                else:
                    rhs = _dual_rhs(nua[i], thetaa, mua[c], c == obs[i])
                    bld.add_row(indexed(f"fair{a}_zero", i, c), rhs, ">=", 0.0)
        bld.add_row(indexed("fair_cap", a),
                    _dual_value_terms(data, p_hat, nua, thetaa, mua, spec.gamma),
                    "<=", spec.zeta + 1.0)
    return bld.build(**_metadata(spec, data, active_cells=int(np.isfinite(radii).sum())))


def build_eps_drfc_general(data: Dataset, spec: ModelSpec) -> ConicProgram:
    """eps-DRFC over the flip-budget ambiguity set with a general ground metric.

    Binaries ``tau[i,c]`` per reachable (sample, cell) for the loss and
    ``lam_a{a}p`` / ``lam_a{a}n`` for the two fairness indicator families.
    ``gamma = 0`` reduces to :func:`build_eps_drfc`.
    """
    _expect(spec, Variant.EpsDRFCGeneral)
    if spec.eta < 0:
        raise InfeasibleSpec(f"eta must be nonnegative, got {spec.eta}")
    _check_gamma(spec.gamma)
    if spec.gamma == 0.0:
        return build_eps_drfc(data, ModelSpec(Variant.EpsDRFC, eps=spec.eps, eta=spec.eta,
                                              rho=spec.rho, norm=spec.norm, box=spec.box,
                                              legacy_rhs_one=spec.legacy_rhs_one))
    groups, radii, p_hat, obs = _general_setup(data, spec)
    x = data.features
    M = big_m(data, spec.box, spec.rho, spec.norm, spec.eps)
    bld = ProgramBuilder()
    w, b = add_classifier(bld, data.d, spec.box)
    s = add_dual_norm(bld, w, spec.norm, spec.box)
    nu, theta, mu = _dual_block(bld, data, "", spec.gamma)
    for i in range(data.n):
        for c, (ca, cy) in enumerate(CELLS):
            r = radii[i, c]
            if not math.isfinite(r):
                continue
            tau = bld.add_var(indexed("tau", i, c), BINARY, tag="tau")
            rhs = _dual_rhs(nu[i], theta, mu[c], c == obs[i])
            bld.add_row(indexed("obj_ind", i, c), _plus({tau: 1.0}, {k: -v for k, v in rhs.items()}),
                        "<=", 0.0)
            # the loss is evaluated at the cell label cy
            bld.add_row(indexed("obj", i, c),
                        _plus(_score(w, b, x[i], -float(cy)), {s: r, tau: -M[i]}),
                        "<=", _objective_rhs(spec))
    bld.set_objective(_dual_value_terms(data, p_hat, nu, theta, mu, spec.gamma))

    for a, ap in PAIRS:
        nua, thetaa, mua = _dual_block(bld, data, f"_a{a}", spec.gamma)
        ca_pos, ca_neg = CELLS.index((a, 1)), CELLS.index((ap, 1))
        for i in range(data.n):
            for c in range(4):
                r = radii[i, c]
                if not math.isfinite(r):
                    continue
                rhs = _dual_rhs(nua[i], thetaa, mua[c], c == obs[i])
                neg_rhs = {k: -v for k, v in rhs.items()}
                if c == ca_pos:
                    lam = bld.add_var(indexed(f"lam_a{a}p", i), BINARY, tag=f"lam_a{a}p")
                    bld.add_row(indexed(f"fair{a}_pos_ind", i),
                                _plus({lam: 1.0 / p_hat[c]}, neg_rhs), "<=", 0.0)
                    bld.add_row(indexed(f"fair{a}_pos", i),
                                _plus(_score(w, b, x[i]), {s: r, lam: -M[i]}), "<=", -spec.eps)
                elif c == ca_neg:
                    lam = bld.add_var(indexed(f"lam_a{a}n", i), BINARY, tag=f"lam_a{a}n")
                    bld.add_row(indexed(f"fair{a}_neg_ind", i),
                                _plus({lam: 1.0 / p_hat[c]}, neg_rhs), "<=", 1.0 / p_hat[c])
                    bld.add_row(indexed(f"fair{a}_neg", i),
                                _plus(_score(w, b, x[i], -1.0), {s: r, lam: -M[i]}), "<=", 0.0)
                else:
                    bld.add_row(indexed(f"fair{a}_zero", i, c), rhs, ">=", 0.0)
        bld.add_row(indexed("fair_cap", a),
                    _dual_value_terms(data, p_hat, nua, thetaa, mua, spec.gamma), "<=", spec.eta)
    return bld.build(**_metadata(spec, data, big_m=M.tolist(),
                                 active_cells=int(np.isfinite(radii).sum())))


# ---------------------------------------------------------------------------
# chi-square marginal ambiguity


def _chi2_dual_block(bld, p_hat, delta_p):
    """Upper bound ``sum_c p_hat_c s_c + sqrt(delta_p) (zeta_dual + sum_c e_c)`` on ``sup s'p``.

    The sup runs over the chi-square ball ``sum (p - p_hat)^2 / p <= delta_p``
    on the simplex. Writing ``p = p_hat + sqrt(delta_p) u`` and dualizing in
    ``u`` keeps every multiplier bounded as ``delta_p -> 0``; in the
    unscaled dual the budget multiplier grows like ``1 / sqrt(delta_p)`` and
    the objective cancels terms of that size. Here ``zeta_dual`` is the
    budget multiplier times ``sqrt(delta_p)`` and, with ``v_c = s_c - theta``,
    each cell carries the conjugate of ``u^2 / (p_hat_c + sqrt(delta_p) u)``:

        p_hat_c v_c^2 <= e_c m_c,
        m_c <= 2 zeta_dual - sqrt(delta_p) v_c + 2 r_c,
        r_c^2 <= zeta_dual (zeta_dual - sqrt(delta_p) v_c).

    Callers bound ``s`` from below by the quantity whose worst case is taken.
    """
    m = len(p_hat)
    root = math.sqrt(delta_p)
    zd = bld.add_var("zeta_dual", lb=0.0)
    theta = bld.add_var("theta")
    s = bld.add_vars("s", range(m))
    e = bld.add_vars("e", range(m), lb=0.0)
    mm = bld.add_vars("m", range(m), lb=0.0)
    r = bld.add_vars("r", range(m), lb=0.0)
    for c in range(m):
        v = {s[c]: 1.0, theta: -1.0}
        bld.add_soc(indexed("chi_quad", c), AffineExpr.of({e[c]: 1.0, mm[c]: 1.0}),
                    [AffineExpr.of({k: 2.0 * math.sqrt(p_hat[c]) * a for k, a in v.items()}),
                     AffineExpr.of({e[c]: 1.0, mm[c]: -1.0})])
        bld.add_row(indexed("chi_mean", c),
                    {mm[c]: 1.0, zd: -2.0, r[c]: -2.0, s[c]: root, theta: -root}, "<=", 0.0)
        bld.add_soc(indexed("chi_geo", c), AffineExpr.of({zd: 2.0, s[c]: -root, theta: root}),
                    [AffineExpr.of({r[c]: 2.0}), AffineExpr.of({s[c]: root, theta: -root})])
    obj = {s[c]: float(p_hat[c]) for c in range(m)}
    obj[zd] = root
    obj.update({e[c]: root for c in range(m)})
    return zd, theta, r, s, obj


def build_generalized_eps_drfc(data: Dataset, spec: ModelSpec) -> ConicProgram:
    """eps-DRFC with per-cell feature balls and a chi-square ball on the (a, y) marginals."""
    _expect(spec, Variant.GeneralizedEpsDRFC)
    if spec.eta < 0:
        raise InfeasibleSpec(f"eta must be nonnegative, got {spec.eta}")
    groups = group_index(data)
    for cell in CELLS:
        if groups.size(cell) == 0:
            raise EmptyCell(cell)
    p_hat = groups.p_vector()
    radii = spec.cell_radii()
    x, y = data.features, data.labels
    M = big_m(data, spec.box, max(radii), spec.norm, spec.eps)
    bld = ProgramBuilder()
    w, b = add_classifier(bld, data.d, spec.box)
    s_w = add_dual_norm(bld, w, spec.norm, spec.box)
    t = bld.add_vars("t", range(data.n), kind=BINARY)
    zd, theta, r, s, obj = _chi2_dual_block(bld, p_hat, spec.delta_p)
    for c, cell in enumerate(CELLS):
        idx = groups.index_sets[cell]
        terms = {t[i]: 1.0 / len(idx) for i in idx}
        terms[s[c]] = -1.0
        bld.add_row(indexed("cell_rate", c), terms, "<=", 0.0)
    obs = _observed_cells(data)
    for i in range(data.n):
        terms = _plus(_score(w, b, x[i], -float(y[i])), {s_w: radii[obs[i]], t[i]: -M[i]})
        bld.add_row(indexed("obj", i), terms, "<=", _objective_rhs(spec))
    _fairness_indicator_blocks(bld, data, groups, w, b, s_w, M, spec.eps, spec.eta, radii)
    bld.set_objective(obj)
    return bld.build(**_metadata(spec, data, big_m=M.tolist()))


def _check_simplex(p_hat):
    p = np.asarray(p_hat, dtype=float).ravel()
    if p.size == 0 or np.any(~np.isfinite(p)) or np.any(p <= 0) or abs(p.sum() - 1) > 1e-9:
        raise BadSimplexPoint(f"p_hat must be strictly positive and sum to 1, got {p.tolist()}")
    return p


def build_chi2_pair(phi, p_hat, delta_p) -> tuple[ConicProgram, ConicProgram]:
    """Primal and dual cone programs for sup of phi'p over the chi-square ball around p_hat.

    The primal is stored as ``min -phi'p`` (metadata ``value_sign = -1``), so
    the worst-case value is ``-objective``. The dual is a plain minimization.
    """
    p_hat = _check_simplex(p_hat)
    phi = np.asarray(phi, dtype=float).ravel()
    if phi.shape != p_hat.shape:
        raise BadSimplexPoint("phi and p_hat must have the same length")
    if not delta_p >= 0:
        raise DomainError(f"delta_p must be nonnegative, got {delta_p}")
    m = p_hat.size

    # p = p_hat + sqrt(delta_p) u keeps the deviation variables O(1) for tiny radii
    root = math.sqrt(delta_p)
    prim = ProgramBuilder()
    u = prim.add_vars("u", range(m))
    q = prim.add_vars("q", range(m), lb=0.0)
    prim.add_row("simplex", {uj: 1.0 for uj in u}, "==", 0.0)
    prim.add_row("budget", {qj: 1.0 for qj in q}, "<=", 1.0)
    for j in range(m):
        if root > 0:
            prim.add_row(indexed("positive", j), {u[j]: root}, ">=", P_FLOOR - p_hat[j])
        # u^2 <= p q with p = p_hat + root u
        prim.add_soc(indexed("chi_cone", j), AffineExpr.of({u[j]: root, q[j]: 1.0}, p_hat[j]),
                     [AffineExpr.of({u[j]: 2.0}), AffineExpr.of({u[j]: root, q[j]: -1.0}, p_hat[j])])
    prim.set_objective({u[j]: -root * phi[j] for j in range(m)}, constant=-float(phi @ p_hat))
    primal = prim.build(model="chi2-primal", value_sign=-1.0, classifier=False)

    dual = ProgramBuilder()
    zd, theta, r, s, obj = _chi2_dual_block(dual, p_hat, float(delta_p))
    for j in range(m):
        dual.add_row(indexed("phi_le_s", j), {s[j]: 1.0}, ">=", float(phi[j]))
    dual.set_objective(obj)
    return primal, dual.build(model="chi2-dual", value_sign=1.0, classifier=False)


def radius_schedule(n_cell: int, d: int, C1: float) -> float:
    """C1 * (ln n)^(1/d) / n^(1/d), the per-cell radius used with the generalized model."""
    if n_cell < 2 or d < 2:
        raise DomainError(f"radius schedule needs n_cell >= 2 and d >= 2, got n={n_cell}, d={d}")
    if not C1 > 0:
        raise DomainError(f"C1 must be positive, got {C1}")
    return C1 * math.log(n_cell) ** (1.0 / d) / n_cell ** (1.0 / d)


BUILDERS = {
    Variant.EpsDRFC: build_eps_drfc,
    Variant.HDRFC: build_hdrfc,
    Variant.HDRFCGeneral: build_hdrfc_general,
    Variant.EpsDRFCGeneral: build_eps_drfc_general,
    Variant.GeneralizedEpsDRFC: build_generalized_eps_drfc,
    Variant.SVM: build_svm,
}


def build(data: Dataset, spec: ModelSpec) -> ConicProgram:
    """Dispatch to the builder for ``spec.variant``."""
    try:
        builder = BUILDERS[spec.variant]
    except KeyError:
        raise FairDROError(f"{spec.variant.value} has no single-program builder") from None
    return builder(data, spec)
