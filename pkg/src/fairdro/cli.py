"""Command-line entry point: ``fairdro <subcommand> ...``.

Exit codes: 0 success, 2 usage or input error, 3 infeasible model,
4 solver failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import dataclass

import numpy as np

from ._atomic import atomic_write_text
from .data import Dataset, ScalerParams, gen_synthetic, load_csv, save_csv, standardize
from .errors import DataError, FairDROError, InfeasibleSpec
from .experiment import (SweepGrid, benchmark_runtime, bench_csv, cross_validate, evaluate,
                         frontier_csv, pareto_sweep, synthetic_source, train)
from .metrics import Hyperplane
from .model import BoxBounds, export_text
from .reformulate import ModelSpec, Variant, build
from .solve import SolveOptions, Status

EXIT_OK, EXIT_USAGE, EXIT_INFEASIBLE, EXIT_SOLVER = 0, 2, 3, 4

# ModelSpec field -> command-line flag
SPEC_FLAGS = {
    "eps": "--eps", "eta": "--eta", "zeta": "--zeta", "rho": "--rho", "rho_ay": "--rho-ay",
    "delta_p": "--delta-p", "kappa_a": "--kappa-a", "kappa_y": "--kappa-y",
    "gamma": "--gamma", "norm": "--norm", "w_max": "--w-max", "b_max": "--b-max",
    "legacy_rhs_one": "--legacy-rhs-one",
}


class UsageError(Exception):
    def __init__(self, flag, message):
        self.flag = flag
        super().__init__(f"{flag}: {message}" if flag else message)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(None, message)


# ---------------------------------------------------------------------------
# model file


@dataclass
class ModelFile:
    w: list
    b: float
    scaler: ScalerParams
    spec: ModelSpec
    provenance: dict

    def __post_init__(self):
        if len(self.w) != len(self.scaler.means):
            raise DataError(f"model has {len(self.w)} weights but the scaler has "
                            f"{len(self.scaler.means)} features")

    @property
    def hyperplane(self) -> Hyperplane:
        return Hyperplane(np.asarray(self.w, float), self.b)

    def to_dict(self) -> dict:
        return {"w": [float(v) for v in self.w], "b": float(self.b),
                "scaler": self.scaler.to_dict(), "spec": self.spec.to_dict(),
                "provenance": dict(self.provenance)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, obj) -> "ModelFile":
        missing = {"w", "b", "scaler", "spec", "provenance"} - set(obj)
        if missing:
            raise DataError(f"model file lacks {', '.join(sorted(missing))}")
        return cls([float(v) for v in obj["w"]], float(obj["b"]),
                   ScalerParams.from_dict(obj["scaler"]), ModelSpec.from_dict(obj["spec"]),
                   dict(obj["provenance"]))

    @classmethod
    def from_json(cls, text: str) -> "ModelFile":
        return cls.from_dict(json.loads(text))

    def score_raw(self, data: Dataset) -> Dataset:
        """Apply the stored scaler to raw features."""
        return self.scaler.apply(data)


# ---------------------------------------------------------------------------
# argument parsing


def _add_spec_flags(p):
    g = p.add_argument_group("model parameters")
    g.add_argument("--model", dest="variant", help="variant: " + ", ".join(v.value for v in Variant))
    for field in ("eps", "eta", "zeta", "rho", "delta_p", "kappa_a", "kappa_y", "gamma",
                  "w_max", "b_max"):
        g.add_argument(SPEC_FLAGS[field], dest=field, type=float)
    g.add_argument("--rho-ay", dest="rho_ay", type=float, nargs=4, metavar="R")
    g.add_argument("--norm", dest="norm", choices=["l1", "l2", "linf"])
    g.add_argument("--legacy-rhs-one", dest="legacy_rhs_one", action="store_true", default=None)
    g.add_argument("--config", help="TOML file supplying any flag; the command line wins")


def _add_solver_flags(p):
    g = p.add_argument_group("solver")
    g.add_argument("--mip-gap", dest="mip_gap", type=float)
    g.add_argument("--time-limit", dest="time_limit", type=float)
    g.add_argument("--node-limit", dest="node_limit", type=int)


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fairdro", description="Distributionally robust fair linear classifiers.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="draw a synthetic dataset")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--orthogonal-rotation", action="store_true")
    s.add_argument("--labels", choices=["pm1", "01"], default="pm1")
    s.add_argument("--out", required=True)

    t = sub.add_parser("train", help="fit a model and write it as JSON")
    _add_spec_flags(t)
    _add_solver_flags(t)
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--seed", type=int)
    t.add_argument("--no-standardize", dest="standardize", action="store_false", default=None)

    e = sub.add_parser("eval", help="report accuracy and unfairness of a trained model")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out")

    w = sub.add_parser("sweep", help="unfairness-accuracy frontier as CSV")
    _add_spec_flags(w)
    _add_solver_flags(w)
    w.add_argument("--param", choices=["eta", "zeta", "rho"])
    w.add_argument("--values", type=float, nargs="+")
    w.add_argument("--trials", type=int)
    w.add_argument("--seed", type=int)
    w.add_argument("--n-train", dest="n_train", type=int)
    w.add_argument("--n-test", dest="n_test", type=int)
    w.add_argument("--data", help="training CSV (with --test) instead of synthetic draws")
    w.add_argument("--test")
    w.add_argument("--out")

    c = sub.add_parser("cv", help="choose the radius by repeated sub-splitting")
    _add_spec_flags(c)
    _add_solver_flags(c)
    c.add_argument("--data")
    c.add_argument("--rho-grid", dest="rho_grid", type=float, nargs="+")
    c.add_argument("--k1", type=int)
    c.add_argument("--subtrain-n", dest="subtrain_n", type=int)
    c.add_argument("--score-weight", dest="score_weight", type=float)
    c.add_argument("--seed", type=int)
    c.add_argument("--out")

    b = sub.add_parser("bench", help="median solve time per size and variant as CSV")
    _add_solver_flags(b)
    b.add_argument("--sizes", type=int, nargs="+")
    b.add_argument("--models", nargs="+", help="variants, each with its default bench parameters")
    b.add_argument("--config")
    b.add_argument("--repeats", type=int)
    b.add_argument("--seed", type=int)
    b.add_argument("--out")

    x = sub.add_parser("export-program", help="write the optimization program as text")
    _add_spec_flags(x)
    x.add_argument("--data")
    x.add_argument("--out")
    x.add_argument("--no-standardize", dest="standardize", action="store_false", default=None)
    return p


_DEFAULTS = {
    "seed": 0, "standardize": True, "trials": 5, "n_train": 50, "n_test": 150, "k1": 5,
    "subtrain_n": 200, "score_weight": 0.5, "repeats": 3,
}


def _merge_config(args) -> argparse.Namespace:
    """Fill flags left unset on the command line from ``--config`` and then defaults."""
    cfg = {}
    if getattr(args, "config", None):
        import tomli

        try:
            with open(args.config, "rb") as fh:
                cfg = tomli.load(fh)
        except OSError as exc:
            raise UsageError("--config", f"cannot read {args.config}: {exc.strerror}") from None
        except tomli.TOMLDecodeError as exc:
            raise UsageError("--config", f"invalid TOML: {exc}") from None
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
        if "model" in cfg and "variant" not in cfg:
            cfg["variant"] = cfg.pop("model")
    known = vars(args)
    for key, value in cfg.items():
        if key not in known:
            raise UsageError("--config", f"unknown key {key!r}")
        if known[key] is None:
            setattr(args, key, value)
    for key, value in _DEFAULTS.items():
        if key in known and getattr(args, key) is None:
            setattr(args, key, value)
    return args


def _require(args, *names):
    for name in names:
        if getattr(args, name, None) is None:
            flag = "--model" if name == "variant" else "--" + name.replace("_", "-")
            raise UsageError(flag, "is required")


def _check_ranges(args):
    checks = [
        ("eps", lambda v: v > 0, "must be positive"),
        ("eta", lambda v: v >= 0, "must be nonnegative"),
        ("rho", lambda v: v >= 0, "must be nonnegative"),
        ("delta_p", lambda v: v >= 0, "must be nonnegative"),
        ("kappa_a", lambda v: v >= 0, "must be nonnegative (inf allowed)"),
        ("kappa_y", lambda v: v >= 0, "must be nonnegative (inf allowed)"),
        ("gamma", lambda v: 0 <= v <= 1, "must lie in [0, 1]"),
        ("w_max", lambda v: 0 < v < math.inf, "must be finite and positive"),
        ("b_max", lambda v: 0 < v < math.inf, "must be finite and positive"),
    ]
    for name, ok, msg in checks:
        v = getattr(args, name, None)
        if v is not None and not ok(float(v)):
            raise UsageError(SPEC_FLAGS[name], f"{msg}, got {v}")
    if getattr(args, "rho_ay", None) is not None:
        if len(args.rho_ay) != 4 or any(not float(r) >= 0 for r in args.rho_ay):
            raise UsageError("--rho-ay", "needs four nonnegative radii")


def _spec_from_args(args) -> ModelSpec:
    _require(args, "variant")
    _check_ranges(args)
    try:
        variant = Variant.parse(args.variant)
    except ValueError as exc:
        raise UsageError("--model", str(exc)) from None
    kw = {}
    for field in ("eps", "eta", "zeta", "rho", "rho_ay", "delta_p", "kappa_a", "kappa_y",
                  "gamma", "norm", "w_max", "b_max", "legacy_rhs_one"):
        v = getattr(args, field, None)
        if v is not None:
            kw[field] = v
    try:
        return ModelSpec.from_dict({"variant": variant.value, **kw})
    except (ValueError, FairDROError) as exc:
        text = str(exc)
        flag = next((f for k, f in SPEC_FLAGS.items() if k in text), "--model")
        raise UsageError(flag, text) from None


def _solve_opts(args) -> SolveOptions:
    kw = {}
    if getattr(args, "mip_gap", None) is not None:
        kw["mip_gap_tol"] = float(args.mip_gap)
    if getattr(args, "time_limit", None) is not None:
        kw["time_limit_s"] = float(args.time_limit)
    if getattr(args, "node_limit", None) is not None:
        kw["node_limit"] = int(args.node_limit)
    try:
        return SolveOptions(**kw)
    except ValueError as exc:
        raise UsageError("--mip-gap/--time-limit/--node-limit", str(exc)) from None


def _load(path, flag) -> Dataset:
    try:
        return load_csv(path)
    except OSError as exc:
        raise UsageError(flag, f"cannot read {path}: {exc.strerror}") from None
    except DataError as exc:
        raise UsageError(flag, f"{path}: {exc}") from None


def _emit(text: str, out):
    if out:
        atomic_write_text(out, text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# subcommands


def _cmd_synth(args):
    if args.n < 4:
        raise UsageError("--n", f"needs at least 4 samples, got {args.n}")
    data = gen_synthetic(args.n, args.seed, orthogonal_rotation=args.orthogonal_rotation)
    save_csv(data, args.out, label_alphabet=args.labels)
    return EXIT_OK


def _prepared(args, flag="--data"):
    """(training data, scaler, fingerprint of the raw file contents)."""
    _require(args, "data")
    raw = _load(args.data, flag)
    if args.standardize:
        data, scaler = standardize(raw)
    else:
        data, scaler = raw, ScalerParams.identity(raw.d)
    return data, scaler, raw.fingerprint()


def _cmd_train(args):
    spec = _spec_from_args(args)
    _require(args, "out")
    data, scaler, digest = _prepared(args)
    fit = train(data, spec, _solve_opts(args))
    if fit.status is Status.Infeasible:
        print("model is infeasible", file=sys.stderr)
        return EXIT_INFEASIBLE
    if not fit.ok:
        print(f"solver ended {fit.status.value} without a classifier", file=sys.stderr)
        return EXIT_SOLVER
    if fit.status is not Status.Optimal:
        print(f"warning: solver stopped with {fit.status.value}; writing the best classifier "
              "found", file=sys.stderr)
    mf = ModelFile(fit.hyperplane.w.tolist(), fit.hyperplane.b, scaler, spec, {
        "seed": args.seed, "dataset_hash": digest,
        "solver_status": fit.status.value, "objective": fit.objective,
    })
    atomic_write_text(args.out, mf.to_json() + "\n")
    return EXIT_OK


def _cmd_eval(args):
    try:
        with open(args.model, encoding="utf-8") as fh:
            mf = ModelFile.from_json(fh.read())
    except OSError as exc:
        raise UsageError("--model", f"cannot read {args.model}: {exc.strerror}") from None
    except (ValueError, KeyError, TypeError) as exc:
        raise UsageError("--model", f"{args.model} is not a model file: {exc}") from None
    data = _load(args.data, "--data")
    if data.d != len(mf.w):
        raise UsageError("--data", f"has {data.d} features, the model expects {len(mf.w)}")
    rep = evaluate(mf.hyperplane, mf.score_raw(data))
    _emit(json.dumps(rep, sort_keys=True) + "\n", args.out)
    return EXIT_OK


def _cmd_sweep(args):
    spec = _spec_from_args(args)
    _require(args, "param", "values")
    try:
        grid = SweepGrid(args.param, tuple(args.values),
                         tuple(args.seed + k for k in range(args.trials)))
    except ValueError as exc:
        raise UsageError("--values", str(exc)) from None
    if args.data:
        _require(args, "test")
        source = (_load(args.data, "--data"), _load(args.test, "--test"))
    else:
        source = synthetic_source(args.n_train, args.n_test)
    try:
        points = pareto_sweep(source, spec, grid, _solve_opts(args))
    except ValueError as exc:
        raise UsageError(f"--{args.param}", str(exc)) from None
    _emit(frontier_csv(points), args.out)
    return EXIT_OK


def _cmd_cv(args):
    spec = _spec_from_args(args)
    _require(args, "data", "rho_grid")
    data, _, _ = _prepared(argparse.Namespace(**{**vars(args), "standardize": True}))
    try:
        rho, scores = cross_validate(data, args.rho_grid, spec, K1=args.k1,
                                     subtrain_n=args.subtrain_n, seed=args.seed,
                                     score_weight=args.score_weight, opts=_solve_opts(args),
                                     return_scores=True)
    except ValueError as exc:
        raise UsageError("--subtrain-n", str(exc)) from None
    out = {"rho": rho, "grid": list(map(float, args.rho_grid)),
           "scores": [s if math.isfinite(s) else None for s in scores]}
    _emit(json.dumps(out) + "\n", args.out)
    return EXIT_OK


BENCH_SPECS = {
    "eps-drfc": dict(eta=0.1, rho=0.05),
    "hdrfc": dict(zeta=1.1, rho=0.05),
    "svm": {},
}


def _cmd_bench(args):
    args = _merge_config(args)
    _require(args, "sizes", "models")
    specs = []
    for name in args.models:
        try:
            v = Variant.parse(name)
        except ValueError as exc:
            raise UsageError("--models", str(exc)) from None
        if v.value not in BENCH_SPECS:
            raise UsageError("--models", f"no benchmark defaults for {v.value}; "
                             f"choose from {', '.join(BENCH_SPECS)}")
        specs.append(ModelSpec(v, **BENCH_SPECS[v.value]))
    try:
        rows = benchmark_runtime(args.sizes, specs, seed=args.seed, repeats=args.repeats,
                                 opts=_solve_opts(args))
    except ValueError as exc:
        raise UsageError("--sizes", str(exc)) from None
    _emit(bench_csv(rows), args.out)
    return EXIT_OK


def _cmd_export(args):
    spec = _spec_from_args(args)
    data, _, _ = _prepared(args)
    if spec.variant is Variant.CVaRApprox:
        raise UsageError("--model", "the cvar variant is a bisection over programs, not one program")
    _emit(export_text(build(data, spec)), args.out)
    return EXIT_OK


COMMANDS = {"synth": _cmd_synth, "train": _cmd_train, "eval": _cmd_eval, "sweep": _cmd_sweep,
            "cv": _cmd_cv, "bench": _cmd_bench, "export-program": _cmd_export}


def run(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
        if args.command != "bench":
            args = _merge_config(args)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"fairdro: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InfeasibleSpec as exc:
        print(f"fairdro: infeasible model: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except DataError as exc:
        print(f"fairdro: input error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FairDROError as exc:
        print(f"fairdro: solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
