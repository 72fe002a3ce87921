"""The exact misclassification model is a mixed-binary program.

This runs the branch-and-bound solver with logging on, prints every
incumbent improvement, and then checks the result: the objective equals
the closed-form worst-case misclassification at the returned classifier,
and the fairness bound holds there.
"""

import logging

from fairdro.data import gen_synthetic
from fairdro.metrics import worst_case_eps_unfairness, worst_case_misclass
from fairdro.reformulate import ModelSpec, Variant, build
from fairdro.solve import extract_hyperplane, solve

logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")

data = gen_synthetic(30, 2)
spec = ModelSpec(Variant.EpsDRFC, eta=0.1, rho=0.2)
program = build(data, spec)
print(f"{len(program.variables)} variables, {program.num_binaries} binaries")

res = solve(program)
h = extract_hyperplane(res, program)
print(res.to_json())
print("re-evaluated worst-case error:", worst_case_misclass(h, data, spec.rho, spec.eps))
print("worst-case eps-unfairness:", worst_case_eps_unfairness(h, data, spec.rho, spec.eps),
      "<=", spec.eta)
