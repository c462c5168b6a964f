"""Combinatorial selection on a five-person pool, small enough to check by hand.

The target says a zone holds 12 people. The pool has one candidate per
(AGE, SEX) profile we care about; FBS-CO decides how many copies of each to
take. Printing the trace shows the fitness falling to zero once the copy
counts match the tabulations exactly.
"""

import numpy as np

from popsynth import fbsco
from popsynth.core_data import AttributeDef, MarginalTable, Population, Schema, aggregate_marginals

schema = Schema((AttributeDef("AGE", ("young", "adult", "old")), AttributeDef("SEX", ("f", "m"))))
pool = Population.from_records(schema, [
    ("young", "f"), ("young", "m"), ("adult", "f"), ("adult", "m"), ("old", "f"),
])

# two separate one-way tabulations; "old m" is absent from the pool (zero-cell problem)
age = MarginalTable("Z1", ("AGE",), {("young",): 3, ("adult",): 6, ("old",): 3})
sex = MarginalTable("Z1", ("SEX",), {("f",): 7, ("m",): 5})
targets = [age, sex]

start = fbsco.initialize(pool, targets, seed=0)
A = fbsco.attribute_matrix(pool, targets)
print("a random start ", start.x.tolist(), "RSSZ", round(fbsco.rssz(start, A, targets), 4))

# optimize draws its own starts, one per restart
res = fbsco.optimize(pool, targets, fbsco.FbscoConfig(seed=0, rssz_threshold=1e-9, trace=True))
print("final copies  ", res.selection.x.tolist(), "RSSZ", round(res.rssz, 4), "after", res.iterations_used, "moves")
for it, val in res.trace[:8]:
    print(f"  move {it:>2}: RSSZ {val:.4f}")

synth = fbsco.materialize(res.selection, pool)
print("age counts", aggregate_marginals(synth, ["AGE"], "Z1").cells)
print("sex counts", aggregate_marginals(synth, ["SEX"], "Z1").cells)

# "old" can only be met by "old f", so the other four profiles absorb the "m" quota
print("critical value for 3 cells", round(fbsco.chi2_critical(2), 4))
print("RSSZ of a one-person miss in a 10-person two-cell table",
      round(fbsco.rssz_from_counts([np.array([6, 4])], [np.array([5, 5])], [2]), 4))
