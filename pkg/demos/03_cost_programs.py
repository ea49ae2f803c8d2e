# coding: utf-8

# # Cost programs: the s-expression guidance language
#
# Conditions on sampled scenarios are written as small s-expression
# programs: `(refpath ...)` declarations bind names to lane queries, and
# `(term name weight expr)` lines contribute weighted scalar costs. The
# language is deliberately tiny — every accessor and op is differentiable,
# and the validator guarantees each term reduces its time dimension exactly
# once, so a well-formed program is always a differentiable scalar.

import numpy as np

from frenetsim import costdsl, synth

# ## Parse, validate, pretty-print

text = """
; keep agent 0 under a 7 m/s limit and inside its lane
(refpath own (current_lane a0))
(term speeding 1.0 (mean_t (sq (relu (sub (speed a0) 7.0)))))
(term centered 0.5 (mean_t (sq (d a0 own))))
"""
prog = costdsl.parse(text)
print(costdsl.print_program(prog))

# Parsing is strict: errors carry line and column so a refinement loop (or
# a person) can point at the offending token.

try:
    costdsl.parse("(term broken 1.0 (speed a0))")  # no time reduction
except costdsl.CostParseError as e:
    print("rejected:", e)

# ## Evaluating against a scenario
#
# Evaluation happens through an EvalContext: the agents' (T, 2) position
# arrays plus refpath declarations resolved against the scenario's lane
# graph. `evaluate` returns the weighted total and per-term raw values;
# `gradient` returns d(total)/d(xy) for every agent trajectory — the exact
# quantity the guided sampler feeds back into the score.

sc = synth.make_scenario({"kind": "straight", "lanes": 2, "length": 400.0}, n_agents=2, seed=1)
refpaths = costdsl.resolve_refpaths(prog, sc)
ctx = costdsl.EvalContext([a.states[:, :2] for a in sc.agents], refpaths, sc.dt)
total, per_term = costdsl.evaluate(prog, ctx)
print("total cost:", round(total, 4), "| per term:", {k: round(v, 4) for k, v in per_term.items()})

ctx = costdsl.EvalContext([a.states[:, :2] for a in sc.agents], refpaths, sc.dt)
grads = costdsl.gradient(prog, ctx)
print("gradient shape per agent:", grads[0].shape, "| max |g|:", np.abs(grads[0]).max().round(6))

# ## The builtin library
#
# Ten behavior goals ship as ready-made programs — the same ones the
# guided-sampling fixtures and the LLM prompt examples use.

lib = costdsl.builtin_library()
for name in sorted(lib):
    n_terms = len(lib[name].terms)
    print(f"{name:20s} {n_terms} term(s)")

print()
print(costdsl.print_program(lib["cut_in"]))
