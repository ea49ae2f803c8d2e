"""Differentiable s-expression cost language over trajectories.

Programs are the contract between the scenario author (human or LLM) and
the guided sampler: a list of ``(refpath ...)`` declarations binding names
to lane queries, plus weighted ``(term ...)`` expressions. Every term must
reduce its time dimension exactly once, so a validated program always
evaluates to a scalar that the sampler can differentiate.

Grammar (comments run from ``;`` to end of line, whitespace-insensitive)::

    program  := (decl | term)+
    decl     := "(refpath" NAME query ")"
    query    := "(" QUERYKIND agentref | laneid ")"
    term     := "(term" NAME FLOAT expr ")"
    expr     := FLOAT | "(" OP expr* ")" | accessor
    agentref := "a" DIGITS

Accessors: ``(x a)`` ``(y a)`` ``(heading a)`` ``(speed a)`` ``(accel a)``
``(s a r)`` ``(d a r)`` ``(dist a b)``. Unary ops: neg abs sq sqrt relu sin
cos exp rate. Binary: add sub mul div min max. ``(clamp e lo hi)`` bounds a
series; ``(sin_t w)`` is a sinusoid of elapsed time; mean_t/sum_t/min_t/
max_t reduce time. Speed and accel come from forward differences at dt
with the last value repeated; ``rate`` applies the same differencing to
any time series.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import frenet
from . import grad as G
from .scene import LaneQuery, lane_query

UNARY_OPS = ("neg", "abs", "sq", "sqrt", "relu", "sin", "cos", "exp", "rate")
BINARY_OPS = ("add", "sub", "mul", "div", "min", "max")
REDUCE_OPS = ("mean_t", "sum_t", "min_t", "max_t")
POSE_ACCESSORS = ("x", "y", "heading", "speed", "accel")
QUERY_KINDS = (
    "current_lane",
    "left_lane",
    "right_lane",
    "rightmost_lane",
    "leftmost_lane",
    "successor_chain",
)
SUCCESSOR_CHAIN_DEPTH = 4  # fixed; the grammar passes a single argument


class CostParseError(ValueError):
    def __init__(self, msg, line, col):
        super().__init__(f"line {line}, col {col}: {msg}")
        self.line = line
        self.col = col


class CostEvalError(ValueError):
    pass


@dataclass(frozen=True)
class Node:
    """AST node: op name plus children (Nodes or leaf atoms)."""

    op: str
    args: tuple = ()


@dataclass(frozen=True)
class RefDecl:
    name: str
    kind: str
    agent: int = None  # exactly one of agent / lane_id is set
    lane_id: int = None


@dataclass(frozen=True)
class Term:
    name: str
    weight: float
    expr: Node


@dataclass(frozen=True)
class CostProgram:
    decls: tuple
    terms: tuple


# ---------------------------------------------------------------------------
# lexer


@dataclass(frozen=True)
class _Tok:
    kind: str  # "(", ")", "name", "number"
    text: str
    line: int
    col: int


def _lex(text: str):
    toks = []
    line, col = 1, 1
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch == "\n":
            line += 1
            col = 1
            i += 1
        elif ch in " \t\r":
            col += 1
            i += 1
        elif ch == ";":
            while i < n and text[i] != "\n":
                i += 1
        elif ch in "()":
            toks.append(_Tok(ch, ch, line, col))
            col += 1
            i += 1
        else:
            start = i
            start_col = col
            while i < n and text[i] not in " \t\r\n();":
                i += 1
                col += 1
            word = text[start:i]
            if word[0].isalpha() or word[0] == "_":
                if not all(c.isalnum() or c == "_" for c in word):
                    raise CostParseError(f"bad symbol {word!r}", line, start_col)
                toks.append(_Tok("name", word, line, start_col))
            else:
                try:
                    float(word)
                except ValueError:
                    raise CostParseError(f"bad token {word!r}", line, start_col) from None
                toks.append(_Tok("number", word, line, start_col))
    return toks


# ---------------------------------------------------------------------------
# parser


class _Parser:
    def __init__(self, toks):
        self.toks = toks
        self.pos = 0

    def _peek(self):
        return self.toks[self.pos] if self.pos < len(self.toks) else None

    def _next(self, expect=None):
        tok = self._peek()
        if tok is None:
            last = self.toks[-1] if self.toks else _Tok("", "", 1, 1)
            raise CostParseError("unexpected end of input", last.line, last.col)
        if expect is not None and tok.kind != expect:
            raise CostParseError(f"expected {expect}, got {tok.text!r}", tok.line, tok.col)
        self.pos += 1
        return tok

    def _agent_ref(self, tok):
        if tok.kind == "name" and tok.text[0] == "a" and tok.text[1:].isdigit():
            return int(tok.text[1:])
        raise CostParseError(f"expected agent ref like a0, got {tok.text!r}", tok.line, tok.col)

    def parse_program(self):
        decls, terms = [], []
        while self._peek() is not None:
            open_tok = self._next("(")
            head = self._next("name")
            if head.text == "refpath":
                decls.append(self._parse_decl())
            elif head.text == "term":
                terms.append(self._parse_term())
            else:
                raise CostParseError(
                    f"top-level form must be refpath or term, got {head.text!r}",
                    head.line,
                    head.col,
                )
            del open_tok
        if not terms:
            raise CostParseError("program needs at least one term", 1, 1)
        names = [d.name for d in decls] + [t.name for t in terms]
        if len(set(names)) != len(names):
            dup = next(x for x in names if names.count(x) > 1)
            raise CostParseError(f"duplicate name {dup!r}", 1, 1)
        return CostProgram(tuple(decls), tuple(terms))

    def _parse_decl(self):
        name = self._next("name")
        self._next("(")
        kind = self._next("name")
        if kind.text not in QUERY_KINDS:
            raise CostParseError(f"unknown lane query {kind.text!r}", kind.line, kind.col)
        arg = self._next()
        if arg.kind == "name":
            decl = RefDecl(name.text, kind.text, agent=self._agent_ref(arg))
        elif arg.kind == "number" and float(arg.text) == int(float(arg.text)):
            decl = RefDecl(name.text, kind.text, lane_id=int(float(arg.text)))
        else:
            raise CostParseError(f"query arg must be agent ref or lane id", arg.line, arg.col)
        self._next(")")
        self._next(")")
        return decl

    def _parse_term(self):
        name = self._next("name")
        weight_tok = self._next("number")
        weight = float(weight_tok.text)
        if weight < 0:
            raise CostParseError("term weight must be >= 0", weight_tok.line, weight_tok.col)
        expr = self._parse_expr()
        self._next(")")
        return Term(name.text, weight, expr)

    def _parse_expr(self):
        tok = self._next()
        if tok.kind == "number":
            return Node("lit", (float(tok.text),))
        if tok.kind != "(":
            raise CostParseError(f"expected expression, got {tok.text!r}", tok.line, tok.col)
        head = self._next("name")
        op = head.text
        if op in POSE_ACCESSORS:
            agent = self._agent_ref(self._next())
            self._next(")")
            return Node(op, (agent,))
        if op in ("s", "d"):
            agent = self._agent_ref(self._next())
            ref = self._next("name")
            self._next(")")
            return Node(op, (agent, ref.text))
        if op == "dist":
            a = self._agent_ref(self._next())
            b = self._agent_ref(self._next())
            self._next(")")
            return Node(op, (a, b))
        if op == "sin_t":
            omega = self._next("number")
            self._next(")")
            return Node(op, (float(omega.text),))
        if op in UNARY_OPS or op in REDUCE_OPS:
            child = self._parse_expr()
            self._next(")")
            return Node(op, (child,))
        if op in BINARY_OPS:
            a = self._parse_expr()
            b = self._parse_expr()
            self._next(")")
            return Node(op, (a, b))
        if op == "clamp":
            child = self._parse_expr()
            lo = self._next("number")
            hi = self._next("number")
            self._next(")")
            return Node(op, (child, float(lo.text), float(hi.text)))
        raise CostParseError(f"unknown symbol {op!r}", head.line, head.col)


# ---------------------------------------------------------------------------
# shape validation: every accessor path crosses exactly one time reduction


def _shape_of(node: Node):
    """Return (shape, accessor reduction counts). shape in {'scalar','series'}."""
    op = node.op
    if op == "lit":
        return "scalar", []
    if op == "sin_t":
        return "series", []
    if op in POSE_ACCESSORS or op in ("s", "d", "dist"):
        return "series", [0]
    if op in UNARY_OPS:
        shape, counts = _shape_of(node.args[0])
        if op == "rate" and shape != "series":
            raise CostParseError("rate needs a time series", 1, 1)
        return shape, counts
    if op == "clamp":
        return _shape_of(node.args[0])
    if op in BINARY_OPS:
        sa, ca = _shape_of(node.args[0])
        sb, cb = _shape_of(node.args[1])
        shape = "series" if "series" in (sa, sb) else "scalar"
        return shape, ca + cb
    if op in REDUCE_OPS:
        shape, counts = _shape_of(node.args[0])
        if shape != "series":
            raise CostParseError(f"{op} applied to a scalar", 1, 1)
        return "scalar", [c + 1 for c in counts]
    raise CostParseError(f"unknown symbol {op!r}", 1, 1)


def validate(program: CostProgram) -> CostProgram:
    """Check shape discipline and refpath references; returns the program."""
    declared = {d.name for d in program.decls}
    for term in program.terms:
        for node in _walk(term.expr):
            if node.op in ("s", "d") and node.args[1] not in declared:
                raise CostParseError(
                    f"term {term.name!r} uses undeclared refpath {node.args[1]!r}", 1, 1
                )
        shape, counts = _shape_of(term.expr)
        if shape != "scalar" or any(c == 0 for c in counts):
            raise CostParseError(f"term {term.name!r} has an unreduced time dimension", 1, 1)
        if any(c > 1 for c in counts):
            raise CostParseError(f"term {term.name!r} reduces time more than once on a path", 1, 1)
    return program


def _walk(node: Node):
    yield node
    for a in node.args:
        if isinstance(a, Node):
            yield from _walk(a)


def parse(text: str) -> CostProgram:
    """Parse and validate a cost program; raises CostParseError with location."""
    return validate(_Parser(_lex(text)).parse_program())


# ---------------------------------------------------------------------------
# printer (parse . print_program is the identity, floats via repr)


def _fmt_num(v: float) -> str:
    return repr(float(v))


def _print_expr(node: Node) -> str:
    op = node.op
    if op == "lit":
        return _fmt_num(node.args[0])
    if op in POSE_ACCESSORS:
        return f"({op} a{node.args[0]})"
    if op in ("s", "d"):
        return f"({op} a{node.args[0]} {node.args[1]})"
    if op == "dist":
        return f"(dist a{node.args[0]} a{node.args[1]})"
    if op == "sin_t":
        return f"(sin_t {_fmt_num(node.args[0])})"
    if op == "clamp":
        child, lo, hi = node.args
        return f"(clamp {_print_expr(child)} {_fmt_num(lo)} {_fmt_num(hi)})"
    inner = " ".join(_print_expr(a) for a in node.args)
    return f"({op} {inner})"


def print_program(program: CostProgram) -> str:
    lines = []
    for d in program.decls:
        arg = f"a{d.agent}" if d.agent is not None else str(d.lane_id)
        lines.append(f"(refpath {d.name} ({d.kind} {arg}))")
    for t in program.terms:
        lines.append(f"(term {t.name} {_fmt_num(t.weight)} {_print_expr(t.expr)})")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# refpath resolution


def resolve_refpaths(program: CostProgram, scenario) -> dict:
    """Bind each declaration to a RefPath; chains concatenate their lanes."""
    out = {}
    for d in program.decls:
        if d.agent is not None:
            base = lane_query(scenario, LaneQuery("current_lane", agent=d.agent))
            if not base:
                raise CostEvalError(f"refpath {d.name!r}: agent a{d.agent} is off every lane")
            if d.kind == "current_lane":
                ids = base
            elif d.kind == "successor_chain":
                ids = lane_query(
                    scenario,
                    LaneQuery("successor_chain", lane_id=base[0], depth=SUCCESSOR_CHAIN_DEPTH),
                )
            else:
                ids = lane_query(scenario, LaneQuery(d.kind, lane_id=base[0]))
        else:
            if d.kind == "current_lane":
                ids = [d.lane_id]
            elif d.kind == "successor_chain":
                ids = lane_query(
                    scenario,
                    LaneQuery("successor_chain", lane_id=d.lane_id, depth=SUCCESSOR_CHAIN_DEPTH),
                )
            else:
                ids = lane_query(scenario, LaneQuery(d.kind, lane_id=d.lane_id))
        if not ids:
            raise CostEvalError(f"refpath {d.name!r}: query {d.kind} returned no lanes")
        pts = [scenario.polyline_by_id(ids[0]).points]
        for lane_id in ids[1:]:
            nxt = scenario.polyline_by_id(lane_id).points
            if np.allclose(pts[-1][-1], nxt[0], atol=1e-6):
                nxt = nxt[1:]
            pts.append(nxt)
        out[d.name] = frenet.build_ref_path(np.concatenate(pts, axis=0))
    return out


# ---------------------------------------------------------------------------
# evaluation on the gradient tape


class EvalContext:
    """Trajectories plus resolved refpaths; derived series are memoized.

    trajs: one (T,2) position Tensor per agent (leaf tensors for gradient
    extraction, or mid-tape nodes during guided sampling).
    """

    def __init__(self, trajs, refpaths, dt=0.1):
        self.trajs = [t if isinstance(t, G.Tensor) else G.Tensor(t) for t in trajs]
        self.refpaths = dict(refpaths)
        self.dt = float(dt)
        self._memo = {}
        self.T = self.trajs[0].data.shape[0]

    def traj(self, agent: int) -> G.Tensor:
        if not 0 <= agent < len(self.trajs):
            raise CostEvalError(f"agent a{agent} out of range (have {len(self.trajs)})")
        return self.trajs[agent]

    def refpath(self, name: str):
        if name not in self.refpaths:
            raise CostEvalError(f"refpath {name!r} not resolved")
        return self.refpaths[name]

    def memo(self, key, fn):
        if key not in self._memo:
            self._memo[key] = fn()
        return self._memo[key]


def _rate(series: G.Tensor, dt: float) -> G.Tensor:
    """Forward difference over time with the last value repeated."""
    n = series.data.shape[0]
    diff = G.mul(G.sub(G.tslice(series, 1, n), G.tslice(series, 0, n - 1)), 1.0 / dt)
    return G.concat([diff, G.tslice(diff, n - 2, n - 1)], axis=0)


def _column(traj: G.Tensor, j: int) -> G.Tensor:
    n = traj.data.shape[0]
    return G.reshape(G.tslice(traj, j, j + 1, axis=1), (n,))


def _velocity(ctx: EvalContext, agent: int):
    def build():
        p = ctx.traj(agent)
        n = p.data.shape[0]
        diff = G.mul(G.sub(G.tslice(p, 1, n), G.tslice(p, 0, n - 1)), 1.0 / ctx.dt)
        v = G.concat([diff, G.tslice(diff, n - 2, n - 1)], axis=0)
        return _column(v, 0), _column(v, 1)

    return ctx.memo(("vel", agent), build)


def _series(ctx: EvalContext, node: Node) -> G.Tensor:
    op = node.op
    if op == "x":
        return _column(ctx.traj(node.args[0]), 0)
    if op == "y":
        return _column(ctx.traj(node.args[0]), 1)
    if op == "speed":
        def build():
            vx, vy = _velocity(ctx, node.args[0])
            # epsilon keeps sqrt differentiable at standstill
            return G.sqrt(G.add(G.add(G.square(vx), G.square(vy)), 1e-12))

        return ctx.memo(("speed", node.args[0]), build)
    if op == "heading":
        def build():
            vx, vy = _velocity(ctx, node.args[0])
            return G.atan2(vy, vx)

        return ctx.memo(("heading", node.args[0]), build)
    if op == "accel":
        def build():
            return _rate(_series(ctx, Node("speed", (node.args[0],))), ctx.dt)

        return ctx.memo(("accel", node.args[0]), build)
    if op in ("s", "d"):
        agent, ref = node.args

        def build():
            return frenet.frenet_on_tape(ctx.refpath(ref), ctx.traj(agent))

        s, d = ctx.memo(("frenet", agent, ref), build)
        return s if op == "s" else d
    if op == "dist":
        a, b = node.args

        def build():
            delta = G.sub(ctx.traj(a), ctx.traj(b))
            return G.sqrt(G.add(G.tsum(G.square(delta), axis=1), 1e-12))

        return ctx.memo(("dist", a, b), build)
    if op == "sin_t":
        omega = node.args[0]
        return G.Tensor(np.sin(omega * np.arange(ctx.T) * ctx.dt))
    raise CostEvalError(f"not a series op: {op}")


_UNARY_FN = {
    "neg": G.neg,
    "abs": G.absval,
    "sq": G.square,
    "sqrt": G.sqrt,
    "relu": G.relu,
    "sin": G.sin,
    "cos": G.cos,
    "exp": G.exp,
}
_BINARY_FN = {
    "add": G.add,
    "sub": G.sub,
    "mul": G.mul,
    "div": G.div,
    "min": G.minimum,
    "max": G.maximum,
}
_REDUCE_FN = {"mean_t": G.tmean, "sum_t": G.tsum, "min_t": G.tmin, "max_t": G.tmax}


def _eval_expr(ctx: EvalContext, node: Node) -> G.Tensor:
    op = node.op
    if op == "lit":
        return G.Tensor(node.args[0])
    if op in POSE_ACCESSORS or op in ("s", "d", "dist", "sin_t"):
        return _series(ctx, node)
    if op == "rate":
        return _rate(_eval_expr(ctx, node.args[0]), ctx.dt)
    if op in _UNARY_FN:
        return _UNARY_FN[op](_eval_expr(ctx, node.args[0]))
    if op in _BINARY_FN:
        return _BINARY_FN[op](_eval_expr(ctx, node.args[0]), _eval_expr(ctx, node.args[1]))
    if op == "clamp":
        child, lo, hi = node.args
        return G.clamp(_eval_expr(ctx, child), lo, hi)
    if op in _REDUCE_FN:
        return _REDUCE_FN[op](_eval_expr(ctx, node.args[0]))
    raise CostEvalError(f"unknown op {op!r}")


def evaluate_on_tape(program: CostProgram, ctx: EvalContext):
    """Weighted total cost plus per-term scalars, all on the gradient tape."""
    per_term = {}
    total = G.Tensor(0.0)
    for term in program.terms:
        value = _eval_expr(ctx, term.expr)
        per_term[term.name] = value
        total = G.add(total, G.mul(value, term.weight))
    return total, per_term


def evaluate(program: CostProgram, ctx: EvalContext):
    """Total cost and per-term values as plain floats."""
    total, per_term = evaluate_on_tape(program, ctx)
    return total.item(), {k: v.item() for k, v in per_term.items()}


def gradient(program: CostProgram, ctx: EvalContext):
    """d(total)/d(positions) for every agent, each (T,2); zeros when untouched."""
    for t in ctx.trajs:
        t.requires_grad = True
    ctx._memo.clear()  # drop series built before grads were requested
    total, _ = evaluate_on_tape(program, ctx)
    G.backward(total)
    return [
        np.zeros_like(t.data) if t.grad is None else np.array(t.grad) for t in ctx.trajs
    ]


# ---------------------------------------------------------------------------
# builtin gold programs (desk-scale defaults; see the factories for knobs)


def make_speed_limit(limit=10.0, weight=1.0) -> CostProgram:
    return parse(f"(term speed_limit {weight} (mean_t (sq (relu (sub (speed a0) {limit})))))")


def make_target_point(tx, ty, weight=1.0) -> CostProgram:
    return parse(
        f"(term target {weight} (min_t (sqrt (add (sq (sub (x a0) {tx}))"
        f" (sq (sub (y a0) {ty}))))))"
    )


def make_collision_avoidance(safety=5.0, weight=1.0, n_agents=2) -> CostProgram:
    terms = []
    for i in range(n_agents):
        for j in range(i + 1, n_agents):
            terms.append(
                f"(term avoid_{i}_{j} {weight}"
                f" (mean_t (sq (relu (sub {safety} (dist a{i} a{j}))))))"
            )
    return parse("\n".join(terms))


def make_lane_change(direction="left", weight=1.0) -> CostProgram:
    kind = "left_lane" if direction == "left" else "right_lane"
    return parse(
        f"(refpath target ({kind} a0))\n"
        f"(term follow {weight} (mean_t (sq (d a0 target))))"
    )


def make_rightmost_lane(weight=1.0) -> CostProgram:
    return parse(
        "(refpath target (rightmost_lane a0))\n"
        f"(term keep {weight} (mean_t (sq (d a0 target))))"
    )


def make_cut_in(gap=8.0, lateral_weight=1.0, gap_weight=0.15) -> CostProgram:
    return parse(
        "(refpath tlane (current_lane a1))\n"
        f"(term merge {lateral_weight} (mean_t (sq (d a0 tlane))))\n"
        f"(term gap {gap_weight}"
        f" (mean_t (sq (sub (sub (s a0 tlane) (s a1 tlane)) {gap}))))"
    )


def make_yield(cap=0.5, weight=1.0) -> CostProgram:
    return parse(f"(term yield_slow {weight} (mean_t (sq (relu (sub (speed a0) {cap})))))")


def make_reverse(min_reverse_speed=2.0, weight=1.0) -> CostProgram:
    return parse(
        "(refpath cur (current_lane a0))\n"
        f"(term reverse {weight}"
        f" (mean_t (sq (relu (add (rate (s a0 cur)) {min_reverse_speed})))))"
    )


def make_off_road(threshold=4.0, weight=1.0) -> CostProgram:
    # push d positive past the left road edge
    return parse(
        "(refpath cur (leftmost_lane a0))\n"
        f"(term offroad {weight} (mean_t (sq (relu (sub {threshold} (d a0 cur))))))"
    )


def make_weaving(amplitude=1.5, omega=0.5, weight=1.0) -> CostProgram:
    return parse(
        "(refpath cur (current_lane a0))\n"
        f"(term weave {weight}"
        f" (mean_t (sq (sub (d a0 cur) (mul {amplitude} (sin_t {omega}))))))"
    )


def builtin_library() -> dict:
    """Hand-authored gold programs, keyed by the behavior they request."""
    return {
        "speed_limit": make_speed_limit(),
        "target_point": make_target_point(50.0, 0.0),
        "collision_avoidance": make_collision_avoidance(),
        "lane_change_left": make_lane_change("left"),
        "lane_change_right": make_lane_change("right"),
        "rightmost_lane": make_rightmost_lane(),
        "cut_in": make_cut_in(),
        "yield": make_yield(),
        "reverse": make_reverse(),
        "off_road": make_off_road(),
        "weaving": make_weaving(),
    }
