import numpy as np
import pytest

from frenetsim import costdsl
from frenetsim import grad as G
from frenetsim.costdsl import (
    CostEvalError,
    CostParseError,
    EvalContext,
    builtin_library,
    evaluate,
    gradient,
    parse,
    print_program,
    resolve_refpaths,
)
from frenetsim.frenet import build_ref_path
from frenetsim.scene import AgentTrack, LaneGraph, MapPolyline, Scenario

DT = 0.1


def straight_scenario(n_lanes=3, length=200.0, width=3.7, agent_lanes=(0, 1)):
    """Lanes along +x at y = -i*width; one agent per entry of agent_lanes."""
    polys, edges = [], []
    for i in range(n_lanes):
        polys.append(MapPolyline(i, np.array([[0.0, -i * width], [length, -i * width]]), "driving", width))
        if i > 0:
            edges.append((i - 1, i, "right_neighbor"))
    agents = []
    for k, lane in enumerate(agent_lanes):
        states = np.column_stack(
            [np.linspace(5 + 10 * k, 15 + 10 * k, 12), np.full(12, -lane * width), np.zeros(12)]
        )
        agents.append(AgentTrack(k, states))
    return Scenario(tuple(polys), LaneGraph(tuple(edges)), tuple(agents), t_now=10)


def const_speed_traj(speed, T=20, y=0.0):
    return np.column_stack([speed * DT * np.arange(T), np.full(T, y)])


def random_walk_traj(rng, T=30, step=1.2, jitter=0.3, y0=0.0, x0=5.0):
    # x0 keeps points away from path endpoints, where clamping makes FD one-sided
    dx = rng.normal(step, jitter, T - 1)
    dy = rng.normal(0.0, jitter, T - 1)
    x = np.concatenate([[x0], x0 + np.cumsum(dx)])
    y = np.concatenate([[y0], y0 + np.cumsum(dy)])
    return np.column_stack([x, y])


# ---------------------------------------------------------------------------
# parsing


def test_parse_single_term_program():
    prog = parse("(term speed_limit 1.0 (mean_t (sq (relu (sub (speed a0) 10)))))")
    assert len(prog.terms) == 1 and not prog.decls
    assert prog.terms[0].name == "speed_limit"
    assert prog.terms[0].weight == 1.0


def test_parse_program_with_declaration():
    prog = parse("(refpath r (rightmost_lane a0)) (term stay 1.0 (mean_t (sq (d a0 r))))")
    assert len(prog.decls) == 1 and prog.decls[0].name == "r"
    assert prog.decls[0].kind == "rightmost_lane" and prog.decls[0].agent == 0


def test_parse_lane_id_query_arg():
    prog = parse("(refpath r (successor_chain 2)) (term t 1.0 (mean_t (s a0 r)))")
    assert prog.decls[0].lane_id == 2 and prog.decls[0].agent is None


def test_parse_comments_and_whitespace():
    src = """
    ; weaving request
    (term w 0.5            ; weight
        (mean_t (sq (sub (y a0)
                         (mul 1.5 (sin_t 0.5))))))
    """
    prog = parse(src)
    assert prog.terms[0].weight == 0.5


def test_unreduced_time_dimension_is_rejected():
    with pytest.raises(CostParseError, match="unreduced time dimension"):
        parse("(term bad 1.0 (speed a0))")


def test_double_reduction_on_a_path_is_rejected():
    with pytest.raises(CostParseError, match="more than once"):
        parse("(term v 1.0 (mean_t (sub (speed a0) (mean_t (speed a0)))))")


def test_reduction_over_scalar_is_rejected():
    with pytest.raises(CostParseError, match="applied to a scalar"):
        parse("(term c 1.0 (mean_t 3.0))")


def test_lex_error_reports_line_and_column():
    with pytest.raises(CostParseError) as exc:
        parse("(term t 1.0\n  (mean_t (sq @@@)))")
    assert exc.value.line == 2 and exc.value.col == 15
    assert "line 2, col 15" in str(exc.value)


def test_unknown_symbol_reports_location():
    with pytest.raises(CostParseError, match="unknown symbol 'frobnicate'"):
        parse("(term t 1.0 (mean_t (frobnicate a0)))")


def test_missing_operand_is_a_parse_error():
    with pytest.raises(CostParseError, match="expected expression"):
        parse("(term t 1.0 (mean_t (sub (x a0))))")


def test_negative_weight_rejected():
    with pytest.raises(CostParseError, match="weight"):
        parse("(term t -1.0 (mean_t (speed a0)))")


def test_duplicate_names_rejected():
    with pytest.raises(CostParseError, match="duplicate name"):
        parse("(term t 1.0 (mean_t (speed a0))) (term t 2.0 (mean_t (speed a0)))")


def test_program_without_terms_rejected():
    with pytest.raises(CostParseError, match="at least one term"):
        parse("(refpath r (current_lane a0))")


def test_undeclared_refpath_rejected():
    with pytest.raises(CostParseError, match="undeclared refpath"):
        parse("(term t 1.0 (mean_t (d a0 nowhere)))")


def test_bad_agent_ref_rejected():
    with pytest.raises(CostParseError, match="agent ref"):
        parse("(term t 1.0 (mean_t (speed q7)))")


# ---------------------------------------------------------------------------
# printer round trip


def test_print_parse_roundtrip_for_builtins():
    for name, prog in builtin_library().items():
        text = print_program(prog)
        assert parse(text) == prog, name


def test_print_parse_roundtrip_awkward_floats():
    src = (
        "(refpath r (left_lane 1))\n"
        "(term a 0.1 (mean_t (clamp (mul (s a0 r) 1e-03) -2.5 2.5)))\n"
        "(term b 3.0 (max_t (min (abs (heading a1)) 0.7853981633974483)))"
    )
    prog = parse(src)
    assert parse(print_program(prog)) == prog


# ---------------------------------------------------------------------------
# evaluation


def test_speed_limit_zero_below_limit():
    prog = parse("(term speed_limit 1.0 (mean_t (sq (relu (sub (speed a0) 10)))))")
    ctx = EvalContext([const_speed_traj(8.0)], {}, DT)
    total, per_term = evaluate(prog, ctx)
    assert total == 0.0 and per_term["speed_limit"] == 0.0


def test_speed_limit_quadratic_excess():
    prog = parse("(term speed_limit 1.0 (mean_t (sq (relu (sub (speed a0) 10)))))")
    ctx = EvalContext([const_speed_traj(12.0)], {}, DT)
    total, _ = evaluate(prog, ctx)
    assert total == pytest.approx(4.0, rel=1e-6)


def test_total_is_weighted_sum_of_terms():
    prog = parse(
        "(term a 2.0 (mean_t (sq (relu (sub (speed a0) 10)))))\n"
        "(term b 0.5 (mean_t (sq (y a0))))"
    )
    ctx = EvalContext([const_speed_traj(12.0, y=2.0)], {}, DT)
    total, per_term = evaluate(prog, ctx)
    assert total == pytest.approx(2.0 * per_term["a"] + 0.5 * per_term["b"])


def test_weaving_cost_zero_on_matching_trajectory():
    T = 40
    x = 8.0 * DT * np.arange(T)
    y = 1.5 * np.sin(0.5 * np.arange(T) * DT)
    path = build_ref_path(np.array([[0.0, 0.0], [100.0, 0.0]]))
    prog = parse(
        "(refpath cur (current_lane a0))\n"
        "(term weave 1.0 (mean_t (sq (sub (d a0 cur) (mul 1.5 (sin_t 0.5))))))"
    )
    ctx = EvalContext([np.column_stack([x, y])], {"cur": path}, DT)
    total, _ = evaluate(prog, ctx)
    assert total == 0.0


def test_collision_avoidance_zero_when_far_apart():
    prog = costdsl.make_collision_avoidance(safety=5.0)
    ctx = EvalContext([const_speed_traj(8.0, y=0.0), const_speed_traj(8.0, y=20.0)], {}, DT)
    total, _ = evaluate(prog, ctx)
    assert total == 0.0


def test_dist_accessor_measures_center_distance():
    prog = parse("(term gap 1.0 (mean_t (dist a0 a1)))")
    ctx = EvalContext([const_speed_traj(8.0, y=0.0), const_speed_traj(8.0, y=3.0)], {}, DT)
    total, _ = evaluate(prog, ctx)
    assert total == pytest.approx(3.0, abs=1e-6)


def test_evaluate_is_bit_deterministic():
    prog = costdsl.make_weaving()
    sc = straight_scenario()
    refs = resolve_refpaths(prog, sc)
    rng = np.random.default_rng(0)
    traj = random_walk_traj(rng, y0=-3.7)

    vals = []
    for _ in range(2):
        total, per = evaluate(prog, EvalContext([traj.copy()], refs, DT))
        vals.append((total, tuple(sorted(per.items()))))
    assert vals[0] == vals[1]


def test_agent_out_of_range_errors():
    prog = parse("(term t 1.0 (mean_t (speed a3)))")
    ctx = EvalContext([const_speed_traj(8.0)], {}, DT)
    with pytest.raises(CostEvalError, match="a3"):
        evaluate(prog, ctx)


def test_refpath_resolution_failure_names_declaration():
    sc = straight_scenario(n_lanes=1, agent_lanes=(0,))
    prog = costdsl.make_lane_change("left")
    with pytest.raises(CostEvalError, match="target"):
        resolve_refpaths(prog, sc)


def test_successor_chain_refpath_concatenates():
    a = MapPolyline(0, np.array([[0.0, 0.0], [50.0, 0.0]]))
    b = MapPolyline(1, np.array([[50.0, 0.0], [120.0, 0.0]]))
    sc = Scenario(
        (a, b),
        LaneGraph(((0, 1, "successor"),)),
        (AgentTrack(0, np.tile([5.0, 0.0, 0.0], (3, 1))),),
        t_now=0,
    )
    prog = parse("(refpath ahead (successor_chain a0)) (term t 1.0 (mean_t (s a0 ahead)))")
    refs = resolve_refpaths(prog, sc)
    assert refs["ahead"].length == pytest.approx(120.0)


# ---------------------------------------------------------------------------
# gradients


def test_zero_cost_region_has_zero_gradient():
    prog = parse("(term speed_limit 1.0 (mean_t (sq (relu (sub (speed a0) 10)))))")
    ctx = EvalContext([const_speed_traj(5.0)], {}, DT)
    (g,) = gradient(prog, ctx)
    np.testing.assert_array_equal(g, 0.0)


def fd_cost(prog, trajs, refs, eps=1e-5):
    grads = [np.zeros_like(t) for t in trajs]
    for k, t in enumerate(trajs):
        for i in range(t.shape[0]):
            for j in range(2):
                hi = [q.copy() for q in trajs]
                lo = [q.copy() for q in trajs]
                hi[k][i, j] += eps
                lo[k][i, j] -= eps
                fh, _ = evaluate(prog, EvalContext(hi, refs, DT))
                fl, _ = evaluate(prog, EvalContext(lo, refs, DT))
                grads[k][i, j] = (fh - fl) / (2 * eps)
    return grads


@pytest.mark.parametrize("name", sorted(builtin_library()))
def test_builtin_gradients_match_finite_differences(name):
    prog = builtin_library()[name]
    sc = straight_scenario(agent_lanes=(1, 2))
    refs = resolve_refpaths(prog, sc)
    rng = np.random.default_rng(hash(name) % 2**32)
    trajs = [random_walk_traj(rng, T=25, y0=-3.7), random_walk_traj(rng, T=25, y0=-7.4)]
    got = gradient(prog, EvalContext([t.copy() for t in trajs], refs, DT))
    want = fd_cost(prog, trajs, refs)
    for g, w in zip(got, want):
        np.testing.assert_allclose(g, w, rtol=1e-4, atol=1e-6)


def test_heading_gradient_matches_finite_differences():
    prog = parse("(term h 1.0 (mean_t (sq (sin (heading a0)))))")
    rng = np.random.default_rng(7)
    traj = random_walk_traj(rng, T=20)
    got = gradient(prog, EvalContext([traj.copy()], {}, DT))[0]
    want = fd_cost(prog, [traj], {})[0]
    np.testing.assert_allclose(got, want, rtol=1e-4, atol=1e-6)


def test_rate_and_clamp_gradients_match_finite_differences():
    prog = parse("(term j 1.0 (mean_t (sq (clamp (rate (accel a0)) -4.0 4.0))))")
    rng = np.random.default_rng(8)
    traj = random_walk_traj(rng, T=15)
    got = gradient(prog, EvalContext([traj.copy()], {}, DT))[0]
    want = fd_cost(prog, [traj], {})[0]
    np.testing.assert_allclose(got, want, rtol=1e-4, atol=1e-5)


def test_gradient_flows_to_both_agents_in_cut_in():
    prog = costdsl.make_cut_in()
    sc = straight_scenario(agent_lanes=(0, 1))
    refs = resolve_refpaths(prog, sc)
    rng = np.random.default_rng(9)
    trajs = [random_walk_traj(rng, T=20, y0=0.0), random_walk_traj(rng, T=20, y0=-3.7)]
    g0, g1 = gradient(prog, EvalContext(trajs, refs, DT))
    assert np.abs(g0).max() > 0 and np.abs(g1).max() > 0
