"""Natural-language guidance authoring: prompts, parsing, checking, loop.

The path from a scenario description to a cost program has four parts:
structured prompt builders (an understanding prompt that walks the model
through event decomposition, and a refinement prompt that feeds sampled
coordinates and per-term costs back), a response parser that only ever
hands validated programs to the sampler, rule-based success checkers for
the behavior types we can score mechanically, and ``run_session`` tying
them together against a pluggable chat client. The mock client replays
YAML-scripted transcripts keyed by prompt hash, so the whole loop runs
deterministically with no network; the live client speaks the standard
chat-completion JSON shape and reads its API key from an environment
variable that is never logged.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
from dataclasses import dataclass, field

import numpy as np

from . import costdsl
from .scene import Scenario, current_lane

CUT_IN_MAX_GAP = 15.0  # m: merge must land within this far ahead
YIELD_SPEED = 1.0  # m/s: "stopped" threshold while the other agent passes
OFFROAD_DWELL_STEPS = 10  # consecutive steps (1 s at 10 Hz) outside every lane
PARSE_RETRIES = 2  # re-asks after a malformed program
TRANSPORT_RETRIES = 3  # attempts per request before aborting the session
CHECKER_KINDS = ("cut_in", "out_of_road", "yield", "rightmost")


class TransportError(RuntimeError):
    """A chat request could not be completed (network, HTTP, or script miss)."""


# ---------------------------------------------------------------------------
# chat clients


@dataclass(frozen=True)
class ChatClientConfig:
    endpoint: str = ""
    model: str = "gpt-4o"
    temperature: float = 0.0
    max_tokens: int = 2048
    api_key_env: str = "CHAT_API_KEY"


def prompt_hash(messages) -> str:
    """Canonical sha256 of a message list; keys mock scripts and logs."""
    canon = json.dumps(list(messages), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


class MockChatClient:
    """Replays scripted responses keyed by prompt-hash prefix.

    The script maps hex prefixes of prompt_hash(messages) to response
    text; the reserved key "default" answers anything unmatched. The
    longest matching prefix wins, so a script can special-case one
    prompt while defaulting the rest.
    """

    def __init__(self, script: dict):
        self.script = dict(script)
        self.requests = []  # (hash, response) pairs, for session replay

    @classmethod
    def from_yaml(cls, path) -> "MockChatClient":
        import yaml

        with open(path) as f:
            return cls(yaml.safe_load(f))

    def complete(self, messages) -> str:
        digest = prompt_hash(messages)
        matches = [k for k in self.script if k != "default" and digest.startswith(k)]
        if matches:
            key = max(matches, key=len)
        elif "default" in self.script:
            key = "default"
        else:
            raise TransportError(f"no scripted response for prompt hash {digest[:16]}")
        text = self.script[key]
        self.requests.append((digest, key))
        return text


class LiveChatClient:
    """requests-based chat-completion client; key read per call, never logged."""

    def __init__(self, config: ChatClientConfig):
        if not config.endpoint:
            raise ValueError("live client requires a non-empty endpoint")
        self.config = config

    def complete(self, messages) -> str:
        import requests

        key = os.environ.get(self.config.api_key_env, "")
        if not key:
            raise TransportError(
                f"environment variable {self.config.api_key_env} is not set"
            )
        body = {
            "model": self.config.model,
            "messages": list(messages),
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_tokens,
        }
        try:
            resp = requests.post(
                self.config.endpoint,
                json=body,
                headers={"Authorization": f"Bearer {key}"},
                timeout=120,
            )
        except requests.RequestException as exc:
            raise TransportError(f"chat request failed: {type(exc).__name__}") from exc
        if resp.status_code != 200:
            raise TransportError(f"chat endpoint returned HTTP {resp.status_code}")
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (KeyError, IndexError, ValueError) as exc:
            raise TransportError(f"malformed chat response: {exc}") from exc


# ---------------------------------------------------------------------------
# prompt construction

DSL_REFERENCE = """\
Cost programs are s-expressions: refpath declarations binding names to lane
queries, then weighted terms. Every term must reduce time exactly once.

  program  := (decl | term)+
  decl     := (refpath NAME query)
  query    := (QUERYKIND aN | QUERYKIND laneid)   e.g. (current_lane a1)
  term     := (term NAME WEIGHT expr)
  expr     := NUMBER | (OP expr*) | accessor

Query kinds: current_lane left_lane right_lane rightmost_lane leftmost_lane
successor_chain. Accessors: (x a0) (y a0) (heading a0) (speed a0) (accel a0)
(s a0 ref) (d a0 ref) (dist a0 a1). Unary ops: neg abs sq sqrt relu sin cos
exp rate. Binary: add sub mul div min max. (clamp e lo hi) bounds a series;
(sin_t w) is a sinusoid of elapsed time. Reductions: mean_t sum_t min_t
max_t. (s a r) is arc length and (d a r) signed lateral offset of agent a
along refpath r."""

COT_STEPS = """\
STEP 1 - EVENTS: identify the distinct events the description asks for.
STEP 2 - SPLIT: if there are multiple events, split them and handle each one separately.
STEP 3 - AGENT COUNT: count the agents involved and name them (a0 is the subject).
STEP 4 - BEHAVIORS: for each agent, state the behavior it must perform.
STEP 5 - MAP: for each behavior, say whether it is map-related (yes/no).
STEP 6 - LANE QUERIES: list the lane queries the program needs, e.g. (current_lane a1).
STEP 7 - PROGRAM: emit the final cost program."""

SYSTEM_PROMPT = (
    "You translate traffic scenario descriptions into differentiable cost "
    "programs that steer a trajectory sampler. Lower cost must mean closer "
    "to the described behavior. Grammar reference:\n\n" + DSL_REFERENCE
)


def scenario_summary(scenario: Scenario) -> str:
    """Deterministic plain-text digest of the map and the agents now."""
    lines = []
    for lane in scenario.polylines:
        rels = []
        for kind in ("left_neighbor", "right_neighbor", "successor"):
            for other in sorted(scenario.graph.related(lane.id, kind)):
                rels.append(f"{kind}->{other}")
        tail = f" ({', '.join(rels)})" if rels else ""
        lines.append(
            f"lane {lane.id}: {lane.lane_type}, width {lane.width:.1f} m{tail}"
        )
    dt = scenario.dt
    for idx, agent in enumerate(scenario.agents):
        s = agent.state_at(scenario.t_now)
        t = scenario.t_now
        prev = agent.states[max(t - 1, 0), :2]
        speed = float(np.hypot(*(agent.states[t, :2] - prev))) / dt if t else 0.0
        lane = current_lane(scenario, idx)
        lane_txt = f"lane {lane[0]}" if lane else "off-lane"
        lines.append(
            f"a{idx}: position ({s.x:.2f}, {s.y:.2f}), speed {speed:.2f} m/s, {lane_txt}"
        )
    return "\n".join(lines)


def build_understanding_prompt(description: str, summary: str) -> list:
    user = (
        f'Scenario description: "{description}"\n\n'
        f"Scene summary:\n{summary}\n\n"
        "Work through these steps, labeling each line exactly as shown:\n"
        f"{COT_STEPS}\n\n"
        "Map-related behaviors should be expressed through the Frenet "
        "accessors (s a r) and (d a r) against a declared refpath rather "
        "than raw x/y coordinates.\n"
        "End your reply with the final program in a fenced code block; the "
        "last fenced block in the reply is taken as the program."
    )
    return [
        {"role": "system", "content": SYSTEM_PROMPT},
        {"role": "user", "content": user},
    ]


def coordinate_table(scenario: Scenario, hz: float = 1.0, decimals: int = 2) -> str:
    """Downsampled per-agent positions; bounds the tokens fed back."""
    stride = max(1, int(round(1.0 / (hz * scenario.dt))))
    t_len = len(scenario.agents[0].states)
    rows = []
    for t in range(0, t_len, stride):
        cells = [f"t={t * scenario.dt:.1f}s"]
        for idx, agent in enumerate(scenario.agents):
            x, y = agent.states[t, :2]
            cells.append(f"a{idx}=({x:.{decimals}f}, {y:.{decimals}f})")
        rows.append("  ".join(cells))
    return "\n".join(rows)


@dataclass(frozen=True)
class CheckResult:
    passed: bool
    detail: str


@dataclass(frozen=True)
class RefinementInput:
    """What the refinement prompt gets to see about one rollout."""

    coord_table: str
    term_values: dict  # term name -> list of cost values over sampler steps
    verdict: CheckResult


def _term_value_lines(term_values: dict) -> str:
    lines = []
    for name in sorted(term_values):
        vals = list(term_values[name])
        if len(vals) > 6:  # first, four interior, last
            idx = np.linspace(0, len(vals) - 1, 6).round().astype(int)
            vals = [vals[i] for i in idx]
        shown = ", ".join(f"{v:.4g}" for v in vals)
        lines.append(f"{name}: [{shown}]")
    return "\n".join(lines) if lines else "(no recorded term values)"


def build_refinement_prompt(session: "GuidanceSession", rinput: RefinementInput) -> list:
    if not session.iterations:
        raise ValueError("refinement requires at least one prior iteration")
    last = session.iterations[-1]
    program_names = {t.name for t in costdsl.parse(last.program_text).terms}
    unknown = set(rinput.term_values) - program_names
    if unknown:
        raise ValueError(f"term values {sorted(unknown)} not in the active program")
    verdict_txt = "PASSED" if rinput.verdict.passed else f"FAILED - {rinput.verdict.detail}"
    user = (
        "The current cost program did not achieve the described behavior.\n\n"
        f'Scenario description: "{session.description}"\n\n'
        f"Current program:\n```\n{last.program_text}\n```\n\n"
        f"Checker verdict: {verdict_txt}\n\n"
        f"Sampled trajectory (1 Hz, meters):\n{rinput.coord_table}\n\n"
        f"Per-term cost values across sampler iterations:\n"
        f"{_term_value_lines(rinput.term_values)}\n\n"
        "Judge the following, then revise:\n"
        "(a) does the sampled trajectory match the description?\n"
        "(b) is each cost term the right expression for its intent?\n"
        "(c) are the per-term weights appropriate? A term whose value stays "
        "large across iterations is likely under-weighted.\n"
        "End your reply with the revised program in a fenced code block."
    )
    return [
        {"role": "system", "content": SYSTEM_PROMPT},
        {"role": "user", "content": user},
    ]


# ---------------------------------------------------------------------------
# response parsing

_FENCE = re.compile(r"```[a-zA-Z0-9_-]*\n(.*?)```", re.S)
_STEP = re.compile(r"^STEP\s+(\d)\s*-\s*[A-Z_ ]+:\s*(.+)$", re.M)
_QUERY = re.compile(r"\([a-z_]+\s+[^()]*\)")


@dataclass
class UnderstandingTrace:
    events: list = field(default_factory=list)
    agents: list = field(default_factory=list)
    behaviors: list = field(default_factory=list)
    map_related: list = field(default_factory=list)
    lane_queries: list = field(default_factory=list)
    dsl_text: str = ""
    program: object = None  # validated CostProgram, or None when failed
    error: str = ""

    @property
    def failed(self) -> bool:
        return self.program is None


def parse_response(text: str) -> UnderstandingTrace:
    """Extract CoT fields and the final fenced program; validate it."""
    trace = UnderstandingTrace()
    for num, content in _STEP.findall(text):
        content = content.strip()
        if num == "1":
            trace.events.append(content)
        elif num == "3":
            trace.agents.append(content)
        elif num == "4":
            trace.behaviors.append(content)
        elif num == "5":
            trace.map_related.extend(
                tok.lower() == "yes" for tok in re.findall(r"(?i)\b(yes|no)\b", content)
            )
        elif num == "6":
            trace.lane_queries.extend(_QUERY.findall(content))
    blocks = _FENCE.findall(text)
    if not blocks:
        trace.error = "no fenced program block in response"
        return trace
    trace.dsl_text = blocks[-1].strip()  # last block wins
    try:
        trace.program = costdsl.parse(trace.dsl_text)
    except costdsl.CostParseError as exc:
        trace.error = str(exc)
    return trace


# ---------------------------------------------------------------------------
# success checkers


def _lane_series(scenario: Scenario, idx: int) -> list:
    t_len = len(scenario.agents[idx].states)
    return [current_lane(scenario, idx, t) for t in range(t_len)]


def check_cut_in(scenario: Scenario) -> CheckResult:
    """a0 merges into a1's lane and lands 0..15 m ahead of it."""
    from . import frenet

    if len(scenario.agents) < 2:
        return CheckResult(False, "cut-in needs a subject (a0) and a counterpart (a1)")
    lanes0, lanes1 = _lane_series(scenario, 0), _lane_series(scenario, 1)
    differed = False
    for t, (l0, l1) in enumerate(zip(lanes0, lanes1)):
        if not l0 or not l1:
            continue
        if l0 != l1:
            differed = True
        elif differed:
            lane = scenario.polyline_by_id(l0[0])
            path = frenet.build_ref_path(lane)
            s0 = frenet.project(path, scenario.agents[0].states[t, :2]).s
            s1 = frenet.project(path, scenario.agents[1].states[t, :2]).s
            gap = s0 - s1
            if 0.0 < gap < CUT_IN_MAX_GAP:
                return CheckResult(
                    True, f"merged into lane {l0[0]} at t={t} with gap {gap:.2f} m"
                )
            return CheckResult(False, f"merged but gap {gap:.2f} m outside (0, 15)")
    return CheckResult(False, "a0 never moved into a1's lane")


def check_out_of_road(scenario: Scenario) -> CheckResult:
    """a0 leaves every driving-lane corridor for at least one second."""
    from . import frenet

    traj = scenario.agents[0].states[:, :2]
    outside_all = np.ones(len(traj), dtype=bool)
    for lane in scenario.driving_lanes():
        proj = frenet.project_trajectory(frenet.build_ref_path(lane), traj)
        outside_all &= np.abs(proj.d) > lane.width / 2
    run = best = 0
    for flag in outside_all:
        run = run + 1 if flag else 0
        best = max(best, run)
    if best >= OFFROAD_DWELL_STEPS:
        return CheckResult(True, f"off-road for {best} consecutive steps")
    return CheckResult(
        False, f"longest off-road run {best} steps (< {OFFROAD_DWELL_STEPS})"
    )


def check_yield(scenario: Scenario) -> CheckResult:
    """a0 drops below walking speed while a1 passes it longitudinally."""
    from . import frenet

    if len(scenario.agents) < 2:
        return CheckResult(False, "yield needs a subject (a0) and a counterpart (a1)")
    lanes0 = current_lane(scenario, 0, 0)
    if not lanes0:
        return CheckResult(False, "a0 starts off-lane; no yield reference")
    path = frenet.build_ref_path(scenario.polyline_by_id(lanes0[0]))
    s0 = frenet.project_trajectory(path, scenario.agents[0].states[:, :2]).s
    s1 = frenet.project_trajectory(path, scenario.agents[1].states[:, :2]).s
    rel = s1 - s0
    speed = (
        np.linalg.norm(np.diff(scenario.agents[0].states[:, :2], axis=0), axis=1)
        / scenario.dt
    )
    for t in range(1, len(rel)):
        if rel[t - 1] < 0.0 <= rel[t]:
            if speed[t - 1] < YIELD_SPEED:
                return CheckResult(
                    True, f"a1 passed at t={t} while a0 moved {speed[t-1]:.2f} m/s"
                )
            return CheckResult(
                False, f"a1 passed at t={t} but a0 still moved {speed[t-1]:.2f} m/s"
            )
    return CheckResult(False, "a1 never passed a0")


def check_rightmost(scenario: Scenario) -> CheckResult:
    """a0 finishes in a lane with no right neighbor."""
    t_last = len(scenario.agents[0].states) - 1
    lanes = current_lane(scenario, 0, t_last)
    if not lanes:
        return CheckResult(False, "a0 ends off-lane")
    lane = lanes[0]
    if scenario.graph.related(lane, "right_neighbor"):
        return CheckResult(False, f"final lane {lane} still has a right neighbor")
    return CheckResult(True, f"final lane {lane} is rightmost")


def success_checkers(scenario_type: str):
    table = {
        "cut_in": check_cut_in,
        "out_of_road": check_out_of_road,
        "yield": check_yield,
        "rightmost": check_rightmost,
    }
    if scenario_type not in table:
        raise ValueError(
            f"unknown scenario type {scenario_type!r}; have {sorted(table)}"
        )
    return table[scenario_type]


# ---------------------------------------------------------------------------
# the session loop


@dataclass
class IterationRecord:
    program_text: str
    refinement: RefinementInput
    verdict: CheckResult


@dataclass
class GuidanceSession:
    description: str
    scenario_summary: str
    max_iters: int
    understanding: UnderstandingTrace = None
    iterations: list = field(default_factory=list)
    transcript: list = field(default_factory=list)  # {role, content} in order
    aborted: str = ""

    def to_dict(self) -> dict:
        return {
            "description": self.description,
            "scenario_summary": self.scenario_summary,
            "max_iters": self.max_iters,
            "understanding": None
            if self.understanding is None
            else {
                "events": self.understanding.events,
                "agents": self.understanding.agents,
                "behaviors": self.understanding.behaviors,
                "map_related": self.understanding.map_related,
                "lane_queries": self.understanding.lane_queries,
                "dsl_text": self.understanding.dsl_text,
                "failed": self.understanding.failed,
                "error": self.understanding.error,
            },
            "iterations": [
                {
                    "program": it.program_text,
                    "coord_table": it.refinement.coord_table,
                    "term_values": it.refinement.term_values,
                    "verdict": {
                        "passed": it.verdict.passed,
                        "detail": it.verdict.detail,
                    },
                }
                for it in self.iterations
            ],
            "transcript": self.transcript,
            "aborted": self.aborted,
        }

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1)

    @property
    def succeeded(self) -> bool:
        return bool(self.iterations) and self.iterations[-1].verdict.passed


def _complete_with_retry(client, messages) -> str:
    last_exc = None
    for _ in range(TRANSPORT_RETRIES):
        try:
            return client.complete(messages)
        except TransportError as exc:
            last_exc = exc
    raise last_exc


def _ask_for_program(client, messages, session: GuidanceSession) -> UnderstandingTrace:
    """One prompt plus up to PARSE_RETRIES corrective re-asks."""
    convo = list(messages)
    recorded = 0  # leading convo messages already copied to the transcript
    trace = None
    for _ in range(1 + PARSE_RETRIES):
        text = _complete_with_retry(client, convo)
        session.transcript.extend(convo[recorded:])
        session.transcript.append({"role": "assistant", "content": text})
        recorded = len(convo) + 1  # the reply joins convo on the next round
        trace = parse_response(text)
        if not trace.failed:
            return trace
        convo = convo + [
            {"role": "assistant", "content": text},
            {
                "role": "user",
                "content": (
                    f"That program failed to parse: {trace.error}\n"
                    "Reply with a corrected program in a fenced code block."
                ),
            },
        ]
    return trace


def run_session(
    description: str,
    scenario: Scenario,
    sampler,
    checker,
    client,
    max_iters: int = 3,
    log_path=None,
) -> GuidanceSession:
    """Understand -> sample -> check -> refine until success or budget.

    sampler(program) -> (Scenario, info) runs guided sampling; info may
    carry "cost_terms" {name: [values over sampler steps]}. checker maps
    the sampled Scenario to a CheckResult. Transport failures abort the
    session after TRANSPORT_RETRIES attempts, still writing the log.
    """
    summary = scenario_summary(scenario)
    session = GuidanceSession(description, summary, max_iters)

    def _finish():
        if log_path is not None:
            session.save(log_path)
        return session

    try:
        trace = _ask_for_program(
            client, build_understanding_prompt(description, summary), session
        )
        session.understanding = trace
        if trace.failed or max_iters == 0:
            return _finish()

        program = trace.program
        for iteration in range(max_iters):
            result_scenario, info = sampler(program)
            verdict = checker(result_scenario)
            rinput = RefinementInput(
                coord_table=coordinate_table(result_scenario),
                term_values=dict(info.get("cost_terms", {})),
                verdict=verdict,
            )
            session.iterations.append(
                IterationRecord(costdsl.print_program(program), rinput, verdict)
            )
            if verdict.passed or iteration == max_iters - 1:
                break
            messages = build_refinement_prompt(session, rinput)
            trace = _ask_for_program(client, messages, session)
            if trace.failed:
                session.aborted = f"refinement parse failed: {trace.error}"
                break
            program = trace.program
    except TransportError as exc:
        session.aborted = f"transport: {exc}"
        _finish()
        raise
    return _finish()
