"""Command-line workflows: data synthesis, training, sampling, guidance, evaluation.

Every command resolves its settings with the precedence flags > config
file > built-in defaults, where the config file (passed as a top-level
``--config`` option) is a flat ``key = value`` text format with ``#``
comments. Each output carries the hash of its fully-resolved settings so
a result can always be traced back to the exact invocation; nothing ever
embeds a timestamp, which keeps reruns byte-identical.

Exit codes: 0 success, 2 usage errors (including missing inputs, checked
before any compute), 3 guided session that did not satisfy its checker
within the iteration budget.

Environment: ``FRENETSIM_API_KEY`` holds the chat API key and
``FRENETSIM_CHAT_ENDPOINT`` the endpoint URL for ``guide --live``. The
key's value is read per request and never written to logs or output.
"""

from __future__ import annotations

import hashlib
import json
import os

import click
import numpy as np

from . import costdsl, llmguide, metrics, synth
from .denoiser import Denoiser, DenoiserConfig, fit_pca, load_checkpoint, save_checkpoint, scenario_windows
from .diffusion import (
    HISTORY_WEIGHT,
    KnownStatesCondition,
    NoiseSchedule,
    RolloutConfig,
    closed_loop_rollout,
    make_guidance,
    sample,
    scenario_with_positions,
    train,
)
from .render import render_scenario
from .scene import load_scenario, scenario_to_dict

ENV_API_KEY = "FRENETSIM_API_KEY"
ENV_ENDPOINT = "FRENETSIM_CHAT_ENDPOINT"


def load_config_file(path) -> dict:
    """Flat `key = value` lines; '#' starts a comment; blank lines skipped."""
    out = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise click.UsageError(f"{path}:{lineno}: expected key = value, got {raw.strip()!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def config_hash(resolved: dict) -> str:
    blob = json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _resolve(flag, config: dict, key: str, default):
    """flags > config file > defaults, casting config strings to the default's type."""
    if flag is not None:
        return flag
    if key in config:
        raw = config[key]
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes", "on")
        if default is None:
            return raw
        return type(default)(raw)
    return default


def _require_file(path, what: str):
    if path is None:
        raise click.UsageError(f"missing {what}")
    if not os.path.exists(path):
        raise click.UsageError(f"{what} not found: {path}")
    return path


def _require_checkpoint(ckpt):
    _require_file(ckpt, "checkpoint directory")
    for fname in ("meta.json", "manifest.json", "params.bin", "pca_manifest.json", "pca.bin"):
        if not os.path.exists(os.path.join(ckpt, fname)):
            raise click.UsageError(f"checkpoint is incomplete: {ckpt}/{fname} missing")
    return ckpt


def _write_json(path, payload: dict):
    with open(path, "w") as f:
        json.dump(payload, f, indent=1, sort_keys=True)


@click.group()
@click.option("--config", "config_path", default=None,
              help="Flat key=value settings file; flags override it.")
@click.pass_context
def main(ctx, config_path):
    """Traffic-scenario generation with cost-guided diffusion sampling."""
    if config_path is not None:
        _require_file(config_path, "config file")
        ctx.obj = load_config_file(config_path)
    else:
        ctx.obj = {}


@main.command("synth")
@click.option("--spec", "spec_path", default=None, help="JSON map spec file.")
@click.option("--n", "count", type=int, default=None, help="Number of scenarios.")
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_path", default=None, help="Output dataset (.jsonl).")
@click.pass_context
def synth_cmd(ctx, spec_path, count, seed, out_path):
    """Generate a synthetic dataset of multi-agent scenarios."""
    cfg = ctx.obj
    spec_path = _resolve(spec_path, cfg, "spec", None)
    count = _resolve(count, cfg, "n", 64)
    seed = _resolve(seed, cfg, "seed", 0)
    out_path = _resolve(out_path, cfg, "out", None)
    if out_path is None:
        raise click.UsageError("missing --out dataset path")
    if spec_path is not None:
        with open(_require_file(spec_path, "map spec")) as f:
            map_spec = json.load(f)
    else:
        map_spec = {"kind": "mixed"}
    resolved = {"command": "synth", "spec": map_spec, "n": count, "seed": seed}
    scenarios, manifest = synth.generate_dataset(map_spec, count, seed=seed)
    manifest["config_hash"] = config_hash(resolved)
    synth.save_dataset(scenarios, manifest, out_path)
    click.echo(f"wrote {count} scenarios to {out_path} (config {manifest['config_hash']})")


@main.command("train")
@click.option("--data", "data_path", default=None, help="Training dataset (.jsonl).")
@click.option("--out", "out_dir", default=None, help="Checkpoint directory.")
@click.option("--steps", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--replicas", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--k", "k_coeffs", type=int, default=None, help="Trajectory basis size.")
@click.option("--width", "d_model", type=int, default=None, help="Feature width.")
@click.option("--blocks", type=int, default=None, help="Attention blocks.")
@click.pass_context
def train_cmd(ctx, data_path, out_dir, steps, lr, replicas, seed, k_coeffs, d_model, blocks):
    """Fit the trajectory basis and train the denoiser; writes a loss CSV."""
    cfg = ctx.obj
    data_path = _require_file(_resolve(data_path, cfg, "data", None), "training dataset")
    out_dir = _resolve(out_dir, cfg, "out", None)
    if out_dir is None:
        raise click.UsageError("missing --out checkpoint directory")
    steps = _resolve(steps, cfg, "steps", 500)
    lr = _resolve(lr, cfg, "lr", 3e-3)
    replicas = _resolve(replicas, cfg, "replicas", 4)
    seed = _resolve(seed, cfg, "seed", 0)
    k_coeffs = _resolve(k_coeffs, cfg, "k", 16)
    d_model = _resolve(d_model, cfg, "width", 64)
    blocks = _resolve(blocks, cfg, "blocks", 3)
    resolved = {"command": "train", "data": os.path.basename(data_path), "steps": steps,
                "lr": lr, "replicas": replicas, "seed": seed, "k": k_coeffs,
                "width": d_model, "blocks": blocks}
    h = config_hash(resolved)

    scenarios, _ = synth.load_dataset(data_path)
    windows = np.vstack([scenario_windows(sc)[0] for sc in scenarios])
    basis = fit_pca(windows, k_coeffs)
    model = Denoiser.init(seed, DenoiserConfig(d=d_model, k=k_coeffs, n_blocks=blocks))
    os.makedirs(out_dir, exist_ok=True)
    losses = train(model, basis, scenarios, steps=steps, lr=lr, replicas=replicas,
                   seed=seed, log_path=os.path.join(out_dir, "loss.csv"))
    save_checkpoint(out_dir, model, basis)
    _write_json(os.path.join(out_dir, "train_meta.json"), dict(resolved, config_hash=h))
    click.echo(f"trained {steps} steps; final loss {losses[-1]:.4f}; "
               f"checkpoint in {out_dir} (config {h})")


def _history_conditions(scenario, weight: float):
    t_hist = scenario.t_now + 1
    conds = []
    for aidx, tr in enumerate(scenario.agents):
        conds.append((aidx, KnownStatesCondition(
            tuple(range(t_hist)), tr.states[:t_hist, :2], weight=weight)))
    return conds


@main.command("simulate")
@click.option("--ckpt", default=None, help="Checkpoint directory from `train`.")
@click.option("--scenario", "scenario_path", default=None, help="Scenario JSON.")
@click.option("--out", "out_path", default=None, help="Output scenario JSON.")
@click.option("--seed", type=int, default=None)
@click.option("--history-cond/--no-history-cond", "history_cond", default=None,
              help="Pin the sampled window to the observed history (default on).")
@click.option("--endpoint", default=None, help="x,y endpoint target for agent 0.")
@click.option("--closed-loop/--open-loop", "closed_loop", default=None,
              help="Replan at 2 Hz instead of sampling one open-loop window.")
@click.option("--steps", "n_steps", type=int, default=None, help="Sampler ladder steps.")
@click.pass_context
def simulate_cmd(ctx, ckpt, scenario_path, out_path, seed, history_cond, endpoint,
                 closed_loop, n_steps):
    """Sample trajectories conditioned on history and optional endpoint."""
    cfg = ctx.obj
    ckpt = _require_checkpoint(_resolve(ckpt, cfg, "ckpt", None))
    scenario_path = _require_file(_resolve(scenario_path, cfg, "scenario", None), "scenario file")
    out_path = _resolve(out_path, cfg, "out", None)
    if out_path is None:
        raise click.UsageError("missing --out scenario path")
    seed = _resolve(seed, cfg, "seed", 0)
    history_cond = _resolve(history_cond, cfg, "history_cond", True)
    closed_loop = _resolve(closed_loop, cfg, "closed_loop", False)
    endpoint = _resolve(endpoint, cfg, "endpoint", None)
    n_steps = _resolve(n_steps, cfg, "steps", 32)
    resolved = {"command": "simulate", "seed": seed, "history_cond": history_cond,
                "endpoint": endpoint, "closed_loop": closed_loop, "steps": n_steps}
    h = config_hash(resolved)

    model, basis = load_checkpoint(ckpt)
    scenario = load_scenario(scenario_path)
    schedule = NoiseSchedule(steps=n_steps)
    if closed_loop:
        out_sc, info = closed_loop_rollout(
            scenario, model, basis, RolloutConfig(seed=seed), schedule)
        extra = {"max_splice_error": float(np.max(info["splice_errors"]))}
    else:
        conditions = _history_conditions(scenario, HISTORY_WEIGHT) if history_cond else []
        if endpoint is not None:
            try:
                ex, ey = (float(v) for v in endpoint.split(","))
            except ValueError:
                raise click.UsageError(f"--endpoint expects x,y, got {endpoint!r}")
            t_len = basis.mean.size // 2
            conditions.append((0, KnownStatesCondition(
                (t_len - 1,), np.array([[ex, ey]]), weight=HISTORY_WEIGHT)))
        guidance = make_guidance(scenario, basis, conditions=conditions) if conditions else None
        enc = model.encode_scene(scenario)
        result = sample(model, basis, enc, schedule, seed=seed, guidance=guidance)
        out_sc = scenario_with_positions(scenario, result.positions)
        extra = {}
    payload = scenario_to_dict(out_sc)
    payload["metadata"] = dict(resolved, config_hash=h, **extra)
    _write_json(out_path, payload)
    click.echo(f"wrote simulated scenario to {out_path} (config {h})")


@main.command("guide")
@click.option("--ckpt", default=None, help="Checkpoint directory from `train`.")
@click.option("--scenario", "scenario_path", default=None, help="Scenario JSON.")
@click.option("--dsl", "dsl_path", default=None, help="Cost program file (skips the LLM).")
@click.option("--describe", default=None, help="Natural-language scenario description.")
@click.option("--mock", "mock_script", default=None, help="YAML script replayed offline.")
@click.option("--live", is_flag=True, default=False,
              help=f"Use the chat endpoint from ${ENV_ENDPOINT} with ${ENV_API_KEY}.")
@click.option("--check", "check_type", default=None,
              help="Success checker: cut_in, out_of_road, yield, or rightmost.")
@click.option("--max-iters", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--steps", "n_steps", type=int, default=None, help="Sampler ladder steps.")
@click.option("--out", "out_path", default=None, help="Final scenario JSON.")
@click.option("--session-log", default=None, help="Replayable session log JSON.")
@click.pass_context
def guide_cmd(ctx, ckpt, scenario_path, dsl_path, describe, mock_script, live,
              check_type, max_iters, seed, n_steps, out_path, session_log):
    """Steer sampling with a cost program, hand-written or LLM-authored."""
    cfg = ctx.obj
    ckpt = _require_checkpoint(_resolve(ckpt, cfg, "ckpt", None))
    scenario_path = _require_file(_resolve(scenario_path, cfg, "scenario", None), "scenario file")
    dsl_path = _resolve(dsl_path, cfg, "dsl", None)
    describe = _resolve(describe, cfg, "describe", None)
    mock_script = _resolve(mock_script, cfg, "mock", None)
    check_type = _resolve(check_type, cfg, "check", None)
    max_iters = _resolve(max_iters, cfg, "max_iters", 3)
    seed = _resolve(seed, cfg, "seed", 0)
    n_steps = _resolve(n_steps, cfg, "steps", 32)
    out_path = _resolve(out_path, cfg, "out", None)
    session_log = _resolve(session_log, cfg, "session_log", None)
    if (dsl_path is None) == (describe is None):
        raise click.UsageError("pass exactly one of --dsl or --describe")
    resolved = {"command": "guide", "dsl": dsl_path and os.path.basename(dsl_path),
                "describe": describe, "mock": mock_script and os.path.basename(mock_script),
                "live": live, "check": check_type, "max_iters": max_iters, "seed": seed,
                "steps": n_steps}
    h = config_hash(resolved)

    model, basis = load_checkpoint(ckpt)
    scenario = load_scenario(scenario_path)
    schedule = NoiseSchedule(steps=n_steps)
    last_sampled = {}

    def sampler(program):
        guidance = make_guidance(scenario, basis, program=program)
        enc = model.encode_scene(scenario)
        result = sample(model, basis, enc, schedule, seed=seed, guidance=guidance,
                        record=True)
        out_sc = scenario_with_positions(scenario, result.positions)
        term_series = {}
        for step in result.info["steps"]:
            for name, value in step["cost_terms"].items():
                term_series.setdefault(name, []).append(float(value))
        last_sampled["scenario"] = out_sc
        return out_sc, {"cost_terms": term_series}

    if dsl_path is not None:
        with open(_require_file(dsl_path, "cost program")) as f:
            program = costdsl.parse(f.read())
        out_sc, info = sampler(program)
        if out_path is not None:
            payload = scenario_to_dict(out_sc)
            payload["metadata"] = dict(resolved, config_hash=h)
            _write_json(out_path, payload)
        if session_log is not None:
            _write_json(session_log, {"config_hash": h, "program": costdsl.print_program(program),
                                      "cost_terms": info["cost_terms"]})
        click.echo(f"sampled with hand-written program (config {h})")
        return

    if mock_script is not None:
        client = llmguide.MockChatClient.from_yaml(_require_file(mock_script, "mock script"))
    elif live:
        endpoint = os.environ.get(ENV_ENDPOINT, "")
        if not endpoint:
            raise click.UsageError(f"--live requires ${ENV_ENDPOINT} to be set")
        client = llmguide.LiveChatClient(llmguide.ChatClientConfig(
            endpoint=endpoint, api_key_env=ENV_API_KEY))
    else:
        raise click.UsageError("--describe requires either --mock script.yaml or --live")

    if check_type is not None:
        try:
            checker = llmguide.success_checkers(check_type)
        except ValueError as exc:
            raise click.UsageError(str(exc))
    else:
        def checker(_):
            return llmguide.CheckResult(True, "no checker configured")

    session = llmguide.run_session(describe, scenario, sampler, checker, client,
                                   max_iters=max_iters, log_path=session_log)
    if out_path is not None and "scenario" in last_sampled:
        payload = scenario_to_dict(last_sampled["scenario"])
        payload["metadata"] = dict(resolved, config_hash=h)
        _write_json(out_path, payload)
    if session.understanding is not None and session.understanding.failed:
        click.echo(f"understanding failed: {session.understanding.error} (config {h})")
        ctx.exit(3)
    if max_iters > 0 and not session.succeeded:
        click.echo(f"guidance did not satisfy the checker in {max_iters} iterations (config {h})")
        ctx.exit(3)
    n = len(session.iterations)
    click.echo(f"guided session succeeded after {n} iteration{'s' if n != 1 else ''} (config {h})")


@main.command("eval")
@click.option("--real", "real_path", default=None, help="Ground-truth dataset (.jsonl).")
@click.option("--sim", "sim_path", default=None,
              help="Simulated dataset: .jsonl file or directory of scenario JSONs.")
@click.option("--report", "report_path", default=None, help="Output report JSON.")
@click.pass_context
def eval_cmd(ctx, real_path, sim_path, report_path):
    """Score simulated scenarios against paired ground truth."""
    cfg = ctx.obj
    real_path = _require_file(_resolve(real_path, cfg, "real", None), "ground-truth dataset")
    sim_path = _require_file(_resolve(sim_path, cfg, "sim", None), "simulated dataset")
    report_path = _resolve(report_path, cfg, "report", None)
    resolved = {"command": "eval", "real": os.path.basename(real_path),
                "sim": os.path.basename(sim_path)}
    h = config_hash(resolved)

    real, _ = synth.load_dataset(real_path)
    if os.path.isdir(sim_path):
        files = sorted(f for f in os.listdir(sim_path) if f.endswith(".json"))
        sim = [load_scenario(os.path.join(sim_path, f)) for f in files]
    else:
        sim, _ = synth.load_dataset(sim_path)
    if len(real) != len(sim):
        raise click.UsageError(
            f"real and sim must pair up: {len(real)} real vs {len(sim)} sim")
    report = metrics.evaluate_scenarios(real, sim)
    rows = [("ade", report.ade), ("fde", report.fde), ("jsd", report.jsd),
            ("collision_rate", report.collision_rate),
            ("offroad_rate", report.offroad_rate), ("scr", report.scr),
            ("mmd_o", report.mmd_o), ("mmd_r", report.mmd_r)]
    for name, value in rows:
        click.echo(f"{name:<16}{value:.6f}")
    if report_path is not None:
        payload = json.loads(report.to_json())
        payload["config_hash"] = h
        _write_json(report_path, payload)
        click.echo(f"wrote report to {report_path} (config {h})")


@main.command("render")
@click.option("--scenario", "scenario_path", default=None, help="Scenario JSON.")
@click.option("--out", "out_path", default=None, help="Output SVG path.")
@click.pass_context
def render_cmd(ctx, scenario_path, out_path):
    """Draw a scenario (lanes, agent boxes, trajectory fades) as SVG."""
    cfg = ctx.obj
    scenario_path = _require_file(_resolve(scenario_path, cfg, "scenario", None), "scenario file")
    out_path = _resolve(out_path, cfg, "out", None)
    if out_path is None:
        raise click.UsageError("missing --out SVG path")
    resolved = {"command": "render", "scenario": os.path.basename(scenario_path)}
    h = config_hash(resolved)
    scenario = load_scenario(scenario_path)
    render_scenario(scenario, out_path, comment=f"config {h}")
    click.echo(f"wrote {out_path} (config {h})")


if __name__ == "__main__":
    main()
