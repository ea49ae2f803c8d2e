"""EDM-style diffusion over per-agent trajectory coefficients.

Training minimizes the weighted denoising loss E[w(sigma) ||D(y + n; sigma)
- y||^2] with log-normal sigma draws. Sampling integrates the probability
flow ODE dx/dt = (x - D(x; t))/t from sigma_max down to 0 with
deterministic second-order (Heun) steps.

Conditioning never touches the network: a differentiable cost over decoded
trajectories is turned into a score term -lam * dL/dx, clamped elementwise
to (-1, 1), and added to the model score at every step. Pinning known
states (e.g. the executed history during closed-loop replanning) is just
another quadratic cost term.
"""

from __future__ import annotations

import csv
import inspect
from dataclasses import dataclass, field, replace

import numpy as np

from . import costdsl
from . import grad as G
from .denoiser import (
    PcaBasis,
    SceneEncoding,
    c_skip,
    loss_weight,
    scenario_windows,
    scene_tensors,
)
from .scene import Scenario, inverse_transform_points

GUIDANCE_CLAMP = 1.0 - 1e-9
HISTORY_WEIGHT = 50.0  # known-states weight that holds splice error < 0.1 m
TRAIN_P_MEAN = -1.2
TRAIN_P_STD = 1.2


class GuidanceError(RuntimeError):
    """Cost evaluation failed during guided sampling."""


@dataclass(frozen=True)
class NoiseSchedule:
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    steps: int = 32

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError("need 0 < sigma_min < sigma_max")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")

    def sigmas(self) -> np.ndarray:
        """Descending noise levels t_0..t_{N-1} plus the final 0."""
        n, rho = self.steps, self.rho
        if n == 1:
            ladder = np.array([self.sigma_max])
        else:
            i = np.arange(n)
            hi, lo = self.sigma_max ** (1 / rho), self.sigma_min ** (1 / rho)
            ladder = (hi + i / (n - 1) * (lo - hi)) ** rho
        return np.append(ladder, 0.0)


@dataclass(frozen=True)
class KnownStatesCondition:
    """Pin selected timesteps of one trajectory to target positions."""

    timesteps: tuple
    targets: np.ndarray  # (len(timesteps), 2)
    weight: float = HISTORY_WEIGHT

    def __post_init__(self):
        object.__setattr__(self, "timesteps", tuple(int(t) for t in self.timesteps))
        object.__setattr__(self, "targets", np.asarray(self.targets, float))
        if self.targets.shape != (len(self.timesteps), 2):
            raise ValueError(
                f"targets shape {self.targets.shape} does not match "
                f"{len(self.timesteps)} timesteps"
            )
        if any(t < 0 for t in self.timesteps):
            raise ValueError("timesteps must be non-negative")
        if self.weight < 0:
            raise ValueError("weight must be >= 0")


def known_states_cost(y, condition: KnownStatesCondition):
    """Sum of squared position errors over the pinned timesteps.

    Tensor in, Tensor out (stays on the tape); array in, float out.
    """
    tape = isinstance(y, G.Tensor)
    yt = y if tape else G.Tensor(np.asarray(y, float))
    t_len = yt.data.shape[0]
    if any(t >= t_len for t in condition.timesteps):
        raise ValueError(f"timestep beyond horizon {t_len}")
    idx = np.asarray(condition.timesteps, int)
    diff = G.sub(G.gather(yt, idx, axis=0), condition.targets)
    total = G.tsum(G.square(diff))
    return total if tape else total.item()


def variance_inflation(sigma, sigma_data: float = 1.0) -> float:
    """Clean-space posterior variance tau^2 implied by noise level sigma.

    A denoised estimate at noise level sigma is uncertain by roughly
    tau^2 = sigma^2 sigma_data^2 / (sigma^2 + sigma_data^2) per whitened
    coefficient; quadratic costs must be tempered by this inflation or
    their gradients dominate the score early in the ladder.
    """
    s2 = float(sigma) ** 2
    d2 = float(sigma_data) ** 2
    return s2 * d2 / (s2 + d2)


@dataclass
class GuidanceConfig:
    """A differentiable cost over clean coefficients, plus how to apply it.

    cost_fn(z) -> (scalar Tensor, {term name: float}); z is the (A, k)
    coefficient Tensor. A cost_fn taking a second positional argument is
    called as cost_fn(z, sigma) so term weights can adapt to the noise
    level. lam scales the descent direction before the fixed (-1, 1)
    clamp; it may be a callable lam(sigma) for noise-level-aware scaling
    (e.g. the exact likelihood tempering for conjugate oracles).
    Modes: "clean_space" differentiates the cost at the denoised point and
    rescales by c_skip; "through_denoiser" backpropagates through the full
    network.
    """

    cost_fn: object
    lam: object = 1.0
    mode: str = "clean_space"

    def __post_init__(self):
        if not callable(self.lam) and self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.mode not in ("clean_space", "through_denoiser"):
            raise ValueError(f"unknown guidance mode {self.mode!r}")
        try:
            n_params = len(inspect.signature(self.cost_fn).parameters)
        except (TypeError, ValueError):
            n_params = 1
        self.wants_sigma = n_params >= 2

    def eval_cost(self, z, sigma: float):
        if self.wants_sigma:
            return self.cost_fn(z, sigma)
        return self.cost_fn(z)

    def lam_at(self, sigma: float) -> float:
        value = self.lam(sigma) if callable(self.lam) else self.lam
        if value < 0:
            raise ValueError(f"lam({sigma}) = {value} is negative")
        return float(value)


def decode_global_on_tape(z: G.Tensor, basis: PcaBasis, anchors):
    """Coefficients -> per-agent (T, 2) global-frame position Tensors."""
    windows = basis.decode_on_tape(z)  # (A, T, 2)
    t_len = windows.data.shape[1]
    out = []
    for a, anc in enumerate(anchors):
        w = G.reshape(G.tslice(windows, a, a + 1, axis=0), (t_len, 2))
        px, py = G.tslice(w, 0, 1, axis=1), G.tslice(w, 1, 2, axis=1)
        c, s = np.cos(anc.heading), np.sin(anc.heading)
        gx = G.add(G.sub(G.mul(px, c), G.mul(py, s)), anc.x)
        gy = G.add(G.add(G.mul(px, s), G.mul(py, c)), anc.y)
        out.append(G.concat([gx, gy], axis=1))
    return out


def scenario_with_positions(scenario, positions: np.ndarray):
    """New Scenario keeping states up to t_now and following positions after.

    positions is (A, T, 2) in the global frame, as produced by sample();
    headings on the replaced future are reconstructed from displacement,
    carrying the previous heading through near-zero steps.
    """
    t_hist = scenario.t_now + 1
    agents = []
    for aidx, tr in enumerate(scenario.agents):
        hist = [list(s) for s in tr.states[:t_hist]]
        heading = hist[-1][2]
        prev = np.asarray(hist[-1][:2])
        for pos in positions[aidx, t_hist:]:
            step_vec = pos - prev
            if np.hypot(*step_vec) > 1e-6:
                heading = float(np.arctan2(step_vec[1], step_vec[0]))
            hist.append([pos[0], pos[1], heading])
            prev = pos
        agents.append(type(tr)(tr.agent_id, np.asarray(hist, float), tr.extent))
    return Scenario(
        scenario.polylines, scenario.graph, tuple(agents), scenario.t_now, scenario.dt
    )


def positions_from_coeffs(coeffs, basis: PcaBasis, anchors) -> np.ndarray:
    """Plain-array version of decode_global_on_tape: (A, T, 2) global."""
    windows = basis.decode(coeffs)
    return np.stack(
        [inverse_transform_points(windows[a], anc) for a, anc in enumerate(anchors)]
    )


def make_guidance(
    scenario,
    basis: PcaBasis,
    program=None,
    conditions=(),
    lam: float = 1.0,
    mode: str = "clean_space",
    guide_scale: float = 2.0,
) -> GuidanceConfig:
    """Build guidance from a cost program and/or known-state pins.

    conditions: iterable of (agent_index, KnownStatesCondition); their
    contributions are reported as "known_states_a{i}" terms.

    guide_scale tempers the program cost by 1/(1 + (sigma/guide_scale)^2).
    Without it, a cost gradient large enough to saturate the (-1, 1)
    score clamp at high noise displaces the sample by ~sigma*d_sigma per
    step — thousands of coefficient units — and the run diverges before
    the prior can object. Tempering keeps the program's pull negligible
    while the state is still mostly noise and lets it come up to full
    strength as sigma falls below guide_scale, where the clamp is a
    benign bound. Pass None to disable (constant full-strength cost).
    Reported per-term values are always the untempered costs.
    """
    refpaths = costdsl.resolve_refpaths(program, scenario) if program is not None else {}
    anchors = [a.state_at(scenario.t_now) for a in scenario.agents]
    conditions = tuple(conditions)
    dt = scenario.dt
    # mean squared row norm of the decode matrix: converts the whitened
    # coefficient-space variance inflation into squared meters, so pin
    # weights are tempered in the same units their residuals are measured
    meters_per_coeff_sq = float(np.sum(basis.scale**2)) / basis.mean.size

    def cost_fn(z: G.Tensor, sigma: float = None):
        trajs = decode_global_on_tape(z, basis, anchors)
        ctx = costdsl.EvalContext(trajs, refpaths, dt)
        total = G.Tensor(0.0)
        per_term = {}
        if program is not None:
            temper = 1.0
            if sigma is not None and guide_scale is not None:
                temper = 1.0 / (1.0 + (float(sigma) / guide_scale) ** 2)
            for term in program.terms:
                sub = costdsl.CostProgram(program.decls, (term,))
                try:
                    weighted, raw = costdsl.evaluate_on_tape(sub, ctx)
                except Exception as exc:
                    raise GuidanceError(f"cost term {term.name!r} failed: {exc}") from exc
                total = G.add(total, G.mul(weighted, temper))
                per_term[term.name] = raw[term.name].item()
        for aidx, cond in conditions:
            name = f"known_states_a{aidx}"
            try:
                value = known_states_cost(trajs[aidx], cond)
            except Exception as exc:
                raise GuidanceError(f"cost term {name!r} failed: {exc}") from exc
            w_eff = cond.weight
            if sigma is not None:
                # exact-quadratic tempering: keeps the pin's score-space
                # contribution bounded while the estimate is still noisy
                tau2_m = variance_inflation(sigma) * meters_per_coeff_sq
                w_eff = cond.weight / (1.0 + 2.0 * cond.weight * tau2_m)
            total = G.add(total, G.mul(value, w_eff))
            per_term[name] = value.item()
        return total, per_term

    return GuidanceConfig(cost_fn, lam=lam, mode=mode)


# ---------------------------------------------------------------------------
# scores and the sampler


def score_from_denoiser(x, x_hat, sigma):
    """The noisy-data score implied by a denoiser output: (x_hat - x)/sigma^2."""
    if np.any(np.asarray(sigma, float) <= 0):
        raise ValueError("sigma must be positive")
    return (np.asarray(x_hat, float) - np.asarray(x, float)) / float(sigma) ** 2


def _guidance_term(model, x, enc, sigma, guidance: GuidanceConfig, lam: float):
    """Clamped conditional-score estimate at (x, sigma); also returns terms."""
    if guidance.mode == "clean_space":
        with G.no_grad():
            x_hat = model.forward(x, enc, sigma).data
        z = G.Tensor(x_hat, requires_grad=True)
        total, per_term = guidance.eval_cost(z, sigma)
        if total.requires_grad:
            G.backward(total)
        grad_x = (z.grad if z.grad is not None else np.zeros_like(x)) * c_skip(
            sigma, model.config.sigma_data
        )
    else:  # through_denoiser
        xt = G.Tensor(np.asarray(x, float), requires_grad=True)
        x_hat_t = model.forward(xt, enc, sigma)
        total, per_term = guidance.eval_cost(x_hat_t, sigma)
        if total.requires_grad:
            G.backward(total)
        grad_x = xt.grad if xt.grad is not None else np.zeros_like(x)
    term = np.clip(-lam * grad_x, -GUIDANCE_CLAMP, GUIDANCE_CLAMP)
    assert np.all(np.abs(term) < 1.0), "guidance term escaped the (-1, 1) clamp"
    return term, per_term


def _ode_slope(model, x, enc, sigma, guidance, record):
    """dx/dt of the probability-flow ODE at (x, sigma), guidance included."""
    with G.no_grad():
        x_hat = model.forward(x, enc, sigma).data
    base = score_from_denoiser(x, x_hat, sigma)
    lam = guidance.lam_at(sigma) if guidance is not None else 0.0
    if lam > 0:
        term, per_term = _guidance_term(model, x, enc, sigma, guidance, lam)
        score = base + term  # conditional score: prior score plus clamped cost term
    else:
        term, per_term = np.zeros_like(base), {}
        score = base
    if record is not None:
        record.append(
            {"sigma": float(sigma), "base": base, "term": term, "score": score,
             "cost_terms": per_term}
        )
    return -sigma * score


@dataclass(frozen=True)
class SampleResult:
    coeffs: np.ndarray  # (A, k)
    windows: np.ndarray  # (A, T, 2) agent-frame
    positions: np.ndarray  # (A, T, 2) global-frame
    info: dict = field(default_factory=dict)


def sample(
    model,
    basis: PcaBasis,
    enc: SceneEncoding,
    schedule: NoiseSchedule = NoiseSchedule(),
    seed: int = 0,
    guidance: GuidanceConfig = None,
    record: bool = False,
) -> SampleResult:
    """Deterministic Heun integration from sigma_max noise to clean coefficients."""
    n_agents = len(enc.anchors)
    k = model.config.k
    rng = np.random.default_rng(seed)
    ladder = schedule.sigmas()
    x = rng.standard_normal((n_agents, k)) * ladder[0]
    steps = [] if record else None
    for i in range(schedule.steps):
        t, t_next = ladder[i], ladder[i + 1]
        d = _ode_slope(model, x, enc, t, guidance, steps)
        x_euler = x + (t_next - t) * d
        if t_next > 0:
            d2 = _ode_slope(model, x_euler, enc, t_next, guidance, steps)
            x = x + (t_next - t) * 0.5 * (d + d2)
        else:
            x = x_euler
    windows = basis.decode(x)
    positions = positions_from_coeffs(x, basis, enc.anchors)
    info = {"sigmas": ladder}
    if record:
        info["steps"] = steps
    return SampleResult(x, windows, positions, info)


# ---------------------------------------------------------------------------
# training


class _Adam:
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params: dict, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, tensor in params.items():
            g = tensor.grad
            if g is None:
                continue
            m = self.m.setdefault(name, np.zeros_like(tensor.data))
            v = self.v.setdefault(name, np.zeros_like(tensor.data))
            m += (1 - b1) * (g - m)
            v += (1 - b2) * (g * g - v)
            mhat = m / (1 - b1**self.t)
            vhat = v / (1 - b2**self.t)
            tensor.data -= lr * mhat / (np.sqrt(vhat) + self.eps)


def _block_diag_mask(replicas: int, n_agents: int) -> np.ndarray:
    """Additive agent-agent mask keeping attention inside each replica."""
    rows = replicas * n_agents
    mask = np.full((rows, rows), -1e9)
    for r in range(replicas):
        mask[r * n_agents : (r + 1) * n_agents, r * n_agents : (r + 1) * n_agents] = 0.0
    return mask


def train(
    model,
    basis: PcaBasis,
    scenarios,
    steps: int = 500,
    lr: float = 3e-3,
    replicas: int = 4,
    seed: int = 0,
    log_path=None,
    p_mean: float = TRAIN_P_MEAN,
    p_std: float = TRAIN_P_STD,
):
    """Denoising-loss training with per-step noise replicas of one scene.

    Each step stacks `replicas` independently-noised copies of one
    scenario's agents into a single forward pass; a block-diagonal mask
    keeps agent-agent attention inside each copy while the lane tower is
    shared. Returns the per-step loss curve.
    """
    scenarios = list(scenarios)
    if not scenarios:
        raise ValueError("need at least one scenario")
    model.set_trainable(True)
    rng = np.random.default_rng(seed)
    opt = _Adam()

    prepared = []
    for sc in scenarios:
        st = scene_tensors(sc)
        wins, _ = scenario_windows(sc)
        y = basis.encode(wins)
        n_agents = len(sc.agents)
        st_tiled = replace(
            st,
            rel_aa=np.tile(st.rel_aa, (replicas, replicas, 1)),
            rel_al=np.tile(st.rel_al, (replicas, 1, 1)),
        )
        prepared.append((st_tiled, y, _block_diag_mask(replicas, n_agents)))

    losses = []
    warmup = min(10, max(1, steps // 10))
    for step_idx in range(steps):
        st_tiled, y, aa_mask = prepared[step_idx % len(prepared)]
        n_agents = y.shape[0]
        sigma = np.exp(p_mean + p_std * rng.standard_normal(replicas))
        eps = rng.standard_normal((replicas, n_agents, model.config.k))
        x_rows = (y[None] + sigma[:, None, None] * eps).reshape(-1, model.config.k)
        sig_rows = np.repeat(sigma, n_agents)
        y_rows = np.tile(y, (replicas, 1))

        x_hat = model.forward(x_rows, st_tiled, sig_rows, aa_mask=aa_mask)
        weights = loss_weight(sig_rows, model.config.sigma_data)[:, None]
        loss = G.tmean(G.mul(G.square(G.sub(x_hat, y_rows)), weights))
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            raise RuntimeError(
                f"training diverged: loss={loss_val} at step {step_idx}, "
                f"lr={lr}, sigma range [{sigma.min():.4g}, {sigma.max():.4g}]"
            )
        for tensor in model.params.values():
            tensor.grad = None
        G.backward(loss)
        frac = step_idx / max(1, steps - 1)
        lr_t = lr * min(1.0, (step_idx + 1) / warmup) * (0.1 + 0.9 * 0.5 * (
            1 + np.cos(np.pi * frac)
        ))
        opt.step(model.params, lr_t)
        losses.append(loss_val)

    if log_path is not None:
        with open(log_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["step", "loss"])
            for i, val in enumerate(losses):
                writer.writerow([i, repr(val)])
    return losses


# ---------------------------------------------------------------------------
# closed-loop replanning


@dataclass(frozen=True)
class RolloutConfig:
    execute_steps: int = 5  # 0.5 s at 10 Hz -> 2 Hz replan rate
    replans: int = 16  # 16 x 0.5 s = the 8 s horizon
    history_weight: float = HISTORY_WEIGHT
    lam: float = 1.0
    mode: str = "clean_space"
    seed: int = 0


def closed_loop_rollout(
    scenario: Scenario,
    model,
    basis: PcaBasis,
    config: RolloutConfig = RolloutConfig(),
    schedule: NoiseSchedule = NoiseSchedule(),
    program=None,
):
    """Sample, execute a short prefix, re-plan from the executed history.

    Each replan re-samples a full window conditioned (via known-states
    cost) on the last 11 executed states, then appends `execute_steps`
    new states. Returns (extended Scenario, info) where info carries the
    per-replan splice errors |planned t_now - actual position|.
    """
    t_hist = scenario.t_now + 1
    executed = [list(tr.states[:t_hist]) for tr in scenario.agents]
    base_enc = model.encode_scene(scenario)
    splice_errors = []

    for replan in range(config.replans):
        tracks = []
        for tr, hist in zip(scenario.agents, executed):
            states = np.asarray(hist[-t_hist:], float)
            tracks.append(type(tr)(tr.agent_id, states, tr.extent))
        plan_sc = Scenario(
            scenario.polylines, scenario.graph, tuple(tracks), t_hist - 1, scenario.dt
        )
        enc = model.refresh_agents(plan_sc, base_enc)
        conditions = []
        for aidx, tr in enumerate(tracks):
            cond = KnownStatesCondition(
                tuple(range(t_hist)),
                tr.states[:, :2],
                weight=config.history_weight,
            )
            conditions.append((aidx, cond))
        guidance = make_guidance(
            plan_sc, basis, program=program, conditions=conditions,
            lam=config.lam, mode=config.mode,
        )
        result = sample(
            model, basis, enc, schedule, seed=config.seed + replan, guidance=guidance
        )
        now = np.array([tr.states[-1, :2] for tr in tracks])
        splice_errors.append(
            np.linalg.norm(result.positions[:, t_hist - 1] - now, axis=1)
        )
        for aidx, hist in enumerate(executed):
            seg = result.positions[aidx, t_hist : t_hist + config.execute_steps]
            heading = hist[-1][2]
            prev = np.asarray(hist[-1][:2])
            for pos in seg:
                step_vec = pos - prev
                if np.hypot(*step_vec) > 1e-6:
                    heading = float(np.arctan2(step_vec[1], step_vec[0]))
                hist.append([pos[0], pos[1], heading])
                prev = pos

    agents = tuple(
        type(tr)(tr.agent_id, np.asarray(hist, float), tr.extent)
        for tr, hist in zip(scenario.agents, executed)
    )
    extended = Scenario(
        scenario.polylines, scenario.graph, agents, scenario.t_now, scenario.dt
    )
    info = {"splice_errors": np.asarray(splice_errors)}
    return extended, info
