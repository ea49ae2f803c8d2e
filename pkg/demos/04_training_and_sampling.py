# coding: utf-8

# # Training the denoiser and drawing unguided samples
#
# The generative model is an EDM-style diffusion model over per-agent
# trajectory coefficients. Each agent's 91-step xy window is expressed in
# a PCA basis fit to the training corpus (whitened so coefficients sit
# near unit variance), and a small transformer denoiser — agents attend to
# each other and to the lane polylines — predicts the clean coefficients
# from a noisy version at noise level sigma.
#
# This walkthrough trains a deliberately tiny model for a few seconds;
# the `train` CLI subcommand runs the same loop at full size.

import time

import numpy as np

from frenetsim import synth
from frenetsim.denoiser import Denoiser, DenoiserConfig, fit_pca, scenario_windows
from frenetsim.diffusion import NoiseSchedule, sample, scenario_with_positions, train
from frenetsim.render import render_scenario

# ## A small corpus and its coefficient basis

scenarios, _ = synth.generate_dataset({"kind": "straight", "lanes": 2, "length": 400.0}, 48, seed=0, agents=(2, 2))
windows = np.vstack([scenario_windows(sc)[0] for sc in scenarios])
basis = fit_pca(windows, k=8)
print("windows:", windows.shape, "-> coefficients per agent:", basis.scale.size)
print("explained scale per component:", np.round(basis.scale[:4], 1), "...")

# ## A few hundred training steps
#
# Each step draws a batch of scenarios and noise levels from the EDM
# lognormal distribution, corrupts the coefficients, and regresses the
# preconditioned denoiser output against the clean targets.

model = Denoiser.init(seed=0, config=DenoiserConfig(d=32, k=8, n_blocks=2))
t0 = time.monotonic()
losses = train(model, basis, scenarios, steps=400, lr=4e-3, replicas=4, seed=0)
print(f"trained 400 steps in {time.monotonic() - t0:.1f}s; "
      f"loss {np.mean(losses[:20]):.3f} -> {np.mean(losses[-20:]):.3f}")

# ## Sampling
#
# `sample` integrates the probability-flow ODE with a Heun integrator down
# the 32-step sigma ladder (80 -> 0.002). Agents are anchored at their
# poses at t_now, so a sample is a joint draw of full trajectories for
# every agent in the scene.

sc = scenarios[0]
res = sample(model, basis, model.encode_scene(sc), NoiseSchedule(steps=32), seed=7)
print("sampled positions:", res.positions.shape)

sim = scenario_with_positions(sc, res.positions)
for a_real, a_samp in zip(sc.agents, sim.agents):
    drift = np.linalg.norm(a_real.states[-1, :2] - a_samp.states[-1, :2])
    print(f"agent {a_real.agent_id}: endpoint {np.round(a_samp.states[-1, :2], 1)}, "
          f"{drift:.1f} m from the logged endpoint")

# ## Rendering
#
# The renderer produces a standalone SVG: lane corridors, trajectory fade
# trails, and oriented agent boxes at the final pose.

svg = render_scenario(sim, "/tmp/frenetsim_demo_sample.svg")
print("wrote /tmp/frenetsim_demo_sample.svg,", len(svg), "bytes")
