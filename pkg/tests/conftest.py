"""Shared fixtures: the desk-scale trained model, cached on disk.

The behavioral acceptance checks need one model trained well enough to
sample plausible traffic. Training it takes minutes, so the checkpoint
is cached under tests/.cache/ keyed by a hash of the full recipe; any
change to the recipe retrains instead of silently reusing stale weights.
The recorded wall-clock training time rides along so time budgets can be
asserted even on cached runs.
"""

import hashlib
import json
import time
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest

from frenetsim import synth
from frenetsim.denoiser import (
    Denoiser,
    DenoiserConfig,
    fit_pca,
    load_checkpoint,
    save_checkpoint,
    scenario_windows,
)
from frenetsim.diffusion import train

DESK_RECIPE = {
    "map_spec": {"kind": "mixed", "lanes": 3},
    "count": 2000,
    "agents": [2, 3],
    "data_seed": 7,
    "holdout": 100,
    "k": 16,
    "d": 64,
    "blocks": 3,
    "steps": 40000,
    "lr": 3e-3,
    "replicas": 4,
    "train_seed": 0,
}

CACHE_DIR = Path(__file__).resolve().parent / ".cache"


def desk_dataset():
    scenarios, _ = synth.generate_dataset(
        DESK_RECIPE["map_spec"],
        DESK_RECIPE["count"],
        seed=DESK_RECIPE["data_seed"],
        agents=tuple(DESK_RECIPE["agents"]),
    )
    split = DESK_RECIPE["count"] - DESK_RECIPE["holdout"]
    return scenarios[:split], scenarios[split:]


@pytest.fixture(scope="session")
def desk_model():
    tag = hashlib.sha256(
        json.dumps(DESK_RECIPE, sort_keys=True).encode()
    ).hexdigest()[:10]
    ckpt_dir = CACHE_DIR / f"desk-{tag}"
    meta_path = ckpt_dir / "fixture_meta.json"
    train_set, held_out = desk_dataset()
    if meta_path.exists():
        model, basis = load_checkpoint(ckpt_dir)
        train_seconds = json.loads(meta_path.read_text())["train_seconds"]
    else:
        windows = np.vstack([scenario_windows(sc)[0] for sc in train_set])
        basis = fit_pca(windows, DESK_RECIPE["k"])
        model = Denoiser.init(
            DESK_RECIPE["train_seed"],
            DenoiserConfig(
                d=DESK_RECIPE["d"], k=DESK_RECIPE["k"], n_blocks=DESK_RECIPE["blocks"]
            ),
        )
        start = time.monotonic()
        train(
            model,
            basis,
            train_set,
            steps=DESK_RECIPE["steps"],
            lr=DESK_RECIPE["lr"],
            replicas=DESK_RECIPE["replicas"],
            seed=DESK_RECIPE["train_seed"],
        )
        train_seconds = time.monotonic() - start
        CACHE_DIR.mkdir(exist_ok=True)
        save_checkpoint(ckpt_dir, model, basis)
        meta_path.write_text(
            json.dumps({"train_seconds": train_seconds, "recipe": DESK_RECIPE}, indent=1)
        )
    return SimpleNamespace(
        model=model,
        basis=basis,
        train_set=train_set,
        held_out=held_out,
        train_seconds=train_seconds,
        ckpt_dir=str(ckpt_dir),
    )
