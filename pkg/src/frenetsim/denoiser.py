"""Trajectory denoiser: PCA embedding + relative attention over the scene.

The denoised variable is one PCA coefficient vector per agent, encoding
the agent's full 91-step position window expressed in that agent's frame
at t_now. Everything the network sees is a relative feature (offsets and
heading deltas between anchor poses, rigid-invariant per-point polyline
profiles), so rigidly moving the world leaves outputs unchanged.

Preconditioning follows EDM: D(x; sigma) = c_skip x + c_out F(c_in x,
c_noise), with a zero-initialized head so an untrained model is the
identity at small sigma. The lane tower (MiniPointNet + lane-lane
attention) never sees agents, so its features are computed once per
scenario and reused while agents move or replan.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import grad as G
from .scene import (
    AgentState,
    AgentTrack,
    inverse_transform_points,
    relative_feature,
    transform_points,
)

SIGMA_MIN = 0.002
SIGMA_MAX = 80.0
RHO = 7.0

_NEG_INF = -1e9
_CONN = {"none": 0, "predecessor": 1, "successor": 2, "left_neighbor": 3, "right_neighbor": 4}


def c_skip(sigma, sigma_data):
    sigma = np.asarray(sigma, float)
    return sigma_data**2 / (sigma**2 + sigma_data**2)


def c_out(sigma, sigma_data):
    sigma = np.asarray(sigma, float)
    return sigma * sigma_data / np.sqrt(sigma**2 + sigma_data**2)


def c_in(sigma, sigma_data):
    sigma = np.asarray(sigma, float)
    return 1.0 / np.sqrt(sigma**2 + sigma_data**2)


def c_noise(sigma):
    return np.log(np.asarray(sigma, float)) / 4.0


def sigma_features(sigma):
    """Four-octave Fourier features of the log noise level, shape (A, 8).

    A single log-sigma scalar is too weak a conditioning signal: the
    residual the network must produce changes slope like 1/sigma, so the
    conditioning path needs enough resolution in sigma to gate that.
    """
    u = c_noise(sigma)
    cols = []
    for j in range(4):
        cols.append(np.sin((2.0**j) * np.pi * u))
        cols.append(np.cos((2.0**j) * np.pi * u))
    return np.stack(cols, axis=-1)


def loss_weight(sigma, sigma_data):
    sigma = np.asarray(sigma, float)
    return (sigma**2 + sigma_data**2) / (sigma * sigma_data) ** 2


# ---------------------------------------------------------------------------
# PCA basis


@dataclass(frozen=True)
class PcaBasis:
    """Orthonormal top-k basis plus a per-component whitening scale.

    Raw PCA coefficients span orders of magnitude across components; the
    scale vector maps them to unit-ish variance so one sigma ladder fits
    every component. decode(encode(w)) is still plain projection.
    """

    mean: np.ndarray  # (dim,)
    components: np.ndarray  # (k, dim), orthonormal rows
    scale: np.ndarray  # (k,)

    @property
    def k(self) -> int:
        return self.components.shape[0]

    @property
    def window(self) -> int:
        return self.mean.size // 2

    def encode(self, windows) -> np.ndarray:
        w = np.asarray(windows, float)
        flat = w.reshape(w.shape[:-2] + (-1,))
        return (flat - self.mean) @ self.components.T / self.scale

    def decode(self, coeffs) -> np.ndarray:
        z = np.asarray(coeffs, float)
        flat = (z * self.scale) @ self.components + self.mean
        return flat.reshape(z.shape[:-1] + (self.window, 2))

    def decode_on_tape(self, z: G.Tensor) -> G.Tensor:
        """(A, k) coefficients -> (A, T, 2) agent-frame positions, on tape."""
        a = z.data.shape[0]
        flat = G.add(G.matmul(G.mul(z, self.scale), self.components), self.mean)
        return G.reshape(flat, (a, self.window, 2))


def fit_pca(windows, k: int) -> PcaBasis:
    """Top-k PCA of flattened (T,2) windows with whitening scales."""
    w = np.asarray(windows, float)
    flat = w.reshape(len(w), -1)
    if k > flat.shape[1]:
        raise ValueError(f"k={k} exceeds dimension {flat.shape[1]}")
    if len(flat) < k:
        raise ValueError(f"need >= {k} samples, got {len(flat)}")
    mean = flat.mean(axis=0)
    centered = flat - mean
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:k]
    coeffs = centered @ components.T
    scale = np.maximum(coeffs.std(axis=0), 1e-8)
    return PcaBasis(mean, components, scale)


def agent_window(track: AgentTrack, t_now: int) -> np.ndarray:
    """Positions of the whole track in the agent's frame at t_now."""
    return transform_points(track.states[:, :2], track.state_at(t_now))


def scenario_windows(scenario):
    """Per-agent (T,2) agent-frame windows plus their anchor poses."""
    anchors = [a.state_at(scenario.t_now) for a in scenario.agents]
    wins = np.stack([agent_window(a, scenario.t_now) for a in scenario.agents])
    return wins, anchors


def window_to_track(window, anchor: AgentState, agent_id=0, extent=(4.8, 2.0)) -> AgentTrack:
    """Agent-frame positions back to a global AgentTrack; headings from motion."""
    pts = inverse_transform_points(window, anchor)
    step = np.diff(pts, axis=0)
    heading = np.empty(len(pts))
    h = anchor.heading
    for i in range(len(step)):
        if np.hypot(step[i, 0], step[i, 1]) > 1e-6:
            h = float(np.arctan2(step[i, 1], step[i, 0]))
        heading[i] = h
    heading[-1] = heading[-2] if len(pts) > 1 else h
    return AgentTrack(agent_id, np.column_stack([pts, heading]), extent)


# ---------------------------------------------------------------------------
# scene tensors (pure geometry, parameter-free, cacheable per scenario)


def lane_anchor(polyline) -> AgentState:
    pts = polyline.points
    centroid = pts.mean(axis=0)
    direction = pts[-1] - pts[0]
    return AgentState(centroid[0], centroid[1], np.arctan2(direction[1], direction[0]))


def _point_profile(polyline, p_max: int) -> np.ndarray:
    """Rigid-invariant per-point features: (u, v, |p - centroid|, width, type one-hot)."""
    anchor = lane_anchor(polyline)
    local = transform_points(polyline.points, anchor)
    dist = np.hypot(local[:, 0], local[:, 1])
    onehot = np.zeros((len(local), 3))
    onehot[:, ("driving", "shoulder", "edge").index(polyline.lane_type)] = 1.0
    feats = np.column_stack([local, dist, np.full(len(local), polyline.width), onehot])
    out = np.zeros((p_max, 7))
    out[: len(local)] = feats
    return out


def _rel4(pose_i: AgentState, pose_j: AgentState):
    f = relative_feature(pose_i, pose_j)
    return (f.dx, f.dy, f.cos_dh, f.sin_dh)


@dataclass(frozen=True)
class SceneTensors:
    """Parameter-free geometry tables feeding the denoiser."""

    point_feats: np.ndarray  # (M, P, 7)
    point_mask: np.ndarray  # (M, P) 1 = real point
    rel_mm: np.ndarray  # (M, M, 9): rel4 + connectivity one-hot
    rel_aa: np.ndarray  # (A, A, 4)
    rel_al: np.ndarray  # (A, M, 4)
    anchors: tuple = field(default=())  # per-agent AgentState at t_now


def scene_tensors(scenario) -> SceneTensors:
    polys = scenario.polylines
    m = len(polys)
    p_max = max(len(p.points) for p in polys)
    point_feats = np.stack([_point_profile(p, p_max) for p in polys])
    point_mask = np.zeros((m, p_max))
    for i, p in enumerate(polys):
        point_mask[i, : len(p.points)] = 1.0

    lane_poses = [lane_anchor(p) for p in polys]
    idx = {p.id: i for i, p in enumerate(polys)}
    conn = np.zeros((m, m), dtype=int)  # 0 = none
    for src, dst, rel in scenario.graph.edges:
        conn[idx[src], idx[dst]] = _CONN[rel]
    rel_mm = np.zeros((m, m, 9))
    for i in range(m):
        for j in range(m):
            rel_mm[i, j, :4] = _rel4(lane_poses[i], lane_poses[j])
            rel_mm[i, j, 4 + conn[i, j]] = 1.0

    anchors = [a.state_at(scenario.t_now) for a in scenario.agents]
    a = len(anchors)
    rel_aa = np.zeros((a, a, 4))
    rel_al = np.zeros((a, m, 4))
    for i in range(a):
        for j in range(a):
            rel_aa[i, j] = _rel4(anchors[i], anchors[j])
        for j in range(m):
            rel_al[i, j] = _rel4(anchors[i], lane_poses[j])
    return SceneTensors(point_feats, point_mask, rel_mm, rel_aa, rel_al, tuple(anchors))


@dataclass(frozen=True)
class SceneEncoding:
    """Frozen lane-tower outputs plus the relative tables.

    lane_feats[b] is the lane feature matrix consumed by agent-lane
    attention in block b; the map half never changes while agents move.
    """

    lane_feats: tuple  # n_blocks arrays of (M, d)
    rel_mm: np.ndarray
    rel_aa: np.ndarray
    rel_al: np.ndarray
    anchors: tuple = ()


# ---------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class DenoiserConfig:
    d: int = 64
    k: int = 16
    n_blocks: int = 3
    sigma_data: float = 1.0


def _linear_init(rng, n_in, n_out):
    return rng.normal(0.0, 1.0 / np.sqrt(n_in), (n_in, n_out))


class Denoiser:
    """Relative-attention denoiser over per-agent PCA coefficients."""

    def __init__(self, params: dict, config: DenoiserConfig):
        self.params = params
        self.config = config

    # -- construction ------------------------------------------------------

    @staticmethod
    def init(seed: int = 0, config: DenoiserConfig = DenoiserConfig()) -> "Denoiser":
        rng = np.random.default_rng(seed)
        d, k = config.d, config.k
        p = {}

        def mlp(prefix, n_in, n_hidden, n_out):
            p[f"{prefix}.w1"] = _linear_init(rng, n_in, n_hidden)
            p[f"{prefix}.b1"] = np.zeros(n_hidden)
            p[f"{prefix}.w2"] = _linear_init(rng, n_hidden, n_out)
            p[f"{prefix}.b2"] = np.zeros(n_out)

        def attention(prefix, rel_dim):
            for w in ("wq", "wk", "wv"):
                p[f"{prefix}.{w}"] = _linear_init(rng, d, d)
            mlp(f"{prefix}.relk", rel_dim, d, d)
            mlp(f"{prefix}.relv", rel_dim, d, d)
            p[f"{prefix}.ln_g"] = np.ones(d)
            p[f"{prefix}.ln_b"] = np.zeros(d)

        mlp("point", 7, d, d)
        mlp("embed", k + 1, d, d)
        for b in range(config.n_blocks):
            attention(f"ll{b}", 9)
            attention(f"al{b}", 4)
            attention(f"aa{b}", 4)
            mlp(f"ffn{b}", d, 2 * d, d)
            p[f"ffn{b}.ln_g"] = np.ones(d)
            p[f"ffn{b}.ln_b"] = np.zeros(d)
            # noise-level feature modulation (scale and shift per block);
            # zero-init so modulation starts as the identity
            p[f"film{b}.wg"] = np.zeros((8, d))
            p[f"film{b}.bg"] = np.zeros(d)
            p[f"film{b}.wb"] = np.zeros((8, d))
            p[f"film{b}.bb"] = np.zeros(d)
        # noise-gated linear path straight from the scaled input to the
        # output; lets the network express the steep input slope the
        # optimal residual needs at small noise levels without pushing it
        # through the normalized feature stream
        p["gate.w1"] = _linear_init(rng, 8, 16)
        p["gate.b1"] = np.zeros(16)
        p["gate.w2"] = np.zeros((16, k))  # gate starts at exactly 1
        p["gate.b2"] = np.zeros(k)
        p["lin.w"] = np.zeros((k, k))
        p["head.w"] = np.zeros((d, k))  # zero head: D = c_skip x at init
        p["head.b"] = np.zeros(k)
        params = {name: G.Tensor(v, requires_grad=True) for name, v in p.items()}
        return Denoiser(params, config)

    def set_trainable(self, flag: bool):
        for t in self.params.values():
            t.requires_grad = flag

    # -- building blocks ----------------------------------------------------

    def _mlp(self, x, prefix):
        p = self.params
        h = G.relu(G.add(G.matmul(x, p[f"{prefix}.w1"]), p[f"{prefix}.b1"]))
        return G.add(G.matmul(h, p[f"{prefix}.w2"]), p[f"{prefix}.b2"])

    def _rel_mlp(self, rel, prefix):
        nq, nk, f = rel.shape
        out = self._mlp(G.Tensor(rel.reshape(nq * nk, f)), prefix)
        return G.reshape(out, (nq, nk, self.config.d))

    def _attention(self, q_feats, kv_feats, rel, prefix, add_mask=None):
        """Single-head relative attention with residual + layernorm.

        scores_ij = q_i . (k_j + relk(r_ij)) / sqrt(d);
        out_i = sum_j softmax_j(scores)_ij (v_j + relv(r_ij)).
        """
        p = self.params
        d = self.config.d
        q = G.matmul(q_feats, p[f"{prefix}.wq"])  # (Nq, d)
        k = G.matmul(kv_feats, p[f"{prefix}.wk"])  # (Nk, d)
        v = G.matmul(kv_feats, p[f"{prefix}.wv"])
        relk = self._rel_mlp(rel, f"{prefix}.relk")  # (Nq, Nk, d)
        relv = self._rel_mlp(rel, f"{prefix}.relv")
        nq, nk = rel.shape[:2]
        keys = G.add(G.reshape(k, (1, nk, d)), relk)
        scores = G.mul(
            G.tsum(G.mul(G.reshape(q, (nq, 1, d)), keys), axis=2), 1.0 / np.sqrt(d)
        )
        if add_mask is not None:
            scores = G.add(scores, add_mask)
        attn = G.softmax(scores, axis=1)  # (Nq, Nk)
        vals = G.add(G.reshape(v, (1, nk, d)), relv)
        pooled = G.tsum(G.mul(G.reshape(attn, (nq, nk, 1)), vals), axis=1)
        return G.layernorm(
            G.add(q_feats, pooled), p[f"{prefix}.ln_g"], p[f"{prefix}.ln_b"]
        )

    def _pointnet(self, st: SceneTensors):
        m, pmax, f = st.point_feats.shape
        per_point = self._mlp(G.Tensor(st.point_feats.reshape(m * pmax, f)), "point")
        per_point = G.reshape(per_point, (m, pmax, self.config.d))
        gate = (1.0 - st.point_mask[:, :, None]) * _NEG_INF
        return G.tmax(G.add(per_point, gate), axis=1)  # masked max-pool

    def lane_tower(self, st: SceneTensors):
        """Per-block lane features; agent-independent, so cacheable."""
        feats = self._pointnet(st)
        out = []
        for b in range(self.config.n_blocks):
            feats = self._attention(feats, feats, st.rel_mm, f"ll{b}")
            out.append(feats)
        return out

    def encode_scene(self, scenario) -> SceneEncoding:
        """Freeze the lane tower for reuse across denoiser calls."""
        st = scene_tensors(scenario)
        with G.no_grad():
            lane_feats = tuple(t.data for t in self.lane_tower(st))
        return SceneEncoding(lane_feats, st.rel_mm, st.rel_aa, st.rel_al, st.anchors)

    def refresh_agents(self, scenario, enc: SceneEncoding) -> SceneEncoding:
        """New agent tables (anchors moved), same frozen lane tower."""
        st = scene_tensors(scenario)
        return SceneEncoding(enc.lane_feats, enc.rel_mm, st.rel_aa, st.rel_al, st.anchors)

    # -- forward -------------------------------------------------------------

    def forward(self, x, scene, sigma, aa_mask=None):
        """Preconditioned denoise of (A, k) coefficients at noise level sigma.

        sigma: scalar or per-row (A,); scene: SceneEncoding (frozen lanes)
        or SceneTensors (lane tower on tape, for training); aa_mask:
        additive (A, A) mask for agent-agent attention (replica batching).
        """
        cfg = self.config
        x = x if isinstance(x, G.Tensor) else G.Tensor(x)
        if not np.all(np.isfinite(x.data)):
            raise ValueError("NaN or inf in denoiser input")
        a = x.data.shape[0]
        sig = np.broadcast_to(np.asarray(sigma, float), (a,)).astype(float)
        if np.any(sig <= 0):
            raise ValueError("sigma must be positive")

        if isinstance(scene, SceneEncoding):
            lane_feats = [G.Tensor(f) for f in scene.lane_feats]
            rel_aa, rel_al = scene.rel_aa, scene.rel_al
        else:
            lane_feats = self.lane_tower(scene)
            rel_aa, rel_al = scene.rel_aa, scene.rel_al

        cin = c_in(sig, cfg.sigma_data)[:, None]
        cnoise = c_noise(sig)[:, None]
        phi = G.Tensor(sigma_features(sig))  # (A, 8)
        x_in = G.mul(x, cin)
        inp = G.concat([x_in, G.Tensor(cnoise)], axis=1)
        feats = self._mlp(inp, "embed")  # (A, d)
        p = self.params
        for b in range(cfg.n_blocks):
            gamma = G.add(G.matmul(phi, p[f"film{b}.wg"]), p[f"film{b}.bg"])
            beta = G.add(G.matmul(phi, p[f"film{b}.wb"]), p[f"film{b}.bb"])
            feats = G.add(G.mul(feats, G.add(gamma, 1.0)), beta)
            feats = self._attention(feats, lane_feats[b], rel_al, f"al{b}")
            feats = self._attention(feats, feats, rel_aa, f"aa{b}", add_mask=aa_mask)
            feats = G.layernorm(
                G.add(feats, self._mlp(feats, f"ffn{b}")),
                p[f"ffn{b}.ln_g"],
                p[f"ffn{b}.ln_b"],
            )
        gate = G.add(self._mlp(phi, "gate"), 1.0)  # (A, k), exactly 1 at init
        raw = G.add(
            G.add(G.matmul(feats, p["head.w"]), p["head.b"]),
            G.mul(G.matmul(x_in, p["lin.w"]), gate),
        )
        cskip = c_skip(sig, cfg.sigma_data)[:, None]
        cout = c_out(sig, cfg.sigma_data)[:, None]
        return G.add(G.mul(x, cskip), G.mul(raw, cout))


def denoise(model: Denoiser, x, enc, sigma):
    """Functional wrapper; returns plain (A, k) ndarray."""
    with G.no_grad():
        return model.forward(x, enc, sigma).data


# ---------------------------------------------------------------------------
# checkpoint I/O: JSON manifest {name -> shape} + concatenated '<f8' blobs


def save_tensors(named: dict, manifest_path, blob_path) -> None:
    manifest = {name: list(np.asarray(v).shape) for name, v in named.items()}
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, indent=1)
    with open(blob_path, "wb") as f:
        for name in manifest:
            f.write(np.ascontiguousarray(named[name], dtype="<f8").tobytes())


def load_tensors(manifest_path, blob_path) -> dict:
    with open(manifest_path) as f:
        manifest = json.load(f)
    out = {}
    with open(blob_path, "rb") as f:
        for name, shape in manifest.items():
            n = int(np.prod(shape)) if shape else 1
            buf = f.read(n * 8)
            if len(buf) != n * 8:
                raise ValueError(f"checkpoint blob truncated at tensor {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
        if f.read(1):
            raise ValueError("checkpoint blob has trailing bytes")
    return out


def save_checkpoint(dirpath, model: Denoiser, basis: PcaBasis) -> None:
    os.makedirs(dirpath, exist_ok=True)
    save_tensors(
        {name: t.data for name, t in model.params.items()},
        os.path.join(dirpath, "manifest.json"),
        os.path.join(dirpath, "params.bin"),
    )
    save_tensors(
        {"mean": basis.mean, "components": basis.components, "scale": basis.scale},
        os.path.join(dirpath, "pca_manifest.json"),
        os.path.join(dirpath, "pca.bin"),
    )
    cfg = model.config
    meta = {"d": cfg.d, "k": cfg.k, "n_blocks": cfg.n_blocks, "sigma_data": cfg.sigma_data}
    with open(os.path.join(dirpath, "meta.json"), "w") as f:
        json.dump(meta, f, indent=1)


def load_checkpoint(dirpath):
    with open(os.path.join(dirpath, "meta.json")) as f:
        meta = json.load(f)
    config = DenoiserConfig(**meta)
    raw = load_tensors(
        os.path.join(dirpath, "manifest.json"), os.path.join(dirpath, "params.bin")
    )
    params = {name: G.Tensor(v) for name, v in raw.items()}
    pca_raw = load_tensors(
        os.path.join(dirpath, "pca_manifest.json"), os.path.join(dirpath, "pca.bin")
    )
    basis = PcaBasis(pca_raw["mean"], pca_raw["components"], pca_raw["scale"])
    return Denoiser(params, config), basis
