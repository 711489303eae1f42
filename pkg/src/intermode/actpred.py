"""Behavior-cloned keypose policy conditioned on a mode embedding.

Tokens: 4x4 patches of every view, one mode token, one gripper-state token and
one phase token. Outputs per-view position logits, three Euler-angle bin
distributions and a gripper logit.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from . import modesel, sim
from .collect import Env, Trajectory, run_policy
from .embed import Featurizer
from .render import ViewSet, candidate_grid, decode_position, encode_heatmaps
from .sim import KeyPose
from .tensor import Adam, Graph, nn, ops, param_checksum
from .tensor.engine import Node
from .tensor.serialize import checkpoint_bytes, parse_checkpoint

ROT_BINS = 72
BIN_DEG = 360.0 / ROT_BINS
GRIP_DIM = 7  # unit-frame position, gripper bit, approach direction
PHASES = 4
LOSS_TERMS = ("pos", "rot", "grip")


@dataclass(frozen=True)
class ActionPredictorConfig:
    hw: int = 32
    channels: int = 7
    n_views: int = 5
    patch: int = 4
    dim: int = 64
    heads: int = 4
    layers: int = 4
    z_dim: int = 32
    sigma_px: float = 1.5
    batch_size: int = 16
    lr: float = 1e-3

    @property
    def grid(self) -> int:
        return self.hw // self.patch

    @property
    def n_patches(self) -> int:
        return self.n_views * self.grid ** 2


# -- rotation binning --------------------------------------------------------------

def euler_bins(quat: np.ndarray) -> np.ndarray:
    """Nearest 5-degree bin per xyz Euler angle, (3,) ints in [0, 72)."""
    ang = Rotation.from_quat(quat).as_euler("xyz", degrees=True)
    return np.mod(np.rint(np.mod(ang, 360.0) / BIN_DEG), ROT_BINS).astype(np.int64)


def bins_to_quat(bins: np.ndarray) -> np.ndarray:
    q = Rotation.from_euler("xyz", np.asarray(bins, dtype=np.float64) * BIN_DEG, degrees=True).as_quat()
    return q / np.linalg.norm(q)


def gripper_features(env: Env, pose: KeyPose) -> np.ndarray:
    return np.concatenate([env.to_unit(pose.p), [float(pose.q)], pose.approach]).astype(np.float64)


def patchify(views: np.ndarray, patch: int) -> np.ndarray:
    """(B, 5, H, W, C) -> (B, 5 * (H/p) * (W/p), p * p * C), view-major then row-major."""
    b, v, h, w, c = views.shape
    n, m = h // patch, w // patch
    x = views.reshape(b, v, n, patch, m, patch, c).transpose(0, 1, 2, 4, 3, 5, 6)
    return x.reshape(b, v * n * m, patch * patch * c)


# -- network -------------------------------------------------------------------------

@dataclass
class Heads:
    pos_logits: Node  # (B, 5, H*W)
    rot_logits: Node  # (B, 3, 72)
    grip_logit: Node  # (B, 1)


class ActionPredictor:
    def __init__(self, cfg: ActionPredictorConfig, seed: int = 0):
        self.cfg = c = cfg
        self.patch_in = nn.Linear("ap.patch_in", c.patch * c.patch * c.channels, c.dim)
        self.eps_in = nn.Linear("ap.eps_in", c.z_dim, c.dim)
        self.grip_in = nn.Linear("ap.grip_in", GRIP_DIM, c.dim)
        self.tf = nn.Transformer("ap.tf", c.dim, c.heads, c.layers)
        self.heat = nn.Linear("ap.heat", c.dim, c.patch * c.patch)
        self.glob = nn.Linear("ap.glob", c.dim, 3 * ROT_BINS + 1)
        rng = np.random.default_rng([seed, 0xAC7])
        params = {}
        for m in (self.patch_in, self.eps_in, self.grip_in, self.tf, self.heat, self.glob):
            params.update(m.init(rng))
        params["ap.pos"] = (0.02 * rng.standard_normal((c.n_patches, c.dim))).astype(np.float32)
        params["ap.phase"] = (0.02 * rng.standard_normal((PHASES, c.dim))).astype(np.float32)
        self.params = params
        self.buffers = {"ap.eps_scale": np.ones((), np.float32)}

    def fit_scales(self, z: np.ndarray) -> None:
        self.buffers["ap.eps_scale"] = np.float32(max(np.sqrt(np.mean(np.square(z))), 1e-6))

    def forward(self, g: Graph, patches: np.ndarray, eps: Node | np.ndarray, grip: np.ndarray,
                phase: np.ndarray, order: np.ndarray | None = None) -> Heads:
        """``eps`` already divided by the stored scale. ``order`` permutes the patch tokens
        (with their positional rows); outputs are returned in the original order."""
        c = self.cfg
        b = patches.shape[0]
        idx = np.arange(c.n_patches) if order is None else np.asarray(order)
        tok = self.patch_in(g, g.input(patches[:, idx], "patches"))
        tok = ops.bias(tok, ops.take(g.param("ap.pos"), idx, axis=0))
        e = eps if isinstance(eps, Node) else g.input(eps, "eps")
        extra = [ops.reshape(self.eps_in(g, e), (b, 1, c.dim)),
                 ops.reshape(self.grip_in(g, g.input(grip, "grip")), (b, 1, c.dim)),
                 ops.reshape(ops.take(g.param("ap.phase"), np.asarray(phase), axis=0), (b, 1, c.dim))]
        out = self.tf(g, ops.concat([tok, *extra], axis=1))
        patch_out = ops.slice_(out, (slice(None), slice(0, c.n_patches)))
        if order is not None:
            patch_out = ops.take(patch_out, np.argsort(idx), axis=1)
        heat = self.heat(g, patch_out)  # (B, N, p*p)
        n, p = c.grid, c.patch
        heat = ops.reshape(heat, (b, c.n_views, n, n, p, p))
        heat = ops.transpose(heat, (0, 1, 2, 4, 3, 5))
        pos_logits = ops.reshape(heat, (b, c.n_views, c.hw * c.hw))
        glob = self.glob(g, ops.mean(out, axis=1))
        rot = ops.reshape(ops.slice_(glob, (slice(None), slice(0, 3 * ROT_BINS))), (b, 3, ROT_BINS))
        grip_logit = ops.slice_(glob, (slice(None), slice(3 * ROT_BINS, 3 * ROT_BINS + 1)))
        return Heads(pos_logits, rot, grip_logit)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {**{k: self.params[k] for k in sorted(self.params)},
                **{k: self.buffers[k] for k in sorted(self.buffers)}}

    def to_bytes(self) -> bytes:
        return checkpoint_bytes(self.state_dict())

    def load_bytes(self, data: bytes) -> "ActionPredictor":
        t = parse_checkpoint(data)
        for k in list(self.params) + list(self.buffers):
            if k not in t:
                raise KeyError(f"checkpoint lacks {k}")
        for k in self.params:
            self.params[k] = t[k].reshape(self.params[k].shape).astype(np.float32)
        for k in self.buffers:
            self.buffers[k] = np.float32(t[k])
        return self

    def checksum(self) -> str:
        return param_checksum(self.state_dict())


# -- targets and loss ----------------------------------------------------------------

@dataclass(frozen=True)
class Targets:
    heat: np.ndarray  # (B, 5, H*W) target distributions
    rot: np.ndarray  # (B, 3, 72) one-hot
    grip: np.ndarray  # (B, 1)


def encode_targets(unit_p: np.ndarray, quats: np.ndarray, q: np.ndarray, cfg: ActionPredictorConfig) -> Targets:
    """Raises ``ProjectionError`` when a target lies outside the views."""
    b = len(unit_p)
    heat = np.stack([encode_heatmaps(p, cfg.hw, cfg.hw, cfg.sigma_px) for p in unit_p]).reshape(b, cfg.n_views, -1)
    rot = np.zeros((b, 3, ROT_BINS))
    for i, quat in enumerate(quats):
        rot[i, np.arange(3), euler_bins(quat)] = 1.0
    return Targets(heat, rot, np.asarray(q, dtype=np.float64).reshape(b, 1))


def bc_terms(h: Heads, t: Targets) -> dict[str, Node]:
    """Per-sample (B,) loss terms: position CE summed over views, rotation CE over axes, gripper BCE."""
    return {"pos": ops.sum_(ops.cross_entropy(h.pos_logits, t.heat), axis=-1),
            "rot": ops.sum_(ops.cross_entropy(h.rot_logits, t.rot), axis=-1),
            "grip": ops.sum_(ops.bce_logits(h.grip_logit, t.grip), axis=-1)}


def bc_loss(h: Heads, t: Targets) -> tuple[Node, dict[str, float]]:
    terms = bc_terms(h, t)
    total = ops.mean(terms["pos"] + terms["rot"] + terms["grip"])
    return total, {k: float(np.mean(v.value)) for k, v in terms.items()}


# -- prediction ---------------------------------------------------------------------

@dataclass(frozen=True)
class ActionPrediction:
    heatmaps: np.ndarray  # (5, H, W), each sums to 1
    rot_logits: np.ndarray  # (3, 72)
    grip_logit: float
    unit_p: np.ndarray
    decoded: KeyPose


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


_GRID_CACHE: dict[int, np.ndarray] = {}


def _grid(n: int) -> np.ndarray:
    if n not in _GRID_CACHE:
        _GRID_CACHE[n] = candidate_grid(n)
    return _GRID_CACHE[n]


def predict(model: ActionPredictor, env: Env, views: ViewSet | np.ndarray, eps: np.ndarray,
            gripper: KeyPose, phase: int) -> ActionPrediction:
    c = model.cfg
    v = views.views if isinstance(views, ViewSet) else np.asarray(views)
    if v.shape != (c.n_views, c.hw, c.hw, c.channels):
        raise ValueError(f"views have shape {v.shape}, expected {(c.n_views, c.hw, c.hw, c.channels)}")
    g = Graph(model.params, dtype=np.float32)
    h = model.forward(g, patchify(v[None].astype(np.float32), c.patch),
                      (np.asarray(eps, dtype=np.float64) / model.buffers["ap.eps_scale"])[None],
                      gripper_features(env, gripper)[None], np.array([phase]))
    heat = _softmax(h.pos_logits.value[0].astype(np.float64)).reshape(c.n_views, c.hw, c.hw)
    rot = h.rot_logits.value[0].astype(np.float64)
    grip = float(h.grip_logit.value[0, 0])
    unit_p = decode_position(heat, _grid(c.hw))
    pose = KeyPose(env.from_unit(unit_p), bins_to_quat(rot.argmax(axis=1)), int(grip > 0.0))
    return ActionPrediction(heat, rot, grip, unit_p, pose)


# -- training data ----------------------------------------------------------------------

@dataclass
class BCData:
    """Flattened (trajectory, phase) samples."""
    views: np.ndarray  # (M, 5, H, W, C) float32
    grip: np.ndarray  # (M, GRIP_DIM)
    phase: np.ndarray  # (M,)
    traj: np.ndarray  # (M,) index into z / feats
    targets: Targets
    z: np.ndarray  # (N, z_dim)
    feats: np.ndarray  # (N, 5, feat_dim) per-view features of O_init


def build_bc_data(trajs: Sequence[Trajectory], envs: dict[str, Env], featurizer: Featurizer,
                  cfg: ActionPredictorConfig) -> BCData:
    views, grip, phase, owner, unit_p, quats, qs = [], [], [], [], [], [], []
    for i, t in enumerate(trajs):
        if t.observations is None or len(t.observations) != PHASES:
            raise ValueError(f"trajectory {i} lacks per-step observations")
        env = envs[t.object_name]
        before = [env.spec.home, *t.keyposes[:3]]
        for ph in range(PHASES):
            views.append(t.observations[ph].views.astype(np.float32))
            grip.append(gripper_features(env, before[ph]))
            phase.append(ph)
            owner.append(i)
            a = t.keyposes[ph]
            unit_p.append(env.to_unit(a.p))
            quats.append(a.R)
            qs.append(a.q)
    targets = encode_targets(np.array(unit_p), np.array(quats), np.array(qs), cfg)
    return BCData(np.stack(views), np.array(grip), np.array(phase), np.array(owner), targets,
                  np.stack([t.z.z for t in trajs]),
                  np.stack([featurizer.encode_per_view(t.init_obs) for t in trajs]))


def _subset(t: Targets, idx) -> Targets:
    return Targets(t.heat[idx], t.rot[idx], t.grip[idx])


# -- training ------------------------------------------------------------------------------

@dataclass
class BCResult:
    model: ActionPredictor
    selector: modesel.ModeSelector | None
    curve: list[dict[str, float]]

    def curve_csv(self) -> str:
        cols = ["total", *LOSS_TERMS, "elbo"]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", *cols])
        for row in self.curve:
            w.writerow([row["epoch"], *(f"{row[k]:.6g}" for k in cols)])
        return buf.getvalue()


def train_bc(data: BCData, cfg: ActionPredictorConfig, epochs: int, seed: int = 0, joint: bool = False,
             selector: modesel.ModeSelector | None = None, elbo_weight: float = 1.0,
             model: ActionPredictor | None = None) -> BCResult:
    """Pre-training (``joint=False``) feeds the ground-truth z as the mode token. Joint training
    decodes the token from the mode selector under stop-gradient and adds the ELBO to the loss."""
    if joint and selector is None:
        raise ValueError("joint training needs a pre-trained mode selector")
    model = model or ActionPredictor(cfg, seed)
    model.fit_scales(data.z)
    params = dict(model.params)
    if joint:
        params.update(selector.params)
    opt = Adam(params, lr=cfg.lr, clip_norm=10.0)
    rng = np.random.default_rng([seed, 0xBC])
    m = len(data.phase)
    curve = []
    step = 0
    if joint:
        fs_all, zs_all = selector.scale_feats(data.feats), selector.scale_z(data.z)
        tau = selector.cfg.tau_end
    for epoch in range(epochs):
        order = rng.permutation(m)
        sums = dict.fromkeys(("total", *LOSS_TERMS, "elbo"), 0.0)
        for s in range(0, m, cfg.batch_size):
            idx = order[s: s + cfg.batch_size]
            b = len(idx)
            g = Graph(params, dtype=np.float32)
            owner = data.traj[idx]
            elbo_val = 0.0
            if joint:
                noise = modesel.ElboNoise.draw(rng, b, selector.cfg, selector.cfg.use_gumbel)
                h = modesel.elbo_heads(selector, g, fs_all[owner], zs_all[owner], noise)
                terms = modesel.elbo_terms(h, g.input(zs_all[owner]), modesel.uniform_log_pi(selector.cfg.K),
                                           noise, tau)
                kl = terms["x_kl"] + terms["y_kl"] + terms["c_kl"]
                elbo_node = ops.mean(terms["recon"] + ops.scale(kl, selector.cfg.kl_weight))
                elbo_val = float(elbo_node.value)
                ratio = float(selector.buffers["ms.z_scale"] / model.buffers["ap.eps_scale"])
                eps = ops.scale(ops.stop_gradient(h.eps_hat), ratio)
            else:
                eps = data.z[owner] / model.buffers["ap.eps_scale"]
            heads = model.forward(g, patchify(data.views[idx], cfg.patch), eps, data.grip[idx], data.phase[idx])
            loss, parts = bc_loss(heads, _subset(data.targets, idx))
            if joint:
                loss = loss + ops.scale(elbo_node, elbo_weight)
            value = float(loss.value)
            if not math.isfinite(value) or value > 1e6:
                raise modesel.TrainingDiverged(f"epoch {epoch} step {step}: loss {value:.3g}, terms {parts}")
            opt.step(g.backward(loss))
            step += 1
            w = b / m
            sums["total"] += w * value
            sums["elbo"] += w * elbo_val
            for k in LOSS_TERMS:
                sums[k] += w * parts[k]
        curve.append({"epoch": epoch, **sums})
    return BCResult(model, selector if joint else None, curve)


# -- rollout ------------------------------------------------------------------------------

Policy = Callable[[int, ViewSet, sim.WorldState], KeyPose]


def learned_policy(model: ActionPredictor, env: Env, eps: np.ndarray) -> Policy:
    def policy(phase, obs, state):
        return predict(model, env, obs, eps, state.gripper, phase).decoded
    return policy


def rollout(env: Env, selector: modesel.ModeSelector, model: ActionPredictor, k: int, seed: int,
            with_steps: bool = False) -> Trajectory:
    """Four closed-loop keyposes with the mode embedding of cluster ``k`` (1..K) held fixed."""
    init_obs = env.observe(sim.init_state(env.spec), seed ^ 0x1A17)
    eps = modesel.infer_mode(selector, env.featurizer.encode_per_view(init_obs), k)
    traj = run_policy(env, learned_policy(model, env, eps), seed, f"rollout:k{k}", with_steps, needs_obs=True)
    traj.cluster_label = k
    return traj


def rollout_eps(env: Env, model: ActionPredictor, eps: np.ndarray, seed: int) -> Trajectory:
    """Rollout with an explicit mode embedding instead of a cluster index."""
    return run_policy(env, learned_policy(model, env, eps), seed, "rollout:eps", False, needs_obs=True)


def rollout_log_line(t: Trajectory, init_dof: Sequence[float]) -> str:
    return json.dumps({"object": t.object_name, "k": t.cluster_label, "seed": t.seed,
                       "success": bool(t.true_success), "filter_success": bool(t.success),
                       "valid": bool(t.valid), "mode": t.mode,
                       "dof_delta": [round(f - i, 6) for f, i in zip(t.final_dof, init_dof)]},
                      sort_keys=True)
