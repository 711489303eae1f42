"""Self-supervised trajectory collection: random play, handle grasps, GMM-adaptive resampling."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial.transform import Rotation
from sklearn.cluster import DBSCAN

from . import gmm, sim
from .embed import Featurizer, TaskEmbedding, calibrate_threshold, success_filter, task_embedding
from .render import ViewSet, normalize_frame, project_views
from .sim import KeyPose, ObjectSpec
from .tensor.serialize import load_tensor, save_tensor

log = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1
SOURCES = ("random", "grasp", "gmm")
OBS_NAMES = ("obs0", "obs1", "obs2", "obs3")


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def trajectory_seed(master: int, index: int) -> int:
    """Order-independent per-trajectory seed."""
    return splitmix64(splitmix64(master & MASK64) ^ (index & MASK64))


@dataclass(frozen=True)
class Env:
    spec: ObjectSpec
    featurizer: Featurizer = field(default_factory=Featurizer)
    hw: int = 32
    n_pts: int = sim.POINTS_PER_PART
    render_noise: float = 0.004
    render_shift: float = 0.0
    render_light: float = 0.05
    threshold: float | None = None

    def cloud(self, state: sim.WorldState, seed: int, occlude_robot: bool = True):
        return sim.render_cloud(state, occlude_robot=occlude_robot, seed=seed,
                                noise=self.render_noise, n_pts=self.n_pts, shift=self.render_shift,
                                light=self.render_light)

    def observe(self, state: sim.WorldState, seed: int, occlude_robot: bool = True) -> ViewSet:
        spec = self.spec
        cloud = normalize_frame(self.cloud(state, seed, occlude_robot), spec.scene_center, spec.scene_scale)
        return project_views(cloud, self.hw, self.hw, spec.scene_center, spec.scene_scale)

    def to_unit(self, p: np.ndarray) -> np.ndarray:
        return (np.asarray(p) - self.spec.scene_center) / self.spec.scene_scale

    def from_unit(self, p: np.ndarray) -> np.ndarray:
        return np.asarray(p) * self.spec.scene_scale + self.spec.scene_center

    def calibrated(self, n_null: int = 100, seed: int = 0) -> "Env":
        """Set the success threshold from observation pairs where nothing was done."""
        state = sim.init_state(self.spec)
        zs = []
        for i in range(n_null):
            s = trajectory_seed(seed ^ 0xCA11B, i)
            zs.append(task_embedding(self.featurizer, self.observe(state, s), self.observe(state, s + 1)))
        return replace(self, threshold=calibrate_threshold(zs))


@dataclass
class Trajectory:
    object_name: str
    seed: int
    source: str
    keyposes: list[KeyPose]
    valid: bool
    observations: list[ViewSet] | None = None
    init_obs: ViewSet | None = None
    final_obs: ViewSet | None = None
    z: TaskEmbedding | None = None
    success: bool = False
    true_success: bool = False
    mode: str = "none"
    final_dof: list[float] = field(default_factory=list)
    cluster_label: int | None = None
    attached: bool = False

    def action_vector(self) -> np.ndarray:
        """(p1, p2, R0 as axis-angle): 9 floats."""
        a = self.keyposes
        return np.concatenate([a[1].p, a[3].p, Rotation.from_quat(a[0].R).as_rotvec()])


def keyposes_from(p1: np.ndarray, p2: np.ndarray, quat: np.ndarray) -> list[KeyPose]:
    approach = Rotation.from_quat(quat).apply([0.0, 0.0, 1.0])
    p0 = p1 - sim.APPROACH_OFFSET * approach
    return [KeyPose(p0, quat, 0), KeyPose(p1, quat, 0), KeyPose(p1, quat, 1), KeyPose(p2, quat, 1)]


def keyposes_from_vector(v: np.ndarray) -> list[KeyPose]:
    v = np.asarray(v, dtype=np.float64)
    return keyposes_from(v[:3], v[3:6], Rotation.from_rotvec(v[6:9]).as_quat())


def execute(env: Env, keyposes: Sequence[KeyPose], seed: int, source: str,
            with_steps: bool = True) -> Trajectory:
    """Run one 4-keypose trajectory from the half-open state and observe it."""
    return run_policy(env, lambda phase, obs, state: keyposes[phase], seed, source, with_steps)


def run_policy(env: Env, policy, seed: int, source: str, with_steps: bool = True,
               needs_obs: bool = False) -> Trajectory:
    """Closed-loop version: ``policy(phase, obs, state) -> KeyPose``; ``obs`` is None unless rendered."""
    state = sim.init_state(env.spec)
    start = state
    rs = np.random.default_rng([seed, 0x0B5]).integers(0, 2**31, size=6)
    observations = [] if with_steps else None
    keyposes = []
    attached = False
    for phase in range(4):
        obs = None
        if with_steps or needs_obs:
            obs = env.observe(state, int(rs[phase]), occlude_robot=False)
        if with_steps:
            observations.append(obs)
        a = policy(phase, obs, state)
        keyposes.append(a)
        state = sim.step_keypose(state, a, phase)
        if phase == 2:
            attached = state.attached_part is not None
    traj = Trajectory(env.spec.name, seed, source, keyposes, state.valid, observations,
                      final_dof=[float(d) for d in state.dof], attached=attached)
    if not state.valid:
        return traj
    traj.init_obs = env.observe(start, int(rs[4]))
    traj.final_obs = env.observe(state, int(rs[5]))
    traj.z = task_embedding(env.featurizer, traj.init_obs, traj.final_obs, source=f"{source}:{seed}")
    traj.success = env.threshold is not None and success_filter(traj.z, env.threshold)
    traj.true_success = sim.dof_success(start, state)[1]
    traj.mode = sim.executed_mode(start, state)
    return traj


def _ball(rng: np.random.Generator, radius: float) -> np.ndarray:
    d = rng.standard_normal(3)
    return d / np.linalg.norm(d) * radius * rng.uniform() ** (1 / 3)


def random_sampling(env: Env, n: int, seed: int, with_steps: bool = True,
                    surface_offset: float = 0.05, reach: float = 0.5) -> list[Trajectory]:
    out = []
    state = sim.init_state(env.spec)
    for i in range(n):
        ts = trajectory_seed(seed, i)
        rng = np.random.default_rng(ts)
        cloud = env.cloud(state, int(rng.integers(2**31)))
        p1 = cloud.points[rng.integers(len(cloud))] + _ball(rng, surface_offset)
        quat = Rotation.random(random_state=rng).as_quat()
        p2 = p1 + _ball(rng, reach)
        out.append(execute(env, keyposes_from(p1, p2, quat), ts, "random", with_steps))
    return out


@dataclass(frozen=True)
class HandleCandidate:
    center: np.ndarray
    normal: np.ndarray  # outward, away from the body behind the handle
    size: int


def segment_handles(cloud: sim.ColoredPointCloud, eps: float = 0.04, min_samples: int = 4,
                    min_size: int = 12, max_fraction: float = 0.25) -> list[HandleCandidate]:
    """Small dense color/position clusters, with a local plane normal from the points around them."""
    feats = np.hstack([cloud.points, 0.5 * cloud.colors])
    labels = DBSCAN(eps=eps, min_samples=min_samples).fit_predict(feats)
    out = []
    for lab in sorted(set(labels) - {-1}):
        mask = labels == lab
        if not min_size <= mask.sum() <= max_fraction * len(cloud):
            continue
        center = cloud.points[mask].mean(axis=0)
        rest = cloud.points[~mask]
        near = rest[np.argsort(np.linalg.norm(rest - center, axis=1))[:24]]
        cov = np.cov((near - near.mean(0)).T)
        normal = np.linalg.eigh(cov)[1][:, 0]
        if normal @ (center - near.mean(0)) < 0:
            normal = -normal
        out.append(HandleCandidate(center, normal, int(mask.sum())))
    return out


def heuristic_grasp_sampling(env: Env, n: int, seed: int, noise: float = 0.02,
                             rot_noise: float = 0.1, with_steps: bool = True,
                             travel: tuple[float, float] = (0.2, 0.6)) -> list[Trajectory]:
    """Grasp a detected handle and move along +/- its normal (the normal stands in for the joint tangent)."""
    out = []
    state = sim.init_state(env.spec)
    for i in range(n):
        ts = trajectory_seed(seed, i)
        rng = np.random.default_rng(ts)
        handles = segment_handles(env.cloud(state, int(rng.integers(2**31))))
        if not handles:
            out.append(Trajectory(env.spec.name, ts, "grasp", [], False))
            continue
        h = handles[rng.integers(len(handles))]
        p1 = h.center + rng.normal(0.0, noise, 3)
        jitter = Rotation.from_rotvec(rng.normal(0.0, rot_noise, 3))
        quat = (jitter * Rotation.from_quat(sim.approach_rotation(-h.normal))).as_quat()
        sign = 1.0 if rng.uniform() < 0.5 else -1.0
        p2 = p1 + sign * h.normal * rng.uniform(*travel) + rng.normal(0.0, noise, 3)
        out.append(execute(env, keyposes_from(p1, p2, quat), ts, "grasp", with_steps))
    return out


def gmm_adaptive_round(dataset: Sequence[Trajectory], env: Env, K: int = 8, L: int = 3,
                       per_cluster_n: int = 8, seed: int = 0, with_steps: bool = True,
                       fallback_noise: float = 0.02) -> list[Trajectory]:
    """Cluster successes by task embedding, then draw equally many actions from each cluster's action GMM."""
    wins = [t for t in dataset if t.success and t.z is not None]
    if len(wins) < K:
        raise ValueError(f"need at least K={K} successful trajectories, have {len(wins)}")
    Z = np.stack([t.z.z for t in wins])
    model = gmm.fit_em(Z, K, seed=seed)
    labels = gmm.predict(model, Z)
    for t, lab in zip(wins, labels):
        t.cluster_label = int(lab)
    out = []
    index = 0
    for k in range(K):
        members = np.stack([t.action_vector() for t, lab in zip(wins, labels) if lab == k] or [np.zeros(9)])
        n_members = int(np.sum(labels == k))
        rng = np.random.default_rng([seed, k, 0xAC7])
        if n_members >= max(L, 2):
            draws = gmm.sample(gmm.fit_em(members, L, seed=seed + k), per_cluster_n, seed=int(rng.integers(2**31)))
        elif n_members > 0:
            picks = members[rng.integers(n_members, size=per_cluster_n)]
            draws = picks + rng.normal(0.0, fallback_noise, picks.shape)
        else:
            continue
        for v in draws:
            ts = trajectory_seed(seed ^ 0x6A11, index)
            index += 1
            traj = execute(env, keyposes_from_vector(v), ts, "gmm", with_steps)
            traj.cluster_label = k
            out.append(traj)
    return out


@dataclass
class Dataset:
    manifest: dict
    records: list[Trajectory]


def filter_agreement(trajs: Sequence[Trajectory]) -> float:
    valid = [t for t in trajs if t.valid]
    if not valid:
        return float("nan")
    return float(np.mean([t.success == t.true_success for t in valid]))


@dataclass(frozen=True)
class CollectConfig:
    quota: int = 150
    n_random: int = 200
    n_grasp: int = 200
    K: int = 8
    L: int = 3
    per_cluster_n: int = 8
    max_rounds: int = 6
    n_null: int = 100
    seed: int = 0


def collect_object(env: Env, cfg: CollectConfig, with_steps: bool = True) -> tuple[list[Trajectory], dict]:
    """Alternate the samplers until the quota of filter-passed trajectories is met."""
    if env.threshold is None:
        env = env.calibrated(cfg.n_null, cfg.seed)
    seen: list[Trajectory] = []
    wins: list[Trajectory] = []
    for rnd in range(cfg.max_rounds):
        base = trajectory_seed(cfg.seed, 1000 + rnd)
        batch = random_sampling(env, cfg.n_random, base ^ 1, with_steps)
        batch += heuristic_grasp_sampling(env, cfg.n_grasp, base ^ 2, with_steps=with_steps)
        if sum(t.success for t in wins + batch) >= cfg.K:
            batch += gmm_adaptive_round(wins + [t for t in batch if t.success], env, cfg.K, cfg.L,
                                        cfg.per_cluster_n, base ^ 3, with_steps)
        seen += batch
        wins += [t for t in batch if t.valid and t.success]
        if len(wins) >= cfg.quota:
            break
    else:
        log.warning("%s: quota %d not reached (%d successes)", env.spec.name, cfg.quota, len(wins))
    kept = wins[: cfg.quota]
    stats = {
        "threshold": env.threshold,
        "attempted": len(seen),
        "valid": sum(t.valid for t in seen),
        "filter_agreement": filter_agreement(seen),
        "counts": {s: sum(t.source == s for t in kept) for s in SOURCES},
    }
    return kept, stats


def build_dataset(specs: Sequence[ObjectSpec], cfg: CollectConfig, out_dir: str | Path | None = None,
                  featurizer_seed: int = 0, hw: int = 32) -> Dataset:
    featurizer = Featurizer(featurizer_seed)
    records: list[Trajectory] = []
    objects = []
    for spec in specs:
        env = Env(spec, featurizer, hw=hw)
        kept, stats = collect_object(env, replace(cfg, seed=trajectory_seed(cfg.seed, len(objects))))
        records += kept
        objects.append({"name": spec.name, "spec": spec.to_json(), **stats})
    manifest = {
        "featurizer_seed": featurizer_seed,
        "featurizer_sha256": featurizer.checksum(),
        "hw": hw,
        "seed": cfg.seed,
        "quota": cfg.quota,
        "objects": objects,
        "counts": {s: sum(t.source == s for t in records) for s in SOURCES},
        "records": [],
    }
    ds = Dataset(manifest, records)
    if out_dir is not None:
        save_dataset(ds, out_dir)
    return ds


def _record_dir(i: int, t: Trajectory) -> str:
    return f"records/{t.object_name}/{i:05d}"


def save_dataset(ds: Dataset, out_dir: str | Path) -> None:
    root = Path(out_dir)
    entries = []
    for i, t in enumerate(ds.records):
        rel = _record_dir(i, t)
        d = root / rel
        d.mkdir(parents=True, exist_ok=True)
        meta = {
            "object": t.object_name, "seed": t.seed, "source": t.source,
            "keyposes": [k.to_json() for k in t.keyposes],
            "z": t.z.z.tolist(), "success": t.success, "true_success": t.true_success,
            "mode": t.mode, "final_dof": t.final_dof, "cluster_label": t.cluster_label,
            "center": t.init_obs.center.tolist(), "scale": t.init_obs.scale,
        }
        (d / "keyposes.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        save_tensor(d / "init.aimt", t.init_obs.views)
        save_tensor(d / "final.aimt", t.final_obs.views)
        for name, obs in zip(OBS_NAMES, t.observations or []):
            save_tensor(d / f"{name}.aimt", obs.views)
        entries.append({"dir": rel, "object": t.object_name, "source": t.source})
    ds.manifest["records"] = entries
    (root / "manifest.json").write_text(json.dumps(ds.manifest, indent=1, sort_keys=True) + "\n",
                                        encoding="utf-8")


def load_dataset(root: str | Path, with_steps: bool = True) -> Dataset:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    records = []
    for entry in manifest["records"]:
        d = root / entry["dir"]
        meta = json.loads((d / "keyposes.json").read_text(encoding="utf-8"))
        center, scale = np.array(meta["center"]), float(meta["scale"])

        def vs(name):
            return ViewSet(load_tensor(d / f"{name}.aimt"), center, scale)

        obs = [vs(n) for n in OBS_NAMES] if with_steps and (d / "obs0.aimt").exists() else None
        records.append(Trajectory(
            meta["object"], int(meta["seed"]), meta["source"],
            [KeyPose.from_json(k) for k in meta["keyposes"]], True, obs, vs("init"), vs("final"),
            TaskEmbedding(np.array(meta["z"]), f"{meta['source']}:{meta['seed']}"),
            bool(meta["success"]), bool(meta["true_success"]), meta["mode"],
            list(meta["final_dof"]), meta["cluster_label"]))
    return Dataset(manifest, records)
