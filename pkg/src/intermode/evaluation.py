"""Sample success rates, per-cluster mode statistics and mode grounding (UCB1, CEM)."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import actpred, modesel, sim
from .collect import Env, Trajectory, random_sampling, trajectory_seed

log = logging.getLogger(__name__)

# (env, cluster k in 1..K, seed) -> trajectory
Sampler = Callable[[Env, int, int], Trajectory]
UCB_C = 0.35
NO_PULL = -1
SPLITS = ("seen", "unseen-instance", "unseen-category")


def model_sampler(selector: modesel.ModeSelector, model: actpred.ActionPredictor) -> Sampler:
    def sample(env, k, seed):
        return actpred.rollout(env, selector, model, k, seed)
    return sample


def random_sampler(env: Env, k: int, seed: int) -> Trajectory:
    """Data-collection baseline: one random-play trajectory (ignores k)."""
    return random_sampling(env, 1, seed, with_steps=False)[0]


# -- SSR ---------------------------------------------------------------------------------

@dataclass
class SsrRow:
    object: str
    split: str
    successes: int
    samples: int

    @property
    def ssr(self) -> float:
        return self.successes / self.samples if self.samples else 0.0


@dataclass
class SsrReport:
    rows: list[SsrRow]

    @property
    def successes(self) -> int:
        return sum(r.successes for r in self.rows)

    @property
    def samples(self) -> int:
        return sum(r.samples for r in self.rows)

    @property
    def ssr(self) -> float:
        return self.successes / self.samples if self.samples else 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["object", "split", "successes", "samples", "ssr"])
        for r in self.rows:
            w.writerow([r.object, r.split, r.successes, r.samples, f"{r.ssr:.6f}"])
        w.writerow(["all", "aggregate", self.successes, self.samples, f"{self.ssr:.6f}"])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"aggregate": {"successes": self.successes, "samples": self.samples, "ssr": self.ssr},
                           "objects": [{"object": r.object, "split": r.split, "successes": r.successes,
                                        "samples": r.samples, "ssr": r.ssr} for r in self.rows]},
                          indent=2, sort_keys=True)


def eval_ssr(sampler: Sampler, envs: Sequence[Env], n_per_object: int, seed: int = 0, K: int = 8,
             splits: dict[str, str] | None = None) -> SsrReport:
    """Each rollout draws k uniformly from 1..K; success is the 30%-of-range DoF rule."""
    rows = []
    for j, env in enumerate(envs):
        wins = 0
        for i in range(n_per_object):
            s = trajectory_seed(seed ^ (0x55 << 8) ^ j, i)
            k = 1 + int(np.random.default_rng(s).integers(K))
            wins += bool(sampler(env, k, s).true_success)
        split = (splits or {}).get(env.spec.name, "seen")
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        rows.append(SsrRow(env.spec.name, split, wins, n_per_object))
    return SsrReport(rows)


# -- per-cluster modes ----------------------------------------------------------------

@dataclass
class ClusterModes:
    k: int
    histogram: dict[str, int]

    @property
    def n(self) -> int:
        return sum(self.histogram.values())

    @property
    def dominant(self) -> str:
        """Most frequent executed mode other than "none"; "none" only if nothing moved."""
        moved = {m: c for m, c in self.histogram.items() if m != "none" and c > 0}
        if not moved:
            return "none"
        return min(moved, key=lambda m: (-moved[m], m))

    @property
    def dominant_ssr(self) -> float:
        d = self.dominant
        return 0.0 if d == "none" or not self.n else self.histogram[d] / self.n


@dataclass
class ModeSsrReport:
    object: str
    clusters: list[ClusterModes]

    def ranking(self) -> list[int]:
        return [c.k for c in sorted(self.clusters, key=lambda c: (-c.dominant_ssr, c.k))]

    def distinct_dominant_modes(self) -> set[str]:
        return {c.dominant for c in self.clusters if c.dominant != "none"}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["object", "cluster", "samples", "dominant_mode", "dominant_ssr", "histogram"])
        for c in self.clusters:
            w.writerow([self.object, c.k, c.n, c.dominant, f"{c.dominant_ssr:.6f}",
                        json.dumps(dict(sorted(c.histogram.items())))])
        return buf.getvalue()


def eval_mode_ssr(sampler: Sampler, env: Env, n_per_cluster: int, K: int = 8, seed: int = 0) -> ModeSsrReport:
    clusters = []
    for k in range(1, K + 1):
        modes = Counter()
        for i in range(n_per_cluster):
            modes[sampler(env, k, trajectory_seed(seed ^ (k << 16), i)).mode] += 1
        clusters.append(ClusterModes(k, dict(modes)))
    return ModeSsrReport(env.spec.name, clusters)


# -- grounding ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GroundingTarget:
    part: int
    goal: float
    tol: float

    @classmethod
    def for_part(cls, spec: sim.ObjectSpec, part: int, goal: float, tol_frac: float = 0.15) -> "GroundingTarget":
        return cls(part, goal, tol_frac * spec.parts[part].span)

    def reward(self, final_dof: Sequence[float]) -> float:
        return float(abs(final_dof[self.part] - self.goal) < self.tol)

    def reachable(self, spec: sim.ObjectSpec) -> bool:
        p = spec.parts[self.part]
        return p.d_min - self.tol < self.goal < p.d_max + self.tol


@dataclass
class GroundingRun:
    arms: int
    pulls: list[int] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)

    def _pulled(self) -> tuple[np.ndarray, np.ndarray]:
        a = np.asarray(self.pulls, dtype=int)
        keep = a != NO_PULL
        return a[keep], np.asarray(self.rewards, dtype=np.float64)[keep]

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self._pulled()[0], minlength=self.arms)

    @property
    def arm_means(self) -> np.ndarray:
        a, r = self._pulled()
        sums = np.bincount(a, weights=r, minlength=self.arms)
        return np.divide(sums, self.counts, out=np.zeros(self.arms), where=self.counts > 0)

    @property
    def best_arm(self) -> int:
        """Most-pulled arm (0-based); ties go to the lower index."""
        return int(np.argmax(self.counts))

    def mean_reward(self, last: int) -> float:
        return float(np.mean(self.rewards[-last:])) if self.rewards else 0.0

    def curve_csv(self, window: int = 10) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "arm", "reward", "mean_reward"])
        for t, (a, r) in enumerate(zip(self.pulls, self.rewards)):
            lo = max(0, t + 1 - window)
            w.writerow([t, a, r, f"{np.mean(self.rewards[lo: t + 1]):.6f}"])
        return buf.getvalue()


def ucb1(pull: Callable[[int, int], float], arms: int, iterations: int = 50, seed: int = 0,
         c: float = UCB_C) -> GroundingRun:
    """``pull(arm, seed) -> reward in [0, 1]``; every arm is tried once, then mean + c sqrt(ln t / n)."""
    run = GroundingRun(arms)
    n = np.zeros(arms)
    s = np.zeros(arms)
    for t in range(iterations):
        if t < arms:
            a = t
        else:
            a = int(np.argmax(s / n + c * np.sqrt(math.log(t) / n)))
        r = float(pull(a, trajectory_seed(seed, t)))
        n[a] += 1
        s[a] += r
        run.pulls.append(a)
        run.rewards.append(r)
    return run


def ground_bandit(sampler: Sampler, env: Env, target: GroundingTarget, K: int = 8, iterations: int = 50,
                  seed: int = 0, c: float = UCB_C) -> GroundingRun:
    """Arms are clusters; arm index a corresponds to cluster k = a + 1."""
    if not target.reachable(env.spec):
        log.warning("target %s is outside the joint range of %s; no pulls made", target, env.spec.name)
        return GroundingRun(K, [NO_PULL] * iterations, [0.0] * iterations)
    return ucb1(lambda a, s: target.reward(sampler(env, a + 1, s).final_dof), K, iterations, seed, c)


@dataclass
class CemRun:
    means: list[np.ndarray]
    stds: list[np.ndarray]
    rewards: list[float]  # population mean per iteration

    @property
    def mean(self) -> np.ndarray:
        return self.means[-1]


def cem(reward: Callable[[np.ndarray, int], float], mean: np.ndarray, std: np.ndarray | float,
        pop: int = 16, elite: int = 4, iterations: int = 50, seed: int = 0, smoothing: float = 0.7,
        min_std: float = 1e-3) -> CemRun:
    """Diagonal-Gaussian cross-entropy search; ``reward(x, seed)``. Std re-inflated to ``min_std``."""
    if not 0 < elite <= pop:
        raise ValueError(f"elite {elite} must be in 1..pop ({pop})")
    mu = np.asarray(mean, dtype=np.float64).copy()
    sd = np.broadcast_to(np.asarray(std, dtype=np.float64), mu.shape).copy()
    rng = np.random.default_rng([seed, 0xCE3])
    run = CemRun([mu.copy()], [sd.copy()], [])
    for it in range(iterations):
        xs = mu + sd * rng.standard_normal((pop, mu.size))
        r = np.array([reward(x, trajectory_seed(seed, it * pop + j)) for j, x in enumerate(xs)])
        top = xs[np.argsort(-r, kind="stable")[:elite]]
        mu = smoothing * top.mean(axis=0) + (1 - smoothing) * mu
        sd = np.maximum(smoothing * top.std(axis=0) + (1 - smoothing) * sd, min_std)
        run.means.append(mu.copy())
        run.stds.append(sd.copy())
        run.rewards.append(float(r.mean()))
    return run


def ground_cem(model: actpred.ActionPredictor, selector: modesel.ModeSelector, env: Env,
               target: GroundingTarget, pop: int = 16, elite: int = 4, iterations: int = 50,
               seed: int = 0) -> CemRun:
    """CEM over the continuous mode embedding, started at the mean cluster embedding."""
    obs = env.observe(sim.init_state(env.spec), seed ^ 0x1A17)
    f = env.featurizer.encode_per_view(obs)
    modes = np.stack([modesel.infer_mode(selector, f, k) for k in range(1, selector.cfg.K + 1)])

    def reward(eps, s):
        t = actpred.rollout_eps(env, model, eps, s)
        return target.reward(t.final_dof)

    return cem(reward, modes.mean(axis=0), modes.std(axis=0) + 1e-3, pop, elite, iterations, seed)
