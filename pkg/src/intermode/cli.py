"""Pipeline driver: ``intermode <stage> --config run.toml``.

Every stage reads earlier artifacts from the output directory, writes its own
files and a manifest under ``manifests/<stage>.json`` listing each output with
its size and SHA-256. Manifests carry no timestamps, so identical config and
seed give byte-identical manifests.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path
from typing import Callable

import numpy as np
from filelock import FileLock
from threadpoolctl import threadpool_limits

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import actpred, collect, embed, evaluation, modesel, render, sim
from .tensor import Graph, ops
from .tensor.serialize import FormatError, parse_checkpoint

log = logging.getLogger("intermode")

EXIT_OK, EXIT_INVARIANT, EXIT_MISSING, EXIT_CONFIG = 0, 1, 2, 3

DEFAULTS = {
    "pipeline": {"seed": 0, "objects": ["drawer_1"], "out": "runs/default", "featurizer_seed": 0, "hw": 32},
    "collect": {"quota": 150, "n_random": 200, "n_grasp": 200, "K": 8, "L": 3, "per_cluster_n": 8,
                "max_rounds": 6, "n_null": 100},
    "modesel": {"K": 8, "y_dim": 8, "x_dim": 16, "hidden": 64, "dec_layers": 2, "tau_start": 1.0,
                "tau_end": 0.3, "kl_weight": 1.0, "epochs": 200, "lr": 1e-3, "batch_size": 32},
    "actpred": {"patch": 8, "dim": 64, "heads": 4, "layers": 4, "epochs": 60, "lr": 1e-3, "batch_size": 32},
    "joint": {"epochs": 10, "lr": 5e-4},
    "eval": {"n_per_object": 40, "n_per_cluster": 10, "splits": {}},
    "ground": {"object": "drawer_1", "part": 0, "goal": "max", "tol_frac": 0.15, "iterations": 50,
               "method": "bandit", "pop": 16, "elite": 4},
}

# sections whose values determine each stage's outputs
STAGE_SECTIONS = {
    "gen-objects": ("pipeline",),
    "collect": ("pipeline", "collect"),
    "train-modesel": ("pipeline", "collect", "modesel"),
    "train-actpred": ("pipeline", "collect", "actpred"),
    "train-joint": ("pipeline", "collect", "modesel", "actpred", "joint"),
    "eval-ssr": ("pipeline", "collect", "modesel", "actpred", "joint", "eval"),
    "eval-modes": ("pipeline", "collect", "modesel", "actpred", "joint", "eval"),
    "ground": ("pipeline", "collect", "modesel", "actpred", "joint", "ground"),
    "render-views": ("pipeline",),
}
PREREQS = {
    "gen-objects": (),
    "collect": (),
    "train-modesel": ("collect",),
    "train-actpred": ("collect",),
    "train-joint": ("train-modesel", "train-actpred"),
    "eval-ssr": ("train-modesel", "train-actpred"),
    "eval-modes": ("train-modesel", "train-actpred"),
    "ground": ("train-modesel", "train-actpred"),
    "render-views": (),
}


class ConfigError(Exception):
    pass


class MissingStage(Exception):
    def __init__(self, stage: str, needed: str):
        super().__init__(f"stage {stage!r} needs the output of {needed!r}; run `intermode {needed}` first")


class InvariantFailure(Exception):
    pass


# -- configuration ----------------------------------------------------------------------

def load_config(path: str | Path | None, overrides: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    base = Path(".")
    if path is not None:
        p = Path(path)
        try:
            raw = tomllib.loads(p.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file {p} not found") from None
        except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
            raise ConfigError(f"{p}: {exc}") from None
        base = p.parent
        for section, values in raw.items():
            if section not in cfg or not isinstance(values, dict):
                raise ConfigError(f"unknown section [{section}]")
            for key, value in values.items():
                if key not in cfg[section]:
                    raise ConfigError(f"unknown key {section}.{key}")
                want = type(DEFAULTS[section][key])
                if want is float and isinstance(value, int) and not isinstance(value, bool):
                    value = float(value)
                if key != "goal" and not isinstance(value, want):
                    raise ConfigError(f"{section}.{key} must be {want.__name__}, got {value!r}")
                cfg[section][key] = value
    for (section, key), value in (overrides or {}).items():
        cfg[section][key] = value
    validate(cfg, base)
    return cfg


def validate(cfg: dict, base: Path) -> None:
    if cfg["collect"]["K"] < 2 or cfg["modesel"]["K"] < 2:
        raise ConfigError("K must be at least 2")
    if cfg["collect"]["quota"] <= 0 or cfg["collect"]["n_null"] <= 0:
        raise ConfigError("quotas must be positive")
    if not cfg["pipeline"]["objects"]:
        raise ConfigError("pipeline.objects is empty")
    for obj in cfg["pipeline"]["objects"]:
        if obj not in sim.FIXTURE_NAMES and not (base / obj).is_file():
            raise ConfigError(f"object {obj!r} is neither a built-in fixture nor an existing spec file")
    g = cfg["ground"]
    if g["method"] not in ("bandit", "cem"):
        raise ConfigError("ground.method must be 'bandit' or 'cem'")
    if not (g["goal"] in ("min", "max") or isinstance(g["goal"], (int, float))):
        raise ConfigError("ground.goal must be a number, 'min' or 'max'")
    if not 0 < g["elite"] <= g["pop"]:
        raise ConfigError("ground.elite must be in 1..pop")
    for name, split in cfg["eval"]["splits"].items():
        if split not in evaluation.SPLITS:
            raise ConfigError(f"eval.splits.{name}: unknown split {split!r}")
    cfg["_base"] = str(base)


def stage_hash(cfg: dict, stage: str) -> str:
    sub = {s: cfg[s] for s in STAGE_SECTIONS[stage]}
    sub["pipeline"] = {k: v for k, v in sub["pipeline"].items() if k != "out"}
    return hashlib.sha256(json.dumps(sub, sort_keys=True).encode()).hexdigest()


def object_specs(cfg: dict) -> list[sim.ObjectSpec]:
    out = []
    for obj in cfg["pipeline"]["objects"]:
        if obj in sim.FIXTURE_NAMES:
            out.append(sim.load_fixture(obj))
        else:
            out.append(sim.load_object(Path(cfg["_base"]) / obj))
    return out


# -- artifacts ------------------------------------------------------------------------------

def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """Output-directory conventions shared by all stages."""

    def __init__(self, cfg: dict, out: Path, dataset_dir: Path | None = None, force: bool = False):
        self.cfg = cfg
        self.out = out
        self.dataset_dir = dataset_dir or out / "dataset"
        self.force = force

    def manifest_path(self, stage: str) -> Path:
        return self.out / "manifests" / f"{stage}.json"

    def manifest(self, stage: str) -> dict | None:
        p = self.manifest_path(stage)
        return json.loads(p.read_text(encoding="utf-8")) if p.exists() else None

    def require(self, stage: str) -> None:
        for need in PREREQS[stage]:
            if need == "collect" and (self.dataset_dir / "manifest.json").exists():
                continue
            if self.manifest(need) is None:
                raise MissingStage(stage, need)

    def input_hashes(self, stage: str) -> dict[str, str]:
        out = {}
        for need in PREREQS[stage]:
            p = self.manifest_path(need)
            if p.exists():
                out[need] = sha256_file(p)
        if stage in ("eval-ssr", "eval-modes", "ground") and self.manifest_path("train-joint").exists():
            out["train-joint"] = sha256_file(self.manifest_path("train-joint"))
        return out

    def up_to_date(self, stage: str) -> bool:
        m = self.manifest(stage)
        if self.force or m is None:
            return False
        if m["config_hash"] != stage_hash(self.cfg, stage) or m["inputs"] != self.input_hashes(stage):
            return False
        return not verify_outputs(self.out, m)

    def write_manifest(self, stage: str, files: list[Path]) -> dict:
        chash = stage_hash(self.cfg, stage)
        outputs = []
        for f in sorted(set(files)):
            rel = f.relative_to(self.out).as_posix()
            outputs.append({"path": rel, "bytes": f.stat().st_size, "sha256": sha256_file(f),
                            "stage": stage, "config_hash": chash})
        m = {"stage": stage, "config_hash": chash, "seed": self.cfg["pipeline"]["seed"],
             "inputs": self.input_hashes(stage), "outputs": outputs}
        p = self.manifest_path(stage)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(m, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        return m


def verify_outputs(out: Path, manifest: dict) -> list[str]:
    problems = []
    for entry in manifest["outputs"]:
        f = out / entry["path"]
        if not f.exists():
            problems.append(f"{entry['path']}: missing")
        elif f.stat().st_size != entry["bytes"] or sha256_file(f) != entry["sha256"]:
            problems.append(f"{entry['path']}: checksum mismatch")
    return problems


def write_text(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


def write_bytes(path: Path, data: bytes) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    return path


def modesel_config(cfg: dict) -> modesel.ModeSelectorConfig:
    m = cfg["modesel"]
    return modesel.ModeSelectorConfig(K=m["K"], y_dim=m["y_dim"], x_dim=m["x_dim"], hidden=m["hidden"],
                                      dec_layers=m["dec_layers"], tau_start=m["tau_start"], tau_end=m["tau_end"],
                                      kl_weight=m["kl_weight"], batch_size=m["batch_size"], lr=m["lr"])


def actpred_config(cfg: dict) -> actpred.ActionPredictorConfig:
    a = cfg["actpred"]
    return actpred.ActionPredictorConfig(hw=cfg["pipeline"]["hw"], patch=a["patch"], dim=a["dim"], heads=a["heads"],
                                         layers=a["layers"], batch_size=a["batch_size"], lr=a["lr"])


def _dataclass_from(cls, path: Path):
    data = json.loads(path.read_text(encoding="utf-8"))
    names = {f.name for f in fields(cls)}
    return cls(**{k: v for k, v in data.items() if k in names})


# -- stages --------------------------------------------------------------------------------

def stage_gen_objects(run: Run) -> list[Path]:
    return [write_text(run.out / "objects" / f"{s.name}.json", json.dumps(s.to_json(), indent=1, sort_keys=True) + "\n")
            for s in object_specs(run.cfg)]


def stage_collect(run: Run) -> list[Path]:
    c, p = run.cfg["collect"], run.cfg["pipeline"]
    cc = collect.CollectConfig(quota=c["quota"], n_random=c["n_random"], n_grasp=c["n_grasp"], K=c["K"], L=c["L"],
                               per_cluster_n=c["per_cluster_n"], max_rounds=c["max_rounds"], n_null=c["n_null"],
                               seed=p["seed"])
    collect.build_dataset(object_specs(run.cfg), cc, run.dataset_dir, p["featurizer_seed"], p["hw"])
    return sorted(f for f in run.dataset_dir.rglob("*") if f.is_file()) if run.dataset_dir.is_relative_to(run.out) else []


def load_training_data(run: Run, with_steps: bool):
    ds = collect.load_dataset(run.dataset_dir, with_steps=with_steps)
    if not ds.records:
        raise InvariantFailure("dataset has no records")
    featurizer = embed.Featurizer(ds.manifest["featurizer_seed"])
    return ds, featurizer


def dataset_envs(ds: collect.Dataset, featurizer: embed.Featurizer) -> dict[str, collect.Env]:
    return {o["name"]: collect.Env(sim.ObjectSpec.from_json(o["spec"]), featurizer, hw=ds.manifest["hw"],
                                   threshold=o["threshold"]) for o in ds.manifest["objects"]}


def stage_train_modesel(run: Run) -> list[Path]:
    ds, featurizer = load_training_data(run, with_steps=False)
    feats = np.stack([featurizer.encode_per_view(t.init_obs) for t in ds.records])
    z = np.stack([t.z.z for t in ds.records])
    mcfg = modesel_config(run.cfg)
    res = modesel.train(feats, z, mcfg, run.cfg["modesel"]["epochs"], seed=run.cfg["pipeline"]["seed"])
    d = run.out / "modesel"
    return [write_bytes(d / "checkpoint.aimc", res.model.to_bytes()),
            write_text(d / "loss.csv", res.curve_csv()),
            write_text(d / "config.json", json.dumps(asdict(mcfg), indent=1, sort_keys=True) + "\n")]


def stage_train_actpred(run: Run) -> list[Path]:
    ds, featurizer = load_training_data(run, with_steps=True)
    acfg = actpred_config(run.cfg)
    data = actpred.build_bc_data(ds.records, dataset_envs(ds, featurizer), featurizer, acfg)
    res = actpred.train_bc(data, acfg, run.cfg["actpred"]["epochs"], seed=run.cfg["pipeline"]["seed"])
    d = run.out / "actpred"
    return [write_bytes(d / "checkpoint.aimc", res.model.to_bytes()),
            write_text(d / "loss.csv", res.curve_csv()),
            write_text(d / "config.json", json.dumps(asdict(acfg), indent=1, sort_keys=True) + "\n")]


def load_models(run: Run, prefer_joint: bool = True) -> tuple[modesel.ModeSelector, actpred.ActionPredictor]:
    mcfg = _dataclass_from(modesel.ModeSelectorConfig, run.out / "modesel" / "config.json")
    acfg = _dataclass_from(actpred.ActionPredictorConfig, run.out / "actpred" / "config.json")
    joint = prefer_joint and run.manifest("train-joint") is not None
    ms_path = run.out / ("joint/modesel.aimc" if joint else "modesel/checkpoint.aimc")
    ap_path = run.out / ("joint/actpred.aimc" if joint else "actpred/checkpoint.aimc")
    try:
        sel = modesel.ModeSelector(mcfg).load_bytes(ms_path.read_bytes())
        model = actpred.ActionPredictor(acfg).load_bytes(ap_path.read_bytes())
    except (FormatError, KeyError) as exc:
        raise InvariantFailure(f"unreadable checkpoint: {exc}") from None
    return sel, model


def stage_train_joint(run: Run) -> list[Path]:
    ds, featurizer = load_training_data(run, with_steps=True)
    sel, model = load_models(run, prefer_joint=False)
    acfg = actpred.ActionPredictorConfig(**{**asdict(model.cfg), "lr": run.cfg["joint"]["lr"]})
    data = actpred.build_bc_data(ds.records, dataset_envs(ds, featurizer), featurizer, acfg)
    res = actpred.train_bc(data, acfg, run.cfg["joint"]["epochs"], seed=run.cfg["pipeline"]["seed"],
                           joint=True, selector=sel, model=model)
    d = run.out / "joint"
    return [write_bytes(d / "modesel.aimc", sel.to_bytes()),
            write_bytes(d / "actpred.aimc", res.model.to_bytes()),
            write_text(d / "loss.csv", res.curve_csv())]


def eval_envs(run: Run) -> list[collect.Env]:
    ds_manifest = json.loads((run.dataset_dir / "manifest.json").read_text(encoding="utf-8"))
    featurizer = embed.Featurizer(ds_manifest["featurizer_seed"])
    thresholds = {o["name"]: o["threshold"] for o in ds_manifest["objects"]}
    envs = []
    for spec in object_specs(run.cfg):
        env = collect.Env(spec, featurizer, hw=ds_manifest["hw"], threshold=thresholds.get(spec.name))
        envs.append(env if env.threshold is not None else env.calibrated(run.cfg["collect"]["n_null"]))
    return envs


def stage_eval_ssr(run: Run) -> list[Path]:
    sel, model = load_models(run)
    envs = eval_envs(run)
    e, seed = run.cfg["eval"], run.cfg["pipeline"]["seed"]
    lines = []

    def logged(env, k, s):
        t = actpred.rollout(env, sel, model, k, s)
        lines.append(actpred.rollout_log_line(t, sim.init_state(env.spec).dof))
        return t

    rep = evaluation.eval_ssr(logged, envs, e["n_per_object"], seed, sel.cfg.K, e["splits"])
    base = evaluation.eval_ssr(evaluation.random_sampler, envs, e["n_per_object"], seed, sel.cfg.K, e["splits"])
    summary = {"model": json.loads(rep.to_json()), "random_baseline": json.loads(base.to_json()),
               "ratio": rep.ssr / base.ssr if base.ssr > 0 else None}
    d = run.out / "eval"
    return [write_text(d / "ssr.csv", rep.to_csv()),
            write_text(d / "baseline_ssr.csv", base.to_csv()),
            write_text(d / "ssr.json", json.dumps(summary, indent=2, sort_keys=True) + "\n"),
            write_text(d / "rollouts.jsonl", "\n".join(lines) + "\n")]


def stage_eval_modes(run: Run) -> list[Path]:
    sel, model = load_models(run)
    sampler = evaluation.model_sampler(sel, model)
    rows = []
    for env in eval_envs(run):
        rep = evaluation.eval_mode_ssr(sampler, env, run.cfg["eval"]["n_per_cluster"], sel.cfg.K,
                                       run.cfg["pipeline"]["seed"])
        rows.append(rep.to_csv() if not rows else rep.to_csv().split("\n", 1)[1])
    return [write_text(run.out / "eval" / "modes.csv", "".join(rows))]


def stage_ground(run: Run) -> list[Path]:
    sel, model = load_models(run)
    g = run.cfg["ground"]
    envs = {env.spec.name: env for env in eval_envs(run)}
    if g["object"] not in envs:
        raise ConfigError(f"ground.object {g['object']!r} is not in pipeline.objects")
    env = envs[g["object"]]
    if not 0 <= g["part"] < len(env.spec.parts):
        raise ConfigError(f"ground.part {g['part']} out of range for {env.spec.name}")
    part = env.spec.parts[g["part"]]
    goal = {"min": part.d_min, "max": part.d_max}.get(g["goal"], g["goal"])
    target = evaluation.GroundingTarget.for_part(env.spec, g["part"], float(goal), g["tol_frac"])
    seed = run.cfg["pipeline"]["seed"]
    d = run.out / "ground"
    if g["method"] == "bandit":
        res = evaluation.ground_bandit(evaluation.model_sampler(sel, model), env, target, sel.cfg.K,
                                       g["iterations"], seed)
        summary = {"method": "bandit", "best_cluster": res.best_arm + 1, "pulls": res.counts.tolist(),
                   "arm_means": res.arm_means.tolist(), "last10_mean_reward": res.mean_reward(10)}
        curve = res.curve_csv()
    else:
        res = evaluation.ground_cem(model, sel, env, target, g["pop"], g["elite"], g["iterations"], seed)
        summary = {"method": "cem", "final_mean": res.mean.tolist(), "mean_rewards": res.rewards}
        curve = "iteration,mean_reward\n" + "".join(f"{i},{r:.6f}\n" for i, r in enumerate(res.rewards))
    summary["target"] = {"object": env.spec.name, "part": g["part"], "goal": float(goal), "tol": target.tol}
    return [write_text(d / "curve.csv", curve),
            write_text(d / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")]


def _ppm(rgb: np.ndarray) -> bytes:
    img = np.clip(np.rint(rgb * 255), 0, 255).astype(np.uint8)
    h, w, _ = img.shape
    return f"P6 {w} {h} 255\n".encode() + img.tobytes()


def stage_render_views(run: Run) -> list[Path]:
    from .tensor import save_tensor

    files = []
    hw = run.cfg["pipeline"]["hw"]
    for spec in object_specs(run.cfg):
        env = collect.Env(spec, embed.Featurizer(run.cfg["pipeline"]["featurizer_seed"]), hw=hw)
        obs = env.observe(sim.init_state(spec), run.cfg["pipeline"]["seed"], occlude_robot=False)
        d = run.out / "views"
        d.mkdir(parents=True, exist_ok=True)
        save_tensor(d / f"{spec.name}.aimt", obs.views)
        files.append(d / f"{spec.name}.aimt")
        for v, name in enumerate(render.VIEW_NAMES):
            files.append(write_bytes(d / f"{spec.name}_{name}.ppm", _ppm(obs.views[v, ..., :3])))
    return files


STAGES: dict[str, Callable[[Run], list[Path]]] = {
    "gen-objects": stage_gen_objects,
    "collect": stage_collect,
    "train-modesel": stage_train_modesel,
    "train-actpred": stage_train_actpred,
    "train-joint": stage_train_joint,
    "eval-ssr": stage_eval_ssr,
    "eval-modes": stage_eval_modes,
    "ground": stage_ground,
    "render-views": stage_render_views,
}


# -- verify ---------------------------------------------------------------------------------

def _check_c_posterior() -> None:
    rng = np.random.default_rng(0)
    x, mu, lv = rng.normal(size=(4, 3)), rng.normal(size=(4, 5, 3)), rng.uniform(-1, 1, size=(4, 5, 3))
    q = modesel.c_posterior(x, mu, lv, np.log(np.full(5, 0.2)))
    logp = -0.5 * np.sum(np.log(2 * np.pi) + lv + (x[:, None] - mu) ** 2 / np.exp(lv), axis=-1)
    brute = np.exp(logp) / np.exp(logp).sum(axis=1, keepdims=True)
    if not np.allclose(q, brute, atol=1e-8):
        raise InvariantFailure("c-posterior disagrees with brute-force Bayes")


def _check_kl() -> None:
    g = Graph(dtype=np.float64)
    v = ops.kl_diag_gaussian(g.const([[1.0]]), g.const([[0.0]]), g.const([[0.0]]), g.const([[0.0]])).value
    if abs(float(v[0]) - 0.5) > 1e-12:
        raise InvariantFailure("closed-form Gaussian KL is wrong")


def _check_codec() -> None:
    rng = np.random.default_rng(1)
    grid = render.candidate_grid(32)
    for p in rng.uniform(-1, 1, size=(50, 3)):
        q = render.decode_position(render.encode_heatmaps(p), grid)
        if np.max(np.abs(q - p)) > 2.0 / 32 + 1e-12:
            raise InvariantFailure("heatmap codec round trip exceeds one pixel pitch")


def _check_elbo_gradient() -> None:
    cfg = modesel.ModeSelectorConfig(K=2, y_dim=2, x_dim=2, z_dim=2, feat_dim=2, cond_dim=4, hidden=4, depth=1,
                                      dec_dim=4, dec_heads=1, dec_layers=1)
    model = modesel.ModeSelector(cfg, seed=0)
    rng = np.random.default_rng(2)
    feats, z = rng.normal(size=(2, 5, 2)), rng.normal(size=(2, 2))
    noise = modesel.ElboNoise.draw(rng, 2, cfg, True)
    p64 = {k: v.astype(np.float64) for k, v in model.params.items()}
    g = Graph(p64, dtype=np.float64)
    grads = g.backward(modesel.elbo(model, g, feats, z, noise)[0])
    name = "ms.qx.out.w" if "ms.qx.out.w" in p64 else sorted(p64)[0]
    h = 1e-5
    flat = p64[name].reshape(-1)
    for i in range(min(4, flat.size)):
        vals = []
        for s in (h, -h):
            flat[i] += s
            vals.append(float(modesel.elbo(model, Graph(p64, dtype=np.float64), feats, z, noise)[0].value))
            flat[i] -= s
        num = (vals[0] - vals[1]) / (2 * h)
        ana = grads[name].reshape(-1)[i]
        if abs(num - ana) > 1e-3 * max(1.0, abs(num)):
            raise InvariantFailure(f"ELBO gradient mismatch on {name}[{i}]: {ana} vs {num}")


INVARIANTS = {"c_posterior": _check_c_posterior, "gaussian_kl": _check_kl, "heatmap_codec": _check_codec,
              "elbo_gradient": _check_elbo_gradient}


def verify(run: Run) -> list[str]:
    problems = []
    mdir = run.out / "manifests"
    for mp in sorted(mdir.glob("*.json")) if mdir.exists() else []:
        m = json.loads(mp.read_text(encoding="utf-8"))
        problems += [f"[{m['stage']}] {p}" for p in verify_outputs(run.out, m)]
        for entry in m["outputs"]:
            f = run.out / entry["path"]
            if f.suffix == ".aimc" and f.exists():
                try:
                    tensors = parse_checkpoint(f.read_bytes())
                except FormatError as exc:
                    problems.append(f"[{m['stage']}] {entry['path']}: {exc}")
                    continue
                if any(not np.all(np.isfinite(t)) for t in tensors.values()):
                    problems.append(f"[{m['stage']}] {entry['path']}: non-finite parameters")
    for name, check in INVARIANTS.items():
        try:
            check()
        except InvariantFailure as exc:
            problems.append(f"[invariant {name}] {exc}")
    return problems


# -- entry point ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="intermode", description=__doc__.splitlines()[0])
    ap.add_argument("stage", choices=[*STAGES, "verify"])
    ap.add_argument("--config", help="TOML config file (defaults apply for missing keys)")
    ap.add_argument("--seed", type=int, help="override pipeline.seed")
    ap.add_argument("--out", help="override pipeline.out")
    ap.add_argument("--dataset-dir", help="dataset location (default <out>/dataset)")
    ap.add_argument("--force", action="store_true", help="re-run even if outputs are up to date")
    ap.add_argument("--threads", type=int, default=1, help="BLAS threads")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def run_stage(stage: str, run: Run) -> int:
    if stage == "verify":
        problems = verify(run)
        for p in problems:
            log.error("verify: %s", p)
        if problems:
            raise InvariantFailure(f"{len(problems)} problem(s) found")
        log.info("verify: all artifacts and invariants ok")
        return EXIT_OK
    run.require(stage)
    if run.up_to_date(stage):
        log.info("%s: up to date (use --force to re-run)", stage)
        return EXIT_OK
    files = STAGES[stage](run)
    run.write_manifest(stage, files)
    log.info("%s: wrote %d file(s)", stage, len(files))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        overrides = {}
        if args.seed is not None:
            overrides[("pipeline", "seed")] = args.seed
        if args.out is not None:
            overrides[("pipeline", "out")] = args.out
        cfg = load_config(args.config, overrides)
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        out = Path(cfg["pipeline"]["out"])
        out.mkdir(parents=True, exist_ok=True)
        run = Run(cfg, out, Path(args.dataset_dir) if args.dataset_dir else None, args.force)
        with FileLock(str(out / ".intermode.lock")), threadpool_limits(args.threads):
            return run_stage(args.stage, run)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except MissingStage as exc:
        log.error("%s", exc)
        return EXIT_MISSING
    except (InvariantFailure, modesel.TrainingDiverged) as exc:
        log.error("%s", exc)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
