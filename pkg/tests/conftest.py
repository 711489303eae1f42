"""Shared trained 1-drawer pipeline, built once per session through the CLI."""

import time
from dataclasses import dataclass
from pathlib import Path

import pytest

from intermode import cli, collect, evaluation

DRAWER_CONFIG = """
[pipeline]
seed = 0
objects = ["drawer_1"]
out = "{out}"

[collect]
quota = 150

[modesel]
epochs = 200

[actpred]
patch = 8
epochs = {bc_epochs}

[eval]
n_per_cluster = 10

[ground]
object = "drawer_1"
goal = "max"
iterations = 50
"""
BC_EPOCHS = 200
DRAWER_STAGES = ("collect", "train-modesel", "train-actpred", "eval-modes")


@dataclass
class DrawerRun:
    config: Path
    out: Path
    seconds: float
    run: cli.Run

    def models(self):
        return cli.load_models(self.run)

    def env(self) -> collect.Env:
        return cli.eval_envs(self.run)[0]

    def dataset(self, with_steps=False) -> collect.Dataset:
        return collect.load_dataset(self.run.dataset_dir, with_steps=with_steps)

    def sampler(self) -> evaluation.Sampler:
        return evaluation.model_sampler(*self.models())


@pytest.fixture(scope="session")
def drawer_run(tmp_path_factory) -> DrawerRun:
    tmp = tmp_path_factory.mktemp("drawer")
    out = tmp / "out"
    cfg = tmp / "drawer.toml"
    cfg.write_text(DRAWER_CONFIG.format(out=out.as_posix(), bc_epochs=BC_EPOCHS), encoding="utf-8")
    t0 = time.perf_counter()
    for stage in DRAWER_STAGES:
        code = cli.main([stage, "--config", str(cfg)])
        assert code == cli.EXIT_OK, f"{stage} exited {code}"
    seconds = time.perf_counter() - t0
    return DrawerRun(cfg, out, seconds, cli.Run(cli.load_config(cfg), out))
