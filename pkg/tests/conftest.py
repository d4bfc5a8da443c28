import warnings
from pathlib import Path

import numpy as np
import pytest

from quasiflow.cli import run_stage
from quasiflow.config import ExperimentConfig
from quasiflow.drift import ProblemSpec
from quasiflow.pde import GridSpec, ParabolicSolution

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


def load_config(name: str) -> ExperimentConfig:
    return ExperimentConfig.load(CONFIG_DIR / f"{name}.toml")


@pytest.fixture(scope="session")
def power_run(tmp_path_factory):
    """The full power-drift pipeline, run once through the CLI stages."""
    cfg = load_config("power1d")
    out = tmp_path_factory.mktemp("power") / cfg.name
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ok = run_stage("all", cfg, out)
    return {"cfg": cfg, "out": out, "ok": ok}


def synthetic_solution(amplitude: float = 0.4, lam: float = 2.0,
                       half_width: float = 4.0, h: float = 1 / 128,
                       n_times: int = 11) -> ParabolicSolution:
    """Time-independent u = amplitude * sin(x) injected as a grid solution."""
    spec = ProblemSpec(1, 1.0, 3, 8)
    grid = GridSpec(half_width=half_width, h=h, dt=1e-3, store_stride=1)
    nodes = grid.nodes()
    times = np.linspace(0.0, 1.0, n_times)
    K, N = len(times), len(nodes)
    u = np.broadcast_to(amplitude * np.sin(nodes)[None, :, None], (K, N, 1)).copy()
    gu = np.broadcast_to(amplitude * np.cos(nodes)[None, :, None, None],
                         (K, N, 1, 1)).copy()
    hu = np.broadcast_to(-amplitude * np.sin(nodes)[None, :, None, None, None],
                         (K, N, 1, 1, 1)).copy()
    return ParabolicSolution(lam=lam, grid=grid, spec=spec, times=times,
                             u=u, grad_u=gu, hess_u=hu,
                             dt_u=np.zeros((K, N, 1)))
