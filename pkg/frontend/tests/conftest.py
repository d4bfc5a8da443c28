import json
from pathlib import Path

import numpy as np
import pytest


def _manifest(csv_path: Path, columns, extra=None):
    man = {"columns": list(columns), "config_hash": "cafe0123", "seed": 99}
    man.update(extra or {})
    Path(str(csv_path) + ".manifest.json").write_text(json.dumps(man))


def _write_csv(path: Path, columns, rows):
    lines = [",".join(columns)]
    lines += [",".join(f"{v:.17g}" for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")


@pytest.fixture
def fake_run(tmp_path):
    """Schema-conformant artifacts for every figure kind."""
    run = tmp_path / "run"
    run.mkdir()
    rng = np.random.default_rng(0)

    cols = ["path", "x0_index", "t_index", "rho_bar", "K", "oracle_det",
            "rel_gap"]
    rows = []
    times = [0, 5, 10]
    for p in range(6):
        for i in range(5):
            for t in times:
                rho = float(np.exp(0.01 * rng.standard_normal()))
                k = 1.0 / rho
                det = rho * (1.0 + 0.001 * rng.standard_normal())
                boundary = i in (0, 4)
                rows.append([p, i, t, rho, k,
                             np.nan if boundary else det,
                             np.nan if boundary else abs(k * det - 1.0)])
    path = run / "density_level4.csv"
    _write_csv(path, cols, rows)
    _manifest(path, cols, {"times": [0.0, 0.5, 1.0], "level": 4})

    cols = ["level", "lambda", "grad_sup"]
    rows = [[n, lam, 0.9 / lam + 0.01 * n]
            for lam in (1, 2, 4) for n in (3, 4)]
    _write_csv(run / "lambda_search.csv", cols, rows)
    _manifest(run / "lambda_search.csv", cols, {"selected_lambda": 4.0})
    (run / "pde.json").write_text(json.dumps({"target": 0.5}))

    cols = ["level", "epsilon", "cutoff_radius", "error_lqp"]
    rows = [[n, 2.0 ** -n, 2.0 + n, 0.5 * 2.0 ** (-0.2 * n)] for n in (3, 4, 5)]
    _write_csv(run / "mollification.csv", cols, rows)
    _manifest(run / "mollification.csv", cols)

    cols = ["h", "dt", "linf_error"]
    rows = [[h, h / 8, 0.3 * h ** 2] for h in (1 / 16, 1 / 32, 1 / 64)]
    _write_csv(run / "pde_order.csv", cols, rows)
    _manifest(run / "pde_order.csv", cols, {"order": 2.0})
    return run
