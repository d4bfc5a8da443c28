"""File contracts between pipeline stages.

Every numeric CSV is written with 17 significant digits (value-preserving
round trip) and carries a sibling <name>.manifest.json describing columns,
seed, and the producing config hash.  Re-running a stage with unchanged
inputs must reproduce each CSV byte for byte.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .density import DensityRecordSet
from .errors import MissingArtifactError
from .flow import FlowEnsemble


def fmt(x: float) -> str:
    return f"{x:.17g}"


def write_manifest(csv_path: Path, columns: list[str], config_hash: str,
                   seed: int, extra: dict | None = None):
    man = {"columns": columns, "config_hash": config_hash, "seed": seed}
    man.update(extra or {})
    Path(str(csv_path) + ".manifest.json").write_text(
        json.dumps(man, indent=2, sort_keys=True, default=_json_default))


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def write_json(path: Path, payload: dict):
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True,
                                     default=_json_default))


def read_json(path: Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"missing artifact: {path}")
    return json.loads(path.read_text())


def write_rows_csv(path: Path, columns: list[str], rows):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(
                str(v) if isinstance(v, (int, np.integer)) else fmt(v)
                for v in row) + "\n")


def require(path: Path) -> Path:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"missing artifact: {path}")
    return path


# ---------------------------------------------------------------------------
# flow ensembles
# ---------------------------------------------------------------------------

def save_ensemble(ens: FlowEnsemble, csv_path, config_hash: str, seed: int,
                  extra: dict | None = None):
    csv_path = Path(csv_path)
    d = ens.d
    acc_names = sorted(ens.accums)
    columns = (["path", "x0_index", "t_index"]
               + [f"x_{i}" for i in range(d)]
               + [f"acc_{n}" for n in acc_names]
               + ["censored_step"])
    M, P, R, _ = ens.traj.shape
    with open(csv_path, "w", newline="") as fh:
        fh.write(",".join(columns) + "\n")
        for m in range(M):
            for p in range(P):
                cs = int(ens.censored_step[m, p])
                for r in range(R):
                    parts = [str(m), str(p), str(int(ens.report_steps[r]))]
                    parts += [fmt(ens.traj[m, p, r, i]) for i in range(d)]
                    parts += [fmt(ens.accums[n][m, p, r]) for n in acc_names]
                    parts.append(str(cs))
                    fh.write(",".join(parts) + "\n")
    info = {
        "flavor": ens.flavor, "d": d, "dt": ens.dt, "stride": ens.stride,
        "level": ens.level, "lam": ens.lam,
        "times": ens.times, "report_steps": ens.report_steps,
        "initials": ens.initials, "driver_fp": list(ens.driver_fp),
        "grid_meta": ens.grid_meta, "accums": acc_names,
        "censored_fraction": ens.censored_fraction,
        "n_paths": M, "n_points": P,
    }
    info.update(extra or {})
    write_manifest(csv_path, columns, config_hash, seed, info)


def load_ensemble(csv_path) -> FlowEnsemble:
    csv_path = require(csv_path)
    man = read_json(Path(str(csv_path) + ".manifest.json"))
    d = int(man["d"])
    acc_names = man["accums"]
    M, P = int(man["n_paths"]), int(man["n_points"])
    report_steps = np.asarray(man["report_steps"], dtype=np.int64)
    R = len(report_steps)
    data = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[0] != M * P * R:
        raise MissingArtifactError(
            f"{csv_path}: expected {M * P * R} rows, found {data.shape[0]}")
    traj = data[:, 3:3 + d].reshape(M, P, R, d)
    accums = {}
    for i, n in enumerate(acc_names):
        accums[n] = data[:, 3 + d + i].reshape(M, P, R)
    censored = data[:, 3 + d + len(acc_names)].reshape(M, P, R)[:, :, 0]
    fp = man["driver_fp"]
    driver_fp = (int(fp[0]), int(fp[1]), float(fp[2]), int(fp[3]), int(fp[4]))
    return FlowEnsemble(
        flavor=man["flavor"], initials=np.asarray(man["initials"], dtype=float),
        times=np.asarray(man["times"], dtype=float), report_steps=report_steps,
        traj=traj, censored_step=censored.astype(np.int64), accums=accums,
        driver_fp=driver_fp, dt=float(man["dt"]), stride=int(man["stride"]),
        level=man["level"], lam=man["lam"], grid_meta=man["grid_meta"])


# ---------------------------------------------------------------------------
# density records
# ---------------------------------------------------------------------------

DENSITY_COLUMNS = ["path", "x0_index", "t_index",
                   "rho_bar", "K", "oracle_det", "rel_gap"]


def save_density_records(rec: DensityRecordSet, csv_path, config_hash: str,
                         seed: int, report_steps):
    csv_path = Path(csv_path)
    M, P, R = rec.log_rho_bar.shape
    rho = np.exp(rec.log_rho_bar)
    k = np.exp(rec.log_k)
    with open(csv_path, "w", newline="") as fh:
        fh.write(",".join(DENSITY_COLUMNS) + "\n")
        for m in range(M):
            for p in range(P):
                for r in range(R):
                    fh.write(",".join([
                        str(m), str(p), str(int(report_steps[r])),
                        fmt(rho[m, p, r]), fmt(k[m, p, r]),
                        fmt(rec.oracle_det[m, p, r]), fmt(rec.rel_gap[m, p, r]),
                    ]) + "\n")
    y_medians = {}
    if rec.y_rel_gap is not None:
        for r, t in enumerate(rec.times):
            g = rec.y_rel_gap[:, :, r]
            y_medians[fmt(float(t))] = (float(np.nanmedian(g))
                                        if np.any(np.isfinite(g)) else None)
    write_manifest(csv_path, DENSITY_COLUMNS, config_hash, seed, {
        "times": rec.times, "x_initials": rec.x_initials,
        "level": rec.level, "lam": rec.lam, "driver_fp": list(rec.driver_fp),
        "alive": rec.alive.astype(int), "report_steps": list(map(int, report_steps)),
        "n_nonpositive": rec.n_nonpositive, "y_gap_median_by_time": y_medians,
        "meta": rec.meta,
    })


def load_density_records(csv_path) -> DensityRecordSet:
    csv_path = require(csv_path)
    man = read_json(Path(str(csv_path) + ".manifest.json"))
    times = np.asarray(man["times"], dtype=float)
    x0 = np.asarray(man["x_initials"], dtype=float)
    alive = np.asarray(man["alive"], dtype=bool)
    M, P = alive.shape
    R = len(times)
    data = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[0] != M * P * R:
        raise MissingArtifactError(
            f"{csv_path}: expected {M * P * R} rows, found {data.shape[0]}")
    rho = data[:, 3].reshape(M, P, R)
    kv = data[:, 4].reshape(M, P, R)
    oracle = data[:, 5].reshape(M, P, R)
    gap = data[:, 6].reshape(M, P, R)
    fp = man["driver_fp"]
    driver_fp = (int(fp[0]), int(fp[1]), float(fp[2]), int(fp[3]), int(fp[4]))
    with np.errstate(divide="ignore"):
        return DensityRecordSet(
            times=times, x_initials=x0, log_rho_bar=np.log(rho),
            log_k=np.log(kv), oracle_det=oracle, rel_gap=gap, alive=alive,
            level=man["level"], lam=man["lam"], driver_fp=driver_fp,
            meta=man.get("meta", {}))
