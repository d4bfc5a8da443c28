"""Experiment runner: composable stages with file-based contracts.

    quasiflow <stage> --config experiment.toml [--seed N] [--workers N] [--out DIR]

Stages: check | mollify | pde | transform | simulate | density | verify |
report | all.  Each stage reads and writes only its documented CSV/JSON
artifacts, so any stage can be re-run in isolation.  Exit codes: 0 pass,
1 verification failure, 2 usage/config error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import artifacts as art
from .config import ExperimentConfig
from .density import build_density_records, positivity_scan
from .drift import kr_condition, lqp_norm, mollification_error
from .errors import (ConfigError, MissingArtifactError, QuasiflowError,
                     VerificationFailure)
from .flow import simulate_x_flow, simulate_y_flow
from .pde import (BoundaryContaminationWarning, ParabolicSolution,
                  gradient_sup, select_lambda, sobolev_surrogate_report,
                  solve_backward)
from .verify import (VerificationReport, _check, density_moment_suite,
                     exp_moment_suite, flow_convergence_suite, headline_suite,
                     jacobian_moment_suite, pde_order_study, reciprocity_suite)
from .zvonkin import ZvonkinMap, regularity_probe, transformed_coefficients

log = logging.getLogger("quasiflow")

OUT_ENV = "QUASIFLOW_OUT"


def _pde_dir(out: Path, level: int) -> Path:
    return out / f"pde_level{level}"


def _ens_path(out: Path, flavor: str, family: str, level, refined=False) -> Path:
    tag = f"{flavor}_{family}_level{level}" + ("_refined" if refined else "")
    return out / f"ensemble_{tag}.csv"


def stage_check(cfg: ExperimentConfig, out: Path) -> bool:
    spec = cfg.problem()
    admissible = kr_condition(spec)
    drift = cfg.drift_field()
    if drift.singularities and not admissible:
        raise ConfigError(
            f"drift {drift.name!r} declares singularities but (d,p,q)="
            f"({spec.d},{spec.p},{spec.q}) fails the integrability gate")
    quad = cfg.quadrature()
    closed = None
    if not drift.time_dependent:
        closed = drift.lp_space_norm_closed(spec.p)
        if closed is not None:
            closed = closed * spec.T ** (1.0 / spec.q)
    norm = lqp_norm(drift, quad)
    (out / "resolved.toml").write_text(cfg.resolved_toml())
    art.write_json(out / "check.json", {
        "admissible": admissible, "d": spec.d, "T": spec.T,
        "p": spec.p, "q": spec.q, "kr_sum": spec.d / spec.p + 2.0 / spec.q,
        "drift": cfg.data["drift"], "lqp_norm": norm,
        "lqp_norm_closed_form": closed, "config_hash": cfg.config_hash,
        "seed": cfg.seed,
    })
    log.info("check: admissible=%s, ||b||_Lqp = %.6g", admissible, norm)
    return True


def stage_mollify(cfg: ExperimentConfig, out: Path) -> bool:
    art.require(out / "check.json")
    seq = cfg.mollified_sequence()
    quad = cfg.quadrature()
    rows = []
    for n in cfg.levels:
        err = mollification_error(seq, n, quad)
        rows.append((n, seq.eps_for(n), seq.cutoff_for(n), err))
        log.info("mollify: level %d  eps=%.5g  ||b^n - b|| = %.6g", n,
                 seq.eps_for(n), err)
    art.write_rows_csv(out / "mollification.csv",
                       ["level", "epsilon", "cutoff_radius", "error_lqp"], rows)
    art.write_manifest(out / "mollification.csv",
                       ["level", "epsilon", "cutoff_radius", "error_lqp"],
                       cfg.config_hash, cfg.seed)
    return True


def stage_pde(cfg: ExperimentConfig, out: Path) -> bool:
    art.require(out / "mollification.csv")
    spec = cfg.problem()
    seq = cfg.mollified_sequence()
    grid = cfg.grid()
    grid.check_support(seq.base.support_radius())
    pol = cfg.data["lambda_policy"]
    contaminated = []
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", BoundaryContaminationWarning)
        if pol["mode"] == "auto":
            sel = select_lambda(seq, cfg.levels, grid, spec,
                                target=float(pol["target"]),
                                lam_start=float(pol["start"]),
                                lam_cap=float(pol["cap"]))
            lam, solutions, trace = sel.lam, sel.solutions, sel.trace
        elif pol["mode"] == "fixed":
            lam = float(pol["value"])
            solutions, trace = {}, []
            for n in cfg.levels:
                bn = seq.mollify(n)
                sol = solve_backward(bn.value, bn.value, lam, grid, spec, level=n)
                solutions[n] = sol
                trace.append((n, lam, gradient_sup(sol)))
        else:
            raise ConfigError(f"unknown lambda_policy.mode {pol['mode']!r}")
        contaminated = [str(w.message) for w in caught
                        if issubclass(w.category, BoundaryContaminationWarning)]

    art.write_rows_csv(out / "lambda_search.csv",
                       ["level", "lambda", "grad_sup"], trace)
    art.write_manifest(out / "lambda_search.csv",
                       ["level", "lambda", "grad_sup"],
                       cfg.config_hash, cfg.seed, {"selected_lambda": lam})
    sups = {}
    for n, sol in solutions.items():
        sol.diagnostics["gradient_sup"] = gradient_sup(sol)
        sups[str(n)] = sol.diagnostics["gradient_sup"]
        sol.save(_pde_dir(out, n))
        log.info("pde: level %d  lam=%g  grad_sup=%.4f", n, lam, sups[str(n)])

    head = cfg.headline_level
    bn = seq.mollify(head)
    rep_coarse = sobolev_surrogate_report(solutions[head], bn.value)
    fine = cfg.grid()
    fine = type(fine)(half_width=fine.half_width, h=fine.h / 2.0, dt=fine.dt,
                      padding=fine.padding, store_stride=fine.store_stride)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        sol_fine = solve_backward(bn.value, bn.value, lam, fine, spec, level=head)
    rep_fine = sobolev_surrogate_report(sol_fine, bn.value)
    art.write_json(out / "sobolev.json", {
        "level": head, "coarse": rep_coarse, "fine": rep_fine,
        "ratio_drift": (None if rep_coarse["zero_source"]
                        else rep_fine["ratio"] / max(rep_coarse["ratio"], 1e-300)),
    })
    art.write_json(out / "pde.json", {
        "lambda": lam, "gradient_sup": sups, "target": float(pol["target"]),
        "contamination_warnings": contaminated, "config_hash": cfg.config_hash,
        "seed": cfg.seed,
    })
    return True


def _load_solution(out: Path, level: int) -> ParabolicSolution:
    art.require(_pde_dir(out, level) / "header.json")
    return ParabolicSolution.load(_pde_dir(out, level))


def stage_transform(cfg: ExperimentConfig, out: Path) -> bool:
    spec = cfg.problem()
    rng = np.random.default_rng(cfg.seed)
    for n in cfg.levels:
        sol = _load_solution(out, n)
        zmap = ZvonkinMap(sol)
        coeffs = transformed_coefficients(zmap)
        lo, hi = sol.box_min + 0.5, sol.box_max - 0.5
        pts = rng.uniform(lo, hi, size=(1000, spec.d))
        x, ok = zmap.phi_inverse_masked(0.5 * spec.T, pts)
        rt = np.max(np.abs(zmap.phi(0.5 * spec.T, x[ok]) - pts[ok]))
        grad = zmap.grad_phi(0.5 * spec.T, x[ok])
        if spec.d == 1:
            inv_norm = float(np.max(1.0 / np.abs(grad[..., 0, 0])))
            svals = np.abs(grad[..., 0, 0])
        else:
            svals = np.linalg.svd(grad, compute_uv=False)
            inv_norm = float(np.max(1.0 / np.min(svals, axis=-1)))
        probe = regularity_probe(coeffs)
        art.write_json(out / f"transform_level{n}.json", {
            "level": n, "lam": zmap.lam,
            "roundtrip_max": float(rt), "inverse_converged": bool(np.all(ok)),
            "grad_phi_inverse_sup": inv_norm,
            "sigma_singular_min": float(np.min(svals)),
            "sigma_singular_max": float(np.max(svals)),
            "probe": probe.as_dict(), "config_hash": cfg.config_hash,
            "seed": cfg.seed,
        })
        log.info("transform: level %d roundtrip=%.2e |grad phi^-1|<=%.3f",
                 n, rt, inv_norm)
    return True


def stage_simulate(cfg: ExperimentConfig, out: Path) -> bool:
    spec = cfg.problem()
    seq = cfg.mollified_sequence()
    fl = cfg.data["flow"]
    margin = float(fl["box_margin"])
    scheme = fl["scheme"]
    refine = cfg.refine
    drv_w = cfg.driver("window")
    drv_c = cfg.driver("census")
    steps_run = drv_w.n_steps // refine
    every = max(1, steps_run // int(fl["n_reports"]))
    dt_run = drv_w.dt * refine
    marks = {int(round(t / dt_run)) for t in fl["headline_times"]}
    report = sorted(set(range(0, steps_run + 1, every)) | {steps_run} | marks)
    census = cfg.census_grid()
    window = cfg.window_grid()

    def save(ens, flavor, family, level, refined=False):
        extra = {}
        if spec.d == 1:
            extra["monotonicity"] = ens.monotonicity_census()
        art.save_ensemble(ens, _ens_path(out, flavor, family, level, refined),
                          cfg.config_hash, cfg.seed, extra)

    for n in cfg.levels:
        sol = _load_solution(out, n)
        zmap = ZvonkinMap(sol)
        coeffs = transformed_coefficients(zmap)
        bn = seq.mollify(n)
        box = (sol.box_min + margin, sol.box_max - margin)
        xw = simulate_x_flow(bn.value, window, drv_w, stride=refine,
                             report_steps=report, box=box, level=n,
                             grid_meta=cfg.window_meta(), workers=cfg.workers)
        xw.lam = zmap.lam
        save(xw, "x", "window", n)
        yw = simulate_y_flow(coeffs, zmap.phi(0.0, window), drv_w, stride=refine,
                             report_steps=report, box_margin=margin, level=n,
                             scheme=scheme, workers=cfg.workers)
        save(yw, "y", "window", n)
        yc = simulate_y_flow(coeffs, census, drv_c, stride=refine,
                             report_steps=report, box_margin=margin, level=n,
                             l2_fields={"bn": bn.value}, scheme=scheme,
                             workers=cfg.workers)
        save(yc, "y", "census", n)
        log.info("simulate: level %d censored x=%.4f y=%.4f", n,
                 xw.censored_fraction, yw.censored_fraction)

    if refine > 1:
        n = cfg.headline_level
        sol = _load_solution(out, n)
        zmap = ZvonkinMap(sol)
        coeffs = transformed_coefficients(zmap)
        bn = seq.mollify(n)
        box = (sol.box_min + margin, sol.box_max - margin)
        wref = cfg.window_grid(refined=True)
        report_fine = [s * refine for s in report]
        xr = simulate_x_flow(bn.value, wref, drv_w, stride=1,
                             report_steps=report_fine, box=box, level=n,
                             grid_meta=cfg.window_meta(refined=True),
                             workers=cfg.workers)
        xr.lam = zmap.lam
        save(xr, "x", "window", n, refined=True)
        yr = simulate_y_flow(coeffs, zmap.phi(0.0, wref), drv_w, stride=1,
                             report_steps=report_fine, box_margin=margin,
                             level=n, scheme=scheme, workers=cfg.workers)
        save(yr, "y", "window", n, refined=True)
    return True


def stage_density(cfg: ExperimentConfig, out: Path) -> bool:
    for n in cfg.levels:
        sol = _load_solution(out, n)
        zmap = ZvonkinMap(sol)
        xw = art.load_ensemble(_ens_path(out, "x", "window", n))
        yw = art.load_ensemble(_ens_path(out, "y", "window", n))
        rec = build_density_records(yw, xw, zmap)
        art.save_density_records(rec, out / f"density_level{n}.csv",
                                 cfg.config_hash, cfg.seed, yw.report_steps)
        scan = positivity_scan(rec, n_bootstrap=100)
        scan.update({"config_hash": cfg.config_hash, "seed": cfg.seed,
                     "level": n})
        art.write_json(out / f"positivity_level{n}.json", scan)
        log.info("density: level %d nonpositive=%d", n, rec.n_nonpositive)
    if cfg.refine > 1:
        n = cfg.headline_level
        sol = _load_solution(out, n)
        zmap = ZvonkinMap(sol)
        xr = art.load_ensemble(_ens_path(out, "x", "window", n, refined=True))
        yr = art.load_ensemble(_ens_path(out, "y", "window", n, refined=True))
        rec = build_density_records(yr, xr, zmap)
        art.save_density_records(rec, out / "density_refined.csv",
                                 cfg.config_hash, cfg.seed, yr.report_steps)
    return True


def stage_verify(cfg: ExperimentConfig, out: Path) -> bool:
    from .artifacts import load_density_records, load_ensemble
    thr = cfg.thresholds()
    spec = cfg.problem()
    reports: list[VerificationReport] = []
    manifest = {"config_hash": cfg.config_hash, "seed": cfg.seed,
                "levels": cfg.levels}

    # mollification errors decrease (from the mollify stage artifact);
    # exact-zero ties (zero/constant fields) pass within quadrature tolerance
    rows = np.loadtxt(art.require(out / "mollification.csv"),
                      delimiter=",", skiprows=1, ndmin=2)
    checks = []
    for (la, ea), (lb, eb) in zip(rows[:-1, (0, 3)], rows[1:, (0, 3)]):
        _check(checks, f"mollification_error_decreasing_{int(la)}->{int(lb)}",
               eb, ea + 1e-6, "<")
    reports.append(VerificationReport("mollification", checks, manifest))

    # lambda certificate from the pde stage artifacts
    pde_info = art.read_json(out / "pde.json")
    checks = []
    target = float(pde_info["target"])
    for n, gs in sorted(pde_info["gradient_sup"].items()):
        _check(checks, f"grad_sup_level{n}", gs, target, "<=",
               {"lambda": pde_info["lambda"]})
    trace = np.loadtxt(art.require(out / "lambda_search.csv"),
                       delimiter=",", skiprows=1, ndmin=2)
    for n in cfg.levels:
        sel = trace[trace[:, 0] == n]
        if len(sel) > 1:
            order = sel[np.argsort(sel[:, 1])]
            worst = float(np.max(np.diff(order[:, 2])))
            _check(checks, f"grad_sup_nonincreasing_in_lambda_level{n}",
                   worst, 1e-12, "<=")
    sob = art.read_json(out / "sobolev.json")
    if sob["ratio_drift"] is not None:
        drift = max(sob["ratio_drift"], 1.0 / max(sob["ratio_drift"], 1e-300))
        _check(checks, "sobolev_ratio_stable_h_h2", drift,
               thr["sobolev_ratio_drift"], "<=",
               {"coarse": sob["coarse"]["ratio"], "fine": sob["fine"]["ratio"]})
    reports.append(VerificationReport("pde_certificate", checks, manifest))

    # transform diagnostics
    checks = []
    for n in cfg.levels:
        tr = art.read_json(out / f"transform_level{n}.json")
        _check(checks, f"roundtrip_level{n}", tr["roundtrip_max"],
               thr["roundtrip"], "<=")
        _check(checks, f"grad_phi_inverse_level{n}", tr["grad_phi_inverse_sup"],
               thr["grad_phi_inv"], "<=")
        _check(checks, f"sigma_sv_min_level{n}", tr["sigma_singular_min"],
               0.5 - thr["sigma_sv_slack"], ">=")
        _check(checks, f"sigma_sv_max_level{n}", tr["sigma_singular_max"],
               1.5 + thr["sigma_sv_slack"], "<=")
    reports.append(VerificationReport("diffeomorphism", checks, manifest))

    # ensembles
    y_census = {n: load_ensemble(_ens_path(out, "y", "census", n))
                for n in cfg.levels}
    x_window = {n: load_ensemble(_ens_path(out, "x", "window", n))
                for n in cfg.levels}
    checks = []
    for n in cfg.levels:
        man = art.read_json(
            Path(str(_ens_path(out, "y", "census", n)) + ".manifest.json"))
        _check(checks, f"censored_fraction_level{n}",
               man["censored_fraction"], thr["censored_max"], "<=")
        if spec.d == 1 and "monotonicity" in man:
            _check(checks, f"monotonicity_level{n}",
                   man["monotonicity"]["fraction_nonmonotone"],
                   thr["monotonicity"], "<=")
    reports.append(VerificationReport("ensemble_health", checks, manifest))

    reports.append(flow_convergence_suite(
        y_census, k=float(cfg.data["verify"]["flow_gap_k"]),
        growth_headroom=thr["growth_headroom"], manifest=manifest))
    reports.append(density_moment_suite(
        y_census, drift_tol=thr["moment_drift"], manifest=manifest))
    reports.append(exp_moment_suite(
        y_census, "bn", k=float(cfg.data["verify"]["exp_moment_k"]),
        drift_tol=thr["expmoment_drift"], manifest=manifest))
    reports.append(jacobian_moment_suite(
        x_window, drift_tol=thr["jacobian_drift"],
        assert_stability=bool(cfg.data["verify"]["jacobian_stability"]),
        manifest=manifest))

    head = cfg.headline_level
    rec = load_density_records(out / f"density_level{head}.csv")
    refined = None
    if cfg.refine > 1 and (out / "density_refined.csv").exists():
        refined = load_density_records(out / "density_refined.csv")
    reports.append(headline_suite(
        rec, x_window[head],
        refined=refined, y_ensembles=y_census,
        times=tuple(cfg.data["flow"]["headline_times"]),
        median_tol=thr["headline_median"], cov_median_tol=thr["cov_median"],
        cov_p95_tol=thr["cov_p95"], manifest=manifest))

    if spec.d == 1:
        yw = load_ensemble(_ens_path(out, "y", "window", head))
        reports.append(reciprocity_suite(
            yw, float(cfg.data["flow"]["headline_times"][-1]),
            tol=thr["reciprocity"], manifest=manifest))

    if cfg.data["verify"]["pde_order"]:
        study = pde_order_study(spec)
        art.write_rows_csv(out / "pde_order.csv", ["h", "dt", "linf_error"],
                           [(r["h"], r["dt"], r["linf_error"])
                            for r in study["rows"]])
        art.write_manifest(out / "pde_order.csv", ["h", "dt", "linf_error"],
                           cfg.config_hash, cfg.seed,
                           {"order": study["order"]})
        checks = []
        _check(checks, "pde_convergence_order", -study["order"],
               -thr["pde_order_min"], "<=", {"order": study["order"]})
        reports.append(VerificationReport("pde_order", checks, manifest))

    payload = {"passed": all(r.passed for r in reports),
               "suites": [r.as_dict() for r in reports],
               "config_hash": cfg.config_hash, "seed": cfg.seed}
    art.write_json(out / "verify.json", payload)
    (out / "verify.txt").write_text(
        "\n\n".join(r.text_table() for r in reports) + "\n")
    rows = []
    for r in reports:
        for c in r.checks:
            rows.append((r.suite, c.name, c.observed, c.threshold,
                         int(c.passed)))
    with open(out / "verify.csv", "w", newline="") as fh:
        fh.write("suite,check,observed,threshold,passed\n")
        for suite, name, obs, t, p in rows:
            fh.write(f"{suite},{name},{art.fmt(obs)},{art.fmt(t)},{p}\n")
    for r in reports:
        log.info("verify: %-18s %s", r.suite, "PASS" if r.passed else "FAIL")
    return payload["passed"]


def stage_report(cfg: ExperimentConfig, out: Path) -> bool:
    verify = art.read_json(out / "verify.json")
    check = art.read_json(out / "check.json")
    summary = {
        "name": cfg.name, "config_hash": cfg.config_hash, "seed": cfg.seed,
        "admissible": check["admissible"], "lqp_norm": check["lqp_norm"],
        "passed": verify["passed"],
        "suites": {s["suite"]: s["passed"] for s in verify["suites"]},
    }
    art.write_json(out / "report.json", summary)
    lines = [f"quasiflow report: {cfg.name}",
             f"config {cfg.config_hash}  seed {cfg.seed}",
             f"admissible: {check['admissible']}   "
             f"||b||_Lqp = {check['lqp_norm']:.6g}", ""]
    for s in verify["suites"]:
        lines.append(f"  {'PASS' if s['passed'] else 'FAIL'}  {s['suite']}")
    lines.append("")
    lines.append("overall: " + ("PASS" if verify["passed"] else "FAIL"))
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    log.info("report: overall %s", "PASS" if verify["passed"] else "FAIL")
    return bool(verify["passed"])


STAGES = {
    "check": stage_check,
    "mollify": stage_mollify,
    "pde": stage_pde,
    "transform": stage_transform,
    "simulate": stage_simulate,
    "density": stage_density,
    "verify": stage_verify,
    "report": stage_report,
}


def run_stage(stage: str, cfg: ExperimentConfig, out_dir) -> bool:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if stage == "all":
        ok = True
        for name, fn in STAGES.items():
            log.info("=== stage %s ===", name)
            ok = fn(cfg, out) and ok
        return ok
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}")
    return STAGES[stage](cfg, out)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="quasiflow",
        description="singular-drift SDE flow laboratory: staged experiment runner")
    ap.add_argument("stage", choices=list(STAGES) + ["all"])
    ap.add_argument("--config", required=True, help="experiment TOML file")
    ap.add_argument("--seed", type=int, default=None,
                    help="override the config master seed")
    ap.add_argument("--workers", type=int, default=None,
                    help="worker threads for path chunks")
    ap.add_argument("--out", default=None,
                    help=f"output root (overrides ${OUT_ENV} and config)")
    ap.add_argument("-q", "--quiet", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s")
    try:
        cfg = ExperimentConfig.load(args.config)
        if args.seed is not None:
            cfg.data["seed"] = int(args.seed)
        if args.workers is not None:
            cfg.data["workers"] = int(args.workers)
        root = args.out or os.environ.get(OUT_ENV) or cfg.data["out_root"]
        out_dir = Path(root) / cfg.name
        ok = run_stage(args.stage, cfg, out_dir)
        if not ok:
            raise VerificationFailure("one or more verification checks failed")
        return 0
    except VerificationFailure as exc:
        log.error("FAIL: %s", exc)
        return 1
    except (ConfigError, MissingArtifactError) as exc:
        log.error("config error: %s", exc)
        return 2
    except QuasiflowError as exc:
        log.error("numerical failure: %s", exc)
        return 3


if __name__ == "__main__":
    sys.exit(main())
