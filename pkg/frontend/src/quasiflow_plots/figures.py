"""The five figure kinds, each a pure function of artifact files.

Figures never recompute numerics: every plotted value (including the fitted
convergence order) comes out of a CSV or its manifest.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .artifacts import (SchemaError, find_density_csv, footer_text,
                        read_manifest, read_table)

KINDS = ("density-oracle", "rho-bar-paths", "lambda-curve",
         "mollify-convergence", "pde-order")

plt.rcParams.update({
    "figure.figsize": (6.4, 4.2),
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.dpi": 150,
})


@dataclass
class FigureSpec:
    run_dir: Path
    kind: str
    out_path: Path
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        self.run_dir = Path(self.run_dir)
        self.out_path = Path(self.out_path)
        if self.kind not in KINDS:
            raise SchemaError(f"unknown figure kind {self.kind!r}; "
                              f"known: {', '.join(KINDS)}")


@dataclass
class RenderResult:
    path: Path
    kind: str
    meta: dict


def _finish(fig, spec: FigureSpec, manifest: dict, meta: dict) -> RenderResult:
    fig.text(0.99, 0.01, footer_text(manifest), ha="right", va="bottom",
             fontsize=7, color="0.4")
    spec.out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(spec.out_path)
    plt.close(fig)
    return RenderResult(path=spec.out_path, kind=spec.kind, meta=meta)


def _density_table(spec: FigureSpec):
    csv_path = spec.options.get("density_csv") or find_density_csv(spec.run_dir)
    cols = read_table(csv_path, ["path", "x0_index", "t_index",
                                 "rho_bar", "K", "oracle_det", "rel_gap"])
    return csv_path, cols, read_manifest(csv_path)


def render_density_oracle(spec: FigureSpec) -> RenderResult:
    """Scatter of K against the FD Jacobian oracle at the final report time,
    with quantile bands of the relative gap over time."""
    csv_path, cols, man = _density_table(spec)
    t_final = cols["t_index"].max()
    at_final = cols["t_index"] == t_final
    ok = at_final & np.isfinite(cols["oracle_det"]) & np.isfinite(cols["K"])
    x = cols["oracle_det"][ok]
    y = cols["K"][ok]

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9.2, 4.0))
    ax1.scatter(x, y, s=6, alpha=0.4, linewidths=0, color="tab:blue")
    grid = np.linspace(min(x.min(), 1e-3), x.max() * 1.05, 64)
    ax1.plot(grid, 1.0 / grid, color="tab:red", lw=1.0,
             label="identity K = 1/det")
    ax1.set_xlabel("FD Jacobian det (X flow)")
    ax1.set_ylabel("density K at image point")
    ax1.legend(loc="best")
    ax1.set_title("density vs oracle, final time")

    t_indices = np.unique(cols["t_index"])
    qs = {q: [] for q in (0.25, 0.5, 0.75, 0.95)}
    for t in t_indices:
        g = cols["rel_gap"][(cols["t_index"] == t) & np.isfinite(cols["rel_gap"])]
        for q in qs:
            qs[q].append(np.quantile(g, q) if g.size else np.nan)
    for q, series in qs.items():
        ax2.plot(t_indices, series, label=f"q{int(q * 100)}")
    ax2.set_yscale("log")
    ax2.set_xlabel("report step")
    ax2.set_ylabel("|K * det - 1|")
    ax2.legend(loc="best")
    ax2.set_title("oracle gap quantiles")
    meta = {"n_points": int(ok.sum()), "k_min": float(y.min()),
            "k_max": float(y.max()), "source": str(csv_path)}
    return _finish(fig, spec, man, meta)


def render_rho_bar_paths(spec: FigureSpec) -> RenderResult:
    """rho_bar along a sample of trajectories over the report times."""
    csv_path, cols, man = _density_table(spec)
    n_show = int(spec.options.get("n_paths", 40))
    times = np.asarray(man.get("times", sorted(set(cols["t_index"]))), float)
    t_idx = np.unique(cols["t_index"])
    fig, ax = plt.subplots()
    shown = 0
    x0s = np.unique(cols["x0_index"])
    mid_x0 = x0s[len(x0s) // 2]
    for p in np.unique(cols["path"]):
        sel = (cols["path"] == p) & (cols["x0_index"] == mid_x0)
        if not np.any(sel):
            continue
        order = np.argsort(cols["t_index"][sel])
        ax.plot(times[: order.size], cols["rho_bar"][sel][order],
                lw=0.7, alpha=0.6)
        shown += 1
        if shown >= n_show:
            break
    ax.set_yscale("log")
    ax.set_xlabel("t")
    ax.set_ylabel(r"density $\bar\rho_t$")
    ax.set_title(f"Jacobian density along {shown} trajectories")
    return _finish(fig, spec, man, {"n_paths": shown, "n_times": len(t_idx),
                                    "source": str(csv_path)})


def render_lambda_curve(spec: FigureSpec) -> RenderResult:
    """Gradient sup against lambda per mollification level with the
    smallness target line."""
    csv_path = spec.run_dir / "lambda_search.csv"
    cols = read_table(csv_path, ["level", "lambda", "grad_sup"])
    man = read_manifest(csv_path)
    target = 0.5
    pde_json = spec.run_dir / "pde.json"
    if pde_json.exists():
        import json
        target = json.loads(pde_json.read_text()).get("target", 0.5)
    fig, ax = plt.subplots()
    for n in np.unique(cols["level"]):
        sel = cols["level"] == n
        lam = cols["lambda"][sel]
        order = np.argsort(lam)
        ax.plot(lam[order], cols["grad_sup"][sel][order], marker="o",
                label=f"level {int(n)}")
    ax.axhline(target, color="tab:red", lw=1.0, ls="--",
               label=f"target {target:g}")
    ax.set_xscale("log", base=2)
    ax.set_xlabel(r"$\lambda$")
    ax.set_ylabel(r"$\sup |\nabla u_\lambda|$")
    ax.set_title("gradient smallness across the doubling search")
    ax.legend(loc="best")
    return _finish(fig, spec, man, {"levels": len(np.unique(cols["level"])),
                                    "source": str(csv_path)})


def render_mollify_convergence(spec: FigureSpec) -> RenderResult:
    csv_path = spec.run_dir / "mollification.csv"
    cols = read_table(csv_path, ["level", "epsilon", "cutoff_radius",
                                 "error_lqp"])
    man = read_manifest(csv_path)
    fig, ax = plt.subplots()
    ax.plot(cols["level"], cols["error_lqp"], marker="s", color="tab:green")
    positive = cols["error_lqp"] > 0
    if np.all(positive):
        ax.set_yscale("log")
    ax.set_xlabel("mollification level n")
    ax.set_ylabel(r"$\|b^n - b\|_{L^q_p}$")
    ax.set_title("mollification error across levels")
    return _finish(fig, spec, man, {"n_levels": len(cols["level"]),
                                    "source": str(csv_path)})


def render_pde_order(spec: FigureSpec) -> RenderResult:
    csv_path = spec.run_dir / "pde_order.csv"
    cols = read_table(csv_path, ["h", "dt", "linf_error"])
    man = read_manifest(csv_path)
    order = man.get("order")
    fig, ax = plt.subplots()
    ax.loglog(cols["h"], cols["linf_error"], marker="o", color="tab:purple",
              label="measured")
    if order is not None:
        ref = cols["linf_error"][-1] * (cols["h"] / cols["h"][-1]) ** order
        ax.loglog(cols["h"], ref, ls="--", color="0.5",
                  label=f"slope {order:.2f}")
    ax.set_xlabel("h")
    ax.set_ylabel(r"$L^\infty$ error at t = 0")
    ax.set_title("manufactured-solution convergence")
    ax.legend(loc="best")
    return _finish(fig, spec, man, {"order": order, "source": str(csv_path)})


_RENDERERS = {
    "density-oracle": render_density_oracle,
    "rho-bar-paths": render_rho_bar_paths,
    "lambda-curve": render_lambda_curve,
    "mollify-convergence": render_mollify_convergence,
    "pde-order": render_pde_order,
}


def render(spec: FigureSpec) -> RenderResult:
    """Render one figure kind from a run directory to an image file."""
    return _RENDERERS[spec.kind](spec)
