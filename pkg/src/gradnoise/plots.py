"""SVG figures for experiment reports (matplotlib, Agg backend).

Files are written with a fixed hash salt and no date, so identical reports
give identical bytes.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["plot_report", "plot_curves", "STYLE"]

STYLE = {
    "svg.hashsalt": "gradnoise",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.figsize": (5.0, 3.2),
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.2,
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def _contraction(ax, m):
    t = np.asarray(m["times"])
    ax.fill_between(t, m["ratio_lower"], m["ratio_upper"], alpha=0.3, label="95% CI")
    ax.plot(t, m["ratio_mean"], label="mean ratio")
    ax.plot(t, np.exp(m["C_hat"] * t), "--", label=f"exp({m['C_hat']:.2f} t)")
    ax.set_xlabel("t")
    ax.set_ylabel("E|u - v|_1 / |xi_a - xi_b|_1")


def _phistab(ax, m):
    ax.errorbar(m["n"], m["distance_mean"], yerr=m["distance_half_width"], marker="o", capsize=3)
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel("n")
    ax.set_ylabel("E int |u_n - u_2n|_1 dt")


def _fracreg(ax, m, params):
    eps = np.asarray(params["epsilons"])
    ax.loglog(eps, m["lhs"], "o-", label=f"slope {m['slope']:.3f}")
    ref = m["lhs"][0] * (eps / eps[0]) ** m["exponent"]
    ax.loglog(eps, ref, "--", label=f"eps^{m['exponent']:.3f}")
    ax.set_xlabel("eps")
    ax.set_ylabel("box-kernel modulus")


def _entropy(ax, m):
    rows = m["levels"]
    sc = [r["scale"] for r in rows]
    ax.loglog(sc, [r["bound"] for r in rows], "o-", label="|mean| + CI")
    ax.loglog(sc, [r["tau"] for r in rows], "--", label="calibrated tau")
    ax.set_xlabel("h + dt^1/2 + delta")
    ax.set_ylabel("entropy residual")


def _moments(ax, m):
    for key in ("ratio_l2", "ratio_lm"):
        ax.plot(m[key]["values"], "o-", label=f"{key} (max/min {m[key]['max_over_min']:.2f})")
    ax.set_xlabel("configuration")
    ax.set_ylabel("moment ratio")


def _continuity(ax, m, params):
    ax.loglog(params["h"], m["g"], "o-")
    ax.set_xlabel("h")
    ax.set_ylabel("g(h)")


def _mcf(ax, m, params):
    Ms = params.get("Ms", [params.get("M")])
    ax.loglog(Ms, m["residual"], "o-", label="vs second difference")
    ax.loglog(Ms, m["spectral_residual"], "s-", label="vs spectral d_xx")
    ax.set_xlabel("M")
    ax.set_ylabel("max residual")


def plot_report(report: dict, path) -> None:
    """Render the natural figure for one report."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        kind = report.get("experiment")
        m = report.get("metrics", {})
        params = report.get("params", {})
        if kind == "contraction":
            _contraction(ax, m)
        elif kind == "phistab":
            _phistab(ax, m)
        elif kind == "fracreg":
            _fracreg(ax, m, params)
        elif kind == "entropy-refinement":
            _entropy(ax, m)
        elif kind == "moments":
            _moments(ax, m)
        elif kind == "initial-continuity":
            _continuity(ax, m, params)
        elif kind == "mcf-consistency":
            _mcf(ax, m, params)
        else:
            raise ValueError(f"no plot for experiment {kind!r}")
        ax.set_title(f"{kind}: {'pass' if report.get('passed') else 'FAIL'}")
        if ax.get_legend_handles_labels()[0]:
            ax.legend()
        _save(fig, path)


def plot_curves(x, curves: dict, path, xlabel: str = "x", ylabel: str = "") -> None:
    """Overlay of several curves sharing ``x`` (e.g. graph snapshots)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for label, y in curves.items():
            ax.plot(x, y, label=str(label))
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if curves:
            ax.legend()
        _save(fig, path)
