"""Figure rendering for the report path: PNG files next to the delimited output.

Pure file emission (Agg backend, fixed geometry); nothing interactive.
"""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

FIGSIZE = (6.0, 4.0)
DPI = 120


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return str(path)


def plot_kam_contraction(steps, path):
    """log10 |P_n| against n from the run log rows."""
    ns = [row["n"] for row in steps]
    ps = [row["P_norm"] for row in steps]
    fig, ax = plt.subplots(figsize=FIGSIZE)
    ax.semilogy(ns, ps, "o-")
    ax.set_xlabel("KAM step n")
    ax.set_ylabel(r"$|P_n|_{\sigma_n,-2}$")
    ax.set_title("Remainder contraction")
    ax.grid(True, which="both", alpha=0.3)
    return _save(fig, path)


def plot_spectrum_residuals(spectrum_rows, path):
    """Scaled fit residuals per cluster, log-log."""
    js = [r["j"] for r in spectrum_rows if r["j"] > 0]
    res = [max(abs(r["residual_plus"]), abs(r["residual_minus"]), 1e-300)
           for r in spectrum_rows if r["j"] > 0]
    unscaled = [r / j ** 2 for j, r in zip(js, res)]
    fig, ax = plt.subplots(figsize=FIGSIZE)
    ax.loglog(js, unscaled, "o-", label=r"$|\mu_j - \mathrm{model}|$")
    ref = [unscaled[len(js) // 2] * (js[len(js) // 2] / j) ** 2 for j in js]
    ax.loglog(js, ref, "--", label=r"$j^{-2}$ reference")
    ax.set_xlabel("cluster j")
    ax.set_ylabel("fit residual")
    ax.set_title("Eigenvalue asymptotics")
    ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    return _save(fig, path)


def plot_measure_law(rows, path):
    gammas = [r["gamma"] for r in rows]
    fracs = [r["fraction"] for r in rows]
    errs = [3 * r["stderr"] for r in rows]
    fig, ax = plt.subplots(figsize=FIGSIZE)
    ax.errorbar(gammas, fracs, yerr=errs, fmt="o", capsize=3,
                label="measured")
    if any(f > 0 for f in fracs):
        slope = sum(f * g for f, g in zip(fracs, gammas)) / \
            sum(g * g for g in gammas)
        gs = sorted(gammas)
        ax.plot(gs, [slope * g for g in gs], "--",
                label=f"fit C = {slope:.3f}")
    ax.set_xlabel(r"$\gamma$")
    ax.set_ylabel("failing fraction")
    ax.set_title("Diophantine measure law")
    ax.legend()
    ax.grid(True, alpha=0.3)
    return _save(fig, path)


def plot_evolution_norms(trace_rows, path, label="direct"):
    ts = [r["t"] for r in trace_rows]
    fig, ax = plt.subplots(figsize=FIGSIZE)
    for key in ("l2", "h1", "h2", "analytic_sigma"):
        vals = [r[key] for r in trace_rows]
        base = vals[0] if vals and vals[0] != 0 else 1.0
        ax.plot(ts, [v / base for v in vals], label=key)
    ax.set_xlabel("t")
    ax.set_ylabel("norm / initial")
    ax.set_title(f"Norm stability ({label})")
    ax.legend()
    ax.grid(True, alpha=0.3)
    return _save(fig, path)


def plot_regularization_norms(reports, path):
    names = [r["step"].split("_", 1)[0] for r in reports]
    worst = [max(r["residuals"].values()) if r["residuals"] else 0.0
             for r in reports]
    fig, ax = plt.subplots(figsize=FIGSIZE)
    ax.bar(range(len(names)), [max(w, 1e-18) for w in worst])
    ax.set_yscale("log")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30)
    ax.set_ylabel("worst structural residual")
    ax.set_title("Regularization step residuals")
    ax.grid(True, axis="y", alpha=0.3)
    return _save(fig, path)
