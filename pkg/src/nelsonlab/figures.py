"""Figure rendering for scenario runs (PNG files next to the CSV output)."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .runner import RunResult

__all__ = ["render_run", "density_figure", "field_figure", "statistic_figure"]

_DPI = 110


def density_figure(dens, path: str, title: str = "reference density") -> None:
    g = dens.grid
    fig, ax = plt.subplots(figsize=(5.2, 3.4))
    if g.dim == 1:
        x = g.axes[0]
        ax.plot(x, dens.values, lw=1.4)
        ax.fill_between(x, 0.0, dens.values, where=dens.bulk_mask(), alpha=0.15,
                        label="bulk")
        ax.set_xlabel("x")
        ax.set_ylabel("p(x)")
        ax.legend(frameon=False, fontsize=8)
    else:
        im = ax.imshow(dens.values.T, origin="lower", aspect="auto",
                       extent=(g.lower[0], g.upper[0], g.lower[1], g.upper[1]))
        fig.colorbar(im, ax=ax, shrink=0.85)
        ax.set_xlabel("x0")
        ax.set_ylabel("x1")
    ax.set_title(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def field_figure(field, path: str, title: str) -> None:
    g = field.grid
    m = field.values.shape[-1]
    fig, ax = plt.subplots(figsize=(5.2, 3.4))
    if g.dim == 1:
        x = g.axes[0]
        for j in range(m):
            v = np.where(field.mask, field.values[..., j], np.nan)
            ax.plot(x, v, lw=1.3, label=f"component {j}" if m > 1 else None)
            if field.stderr is not None:
                se = np.where(field.mask, field.stderr[..., j], np.nan)
                ax.fill_between(x, v - 2 * se, v + 2 * se, alpha=0.25)
        ax.set_xlabel("x")
        if m > 1:
            ax.legend(frameon=False, fontsize=8)
    else:
        mag = np.sqrt(np.sum(field.values**2, axis=-1))
        mag = np.where(field.mask, mag, np.nan)
        im = ax.imshow(mag.T, origin="lower", aspect="auto",
                       extent=(g.lower[0], g.upper[0], g.lower[1], g.upper[1]))
        fig.colorbar(im, ax=ax, shrink=0.85)
        ax.set_xlabel("x0")
        ax.set_ylabel("x1")
    ax.set_title(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def statistic_figure(rep, path: str) -> None:
    """Bar chart for checks that summarize into scalars (z stats, lhs/rhs)."""
    fig, ax = plt.subplots(figsize=(6.2, 3.4))
    if rep.check == "reversibility" and "z_statistics" in rep.extras:
        items = sorted(rep.extras["z_statistics"].items(), key=lambda kv: -abs(kv[1]))
        items = items[:12]
        labels = [k for k, _ in items]
        vals = [abs(v) for _, v in items]
        ax.barh(range(len(vals)), vals, color="#36648b")
        ax.set_yticks(range(len(vals)))
        ax.set_yticklabels(labels, fontsize=7)
        gated = [r for r in rep.residuals if r.gated and r.tolerance is not None]
        gate = gated[0].tolerance if gated else None
        if gate:
            ax.axvline(gate, color="crimson", lw=1.0, ls="--", label=f"gate {gate:g}")
            ax.legend(frameon=False, fontsize=8)
        ax.set_xlabel("|z|")
        ax.invert_yaxis()
    elif rep.check == "girsanov_variation":
        lhs = rep.extras.get("lhs_mean", np.nan)
        rhs = rep.extras.get("rhs_mean", np.nan)
        lse = rep.extras.get("lhs_se", 0.0)
        rse = rep.extras.get("rhs_se", 0.0)
        ax.bar([0, 1], [lhs, rhs], yerr=[2 * lse, 2 * rse], capsize=6,
               color=["#36648b", "#8b5a36"], width=0.5)
        ax.set_xticks([0, 1])
        ax.set_xticklabels(["variation\n(central diff)", "noise functional"])
        if "expected_value" in rep.extras:
            ax.axhline(rep.extras["expected_value"], color="crimson", lw=1.0, ls="--",
                       label="closed form")
            ax.legend(frameon=False, fontsize=8)
    else:
        names = [r.name for r in rep.residuals]
        vals = [r.value for r in rep.residuals]
        tols = [r.tolerance for r in rep.residuals]
        ax.bar(range(len(vals)), vals, color="#36648b", width=0.5)
        for i, tol in enumerate(tols):
            if tol is not None:
                ax.plot([i - 0.3, i + 0.3], [tol, tol], color="crimson", lw=1.2)
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, fontsize=7, rotation=20, ha="right")
        ax.set_yscale("log")
    ax.set_title(f"{rep.name}: {rep.verdict}", fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def render_run(result: RunResult, out_dir: str) -> list:
    """Render all figures for a run into out_dir; returns the file names."""
    os.makedirs(out_dir, exist_ok=True)
    files = []
    if result.density is not None:
        name = "density.png"
        density_figure(result.density, os.path.join(out_dir, name),
                       title=f"{result.scenario.name}: reference density")
        files.append(name)
    for rep in result.reports:
        grid_fields = {k: f for k, f in rep.fields.items() if hasattr(f, "grid")}
        if "residual" in grid_fields:
            name = f"{rep.name}_residual.png"
            field_figure(grid_fields["residual"], os.path.join(out_dir, name),
                         title=f"{rep.name} residual ({rep.verdict})")
            files.append(name)
        elif "gap" in grid_fields:
            name = f"{rep.name}_gap.png"
            field_figure(grid_fields["gap"], os.path.join(out_dir, name),
                         title=f"{rep.name} forward/backward gap ({rep.verdict})")
            files.append(name)
        elif "imag_residual" in grid_fields:
            name = f"{rep.name}_imag_residual.png"
            field_figure(grid_fields["imag_residual"], os.path.join(out_dir, name),
                         title=f"{rep.name} imaginary residual ({rep.verdict})")
            files.append(name)
        if rep.check in ("reversibility", "girsanov_variation") or not grid_fields:
            name = f"{rep.name}_summary.png"
            statistic_figure(rep, os.path.join(out_dir, name))
            files.append(name)
    return files
