"""Report figures rendered next to the delimited outputs.

Everything draws on the Agg backend and writes straight to files; no
interactive state.  Figures are a convenience view of the CSV data, never
the source of truth.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_density_evolution(traj, path, max_curves: int = 9):
    """Snapshots of every species over time (1-D curves, 2-D final heat map)."""
    grid = traj.grid
    l = traj.n_species
    fig, axes = plt.subplots(1, l, figsize=(5.5 * l, 3.6), squeeze=False)
    picks = np.unique(np.linspace(0, traj.n_steps, max_curves).astype(int))
    cmap = plt.get_cmap("viridis")
    for i in range(l):
        ax = axes[0, i]
        if grid.dim == 1:
            x = grid.axes[0]
            for j, k in enumerate(picks):
                ax.plot(x, traj.densities[k][i].values,
                        color=cmap(j / max(len(picks) - 1, 1)),
                        lw=1.2, label=f"t={k * traj.h:.3g}")
            ax.legend(fontsize=7, ncol=2)
            ax.set_xlabel("x")
            ax.set_ylabel("density")
        else:
            im = ax.imshow(traj.densities[-1][i].values.T, origin="lower",
                           extent=(grid.lower[0], grid.upper[0],
                                   grid.lower[1], grid.upper[1]),
                           aspect="auto", cmap="viridis")
            fig.colorbar(im, ax=ax, fraction=0.046)
            ax.set_xlabel("x")
            ax.set_ylabel("y")
        ax.set_title(f"species {i + 1}")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_time_series(header, rows, path):
    """Mass drift, energies, movement, and residual columns over time."""
    data = np.asarray(rows, dtype=float)
    t = data[:, 0]
    cols = {name: data[:, j] for j, name in enumerate(header)}
    species = sorted({name.split("_")[-1] for name in header if name != "t"})
    fig, axes = plt.subplots(2, 2, figsize=(10, 6.4))
    for s in species:
        axes[0, 0].plot(t, np.abs(cols[f"mass_{s}"] - 1.0), label=f"species {s}")
        axes[0, 1].plot(t, cols[f"F_{s}"] + cols[f"V_{s}"], label=f"species {s}")
        axes[1, 0].plot(t, np.cumsum(cols[f"W2sq_increment_{s}"]), label=f"species {s}")
        axes[1, 1].plot(t[1:], cols[f"residual_{s}"][1:], label=f"species {s}")
    axes[0, 0].set_ylabel("|mass - 1|")
    axes[0, 0].set_yscale("symlog", linthresh=1e-16)
    axes[0, 1].set_ylabel("energy F + V")
    axes[1, 0].set_ylabel("cumulative squared movement")
    axes[1, 1].set_ylabel("optimality residual")
    axes[1, 1].set_yscale("log")
    for ax in axes.ravel():
        ax.set_xlabel("t")
        ax.legend(fontsize=8)
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_convergence(levels, errors, path, ylabel="error"):
    fig, ax = plt.subplots(figsize=(5.2, 3.8))
    ax.loglog(levels, errors, "o-", lw=1.4)
    ref = errors[0] * np.asarray(levels) / levels[0]
    ax.loglog(levels, ref, "k--", lw=0.9, label="first order")
    ax.set_xlabel("time step h")
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3, which="both")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_compare(times, dists, path):
    fig, ax = plt.subplots(figsize=(5.6, 3.8))
    d = np.maximum(np.asarray(dists, dtype=float), 0.0)
    ax.semilogy(times, np.maximum(d, 1e-300), "o-", lw=1.3, ms=3)
    ax.set_xlabel("t")
    ax.set_ylabel("summed squared distance")
    ax.grid(alpha=0.3, which="both")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
