"""Branch diagrams and flat-shaded solution heatmaps rendered to SVG files.

Output is deterministic (fixed SVG hash salt, no date metadata) so tests can
compare structure across runs.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .mesh import interp_node_to_tri  # noqa: E402

plt.rcParams["svg.hashsalt"] = "pdecont"

_SAVEFIG_KW = dict(format="svg", metadata={"Date": None})


def plot_branch(branch_files, out_path, component=2, labels=None, title=None):
    """Bifurcation diagram: output column `component` (1-based) over lam.

    Thick segments mark stable parts (unstable count 0), thin segments
    unstable ones, circles the located bifurcation points.  Several files
    overlay into one figure.
    """
    from .session import read_branch

    if isinstance(branch_files, (str, Path)):
        branch_files = [branch_files]
    fig, ax = plt.subplots(figsize=(5.4, 4.2))
    colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]
    for fi, path in enumerate(branch_files):
        data = read_branch(path)
        col = f"out{component}"
        if col not in data:
            raise KeyError(f"{path}: no column {col!r}")
        lam = data["lam"]
        val = data[col]
        nneg = data.get("nneg")
        bif = data.get("bif")
        color = colors[fi % len(colors)]
        label = labels[fi] if labels else Path(path).parent.name
        n = lam.size
        if n == 0:
            continue
        for k in range(n - 1):
            stable = nneg is not None and np.isfinite(nneg[k]) \
                and np.isfinite(nneg[k + 1]) \
                and nneg[k] == 0 and nneg[k + 1] == 0
            ax.plot(lam[k:k + 2], val[k:k + 2], color=color,
                    lw=2.4 if stable else 0.9,
                    label=label if k == 0 else None)
        if n == 1:
            ax.plot(lam, val, marker=".", color=color, label=label)
        if bif is not None:
            sel = bif == 1
            if sel.any():
                ax.plot(lam[sel], val[sel], "o", mfc="none", mec=color, ms=8)
    ax.set_xlabel("lambda")
    ax.set_ylabel(f"out{component}")
    if title:
        ax.set_title(title)
    if labels:
        ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, **_SAVEFIG_KW)
    plt.close(fig)
    return Path(out_path)


def plot_solution(mesh, u, out_path, component=1, title=None):
    """Per-triangle flat-shaded map of one solution component with colorbar."""
    n_p = mesh.n_points
    u = np.asarray(u, dtype=float).ravel()
    ncomp = u.size // n_p
    if not (1 <= component <= ncomp):
        raise ValueError(f"component {component} outside 1..{ncomp}")
    vals = interp_node_to_tri(mesh, u)[component - 1]
    vmin, vmax = float(vals.min()), float(vals.max())
    if vmax - vmin < 1e-15:  # constant field: widen the range for the colormap
        vmin, vmax = vmin - 1.0, vmax + 1.0
    fig, ax = plt.subplots(figsize=(5.2, 4.4))
    tpc = ax.tripcolor(mesh.points[:, 0], mesh.points[:, 1], mesh.triangles,
                       facecolors=vals, vmin=vmin, vmax=vmax)
    cbar = fig.colorbar(tpc, ax=ax)
    cbar.set_label(f"u{component}  [{vals.min():.3g}, {vals.max():.3g}]")
    ax.set_aspect("equal")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out_path, **_SAVEFIG_KW)
    plt.close(fig)
    return Path(out_path)


def plot_solution_state(state, out_path, component=1):
    return plot_solution(state.mesh, state.u, out_path, component=component,
                         title=f"lam = {state.lam:.5g}")
