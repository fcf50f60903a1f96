"""Figure rendering for attack runs, sweeps, and trigger previews.

All entry points write files and return the paths written; nothing is
shown interactively (backend is forced to Agg so runs work headless).
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from . import trigger as tg


def plot_convergence(trace, path):
    """Two-panel view of an optimization trace: losses and residuals."""
    fig, (ax_loss, ax_res) = plt.subplots(1, 2, figsize=(10, 3.6))
    it = trace.iterations
    ax_loss.plot(it, trace.clean_loss, label="clean loss", lw=1.0)
    ax_loss.plot(it, trace.trojan_loss, label="trojan loss", lw=1.0)
    ax_loss.set_xlabel("iteration")
    ax_loss.set_ylabel("summed cross entropy")
    ax_loss.legend(fontsize=8)

    ax_res.semilogy(it, trace.box_residual, label="box residual", lw=1.0)
    ax_res.semilogy(it, trace.sphere_residual, label="sphere residual", lw=1.0)
    ax_res.set_xlabel("iteration")
    ax_res.set_ylabel("squared split distance")
    ax_rho = ax_res.twinx()
    ax_rho.semilogy(it, trace.rho, color="gray", ls=":", lw=0.8, label="rho")
    ax_rho.set_ylabel("penalty", color="gray")
    ax_res.legend(fontsize=8, loc="lower left")

    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return [str(path)]


def plot_sweep(param, values, reports, path):
    """Metric curves over a swept parameter.

    `reports` may contain None entries for skipped (infeasible) values;
    those points are simply absent from the curves.
    """
    kept = [(v, r) for v, r in zip(values, reports) if r is not None]
    fig, (ax, ax_flip) = plt.subplots(1, 2, figsize=(10, 3.6))
    if kept:
        xs = [v for v, _ in kept]
        for key, style in (("asr", "-o"), ("pa_ta", "-s"), ("ta", "--")):
            ax.plot(xs, [getattr(r, key) for _, r in kept], style,
                    ms=3, lw=1.0, label=key)
        ax.set_ylim(-2, 102)
        ax_flip.plot(xs, [r.n_flip for _, r in kept], "-d", ms=3, lw=1.0,
                     color="tab:red")
    ax.set_xlabel(param)
    ax.set_ylabel("percent")
    ax.legend(fontsize=8)
    ax_flip.set_xlabel(param)
    ax_flip.set_ylabel("bit flips")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return [str(path)]


def render_trigger_panel(images, trig, path, amplify=10.0, max_images=8):
    """Clean / triggered / amplified-difference strips for a few images."""
    images = np.asarray(images, dtype=np.float64)[:max_images]
    warped = tg.warp(images, trig)
    diff = np.abs(warped - images)
    n = images.shape[0]
    fig, axes = plt.subplots(3, n, figsize=(1.4 * n, 4.4), squeeze=False)
    rows = (images, warped, np.clip(amplify * diff, 0.0, 1.0))
    names = ("clean", "triggered", f"|diff| x{amplify:g}")
    for r, (row, name) in enumerate(zip(rows, names)):
        for c in range(n):
            img = row[c]
            axes[r][c].imshow(img.squeeze(-1) if img.shape[-1] == 1 else img,
                              cmap="gray", vmin=0.0, vmax=1.0)
            axes[r][c].set_axis_off()
        axes[r][0].set_title(name, fontsize=8, loc="left")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return [str(path)]
