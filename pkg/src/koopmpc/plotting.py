"""Figure rendering for CLI reports (files only, Agg backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no timestamps in the PNG metadata, so reruns give identical files
_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)
    return path


def plot_prediction(path, Ts, truth, predictions: dict, labels=None):
    """Truth and predicted trajectories, one panel per component."""
    truth = np.atleast_2d(truth)
    n = truth.shape[0]
    t = Ts * np.arange(truth.shape[1])
    fig, axes = plt.subplots(n, 1, figsize=(6, 2.4 * n), squeeze=False)
    for i, ax in enumerate(axes[:, 0]):
        ax.plot(t, truth[i], "k", lw=2, label="true")
        for name, pred in predictions.items():
            p = np.atleast_2d(pred)[i]
            # divergent comparators would flatten the plot
            p = np.where(np.abs(p) > 10 * np.abs(truth).max() + 1, np.nan, p)
            ax.plot(t, p, "--", label=name)
        ax.set_ylabel(labels[i] if labels else f"x{i + 1}")
    axes[-1, 0].set_xlabel("time [s]")
    axes[0, 0].legend(fontsize=7)
    return _save(fig, path)


def plot_rmse_summary(path, summary: dict, log=True):
    """Bar chart of mean RMSE per predictor."""
    names = list(summary)
    vals = [summary[k] for k in names]
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.bar(range(len(names)), vals)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=20, fontsize=7)
    if log:
        ax.set_yscale("log")
    ax.set_ylabel("mean RMSE [%]")
    return _save(fig, path)


def plot_rmse_vs_size(path, sizes, means):
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(sizes, means, "o-")
    ax.set_xlabel("number of RBFs")
    ax.set_ylabel("mean RMSE [%]")
    return _save(fig, path)


def plot_closed_loop(path, res, reference=None, y_bounds=None, title=None):
    """Output with reference and bounds, and the applied input."""
    fig, (ay, au) = plt.subplots(2, 1, figsize=(6, 4.5), sharex=True)
    for i in range(res.y.shape[0]):
        ay.plot(res.t, res.y[i], label=f"y{i}")
    if reference is not None:
        ay.plot(res.t, [reference(k)[0] for k in range(res.t.size)], "k--",
                label="reference")
    if y_bounds is not None:
        for b in y_bounds:
            ay.axhline(b, color="r", lw=0.8)
    if res.infeasible_step is not None:
        ay.axvline(res.t[res.infeasible_step], color="m", ls=":",
                   label="infeasible")
    ay.legend(fontsize=7)
    ay.set_ylabel("y")
    for i in range(res.u.shape[0]):
        au.step(res.t, res.u[i], where="post", label=f"u{i}")
    au.set_ylabel("u")
    au.set_xlabel("time [s]")
    if title:
        ay.set_title(title)
    return _save(fig, path)


def plot_kdv(path, res, reference):
    """Space-time solution, spatial mean with reference, and inputs."""
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.2))
    axes[0].imshow(res.y, aspect="auto", origin="lower",
                   extent=[res.t[0], res.t[-1], -np.pi, np.pi])
    axes[0].set_xlabel("t [s]")
    axes[0].set_ylabel("x")
    axes[1].plot(res.t, res.y.mean(axis=0), label="spatial mean")
    axes[1].plot(res.t, [reference(k)[0] for k in range(res.t.size)], "k--",
                 label="reference")
    axes[1].legend(fontsize=7)
    axes[1].set_xlabel("t [s]")
    for i in range(res.u.shape[0]):
        axes[2].plot(res.t, res.u[i], label=f"u{i + 1}")
    axes[2].legend(fontsize=7)
    axes[2].set_xlabel("t [s]")
    return _save(fig, path)
