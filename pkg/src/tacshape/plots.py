"""Report figures rendered alongside the delimited outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_loss_curves(history: list[dict], path, title: str = "training losses") -> None:
    if not history:
        return
    keys = [k for k in ("depth", "normal", "sdf", "freespace", "eikonal", "nc", "miss")
            if any(k in row for row in history)]
    steps = [row["step"] for row in history]
    fig, ax = plt.subplots(figsize=(8, 4.5))
    for key in keys:
        vals = np.array([row.get(key, np.nan) for row in history], dtype=float)
        ax.plot(steps, vals, label=key, linewidth=1.0)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend(loc="upper right", fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_contact_sheet(observations, path, max_tiles: int = 20) -> None:
    """Montage of contact depth maps."""
    obs = observations[:max_tiles]
    if not obs:
        return
    cols = min(5, len(obs))
    rows = (len(obs) + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(2.2 * cols, 1.8 * rows))
    axes = np.atleast_1d(axes).reshape(-1)
    vmax = max(float(o.depth.max()) for o in obs) or 1.0
    for ax, o in zip(axes, obs):
        ax.imshow(np.where(o.mask, o.depth, np.nan), vmin=0.0, vmax=vmax,
                  cmap="viridis")
        ax.set_title(f"touch {o.touch_id}", fontsize=8)
        ax.axis("off")
    for ax in axes[len(obs):]:
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_eval_histogram(recon_pts: np.ndarray, gt_pts: np.ndarray, path) -> None:
    from scipy.spatial import cKDTree
    d_rg, _ = cKDTree(gt_pts).query(recon_pts)
    d_gr, _ = cKDTree(recon_pts).query(gt_pts)
    fig, ax = plt.subplots(figsize=(6, 4))
    bins = np.linspace(0.0, max(d_rg.max(), d_gr.max()) + 1e-9, 60)
    ax.hist(d_rg, bins=bins, alpha=0.6, label="recon to gt")
    ax.hist(d_gr, bins=bins, alpha=0.6, label="gt to recon")
    ax.set_xlabel("nearest-neighbour distance")
    ax.set_ylabel("count")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_history_csv(history: list[dict], path) -> None:
    """Delimited companion to the JSONL report."""
    if not history:
        return
    keys: list[str] = []
    for row in history:
        for k in row:
            if k not in keys:
                keys.append(k)
    with open(path, "w") as fh:
        fh.write(",".join(keys) + "\n")
        for row in history:
            fh.write(",".join(str(row.get(k, "")) for k in keys) + "\n")


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
