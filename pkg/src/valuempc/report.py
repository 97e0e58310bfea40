"""Run artifacts: manifest, delimited tables and figures.

Every run directory gets ``manifest.json`` before any computation starts.
Tables are comma separated UTF-8 with a header row; the last line of each is
a comment ``# manifest_sha256=<hex>`` tying it to the manifest.  Figures are
rendered with the Agg backend next to the tables they display.
"""
from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np

from . import __version__


def make_manifest(command, env_name, config, seed, out_dir):
    return {"command": command, "env": env_name, "config": config, "seed": int(seed),
            "version": __version__, "out": str(out_dir)}


def manifest_digest(manifest):
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":"), default=_plain)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def write_manifest(out_dir, manifest):
    """Write ``manifest.json`` and return its digest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_plain)
                                           + "\n", encoding="utf-8")
    return manifest_digest(manifest)


def _plain(v):
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.floating):
        return float(v)
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (tuple, set)):
        return list(v)
    raise TypeError(f"not serializable: {type(v).__name__}")


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.floating):
        return float(v)
    return v


def write_csv(path, rows, fields=None, digest=None):
    """Write dict rows with a header; an empty table still gets its header."""
    rows = list(rows)
    if fields is None:
        fields = list(rows[0]) if rows else []
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _cell(v) for k, v in row.items()})
    if digest is not None:
        append_footer(path, digest)
    return Path(path)


def append_footer(path, digest):
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(f"# manifest_sha256={digest}\n")


def read_csv(path):
    """Rows of a table written by ``write_csv`` (footer comments skipped)."""
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


# -- figures ----------------------------------------------------------------------

def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def plot_training(metrics, path):
    plt = _pyplot()
    it = [r["iteration"] for r in metrics]
    fig, ax = plt.subplots(1, 2, figsize=(9, 3.5))
    ax[0].semilogy(it, [max(r["bellman_residual"], 1e-12) for r in metrics])
    ax[0].set_xlabel("iteration")
    ax[0].set_ylabel("mean |V - target|")
    ax[1].plot(it, [r["dropped"] for r in metrics])
    ax[1].set_xlabel("iteration")
    ax[1].set_ylabel("dropped solves")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_rollouts(env, traces, path, limit=50):
    """State trajectories (first two coordinates) and running cost per step."""
    plt = _pyplot()
    fig, ax = plt.subplots(1, 2, figsize=(9, 4))
    for tr in traces[:limit]:
        xs = tr.states
        ax[0].plot(xs[:, 0], xs[:, 1] if xs.shape[1] > 1 else np.zeros(len(xs)), lw=0.8,
                   color="tab:green" if tr.reached else "tab:red")
        ax[0].plot(xs[:1, 0], xs[:1, 1] if xs.shape[1] > 1 else [0.0], "k.", ms=3)
        ax[1].semilogy(np.maximum(tr.costs, 1e-12), lw=0.8)
    obstacle = getattr(env, "obstacle", None)
    if obstacle is not None and not getattr(env, "context_dim", 0):
        c, h = np.asarray(obstacle.center), np.asarray(obstacle.half_extents)
        ax[0].add_patch(plt.Rectangle(c - h - obstacle.radius, *(2 * (h + obstacle.radius)),
                                      fill=False, color="k"))
        ax[0].set_aspect("equal")
    ax[0].set_xlabel("x0")
    ax[0].set_ylabel("x1")
    ax[1].set_xlabel("step")
    ax[1].set_ylabel("running cost")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_horizon_train(rows, path):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for T in sorted({r["horizon"] for r in rows}):
        sel = [r for r in rows if r["horizon"] == T]
        ax.semilogy([r["iteration"] for r in sel], [r["mse"] for r in sel], label=f"T={T}")
    ax.set_xlabel("iteration")
    ax.set_ylabel("held-out MSE")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_horizon_test(rows, path):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name in sorted({r["value"] for r in rows}):
        sel = sorted((r for r in rows if r["value"] == name), key=lambda r: r["horizon"])
        ax.plot([r["horizon"] for r in sel], [r["cost_gap"] for r in sel], "o-", label=name)
    ax.set_xlabel("test horizon (0 = policy)")
    ax.set_ylabel("mean cost gap")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
