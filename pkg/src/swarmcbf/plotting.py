"""SVG figures for runs and comparisons (matplotlib, Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams["svg.hashsalt"] = "swarmcbf"  # stable element ids between reruns
_META = {"Date": None}


def _save(fig, path) -> str:
    fig.savefig(path, format="svg", metadata=_META, bbox_inches="tight")
    plt.close(fig)
    return Path(path).name


def _series(diags, key):
    t = np.array([d["t"] for d in diags], dtype=float)
    v = np.array([d[key] for d in diags], dtype=float)
    return t, v


def plot_series(diags, keys, path, threshold=None, ylabel=None, labels=None) -> str:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for k, key in enumerate(keys):
        t, v = _series(diags, key)
        ax.plot(t, v, label=labels[k] if labels else key)
    if threshold is not None:
        ax.axhline(threshold, color="k", ls="--", lw=0.8)
    ax.set_xlabel("t")
    ax.set_ylabel(ylabel or ", ".join(keys))
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_density_1d(grid, times, rhos, path, target=None, bands=()) -> str:
    x = grid.centers()[:, 0]
    fig, ax = plt.subplots(figsize=(7, 3.5))
    for lo, hi, level in bands:
        ax.axvspan(lo, hi, color="tab:red", alpha=0.08)
        ax.hlines(level, lo, hi, color="tab:red", lw=1)
    cmap = plt.get_cmap("viridis")
    for k, (t, rho) in enumerate(zip(times, rhos)):
        ax.plot(x, rho.values, color=cmap(k / max(len(rhos) - 1, 1)), lw=1, label=f"t={t:.2f}")
    if target is not None:
        ax.plot(x, target.values, "k--", lw=1, label="target")
    ax.set_xlabel("x")
    ax.set_ylabel("density")
    ax.legend(fontsize=7, ncol=2)
    return _save(fig, path)


def plot_density_2d(grid, times, rhos, path, regions=()) -> str:
    n = len(rhos)
    fig, axes = plt.subplots(1, n, figsize=(2.6 * n, 2.8), squeeze=False)
    (x0, x1), (y0, y1) = grid.bounds
    for ax, t, rho in zip(axes[0], times, rhos):
        ax.imshow(rho.values.T, origin="lower", extent=(x0, x1, y0, y1), cmap="magma")
        for (a, b), (c, d) in regions:
            ax.add_patch(plt.Rectangle((a, c), b - a, d - c, fill=False, ec="c", lw=1))
        ax.set_title(f"t={t:.2f}", fontsize=8)
        ax.set_xticks([])
        ax.set_yticks([])
    return _save(fig, path)


def plot_swarm(snapshots, path, bounds, rho_max=None) -> str:
    n = len(snapshots)
    fig, axes = plt.subplots(1, n, figsize=(2.6 * n, 2.8), squeeze=False)
    for ax, s in zip(axes[0], snapshots):
        c = s.rho_hat
        if rho_max is not None:
            c = np.where(s.rho_hat > rho_max, 1.0, 0.0)
        ax.scatter(s.positions[:, 0], s.positions[:, 1], c=c, s=2, cmap="coolwarm")
        ax.set_xlim(*bounds[0])
        ax.set_ylim(*bounds[1])
        ax.set_aspect("equal")
        ax.set_title(f"t={s.t:.2f}", fontsize=8)
        ax.set_xticks([])
        ax.set_yticks([])
    return _save(fig, path)


def _pick(seq, k=5):
    if len(seq) <= k:
        return list(range(len(seq)))
    return sorted(set(np.linspace(0, len(seq) - 1, k).round().astype(int).tolist()))


def plot_run(cfg, rep, payload, d: Path) -> list:
    files = []
    diags = rep.diagnostics
    traj = payload["traj"]
    if cfg.mode == "macroscopic":
        grid = payload["grid"]
        idx = _pick(traj.snapshots)
        times = [traj.times[i] for i in idx]
        rhos = [traj.snapshots[i] for i in idx]
        if grid.dim == 1:
            bands = [(b["region"][0][0], b["region"][0][1], b["bound"]) for b in cfg.barriers
                     if b["kind"] == "pointwise-cap" and b["region"] is not None]
            files.append(plot_density_1d(grid, times, rhos, d / "density.svg", payload["target"], bands))
        elif grid.dim == 2:
            regions = [b["region"] for b in cfg.barriers if b["region"] is not None]
            files.append(plot_density_2d(grid, times, rhos, d / "density.svg", regions))
        hkeys = [k for k in diags[0] if k.startswith("H_")]
        if hkeys:
            files.append(plot_series(diags, hkeys, d / "barriers.svg", threshold=0.0, ylabel="barrier value"))
        files.append(plot_series(diags, ["w2_to_target"], d / "w2.svg"))
    else:
        s = cfg.swarm
        idx = _pick(traj.snapshots)
        files.append(plot_swarm([traj.snapshots[i] for i in idx], d / "swarm.svg", cfg.grid["bounds"],
                                s["rho_max"] if s["mode"] == "cap" else None))
        if s["mode"] == "cap":
            keys = [k for k in ("frac_over_max", "frac_under_min") if k in diags[0]]
            files.append(plot_series(diags, keys, d / "fractions.svg", ylabel="fraction of agents"))
        else:
            files.append(plot_series(diags, ["entropy_hat"], d / "entropy.svg", threshold=s["entropy_eps"]))
    return files


def plot_compare(a, b, out: Path) -> list:
    da, db = a["diagnostics"], b["diagnostics"]
    na, nb = a["report"]["config"]["name"], b["report"]["config"]["name"]
    keys = [k for k in da[0] if k in db[0] and k not in ("t", "step", "N")
            and isinstance(da[0][k], float) and isinstance(db[0][k], float)]
    files = []
    for key in keys:
        fig, ax = plt.subplots(figsize=(6, 3.5))
        for diags, name, ls in ((da, na, "-"), (db, nb, "--")):
            t, v = _series(diags, key)
            ax.plot(t, v, ls, label=name)
        if key.startswith("H_"):
            ax.axhline(0.0, color="k", lw=0.6)
        ax.set_xlabel("t")
        ax.set_ylabel(key)
        ax.legend(fontsize=8)
        files.append(_save(fig, out / f"compare_{key}.svg"))
    return files
