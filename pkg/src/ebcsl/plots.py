"""Figures for run directories. Uses the non-interactive Agg backend."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _read_csv(path):
    with Path(path).open() as fh:
        rows = list(csv.DictReader(fh))
    return {k: np.array([float(r[k]) for r in rows]) for k in rows[0]} if rows else {}


def plot_training(metrics_csv, out_png, window: int = 20):
    """Return, safety return and multipliers per iteration."""
    d = _read_csv(metrics_csv)
    if not d:
        return None
    it = d["iteration"]

    def smooth(x):
        if x.size < window:
            return x
        k = np.ones(window) / window
        return np.convolve(x, k, mode="valid")

    fig, axes = plt.subplots(3, 1, figsize=(7, 8), sharex=True)
    for ax, key, label in ((axes[0], "mean_return", "operational return"),
                           (axes[1], "mean_safety", "safety return (kWh)")):
        ax.plot(it, d[key], color="0.8", lw=0.8)
        s = smooth(d[key])
        ax.plot(it[it.size - s.size:], s, lw=1.5)
        ax.set_ylabel(label)
    axes[2].plot(it, d["lambda_H"], label="lambda H")
    axes[2].plot(it, d["lambda_L"], "--", label="lambda L")
    axes[2].set_ylabel("multiplier")
    axes[2].set_xlabel("iteration")
    axes[2].legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=110)
    plt.close(fig)
    return out_png


def plot_schedule(trace_csv, out_png, e_min: float | None = None):
    """Energy and power per EB with the price and PV profile of one episode."""
    d = _read_csv(trace_csv)
    if not d:
        return None
    M = int(d["m"].max()) + 1
    fig, axes = plt.subplots(3, 1, figsize=(8, 8), sharex=True)
    for m in range(M):
        sel = d["m"] == m
        t = d["t"][sel]
        axes[0].step(t, d["E"][sel], where="post", label=f"EB {m}")
        axes[1].step(t, d["p"][sel], where="post", label=f"EB {m}")
    if e_min is not None:
        axes[0].axhline(e_min, color="k", ls=":", lw=1)
    axes[0].set_ylabel("energy (kWh)")
    axes[0].legend(fontsize=8)
    axes[1].set_ylabel("power (kW)")
    sel = d["m"] == 0
    axes[2].step(d["t"][sel], d["price"][sel], where="post", color="tab:red")
    axes[2].set_ylabel("price ($/kWh)")
    ax2 = axes[2].twinx()
    ax2.step(d["t"][sel], d["pv"][sel], where="post", color="tab:orange")
    ax2.set_ylabel("PV (kW)")
    axes[2].set_xlabel("step")
    fig.tight_layout()
    fig.savefig(out_png, dpi=110)
    plt.close(fig)
    return out_png
