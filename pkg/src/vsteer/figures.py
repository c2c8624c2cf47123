"""Figure rendering for evaluation reports (headless Agg backend).

All functions take plain row dicts (the same records the CSVs hold) and
write a PNG; nothing here affects the numbers.
"""
from __future__ import annotations

from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def success_rate_bars(rows, path):
    """Grouped success-rate bars per label with Wilson CI whiskers."""
    pooled = defaultdict(lambda: [0, 0])
    cis = defaultdict(list)
    for r in rows:
        if "n_episodes" not in r or r.get("n_episodes") in (None, ""):
            continue
        pooled[r["label"]][0] += int(r["n_success"])
        pooled[r["label"]][1] += int(r["n_episodes"])
        cis[r["label"]].append((float(r["ci_low"]), float(r["ci_high"])))
    labels = list(pooled)
    rates = [pooled[l][0] / pooled[l][1] for l in labels]
    lo = [min(c[0] for c in cis[l]) for l in labels]
    hi = [max(c[1] for c in cis[l]) for l in labels]
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(labels)), 3.5))
    x = range(len(labels))
    ax.bar(x, rates, color="#4878d0")
    ax.errorbar(x, rates,
                yerr=[[r - l for r, l in zip(rates, lo)],
                      [h - r for r, h in zip(rates, hi)]],
                fmt="none", ecolor="black", capsize=3)
    ax.set_xticks(list(x))
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("success rate")
    ax.set_ylim(0, 1.05)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def timing_curve(rows, path):
    """Median decision latency and overhead ratio versus candidate count."""
    rows = sorted(rows, key=lambda r: r["num_candidates"])
    k = [r["num_candidates"] for r in rows]
    med = [r["median_seconds"] for r in rows]
    over = [r["overhead"] for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(7, 3))
    ax1.plot(k, med, marker="o")
    ax1.set_xlabel("candidates per decision")
    ax1.set_ylabel("median seconds")
    ax2.plot(k, over, marker="o", color="#d65f5f")
    ax2.set_xlabel("candidates per decision")
    ax2.set_ylabel("overhead vs raw policy")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def training_curve(rows, path):
    """Loss and Q diagnostics over training steps."""
    steps = [r["step"] for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(7, 3))
    for key in ("td_loss", "v_loss", "actor_loss"):
        vals = [r.get(key) for r in rows]
        if any(v == v and v is not None for v in vals):  # drop all-NaN series
            ax1.plot(steps, vals, label=key)
    ax1.set_xlabel("step")
    ax1.set_ylabel("loss")
    ax1.legend(fontsize=7)
    for key in ("mean_dataset_q", "mean_ood_q"):
        vals = [r.get(key) for r in rows]
        if any(v == v and v is not None for v in vals):
            ax2.plot(steps, vals, label=key)
    ax2.set_xlabel("step")
    ax2.set_ylabel("mean Q")
    ax2.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
