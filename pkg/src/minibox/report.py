"""PNG figures for scenario results (matplotlib, headless)."""
from __future__ import annotations

import os
from typing import List

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .scenarios import ScenarioResult  # noqa: E402


def _save(fig, outdir: str, name: str) -> str:
    os.makedirs(outdir, exist_ok=True)
    path = os.path.join(outdir, name)
    fig.tight_layout()
    # fixed metadata keeps repeated renders byte-identical
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def _checks(res: ScenarioResult, outdir: str) -> str:
    fig, ax = plt.subplots(figsize=(7, 0.45 * len(res.checks) + 1))
    labels = [c.label for c in res.checks][::-1]
    colors = ["tab:green" if c.ok else "tab:red" for c in res.checks][::-1]
    ax.barh(range(len(labels)), [1] * len(labels), color=colors)
    ax.set_yticks(range(len(labels)))
    ax.set_yticklabels(labels, fontsize=8)
    ax.set_xticks([])
    ax.set_title(f"{res.name}: {sum(c.ok for c in res.checks)}/{len(res.checks)} checks pass")
    return _save(fig, outdir, f"{res.name}-checks.png")


def _dedup(res: ScenarioResult, outdir: str) -> str:
    fig, ax = plt.subplots(figsize=(7, 4))
    refs = sorted(res.series)
    for row, ref in enumerate(refs):
        left = 0.0
        for i, size in res.series[ref]:
            ax.barh(row, size, left=left, color=f"C{int(i) % 10}", edgecolor="white")
            left += size
    ax.set_yticks(range(len(refs)))
    ax.set_yticklabels(refs, fontsize=8)
    ax.set_xlabel("bytes referenced (one segment per layer, same colour = same depth)")
    ax.set_title(f"unique {res.metrics['unique_bytes']} B vs referenced {res.metrics['referenced_bytes']} B")
    return _save(fig, outdir, "dedup-layers.png")


def _oom(res: ScenarioResult, outdir: str) -> str:
    fig, ax = plt.subplots(figsize=(7, 4))
    for name, style in (("memory", "-"), ("volume-file", "--")):
        pts = res.series.get(name, [])
        ax.plot([p[0] for p in pts], [p[1] for p in pts], style, label=f"{name} driver")
    ax.axhline(res.metrics["limit"], color="tab:red", lw=0.8, label="memory limit")
    if res.metrics.get("killed_at"):
        ax.axvline(res.metrics["killed_at"], color="grey", lw=0.8, ls=":", label="oom kill")
    ax.set_xlabel("stdout write #")
    ax.set_ylabel("accounted usage (bytes)")
    ax.legend()
    return _save(fig, outdir, "oom-leak-usage.png")


def _ambassador(res: ScenarioResult, outdir: str) -> str:
    fig, ax = plt.subplots(figsize=(7, 4))
    for name in ("proxy", "tunnel"):
        pts = res.series.get(name, [])
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=name)
    ax.set_xlabel("round trip #")
    ax.set_ylabel("cumulative virtual time (ms)")
    ax.legend()
    return _save(fig, outdir, "ambassador-swap-latency.png")


EXTRA = {"dedup": _dedup, "oom-leak": _oom, "ambassador-swap": _ambassador}


def render(res: ScenarioResult, outdir: str) -> List[str]:
    """Write the figures for ``res`` into ``outdir``; returns their paths."""
    paths = [_checks(res, outdir)]
    if res.name in EXTRA:
        paths.append(EXTRA[res.name](res, outdir))
    return paths
