"""Plots and text tables rendered from a run trace.  Never writes to the trace."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# stable SVG bytes: fixed hash salt and no timestamp
matplotlib.rcParams["svg.hashsalt"] = "leasesim"
_SVG_META = {"Date": None, "Creator": None}


def trajectories(records: Sequence[dict]) -> Dict[str, Dict[str, List]]:
    """Per-vehicle (t, s, v, phase) series from tick-state records."""
    out: Dict[str, Dict[str, List]] = {}
    for r in records:
        if r.get("kind") != "tick-state":
            continue
        for vid, s, v, _x, _y, phase in r["vehicles"]:
            tr = out.setdefault(vid, {"t": [], "s": [], "v": [], "phase": []})
            tr["t"].append(r["t"])
            tr["s"].append(s)
            tr["v"].append(v)
            tr["phase"].append(phase)
    return out


def lease_bars(records: Sequence[dict]) -> List[dict]:
    """One bar per (lease id, block) with its final window, cut at deletion time."""
    bars: Dict[tuple, dict] = {}
    for r in records:
        if r.get("kind") != "lease-event":
            continue
        for l in r.get("leases", []):
            key = (l["lease_id"], l["block_id"])
            if l["status"] == "Cancelled":
                if key in bars:
                    bars[key]["deleted_at"] = r["t"]
                continue
            bars[key] = {"lease_id": l["lease_id"], "block": l["block_id"], "holder": l["holder_id"],
                         "path": l["path_id"], "kind": l["kind"], "t_start": l["t_start"], "t_end": l["t_end"],
                         "deleted_at": None}
    out = []
    for b in bars.values():
        end = b["t_end"] if b["deleted_at"] is None else min(b["t_end"], b["deleted_at"])
        if end > b["t_start"]:
            out.append(dict(b, shown_end=end))
    return sorted(out, key=lambda b: (b["block"], b["t_start"], b["lease_id"]))


def _holder_colors(ids):
    cmap = plt.get_cmap("tab10")
    return {vid: cmap(i % 10) for i, vid in enumerate(sorted(ids))}


def plot_time_space(records: Sequence[dict], path: Path):
    traj = trajectories(records)
    colors = _holder_colors(traj)
    fig, ax = plt.subplots(figsize=(7, 4))
    for vid, tr in sorted(traj.items()):
        ax.plot(tr["t"], tr["s"], color=colors[vid], lw=1.0, label=vid)
        xs = [t for t, ph in zip(tr["t"], tr["phase"]) if ph == "Crossing"]
        ys = [s for s, ph in zip(tr["s"], tr["phase"]) if ph == "Crossing"]
        ax.plot(xs, ys, color=colors[vid], lw=3.0, solid_capstyle="butt")
    ax.set_xlabel("time [s]")
    ax.set_ylabel("arc length along own path [m]")
    ax.set_title("Trajectories (thick: inside the conflict zone)")
    if traj:
        ax.legend(loc="upper left", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)


def plot_gantt(records: Sequence[dict], path: Path):
    bars = lease_bars(records)
    colors = _holder_colors({b["holder"] for b in bars})
    rows = sorted({(b["block"], b["holder"]) for b in bars})
    index = {r: i for i, r in enumerate(rows)}
    fig, ax = plt.subplots(figsize=(7, 1.2 + 0.35 * max(len(rows), 1)))
    for b in bars:
        y = index[(b["block"], b["holder"])]
        ax.barh(y, b["shown_end"] - b["t_start"], left=b["t_start"], height=0.6,
                color=colors[b["holder"]], hatch="//" if b["kind"] != "V2V" else None,
                edgecolor="black", lw=0.5)
    ax.set_yticks(range(len(rows)))
    ax.set_yticklabels([f"{blk}: {h}" for blk, h in rows], fontsize=8)
    ax.set_xlabel("time [s]")
    ax.set_title("Lease windows per block (hatched: proxy)")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)


def summary_text(records: Sequence[dict]) -> str:
    header = next((r for r in records if r.get("kind") == "header"), None)
    summary = next((r for r in records if r.get("kind") == "summary"), None)
    traj = trajectories(records)
    bars = lease_bars(records)
    lines = []
    if header:
        lines.append(f"scenario {header.get('scenario')}  seed {header.get('seed')}  algorithm {header.get('algorithm')}")
    lines.append("")
    lines.append(f"{'vehicle':<10}{'first t':>10}{'last t':>10}{'final s':>10}{'max v':>10}")
    for vid, tr in sorted(traj.items()):
        lines.append(f"{vid:<10}{tr['t'][0]:>10.2f}{tr['t'][-1]:>10.2f}{tr['s'][-1]:>10.3f}{max(tr['v']):>10.3f}")
    lines.append("")
    lines.append(f"{'lease':<14}{'block':<8}{'kind':<13}{'start':>9}{'end':>9}{'deleted':>9}")
    for b in bars:
        dele = "" if b["deleted_at"] is None else f"{b['deleted_at']:.2f}"
        lines.append(f"{b['lease_id']:<14}{b['block']:<8}{b['kind']:<13}{b['t_start']:>9.2f}{b['t_end']:>9.2f}{dele:>9}")
    collisions = [r for r in records if r.get("kind") == "collision"]
    lines.append("")
    lines.append(f"collisions: {len(collisions)}")
    for c in collisions:
        lines.append(f"  t={c['t']:.2f} {c['pair'][0]} x {c['pair'][1]}")
    if summary:
        lines.append(f"total completion time: {summary.get('total_completion_time')}")
        lines.append(f"max staleness: {summary.get('max_staleness')}")
    return "\n".join(lines) + "\n"


def render_report(records: Sequence[dict], out_dir, stem: str = "report") -> Dict[str, str]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"time_space": out / f"{stem}-time-space.svg", "gantt": out / f"{stem}-leases.svg",
             "summary": out / f"{stem}-summary.txt"}
    plot_time_space(records, paths["time_space"])
    plot_gantt(records, paths["gantt"])
    paths["summary"].write_text(summary_text(records))
    return {k: str(v) for k, v in paths.items()}
