"""Matplotlib figures written next to the CSV reports.

Everything renders through the Agg backend and strips the PNG software tag,
so a figure is a pure function of its data.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
}


def _save(fig, path):
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)


def online_curve(rows, path, title="Online identification"):
    """Error against training prefix, one line per mode."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        modes = sorted({m for _, m, _ in rows})
        for mode in modes:
            pts = sorted((f, e) for f, m, e in rows if m == mode)
            xs, ys = zip(*pts)
            style = "--" if mode == "baseline" else "-"
            ax.plot(xs, 100 * np.asarray(ys), style, marker="o", ms=3, label=mode)
        ax.set_xscale("log")
        ax.set_xlabel("training prefix (fraction of sequence)")
        ax.set_ylabel("identification error (%)")
        ax.set_ylim(bottom=0)
        ax.set_title(title)
        ax.legend(frameon=False)
        fig.tight_layout()
        _save(fig, path)


def error_bars(records, path, title="Evaluation summary"):
    """Grouped bars of every report record, chance level drawn as a tick."""
    with plt.rc_context(STYLE):
        labels = [f"{r['protocol']}\n{r['mode']}\n{r.get('attribute', '')}" for r in records]
        fig, ax = plt.subplots(figsize=(max(3.0, 0.55 * len(records) + 1), 3.2))
        xs = np.arange(len(records))
        ax.bar(xs, [100 * r["error"] for r in records], color="0.45", width=0.6)
        for x, r in zip(xs, records):
            if r.get("chance") is not None:
                ax.plot([x - 0.3, x + 0.3], [100 * r["chance"]] * 2, color="C3", lw=1.2)
        ax.set_xticks(xs)
        ax.set_xticklabels(labels, fontsize=6)
        ax.set_ylabel("error (%)")
        ax.set_title(title)
        fig.tight_layout()
        _save(fig, path)


def projection_scatter(coords, labels, path, title="2-D projection"):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 4.0))
        sc = ax.scatter(coords[:, 0], coords[:, 1], c=labels, cmap="tab20", s=6, linewidths=0)
        ax.set_xlabel("component 1")
        ax.set_ylabel("component 2")
        ax.set_title(title)
        fig.colorbar(sc, ax=ax, fraction=0.046, pad=0.04)
        fig.tight_layout()
        _save(fig, path)
