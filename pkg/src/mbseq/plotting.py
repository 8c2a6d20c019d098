"""Report figures written straight to files.

Figures are built on ``matplotlib.figure.Figure`` directly rather than through
pyplot, so no GUI backend or global figure state is involved and the CLI can
run headless.
"""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from matplotlib.figure import Figure

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
}


def _figure(width: float = 5.0, height: float | None = None, **kw) -> Figure:
    golden = (np.sqrt(5.0) - 1.0) / 2.0
    fig = Figure(figsize=(width, height or width * golden), dpi=120, **kw)
    return fig


def _save(fig: Figure, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    return path


def _styled(fn):
    import matplotlib

    def wrapper(*args, **kwargs):
        with matplotlib.rc_context(STYLE):
            return fn(*args, **kwargs)
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@_styled
def plot_grad_curves(rows: Sequence[Mapping], path: str | Path,
                     turning: Mapping[float, float] | None = None) -> Path:
    """Two views of c(x), one line per temperature.

    Left: each curve divided by its own peak over [-1, 1], which shows the
    shape and where it turns over (dotted verticals when ``turning`` is
    given). Right: raw c(x) on a log axis for x in [0, 1), which shows how
    strongly a lower temperature amplifies hard negatives.
    ``rows`` carry ``x``, ``tau`` and ``c`` keys as emitted by ``gradlab``.
    """
    fig = _figure(width=9.0, height=3.4)
    left, right = fig.subplots(1, 2)
    for tau in sorted({float(r["tau"]) for r in rows}):
        pts = sorted((float(r["x"]), float(r["c"])) for r in rows if float(r["tau"]) == tau)
        xs, cs = (np.array(v) for v in zip(*pts))
        line, = left.plot(xs, cs / cs.max(), label=f"tau={tau:g}")
        if turning and tau in turning:
            left.axvline(turning[tau], color=line.get_color(), ls=":", lw=0.8)
        keep = (xs >= 0) & (cs > 0)
        right.plot(xs[keep], cs[keep], color=line.get_color())
    left.set_xlabel("similarity x")
    left.set_ylabel("c(x) / max c")
    left.set_title("shape and turning point")
    left.legend(loc="upper left")
    right.set_yscale("log")
    right.set_ylim(bottom=1e-1)
    right.set_xlabel("similarity x")
    right.set_ylabel("c(x)")
    right.set_title("magnitude, x >= 0")
    return _save(fig, path)


@_styled
def plot_ablation(rows: Sequence[Mapping], path: str | Path, metrics=("HR@10", "NDCG@10")) -> Path:
    """Grouped bars, one group per variant."""
    fig = _figure(width=max(4.0, 1.2 * len(rows) + 2))
    ax = fig.add_subplot()
    names = [str(r["variant"]) for r in rows]
    x = np.arange(len(rows))
    width = 0.8 / len(metrics)
    for j, m in enumerate(metrics):
        vals = [float(r[m]) for r in rows]
        bars = ax.bar(x + (j - (len(metrics) - 1) / 2) * width, vals, width, label=m)
        ax.bar_label(bars, fmt="%.3f", fontsize=7, padding=1)
    ax.set_xticks(x, names, rotation=20 if len(rows) > 4 else 0)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("score")
    ax.set_title("ablation")
    ax.legend()
    return _save(fig, path)


@_styled
def plot_loss_curves(log_rows: Sequence[Mapping], path: str | Path) -> Path:
    """Loss components per epoch, with HR@10 on a twin axis when it was logged."""
    fig = _figure()
    ax = fig.add_subplot()
    epochs = [int(r["epoch"]) for r in log_rows]
    for key in ("total", "bpr", "cl_long", "cl_short"):
        vals = [float(r[key]) for r in log_rows]
        if any(vals):
            ax.plot(epochs, vals, label=key, lw=1.4 if key == "total" else 1.0)
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    handles, labels = ax.get_legend_handles_labels()
    hr = [r.get("HR@10") for r in log_rows]
    if all(v not in (None, "") for v in hr) and hr:
        ax2 = ax.twinx()
        h, = ax2.plot(epochs, [float(v) for v in hr], color="k", ls="--", lw=1.0, label="HR@10")
        ax2.set_ylabel("HR@10")
        ax2.set_ylim(0, 1)
        handles.append(h)
        labels.append("HR@10")
    ax.legend(handles, labels, loc="center right")
    ax.set_title("training")
    return _save(fig, path)


@_styled
def plot_attention(maps: np.ndarray, behavior_names: Sequence[str], path: str | Path,
                   nodes: Sequence[int] | None = None, title: str = "user") -> Path:
    """Heatmaps of per-node behavior-by-behavior attention.

    The first panel is the mean over all nodes; the rest show ``nodes``
    (by default the first three). Rows are query behaviors in the current
    slot, columns key behaviors in the previous slot.
    """
    maps = np.asarray(maps)
    nodes = list(range(min(3, len(maps)))) if nodes is None else list(nodes)
    panels = [("mean", maps.mean(axis=0))] + [(f"{title} {n}", maps[n]) for n in nodes]
    fig = _figure(width=2.9 * len(panels) + 0.8, height=3.2, layout="constrained")
    axes = fig.subplots(1, len(panels), squeeze=False)[0]
    im = None
    for ax, (name, mat) in zip(axes, panels):
        im = ax.imshow(mat, vmin=0.0, vmax=1.0, cmap="viridis")
        ax.set_title(name)
        ax.set_xticks(range(len(behavior_names)), behavior_names, rotation=45, ha="right")
        ax.set_yticks(range(len(behavior_names)), behavior_names if ax is axes[0] else [])
        for (i, j), v in np.ndenumerate(mat):
            ax.text(j, i, f"{v:.2f}", ha="center", va="center", fontsize=6,
                    color="w" if v < 0.5 else "k")
    fig.colorbar(im, ax=list(axes), shrink=0.8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight")
    return path
