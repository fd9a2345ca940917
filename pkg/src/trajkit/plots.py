"""Plain SVG renderings of cluster centers, silhouettes, ARI matrices and dendrograms.

Output is deterministic text so plots can be diffed like the CSV files.
"""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

import numpy as np

PALETTE = (
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
)


def _num(x: float) -> str:
    return f"{x:.2f}".rstrip("0").rstrip(".")


def _ticks(lo: float, hi: float, step: float | None = None, target: int = 8) -> list[float]:
    if hi <= lo:
        return [lo]
    if step is None:
        raw = (hi - lo) / target
        mag = 10 ** math.floor(math.log10(raw))
        step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=10 * mag)
    first = math.ceil(lo / step) * step
    return [first + i * step for i in range(int((hi - first) / step + 1e-9) + 1)]


class Figure:
    """Axes-in-a-box helper mapping data coordinates to SVG pixels."""

    def __init__(self, width=720, height=440, margin=(50, 30, 60, 70), title=""):
        self.width, self.height = width, height
        self.top, self.right, self.bottom, self.left = margin
        self.title = title
        self.parts: list[str] = []
        self.xlim = (0.0, 1.0)
        self.ylim = (0.0, 1.0)

    @property
    def plot_w(self):
        return self.width - self.left - self.right

    @property
    def plot_h(self):
        return self.height - self.top - self.bottom

    def px(self, x):
        lo, hi = self.xlim
        return self.left + (np.asarray(x, float) - lo) / (hi - lo or 1.0) * self.plot_w

    def py(self, y):
        lo, hi = self.ylim
        return self.top + self.plot_h - (np.asarray(y, float) - lo) / (hi - lo or 1.0) * self.plot_h

    def axes(self, xlabel="", ylabel="", xstep=None, ystep=None, xticks=True):
        x0, y0 = self.left, self.top + self.plot_h
        self.parts.append(
            f'<rect x="{self.left}" y="{self.top}" width="{self.plot_w}" height="{self.plot_h}" '
            'fill="none" stroke="#333"/>'
        )
        for t in _ticks(*self.xlim, step=xstep) if xticks else []:
            x = float(self.px(t))
            self.parts.append(f'<line x1="{_num(x)}" y1="{y0}" x2="{_num(x)}" y2="{y0 + 5}" stroke="#333"/>')
            self.parts.append(
                f'<text x="{_num(x)}" y="{y0 + 18}" font-size="10" text-anchor="middle">{_num(t)}</text>'
            )
        for t in _ticks(*self.ylim, step=ystep):
            y = float(self.py(t))
            self.parts.append(f'<line x1="{x0 - 5}" y1="{_num(y)}" x2="{x0}" y2="{_num(y)}" stroke="#333"/>')
            self.parts.append(
                f'<text x="{x0 - 8}" y="{_num(y + 3)}" font-size="10" text-anchor="end">{_num(t)}</text>'
            )
        if xlabel:
            self.parts.append(
                f'<text x="{self.left + self.plot_w / 2}" y="{self.height - 15}" font-size="12" '
                f'text-anchor="middle">{escape(xlabel)}</text>'
            )
        if ylabel:
            cy = self.top + self.plot_h / 2
            self.parts.append(
                f'<text x="15" y="{cy}" font-size="12" text-anchor="middle" '
                f'transform="rotate(-90 15 {cy})">{escape(ylabel)}</text>'
            )

    def polyline(self, x, y, color, dash=None, width=1.5):
        pts = " ".join(f"{_num(a)},{_num(b)}" for a, b in zip(self.px(x), self.py(y)))
        style = f' stroke-dasharray="{dash}"' if dash else ""
        self.parts.append(
            f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="{width}"{style}/>'
        )

    def text(self, x, y, s, size=10, anchor="start"):
        self.parts.append(
            f'<text x="{_num(x)}" y="{_num(y)}" font-size="{size}" text-anchor="{anchor}">{escape(str(s))}</text>'
        )

    def render(self) -> str:
        head = (
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.width}" height="{self.height}" '
            f'viewBox="0 0 {self.width} {self.height}">\n'
            '<rect width="100%" height="100%" fill="white"/>\n'
        )
        if self.title:
            head += (
                f'<text x="{self.width / 2}" y="25" font-size="15" text-anchor="middle">'
                f"{escape(self.title)}</text>\n"
            )
        return head + "\n".join(self.parts) + "\n</svg>\n"


def centers_svg(
    series,
    ymin=None,
    ymax=None,
    title="Cluster centers",
    xlabel="Time",
    ylabel="Response",
    xstep=50,
) -> str:
    """Line plot of center curves.

    ``series`` is a list of ``(label, times, values, color_index, dash)``.
    """
    allx = np.concatenate([np.asarray(s[1], float) for s in series])
    ally = np.concatenate([np.asarray(s[2], float) for s in series])
    fig = Figure(width=800, margin=(50, 110, 60, 70), title=title)
    fig.xlim = (float(allx.min()), float(allx.max()))
    lo = float(ally.min()) if ymin is None else ymin
    hi = float(ally.max()) if ymax is None else ymax
    fig.ylim = (lo, hi if hi > lo else lo + 1.0)
    span = fig.xlim[1] - fig.xlim[0]
    fig.axes(xlabel, ylabel, xstep=xstep if span / xstep <= 30 else None)
    for i, (label, t, y, color, dash) in enumerate(series):
        y = np.clip(np.asarray(y, float), *fig.ylim)
        fig.polyline(t, y, PALETTE[color % len(PALETTE)], dash=dash)
    legend_x = fig.left + fig.plot_w + 8
    seen = []
    for label, _, _, color, dash in series:
        if (label, color) in seen:
            continue
        seen.append((label, color))
        y = fig.top + 12 + 14 * (len(seen) - 1)
        c = PALETTE[color % len(PALETTE)]
        fig.parts.append(f'<line x1="{legend_x}" y1="{y - 4}" x2="{legend_x + 14}" y2="{y - 4}" stroke="{c}"/>')
        fig.text(legend_x + 17, y, label, size=9)
    return fig.render()


def silhouette_svg(frame, title="Silhouette") -> str:
    """Horizontal-ish bar strip per subject, grouped by cluster, with cluster means."""
    n = len(frame)
    fig = Figure(width=720, height=440, title=title)
    fig.xlim = (0.0, float(max(n, 1)))
    fig.ylim = (-1.0, 1.0)
    fig.axes("subjects (grouped by cluster)", "silhouette", ystep=0.25)
    zero = float(fig.py(0.0))
    bar_w = fig.plot_w / max(n, 1)
    clusters = frame["cluster"].to_numpy()
    values = frame["silhouette"].to_numpy()
    labels = sorted(set(clusters.tolist()))
    color_of = {lab: PALETTE[i % len(PALETTE)] for i, lab in enumerate(labels)}
    # one path per cluster keeps the file small for large cohorts
    for lab in labels:
        idx = np.flatnonzero(clusters == lab)
        segs = []
        for i in idx:
            x = fig.left + i * bar_w + bar_w / 2
            segs.append(f"M{_num(x)} {_num(zero)}V{_num(float(fig.py(values[i])))}")
        fig.parts.append(
            f'<path d="{"".join(segs)}" stroke="{color_of[lab]}" stroke-width="{_num(max(bar_w, 0.3))}"/>'
        )
        mid = fig.left + (idx.mean() + 0.5) * bar_w
        fig.text(mid, fig.top + 14, f"{lab}: {values[idx].mean():.2f}", size=9, anchor="middle")
    fig.parts.append(
        f'<line x1="{fig.left}" y1="{_num(zero)}" x2="{fig.left + fig.plot_w}" y2="{_num(zero)}" stroke="#333"/>'
    )
    return fig.render()


def _ari_color(v: float) -> str:
    v = min(max(float(v), 0.0), 1.0)
    r = int(255 * (1 - v) + 8 * v)
    g = int(255 * (1 - v) + 48 * v)
    b = int(255 * (1 - v) + 107 * v)
    return f"#{r:02x}{g:02x}{b:02x}"


def rand_matrix_svg(matrix: np.ndarray, runs, title="Adjusted Rand index between clusterings") -> str:
    """Heat map of pairwise ARI, rows and columns ordered by k then replicate."""
    m = len(runs)
    size = 600
    fig = Figure(width=size + 130, height=size + 110, margin=(50, 60, 60, 70), title=title)
    cell = size / max(m, 1)
    for i in range(m):
        for j in range(m):
            fig.parts.append(
                f'<rect x="{_num(fig.left + j * cell)}" y="{_num(fig.top + i * cell)}" '
                f'width="{_num(cell + 0.05)}" height="{_num(cell + 0.05)}" fill="{_ari_color(matrix[i, j])}"/>'
            )
    ks = [k for k, _ in runs]
    for k in sorted(set(ks)):
        idx = [i for i, kk in enumerate(ks) if kk == k]
        mid = (idx[0] + idx[-1] + 1) / 2 * cell
        fig.text(fig.left + mid, fig.top + size + 15, k, anchor="middle")
        fig.text(fig.left - 6, fig.top + mid + 3, k, anchor="end")
        edge = idx[0] * cell
        if idx[0] > 0:
            fig.parts.append(
                f'<line x1="{_num(fig.left + edge)}" y1="{fig.top}" x2="{_num(fig.left + edge)}" '
                f'y2="{fig.top + size}" stroke="#888" stroke-width="0.5"/>'
            )
            fig.parts.append(
                f'<line x1="{fig.left}" y1="{_num(fig.top + edge)}" x2="{fig.left + size}" '
                f'y2="{_num(fig.top + edge)}" stroke="#888" stroke-width="0.5"/>'
            )
    fig.text(fig.left + size / 2, fig.top + size + 35, "k (replicates within)", size=12, anchor="middle")
    lx = fig.left + size + 20
    for i, v in enumerate(np.linspace(1.0, 0.0, 6)):
        y = fig.top + i * 22
        fig.parts.append(f'<rect x="{lx}" y="{_num(y)}" width="16" height="20" fill="{_ari_color(v)}"/>')
        fig.text(lx + 20, y + 14, f"{v:.1f}", size=9)
    return fig.render()


def _dendrogram_layout(merges: np.ndarray, n_leaves: int):
    """x position of every node (leaves ordered so branches do not cross) and leaf order."""
    children = {n_leaves + s: (int(a), int(b)) for s, (a, b, _) in enumerate(merges)}
    root = n_leaves + len(merges) - 1
    order: list[int] = []
    stack = [root]
    while stack:
        node = stack.pop()
        if node < n_leaves:
            order.append(node)
        else:
            a, b = children[node]
            stack.extend([b, a])
    x = {leaf: float(i) for i, leaf in enumerate(order)}
    for s in range(len(merges)):
        a, b = children[n_leaves + s]
        x[n_leaves + s] = (x[a] + x[b]) / 2
    return x, order


def dendrogram_svg(tree, title="Cluster dendrogram", cut_height=None) -> str:
    n = len(tree.labels)
    merges = tree.merges
    x, order = _dendrogram_layout(merges, n)
    height_of = {leaf: 0.0 for leaf in range(n)}
    for s, (_, _, h) in enumerate(merges):
        height_of[n + s] = float(h)
    fig = Figure(width=max(500, 18 * n + 120), height=460, title=title)
    fig.xlim = (-0.5, n - 0.5)
    top = float(merges[:, 2].max()) if len(merges) else 1.0
    fig.ylim = (0.0, top * 1.05 if top > 0 else 1.0)
    fig.axes("", "height", xticks=False)
    for s, (a, b, h) in enumerate(merges):
        a, b = int(a), int(b)
        xa, xb = float(fig.px(x[a])), float(fig.px(x[b]))
        ya, yb, yh = float(fig.py(height_of[a])), float(fig.py(height_of[b])), float(fig.py(h))
        fig.parts.append(
            f'<path d="M{_num(xa)} {_num(ya)}V{_num(yh)}H{_num(xb)}V{_num(yb)}" fill="none" stroke="#222"/>'
        )
    base = fig.top + fig.plot_h
    for leaf in order:
        fig.text(float(fig.px(x[leaf])), base + 14, tree.labels[leaf], size=9, anchor="middle")
    if cut_height is not None:
        y = float(fig.py(cut_height))
        fig.parts.append(
            f'<line x1="{fig.left}" y1="{_num(y)}" x2="{fig.left + fig.plot_w}" y2="{_num(y)}" '
            'stroke="#d62728" stroke-dasharray="4 3"/>'
        )
    return fig.render()
