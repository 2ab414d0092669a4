"""Precision/recall curve rendering to self-contained SVG files.

Renders are byte-deterministic: the SVG hash salt is pinned and the date
metadata is stripped, so re-running a report produces identical files.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .errors import DataError

_HASHSALT = "hrere"


def render_pr_curve(curves, path, title=None):
    """Write one SVG with a polyline per named curve.

    curves: either a single PrCurve or a dict name -> PrCurve; named
    curves get a legend. Axes are always labeled recall / precision.
    """
    if not isinstance(curves, dict):
        curves = {None: curves}
    if not curves:
        raise DataError("nothing to plot")
    plt.rcParams["svg.hashsalt"] = _HASHSALT
    fig, ax = plt.subplots(figsize=(5.0, 4.0))
    try:
        for name in sorted(curves, key=lambda n: (n is not None, n)):
            c = curves[name]
            ax.plot(c.recall, c.precision, linewidth=1.2, label=name)
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        ax.set_xlim(0.0, 1.0)
        ax.set_ylim(0.0, 1.05)
        ax.grid(True, linewidth=0.3, alpha=0.5)
        if title:
            ax.set_title(title)
        if any(name is not None for name in curves):
            ax.legend(loc="lower left", fontsize=8)
        fig.savefig(path, format="svg", metadata={"Date": None})
    finally:
        plt.close(fig)
