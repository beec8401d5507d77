"""SVG figures for reports.  Output is byte-stable for identical inputs."""

from __future__ import annotations

import io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .io import atomic_write_text  # noqa: E402

_RC = {"svg.hashsalt": "needleforge", "svg.fonttype": "none", "font.size": 9}


def _save_svg(fig, path):
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    atomic_write_text(path, buf.getvalue())


def plot_error_vs_depth(runs, path, title=""):
    """Tip-to-target error norm against tip depth, one line per run."""
    with matplotlib.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6, 3.6))
        for r in runs:
            style = "-" if r.controller == "inverse" else "--"
            ax.plot(r.depth_mm, r.error_mm, style, lw=1,
                    label=f"{r.controller} #{r.trajectory}")
        ax.set_xlabel("tip depth [mm]")
        ax.set_ylabel("|e| [mm]")
        ax.set_yscale("log")
        if title:
            ax.set_title(title)
        ax.grid(True, lw=0.3)
        ax.legend(fontsize=7, ncol=2)
        fig.tight_layout()
        _save_svg(fig, path)


def plot_trace(trace, path):
    """Error components and tip path of a single run."""
    t = trace.table
    with matplotlib.rc_context(_RC):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(8, 3.4))
        for k, name in enumerate("xyz"):
            a1.plot(t[:, 0], t[:, 10 + k] * 1e3, lw=1, label=f"e{name}")
        a1.set_xlabel("time [s]")
        a1.set_ylabel("error [mm]")
        a1.legend(fontsize=7)
        a1.grid(True, lw=0.3)
        a2.plot(t[:, 7] * 1e3, t[:, 9] * 1e3, "k:", lw=1, label="target")
        a2.plot(t[:, 4] * 1e3, t[:, 6] * 1e3, lw=1, label="tip")
        a2.set_xlabel("x [mm]")
        a2.set_ylabel("depth z [mm]")
        a2.invert_yaxis()
        a2.legend(fontsize=7)
        a2.grid(True, lw=0.3)
        fig.suptitle(f"trajectory {trace.trajectory_id} ({trace.controller}): {trace.status}")
        fig.tight_layout()
        _save_svg(fig, path)
