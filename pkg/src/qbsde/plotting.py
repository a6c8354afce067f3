"""Render plot specifications from :mod:`qbsde.experiments` to PNG files.

Uses the non-interactive Agg backend.  The PNG text chunks carry the config
hash and omit the software version so identical runs give identical bytes.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def render(spec: dict, path: str, config_sha256: str) -> None:
    """Draw one plot spec (``lines``, ``loglog`` or ``bars``) and save it to ``path``."""
    fig, ax = plt.subplots(figsize=(6.4, 4.2), dpi=100)
    try:
        kind = spec["kind"]
        if kind in ("lines", "loglog"):
            labelled = False
            for s in spec["series"]:
                xs, ys = s["x"], s["y"]
                if kind == "loglog":
                    # exact zeros (a rung that reached the reference) cannot sit on a log axis
                    xs, ys = zip(*[(x, y) for x, y in zip(xs, ys) if y > 0]) if any(y > 0 for y in ys) else ([], [])
                ax.plot(xs, ys,marker="o" if kind == "loglog" else None,
                        lw=1.2 if s.get("label") else 0.6, label=s.get("label"))
                labelled = labelled or bool(s.get("label"))
            if kind == "loglog":
                ax.set_xscale("log", base=2)
                ax.set_yscale("log")
            if labelled:
                ax.legend(fontsize=8)
            ax.set_xlabel(spec.get("xlabel", ""))
        elif kind == "bars":
            labels = [b["label"] for b in spec["bars"]]
            ax.bar(range(len(labels)), [b["value"] for b in spec["bars"]], color="tab:blue")
            ax.axhline(1.0, color="tab:red", lw=0.8, ls="--")
            ax.set_xticks(range(len(labels)), labels, rotation=30, ha="right", fontsize=8)
        else:
            raise ValueError(f"unknown plot kind {kind!r}")
        ax.set_ylabel(spec.get("ylabel", ""))
        ax.set_title(spec.get("title", ""))
        ax.grid(alpha=0.3)
        fig.tight_layout()
        fig.savefig(path, format="png",
                    metadata={"Software": None, "Description": f"config_sha256={config_sha256}"})
    finally:
        plt.close(fig)
