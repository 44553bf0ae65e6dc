"""Static figures rendered next to ``report.csv``."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

__all__ = ["plot_convergence", "plot_adaptive"]

_STYLE = {"axes.grid": True, "grid.alpha": 0.3, "font.size": 10, "savefig.dpi": 150}


def plot_convergence(rows, out_dir, name: str = "convergence.png") -> Path:
    """Log-log error against ``h`` with a reference slope from the finest pair."""
    rows = [r for r in rows if r.get("norm_h") is not None]
    h = [r["h"] for r in rows]
    path = Path(out_dir) / name
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(5, 4))
        ax.loglog(h, [r["norm_h"] for r in rows], "o-", label=r"$\|\cdot\|_h$ error")
        for key, marker, label in (("l2_y", "s--", r"$L^2$ state"), ("l2_u", "^--", r"$L^2$ control")):
            vals = [r.get(key) for r in rows]
            if all(v is not None for v in vals):
                ax.loglog(h, vals, marker, label=label)
        rate = rows[-1].get("rate") if rows else None
        if rate is not None:
            ax.loglog(h, [rows[-1]["norm_h"] * (x / h[-1]) ** rate for x in h], "k:", lw=1,
                      label=f"slope {rate:.2f}")
        ax.set_xlabel("h")
        ax.set_ylabel("error")
        ax.legend()
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_adaptive(rows, out_dir, name: str = "adaptive.png") -> Path:
    """Estimator and cost functional against the number of unknowns."""
    dofs = [r["dofs"] for r in rows]
    path = Path(out_dir) / name
    with plt.rc_context(_STYLE):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 3.6))
        a1.loglog(dofs, [r["eta2"] for r in rows], "o-")
        a1.set_xlabel("free dofs")
        a1.set_ylabel(r"$\eta^2$")
        a2.semilogx(dofs, [r["J"] for r in rows], "s-", color="C1")
        a2.set_xlabel("free dofs")
        a2.set_ylabel(r"$J(y_h, u_h)$")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path
