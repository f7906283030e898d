"""Matplotlib figures written next to the CSV/JSON reports."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import REFERENCE_FID, EvalReport  # noqa: E402

RC = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.titlesize": 10,
    "legend.frameon": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def plot_fid_comparison(reports: Sequence[EvalReport], out_path: str | os.PathLike,
                        show_reference: bool = True) -> Path:
    """Grouped bars of train/test FID per variant, with the published values alongside."""
    import numpy as np

    names = [r.variant for r in reports]
    x = np.arange(len(names))
    with plt.rc_context(RC):
        ncols = 2 if show_reference else 1
        fig, axes = plt.subplots(1, ncols, figsize=(3.2 * ncols + 0.6 * len(names), 2.8), squeeze=False)
        ax = axes[0, 0]
        tr = [r.train_fid or 0.0 for r in reports]
        te = [r.test_fid or 0.0 for r in reports]
        ax.bar(x - 0.18, tr, 0.36, label="train", color="#7a9cc6")
        ax.bar(x + 0.18, te, 0.36, label="test", color="#c67a8f")
        ax.set_xticks(x, names)
        ax.set_ylabel("FID")
        ax.set_title(f"this run ({reports[0].extractor.get('kind', '?')})" if reports else "this run")
        ax.legend()
        if show_reference:
            ax = axes[0, 1]
            ptr = [REFERENCE_FID.get(n, (np.nan, np.nan))[0] for n in names]
            pte = [REFERENCE_FID.get(n, (np.nan, np.nan))[1] for n in names]
            ax.bar(x - 0.18, ptr, 0.36, label="train", color="#b5c7de", hatch="//")
            ax.bar(x + 0.18, pte, 0.36, label="test", color="#deb5c0", hatch="//")
            ax.set_xticks(x, names)
            ax.set_title("published (reference only)")
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(out_path)
        plt.close(fig)
    return out_path


def plot_loss_curves(rows: list[dict], out_path: str | os.PathLike,
                     keys: Sequence[str] = ("total_g", "total_d", "cyc_aba", "cyc_bab", "cls")) -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5, 3))
        steps = [r["step"] for r in rows]
        for k in keys:
            vals = [r[k] for r in rows]
            if any(vals):
                ax.plot(steps, vals, lw=1, label=k)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        ax.legend(ncol=2, fontsize=7)
        out_path = Path(out_path)
        fig.savefig(out_path)
        plt.close(fig)
    return out_path
