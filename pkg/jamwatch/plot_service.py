import logging
from pathlib import Path
from typing import Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from jamwatch.artifact_io import ensure_dir  # noqa: E402
from jamwatch.errors import FormatError  # noqa: E402

logger = logging.getLogger(__name__)


def _read(path: Path, columns: list) -> pd.DataFrame:
    if not path.exists():
        raise FileNotFoundError(f"Nothing to plot: {path}")
    frame = pd.read_csv(path)
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise FormatError(f"{path} lacks columns {missing}", field=missing[0])
    return frame


def plot_sweep(csv_path: Path, out_path: Path, log_tau: bool = True, title: Optional[str] = None) -> Path:
    """FA and MD probabilities against the threshold."""
    frame = _read(Path(csv_path), ["tau", "p_fa", "p_md"])
    fig, ax = plt.subplots(figsize=(7, 5))
    ax.plot(frame["tau"], frame["p_fa"], label="P_FA", linewidth=2)
    ax.plot(frame["tau"], frame["p_md"], label="P_MD", linewidth=2, linestyle="--")
    if log_tau and (frame["tau"] > 0).all():
        ax.set_xscale("log")
    ax.set_xlabel("threshold tau")
    ax.set_ylabel("probability")
    ax.set_ylim(-0.02, 1.02)
    ax.grid(True)
    ax.legend(loc="center right")
    if title:
        ax.set_title(title)
    ensure_dir(Path(out_path).parent)
    fig.savefig(out_path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    logger.info("Saved %s", out_path)
    return Path(out_path)


def plot_latency_cdf(csv_path: Path, out_path: Path, reference_ms: Optional[float] = None, title: Optional[str] = None) -> Path:
    """Empirical CDF of per-sample latency, with an optional reference p95 marker."""
    frame = _read(Path(csv_path), ["trial", "elapsed_ms"])
    ms = frame["elapsed_ms"].sort_values().to_numpy()
    cdf = [(k + 1) / len(ms) for k in range(len(ms))]
    fig, ax = plt.subplots(figsize=(7, 5))
    ax.step(ms, cdf, where="post", linewidth=2, label="measured")
    if reference_ms is not None:
        ax.axvline(reference_ms, color="grey", linestyle=":", label=f"reference p95 {reference_ms:g} ms")
        ax.axhline(0.95, color="grey", linestyle=":", linewidth=0.8)
    ax.set_xlabel("classification time [ms]")
    ax.set_ylabel("CDF")
    ax.grid(True)
    ax.legend(loc="lower right")
    if title:
        ax.set_title(title)
    ensure_dir(Path(out_path).parent)
    fig.savefig(out_path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    logger.info("Saved %s", out_path)
    return Path(out_path)
