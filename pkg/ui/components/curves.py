"""
Curve Component for Run Artifacts
Renders semilog PNG curves of CSV series (distances, norms, residuals).
"""

from typing import Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402


def render_semilog(frame: pd.DataFrame, path: str, title: Optional[str] = None) -> str:
    """
    Plot every column but the first against the first one on a log y-axis.

    Args:
        frame: numeric series, first column is the abscissa (t or iter)
        path: PNG file to write
        title: optional figure title

    Returns:
        str: the path written
    """
    x_name = frame.columns[0]
    fig, ax = plt.subplots(figsize=(7, 4))
    for column in frame.columns[1:]:
        values = frame[column].where(frame[column] > 0)
        if values.notna().any():
            ax.semilogy(frame[x_name], values, label=column)
    ax.set_xlabel(x_name)
    ax.grid(True, which="both", alpha=0.3)
    if ax.get_legend_handles_labels()[0]:
        ax.legend()
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
