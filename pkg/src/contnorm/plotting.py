import logging
from pathlib import Path

import pandas as pd
import plotly.express as px

pylogger = logging.getLogger(__name__)


def plot_drift(drift: pd.DataFrame, path: Path) -> Path:
    """Mean drift after every task, one line per (method, layer), one panel per moment.

    :param drift: rows of drift.csv
    :param path: output html file
    """
    mean = drift.groupby(["method", "after_task", "layer"], as_index=False)[["delta_mu", "delta_var"]].mean()
    long = mean.melt(
        id_vars=["method", "after_task", "layer"],
        value_vars=["delta_mu", "delta_var"],
        var_name="moment",
        value_name="delta",
    )
    long["series"] = long["method"] + " / layer " + long["layer"].astype(str)

    fig = px.line(long, x="after_task", y="delta", color="series", facet_col="moment", markers=True)
    fig.update_yaxes(matches=None)
    fig.update_layout(xaxis_title="after task", title="Running moments vs BN* moments (L1)")
    fig.write_html(str(path))

    pylogger.info(f"Drift curves written to <{path}>")
    return path
