"""
Plot accuracy and cost curves from one or more metrics CSVs.

    python plot_metrics.py metrics.csv [other/metrics.csv ...] --out curves.html

Standalone: only pandas and plotly, so it can sit next to the CSV it reads.
"""
import argparse
from pathlib import Path
from typing import List, Sequence

import pandas as pd
import plotly.express as px
from plotly.subplots import make_subplots


def load_series(paths: Sequence[str]) -> pd.DataFrame:
    frames: List[pd.DataFrame] = []
    for path in paths:
        df = pd.read_csv(path, keep_default_na=False)
        df["run"] = Path(path).resolve().parent.name
        frames.append(df)
    if not frames:
        return pd.DataFrame(columns=["run", "round", "accuracy", "bytes", "comparisons"])
    return pd.concat(frames, ignore_index=True)


def build_figure(df: pd.DataFrame):
    fig = make_subplots(rows=1, cols=2, subplot_titles=("Validation accuracy", "Cumulative comparisons"))
    acc = px.line(df, x="round", y="accuracy", color="run")
    df = df.assign(cum_comparisons=df.groupby("run")["comparisons"].cumsum())
    cost = px.line(df, x="round", y="cum_comparisons", color="run")
    for trace in acc.data:
        fig.add_trace(trace, row=1, col=1)
    for trace in cost.data:
        trace.showlegend = False
        fig.add_trace(trace, row=1, col=2)
    fig.update_yaxes(range=[0, 1], row=1, col=1)
    fig.update_layout(height=450, legend_title_text="run")
    return fig


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="Plot metrics CSVs")
    parser.add_argument("csv", nargs="+")
    parser.add_argument("--out", default="curves.html")
    args = parser.parse_args(argv)
    fig = build_figure(load_series(args.csv))
    fig.write_html(args.out)
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
