"""Plot gap-vs-iteration and gap-vs-features curves from trace CSV files.

usage: python scripts/plot_traces.py OUT.png trace_a.csv [trace_b.csv ...]
"""
import argparse
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from rapsa.data_io import read_trace_csv  # noqa: E402


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("output")
    ap.add_argument("traces", nargs="+")
    ap.add_argument("--loglog", action="store_true", help="log scale on the x axes too")
    args = ap.parse_args()

    fig, (ax_t, ax_f) = plt.subplots(1, 2, figsize=(11, 4))
    for path in args.traces:
        tr = read_trace_csv(path)
        label = Path(path).stem
        ax_t.plot(tr.t, tr.gap, label=label)
        ax_f.plot(tr.features, tr.gap, label=label)
    for ax, xlabel in ((ax_t, "iteration t"), (ax_f, "features processed")):
        ax.set_yscale("log")
        if args.loglog:
            ax.set_xscale("log")
        ax.set_xlabel(xlabel)
        ax.set_ylabel("F(x) - F*")
        ax.grid(True, which="both", alpha=0.3)
    ax_f.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(args.output, dpi=120)


if __name__ == "__main__":
    main()
