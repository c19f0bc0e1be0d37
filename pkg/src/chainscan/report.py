"""Figure rendering for run reports.

Kept apart from the CLI data path on purpose: the four data subcommands stay
importable without a plotting stack, and this module pulls matplotlib in
lazily with the Agg backend so it works headless.
"""

import csv
import json
import os

import numpy as np

from .tracefile import read_trace

__all__ = ["render_report"]


def _load(report_path):
    with open(report_path) as fh:
        return json.load(fh)


def render_report(report_path, trace_path=None, out_dir=None):
    """Render convergence and trace figures next to a delimited summary.

    Writes delta_history.csv always, convergence.png when any chain has a
    recorded iteration history, and trace.png when the trace is readable.
    Returns the list of written paths.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    report = _load(report_path)
    chains = report.get("chains", [])
    if out_dir is None:
        out_dir = os.path.dirname(os.path.abspath(report_path))
    os.makedirs(out_dir, exist_ok=True)
    written = []

    hist_path = os.path.join(out_dir, "delta_history.csv")
    with open(hist_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["chain", "iteration", "delta_max"])
        for st in chains:
            for i, d in enumerate(st.get("delta_history", []), start=1):
                writer.writerow([st.get("chain", 0), i, repr(float(d))])
    written.append(hist_path)

    if any(st.get("delta_history") for st in chains):
        fig, ax = plt.subplots(figsize=(6, 4))
        for st in chains:
            hist = st.get("delta_history", [])
            if hist:
                ax.semilogy(range(1, len(hist) + 1), hist,
                            label=f"chain {st.get('chain', 0)}")
        ax.set_xlabel("iteration")
        ax.set_ylabel("max state change")
        ax.set_title("fixed-point convergence")
        if len(chains) <= 8:
            ax.legend(fontsize="small")
        fig.tight_layout()
        conv_path = os.path.join(out_dir, "convergence.png")
        fig.savefig(conv_path, dpi=120)
        plt.close(fig)
        written.append(conv_path)

    trace_path = trace_path or report.get("trace_path")
    if trace_path and os.path.exists(trace_path):
        trace, header = read_trace(trace_path)
        first = trace[0]
        fig, ax = plt.subplots(figsize=(6, 4))
        if first.shape[1] >= 2:
            ax.plot(first[:, 0], first[:, 1], lw=0.3, alpha=0.4, color="gray")
            ax.scatter(first[:, 0], first[:, 1], s=2, alpha=0.5)
            ax.set_xlabel("coordinate 0")
            ax.set_ylabel("coordinate 1")
        else:
            ax.hist(first[:, 0], bins=60, density=True)
            ax.set_xlabel("coordinate 0")
        ax.set_title(f"{header.get('sampler', 'chain')} trace (chain 0)")
        fig.tight_layout()
        tr_path = os.path.join(out_dir, "trace.png")
        fig.savefig(tr_path, dpi=120)
        plt.close(fig)
        written.append(tr_path)

    return written
