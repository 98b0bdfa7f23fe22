"""
Matplotlib rendering of benchmark reports to image files.

---------------
Skiff HPC container launcher
Copyright (C) 2026 The Skiff Developers, all rights reserved.
You may use, distribute, and modify this code under the terms of the MIT License.
"""

import matplotlib as mpl
mpl.use('Agg')
from matplotlib.figure import Figure
from matplotlib.backends.backend_agg import FigureCanvasAgg

from skiff import print_timing
from skiff.bench import JOIN, TOTAL

import logging
log = logging.getLogger(__name__)


@print_timing
def plot_startup(table, fname, title='Per-node container startup'):
    """Bar chart of the startup decomposition rows (mean with stdev error bars)"""
    rows = [r for r in table.rows if r.label != TOTAL]
    fig = Figure(figsize=(6.4, 3.6), dpi=100)
    FigureCanvasAgg(fig)
    ax = fig.add_subplot(1, 1, 1)
    labels = [r.label for r in rows]
    colors = ['#4878a8' if r.label != JOIN else '#a84848' for r in rows]
    ax.barh(range(len(rows)), [r.mean for r in rows], xerr=[r.std for r in rows], color=colors, capsize=3)
    ax.set_yticks(range(len(rows)))
    ax.set_yticklabels(labels)
    ax.invert_yaxis()
    ax.set_xlabel('Time (sec)')
    ax.set_title('%s, total %.3f s (n=%d)' % (title, table.row(TOTAL).mean, table.samples))
    ax.set_axisbelow(True)
    ax.grid(axis='x', linestyle=':')
    fig.tight_layout()
    fig.savefig(fname)
    log.info('Wrote startup plot %s', fname)
    return fname


@print_timing
def plot_pynamic(reports, fname):
    """Store metadata operations per layout against node count (log scale)"""
    fig = Figure(figsize=(6.4, 3.6), dpi=100)
    FigureCanvasAgg(fig)
    ax = fig.add_subplot(1, 1, 1)
    for layout in sorted({r.layout for r in reports}):
        points = sorted((r.nodes, r.store_metadata_ops) for r in reports if r.layout == layout)
        ax.plot([p[0] for p in points], [max(1, p[1]) for p in points], marker='o', label=layout)
    ax.set_xscale('log', base=2)
    ax.set_yscale('log')
    ax.set_xlabel('Nodes')
    ax.set_ylabel('Store metadata ops')
    ax.legend()
    ax.grid(which='both', linestyle=':')
    fig.tight_layout()
    fig.savefig(fname)
    log.info('Wrote Pynamic plot %s', fname)
    return fname
