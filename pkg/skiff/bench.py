"""
Benchmark reports on top of the launch simulator:

  * startup decomposition of warm steps (per node, mean +/- stdev over repetitions)
  * metadata pressure of a Python-import-heavy startup (Pynamic-style) on a squashed
    artifact versus a plain unpacked tree in the shared store

---------------
Skiff HPC container launcher
Copyright (C) 2026 The Skiff Developers, all rights reserved.
You may use, distribute, and modify this code under the terms of the MIT License.
"""

import json
import posixpath
from dataclasses import dataclass, field

import numpy as np

from skiff import print_timing
from skiff.storage import METADATA_OPS, DATA_OPS, MemoryBackend
from skiff.imagestore import (LocalStore, PlainTree, build_image, digest_hex, import_image, migrate, mount_view,
                              publish_plain, release_view)
from skiff.launchsim import IncompleteTraceError, run_job_step

import logging
log = logging.getLogger(__name__)


STARTUP = 'Podman-mediated startup'
RUNTIME_PREP = 'Runtime preparation'
JOIN = 'of which: namespace join'
TOTAL = 'Total'
ROW_LABELS = (STARTUP, RUNTIME_PREP, JOIN, TOTAL)

LAYOUTS = ('squashed', 'plain')


@dataclass(frozen=True)
class StartupRow:
    label: str
    mean: float
    std: float
    maximum: float
    n: int

    def to_dict(self):
        return dict(row=self.label, mean=self.mean, std=self.std, max=self.maximum, n=self.n)


@dataclass
class StartupTable:
    rows: list
    samples: int
    join_bound: float = 0.001

    def row(self, label):
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)

    def to_text(self):
        lines = ['%-28s %s' % ('Phase [s]', 'mean +/- std (n=%d)' % self.samples)]
        for r in self.rows:
            line = '%-28s %.3f +/- %.3f' % (r.label, r.mean, r.std)
            if r.label == JOIN:
                line += '  (max %.4f, %s %.3f)' % (r.maximum, '<=' if r.maximum <= self.join_bound else '>', self.join_bound)
            lines.append(line)
        return '\n'.join(lines) + '\n'

    def to_records(self):
        return [r.to_dict() for r in self.rows]

    def to_jsonl(self):
        return ''.join(json.dumps(rec, sort_keys=True) + '\n' for rec in self.to_records())


def _node_samples(trace):
    """[(startup, prep, join)] per node of one completed trace"""
    if not trace.completed:
        raise IncompleteTraceError('step %d.%d did not complete (%s)' % (trace.job_id, trace.step_id, trace.failure))
    samples = []
    for node in range(trace.nodes):
        startup = [p['duration'] for p in trace.phases_named('podman-mediated-startup') if p['node'] == node]
        prep = [p['duration'] for p in trace.phases_named('runtime-preparation') if p['node'] == node]
        if len(startup) != 1 or len(prep) != 1:
            raise IncompleteTraceError('step %d.%d lacks startup phases for node %d' % (trace.job_id, trace.step_id, node))
        joins = [p['duration'] for p in trace.phases_named('namespace-join') if p['node'] == node]
        samples.append((startup[0], prep[0], max(joins, default=0.0)))
    return samples


def _row(label, values):
    values = np.asarray(values, dtype=float)
    std = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
    return StartupRow(label, float(np.mean(values)), std, float(np.max(values)), len(values))


def measure_startup(traces, join_bound=0.001):
    """Startup decomposition over every node of every trace; Total is startup plus runtime preparation"""
    samples = np.asarray([s for trace in traces for s in _node_samples(trace)], dtype=float)
    if not len(samples):
        raise IncompleteTraceError('no traces to measure')
    startup, prep, join = samples[:, 0], samples[:, 1], samples[:, 2]
    rows = [_row(STARTUP, startup), _row(RUNTIME_PREP, prep), _row(JOIN, join), _row(TOTAL, startup + prep)]
    return StartupTable(rows, len(samples), join_bound)


def sample_image(reference='ubuntu:24.04', files=40, layers=2, seed=0):
    """Small deterministic image with an entrypoint, for simulations and benches"""
    rng = np.random.default_rng(seed)
    contents = {'/etc/os-release': b'NAME=Ubuntu\n'}
    for i in range(files):
        contents['/usr/share/data/file%03d' % i] = bytes(rng.integers(0, 256, size=64, dtype=np.uint8))
    config = {'entrypoint': ['echo-env', 'ENTRYPOINT_BANNER'], 'cmd': ['read', '/etc/os-release'],
              'env': {'ENTRYPOINT_BANNER': 'entrypoint of %s' % reference}}
    return build_image(reference, contents, config=config, layers=layers)


@print_timing
def startup_bench(cluster, edf_text, reps=10, site=None, cost=None, hooks=None, host_env=None):
    """One cold step to populate the store, then `reps` measured warm steps"""
    cold = run_job_step(cluster, edf_text, site, 'cold', cost=cost, hooks=hooks, host_env=host_env)
    if not cold.completed:
        raise IncompleteTraceError('cold step failed (%s); nothing to measure' % cold.failure)
    traces = [run_job_step(cluster, edf_text, site, 'warm', cost=cost, hooks=hooks, host_env=host_env)
              for _ in range(reps)]
    return measure_startup(traces, (cost.join_bound if cost else 0.001)), traces


# ---- Pynamic-style metadata pressure

@dataclass(frozen=True)
class PynamicWorkload:
    files: int = 495
    modules: int = 280
    libraries: int = 215
    functions: int = 1850        # average per file
    search_path: int = 3         # directories searched per import before the hit

    def __post_init__(self):
        if self.modules + self.libraries != self.files:
            raise ValueError('modules (%d) + libraries (%d) must equal files (%d)' % (self.modules, self.libraries, self.files))


MODULE_DIR = '/opt/pynamic/site-packages'
LIB_DIR = '/opt/pynamic/lib'


def pynamic_paths(workload):
    modules = ['%s/pynamic_mod%03d.py' % (MODULE_DIR, i) for i in range(workload.modules)]
    libs = ['%s/libutility%03d.so' % (LIB_DIR, i) for i in range(workload.libraries)]
    return modules + libs


def pynamic_image(workload, reference='pynamic:latest'):
    contents = {p: ('# %d functions\n' % workload.functions).encode('ascii') for p in pynamic_paths(workload)}
    return build_image(reference, contents, config={'cmd': ['python3', '-m', 'pynamic_driver']})


@dataclass
class PynamicReport:
    layout: str
    nodes: int
    workload: PynamicWorkload
    store_metadata_ops: int = 0
    node_metadata_ops: list = field(default_factory=list)
    index_lookups: int = 0
    phases: dict = field(default_factory=dict)

    @property
    def total(self):
        return sum(self.phases.values())

    def to_dict(self):
        return dict(layout=self.layout, nodes=self.nodes, files=self.workload.files,
                    store_metadata_ops=self.store_metadata_ops, node_metadata_ops=list(self.node_metadata_ops),
                    index_lookups=self.index_lookups, phases=dict(self.phases), total=self.total)

    def to_text(self):
        lines = ['%s layout, %d node(s), %d files' % (self.layout, self.nodes, self.workload.files),
                 '  store metadata ops  %d (max per node %d)' % (self.store_metadata_ops, max(self.node_metadata_ops, default=0)),
                 '  index lookups       %d' % self.index_lookups]
        lines.extend('  %-19s %.3f s' % (name, t) for name, t in self.phases.items())
        lines.append('  %-19s %.3f s' % ('total', self.total))
        return '\n'.join(lines) + '\n'


def _ensure_in_store(cluster, image):
    if cluster.shared.find(image.reference) is None:
        local = LocalStore(MemoryBackend(name='pynamic-import'))
        import_image(image, local)
        migrate(image.reference, local, cluster.shared)
    return cluster.shared.open_image(image.reference)


class _NodeCost(object):
    """Per-node store operation counts for one phase"""

    def __init__(self, counter):
        self.counter = counter
        self.before = counter.snapshot()

    def done(self):
        after = self.counter.snapshot()
        md = sum(after.get(op, 0) - self.before.get(op, 0) for op in METADATA_OPS)
        data = sum(after.get(op, 0) - self.before.get(op, 0) for op in DATA_OPS)
        return md, data


def _search_misses(path, search_path):
    """Earlier search-path directories an import looks in before reaching `path`"""
    d, base = posixpath.split(path)
    return ['%s/miss%d/%s' % (posixpath.dirname(d), i, base) for i in range(search_path - 1)]


@print_timing
def pynamic_run(cluster, workload=PynamicWorkload(), layout='squashed', lookup_latency=2e-6, function_visit=2e-8):
    """Every node imports every module and library, traverses the package directories and visits all functions.

    Ranks on a node share its page cache, so store traffic is counted once per node. Phase times take the
    slower of the busiest node and the metadata server draining every node's operations.
    """
    if layout not in LAYOUTS:
        raise ValueError('layout must be one of %s, not %r' % (', '.join(LAYOUTS), layout))
    fs = cluster.fs_params
    counter = cluster.store_ops
    image = pynamic_image(workload)
    squashed = _ensure_in_store(cluster, image)
    paths = pynamic_paths(workload)
    prefix = 'plain/%s' % digest_hex(squashed.digest)
    if layout == 'plain' and not cluster.store_backend.exists(prefix):
        publish_plain(squashed, cluster.store_backend, prefix)

    report = PynamicReport(layout, cluster.n_nodes, workload)
    per_phase = {'startup': [], 'traverse': []}
    phase_md = {'startup': 0, 'traverse': 0}

    for node in cluster.nodes:
        node_md = 0
        view = None
        cost = _NodeCost(counter)
        lookups = 0
        if layout == 'squashed':
            img = cluster.shared.open_image(image.reference)
            view = mount_view(img, MemoryBackend(name='node%d-pynamic-upper' % node.index), (1000, 1000),
                              owner=('pynamic', node.index), readonly=True, store=cluster.shared)
            for path in paths:
                for miss in _search_misses(path, workload.search_path):
                    view.exists(miss)
                view.read(path)
            lookups = img.artifact.index_lookups
        else:
            tree = PlainTree(cluster.store_backend, prefix)
            for path in paths:
                for miss in _search_misses(path, workload.search_path):
                    cluster.store_backend.stat('%s%s' % (prefix, miss))
                tree.read(path)
        md, data = cost.done()
        node_md += md
        phase_md['startup'] += md
        per_phase['startup'].append(md * fs.metadata_latency + data * fs.data_latency + lookups * lookup_latency)

        cost = _NodeCost(counter)
        if layout == 'squashed':
            before = img.artifact.index_lookups
            listed = view.listdir(MODULE_DIR) + view.listdir(LIB_DIR)
            lookups = img.artifact.index_lookups - before
            report.index_lookups += img.artifact.index_lookups
            release_view(view, cluster.shared)
        else:
            listed = (cluster.store_backend.listdir(prefix + MODULE_DIR)
                      + cluster.store_backend.listdir(prefix + LIB_DIR))
            lookups = 0
        if len(listed) != workload.files:
            log.warning('Node %d traversed %d of %d files', node.index, len(listed), workload.files)
        md, data = cost.done()
        node_md += md
        phase_md['traverse'] += md
        per_phase['traverse'].append(md * fs.metadata_latency + data * fs.data_latency + lookups * lookup_latency)
        report.node_metadata_ops.append(node_md)

    report.store_metadata_ops = sum(report.node_metadata_ops)
    for name in ('startup', 'traverse'):
        report.phases[name] = max(max(per_phase[name]), phase_md[name] / fs.mds_ops_per_second)
    report.phases['visit'] = workload.files * workload.functions * function_visit
    log.info('Pynamic %s on %d node(s): %d store metadata ops, %.3f s',
             layout, cluster.n_nodes, report.store_metadata_ops, report.total)
    return report
