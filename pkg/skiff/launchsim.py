"""
Discrete-event model of a multi-node job step launching one container per node.

The allocator renders the EDF once and ships it in the job environment. On a cold start global
task 0 pulls the image into a temporary local store, migrates it into the shared store and
publishes progress in a sync file the other nodes poll. On every node local task 0 starts a
detached shim container and the remaining local ranks join its user and mount namespaces.

All timings come from `CostModel` (jittered with a seeded numpy generator) plus store-operation
latencies from `FsParams`, so a given seed always yields the same trace.

---------------
Skiff HPC container launcher
Copyright (C) 2026 The Skiff Developers, all rights reserved.
You may use, distribute, and modify this code under the terms of the MIT License.
"""

import io
import json
import posixpath
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from typing import Optional

import numpy as np
import simulus

from skiff import SkiffError, SimulationError, StoreError, ValidationError, print_timing
from skiff.edf import Edf, serialize_edf, resolve_edf, encode_job_environment, decode_job_environment
from skiff.plan import SiteConfig, StepContext, apply_settings, render_plan, shim_plan, plan_to_argv, step_paths
from skiff.runtime import HookError, RuntimeSpec
from skiff.hooks import HookRegistry, run_pipeline
from skiff.ldcache import ContainerTree
from skiff.storage import OpCounter, MemoryBackend, METADATA_OPS, DATA_OPS, MUTATION_OPS
from skiff.imagestore import (LocalStore, SharedStore, ImageNotFoundError, import_image, migrate, mount_view,
                              release_view, watcher_tick)

import logging
log = logging.getLogger(__name__)


MODES = ('cold', 'warm')
FAULT_POINTS = ('acquire', 'migrate', 'start', 'join', 'crash')
FAILURE_REASONS = ('invalid-edf', 'acquisition-failed', 'image-missing', 'container-start-failed',
                   'missing-namespace-handle', 'writer-crashed')

SYNC_IN_PROGRESS = 'in-progress'
SYNC_COMPLETE = 'complete'
SYNC_FAILED = 'failed'

HOST_NAMESPACES = ('ipc', 'network', 'pid', 'uts', 'cgroup')
JOINED_NAMESPACES = ('user', 'mnt')

DESIGNATED_NODE = 0
EPOCH = datetime(2026, 1, 1, tzinfo=timezone.utc)


class RankFailure(SimulationError):
    """A rank could not reach its workload; `reason` is one of FAILURE_REASONS"""

    def __init__(self, reason, message):
        super().__init__('%s: %s' % (reason, message))
        self.reason = reason


class IncompleteTraceError(SimulationError):
    """Trace lacks the phases a measurement needs"""


@dataclass(frozen=True)
class FsParams:
    """Per-operation latencies of the shared store and the metadata server's throughput"""
    metadata_latency: float = 0.0004
    data_latency: float = 0.0002
    write_latency: float = 0.002
    mds_ops_per_second: float = 20000.0

    def charge(self, before, after):
        """Seconds spent on the operations counted between two OpCounter snapshots"""
        delta = Counter(after)
        delta.subtract(Counter(before))
        return (sum(delta[op] for op in METADATA_OPS) * self.metadata_latency
                + sum(delta[op] for op in DATA_OPS) * self.data_latency
                + sum(delta[op] for op in MUTATION_OPS) * self.write_latency)


@dataclass(frozen=True)
class CostModel:
    """Base durations in seconds; every draw is scaled by a clipped normal factor of spread `jitter`"""
    image_check: float = 0.15
    engine_start: float = 0.60
    per_hook: float = 0.85          # per active hook stage
    entrypoint_wait: float = 0.22
    runtime_prep: float = 0.057
    join: float = 0.0008
    join_bound: float = 0.001
    exec_join: float = 0.12
    join_mode: str = 'setns'        # or 'exec'
    import_base: float = 2.0
    import_per_mb: float = 0.5
    migrate_base: float = 1.5
    migrate_per_mb: float = 0.8
    poll_interval: float = 0.5
    stale_timeout: float = 300.0
    teardown: float = 0.08
    workload: float = 1.0
    jitter: float = 0.05

    def __post_init__(self):
        if self.join_mode not in ('setns', 'exec'):
            raise ValueError('join_mode must be "setns" or "exec", not %r' % self.join_mode)
        if self.join > self.join_bound:
            raise ValueError('join cost %g exceeds its bound %g' % (self.join, self.join_bound))


@dataclass(frozen=True)
class Fault:
    """Injected failure at `point`; `node`/`rank` restrict where it fires (None: anywhere)"""
    point: str
    node: Optional[int] = None
    rank: Optional[int] = None

    def __post_init__(self):
        if self.point not in FAULT_POINTS:
            raise ValueError('unknown fault point %r (expected one of %s)' % (self.point, ', '.join(FAULT_POINTS)))

    @classmethod
    def parse(cls, text):
        """'start', 'start:node=1', 'join:rank=5', 'join:node=1,rank=5'"""
        point, _, rest = text.partition(':')
        kwargs = {}
        for item in filter(None, rest.split(',')):
            key, sep, value = item.partition('=')
            if key not in ('node', 'rank') or not sep:
                raise ValueError('bad fault qualifier %r in %r' % (item, text))
            kwargs[key] = int(value)
        return cls(point, **kwargs)

    def matches(self, point, node=None, rank=None):
        return (self.point == point
                and (self.node is None or self.node == node)
                and (self.rank is None or self.rank == rank))

    def __str__(self):
        quals = ','.join('%s=%d' % (k, getattr(self, k)) for k in ('node', 'rank') if getattr(self, k) is not None)
        return self.point + (':' + quals if quals else '')


@dataclass(frozen=True)
class FaultPlan:
    faults: tuple = ()

    @classmethod
    def of(cls, *specs):
        return cls(tuple(s if isinstance(s, Fault) else Fault.parse(s) for s in specs))

    def triggers(self, point, node=None, rank=None):
        return any(f.matches(point, node, rank) for f in self.faults)

    def __bool__(self):
        return bool(self.faults)


@dataclass(frozen=True)
class SyncState:
    """Content of the per-step sync file in the shared store"""
    status: str
    digest: str = ''
    writer: int = -1
    ts: float = 0.0
    reason: str = ''

    def to_text(self):
        lines = ['status=%s' % self.status, 'digest=%s' % self.digest, 'writer=%d' % self.writer, 'ts=%.6f' % self.ts]
        if self.reason:
            lines.append('reason=%s' % self.reason.replace('\n', ' '))
        return '\n'.join(lines) + '\n'

    @classmethod
    def from_text(cls, text):
        values = dict(line.partition('=')[::2] for line in text.splitlines() if line)
        return cls(values['status'], values.get('digest', ''), int(values.get('writer', -1)),
                   float(values.get('ts', 0.0)), values.get('reason', ''))


def sync_key(ctx):
    return 'sync/%d.%d.sync' % (ctx.job_id, ctx.step_id)


@dataclass
class RankState:
    global_rank: int
    local_rank: int
    node: int
    phase: str = 'created'      # created, waiting, joined, running, exited, failed
    exit_code: Optional[int] = None
    reason: Optional[str] = None
    container: Optional[str] = None
    identity: Optional[tuple] = None
    namespaces: tuple = ()

    @property
    def entity(self):
        return 'node%d/rank%d' % (self.node, self.global_rank)

    def to_dict(self):
        return dict(rank=self.global_rank, local_rank=self.local_rank, node=self.node, phase=self.phase,
                    exit_code=self.exit_code, reason=self.reason, container=self.container,
                    identity=list(self.identity) if self.identity else None, namespaces=list(self.namespaces))


@dataclass
class ShimRecord:
    """The per-node container holding the namespaces every local rank joins"""
    container_id: str
    node: int
    pid: int
    plan: object
    view: object
    identity: tuple
    namespaces: dict
    live: bool = True


@dataclass(frozen=True)
class ScratchDir:
    path: str
    uid: int
    gid: int
    mode: int


@dataclass
class NodeState:
    index: int
    ranks: list
    local: MemoryBackend                 # node-local scratch space
    container: Optional[ShimRecord] = None
    failure: Optional[tuple] = None      # (reason, message)
    scratch: dict = field(default_factory=dict)
    join_costs: dict = field(default_factory=dict)
    prep_end: float = 0.0
    finished: int = 0
    stops: int = 0
    released: bool = False

    def __repr__(self):
        return 'NodeState(node%d, %d ranks, %s)' % (self.index, len(self.ranks),
                                                    self.container.container_id if self.container else 'no container')


class ClusterSim(object):
    """Nodes, a shared store with recorded operations, and a registry the cold path pulls from"""

    def __init__(self, nodes, ranks_per_node, fs_params=None, seed=0):
        if nodes < 1 or ranks_per_node < 1:
            raise ValueError('cluster needs at least one node and one rank per node')
        self.n_nodes = nodes
        self.ranks_per_node = ranks_per_node
        self.fs_params = fs_params or FsParams()
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.store_ops = OpCounter(record=True)
        self.store_backend = MemoryBackend(self.store_ops, name='shared-store')
        self.shared = SharedStore(self.store_backend, clock=self.clock)
        self.registry = {}
        self.sim = None
        self.steps = 0
        self.nodes = []
        self.reset()

    def __repr__(self):
        return '%s(%d nodes x %d ranks, seed=%d)' % (self.__class__.__name__, self.n_nodes, self.ranks_per_node, self.seed)

    def reset(self):
        """Fresh per-step node and rank state; the shared store and registry persist"""
        self.nodes = [NodeState(n, [RankState(n * self.ranks_per_node + l, l, n) for l in range(self.ranks_per_node)],
                                MemoryBackend(name='node%d-local' % n))
                      for n in range(self.n_nodes)]

    @property
    def ranks(self):
        return [r for node in self.nodes for r in node.ranks]

    def clock(self):
        now = self.sim.now if self.sim is not None else 0.0
        return (EPOCH + timedelta(seconds=self.steps * 3600 + now)).strftime('%Y-%m-%dT%H:%M:%SZ')

    def publish(self, image):
        """Make a layered image pullable by reference"""
        self.registry[image.reference] = image
        return image


def build_cluster(nodes, ranks_per_node, fs_params=None, seed=0):
    return ClusterSim(nodes, ranks_per_node, fs_params, seed)


@dataclass
class TeardownReport:
    stops: dict = field(default_factory=dict)           # node -> number of effective stops
    scratch_removed: list = field(default_factory=list)
    views_released: int = 0
    views_reclaimed: list = field(default_factory=list)
    sync_deleted_by: Optional[int] = None
    image_retained: bool = False
    degraded: bool = False
    warnings: list = field(default_factory=list)

    def to_dict(self):
        return dict(stops={str(k): v for k, v in sorted(self.stops.items())}, scratch_removed=list(self.scratch_removed),
                    views_released=self.views_released, views_reclaimed=list(self.views_reclaimed),
                    sync_deleted_by=self.sync_deleted_by, image_retained=self.image_retained,
                    degraded=self.degraded, warnings=list(self.warnings))


def _t(x):
    return round(float(x), 9)


@dataclass
class StepTrace:
    """Everything observable about one simulated step, exportable as JSON lines"""
    job_id: int
    step_id: int
    mode: str
    nodes: int
    ranks_per_node: int
    seed: int
    status: str = 'running'
    failure: Optional[str] = None
    events: list = field(default_factory=list)
    phases: list = field(default_factory=list)
    ranks: list = field(default_factory=list)
    counters: Counter = field(default_factory=Counter)
    cleanup: Optional[TeardownReport] = None

    def event(self, time, entity, event, source, **detail):
        self.events.append(dict(kind='event', t=_t(time), entity=entity, event=event, source=source, detail=detail))

    def phase(self, name, node, start, duration, rank=None, metadata_ops=0):
        self.phases.append(dict(kind='phase', phase=name, node=node, rank=rank, start=_t(start),
                                duration=_t(duration), metadata_ops=metadata_ops))

    def phases_named(self, name):
        return [p for p in self.phases if p['phase'] == name]

    def events_named(self, name):
        return [e for e in self.events if e['event'] == name]

    @property
    def completed(self):
        return self.status == 'completed'

    def failures(self):
        """{global rank: reason} of every failed rank"""
        return {r.global_rank: r.reason for r in self.ranks if r.phase == 'failed'}

    def summary(self):
        return dict(kind='step', job=self.job_id, step=self.step_id, mode=self.mode, nodes=self.nodes,
                    ranks_per_node=self.ranks_per_node, seed=self.seed, status=self.status, failure=self.failure,
                    counters=dict(sorted(self.counters.items())),
                    cleanup=self.cleanup.to_dict() if self.cleanup else None)

    def to_records(self):
        return self.events + self.phases + [dict(kind='rank', **r.to_dict()) for r in self.ranks] + [self.summary()]

    def to_jsonl(self):
        return ''.join(json.dumps(rec, sort_keys=True) + '\n' for rec in self.to_records())

    def save(self, fname):
        with io.open(fname, 'w', encoding='utf-8') as f:
            f.write(self.to_jsonl())


class Scheduler(object):
    """Task lifecycle; the only emitter of create/run/exit/signal events"""

    SOURCE = 'scheduler'

    def __init__(self, step):
        self.step = step

    def _emit(self, rank, event, **detail):
        self.step.trace.event(self.step.sim.now, rank.entity, event, self.SOURCE, **detail)

    def create(self, rank):
        self._emit(rank, 'create', local_rank=rank.local_rank)

    def run(self, rank):
        rank.phase = 'running'
        self._emit(rank, 'run')

    def exit(self, rank, code, reason=None):
        rank.exit_code = code
        if reason is not None:
            rank.phase, rank.reason = 'failed', reason
        else:
            rank.phase = 'exited'
        self._emit(rank, 'exit', code=code, reason=reason)

    def signal(self, rank, signal, reason):
        self._emit(rank, 'signal', signal=signal, reason=reason)


def join_namespaces(rank, shim):
    """Enter the shim's user and mount namespaces; host namespaces are shared already"""
    if shim is None:
        raise RankFailure('missing-namespace-handle', 'no container on node %d' % rank.node)
    if not shim.live:
        raise RankFailure('missing-namespace-handle', 'container %s has been stopped' % shim.container_id)
    missing = [ns for ns in JOINED_NAMESPACES if not shim.namespaces.get(ns)]
    if missing:
        raise RankFailure('missing-namespace-handle', 'container %s lacks %s namespace handle(s)'
                          % (shim.container_id, ', '.join(missing)))
    if shim.node != rank.node:
        raise SimulationError('rank %d on node %d cannot join container on node %d' % (rank.global_rank, rank.node, shim.node))
    rank.phase = 'joined'
    rank.container = shim.container_id
    rank.identity = shim.identity
    rank.namespaces = JOINED_NAMESPACES + HOST_NAMESPACES
    return rank


class StepRun(object):
    """One job step on a cluster: the container plugin's per-rank logic plus shared bookkeeping"""

    SOURCE = 'plugin'

    def __init__(self, cluster, edf, settings, job_env, site, ctx, mode, faults, cost, hooks, trace):
        self.cluster = cluster
        self.edf = edf
        self.settings = settings
        self.job_env = job_env
        self.site = site
        self.ctx = ctx
        self.mode = mode
        self.faults = faults
        self.cost = cost
        self.hooks = hooks
        self.trace = trace
        self.sim = simulus.simulator()
        self.scheduler = Scheduler(self)
        self.report = TeardownReport()
        self.ready = {}
        self.finished = 0
        self.first_failure = None

    def __repr__(self):
        return '%s(job %d.%d, %s)' % (self.__class__.__name__, self.ctx.job_id, self.ctx.step_id, self.mode)

    # ---- helpers

    def _draw(self, base):
        factor = np.clip(1.0 + self.cost.jitter * self.cluster.rng.standard_normal(), 0.5, 1.5)
        return float(base * factor)

    def _sleep(self, dt):
        if dt > 0:
            self.sim.sleep(dt)

    def _emit(self, entity, event, **detail):
        self.trace.event(self.sim.now, entity, event, self.SOURCE, **detail)

    def _charge(self, before):
        """Sleep for the store operations made since `before`; returns their metadata op count"""
        after = self.cluster.store_ops.snapshot()
        self._sleep(self.cluster.fs_params.charge(before, after))
        return sum(after.get(op, 0) - before.get(op, 0) for op in METADATA_OPS)

    def _read_sync(self):
        key = sync_key(self.ctx)
        if not self.cluster.store_backend.exists(key):
            return None
        return SyncState.from_text(self.cluster.store_backend.read_bytes(key).decode('utf-8'))

    def _write_sync(self, state, entity):
        self.cluster.store_backend.write_bytes(sync_key(self.ctx), state.to_text().encode('utf-8'))
        self._emit(entity, 'sync-write', status=state.status, writer=state.writer, digest=state.digest)

    # ---- image acquisition

    def acquire_image(self, rank):
        """Pull, import and migrate the step image while holding the sync file; global task 0 (or a reclaimer) only"""
        node = self.cluster.nodes[rank.node]
        start = self.sim.now
        before = self.cluster.store_ops.snapshot()
        self.trace.counters['acquisitions'] += 1
        self._write_sync(SyncState(SYNC_IN_PROGRESS, writer=rank.global_rank, ts=self.sim.now), rank.entity)
        self._charge(before)

        crash = self.faults.triggers('crash', node.index, rank.global_rank)
        if crash and (self.trace.counters['acquisitions'] == 1):
            self._emit(rank.entity, 'writer-crash')
            raise RankFailure('writer-crashed', 'rank %d died while holding the sync file' % rank.global_rank)

        reference = self.edf.image
        try:
            image = self.cluster.registry.get(reference)
            if image is None:
                raise ImageNotFoundError('image %s is not in the registry' % reference)
            if self.faults.triggers('acquire', node.index, rank.global_rank):
                raise StoreError('injected failure pulling %s' % reference)
            size_mb = sum(e.size for layer in image.layers for e in layer.entries) / 1e6
            local = LocalStore(MemoryBackend(name='node%d-engine-tmp' % node.index))
            import_image(image, local)
            self._emit(rank.entity, 'import', reference=reference, digest=image.digest)
            self._sleep(self._draw(self.cost.import_base + size_mb * self.cost.import_per_mb))

            if self.faults.triggers('migrate', node.index, rank.global_rank):
                raise StoreError('injected failure migrating %s' % reference)
            before = self.cluster.store_ops.snapshot()
            squashed = migrate(reference, local, self.cluster.shared)
            self.trace.counters['migrations'] += 1
            self._emit(rank.entity, 'migrate', reference=reference, digest=squashed.digest)
            self._sleep(self._draw(self.cost.migrate_base + size_mb * self.cost.migrate_per_mb))
            ops = self._charge(before)
            local.remove(reference)
        except (StoreError, OSError) as e:
            log.error('Image acquisition of %s failed: %s', reference, e)
            before = self.cluster.store_ops.snapshot()
            self._write_sync(SyncState(SYNC_FAILED, writer=rank.global_rank, ts=self.sim.now, reason=str(e)), rank.entity)
            self._charge(before)
            raise RankFailure('acquisition-failed', str(e)) from e

        before = self.cluster.store_ops.snapshot()
        self._write_sync(SyncState(SYNC_COMPLETE, squashed.digest, rank.global_rank, self.sim.now), rank.entity)
        self._charge(before)
        self.trace.phase('image-acquisition', node.index, start, self.sim.now - start, rank.global_rank, ops)
        return squashed

    def await_image(self, rank):
        """Poll the sync file until the image is complete; reclaim it from a writer gone stale"""
        deadline = self.sim.now + self.cost.stale_timeout
        while True:
            before = self.cluster.store_ops.snapshot()
            state = self._read_sync()
            self._charge(before)
            if state is None:
                if self.sim.now > deadline:
                    raise RankFailure('acquisition-failed', 'no writer ever created %s' % sync_key(self.ctx))
            elif state.status == SYNC_COMPLETE:
                return state
            elif state.status == SYNC_FAILED:
                raise RankFailure('acquisition-failed', state.reason or 'writer reported failure')
            elif self.sim.now - state.ts > self.cost.stale_timeout:
                if self._read_sync() != state:
                    # another rank took over while we slept
                    continue
                log.warning('Sync file of step %d.%d stale (writer %d, %.1f s old); rank %d takes over',
                            self.ctx.job_id, self.ctx.step_id, state.writer, self.sim.now - state.ts, rank.global_rank)
                self._emit(rank.entity, 'sync-reclaim', stale_writer=state.writer)
                self.acquire_image(rank)
                return self._read_sync()
            self._sleep(self.cost.poll_interval)

    # ---- per-node container

    def start_node_container(self, node, rank):
        """Local task 0: scratch dirs, plan, hook pipeline, mount view and the detached shim"""
        if rank.local_rank != 0:
            raise SimulationError('only local task 0 may start the node container (rank %d)' % rank.global_rank)
        if node.container is not None:
            raise SimulationError('node %d already runs container %s' % (node.index, node.container.container_id))
        start = self.sim.now
        entity = 'node%d' % node.index

        edf = decode_job_environment(self.job_env)
        self.trace.counters['edf_reconstructions'] += 1
        self._emit(entity, 'edf-reconstruct')

        paths = step_paths(self.site, self.ctx)
        for name in ('root', 'runroot'):
            self._make_scratch(node, paths[name])
        self._make_scratch(node, posixpath.dirname(paths['pidfile']))
        plan = shim_plan(render_plan(edf, self.site, self.ctx), self.site, self.ctx)

        before = self.cluster.store_ops.snapshot()
        record = self.cluster.shared.find(edf.image)
        self._sleep(self._draw(self.cost.image_check))
        ops = self._charge(before)
        if record is None:
            raise RankFailure('image-missing', 'image %s is not in the shared store' % edf.image)

        if self.faults.triggers('start', node.index, rank.global_rank):
            raise RankFailure('container-start-failed', 'injected engine failure on node %d' % node.index)
        try:
            before = self.cluster.store_ops.snapshot()
            image = self.cluster.shared.open_image(edf.image)
            ops += self._charge(before)
            spec = RuntimeSpec.from_plan(plan)
            pipeline = run_pipeline(spec, edf.annotations, edf.devices, self.hooks,
                                    ContainerTree(image.artifact.paths()), self.settings.features)
            view = mount_view(image, MemoryBackend(name='node%d-upper' % node.index), (self.ctx.uid, self.ctx.gid),
                              owner=(self.ctx.job_id, self.ctx.step_id, node.index), readonly=not edf.writable,
                              store=self.cluster.shared)
        except (HookError, StoreError) as e:
            raise RankFailure('container-start-failed', str(e)) from e

        self.trace.counters['mount_views'] += 1
        self._sleep(self._draw(self.cost.engine_start) + len(pipeline.stages) * self._draw(self.cost.per_hook))
        self._sleep(self._draw(self.cost.entrypoint_wait))

        pid = 1000 + node.index
        shim = ShimRecord('skiff-%d.%d-node%d' % (self.ctx.job_id, self.ctx.step_id, node.index), node.index, pid,
                          plan, view, (self.ctx.uid, self.ctx.gid),
                          {ns: '/proc/%d/ns/%s' % (pid, ns) for ns in JOINED_NAMESPACES})
        node.container = shim
        rank.container, rank.identity = shim.container_id, shim.identity
        rank.namespaces = JOINED_NAMESPACES + HOST_NAMESPACES
        self.trace.counters['container_starts'] += 1
        self._emit(entity, 'container-start', container=shim.container_id, argv=plan_to_argv(plan),
                   hook_stages=list(pipeline.stages))
        self.trace.phase('podman-mediated-startup', node.index, start, self.sim.now - start, rank.global_rank, ops)
        return shim

    def _make_scratch(self, node, path):
        node.local.makedirs(path)
        node.scratch[path] = ScratchDir(path, self.ctx.uid, self.ctx.gid, 0o700)

    def _prepare_runtime(self, node):
        """Local task 0 after the shim is up: draw join costs and hold until the node is prepared"""
        start = self.sim.now
        for r in node.ranks[1:]:
            if self.cost.join_mode == 'setns':
                node.join_costs[r.global_rank] = float(self.cost.join * self.cluster.rng.uniform(0.5, 1.0))
            else:
                node.join_costs[r.global_rank] = self._draw(self.cost.exec_join)
        prep = self._draw(self.cost.runtime_prep) + max(node.join_costs.values(), default=0.0)
        node.prep_end = start + prep
        self._release(node)
        self._sleep(prep)
        self.trace.phase('runtime-preparation', node.index, start, prep, node.ranks[0].global_rank)

    def _release(self, node):
        """Wake every waiting local rank exactly once"""
        if node.released:
            return
        node.released = True
        for _ in node.ranks[1:]:
            self.ready[node.index].signal()

    # ---- teardown

    def stop_container(self, node):
        """Stop the node's shim; a second stop only warns"""
        shim = node.container
        if shim is None:
            return False
        if not shim.live:
            msg = 'container %s already stopped' % shim.container_id
            log.warning(msg)
            self.report.warnings.append(msg)
            return False
        shim.live = False
        if release_view(shim.view, self.cluster.shared):
            self.report.views_released += 1
        node.stops += 1
        self.trace.counters['stops'] += 1
        self._emit('node%d' % node.index, 'container-stop', container=shim.container_id)
        return True

    def teardown_node(self, node, rank):
        """Run by the last rank of a node to finish: stop the shim and remove scratch space"""
        start = self.sim.now
        if self.stop_container(node):
            self._sleep(self._draw(self.cost.teardown))
        for path in sorted(node.scratch, reverse=True):
            node.local.rmtree(path)
            self.report.scratch_removed.append('node%d:%s' % (node.index, path))
        node.scratch.clear()
        self.report.stops[node.index] = node.stops
        self.trace.phase('teardown', node.index, start, self.sim.now - start, rank.global_rank)

    def step_epilogue(self):
        """Designated node: drop the sync file, reclaim leaked views; the image stays in the store"""
        entity = 'node%d' % DESIGNATED_NODE
        key = sync_key(self.ctx)
        if self.mode == 'cold' and self.cluster.store_backend.exists(key):
            self.cluster.store_backend.unlink(key)
            self.trace.counters['sync_deletions'] += 1
            self.report.sync_deleted_by = DESIGNATED_NODE
            self._emit(entity, 'sync-delete', key=key)
        owners = {(self.ctx.job_id, self.ctx.step_id, n.index) for n in self.cluster.nodes}
        self.report.views_reclaimed = watcher_tick(self.cluster.shared, lambda owner: owner not in owners).reclaimed
        self.report.image_retained = self.cluster.shared.find(self.edf.image) is not None
        self.report.degraded = self.first_failure is not None
        self._emit(entity, 'step-epilogue', degraded=self.report.degraded)

    # ---- rank process

    def rank_main(self, rank):
        node = self.cluster.nodes[rank.node]
        self.scheduler.create(rank)
        try:
            if rank.local_rank == 0:
                self._node_leader(node, rank)
            else:
                self._node_member(node, rank)
            self.scheduler.run(rank)
            self._sleep(self._draw(self.cost.workload))
            self.scheduler.exit(rank, 0)
        except RankFailure as e:
            self._fail(node, rank, e.reason, str(e))
        except SkiffError as e:
            log.exception('Rank %d failed', rank.global_rank)
            self._fail(node, rank, 'container-start-failed', str(e))
        finally:
            if rank.local_rank == 0:
                self._release(node)
            node.finished += 1
            if node.finished == len(node.ranks):
                self.teardown_node(node, rank)
            self.finished += 1
            if self.finished == len(self.cluster.ranks):
                self.step_epilogue()

    def _node_leader(self, node, rank):
        try:
            if self.mode == 'cold':
                if rank.global_rank == 0:
                    self.acquire_image(rank)
                else:
                    self.await_image(rank)
            self.start_node_container(node, rank)
        except RankFailure as e:
            node.failure = (e.reason, str(e))
            raise
        self._prepare_runtime(node)

    def _node_member(self, node, rank):
        rank.phase = 'waiting'
        self.ready[node.index].wait()
        if node.failure is not None:
            reason, message = node.failure
            self.scheduler.signal(rank, 'SIGKILL', reason)
            raise RankFailure(reason, 'local task 0 failed: %s' % message)
        start = self.sim.now
        if self.faults.triggers('join', node.index, rank.global_rank):
            raise RankFailure('missing-namespace-handle', 'namespace handle of %s vanished before rank %d joined'
                              % (node.container.container_id, rank.global_rank))
        join_namespaces(rank, node.container)
        cost = node.join_costs[rank.global_rank]
        self._sleep(cost)
        self.trace.counters['joins'] += 1
        self._emit(rank.entity, 'namespace-join', container=node.container.container_id, mode=self.cost.join_mode)
        self.trace.phase('namespace-join', node.index, start, cost, rank.global_rank)
        self._sleep(node.prep_end - self.sim.now)

    def _fail(self, node, rank, reason, message):
        log.info('Rank %d failed (%s): %s', rank.global_rank, reason, message)
        if self.first_failure is None:
            self.first_failure = reason
        self.scheduler.exit(rank, 1, reason)

    def run(self):
        for node in self.cluster.nodes:
            self.ready[node.index] = self.sim.semaphore(0)
        for rank in self.cluster.ranks:
            self.sim.process(self.rank_main, rank)
        self.cluster.sim = self.sim
        try:
            self.sim.run()
        finally:
            self.cluster.sim = None


def _invalid_step(trace, cluster, message):
    log.error('Step rejected before launch: %s', message)
    trace.event(0.0, 'allocator', 'edf-rejected', 'plugin', message=message)
    for rank in cluster.ranks:
        rank.phase, rank.reason, rank.exit_code = 'failed', 'invalid-edf', 1
    trace.ranks = cluster.ranks
    trace.status, trace.failure = 'failed', 'invalid-edf'
    trace.cleanup = TeardownReport(degraded=True)
    return trace


@print_timing
def run_job_step(cluster, edf, site=None, mode='cold', ctx=None, host_env=None, faults=None, cost=None, hooks=None):
    """Simulate one job step of `cluster` launching the EDF `edf` (TOML text or an Edf) and return its trace"""
    if mode not in MODES:
        raise ValueError('mode must be one of %s, not %r' % (', '.join(MODES), mode))
    site = site or SiteConfig()
    cost = cost or CostModel()
    faults = faults or FaultPlan()
    ctx = ctx or StepContext(job_id=1, step_id=cluster.steps, user='user', uid=1000, gid=1000,
                             nodes=cluster.n_nodes, ranks_per_node=cluster.ranks_per_node)
    cluster.reset()
    trace = StepTrace(ctx.job_id, ctx.step_id, mode, cluster.n_nodes, cluster.ranks_per_node, cluster.seed)
    before = cluster.store_ops.snapshot()

    # allocator side: render once, ship in the job environment
    text = serialize_edf(edf) if isinstance(edf, Edf) else edf
    try:
        resolved, settings = resolve_edf(text, dict(host_env or {}))
        site = apply_settings(site, settings)
        render_plan(resolved, site, ctx)
    except ValidationError as e:
        cluster.steps += 1
        return _invalid_step(trace, cluster, str(e))
    job_env = encode_job_environment(resolved)
    trace.counters['edf_renders'] += 1
    trace.event(0.0, 'allocator', 'edf-render', 'plugin', image=resolved.image)

    if hooks is None:
        hooks = HookRegistry.load(site.hooks_config, site.cdi_dir)

    step = StepRun(cluster, resolved, settings, job_env, site, ctx, mode, faults, cost, hooks, trace)
    log.info('Launching step %d.%d (%s start) on %d node(s) x %d rank(s)',
             ctx.job_id, ctx.step_id, mode, cluster.n_nodes, cluster.ranks_per_node)
    step.run()
    cluster.steps += 1

    after = cluster.store_ops.snapshot()
    delta = Counter(after)
    delta.subtract(Counter(before))
    trace.counters['store_writes'] = sum(delta[op] for op in ('write', 'unlink', 'mkdir', 'rmdir'))
    trace.counters['store_metadata_ops'] = sum(delta[op] for op in METADATA_OPS)
    trace.ranks = cluster.ranks
    trace.cleanup = step.report
    trace.failure = step.first_failure
    trace.status = 'completed' if step.first_failure is None else 'failed'
    log.info('Step %d.%d %s%s', ctx.job_id, ctx.step_id, trace.status,
             ' (%s)' % trace.failure if trace.failure else '')
    return trace
