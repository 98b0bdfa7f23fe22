"""
Kubernetes Pod manifests (strict subset) run as a single-node group of containers.

Accepted grammar:

    apiVersion: v1
    kind: Pod
    metadata: {name, annotations}
    spec:
      restartPolicy: Never
      volumes: [{name, emptyDir: {}} | {name, hostPath: {path}}]
      initContainers / containers:
        [{name, image, command, args, env: [{name, value}],
          volumeMounts: [{name, mountPath, readOnly}], resources: {limits: {...}}}]

Any other key is rejected by name. A limits key of the form `vendor/class=name` is a CDI device
request; `cpu` and `memory` limits are accepted and not enforced. Pod annotations apply to every
container; a key written as `<key>/<container>` applies to that container only and wins. Reserved
`com.sarus.*` keys are consumed as per-container control-plane settings and never reach the engine.

---------------
Skiff HPC container launcher
Copyright (C) 2026 The Skiff Developers, all rights reserved.
You may use, distribute, and modify this code under the terms of the MIT License.
"""

import io
import os
import json
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Optional

import yaml
import numpy as np
import simulus

from skiff import ValidationError, print_timing
from skiff.edf import Edf, Mount, DEVICE_NAME_RE, ReservedAnnotationError, validate_edf, split_annotations
from skiff.plan import SiteConfig, StepContext, apply_settings, render_plan
from skiff.runtime import RuntimeSpec
from skiff.hooks import run_pipeline
from skiff.ldcache import ContainerTree
from skiff.storage import MemoryBackend, DiskBackend
from skiff.imagestore import Bind, mount_view, release_view
from skiff.executor import Executor

import logging
log = logging.getLogger(__name__)


TOP_KEYS = frozenset(('apiVersion', 'kind', 'metadata', 'spec'))
METADATA_KEYS = frozenset(('name', 'annotations'))
SPEC_KEYS = frozenset(('restartPolicy', 'volumes', 'initContainers', 'containers'))
CONTAINER_KEYS = frozenset(('name', 'image', 'command', 'args', 'env', 'volumeMounts', 'resources'))
MOUNT_KEYS = frozenset(('name', 'mountPath', 'readOnly'))
PLAIN_LIMITS = frozenset(('cpu', 'memory'))

POD_UID = 1000
CONTAINER_START = 0.35   # seconds of simulated engine work per container


class ManifestError(ValidationError):
    """Manifest is outside the supported Pod subset; `key` names the offending field"""

    def __init__(self, key, message):
        super().__init__('%s: %s' % (key, message))
        self.key = key


@dataclass(frozen=True)
class Volume:
    name: str
    kind: str                   # emptyDir | hostPath
    path: Optional[str] = None


@dataclass(frozen=True)
class VolumeMount:
    volume: str
    mount_path: str
    readonly: bool = False


@dataclass(frozen=True)
class ContainerSpec:
    name: str
    image: str
    command: tuple = ()
    env: OrderedDict = field(default_factory=OrderedDict)
    volume_mounts: tuple = ()
    limits: OrderedDict = field(default_factory=OrderedDict)

    @property
    def devices(self):
        return tuple(k for k in self.limits if '=' in k)


@dataclass(frozen=True)
class PodManifest:
    name: str
    annotations: OrderedDict
    volumes: tuple
    init_containers: tuple
    containers: tuple
    restart_policy: str = 'Never'

    @property
    def all_containers(self):
        return self.init_containers + self.containers


def _mapping(value, key):
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise ManifestError(key, 'expected a mapping')
    return value


def _strict(doc, allowed, key):
    doc = _mapping(doc, key)
    for k in doc:
        if k not in allowed:
            raise ManifestError('%s.%s' % (key, k) if key else k, 'unsupported key')
    return doc


def _string(value, key):
    if not isinstance(value, str) or not value:
        raise ManifestError(key, 'expected a non-empty string')
    return value


def _string_list(value, key):
    if value is None:
        return ()
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise ManifestError(key, 'expected a list of strings')
    return tuple(value)


def _parse_volume(doc, key):
    doc = _strict(doc, ('name', 'emptyDir', 'hostPath'), key)
    name = _string(doc.get('name'), key + '.name')
    kinds = [k for k in ('emptyDir', 'hostPath') if k in doc]
    if len(kinds) != 1:
        raise ManifestError(key, 'volume %s needs exactly one of emptyDir, hostPath' % name)
    if kinds[0] == 'emptyDir':
        if _mapping(doc['emptyDir'], key + '.emptyDir'):
            raise ManifestError(key + '.emptyDir', 'emptyDir options are not supported')
        return Volume(name, 'emptyDir')
    host = _strict(doc['hostPath'], ('path',), key + '.hostPath')
    path = _string(host.get('path'), key + '.hostPath.path')
    if not path.startswith('/'):
        raise ManifestError(key + '.hostPath.path', 'path %r is not absolute' % path)
    return Volume(name, 'hostPath', path)


def _parse_container(doc, key, volumes):
    doc = _strict(doc, CONTAINER_KEYS, key)
    name = _string(doc.get('name'), key + '.name')
    image = _string(doc.get('image'), key + '.image')
    command = _string_list(doc.get('command'), key + '.command') + _string_list(doc.get('args'), key + '.args')

    env = OrderedDict()
    for i, item in enumerate(doc.get('env') or ()):
        item = _strict(item, ('name', 'value'), '%s.env[%d]' % (key, i))
        env[_string(item.get('name'), '%s.env[%d].name' % (key, i))] = str(item.get('value', ''))

    mounts = []
    for i, item in enumerate(doc.get('volumeMounts') or ()):
        mkey = '%s.volumeMounts[%d]' % (key, i)
        item = _strict(item, MOUNT_KEYS, mkey)
        vol = _string(item.get('name'), mkey + '.name')
        if vol not in volumes:
            raise ManifestError(mkey + '.name', 'volume %s is not declared' % vol)
        path = _string(item.get('mountPath'), mkey + '.mountPath')
        if not path.startswith('/'):
            raise ManifestError(mkey + '.mountPath', 'mount path %r is not absolute' % path)
        mounts.append(VolumeMount(vol, path, bool(item.get('readOnly', False))))

    resources = _strict(doc.get('resources'), ('limits',), key + '.resources')
    limits = OrderedDict()
    for name_, count in _mapping(resources.get('limits'), key + '.resources.limits').items():
        lkey = '%s.resources.limits.%s' % (key, name_)
        if '=' in name_:
            if not DEVICE_NAME_RE.fullmatch(name_):
                raise ManifestError(lkey, 'not a CDI device name (vendor/class=name)')
            if not isinstance(count, int) or isinstance(count, bool) or count < 1:
                raise ManifestError(lkey, 'device count must be a positive integer')
        elif name_ not in PLAIN_LIMITS:
            raise ManifestError(lkey, 'unsupported resource limit')
        limits[name_] = count
    if len([k for k in limits if '=' in k]) > 1:
        raise ManifestError(key + '.resources.limits', 'at most one device class per container')
    return ContainerSpec(name, image, command, env, tuple(mounts), limits)


def parse_pod_manifest(text):
    """Parse and validate a Pod manifest; raises ManifestError naming the offending key"""
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ManifestError('<document>', 'not valid YAML: %s' % e) from None
    doc = _strict(doc, TOP_KEYS, '')
    if doc.get('apiVersion') != 'v1':
        raise ManifestError('apiVersion', 'unsupported apiVersion %r' % doc.get('apiVersion'))
    if doc.get('kind') != 'Pod':
        raise ManifestError('kind', 'unsupported kind %r (only Pod)' % doc.get('kind'))
    meta = _strict(doc.get('metadata'), METADATA_KEYS, 'metadata')
    name = _string(meta.get('name'), 'metadata.name')
    annotations = OrderedDict()
    for k, v in _mapping(meta.get('annotations'), 'metadata.annotations').items():
        if not isinstance(v, str):
            raise ManifestError('metadata.annotations.%s' % k, 'annotation values must be strings')
        annotations[str(k)] = v

    spec = _strict(doc.get('spec'), SPEC_KEYS, 'spec')
    policy = spec.get('restartPolicy', 'Never')
    if policy != 'Never':
        raise ManifestError('spec.restartPolicy', 'only Never is supported, not %r' % policy)

    volumes = OrderedDict()
    for i, v in enumerate(spec.get('volumes') or ()):
        vol = _parse_volume(v, 'spec.volumes[%d]' % i)
        if vol.name in volumes:
            raise ManifestError('spec.volumes[%d].name' % i, 'duplicate volume %s' % vol.name)
        volumes[vol.name] = vol

    groups = {}
    seen = set()
    for group in ('initContainers', 'containers'):
        parsed = []
        for i, c in enumerate(spec.get(group) or ()):
            container = _parse_container(c, 'spec.%s[%d]' % (group, i), volumes)
            if container.name in seen:
                raise ManifestError('spec.%s[%d].name' % (group, i), 'duplicate container %s' % container.name)
            seen.add(container.name)
            parsed.append(container)
        groups[group] = tuple(parsed)
    if not groups['containers']:
        raise ManifestError('spec.containers', 'pod has no containers')
    return PodManifest(name, annotations, tuple(volumes.values()), groups['initContainers'], groups['containers'], policy)


def load_pod_manifest(fname):
    with io.open(fname, 'r', encoding='utf-8') as f:
        return parse_pod_manifest(f.read())


def _container_dict(c):
    d = OrderedDict(name=c.name, image=c.image)
    if c.command:
        d['command'] = list(c.command)
    if c.env:
        d['env'] = [dict(name=k, value=v) for k, v in c.env.items()]
    if c.volume_mounts:
        d['volumeMounts'] = [dict(name=m.volume, mountPath=m.mount_path, readOnly=m.readonly) for m in c.volume_mounts]
    if c.limits:
        d['resources'] = dict(limits=dict(c.limits))
    return dict(d)


def manifest_to_dict(manifest):
    """Plain-data form that `parse_pod_manifest(yaml.safe_dump(...))` maps back to an equal manifest"""
    volumes = []
    for v in manifest.volumes:
        volumes.append(dict(name=v.name, emptyDir={}) if v.kind == 'emptyDir' else dict(name=v.name, hostPath=dict(path=v.path)))
    spec = dict(restartPolicy=manifest.restart_policy, volumes=volumes,
                containers=[_container_dict(c) for c in manifest.containers])
    if manifest.init_containers:
        spec['initContainers'] = [_container_dict(c) for c in manifest.init_containers]
    return dict(apiVersion='v1', kind='Pod', metadata=dict(name=manifest.name, annotations=dict(manifest.annotations)),
                spec=spec)


def container_annotations(manifest, container):
    """Pod-wide annotations overlaid with the `<key>/<container>` ones of `container`"""
    names = {c.name for c in manifest.all_containers}
    effective = OrderedDict()
    scoped = OrderedDict()
    for key, value in manifest.annotations.items():
        base, sep, target = key.rpartition('/')
        if sep and target in names:
            if target == container:
                scoped[base] = value
        else:
            effective[key] = value
    effective.update(scoped)
    return effective


# ---- planning

@dataclass
class ContainerPlan:
    name: str
    phase: str                  # init | main
    edf: Edf
    plan: object
    spec: RuntimeSpec
    command: tuple
    mounts: tuple               # VolumeMount
    features: dict = field(default_factory=dict)


@dataclass
class PodPlan:
    manifest: PodManifest
    volumes: OrderedDict        # name -> Volume
    init: list
    main: list

    @property
    def containers(self):
        return self.init + self.main


def _volume_source(manifest, volume):
    if volume.kind == 'hostPath':
        return volume.path
    return '/var/lib/skiff/pods/%s/volumes/%s' % (manifest.name, volume.name)


@print_timing
def plan_pod(manifest, site=None, user='user', uid=POD_UID, gid=POD_UID):
    """Engine plan and base runtime spec per container, init containers first"""
    site = site or SiteConfig()
    volumes = OrderedDict((v.name, v) for v in manifest.volumes)
    plans = {'init': [], 'main': []}
    for step, c in enumerate(manifest.all_containers):
        phase = 'init' if c in manifest.init_containers else 'main'
        mounts = tuple(Mount(_volume_source(manifest, volumes[m.volume]), m.mount_path, m.readonly) for m in c.volume_mounts)
        edf = Edf(image=c.image, mounts=mounts, entrypoint=not c.command, devices=c.devices,
                  env=OrderedDict(c.env), annotations=container_annotations(manifest, c.name), expanded=True)
        report = validate_edf(edf)
        if not report.ok:
            raise ManifestError(c.name, '; '.join('%s: %s' % e for e in report.errors))
        try:
            settings, forwarded = split_annotations(edf)
        except ReservedAnnotationError as e:
            raise ManifestError('metadata.annotations.%s' % e.key, 'container %s: %s' % (c.name, e)) from None
        edf = replace(edf, annotations=forwarded)
        ctx = StepContext(job_id=0, step_id=step, user=user, uid=uid, gid=gid)
        plan = render_plan(edf, apply_settings(site, settings), ctx)
        plans[phase].append(ContainerPlan(c.name, phase, edf, plan, RuntimeSpec.from_plan(plan), c.command,
                                          c.volume_mounts, settings.features))
    return PodPlan(manifest, volumes, plans['init'], plans['main'])


# ---- execution

class Barrier(object):
    """Reusable rendezvous of `parties` simulated processes"""

    def __init__(self, sim, parties):
        self.sim = sim
        self.parties = parties
        self.arrived = 0
        self._sem = sim.semaphore(0)

    def wait(self):
        self.arrived += 1
        if self.arrived < self.parties:
            self._sem.wait()
            return
        self.arrived = 0
        for _ in range(self.parties - 1):
            self._sem.signal()


@dataclass
class ContainerResult:
    name: str
    phase: str
    exit_code: Optional[int] = None
    stdout: list = field(default_factory=list)
    stderr: list = field(default_factory=list)
    started: Optional[float] = None
    finished: Optional[float] = None
    annotations: dict = field(default_factory=dict)
    devices: tuple = ()
    hook_stages: list = field(default_factory=list)

    def to_dict(self):
        return dict(kind='container', name=self.name, phase=self.phase, exit_code=self.exit_code,
                    stdout=list(self.stdout), stderr=list(self.stderr), started=self.started,
                    finished=self.finished, annotations=dict(self.annotations), devices=list(self.devices),
                    hook_stages=list(self.hook_stages))


@dataclass
class PodResult:
    name: str
    status: str = 'Pending'     # Succeeded | Failed
    containers: list = field(default_factory=list)
    events: list = field(default_factory=list)

    def container(self, name):
        for c in self.containers:
            if c.name == name:
                return c
        raise KeyError(name)

    @property
    def exit_code(self):
        return 0 if self.status == 'Succeeded' else 1

    def to_jsonl(self):
        records = list(self.events) + [c.to_dict() for c in self.containers]
        records.append(dict(kind='pod', name=self.name, status=self.status))
        return ''.join(json.dumps(r, sort_keys=True) + '\n' for r in records)


class PodRunner(object):
    """Runs a PodPlan against the shared store with per-pod volume backends"""

    def __init__(self, pod_plan, shared, hooks, host_root=None, seed=0):
        self.pod = pod_plan
        self.shared = shared
        self.hooks = hooks
        self.host_root = host_root
        self.rng = np.random.default_rng(seed)
        self.sim = simulus.simulator()
        self.result = PodResult(pod_plan.manifest.name)
        self.backends = OrderedDict()
        for name, vol in pod_plan.volumes.items():
            if vol.kind == 'emptyDir':
                self.backends[name] = MemoryBackend(name='%s/%s' % (pod_plan.manifest.name, name))
            else:
                root = os.path.join(host_root, vol.path.lstrip('/')) if host_root else vol.path
                self.backends[name] = DiskBackend(root)
        self.barrier = Barrier(self.sim, max(1, len(pod_plan.main)))

    def __repr__(self):
        return '%s(%s)' % (self.__class__.__name__, self.pod.manifest.name)

    def _event(self, container, event, **detail):
        self.result.events.append(dict(kind='event', t=round(float(self.sim.now), 9), container=container,
                                       event=event, detail=detail))

    def run_container(self, cplan, barrier=None):
        """Hook pipeline, mount view, command; returns the ContainerResult"""
        res = ContainerResult(cplan.name, cplan.phase, annotations=dict(cplan.edf.annotations), devices=cplan.edf.devices)
        self.result.containers.append(res)
        image = self.shared.open_image(cplan.edf.image)
        pipeline = run_pipeline(cplan.spec, cplan.edf.annotations, cplan.edf.devices, self.hooks,
                                ContainerTree(image.artifact.paths()), cplan.features)
        res.hook_stages = list(pipeline.stages)
        binds = [Bind(m.mount_path, self.backends[m.volume], m.readonly) for m in cplan.mounts]
        view = mount_view(image, MemoryBackend(name='%s-upper' % cplan.name), (POD_UID, POD_UID),
                          owner=(self.pod.manifest.name, cplan.name), binds=binds, store=self.shared)
        self.sim.sleep(float(CONTAINER_START * np.clip(1.0 + 0.05 * self.rng.standard_normal(), 0.5, 1.5)))
        res.started = round(float(self.sim.now), 9)
        self._event(cplan.name, 'start', phase=cplan.phase, hook_stages=res.hook_stages)

        config = image.record.config
        env = OrderedDict(config.get('env') or {})
        env.update(pipeline.spec.env_dict())
        command = list(cplan.command) or list(config.get('cmd') or ())
        prelude = list(config.get('entrypoint') or ()) if cplan.edf.entrypoint else None
        executor = Executor(view, env, barrier=barrier.wait if barrier else None, name=cplan.name)
        try:
            res.exit_code = executor.run(command, prelude)
        finally:
            release_view(view, self.shared)
        res.stdout, res.stderr = executor.stdout, executor.stderr
        res.finished = round(float(self.sim.now), 9)
        self._event(cplan.name, 'exit', code=res.exit_code)
        return res

    def _main_process(self, cplan):
        try:
            self.run_container(cplan, self.barrier)
        except Exception as e:
            log.exception('Container %s failed to start', cplan.name)
            self._event(cplan.name, 'start-failed', error=str(e))
            self._fail_container(cplan, str(e))

    def _fail_container(self, cplan, message):
        try:
            res = self.result.container(cplan.name)
        except KeyError:
            res = ContainerResult(cplan.name, cplan.phase, annotations=dict(cplan.edf.annotations), devices=cplan.edf.devices)
            self.result.containers.append(res)
        res.exit_code = 1 if res.exit_code is None else res.exit_code
        res.stderr.append(message)

    def _init_phase(self):
        for cplan in self.pod.init:
            try:
                res = self.run_container(cplan)
            except Exception as e:
                log.exception('Init container %s failed to start', cplan.name)
                self._fail_container(cplan, str(e))
                return False
            if res.exit_code != 0:
                log.warning('Init container %s exited %d; main containers will not start', cplan.name, res.exit_code)
                return False
        return True

    def _pod_main(self):
        if not self._init_phase():
            self.result.status = 'Failed'
            self._event('-', 'pod-failed', reason='init container failed')
            return
        self._event('-', 'main-phase')
        for cplan in self.pod.main:
            self.sim.process(self._main_process, cplan)

    def run(self):
        self.sim.process(self._pod_main)
        self.sim.run()
        if self.result.status != 'Failed':
            main = [c for c in self.result.containers if c.phase == 'main']
            ok = len(main) == len(self.pod.main) and all(c.exit_code == 0 for c in main)
            self.result.status = 'Succeeded' if ok else 'Failed'
        log.info('Pod %s %s', self.pod.manifest.name, self.result.status)
        return self.result


def run_pod(pod_plan, shared, hooks, host_root=None, seed=0):
    """Run init containers in order, then every main container concurrently; returns the PodResult"""
    return PodRunner(pod_plan, shared, hooks, host_root, seed).run()
