"""
Launch-time integration pipeline: CDI devices -> precreate env/mount edits -> host library
injection -> linker cache refresh -> MPS service. Hooks are requested with annotations of the form
`com.hooks.<name>.enabled = "true"` plus optional `com.hooks.<name>.<param>` parameters.

---------------
Skiff HPC container launcher
Copyright (C) 2026 The Skiff Developers, all rights reserved.
You may use, distribute, and modify this code under the terms of the MIT License.
"""

import io
import re
import json
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional

from skiff import print_timing
from skiff.runtime import HookError, EnvConflictError, SpecMount, DeviceNode
from skiff.cdi import CdiRegistry, cdi_edits, load_cdi_dir
from skiff.ldcache import (DEFAULT_ABI, DEFAULT_INJECTION_DIR, DEFAULT_LIB_DIRS, ContainerTree, HostLibrary,
                           HostLibraryCatalog, InjectionPolicy, ldcache_refresh, libinject_hook)

import logging
log = logging.getLogger(__name__)


STAGES = ('cdi', 'pce', 'libinject', 'ldcache', 'mps')
HOOK_ANNOTATION_RE = re.compile(r'com\.hooks\.([A-Za-z0-9_-]+)\.([A-Za-z0-9_.-]+)')
MPS_HOOK = 'nvidia_cuda_mps'
SERVICE_HOOKS = frozenset((MPS_HOOK,))


class MissingProfileError(HookError):
    """Hook enabled by annotation but the registry has no profile (or variant) for it"""


class PrecreateScopeError(HookError):
    """Precreate edits touched something other than env and mounts"""


@dataclass(frozen=True)
class Profile:
    """Site realization of one hook: env, mounts, host libraries; optional named variants"""
    name: str
    env: tuple = ()           # (name, value) pairs
    mounts: tuple = ()        # SpecMount
    libraries: tuple = ()     # HostLibrary
    devices: tuple = ()       # DeviceNode; never allowed at precreate
    variants: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, name, doc, abi=DEFAULT_ABI):
        return cls(
            name=name,
            env=tuple(OrderedDict(doc.get('env', {})).items()),
            mounts=tuple(SpecMount(m['source'], m['destination'], tuple(m.get('options', ('rbind', 'ro'))))
                         for m in doc.get('mounts', ())),
            libraries=tuple(HostLibrary.from_dict(l, abi) for l in doc.get('libraries', ())),
            devices=tuple(DeviceNode(d['path'], d.get('type', 'c'), d.get('major', 0), d.get('minor', 0))
                          for d in doc.get('devices', ())),
            variants={v: cls.from_dict('%s:%s' % (name, v), vdoc, abi) for v, vdoc in doc.get('variants', {}).items()},
        )


@dataclass
class HookRegistry:
    profiles: dict = field(default_factory=dict)
    cdi: CdiRegistry = field(default_factory=CdiRegistry)
    abi: str = DEFAULT_ABI
    injection_dir: str = DEFAULT_INJECTION_DIR
    ldcache_dirs: tuple = DEFAULT_LIB_DIRS
    mps: dict = field(default_factory=lambda: dict(pipe_directory='/var/run/nvidia-mps', log_directory='/var/log/nvidia-mps'))

    @classmethod
    def from_dict(cls, doc, cdi=None):
        abi = doc.get('abi', DEFAULT_ABI)
        reg = cls(
            profiles={name: Profile.from_dict(name, pdoc, abi) for name, pdoc in doc.get('profiles', {}).items()},
            cdi=cdi if cdi is not None else CdiRegistry(),
            abi=abi,
            injection_dir=doc.get('injection_dir', DEFAULT_INJECTION_DIR),
            ldcache_dirs=tuple(doc.get('ldcache_dirs', DEFAULT_LIB_DIRS)),
        )
        reg.mps.update(doc.get('mps', {}))
        return reg

    @classmethod
    def load(cls, path=None, cdi_dir=None):
        """Registry from a JSON hooks file (empty registry when `path` is None) plus a CDI directory"""
        cdi = load_cdi_dir(cdi_dir)
        if not path:
            return cls(cdi=cdi)
        log.debug('Loading hook registry %s', path)
        with io.open(path, 'r', encoding='utf-8') as f:
            return cls.from_dict(json.load(f), cdi)


def hook_requests(annotations):
    """{hook name: {param: value}} for every `com.hooks.*` annotation, sorted by hook name"""
    requests = {}
    for key in sorted(annotations):
        m = HOOK_ANNOTATION_RE.fullmatch(key)
        if m:
            requests.setdefault(m.group(1), {})[m.group(2)] = annotations[key]
    return OrderedDict((k, requests[k]) for k in sorted(requests))


def enabled_hooks(annotations):
    return [name for name, params in hook_requests(annotations).items() if params.get('enabled') == 'true']


def _profile_layers(registry, annotations):
    """[(hook name, profile or variant)] for every enabled precreate hook"""
    layers = []
    requests = hook_requests(annotations)
    for name in enabled_hooks(annotations):
        if name in SERVICE_HOOKS:
            continue
        profile = registry.profiles.get(name)
        if profile is None:
            raise MissingProfileError('hook %s is enabled but the site has no profile for it' % name)
        layers.append((name, profile))
        variant = requests[name].get('variant')
        if variant is not None:
            if variant not in profile.variants:
                raise MissingProfileError('hook %s has no variant %r' % (name, variant))
            layers.append(('%s:%s' % (name, variant), profile.variants[variant]))
    return layers


def _scope_signature(spec):
    d = spec.to_dict()
    d['process'].pop('env')
    d.pop('mounts')
    return d


def _pce_edits(spec, registry, annotations, protected=None):
    """Apply precreate edits in place; returns [(source, kind, detail)]"""
    actions = []
    protected = dict(protected or {})
    before = _scope_signature(spec)
    for source, profile in _profile_layers(registry, annotations):
        for name, value in profile.env:
            if name in protected and protected[name][0] != value:
                raise EnvConflictError('env %s set to %r by %s and %r by %s'
                                       % (name, protected[name][0], protected[name][1], value, source))
            protected[name] = (value, source)
            spec.set_env(name, value)
            actions.append((source, 'env', '%s=%s' % (name, value)))
        for m in profile.mounts:
            spec.add_mount(m)
            actions.append((source, 'mount', '%s:%s' % (m.source, m.destination)))
        if profile.devices:
            raise PrecreateScopeError('profile %s adds device nodes; precreate edits are limited to env and mounts' % source)
    if _scope_signature(spec) != before:
        raise PrecreateScopeError('precreate edits may only change env and mounts')
    return actions


def pce_hook(spec, config, annotations):
    """Copy of `spec` with the env and mount edits of every enabled hook profile"""
    spec = spec.copy()
    _pce_edits(spec, config, annotations)
    return spec


def host_catalog(registry, annotations):
    """Host libraries contributed by the enabled hook profiles"""
    catalog = HostLibraryCatalog()
    for _, profile in _profile_layers(registry, annotations):
        for lib in profile.libraries:
            catalog.add(lib)
    return catalog


@dataclass(frozen=True)
class MpsService:
    pipe_directory: str
    log_directory: str

    @property
    def env(self):
        return (('CUDA_MPS_PIPE_DIRECTORY', self.pipe_directory), ('CUDA_MPS_LOG_DIRECTORY', self.log_directory))


def mps_hook(spec, annotations, registry=None):
    """MPS service record when `com.hooks.nvidia_cuda_mps.enabled` is "true"; its env is added to `spec`"""
    if annotations.get('com.hooks.%s.enabled' % MPS_HOOK) != 'true':
        return None
    conf = (registry or HookRegistry()).mps
    service = MpsService(conf['pipe_directory'], conf['log_directory'])
    for name, value in service.env:
        spec.set_env(name, value)
    return service


@dataclass(frozen=True)
class Action:
    stage: str
    source: str
    kind: str
    detail: str


@dataclass
class PipelineResult:
    spec: object
    actions: list
    cache: Optional[object] = None
    injection: Optional[object] = None
    mps: Optional[MpsService] = None

    @property
    def stages(self):
        return sorted({a.stage for a in self.actions}, key=STAGES.index)


@print_timing
def run_pipeline(spec, annotations, devices, registry, tree=None, features=None):
    """Run the fixed stage order over a copy of `spec`; a stage disabled in `features` is skipped"""
    spec = spec.copy()
    annotations = OrderedDict((k, annotations[k]) for k in sorted(annotations))
    devices = sorted(devices)
    features = features or {}
    tree = tree if tree is not None else ContainerTree()
    result = PipelineResult(spec, [])
    log_ = result.actions

    def _record(stage, actions):
        log_.extend(Action(stage, source, kind, detail) for source, kind, detail in actions)

    def _enabled(stage):
        on = features.get(stage, True)
        if not on:
            log.info('Hook stage %s disabled by feature toggle', stage)
        return on

    try:
        cdi_env = {}
        if devices and _enabled('cdi'):
            actions = cdi_edits(spec, registry.cdi, devices)
            _record('cdi', actions)
            cdi_env = {detail.partition('=')[0]: (detail.partition('=')[2], source)
                       for source, kind, detail in actions if kind == 'env'}

        if _enabled('pce'):
            actions = _pce_edits(spec, registry, annotations, cdi_env)
            if actions:
                spec.hooks['precreate'].append('pce')
            _record('pce', actions)

        lib_edits = False
        if _enabled('libinject'):
            catalog = host_catalog(registry, annotations)
            if len(catalog):
                dirs = tuple(registry.ldcache_dirs) + (registry.injection_dir,)
                cache = ldcache_refresh(ContainerTree(tree.files, spec), dirs, registry.abi)
                plan = libinject_hook(cache, catalog, InjectionPolicy(registry.injection_dir))
                result.injection = plan
                actions = []
                for r in plan.replacements:
                    spec.add_mount(SpecMount(r.host_path, r.container_path, ('rbind', 'ro')))
                    actions.append((r.soname, 'replace', '%s:%s' % (r.host_path, r.container_path)))
                for a in plan.additions:
                    spec.add_mount(SpecMount(a.host_path, a.container_path, ('rbind', 'ro')))
                    actions.append((a.soname, 'inject', '%s:%s' % (a.host_path, a.container_path)))
                for s in plan.skips:
                    actions.append((s.soname, 'skip', s.reason))
                if plan:
                    spec.hooks['createRuntime'].append('libinject')
                    lib_edits = True
                _record('libinject', actions)

        if lib_edits and _enabled('ldcache'):
            dirs = tuple(registry.ldcache_dirs) + (registry.injection_dir,)
            result.cache = ldcache_refresh(ContainerTree(tree.files, spec), dirs, registry.abi)
            spec.hooks['createRuntime'].append('ldcache')
            _record('ldcache', [('ldconfig', 'refresh', '%d entries' % len(result.cache))])

        if _enabled('mps'):
            result.mps = mps_hook(spec, annotations, registry)
            if result.mps is not None:
                spec.hooks['prestart'].append('mps')
                _record('mps', [(MPS_HOOK, 'env', '%s=%s' % kv) for kv in result.mps.env])
    except HookError as e:
        e.partial_log = list(log_)
        log.error('Hook pipeline aborted after %d action(s): %s', len(log_), e)
        raise

    log.debug('Hook pipeline: %d action(s) from stages %s', len(log_), ', '.join(result.stages) or '-')
    return result
