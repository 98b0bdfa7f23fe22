"""
OCI-style runtime specification document: the object the hook pipeline mutates.

---------------
Skiff HPC container launcher
Copyright (C) 2026 The Skiff Developers, all rights reserved.
You may use, distribute, and modify this code under the terms of the MIT License.
"""

import copy
from collections import OrderedDict
from dataclasses import dataclass, field

from skiff import SkiffError

import logging
log = logging.getLogger(__name__)


OCI_VERSION = '1.1.0'
HOOK_STAGES = ('precreate', 'createRuntime', 'prestart')


class HookError(SkiffError):
    """Fatal hook pipeline error; `partial_log` holds the actions recorded before it"""

    def __init__(self, message, partial_log=None):
        super().__init__(message)
        self.partial_log = list(partial_log or [])


class EnvConflictError(HookError):
    """Two integration sources assign different values to one environment variable"""


@dataclass(frozen=True)
class SpecMount:
    source: str
    destination: str
    options: tuple = ()

    def to_dict(self):
        return {'destination': self.destination, 'type': 'bind', 'source': self.source, 'options': list(self.options)}


@dataclass(frozen=True)
class DeviceNode:
    path: str
    type: str = 'c'
    major: int = 0
    minor: int = 0

    def to_dict(self):
        return {'path': self.path, 'type': self.type, 'major': self.major, 'minor': self.minor}


@dataclass
class RuntimeSpec:
    """Process env (ordered NAME=value), mounts, device nodes, annotations and hooks per stage"""
    env: list = field(default_factory=list)
    mounts: list = field(default_factory=list)
    devices: list = field(default_factory=list)
    annotations: OrderedDict = field(default_factory=OrderedDict)
    hooks: dict = field(default_factory=lambda: {stage: [] for stage in HOOK_STAGES})
    root: str = 'rootfs'
    readonly: bool = False
    args: list = field(default_factory=list)
    cwd: str = '/'

    def copy(self):
        return copy.deepcopy(self)

    def get_env(self, name, default=None):
        for item in self.env:
            k, _, v = item.partition('=')
            if k == name:
                return v
        return default

    def env_dict(self):
        return OrderedDict(item.partition('=')[::2] for item in self.env)

    def set_env(self, name, value):
        """Set `name`, replacing an earlier assignment in place"""
        for i, item in enumerate(self.env):
            if item.partition('=')[0] == name:
                self.env[i] = '%s=%s' % (name, value)
                return
        self.env.append('%s=%s' % (name, value))

    def add_mount(self, mount):
        if not mount.destination.startswith('/'):
            raise HookError('mount destination %r is not absolute' % mount.destination)
        if mount not in self.mounts:
            self.mounts.append(mount)

    def add_device(self, node):
        if all(d.path != node.path for d in self.devices):
            self.devices.append(node)

    def to_dict(self):
        return {
            'ociVersion': OCI_VERSION,
            'process': {'env': list(self.env), 'args': list(self.args), 'cwd': self.cwd},
            'root': {'path': self.root, 'readonly': self.readonly},
            'mounts': [m.to_dict() for m in self.mounts],
            'linux': {'devices': [d.to_dict() for d in self.devices]},
            'annotations': dict(self.annotations),
            'hooks': {stage: [{'path': name} for name in names] for stage, names in self.hooks.items() if names},
        }

    @classmethod
    def from_dict(cls, doc):
        process = doc.get('process', {})
        return cls(
            env=list(process.get('env', [])),
            mounts=[SpecMount(m['source'], m['destination'], tuple(m.get('options', ()))) for m in doc.get('mounts', [])],
            devices=[DeviceNode(d['path'], d.get('type', 'c'), d.get('major', 0), d.get('minor', 0))
                     for d in doc.get('linux', {}).get('devices', [])],
            annotations=OrderedDict(doc.get('annotations', {})),
            hooks={stage: [h['path'] for h in doc.get('hooks', {}).get(stage, [])] for stage in HOOK_STAGES},
            root=doc.get('root', {}).get('path', 'rootfs'),
            readonly=doc.get('root', {}).get('readonly', False),
            args=list(process.get('args', [])),
            cwd=process.get('cwd', '/'),
        )

    @classmethod
    def from_plan(cls, plan):
        """Base spec implied by an engine plan's run options"""
        spec = cls(args=list(plan.command))
        for opt in plan.run_options:
            if opt.flag == '--env':
                name, _, value = opt.value.partition('=')
                spec.set_env(name, value)
            elif opt.flag == '--mount':
                parts = dict(p.partition('=')[::2] for p in opt.value.split(','))
                options = ('rbind', 'ro') if 'readonly' in parts else ('rbind', 'rw')
                spec.add_mount(SpecMount(parts['src'], parts['dst'], options))
            elif opt.flag == '--annotation':
                key, _, value = opt.value.partition('=')
                spec.annotations[key] = value
            elif opt.flag == '--workdir':
                spec.cwd = opt.value
            elif opt.flag == '--read-only':
                spec.readonly = True
        return spec
