"""
Container Device Interface (CDI) specs: load a spec directory and apply device edits to a runtime spec.

---------------
Skiff HPC container launcher
Copyright (C) 2026 The Skiff Developers, all rights reserved.
You may use, distribute, and modify this code under the terms of the MIT License.
"""

import io
import os
import json
import fnmatch
from dataclasses import dataclass, field

from skiff.runtime import HookError, SpecMount, DeviceNode

import logging
log = logging.getLogger(__name__)


class UnknownDeviceError(HookError):
    """Requested device name resolves to no CDI device"""


class CdiConflictError(HookError):
    """Two CDI specs disagree, or a spec document is malformed"""


@dataclass(frozen=True)
class ContainerEdits:
    env: tuple = ()
    mounts: tuple = ()
    device_nodes: tuple = ()

    @classmethod
    def from_dict(cls, doc):
        doc = doc or {}
        return cls(
            env=tuple(doc.get('env', ())),
            mounts=tuple(SpecMount(m['hostPath'], m['containerPath'], tuple(m.get('options', ()))) for m in doc.get('mounts', ())),
            device_nodes=tuple(DeviceNode(d['path'], d.get('type', 'c'), d.get('major', 0), d.get('minor', 0))
                               for d in doc.get('deviceNodes', ())),
        )

    def __bool__(self):
        return bool(self.env or self.mounts or self.device_nodes)


@dataclass(frozen=True)
class CdiSpec:
    """One device: fully-qualified name `vendor/class=name` plus its container edits"""
    name: str
    kind: str
    edits: ContainerEdits
    source: str = ''


@dataclass
class CdiRegistry:
    devices: dict = field(default_factory=dict)      # name -> CdiSpec
    class_edits: dict = field(default_factory=dict)  # kind -> ContainerEdits

    def add_document(self, doc, source='<memory>'):
        try:
            kind = doc['kind']
            devices = doc['devices']
        except (KeyError, TypeError):
            raise CdiConflictError('%s: CDI document needs "kind" and "devices"' % source) from None
        if kind in self.class_edits:
            raise CdiConflictError('%s: device class %s already defined' % (source, kind))
        self.class_edits[kind] = ContainerEdits.from_dict(doc.get('containerEdits'))
        for dev in devices:
            name = '%s=%s' % (kind, dev['name'])
            if name in self.devices:
                raise CdiConflictError('%s: duplicate CDI device %s' % (source, name))
            self.devices[name] = CdiSpec(name, kind, ContainerEdits.from_dict(dev.get('containerEdits')), source)
        log.debug('CDI %s: %d device(s) of class %s', source, len(devices), kind)
        return self

    def resolve(self, requested):
        """Expand names (selector `all` meaning every device of the class) to sorted CdiSpecs"""
        resolved = {}
        for name in requested:
            kind, sep, selector = name.partition('=')
            if not sep:
                raise UnknownDeviceError('device name %r lacks a =selector' % name)
            if selector == 'all':
                matches = [d for d in self.devices.values() if d.kind == kind]
            else:
                matches = [self.devices[name]] if name in self.devices else []
            if not matches:
                raise UnknownDeviceError('unknown CDI device %s' % name)
            for d in matches:
                resolved[d.name] = d
        return [resolved[n] for n in sorted(resolved)]


def load_cdi_dir(path):
    """Read every *.json CDI document in `path` (sorted by file name)"""
    registry = CdiRegistry()
    if not path or not os.path.isdir(path):
        log.debug('No CDI spec directory at %s', path)
        return registry
    for fname in sorted(fnmatch.filter(os.listdir(path), '*.json')):
        full = os.path.join(path, fname)
        with io.open(full, 'r', encoding='utf-8') as f:
            try:
                doc = json.load(f)
            except ValueError as e:
                raise CdiConflictError('%s: not valid JSON: %s' % (full, e)) from None
        registry.add_document(doc, fname)
    return registry


def cdi_edits(spec, registry, requested):
    """Apply CDI edits in place, returning [(source, kind, detail)] actions"""
    actions = []
    assigned = {}  # env name -> (value, source)

    def _apply(edits, source):
        for item in edits.env:
            name, _, value = item.partition('=')
            if name in assigned and assigned[name][0] != value:
                raise CdiConflictError('CDI env %s set to %r by %s and %r by %s'
                                       % (name, assigned[name][0], assigned[name][1], value, source))
            assigned[name] = (value, source)
            spec.set_env(name, value)
            actions.append((source, 'env', item))
        for m in edits.mounts:
            spec.add_mount(m)
            actions.append((source, 'mount', '%s:%s' % (m.source, m.destination)))
        for d in edits.device_nodes:
            spec.add_device(d)
            actions.append((source, 'device', d.path))

    devices = registry.resolve(sorted(set(requested)))
    for kind in sorted({d.kind for d in devices}):
        if registry.class_edits.get(kind):
            _apply(registry.class_edits[kind], kind)
        for d in devices:
            if d.kind == kind:
                _apply(d.edits, d.name)
    return actions


def apply_cdi(spec, registry, requested):
    """Return a copy of `spec` with the edits of every requested device merged in"""
    spec = spec.copy()
    cdi_edits(spec, registry, requested)
    return spec
