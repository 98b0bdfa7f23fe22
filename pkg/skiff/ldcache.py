"""
Dynamic linker cache model, host library catalog, ABI compatibility rule and library injection planning.

A cache entry comes from a `lib*.so.<major>[.<minor>[.<patch>]]` file name found in the configured
library directories of the container tree; the soname is `lib*.so.<major>`.

---------------
Skiff HPC container launcher
Copyright (C) 2026 The Skiff Developers, all rights reserved.
You may use, distribute, and modify this code under the terms of the MIT License.
"""

import re
import posixpath
from dataclasses import dataclass, field

from skiff.runtime import HookError

import logging
log = logging.getLogger(__name__)


DEFAULT_LIB_DIRS = ('/lib', '/lib64', '/usr/lib', '/usr/lib64')
DEFAULT_INJECTION_DIR = '/usr/lib/injected'
DEFAULT_ABI = 'x86_64'

LIBFILE_RE = re.compile(r'(lib[^/]*\.so\.(\d+))((?:\.\d+)*)')
SONAME_RE = re.compile(r'(lib[^/]*)\.so\.(\d+)')
VERSION_RE = re.compile(r'\d+(\.\d+)*')


class AbiVersionError(HookError):
    """Library version string is not dot separated numbers"""


def parse_version(version):
    """'40.30.2' -> (40, 30, 2); missing parts are zero, trailing zeros past the patch level are dropped"""
    if not isinstance(version, str) or not VERSION_RE.fullmatch(version):
        raise AbiVersionError('unparseable library version %r' % (version,))
    parts = [int(p) for p in version.split('.')]
    parts += [0] * (3 - len(parts))
    while len(parts) > 3 and parts[-1] == 0:
        parts.pop()
    return tuple(parts)


def library_name(soname):
    """'libmpi.so.40' -> 'libmpi'"""
    m = SONAME_RE.fullmatch(soname)
    return m.group(1) if m else soname


def abi_compatible(container_lib, host_lib):
    """(soname, version) pairs: same soname, same major, host minor and later parts not older than the container's"""
    c_soname, c_version = container_lib
    h_soname, h_version = host_lib
    c, h = parse_version(c_version), parse_version(h_version)
    if c_soname != h_soname:
        return False
    return c[0] == h[0] and h[1:] >= c[1:]


@dataclass(frozen=True)
class CacheEntry:
    soname: str
    path: str
    abi: str
    version: str


@dataclass
class LinkerCacheModel:
    entries: list = field(default_factory=list)

    def lookup(self, soname, abi=None):
        for e in self.entries:
            if e.soname == soname and (abi is None or e.abi == abi):
                return e
        return None

    def by_library(self, name):
        return [e for e in self.entries if library_name(e.soname) == name]

    def sonames(self):
        return sorted({e.soname for e in self.entries})

    def __len__(self):
        return len(self.entries)


class ContainerTree(object):
    """Container file paths plus the destinations of the runtime spec's mounts"""

    def __init__(self, files=(), spec=None):
        self.files = set(files)
        if spec is not None:
            self.files.update(m.destination for m in spec.mounts)

    def listdir(self, directory):
        directory = directory.rstrip('/') or '/'
        return sorted({posixpath.basename(p) for p in self.files if posixpath.dirname(p) == directory})


def ldcache_refresh(tree, dirs=DEFAULT_LIB_DIRS, abi=DEFAULT_ABI):
    """Rescan library directories; one entry per soname, highest version wins, first directory on ties"""
    best = {}
    order = []
    for d in dirs:
        for name in tree.listdir(d):
            m = LIBFILE_RE.fullmatch(name)
            if not m:
                continue
            soname = m.group(1)
            version = m.group(2) + m.group(3)
            entry = CacheEntry(soname, posixpath.join(d, name), abi, version)
            if soname not in best:
                order.append(soname)
                best[soname] = entry
            elif parse_version(version) > parse_version(best[soname].version):
                best[soname] = entry
    cache = LinkerCacheModel([best[s] for s in order])
    log.debug('Linker cache refreshed: %d entries', len(cache))
    return cache


@dataclass(frozen=True)
class HostLibrary:
    soname: str
    path: str
    version: str
    abi: str = DEFAULT_ABI
    inject_if_missing: bool = False

    @classmethod
    def from_dict(cls, doc, abi=DEFAULT_ABI):
        lib = cls(doc['soname'], doc['path'], doc['version'], doc.get('abi', abi), bool(doc.get('inject_if_missing', False)))
        parse_version(lib.version)
        return lib


@dataclass
class HostLibraryCatalog:
    entries: list = field(default_factory=list)

    def add(self, lib):
        if lib not in self.entries:
            self.entries.append(lib)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


@dataclass(frozen=True)
class InjectionPolicy:
    injection_dir: str = DEFAULT_INJECTION_DIR


@dataclass(frozen=True)
class Replacement:
    soname: str
    host_path: str
    container_path: str


@dataclass(frozen=True)
class Skip:
    soname: str
    host_path: str
    reason: str


@dataclass
class InjectionPlan:
    replacements: list = field(default_factory=list)
    additions: list = field(default_factory=list)
    skips: list = field(default_factory=list)

    def __bool__(self):
        return bool(self.replacements or self.additions)


def libinject_hook(cache, hosts, policy=InjectionPolicy()):
    """Plan bind-mounts of host libraries over ABI-compatible container entries, or into the injection dir"""
    plan = InjectionPlan()
    for lib in hosts:
        entry = cache.lookup(lib.soname)
        if entry is None:
            others = cache.by_library(library_name(lib.soname))
            if others:
                plan.skips.append(Skip(lib.soname, lib.path, 'container has %s, major version differs'
                                       % ', '.join(e.soname for e in others)))
            elif lib.inject_if_missing:
                plan.additions.append(Replacement(lib.soname, lib.path, posixpath.join(policy.injection_dir, lib.soname)))
            else:
                plan.skips.append(Skip(lib.soname, lib.path, 'not present in container'))
        elif entry.abi != lib.abi:
            plan.skips.append(Skip(lib.soname, lib.path, 'ABI tag %s does not match container %s' % (lib.abi, entry.abi)))
        elif not abi_compatible((entry.soname, entry.version), (lib.soname, lib.version)):
            plan.skips.append(Skip(lib.soname, lib.path, 'host version %s older than container %s' % (lib.version, entry.version)))
        else:
            plan.replacements.append(Replacement(lib.soname, lib.path, entry.path))
    log.debug('Injection plan: %d replacement(s), %d addition(s), %d skip(s)',
              len(plan.replacements), len(plan.additions), len(plan.skips))
    return plan
