"""
Storage backends shared by the image stores, mount views and the cluster simulator.

Both backends address objects by relative posix keys ('artifacts/ab12.sqimg') and account every
call in an `OpCounter`, which is what the read-only contract and the metadata-pressure models assert on.

---------------
Skiff HPC container launcher
Copyright (C) 2026 The Skiff Developers, all rights reserved.
You may use, distribute, and modify this code under the terms of the MIT License.
"""

import os
import errno
import contextlib
import shutil
import tempfile
import posixpath
from collections import Counter

import logging
log = logging.getLogger(__name__)


METADATA_OPS = frozenset(('stat', 'open', 'listdir'))
DATA_OPS = frozenset(('read',))
MUTATION_OPS = frozenset(('write', 'unlink', 'mkdir', 'rmdir'))


class OpCounter(object):
    """Counts backend operations; optionally records (op, key) pairs"""

    def __init__(self, record=False):
        self.counts = Counter()
        self.log = [] if record else None

    def __call__(self, op, key):
        self.counts[op] += 1
        if self.log is not None:
            self.log.append((op, key))

    def __repr__(self):
        return '%s(%s)' % (self.__class__.__name__, dict(self.counts))

    @property
    def metadata_ops(self):
        return sum(self.counts[op] for op in METADATA_OPS)

    @property
    def writes(self):
        return sum(self.counts[op] for op in MUTATION_OPS)

    def snapshot(self):
        return dict(self.counts)

    def writes_under(self, prefix):
        """Recorded mutations whose key starts with `prefix` (requires record=True)"""
        if self.log is None:
            raise ValueError('OpCounter was created without recording')
        return [(op, key) for op, key in self.log if op in MUTATION_OPS and key.startswith(prefix)]


def _file_mode():
    """0666 less the process umask, the mode a plain open() would create"""
    umask = os.umask(0)
    os.umask(umask)
    return 0o666 & ~umask


def _clean(key):
    key = posixpath.normpath('/' + key).lstrip('/')
    return '' if key == '.' else key


class MemoryBackend(object):
    """Key/value object space with implied directories"""

    writable = True

    def __init__(self, counter=None, name='mem'):
        self.name = name
        self.ops = counter if counter is not None else OpCounter()
        self._objects = {}
        self._dirs = {''}

    def __repr__(self):
        return '%s(%s, %d objects)' % (self.__class__.__name__, self.name, len(self._objects))

    def _add_parents(self, key):
        parent = posixpath.dirname(key)
        while parent not in self._dirs:
            self._dirs.add(parent)
            parent = posixpath.dirname(parent)

    def exists(self, key):
        key = _clean(key)
        self.ops('stat', key)
        return key in self._objects or key in self._dirs

    def stat(self, key):
        """{'kind': 'file'|'dir', 'size': n} or None"""
        key = _clean(key)
        self.ops('stat', key)
        if key in self._objects:
            return dict(kind='file', size=len(self._objects[key]))
        if key in self._dirs:
            return dict(kind='dir', size=0)
        return None

    def read_bytes(self, key):
        key = _clean(key)
        self.ops('open', key)
        try:
            data = self._objects[key]
        except KeyError:
            raise FileNotFoundError(errno.ENOENT, 'no such object', key) from None
        self.ops('read', key)
        return data

    def write_bytes(self, key, data):
        """Replace the object at `key` in one step"""
        key = _clean(key)
        if key in self._dirs:
            raise IsADirectoryError(errno.EISDIR, 'is a directory', key)
        self.ops('write', key)
        self._add_parents(key)
        self._objects[key] = bytes(data)

    def unlink(self, key):
        key = _clean(key)
        if key not in self._objects:
            raise FileNotFoundError(errno.ENOENT, 'no such object', key)
        self.ops('unlink', key)
        del self._objects[key]

    def makedirs(self, key):
        key = _clean(key)
        if key in self._objects:
            raise FileExistsError(errno.EEXIST, 'object exists', key)
        if key not in self._dirs:
            self.ops('mkdir', key)
            self._dirs.add(key)
            self._add_parents(key)

    def rmtree(self, key):
        key = _clean(key)
        prefix = key + '/' if key else ''
        doomed = [k for k in self._objects if k.startswith(prefix)]
        for k in doomed:
            self.ops('unlink', k)
            del self._objects[k]
        for d in [d for d in self._dirs if d == key or d.startswith(prefix)]:
            if d:
                self.ops('rmdir', d)
                self._dirs.discard(d)

    def listdir(self, key=''):
        key = _clean(key)
        self.ops('listdir', key)
        if key not in self._dirs:
            raise FileNotFoundError(errno.ENOENT, 'no such directory', key)
        prefix = key + '/' if key else ''
        names = set()
        for k in list(self._objects) + list(self._dirs):
            if k and k.startswith(prefix) and k != key:
                names.add(k[len(prefix):].split('/', 1)[0])
        return sorted(names)


class DiskBackend(object):
    """Objects are files below `root`; writes go through a temp file and an atomic rename"""

    def __init__(self, root, counter=None, create=True):
        self.root = os.path.abspath(os.path.expanduser(root))
        self.name = self.root
        self.ops = counter if counter is not None else OpCounter()
        if create:
            os.makedirs(self.root, exist_ok=True)

    def __repr__(self):
        return '%s(%s)' % (self.__class__.__name__, self.root)

    @property
    def writable(self):
        return os.access(self.root, os.W_OK)

    def _path(self, key):
        return os.path.join(self.root, *_clean(key).split('/')) if _clean(key) else self.root

    def exists(self, key):
        self.ops('stat', _clean(key))
        return os.path.lexists(self._path(key))

    def stat(self, key):
        self.ops('stat', _clean(key))
        try:
            st = os.stat(self._path(key))
        except OSError:
            return None
        kind = 'dir' if os.path.isdir(self._path(key)) else 'file'
        return dict(kind=kind, size=st.st_size if kind == 'file' else 0, mode=st.st_mode & 0o7777, uid=st.st_uid, gid=st.st_gid)

    def read_bytes(self, key):
        self.ops('open', _clean(key))
        with open(self._path(key), 'rb') as f:
            self.ops('read', _clean(key))
            return f.read()

    def write_bytes(self, key, data):
        """Write via temp file + rename so readers never observe a partial object"""
        path = self._path(key)
        self.ops('write', _clean(key))
        os.makedirs(os.path.dirname(path), exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix='.tmp-', dir=os.path.dirname(path))
        try:
            with os.fdopen(fd, 'wb') as f:
                f.write(data)
            os.chmod(tmp, _file_mode())
            os.replace(tmp, path)
        except BaseException:
            with contextlib.suppress(OSError):
                os.unlink(tmp)
            raise

    def unlink(self, key):
        self.ops('unlink', _clean(key))
        os.unlink(self._path(key))

    def makedirs(self, key):
        path = self._path(key)
        if not os.path.isdir(path):
            self.ops('mkdir', _clean(key))
            os.makedirs(path, exist_ok=True)

    def rmtree(self, key):
        path = self._path(key)
        if os.path.lexists(path):
            self.ops('rmdir', _clean(key))
            shutil.rmtree(path)

    def listdir(self, key=''):
        self.ops('listdir', _clean(key))
        return sorted(n for n in os.listdir(self._path(key)) if not n.startswith('.tmp-'))

