"""
Module for reading/writing the squashed image artifact: a single deterministic, digest-addressed archive.

Layout (little endian, see docs/formats.md):

    header      ARTIFACT_HEAD_FMT          magic, version, flags, entry count
    table       entry_count x (ARTIFACT_ENTRY_FMT + path bytes + target bytes), sorted by path
    blobs       file contents, deduplicated by content digest, in first-use order
    trailer     32 byte sha256 over everything before it

---------------
Skiff HPC container launcher
Copyright (C) 2026 The Skiff Developers, all rights reserved.
You may use, distribute, and modify this code under the terms of the MIT License.
"""

import io
import mmap
import struct
import hashlib
import contextlib
import posixpath
from dataclasses import dataclass
from typing import Optional

from skiff import StoreError, print_timing

import logging
log = logging.getLogger(__name__)


ARTIFACT_MAGIC = b'SKSQIMG\x00'
ARTIFACT_VERSION = 1
ARTIFACT_HEAD_FMT = '< 8s H H I'  # magic, version, flags, entry_count
ARTIFACT_ENTRY_FMT = '< B x H I I Q Q Q 32s H H'  # kind, mode, uid, gid, mtime, size, blob_offset, digest, path_len, target_len
HEAD = struct.Struct(ARTIFACT_HEAD_FMT)
ENTRY = struct.Struct(ARTIFACT_ENTRY_FMT)
TRAILER_LEN = 32

NO_DIGEST = b'\x00' * 32


class EntryKind:
    """Enumeration of entry kinds as stored in the artifact"""
    FILE = 1
    DIR = 2
    SYMLINK = 3

    NAMES = {FILE: 'file', DIR: 'dir', SYMLINK: 'symlink'}
    CODES = {v: k for k, v in NAMES.items()}


class CorruptArtifactError(StoreError):
    """Artifact bytes do not match their format or trailing digest"""


@dataclass(frozen=True)
class Entry:
    """One filesystem entry. Paths are absolute and normalized; `data` is for files, `target` for symlinks."""
    path: str
    kind: str = 'file'
    mode: int = 0o644
    uid: int = 0
    gid: int = 0
    data: bytes = b''
    target: Optional[str] = None
    mtime: int = 0

    @property
    def size(self):
        return len(self.data) if self.kind == 'file' else 0

    @property
    def content_digest(self):
        return hashlib.sha256(self.data).digest() if self.kind == 'file' else NO_DIGEST

    def __repr__(self):
        return '%s(%s %s %o %d:%d)' % (self.__class__.__name__, self.kind, self.path, self.mode, self.uid, self.gid)


def normalize_path(path):
    """Absolute, normalized posix path ('/a/b'); '/' for the root"""
    path = posixpath.normpath('/' + path.lstrip('/'))
    return '/' + path.lstrip('/')


def format_digest(raw):
    return 'sha256:' + raw.hex()


class ArtifactWriter(object):
    """Interface for writing a squashed artifact.

    Entries are buffered and written sorted by path on `close()`, mtimes canonicalized to 0.

    with ArtifactWriter(outfname) as out:
        out.add_entries(entries)
    print(out.digest)
    """

    def __init__(self, f):
        if isinstance(f, (str, bytes)):
            self.fname = f
            self._f = io.open(f, 'wb')
            self._owns_file = True
        else:
            self.fname = getattr(f, 'name', '<stream>')
            self._f = f
            self._owns_file = False
        self._entries = {}
        self.digest = None
        self.byte_count = 0

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        if exc_type is None:
            self.close()
        elif self._owns_file:
            self._f.close()

    def __repr__(self):
        return '%s(%s)' % (self.__class__.__name__, self.fname)

    def add_entries(self, entries):
        """Add entries; a path may only appear once. You may call this multiple times."""
        for e in entries:
            path = normalize_path(e.path)
            if path == '/':
                continue
            if path in self._entries:
                raise ValueError('duplicate artifact entry %s' % path)
            if e.kind not in EntryKind.CODES:
                raise ValueError('unsupported entry kind %r for %s' % (e.kind, path))
            self._entries[path] = e

    def close(self):
        """Write header, table, blobs and trailer; then close the outfile if we opened it"""
        if self.digest is not None:
            return
        hasher = hashlib.sha256()

        def _write(b):
            hasher.update(b)
            self._f.write(b)
            self.byte_count += len(b)

        blobs, blob_offsets, blob_size = [], {}, 0
        table = []
        for path in sorted(self._entries):
            e = self._entries[path]
            digest = e.content_digest
            if e.kind == 'file' and digest not in blob_offsets:
                blob_offsets[digest] = blob_size
                blobs.append(e.data)
                blob_size += len(e.data)
            offset = blob_offsets.get(digest, 0) if e.kind == 'file' else 0
            path_b = path.encode('utf-8')
            target_b = (e.target or '').encode('utf-8') if e.kind == 'symlink' else b''
            table.append(ENTRY.pack(EntryKind.CODES[e.kind], e.mode & 0o7777, e.uid, e.gid, 0, e.size, offset, digest,
                                    len(path_b), len(target_b)) + path_b + target_b)

        _write(HEAD.pack(ARTIFACT_MAGIC, ARTIFACT_VERSION, 0, len(table)))
        for record in table:
            _write(record)
        for blob in blobs:
            _write(blob)
        trailer = hasher.digest()
        self._f.write(trailer)
        self.byte_count += TRAILER_LEN
        self.digest = format_digest(trailer)
        log.debug('Wrote artifact %s: %d entries, %d blobs, %d bytes', self.digest[:19], len(table), len(blobs), self.byte_count)
        if self._owns_file:
            self._f.close()


@print_timing
def build_artifact(entries):
    """Build an artifact in memory, returning (bytes, digest)"""
    buf = io.BytesIO()
    with ArtifactWriter(buf) as out:
        out.add_entries(entries)
    return buf.getvalue(), out.digest


class SquashedArtifact(object):
    """Read-only view of artifact bytes with a path -> table-offset index.

    `index_lookups` counts every path resolution made through the index.
    """

    def __init__(self, data, name='<artifact>'):
        self.name = name
        self._data = data
        self.index_lookups = 0
        if len(data) < HEAD.size + TRAILER_LEN:
            raise CorruptArtifactError('%s: truncated artifact (%d bytes)' % (name, len(data)))
        magic, version, _flags, count = HEAD.unpack_from(data, 0)
        if magic != ARTIFACT_MAGIC:
            raise CorruptArtifactError('%s: bad magic %r' % (name, magic))
        if version != ARTIFACT_VERSION:
            raise CorruptArtifactError('%s: unsupported artifact version %d' % (name, version))

        self._index = {}
        self._children = {}
        pos = HEAD.size
        end = len(data) - TRAILER_LEN
        try:
            for _ in range(count):
                rec = ENTRY.unpack_from(data, pos)
                path_len, target_len = rec[8], rec[9]
                path = bytes(data[pos + ENTRY.size:pos + ENTRY.size + path_len]).decode('utf-8')
                if pos + ENTRY.size + path_len + target_len > end:
                    raise CorruptArtifactError('%s: entry table overruns artifact' % name)
                self._index[path] = pos
                parent, base = posixpath.split(path)
                self._children.setdefault(parent, []).append(base)
                pos += ENTRY.size + path_len + target_len
        except (struct.error, UnicodeDecodeError) as e:
            raise CorruptArtifactError('%s: malformed entry table: %s' % (name, e)) from None
        self._blob_base = pos
        self.count = count

    @classmethod
    def from_file(cls, fname):
        """Open an artifact file from disk"""
        with open(fname, 'rb') as f, contextlib.closing(mmap.mmap(f.fileno(), 0, access=mmap.ACCESS_READ)) as m:
            return cls(bytes(m), name=fname)

    def __repr__(self):
        return '%s(%s, %d entries)' % (self.__class__.__name__, self.name, self.count)

    def __len__(self):
        return self.count

    def __contains__(self, path):
        return normalize_path(path) in self._index

    @property
    def digest(self):
        return format_digest(bytes(self._data[-TRAILER_LEN:]))

    def verify(self):
        """Raise CorruptArtifactError unless the trailing digest matches the content"""
        actual = hashlib.sha256(self._data[:-TRAILER_LEN]).digest()
        if actual != bytes(self._data[-TRAILER_LEN:]):
            raise CorruptArtifactError('%s: digest mismatch (content hashes to %s)' % (self.name, format_digest(actual)))
        return self.digest

    def _entry_at(self, pos):
        kind, mode, uid, gid, mtime, size, offset, digest, path_len, target_len = ENTRY.unpack_from(self._data, pos)
        start = pos + ENTRY.size
        path = bytes(self._data[start:start + path_len]).decode('utf-8')
        target = bytes(self._data[start + path_len:start + path_len + target_len]).decode('utf-8') if kind == EntryKind.SYMLINK else None
        data = bytes(self._data[self._blob_base + offset:self._blob_base + offset + size]) if kind == EntryKind.FILE else b''
        return Entry(path, EntryKind.NAMES[kind], mode, uid, gid, data, target, mtime)

    def lookup(self, path):
        """Entry at `path`, or None. Counts one index lookup."""
        self.index_lookups += 1
        pos = self._index.get(normalize_path(path))
        return self._entry_at(pos) if pos is not None else None

    def listdir(self, path):
        """Sorted child names of directory `path` ('/' for the root)"""
        return sorted(self._children.get(normalize_path(path), ()))

    def paths(self):
        return sorted(self._index)

    def entries(self):
        """All entries in path order"""
        for path in self.paths():
            yield self._entry_at(self._index[path])
