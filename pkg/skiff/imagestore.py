"""
Shared image store: import layered images into a temporary local store, flatten and migrate them
into squashed artifacts in the shared read-only store, and expose remapped overlay views of them.

Shared store layout (keys relative to the store root, see docs/formats.md):

    artifacts/<hex>.sqimg      squashed artifact, named by its digest
    meta/<hex>.rec             line-oriented key=value record for that artifact

---------------
Skiff HPC container launcher
Copyright (C) 2026 The Skiff Developers, all rights reserved.
You may use, distribute, and modify this code under the terms of the MIT License.
"""

import io
import os
import json
import tarfile
import hashlib
import itertools
import posixpath
from collections import OrderedDict
from dataclasses import dataclass, field
from datetime import datetime, timezone

from skiff import StoreError, print_timing
from skiff.archive import Entry, SquashedArtifact, build_artifact, normalize_path

import logging
log = logging.getLogger(__name__)


WHITEOUT_PREFIX = '.wh.'
OPAQUE_MARKER = '.wh..wh..opq'
LAYOUT_INDEX = 'index.json'


class DigestMismatchError(StoreError):
    """Layer or artifact content does not hash to its recorded digest"""


class EmptyImageError(StoreError):
    """Image has no layers"""


class ImageCollisionError(StoreError):
    """Reference already present with a different digest"""


class ImageNotFoundError(StoreError):
    """Unknown image reference"""


class ImageBusyError(StoreError):
    """Image still has live mount views"""


class MountError(StoreError):
    """View could not be set up"""


class StaleHandleError(StoreError):
    """Operation on a released mount view"""


def sha256_digest(data):
    return 'sha256:' + hashlib.sha256(data).hexdigest()


def digest_hex(digest):
    return digest.split(':', 1)[1]


def _under(path, parent):
    """Is `path` strictly below directory `parent`?"""
    return path.startswith(parent.rstrip('/') + '/')


# ---- layered images

def layer_digest(entries):
    """Canonical digest of a layer: entry metadata and content digests in path order"""
    h = hashlib.sha256()
    for e in sorted(entries, key=lambda e: normalize_path(e.path)):
        h.update(json.dumps([normalize_path(e.path), e.kind, e.mode, e.uid, e.gid, e.content_digest.hex(), e.target], separators=(',', ':')).encode('utf-8'))
        h.update(b'\n')
    return 'sha256:' + h.hexdigest()


@dataclass(frozen=True)
class Layer:
    entries: tuple
    digest: str

    @classmethod
    def of(cls, entries):
        entries = tuple(entries)
        return cls(entries, layer_digest(entries))

    def verify(self):
        actual = layer_digest(self.entries)
        if actual != self.digest:
            raise DigestMismatchError('layer %s hashes to %s' % (self.digest, actual))


@dataclass(frozen=True)
class LayeredImage:
    """Bottom-up ordered layers plus the image configuration (entrypoint, cmd, env)"""
    reference: str
    layers: tuple
    config: dict = field(default_factory=dict)

    @property
    def config_digest(self):
        return sha256_digest(json.dumps(self.config, sort_keys=True, separators=(',', ':')).encode('utf-8'))

    @property
    def digest(self):
        """Image digest over config and layer digests"""
        return sha256_digest(json.dumps([self.config_digest] + [l.digest for l in self.layers]).encode('utf-8'))

    def verify(self):
        for layer in self.layers:
            layer.verify()


def _tar_entries(data, name):
    entries = OrderedDict()
    with tarfile.open(fileobj=io.BytesIO(data), mode='r:') as tar:
        members = tar.getmembers()
        by_name = {m.name: m for m in members}
        for m in members:
            path = normalize_path(m.name)
            if path == '/':
                continue
            common = dict(mode=m.mode & 0o7777, uid=m.uid, gid=m.gid)
            if m.isdir():
                entries[path] = Entry(path, 'dir', **common)
            elif m.issym():
                entries[path] = Entry(path, 'symlink', target=m.linkname, **common)
            elif m.islnk():
                # hardlinks become independent files
                src = by_name.get(m.linkname)
                if src is None or not src.isfile():
                    log.warning('%s: hardlink %s -> %s has no regular target, skipped', name, m.name, m.linkname)
                    continue
                entries[path] = Entry(path, 'file', data=tar.extractfile(src).read(), **common)
            elif m.isfile():
                entries[path] = Entry(path, 'file', data=tar.extractfile(m).read(), **common)
            else:
                log.warning('%s: unsupported member type for %s, skipped', name, m.name)
    return list(entries.values())


@print_timing
def load_layout(layout_dir):
    """Load an image layout directory: index.json plus one tar per layer, tar digests verified"""
    with io.open(os.path.join(layout_dir, LAYOUT_INDEX), 'r', encoding='utf-8') as f:
        index = json.load(f)
    layers = []
    for i, spec in enumerate(index.get('layers', [])):
        with open(os.path.join(layout_dir, spec['file']), 'rb') as f:
            data = f.read()
        if sha256_digest(data) != spec['digest']:
            raise DigestMismatchError('%s: layer %d (%s) does not match digest %s' % (layout_dir, i, spec['file'], spec['digest']))
        layers.append(Layer.of(_tar_entries(data, spec['file'])))
    return LayeredImage(index['reference'], tuple(layers), index.get('config', {}))


def _tar_bytes(entries):
    buf = io.BytesIO()
    with tarfile.open(fileobj=buf, mode='w:', format=tarfile.PAX_FORMAT) as tar:
        for e in entries:
            info = tarfile.TarInfo(e.path.lstrip('/'))
            info.mode, info.uid, info.gid, info.mtime = e.mode, e.uid, e.gid, 0
            if e.kind == 'dir':
                info.type = tarfile.DIRTYPE
                tar.addfile(info)
            elif e.kind == 'symlink':
                info.type = tarfile.SYMTYPE
                info.linkname = e.target
                tar.addfile(info)
            else:
                info.size = len(e.data)
                tar.addfile(info, io.BytesIO(e.data))
    return buf.getvalue()


def save_layout(image, layout_dir):
    """Write `image` as a layout directory that `load_layout()` reads back"""
    os.makedirs(layout_dir, exist_ok=True)
    specs = []
    for i, layer in enumerate(image.layers):
        data = _tar_bytes(layer.entries)
        fname = 'layer%d.tar' % i
        with open(os.path.join(layout_dir, fname), 'wb') as f:
            f.write(data)
        specs.append(dict(file=fname, digest=sha256_digest(data)))
    with io.open(os.path.join(layout_dir, LAYOUT_INDEX), 'w', encoding='utf-8') as f:
        json.dump(dict(reference=image.reference, config=image.config, layers=specs), f, indent=2, sort_keys=True)
    return layout_dir


def build_image(reference, files, config=None, layers=1):
    """Deterministic synthetic image: `files` maps path -> bytes, spread round-robin over `layers` layers"""
    buckets = [[] for _ in range(max(1, layers))]
    for i, (path, data) in enumerate(sorted(files.items())):
        buckets[i % len(buckets)].append(Entry(normalize_path(path), 'file', 0o755 if path.endswith('.sh') else 0o644, data=data))
    return LayeredImage(reference, tuple(Layer.of(b) for b in buckets), dict(config or {}))


# ---- flattening

def _remove_subtree(tree, path):
    removed = tree.pop(path, None) is not None
    for p in [p for p in tree if _under(p, path)]:
        del tree[p]
        removed = True
    return removed


@print_timing
def flatten_layers(layers, warnings=None):
    """Apply layers bottom-up with OCI whiteout semantics, returning {path: Entry} sorted by path.

    Per layer: opaque markers clear the directory's lower content, then whiteouts delete lower
    entries, then regular entries override. Missing parents are created as directories.
    """
    tree = {}
    for n, layer in enumerate(layers):
        entries = layer.entries if isinstance(layer, Layer) else layer
        regular, whiteouts, opaques = [], [], []
        for e in entries:
            parent, base = posixpath.split(normalize_path(e.path))
            if base == OPAQUE_MARKER:
                opaques.append(parent)
            elif base.startswith(WHITEOUT_PREFIX):
                whiteouts.append(posixpath.join(parent, base[len(WHITEOUT_PREFIX):]))
            else:
                regular.append(e)

        for d in opaques:
            for p in [p for p in tree if _under(p, d)]:
                del tree[p]
        for target in whiteouts:
            if not _remove_subtree(tree, target):
                msg = 'layer %d: whiteout for %s matches nothing' % (n, target)
                log.debug(msg)
                if warnings is not None:
                    warnings.append(msg)
        for e in regular:
            path = normalize_path(e.path)
            parent = posixpath.dirname(path)
            missing = []
            while parent != '/' and (parent not in tree or tree[parent].kind != 'dir'):
                missing.append(parent)
                parent = posixpath.dirname(parent)
            for d in reversed(missing):
                tree.pop(d, None)
                tree[d] = Entry(d, 'dir', 0o755)
            existing = tree.get(path)
            if existing is not None and (existing.kind != 'dir' or e.kind != 'dir'):
                _remove_subtree(tree, path)
            tree[path] = Entry(path, e.kind, e.mode, e.uid, e.gid, e.data if e.kind == 'file' else b'',
                               e.target if e.kind == 'symlink' else None)
    return OrderedDict((p, tree[p]) for p in sorted(tree))


# ---- local (temporary) store

@dataclass(frozen=True)
class ImageRecord:
    reference: str
    digest: str
    sources: tuple
    config: dict = field(default_factory=dict)


class LocalStore(object):
    """Temporary per-user engine store holding imported images as layer artifacts"""

    def __init__(self, backend):
        self.backend = backend

    def __repr__(self):
        return '%s(%s)' % (self.__class__.__name__, self.backend)

    def _index(self):
        if not self.backend.exists(LAYOUT_INDEX):
            return {}
        return json.loads(self.backend.read_bytes(LAYOUT_INDEX).decode('utf-8'))

    def _save_index(self, index):
        self.backend.write_bytes(LAYOUT_INDEX, json.dumps(index, indent=2, sort_keys=True).encode('utf-8'))

    def references(self):
        return sorted(self._index())

    def find(self, reference):
        rec = self._index().get(reference)
        if rec is None:
            return None
        return ImageRecord(reference, rec['digest'], tuple(rec['sources']), rec.get('config', {}))

    def get(self, reference):
        """(ImageRecord, LayeredImage) for `reference`"""
        record = self.find(reference)
        if record is None:
            raise ImageNotFoundError('image %s is not in the local store' % reference)
        layers = []
        for i, digest in enumerate(record.sources):
            art = SquashedArtifact(self.backend.read_bytes('images/%s/layer%d.sqimg' % (digest_hex(record.digest), i)))
            art.verify()
            layer = Layer(tuple(art.entries()), digest)
            layers.append(layer)
        return record, LayeredImage(reference, tuple(layers), record.config)

    def put(self, image):
        """Persist `image`; no checks"""
        base = 'images/%s' % digest_hex(image.digest)
        for i, layer in enumerate(image.layers):
            data, _ = build_artifact(layer.entries)
            self.backend.write_bytes('%s/layer%d.sqimg' % (base, i), data)
        index = self._index()
        index[image.reference] = dict(digest=image.digest, sources=[l.digest for l in image.layers], config=image.config)
        self._save_index(index)
        return self.find(image.reference)

    def remove(self, reference):
        """Drop the temporary copy of `reference`"""
        index = self._index()
        rec = index.pop(reference, None)
        if rec is None:
            raise ImageNotFoundError('image %s is not in the local store' % reference)
        if not any(r['digest'] == rec['digest'] for r in index.values()):
            self.backend.rmtree('images/%s' % digest_hex(rec['digest']))
        self._save_index(index)
        log.debug('Removed %s from local store', reference)


def import_image(image, local_store):
    """Ingest a layered image into the local store; re-importing the same content is a no-op"""
    if not image.layers:
        raise EmptyImageError('image %s has no layers' % image.reference)
    image.verify()
    existing = local_store.find(image.reference)
    if existing is not None:
        if existing.digest == image.digest:
            log.info('Image %s already in local store', image.reference)
            return existing
        raise ImageCollisionError('image %s already imported with digest %s (new digest %s)'
                                  % (image.reference, existing.digest, image.digest))
    record = local_store.put(image)
    log.info('Imported %s (%d layers) as %s', image.reference, len(image.layers), image.digest)
    return record


# ---- shared store

@dataclass(frozen=True)
class StoreRecord:
    """Metadata record of one artifact in the shared store"""
    digest: str
    references: tuple
    created: str
    sources: tuple
    config: dict = field(default_factory=dict)

    def to_text(self):
        lines = ['reference=%s' % r for r in self.references]
        lines.append('digest=%s' % self.digest)
        lines.append('created=%s' % self.created)
        lines.extend('source=%s' % s for s in self.sources)
        for key in ('entrypoint', 'cmd', 'env'):
            if key in self.config:
                lines.append('%s=%s' % (key, json.dumps(self.config[key], sort_keys=True, separators=(',', ':'))))
        return '\n'.join(lines) + '\n'

    @classmethod
    def from_text(cls, text):
        refs, sources, config, values = [], [], {}, {}
        for line in text.splitlines():
            if not line:
                continue
            key, sep, value = line.partition('=')
            if not sep:
                raise StoreError('malformed record line %r' % line)
            if key == 'reference':
                refs.append(value)
            elif key == 'source':
                sources.append(value)
            elif key in ('entrypoint', 'cmd', 'env'):
                config[key] = json.loads(value)
            else:
                values[key] = value
        return cls(values['digest'], tuple(refs), values.get('created', ''), tuple(sources), config)


@dataclass
class SquashedImage:
    reference: str
    artifact: SquashedArtifact
    record: StoreRecord

    @property
    def digest(self):
        return self.record.digest


@dataclass(frozen=True)
class ImageListing:
    reference: str
    digest: str
    created: str


@dataclass(frozen=True)
class RemovalReport:
    reference: str
    digest: str
    artifact_removed: bool


def utc_now():
    return datetime.now(timezone.utc).strftime('%Y-%m-%dT%H:%M:%SZ')


class SharedStore(object):
    """Shared read-only image store; only `migrate()` and `remove_image()` write to it"""

    def __init__(self, backend, clock=utc_now):
        self.backend = backend
        self.clock = clock
        self.mounts = OrderedDict()  # handle id -> MountHandle
        self._handle_ids = itertools.count(1)

    def __repr__(self):
        return '%s(%s)' % (self.__class__.__name__, self.backend)

    @staticmethod
    def artifact_key(digest):
        return 'artifacts/%s.sqimg' % digest_hex(digest)

    @staticmethod
    def record_key(digest):
        return 'meta/%s.rec' % digest_hex(digest)

    def records(self):
        if not self.backend.exists('meta'):
            return []
        return [StoreRecord.from_text(self.backend.read_bytes('meta/%s' % name).decode('utf-8'))
                for name in self.backend.listdir('meta') if name.endswith('.rec')]

    def find(self, reference):
        for rec in self.records():
            if reference in rec.references:
                return rec
        return None

    def open_image(self, reference):
        """Open the squashed artifact of `reference` (one stat + one open at store level)"""
        rec = self.find(reference)
        if rec is None:
            raise ImageNotFoundError('image %s is not in the shared store' % reference)
        key = self.artifact_key(rec.digest)
        if not self.backend.exists(key):
            raise ImageNotFoundError('artifact for %s (%s) is missing' % (reference, rec.digest))
        return SquashedImage(reference, SquashedArtifact(self.backend.read_bytes(key), name=key), rec)

    def live_handles(self, digest=None):
        return [h for h in self.mounts.values() if h.live and (digest is None or h.image.digest == digest)]

    def next_handle_id(self):
        return next(self._handle_ids)


@print_timing
def migrate(reference, local_store, shared_store):
    """Flatten the locally imported `reference` into a squashed artifact in the shared store.

    The artifact is written before the record, so a crash in between leaves an unreferenced
    artifact but never a record pointing at nothing. Migrating identical content again writes nothing.
    """
    record, image = local_store.get(reference)
    warnings = []
    tree = flatten_layers(image.layers, warnings)
    for w in warnings:
        log.warning('%s: %s', reference, w)
    data, digest = build_artifact(tree.values())

    backend = shared_store.backend
    existing = shared_store.find(reference)
    if existing is not None:
        if existing.digest != digest:
            raise ImageCollisionError('image %s already in shared store with digest %s (new digest %s)'
                                      % (reference, existing.digest, digest))
        log.info('Image %s already present in shared store as %s', reference, digest)
        return shared_store.open_image(reference)

    try:
        art_key = shared_store.artifact_key(digest)
        if not backend.exists(art_key):
            backend.write_bytes(art_key, data)
        rec_key = shared_store.record_key(digest)
        if backend.exists(rec_key):
            # same content under another reference
            old = StoreRecord.from_text(backend.read_bytes(rec_key).decode('utf-8'))
            rec = StoreRecord(digest, old.references + (reference,), old.created, old.sources, old.config)
        else:
            rec = StoreRecord(digest, (reference,), shared_store.clock(), record.sources, dict(image.config))
        backend.write_bytes(rec_key, rec.to_text().encode('utf-8'))
    except OSError as e:
        raise StoreError('failed writing %s to shared store: %s' % (reference, e)) from e
    log.info('Migrated %s to %s (%d entries, %d bytes)', reference, digest, len(tree), len(data))
    return SquashedImage(reference, SquashedArtifact(data, name=art_key), rec)


def list_images(shared_store):
    """One listing per reference, sorted by reference"""
    listings = [ImageListing(ref, rec.digest, rec.created) for rec in shared_store.records() for ref in rec.references]
    return sorted(listings, key=lambda l: l.reference)


def remove_image(shared_store, reference):
    """Delete `reference`; the artifact goes with its last reference. Record first, then artifact."""
    rec = shared_store.find(reference)
    if rec is None:
        raise ImageNotFoundError('image %s is not in the shared store' % reference)
    busy = shared_store.live_handles(rec.digest)
    if busy:
        raise ImageBusyError('image %s has %d live mount view(s)' % (reference, len(busy)))
    backend = shared_store.backend
    remaining = tuple(r for r in rec.references if r != reference)
    if remaining:
        backend.write_bytes(shared_store.record_key(rec.digest),
                            StoreRecord(rec.digest, remaining, rec.created, rec.sources, rec.config).to_text().encode('utf-8'))
        log.info('Removed reference %s; artifact %s kept for %s', reference, rec.digest, ', '.join(remaining))
        return RemovalReport(reference, rec.digest, False)
    backend.unlink(shared_store.record_key(rec.digest))
    if backend.exists(shared_store.artifact_key(rec.digest)):
        backend.unlink(shared_store.artifact_key(rec.digest))
    log.info('Removed %s (%s)', reference, rec.digest)
    return RemovalReport(reference, rec.digest, True)


def check_store(shared_store):
    """Problems that make the store inconsistent: records without a (valid) artifact.

    Artifacts nobody references are tolerated; the next migrate of that content reuses them.
    """
    problems = []
    for rec in shared_store.records():
        key = shared_store.artifact_key(rec.digest)
        if not shared_store.backend.exists(key):
            problems.append('record %s (%s) has no artifact' % (rec.digest, ', '.join(rec.references)))
            continue
        try:
            if SquashedArtifact(shared_store.backend.read_bytes(key), name=key).verify() != rec.digest:
                problems.append('artifact %s does not hash to %s' % (key, rec.digest))
        except StoreError as e:
            problems.append('artifact %s: %s' % (key, e))
    return problems


# ---- mount views

@dataclass(frozen=True)
class Bind:
    """Host-side directory (any storage backend) bound at `destination` inside the view"""
    destination: str
    backend: object
    readonly: bool = False


@dataclass(frozen=True)
class ViewStat:
    path: str
    kind: str
    mode: int
    uid: int
    gid: int
    size: int


class MountHandle(object):
    """Merged read-through view: binds, then the writable upper layer, then the squashed lower layer.

    Lower entries report `identity` as owner; the artifact itself is never modified. The upper layer
    records deletions of lower entries as `.wh.<name>` markers and hides a whole lower directory with
    an opaque marker once it is re-created after a deletion.
    """

    def __init__(self, handle_id, image, upper, identity, owner=None, binds=(), readonly=False):
        self.id = handle_id
        self.image = image
        self.upper = upper
        self.identity = tuple(identity)
        self.owner = owner
        self.binds = sorted(binds, key=lambda b: len(normalize_path(b.destination)), reverse=True)
        self.readonly = readonly
        self.live = True

    def __repr__(self):
        return '%s(%d, %s, %s, %s)' % (self.__class__.__name__, self.id, self.image.reference, self.identity,
                                       'live' if self.live else 'released')

    def _check(self):
        if not self.live:
            raise StaleHandleError('mount view %d of %s has been released' % (self.id, self.image.reference))

    def _bind_for(self, path):
        for b in self.binds:
            dst = normalize_path(b.destination)
            if path == dst or _under(path, dst):
                return b, path[len(dst):].lstrip('/')
        return None, None

    @staticmethod
    def _marker(path):
        parent, base = posixpath.split(path)
        return posixpath.join(parent, WHITEOUT_PREFIX + base).lstrip('/')

    @staticmethod
    def _opaque(path):
        return posixpath.join(path, OPAQUE_MARKER).lstrip('/')

    def _ancestors(self, path):
        """`path` and every ancestor below the root"""
        while path != '/':
            yield path
            path = posixpath.dirname(path)

    def _whited_out(self, path):
        return any(self.upper.exists(self._marker(p)) for p in self._ancestors(path))

    def _lower_hidden(self, path):
        """Is the lower copy of `path` masked by an opaque upper ancestor?"""
        return any(self.upper.exists(self._opaque(p)) for p in self._ancestors(posixpath.dirname(path)))

    def _lower(self, path, follow=False):
        if self._lower_hidden(path):
            return None
        entry = self.image.artifact.lookup(path)
        hops = 0
        while follow and entry is not None and entry.kind == 'symlink' and hops < 8:
            target = entry.target if entry.target.startswith('/') else posixpath.join(posixpath.dirname(path), entry.target)
            path = normalize_path(target)
            entry = self.image.artifact.lookup(path)
            hops += 1
        return entry

    def stat(self, path):
        """ViewStat for `path`; FileNotFoundError if absent"""
        self._check()
        path = normalize_path(path)
        uid, gid = self.identity
        bind, rel = self._bind_for(path)
        if bind is not None:
            st = bind.backend.stat(rel)
            if st is None:
                raise FileNotFoundError(path)
            return ViewStat(path, st['kind'], st.get('mode', 0o755 if st['kind'] == 'dir' else 0o644), uid, gid, st['size'])
        if path == '/':
            return ViewStat('/', 'dir', 0o755, uid, gid, 0)
        if self._whited_out(path):
            raise FileNotFoundError(path)
        st = self.upper.stat(path.lstrip('/'))
        if st is not None:
            return ViewStat(path, st['kind'], 0o755 if st['kind'] == 'dir' else 0o644, uid, gid, st['size'])
        entry = self._lower(path)
        if entry is None:
            raise FileNotFoundError(path)
        return ViewStat(path, entry.kind, entry.mode, uid, gid, entry.size)

    def exists(self, path):
        try:
            self.stat(path)
            return True
        except FileNotFoundError:
            return False

    def read(self, path):
        """Content of file `path`, upper before lower"""
        self._check()
        path = normalize_path(path)
        bind, rel = self._bind_for(path)
        if bind is not None:
            return bind.backend.read_bytes(rel)
        if self._whited_out(path):
            raise FileNotFoundError(path)
        key = path.lstrip('/')
        st = self.upper.stat(key)
        if st is not None:
            if st['kind'] == 'dir':
                raise IsADirectoryError(path)
            return self.upper.read_bytes(key)
        entry = self._lower(path, follow=True)
        if entry is None:
            raise FileNotFoundError(path)
        if entry.kind == 'dir':
            raise IsADirectoryError(path)
        return entry.data

    def write(self, path, data):
        """Write lands in the bound directory or the upper layer, never in the artifact"""
        self._check()
        path = normalize_path(path)
        bind, rel = self._bind_for(path)
        if bind is not None:
            if bind.readonly:
                raise PermissionError('%s is on a read-only mount' % path)
            bind.backend.write_bytes(rel, data)
            return
        if self.readonly:
            raise PermissionError('container root filesystem is read-only')
        for p in reversed(list(self._ancestors(posixpath.dirname(path)))):
            if self.upper.exists(self._marker(p)):
                # deleted directory comes back empty
                self.upper.unlink(self._marker(p))
                self.upper.write_bytes(self._opaque(p), b'')
        if self.upper.exists(self._marker(path)):
            self.upper.unlink(self._marker(path))
        self.upper.write_bytes(path.lstrip('/'), data)

    def delete(self, path):
        """Remove `path`; lower entries are hidden by a whiteout marker in the upper layer"""
        self._check()
        path = normalize_path(path)
        bind, rel = self._bind_for(path)
        if bind is not None:
            if bind.readonly:
                raise PermissionError('%s is on a read-only mount' % path)
            bind.backend.unlink(rel)
            return
        if self.readonly:
            raise PermissionError('container root filesystem is read-only')
        if not self.exists(path):
            raise FileNotFoundError(path)
        key = path.lstrip('/')
        st = self.upper.stat(key)
        if st is not None and st['kind'] == 'dir':
            self.upper.rmtree(key)
        elif st is not None:
            self.upper.unlink(key)
        if self._lower(path) is not None:
            self.upper.write_bytes(self._marker(path), b'')

    def listdir(self, path='/'):
        """Merged, sorted child names of directory `path`"""
        self._check()
        path = normalize_path(path)
        bind, rel = self._bind_for(path)
        if bind is not None:
            return bind.backend.listdir(rel)
        if path != '/' and self.stat(path).kind != 'dir':
            raise NotADirectoryError(path)
        key = path.lstrip('/')
        names = set() if self.upper.exists(self._opaque(path)) or self._lower_hidden(path) else set(self.image.artifact.listdir(path))
        st = self.upper.stat(key)
        if st is not None and st['kind'] == 'dir':
            for n in self.upper.listdir(key):
                if n.startswith(WHITEOUT_PREFIX):
                    names.discard(n[len(WHITEOUT_PREFIX):])
                else:
                    names.add(n)
        names.update(posixpath.basename(normalize_path(b.destination)) for b in self.binds
                     if posixpath.dirname(normalize_path(b.destination)) == path)
        return sorted(names)

    def walk_files(self, path='/'):
        """All file paths below `path` in the merged view"""
        for name in self.listdir(path):
            child = posixpath.join(path, name)
            st = self.stat(child)
            if st.kind == 'dir':
                yield from self.walk_files(child)
            elif st.kind == 'file':
                yield child


def mount_view(img, upper, identity, owner=None, binds=(), readonly=False, store=None):
    """Combine the squashed image with a writable upper layer, remapping ownership to `identity`"""
    img.artifact.verify()
    if not readonly and not upper.writable:
        raise MountError('upper layer %s is not writable' % upper)
    handle_id = store.next_handle_id() if store is not None else 0
    handle = MountHandle(handle_id, img, upper, identity, owner, binds, readonly)
    if store is not None:
        store.mounts[handle_id] = handle
    log.debug('Mounted %s as view %d for %s', img.reference, handle_id, owner)
    return handle


def release_view(handle, store=None):
    """Mark the handle dead and drop its bookkeeping; a second release only warns"""
    if not handle.live:
        log.warning('Mount view %d of %s released twice', handle.id, handle.image.reference)
        return False
    handle.live = False
    if store is not None:
        store.mounts.pop(handle.id, None)
    log.debug('Released view %d', handle.id)
    return True


@dataclass
class CleanupReport:
    reclaimed: list = field(default_factory=list)
    checked: int = 0


def watcher_tick(store, is_active):
    """Release every live view whose owning step is no longer active"""
    report = CleanupReport()
    for handle in list(store.mounts.values()):
        report.checked += 1
        if handle.live and not is_active(handle.owner):
            release_view(handle, store)
            report.reclaimed.append(handle.id)
    if report.reclaimed:
        log.info('Watcher reclaimed %d orphaned view(s): %s', len(report.reclaimed), report.reclaimed)
    return report


# ---- plain (unpacked) publication, for metadata-pressure comparison

def publish_plain(img, backend, prefix):
    """Unpack every file of the squashed image as its own object under `prefix`"""
    for entry in img.artifact.entries():
        if entry.kind == 'file':
            backend.write_bytes('%s%s' % (prefix, entry.path), entry.data)


class PlainTree(object):
    """Unpacked image tree on the shared store; every open costs store-level metadata operations"""

    def __init__(self, backend, prefix):
        self.backend = backend
        self.prefix = prefix

    def read(self, path):
        key = '%s%s' % (self.prefix, normalize_path(path))
        if self.backend.stat(key) is None:
            raise FileNotFoundError(path)
        return self.backend.read_bytes(key)

    def exists(self, path):
        return self.backend.stat('%s%s' % (self.prefix, normalize_path(path))) is not None
