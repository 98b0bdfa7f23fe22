import os
import stat

import pytest

from skiff.storage import MemoryBackend, DiskBackend, OpCounter


@pytest.fixture(params=['memory', 'disk'])
def backend(request, tmp_path):
    counter = OpCounter(record=True)
    if request.param == 'memory':
        return MemoryBackend(counter)
    return DiskBackend(str(tmp_path / 'store'), counter)


def test_write_read_list(backend):
    backend.write_bytes('a/b/c.txt', b'xyz')
    backend.write_bytes('a/d.txt', b'')
    assert backend.read_bytes('a/b/c.txt') == b'xyz'
    assert backend.exists('a/b')
    assert backend.listdir('a') == ['b', 'd.txt']
    assert backend.stat('a/b/c.txt')['kind'] == 'file'
    assert backend.stat('a/b/c.txt')['size'] == 3
    assert backend.stat('a')['kind'] == 'dir'
    assert backend.stat('missing') is None


def test_unlink_and_rmtree(backend):
    backend.write_bytes('x/y/z', b'1')
    backend.write_bytes('x/w', b'2')
    backend.unlink('x/w')
    assert not backend.exists('x/w')
    with pytest.raises(FileNotFoundError):
        backend.unlink('x/w')
    backend.rmtree('x')
    assert not backend.exists('x/y/z') and not backend.exists('x')


def test_makedirs(backend):
    backend.makedirs('p/q')
    assert backend.listdir('p') == ['q']
    backend.makedirs('p/q')
    assert backend.ops.counts['mkdir'] == 1


def test_missing_read(backend):
    with pytest.raises(FileNotFoundError):
        backend.read_bytes('nope')


def test_counter_classifies_operations(backend):
    backend.write_bytes('k', b'v')
    backend.read_bytes('k')
    backend.exists('k')
    backend.listdir('')
    ops = backend.ops
    assert ops.writes == 1
    assert ops.metadata_ops == 3   # open, stat, listdir
    assert ops.counts['read'] == 1
    assert ops.writes_under('k') == [('write', 'k')]
    assert ops.writes_under('other') == []


def test_counter_without_recording():
    with pytest.raises(ValueError):
        OpCounter().writes_under('')


def test_memory_backend_rejects_file_over_dir():
    b = MemoryBackend()
    b.write_bytes('d/f', b'')
    with pytest.raises(IsADirectoryError):
        b.write_bytes('d', b'')
    with pytest.raises(FileExistsError):
        b.makedirs('d/f')


def test_disk_backend_hides_temp_files(tmp_path):
    b = DiskBackend(str(tmp_path))
    (tmp_path / '.tmp-leftover').write_bytes(b'')
    b.write_bytes('obj', b'1')
    assert b.listdir('') == ['obj']
    assert b.writable


@pytest.mark.parametrize('umask, mode', [(0o022, 0o644), (0o002, 0o664), (0o077, 0o600)])
def test_disk_objects_follow_the_umask(tmp_path, umask, mode):
    old = os.umask(umask)
    try:
        b = DiskBackend(str(tmp_path / 'store'))
        b.write_bytes('artifacts/x.sqimg', b'1')
        b.write_bytes('artifacts/x.sqimg', b'2')
    finally:
        os.umask(old)
    assert stat.S_IMODE(os.stat(tmp_path / 'store' / 'artifacts' / 'x.sqimg').st_mode) == mode
