from collections import OrderedDict

import numpy as np
import pytest

from skiff.edf import resolve_edf
from skiff.plan import SiteConfig, render_plan
from skiff.runtime import RuntimeSpec, SpecMount, DeviceNode, EnvConflictError, HookError
from skiff.cdi import CdiRegistry, UnknownDeviceError, CdiConflictError, apply_cdi
from skiff.ldcache import (ContainerTree, HostLibrary, HostLibraryCatalog, AbiVersionError, DEFAULT_LIB_DIRS,
                           DEFAULT_INJECTION_DIR, abi_compatible, parse_version, ldcache_refresh, libinject_hook,
                           library_name)
from skiff.hooks import (STAGES, HookRegistry, MissingProfileError, PrecreateScopeError, hook_requests,
                         enabled_hooks, pce_hook, mps_hook, run_pipeline)


CONTAINER_LIBS = ['/usr/lib64/libfabric.so.1.20.0', '/usr/lib64/libc.so.6', '/usr/lib/libstdc++.so.6.0.33']


@pytest.fixture
def training_edf(training_edf, host_env, ctx):
    edf, _ = resolve_edf(training_edf, host_env)
    return edf, RuntimeSpec.from_plan(render_plan(edf, SiteConfig(), ctx))


def test_cdi_all_selects_every_device(hooks):
    devices = hooks.cdi.resolve(['nvidia.com/gpu=all'])
    assert [d.name for d in devices] == ['nvidia.com/gpu=%d' % i for i in range(4)]
    spec = apply_cdi(RuntimeSpec(), hooks.cdi, ['nvidia.com/gpu=all'])
    assert [d.path for d in spec.devices] == ['/dev/nvidiactl'] + ['/dev/nvidia%d' % i for i in range(4)]
    assert spec.get_env('NVIDIA_DRIVER_CAPABILITIES') == 'compute,utility'
    assert spec.devices[1] == DeviceNode('/dev/nvidia0', 'c', 195, 0)


def test_cdi_single_device_and_unknown(hooks):
    spec = apply_cdi(RuntimeSpec(), hooks.cdi, ['nvidia.com/gpu=2'])
    assert [d.path for d in spec.devices] == ['/dev/nvidiactl', '/dev/nvidia2']
    for name in ('nvidia.com/gpu=7', 'vendor.com/fpga=all', 'nvidia.com/gpu'):
        with pytest.raises(UnknownDeviceError):
            hooks.cdi.resolve([name])


def test_cdi_documents_conflict():
    doc = {'kind': 'v.com/x', 'devices': [{'name': '0'}]}
    reg = CdiRegistry().add_document(doc)
    with pytest.raises(CdiConflictError):
        reg.add_document(doc)
    with pytest.raises(CdiConflictError):
        CdiRegistry().add_document({'kind': 'v.com/y'})
    reg = CdiRegistry()
    reg.add_document({'kind': 'v.com/a', 'devices': [{'name': '0', 'containerEdits': {'env': ['MODE=a']}}]})
    reg.add_document({'kind': 'v.com/b', 'devices': [{'name': '0', 'containerEdits': {'env': ['MODE=b']}}]})
    with pytest.raises(CdiConflictError):
        apply_cdi(RuntimeSpec(), reg, ['v.com/a=0', 'v.com/b=0'])


def test_training_edf_pipeline(training_edf, hooks):
    edf, spec = training_edf
    result = run_pipeline(spec, edf.annotations, edf.devices, hooks, tree=ContainerTree(CONTAINER_LIBS))
    out = result.spec
    assert result.stages == list(STAGES)

    env = out.env_dict()
    assert env['HUGGINGFACE_HUB_CACHE'] == '/opt/hf/hub'
    assert env['NVIDIA_DRIVER_CAPABILITIES'] == 'compute,utility'
    assert env['FI_PROVIDER'] == 'cxi' and env['FI_CXI_RX_MATCH_MODE'] == 'hybrid'
    assert env['NCCL_NET_PLUGIN'] == 'ofi' and env['NCCL_CUDA_VERSION'] == '12'
    assert env['CUDA_MPS_PIPE_DIRECTORY'] == '/var/run/nvidia-mps'
    assert len(out.devices) == 5

    mounts = {m.destination: m for m in out.mounts}
    assert mounts['/opt/aws-ofi-nccl'].source == '/opt/aws-ofi-nccl/cuda12'
    assert mounts['/usr/lib64/libfabric.so.1.20.0'].source == '/opt/cray/libfabric/lib64/libfabric.so.1.22.0'
    assert mounts[DEFAULT_INJECTION_DIR + '/libcxi.so.1'].source == '/usr/lib64/libcxi.so.1.5.0'
    assert DEFAULT_INJECTION_DIR + '/libnccl-net.so.1' in mounts
    assert result.cache.lookup('libcxi.so.1').path == DEFAULT_INJECTION_DIR + '/libcxi.so.1'

    assert out.hooks == {'precreate': ['pce'], 'createRuntime': ['libinject', 'ldcache'], 'prestart': ['mps']}
    assert result.mps.log_directory == '/var/log/nvidia-mps'
    # input spec is left alone
    assert spec.get_env('FI_PROVIDER') is None and not spec.devices


def test_pipeline_is_deterministic(training_edf, hooks):
    edf, spec = training_edf
    shuffled = OrderedDict(reversed(list(edf.annotations.items())))
    a = run_pipeline(spec, edf.annotations, edf.devices, hooks, tree=ContainerTree(CONTAINER_LIBS))
    b = run_pipeline(spec, shuffled, edf.devices, hooks, tree=ContainerTree(reversed(CONTAINER_LIBS)))
    assert a.spec.to_dict() == b.spec.to_dict()
    assert a.actions == b.actions


def test_feature_toggles(training_edf, hooks):
    edf, spec = training_edf
    result = run_pipeline(spec, edf.annotations, edf.devices, hooks, tree=ContainerTree(CONTAINER_LIBS),
                          features={'libinject': False, 'mps': False})
    assert result.stages == ['cdi', 'pce']
    assert result.mps is None and result.injection is None
    assert result.spec.get_env('CUDA_MPS_PIPE_DIRECTORY') is None


def test_no_annotations_no_devices(hooks):
    result = run_pipeline(RuntimeSpec(env=['A=1']), {}, (), hooks)
    assert result.actions == [] and result.stages == []
    assert result.spec.to_dict() == RuntimeSpec(env=['A=1']).to_dict()


def test_env_conflict_with_cdi_is_fatal(hooks):
    registry = HookRegistry.from_dict({'profiles': {'gpuenv': {'env': {'NVIDIA_DRIVER_CAPABILITIES': 'all'}}}}, hooks.cdi)
    with pytest.raises(EnvConflictError) as e:
        run_pipeline(RuntimeSpec(), {'com.hooks.gpuenv.enabled': 'true'}, ['nvidia.com/gpu=0'], registry)
    assert [a.stage for a in e.value.partial_log] == ['cdi'] * 4


def test_env_conflict_between_profiles():
    registry = HookRegistry.from_dict({'profiles': {'a': {'env': {'X': '1'}}, 'b': {'env': {'X': '2'}}}})
    with pytest.raises(EnvConflictError):
        run_pipeline(RuntimeSpec(), {'com.hooks.a.enabled': 'true', 'com.hooks.b.enabled': 'true'}, (), registry)


def test_missing_profile_and_variant(hooks):
    with pytest.raises(MissingProfileError):
        run_pipeline(RuntimeSpec(), {'com.hooks.slingshot.enabled': 'true'}, (), hooks)
    ann = {'com.hooks.aws_ofi_nccl.enabled': 'true', 'com.hooks.aws_ofi_nccl.variant': 'cuda11'}
    with pytest.raises(MissingProfileError) as e:
        run_pipeline(RuntimeSpec(), ann, (), hooks)
    assert isinstance(e.value, HookError)


def test_disabled_hooks_are_ignored(hooks):
    ann = {'com.hooks.cxi.enabled': 'false', 'com.hooks.slingshot.enabled': 'no', 'other.key': 'x'}
    assert enabled_hooks(ann) == []
    assert list(hook_requests(ann)) == ['cxi', 'slingshot']
    assert run_pipeline(RuntimeSpec(), ann, (), hooks).actions == []


def test_mps_hook():
    spec = RuntimeSpec()
    assert mps_hook(spec, {'com.hooks.nvidia_cuda_mps.enabled': 'false'}) is None
    service = mps_hook(spec, {'com.hooks.nvidia_cuda_mps.enabled': 'true'})
    assert spec.get_env('CUDA_MPS_LOG_DIRECTORY') == service.log_directory


def test_precreate_rejects_devices():
    registry = HookRegistry.from_dict({'profiles': {'bad': {'devices': [{'path': '/dev/x'}]}}})
    with pytest.raises(PrecreateScopeError):
        pce_hook(RuntimeSpec(), registry, {'com.hooks.bad.enabled': 'true'})


def _base_spec():
    return RuntimeSpec(env=['PATH=/usr/bin', 'KEEP=1'], mounts=[SpecMount('/h', '/c', ('rbind', 'ro'))],
                       devices=[DeviceNode('/dev/fuse', 'c', 10, 229)], annotations=OrderedDict([('a.b', 'c')]),
                       args=['python', 'train.py'], cwd='/work', readonly=True)


def test_precreate_edits_touch_only_env_and_mounts():
    rng = np.random.default_rng(7)
    names = ['FI_PROVIDER', 'NCCL_DEBUG', 'OMP_NUM_THREADS', 'LD_PRELOAD', 'PATH', 'HOME']
    for case in range(200):
        env = {names[i]: 'v%d' % rng.integers(100) for i in rng.choice(len(names), int(rng.integers(0, 5)), replace=False)}
        mounts = [{'source': '/host/m%d' % i, 'destination': '/ctr/m%d' % rng.integers(10)} for i in range(int(rng.integers(0, 4)))]
        registry = HookRegistry.from_dict({'profiles': {'p': {'env': env, 'mounts': mounts}}})
        base = _base_spec()
        snapshot = base.to_dict()
        out = pce_hook(base, registry, {'com.hooks.p.enabled': 'true'})
        assert base.to_dict() == snapshot, case

        before, after = dict(snapshot), out.to_dict()
        for d in (before, after):
            d['process'] = {k: v for k, v in d['process'].items() if k != 'env'}
            d.pop('mounts')
        assert after == before, case
        assert all(out.get_env(k) == v for k, v in env.items())
        assert out.get_env('KEEP') == '1'
        assert {(m['source'], m['destination']) for m in mounts} <= {(m.source, m.destination) for m in out.mounts}


LIBS = ['libfabric', 'libcxi', 'libmpi', 'libnccl-net', 'libucp']


def _version(rng):
    return '%d.%d.%d' % (rng.integers(1, 4), rng.integers(0, 4), rng.integers(0, 4))


def test_injection_keeps_links_intact():
    rng = np.random.default_rng(11)
    dirs = DEFAULT_LIB_DIRS + (DEFAULT_INJECTION_DIR,)
    for case in range(200):
        files = set()
        for name in LIBS:
            if rng.random() < 0.6:
                files.add('%s/%s.so.%s' % (DEFAULT_LIB_DIRS[int(rng.integers(4))], name, _version(rng)))
        catalog = HostLibraryCatalog()
        for name in LIBS:
            if rng.random() < 0.6:
                version = _version(rng)
                catalog.add(HostLibrary('%s.so.%s' % (name, version.split('.')[0]), '/host/lib/%s.so.%s' % (name, version),
                                        version, ['x86_64', 'x86_64', 'aarch64'][int(rng.integers(3))],
                                        bool(rng.integers(2))))
        cache = ldcache_refresh(ContainerTree(files), dirs)
        plan = libinject_hook(cache, catalog)

        handled = [r.soname for r in plan.replacements + plan.additions] + [s.soname for s in plan.skips]
        assert sorted(handled) == sorted(lib.soname for lib in catalog), case
        by_soname = {lib.soname: lib for lib in catalog}
        for r in plan.replacements:
            entry, lib = cache.lookup(r.soname), by_soname[r.soname]
            assert r.container_path == entry.path
            assert lib.abi == entry.abi
            assert abi_compatible((entry.soname, entry.version), (lib.soname, lib.version))
        for a in plan.additions:
            assert by_soname[a.soname].inject_if_missing
            assert cache.by_library(library_name(a.soname)) == []

        spec = RuntimeSpec()
        for r in plan.replacements + plan.additions:
            spec.add_mount(SpecMount(r.host_path, r.container_path, ('rbind', 'ro')))
        refreshed = ldcache_refresh(ContainerTree(files, spec), dirs)
        for entry in cache.entries:
            assert refreshed.lookup(entry.soname).path == entry.path, case
        for a in plan.additions:
            assert refreshed.lookup(a.soname).path == a.container_path


@pytest.mark.parametrize('container, host, ok', [
    (('libmpi.so.12', '12.0.0'), ('libmpi.so.12', '12.0.0'), True),
    (('libmpi.so.12', '12.0.5'), ('libmpi.so.12', '12.1.0'), True),
    (('libmpi.so.12', '12.2.0'), ('libmpi.so.12', '12.1.9'), False),
    (('libmpi.so.12', '12.1.1'), ('libmpi.so.12', '12.1.4'), True),
    (('libmpi.so.12', '12.1.4'), ('libmpi.so.12', '12.1.1'), False),
    (('libmpi.so.12', '12.1.0'), ('libmpi.so.12', '13.0.0'), False),
    (('libmpi.so.12', '12.1.0'), ('libmpich.so.12', '12.1.0'), False),
    (('libmpi.so.12', '12'), ('libmpi.so.12', '12.0.1'), True),
    (('libmpi.so.12', '12.3'), ('libmpi.so.12', '12'), False),
    (('libfoo.so.1', '1.2.3.4'), ('libfoo.so.1', '1.2.3.5'), True),
    (('libfoo.so.1', '1.2.3.4'), ('libfoo.so.1', '1.2.3'), False),
])
def test_abi_truth_table(container, host, ok):
    assert abi_compatible(container, host) is ok


def test_version_parsing():
    assert parse_version('40.30.2') == (40, 30, 2)
    assert parse_version('7') == (7, 0, 0)
    assert parse_version('1.2.3.4') == (1, 2, 3, 4)
    assert parse_version('1.2.3.0') == parse_version('1.2.3')
    for bad in ('1.x', '1..2', '', None):
        with pytest.raises(AbiVersionError):
            parse_version(bad)


def test_abi_tag_mismatch_is_skipped():
    cache = ldcache_refresh(ContainerTree(['/usr/lib64/libmpi.so.12.1.0']))
    plan = libinject_hook(cache, [HostLibrary('libmpi.so.12', '/host/libmpi.so.12.4.0', '12.4.0', 'aarch64')])
    assert not plan and 'ABI tag' in plan.skips[0].reason


def test_ldcache_picks_highest_version():
    cache = ldcache_refresh(ContainerTree(['/lib/libz.so.1.2.11', '/usr/lib64/libz.so.1.3.1', '/usr/lib/README']))
    assert cache.sonames() == ['libz.so.1']
    assert cache.lookup('libz.so.1').path == '/usr/lib64/libz.so.1.3.1'


def test_ldcache_keeps_long_version_suffixes():
    cache = ldcache_refresh(ContainerTree(['/usr/lib64/libfoo.so.1.2.3.4', '/usr/lib/libfoo.so.1.2.3']))
    assert cache.lookup('libfoo.so.1').version == '1.2.3.4'
    plan = libinject_hook(cache, [HostLibrary('libfoo.so.1', '/host/libfoo.so.1.2.3', '1.2.3', 'x86_64')])
    assert not plan and 'older than container 1.2.3.4' in plan.skips[0].reason
