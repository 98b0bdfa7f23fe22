import json
import time
from collections import OrderedDict
from dataclasses import replace

import pytest

from skiff.edf import Edf, Mount, resolve_edf
from skiff.plan import (SiteConfig, StepContext, EnginePlan, Option, PlanError, PlanConflictError, ENGINE_MODULES,
                        load_site_config, apply_settings, apply_hpc_module, render_plan, shim_plan, plan_to_argv,
                        argv_to_plan, format_golden, step_paths)

from conftest import data_path, read_data


def test_training_edf_renders_golden_argv(training_edf, host_env, ctx):
    t0 = time.perf_counter()
    edf, settings = resolve_edf(training_edf, host_env)
    argv = plan_to_argv(render_plan(edf, apply_settings(SiteConfig(), settings), ctx))
    assert format_golden(argv) == read_data('training.argv')
    assert time.perf_counter() - t0 < 1.0


def test_golden_option_multiset(training_edf, host_env, ctx):
    edf, _ = resolve_edf(training_edf, host_env)
    plan = render_plan(edf, SiteConfig(), ctx)
    flags = [o.flag for o in plan.global_options + plan.run_options]
    assert flags.count('--mount') == 3
    assert flags.count('--env') == 2
    assert flags.count('--annotation') == 4
    assert flags.count('--storage-opt') == 2
    assert plan.run_values('--entrypoint') == ['']
    assert '--read-only' not in flags


def test_every_edf_field_has_a_plan_representation(ctx):
    edf = Edf(image='img:1', mounts=(Mount('/h', '/c', True),), workdir='/w', entrypoint=False, writable=False,
              devices=('vendor.com/dev=0',), env=OrderedDict(A='1'), annotations=OrderedDict([('x.y', 'z')]),
              expanded=True)
    plan = render_plan(edf, SiteConfig(), ctx)
    assert plan.image == 'img:1'
    assert plan.run_values('--mount') == ['type=bind,src=/h,dst=/c,readonly']
    assert plan.run_values('--workdir') == ['/w']
    assert plan.run_values('--entrypoint') == ['']
    assert [o for o in plan.run_options if o.flag == '--read-only'] == [Option('--read-only')]
    assert plan.run_values('--device') == ['vendor.com/dev=0']
    assert plan.run_values('--env') == ['A=1']
    assert plan.run_values('--annotation') == ['x.y=z']


def test_entrypoint_true_emits_nothing(ctx):
    plan = render_plan(Edf(image='a', expanded=True), SiteConfig(), ctx)
    assert plan.run_values('--entrypoint') == []
    assert plan_to_argv(plan)[-2:] == ['run', 'a']


def test_render_rejects_reserved_and_invalid(ctx):
    with pytest.raises(PlanError):
        render_plan(Edf(image='a', annotations=OrderedDict([('com.sarus.tmpdir', '/x')]), expanded=True), SiteConfig(), ctx)
    with pytest.raises(PlanError):
        render_plan(Edf(image='a', workdir='rel', expanded=True), SiteConfig(), ctx)


def test_hpc_module_is_idempotent():
    base = EnginePlan(image='a')
    once = apply_hpc_module(base, SiteConfig())
    assert once.global_options == ENGINE_MODULES['hpc']
    assert apply_hpc_module(once, SiteConfig()) == once
    values = {o.flag: o.value for o in once.global_options}
    assert values == {'--ipc': 'host', '--network': 'host', '--pid': 'host', '--uts': 'host', '--userns': 'keep-id',
                      '--cgroupns': 'host', '--cgroups': 'no-conmon', '--tz': 'local'}


def test_hpc_module_conflict():
    plan = EnginePlan(image='a', global_options=(Option('--userns', 'auto'),))
    with pytest.raises(PlanConflictError):
        apply_hpc_module(plan, SiteConfig())
    with pytest.raises(PlanError):
        apply_hpc_module(EnginePlan(image='a'), SiteConfig(hpc_module='nope'))


def test_private_network_module(ctx):
    plan = render_plan(Edf(image='a', expanded=True), SiteConfig(hpc_module='hpc-private-network'), ctx)
    assert plan.global_value('--network') == 'private'


def test_step_paths_are_per_step(ctx):
    a = step_paths(SiteConfig(), ctx)
    b = step_paths(SiteConfig(), replace(ctx, step_id=1))
    assert a['root'] == '/tmp/skiff-alice/1234.0/root'
    assert all(a[k] != b[k] for k in a)


@pytest.mark.parametrize('changes', [
    dict(store_path='relative/store'),
    dict(tmpdir='tmp'),
    dict(root_template='{tmpdir}/{job}/root'),
    dict(runroot_template='{tmpdir}/{bogus}/{step}'),
    dict(pidfile_template='{tmpdir}/{step'),
])
def test_site_check(changes):
    with pytest.raises(PlanError):
        replace(SiteConfig(), **changes).check()


def test_shim_plan_detaches(training_edf, host_env, ctx):
    edf, _ = resolve_edf(training_edf, host_env)
    site = SiteConfig()
    plan = shim_plan(render_plan(edf, site, ctx), site, ctx)
    argv = plan_to_argv(plan)
    i = argv.index('run')
    assert argv[i + 1:i + 4] == ['--detach', '--pidfile', '/tmp/skiff-alice/1234.0/shim.pid']
    assert argv[-3:] == [edf.image, 'skiff-shim', '--keepalive']


def test_argv_round_trip(training_edf, host_env, ctx):
    edf, _ = resolve_edf(training_edf, host_env)
    for plan in (render_plan(edf, SiteConfig(), ctx), shim_plan(render_plan(edf, SiteConfig(), ctx), SiteConfig(), ctx)):
        assert argv_to_plan(plan_to_argv(plan)) == plan


def test_argv_to_plan_rejects_garbage():
    for argv in (['podman'], ['podman', '--bogus', 'x', 'run', 'img'], ['podman', '--ipc', 'host', 'image']):
        with pytest.raises(PlanError):
            argv_to_plan(argv)


def test_load_site_config(monkeypatch, caplog):
    site = load_site_config(data_path('site.json'))
    assert site.store_path == '/capstor/skiff/store'
    assert 'retired_option' in caplog.text
    monkeypatch.setenv('SKIFF_CONFIG', data_path('site.json'))
    assert load_site_config() == site


def test_load_site_config_bad_json(tmp_path):
    fname = tmp_path / 'site.json'
    fname.write_text('{"store_path": ')
    with pytest.raises(PlanError):
        load_site_config(str(fname))


def test_apply_settings(training_edf, host_env):
    text = training_edf + 'com.sarus.parallax.store = "/other/store"\ncom.sarus.tmpdir = "/dev/shm"\n'
    edf, settings = resolve_edf(text, host_env)
    site = apply_settings(SiteConfig(), settings)
    assert site.store_path == '/other/store' and site.tmpdir == '/dev/shm'
    plan = render_plan(edf, site, StepContext(1, 2, 'alice', 1000, 1000))
    assert plan.global_value('--root') == '/dev/shm/skiff-alice/1.2/root'
    assert 'additionalimagestore=/other/store' in [o.value for o in plan.global_options]
    assert json.dumps(plan_to_argv(plan)).count('com.sarus') == 0
