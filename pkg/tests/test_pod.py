import yaml
import pytest

from skiff.bench import sample_image
from skiff.pod import (ManifestError, load_pod_manifest, parse_pod_manifest, manifest_to_dict, container_annotations,
                       plan_pod, run_pod)
from skiff.plan import plan_to_argv

from conftest import data_path, read_data


MAIN = ['ray-head', 'ray-worker-cpu', 'ray-worker-gpu', 'submitter']


@pytest.fixture
def manifest():
    return load_pod_manifest(data_path('ray_pod.yaml'))


@pytest.fixture
def images(publish):
    for ref in ('python:3.14-trixie', 'rayproject/ray:2.54.0'):
        publish(sample_image(ref))


def test_parse_ray_pod(manifest):
    assert manifest.name == 'ray-demo'
    assert [c.name for c in manifest.init_containers] == ['prepare']
    assert [c.name for c in manifest.containers] == MAIN
    assert [(v.name, v.kind, v.path) for v in manifest.volumes] == [('workdir', 'emptyDir', None),
                                                                     ('results', 'hostPath', '/host/results')]
    gpu = manifest.containers[2]
    assert gpu.devices == ('nvidia.com/gpu=all',)
    assert all(c.devices == () for c in manifest.containers if c is not gpu)


def test_manifest_round_trip(manifest):
    assert parse_pod_manifest(yaml.safe_dump(manifest_to_dict(manifest))) == manifest


def test_plan_mounts_volumes(manifest):
    plan = plan_pod(manifest)
    assert [c.name for c in plan.init] == ['prepare']
    submitter = plan.main[3].plan
    assert submitter.run_values('--mount') == ['type=bind,src=/var/lib/skiff/pods/ray-demo/volumes/workdir,dst=/work',
                                               'type=bind,src=/host/results,dst=/results']
    assert plan.main[2].plan.run_values('--device') == ['nvidia.com/gpu=all']
    assert all(c.edf.entrypoint is False for c in plan.containers)


def test_ray_pod_runs(manifest, images, shared, hooks, tmp_path):
    result = run_pod(plan_pod(manifest), shared, hooks, host_root=str(tmp_path))
    assert result.status == 'Succeeded' and result.exit_code == 0
    assert [c.name for c in result.containers][0] == 'prepare'
    prepare = result.container('prepare')
    assert all(result.container(n).started >= prepare.finished for n in MAIN)

    assert result.container('ray-head').stdout == ['import ray']
    assert result.container('ray-worker-cpu').stdout == ['cxi']
    assert result.container('ray-worker-gpu').stdout == ['compute,utility']
    assert result.container('submitter').stdout == ['import ray']
    assert (tmp_path / 'host' / 'results' / 'result.json').read_text() == 'done'
    assert (tmp_path / 'host' / 'results' / 'ready.json').read_text() == 'ready'

    for name in MAIN:
        res = result.container(name)
        assert res.annotations['com.hooks.cxi.enabled'] == 'true'
        assert 'pce' in res.hook_stages
    assert [n for n in MAIN if result.container(n).devices] == ['ray-worker-gpu']
    assert 'cdi' in result.container('ray-worker-gpu').hook_stages
    assert shared.live_handles() == []


def test_pod_trace_is_deterministic(manifest, images, shared, hooks, tmp_path):
    plan = plan_pod(manifest)
    a = run_pod(plan, shared, hooks, host_root=str(tmp_path / 'a'), seed=4)
    b = run_pod(plan, shared, hooks, host_root=str(tmp_path / 'b'), seed=4)
    assert a.to_jsonl() == b.to_jsonl()
    assert a.to_jsonl().splitlines()[-1] == '{"kind": "pod", "name": "ray-demo", "status": "Succeeded"}'


def test_failed_init_blocks_main(images, shared, hooks, tmp_path):
    text = read_data('ray_pod.yaml').replace('write /work/demo.py import ray; write /work/ready.json ready', 'exit 3')
    result = run_pod(plan_pod(parse_pod_manifest(text)), shared, hooks, host_root=str(tmp_path))
    assert result.status == 'Failed' and result.exit_code == 1
    assert [c.name for c in result.containers] == ['prepare']
    assert result.container('prepare').exit_code == 3
    assert [e['event'] for e in result.events][-1] == 'pod-failed'


def test_init_image_missing(shared, hooks, tmp_path, manifest):
    result = run_pod(plan_pod(manifest), shared, hooks, host_root=str(tmp_path))
    assert result.status == 'Failed'
    assert result.container('prepare').exit_code == 1
    assert 'python:3.14-trixie' in result.container('prepare').stderr[0]


def test_container_scoped_annotations(manifest):
    doc = manifest_to_dict(manifest)
    doc['metadata']['annotations'].update({'com.hooks.cxi.enabled/ray-worker-cpu': 'false', 'example.com/owner': 'ops'})
    m = parse_pod_manifest(yaml.safe_dump(doc))
    assert container_annotations(m, 'ray-worker-cpu')['com.hooks.cxi.enabled'] == 'false'
    assert container_annotations(m, 'ray-head')['com.hooks.cxi.enabled'] == 'true'
    assert container_annotations(m, 'ray-head')['example.com/owner'] == 'ops'
    assert 'com.hooks.cxi.enabled/ray-worker-cpu' not in container_annotations(m, 'ray-head')


def _edit(manifest, fn):
    doc = manifest_to_dict(manifest)
    fn(doc)
    return yaml.safe_dump(doc)


@pytest.mark.parametrize('fn, key', [
    (lambda d: d.update(status={}), 'status'),
    (lambda d: d.update(kind='Deployment'), 'kind'),
    (lambda d: d.update(apiVersion='apps/v1'), 'apiVersion'),
    (lambda d: d['spec'].update(restartPolicy='Always'), 'spec.restartPolicy'),
    (lambda d: d['spec'].update(containers=[]), 'spec.containers'),
    (lambda d: d['spec']['containers'][0].update(ports=[80]), 'spec.containers[0].ports'),
    (lambda d: d['spec']['containers'][0].update(name='prepare'), 'spec.containers[0].name'),
    (lambda d: d['spec']['containers'][0]['volumeMounts'][0].update(name='cache'), 'spec.containers[0].volumeMounts[0].name'),
    (lambda d: d['spec']['containers'][0]['volumeMounts'][0].update(mountPath='work'), 'spec.containers[0].volumeMounts[0].mountPath'),
    (lambda d: d['spec']['containers'][0].update(resources={'limits': {'nvidia.com/gpu': 1}}), 'spec.containers[0].resources.limits.nvidia.com/gpu'),
    (lambda d: d['spec']['containers'][0].update(resources={'limits': {'nvidia.com/gpu=0': 0}}), 'spec.containers[0].resources.limits.nvidia.com/gpu=0'),
    (lambda d: d['spec']['volumes'][0].update(emptyDir={'medium': 'Memory'}), 'spec.volumes[0].emptyDir'),
    (lambda d: d['spec']['volumes'][1]['hostPath'].update(path='host/results'), 'spec.volumes[1].hostPath.path'),
])
def test_manifest_errors_name_the_key(manifest, fn, key):
    with pytest.raises(ManifestError) as e:
        parse_pod_manifest(_edit(manifest, fn))
    assert e.value.key == key


def test_cpu_and_memory_limits_are_accepted(manifest):
    text = _edit(manifest, lambda d: d['spec']['containers'][0].update(resources={'limits': {'cpu': '2', 'memory': '4Gi'}}))
    assert parse_pod_manifest(text).containers[0].devices == ()


def test_not_yaml():
    with pytest.raises(ManifestError) as e:
        parse_pod_manifest('kind: [Pod')
    assert e.value.key == '<document>'


def test_reserved_annotations_become_settings(manifest):
    doc = manifest_to_dict(manifest)
    doc['metadata']['annotations'].update({'com.sarus.tmpdir/ray-head': '/scratch', 'com.sarus.feature.cxi': 'false'})
    plan = plan_pod(parse_pod_manifest(yaml.safe_dump(doc)))
    head, cpu = plan.main[0], plan.main[1]
    assert plan_to_argv(head.plan)[plan_to_argv(head.plan).index('--root') + 1].startswith('/scratch/')
    assert plan_to_argv(cpu.plan)[plan_to_argv(cpu.plan).index('--root') + 1].startswith('/tmp/')
    assert all(not k.startswith('com.sarus.') for c in plan.containers for k in c.edf.annotations)
    assert all(c.features == {'cxi': False} for c in plan.containers)


def test_reserved_annotation_errors_name_the_container(manifest):
    doc = manifest_to_dict(manifest)
    doc['metadata']['annotations']['com.sarus.feature.cxi/submitter'] = 'yes'
    with pytest.raises(ManifestError) as e:
        plan_pod(parse_pod_manifest(yaml.safe_dump(doc)))
    assert e.value.key == 'metadata.annotations.com.sarus.feature.cxi'
    assert 'submitter' in str(e.value)


def test_container_edf_is_validated(manifest):
    doc = manifest_to_dict(manifest)
    doc['spec']['containers'][1]['env'] = [{'name': 'BAD-NAME', 'value': '1'}]
    with pytest.raises(ManifestError) as e:
        plan_pod(parse_pod_manifest(yaml.safe_dump(doc)))
    assert e.value.key == 'ray-worker-cpu' and 'env.BAD-NAME' in str(e.value)
