from collections import OrderedDict

import pytest

from skiff import ValidationError
from skiff.edf import (Edf, Mount, EdfSyntaxError, EdfSchemaError, VariableSyntaxError, UndefinedVariableError,
                       ReservedAnnotationError, EdfValidationError, EdfError, parse_edf, serialize_edf,
                       expand_variables, validate_edf, split_annotations, resolve_edf, encode_job_environment,
                       decode_job_environment, JOB_ENV_EDF, JOB_ENV_DIGEST)


def test_parse_training_edf(training_edf):
    edf = parse_edf(training_edf)
    assert edf.image == 'ghcr.io/cscs/ml-workflows/transformers:latest-arm64'
    assert len(edf.mounts) == 3
    assert edf.mounts[0] == Mount('/scratch/$USER/hf-models', '/opt/hf', False)
    assert edf.workdir == '/scratch/$USER'
    assert edf.entrypoint is False
    assert edf.writable is True
    assert edf.devices == ('nvidia.com/gpu=all',)
    assert list(edf.env) == ['HUGGINGFACE_HUB_CACHE', 'TRANSFORMERS_CACHE']
    assert list(edf.annotations.items()) == [
        ('com.hooks.cxi.enabled', 'true'),
        ('com.hooks.aws_ofi_nccl.enabled', 'true'),
        ('com.hooks.aws_ofi_nccl.variant', 'cuda12'),
        ('com.hooks.nvidia_cuda_mps.enabled', 'true'),
    ]
    assert not edf.expanded


def test_defaults_for_absent_keys():
    edf = parse_edf('image = "alpine:3"\n')
    assert edf.mounts == () and edf.devices == ()
    assert edf.workdir is None
    assert edf.entrypoint is True and edf.writable is True
    assert edf.env == OrderedDict() and edf.annotations == OrderedDict()


def test_syntax_error_carries_position():
    with pytest.raises(EdfSyntaxError) as e:
        parse_edf('image = "a"\nworkdir = = "b"\n')
    assert e.value.lineno == 2
    assert isinstance(e.value, ValidationError)


def test_unknown_top_level_key_is_named():
    with pytest.raises(EdfSchemaError) as e:
        parse_edf('image = "a"\n\nimgae = "b"\n')
    assert e.value.field == 'imgae'
    assert e.value.lineno == 3


@pytest.mark.parametrize('text, field', [
    ('image = 3\n', 'image'),
    ('image = "a"\nentrypoint = "false"\n', 'entrypoint'),
    ('image = "a"\nmounts = "/a:/b"\n', 'mounts'),
    ('image = "a"\n[env]\nN = 1\n', 'env.N'),
    ('image = "a"\n[annotations]\nx.y = true\n', 'annotations.x.y'),
])
def test_wrong_kinds_are_rejected(text, field):
    with pytest.raises(EdfSchemaError) as e:
        parse_edf(text)
    assert e.value.field == field


def test_mount_grammar():
    assert Mount.parse('/a:/b:ro') == Mount('/a', '/b', True)
    assert Mount.parse('/a:/b:rw') == Mount('/a', '/b', False)
    for bad in ('/a', '/a:/b:rx', ':/b', '/a:/b:ro:x'):
        with pytest.raises(EdfSchemaError):
            Mount.parse(bad)


def test_serialize_is_canonical_and_parses_back(training_edf):
    edf = parse_edf(training_edf)
    text = serialize_edf(edf)
    assert text.startswith('image = "ghcr.io/cscs/ml-workflows/transformers:latest-arm64"\nmounts = [')
    assert parse_edf(text) == edf
    assert serialize_edf(parse_edf(text)) == text


def test_expand_variables(training_edf, host_env):
    edf = expand_variables(parse_edf(training_edf), host_env)
    assert edf.expanded
    assert edf.mounts[1] == Mount('/scratch/alice/data', '/data', False)
    assert edf.workdir == '/scratch/alice'
    assert expand_variables(edf, {}) is edf


@pytest.mark.parametrize('value, expected', [
    ('${USER}x', 'alicex'),
    ('$$USER', '$USER'),
    ('cost: 5$', 'cost: 5$'),
    ('$HOME/$USER', '/users/alice/alice'),
])
def test_expansion_forms(value, expected, host_env):
    edf = expand_variables(Edf(image='a', workdir='/w', env=OrderedDict(V=value)), host_env)
    assert edf.env['V'] == expected


def test_expansion_never_touches_keys(host_env):
    edf = expand_variables(Edf(image='a', env=OrderedDict(USER='$USER')), host_env)
    assert list(edf.env.items()) == [('USER', 'alice')]


def test_expansion_errors(host_env):
    with pytest.raises(UndefinedVariableError) as e:
        expand_variables(Edf(image='$NOPE'), host_env)
    assert e.value.name == 'NOPE' and e.value.field == 'image'
    with pytest.raises(VariableSyntaxError):
        expand_variables(Edf(image='${USER'), host_env)


def test_validate_training_edf(training_edf, host_env):
    report = validate_edf(expand_variables(parse_edf(training_edf), host_env))
    assert report.ok and not report.warnings
    assert str(report) == 'ok'


def test_validate_reports_every_problem():
    edf = Edf(image='', mounts=(Mount('/a', '/x'), Mount('b', '/x/'), Mount('/c', 'rel')), workdir='w',
              devices=('gpu',), env=OrderedDict([('1BAD', 'v')]), annotations=OrderedDict([('bad key', 'v')]),
              expanded=True)
    report = validate_edf(edf)
    fields = [f for f, _ in report.errors]
    assert fields == ['image', 'mounts[1]', 'mounts[2]', 'workdir', 'devices[0]', 'env.1BAD', 'annotations.bad key']
    assert [f for f, _ in report.warnings] == ['mounts[1]']
    assert report.to_records()[0]['level'] == 'error'


def test_unexpanded_document_warns():
    report = validate_edf(Edf(image='a', workdir='/scratch/$USER'))
    assert report.ok
    assert report.warnings == [('', 'document has not been variable-expanded')]


def test_split_annotations():
    edf = Edf(image='a', annotations=OrderedDict([
        ('com.hooks.cxi.enabled', 'true'),
        ('com.sarus.parallax.store', '/other/store'),
        ('com.sarus.engine.module', 'hpc-private-network'),
        ('com.sarus.feature.mps', 'false'),
    ]))
    settings, forwarded = split_annotations(edf)
    assert list(forwarded) == ['com.hooks.cxi.enabled']
    assert settings.store_path == '/other/store'
    assert settings.engine_module == 'hpc-private-network'
    assert settings.features == {'mps': False}
    assert list(settings.consumed) == ['com.sarus.parallax.store', 'com.sarus.engine.module', 'com.sarus.feature.mps']


def test_training_edf_annotations_are_all_forwarded(training_edf, host_env):
    edf, settings = resolve_edf(training_edf, host_env)
    assert len(edf.annotations) == 4
    assert settings.store_path is None and settings.engine_module is None and settings.features == {}


@pytest.mark.parametrize('key, value', [
    ('com.sarus.unknown', 'x'),
    ('com.sarus.feature.mps', 'yes'),
])
def test_reserved_annotation_errors(key, value):
    with pytest.raises(ReservedAnnotationError) as e:
        split_annotations(Edf(image='a', annotations=OrderedDict([(key, value)])))
    assert e.value.key == key


def test_resolve_raises_with_report(host_env):
    with pytest.raises(EdfValidationError) as e:
        resolve_edf('image = "a"\nworkdir = "relative"\n', host_env)
    assert e.value.report.errors[0][0] == 'workdir'


def test_job_environment_round_trip(training_edf, host_env):
    edf, _ = resolve_edf(training_edf, host_env)
    env = encode_job_environment(edf)
    assert set(env) == {JOB_ENV_EDF, JOB_ENV_DIGEST}
    decoded = decode_job_environment(env)
    assert decoded == edf and decoded.expanded


def test_job_environment_tampering_detected(training_edf, host_env):
    edf, _ = resolve_edf(training_edf, host_env)
    env = encode_job_environment(edf)
    env[JOB_ENV_DIGEST] = '0' * 64
    with pytest.raises(EdfError):
        decode_job_environment(env)
    with pytest.raises(EdfError):
        decode_job_environment({})


@pytest.mark.parametrize('value, mount', [('/a:b', '${SRC}:/data'), ('/data:x', '/scratch:${SRC}')])
def test_expanded_mount_path_with_colon_is_rejected(value, mount):
    text = 'image = "ubuntu:24.04"\nmounts = ["%s"]\n' % mount
    with pytest.raises(EdfValidationError) as e:
        resolve_edf(text, {'SRC': value})
    assert [path for path, _ in e.value.report.errors] == ['mounts[0]']
    assert value in str(e.value)
    edf, _ = resolve_edf(text, {'SRC': '/plain'})
    assert decode_job_environment(encode_job_environment(edf)) == edf
