"""
Environment Definition File (EDF) parsing, variable expansion, validation and annotation splitting.

An EDF is a small TOML document naming an image plus the runtime choices (mounts, workdir,
entrypoint, devices, env) and capability requests (annotations) for a workload.

---------------
Skiff HPC container launcher
Copyright (C) 2026 The Skiff Developers, all rights reserved.
You may use, distribute, and modify this code under the terms of the MIT License.
"""

import io
import re
import json
import base64
import hashlib
import posixpath
import tomllib
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Optional

from skiff import ValidationError

import logging
log = logging.getLogger(__name__)


TOP_LEVEL_KEYS = ('image', 'mounts', 'workdir', 'entrypoint', 'writable', 'devices', 'env', 'annotations')

RESERVED_PREFIX = 'com.sarus.'
RESERVED_STORE = 'com.sarus.parallax.store'
RESERVED_ENGINE_MODULE = 'com.sarus.engine.module'
RESERVED_TMPDIR = 'com.sarus.tmpdir'
RESERVED_FEATURE_PREFIX = 'com.sarus.feature.'

JOB_ENV_EDF = 'SKIFF_EDF'
JOB_ENV_DIGEST = 'SKIFF_EDF_DIGEST'

ENV_NAME_RE = re.compile(r'[A-Za-z_][A-Za-z0-9_]*')
ANNOTATION_KEY_RE = re.compile(r'[A-Za-z0-9_-]+(\.[A-Za-z0-9_-]+)*')
DEVICE_NAME_RE = re.compile(r'[A-Za-z0-9][A-Za-z0-9.-]*/[A-Za-z0-9][A-Za-z0-9_.-]*=[A-Za-z0-9_.:-]+')
FEATURE_NAME_RE = re.compile(r'[a-z0-9_-]+')
BARE_KEY_RE = re.compile(r'[A-Za-z0-9_-]+')
_VAR_NAME_PREFIX_RE = re.compile(r'[A-Za-z_][A-Za-z0-9_]*')
_TOML_POS_RE = re.compile(r'at line (\d+), column (\d+)')


class EdfError(ValidationError):
    """Base for EDF problems; carries an optional 1-based position in the source document"""

    def __init__(self, message, lineno=None, colno=None):
        self.lineno = lineno
        self.colno = colno
        if lineno is not None:
            message = 'line %d, column %d: %s' % (lineno, colno or 1, message)
        super().__init__(message)


class EdfSyntaxError(EdfError):
    """Document is not well-formed"""

    @classmethod
    def from_decode_error(cls, err, text):
        msg = str(err)
        lineno, colno = getattr(err, 'lineno', None), getattr(err, 'colno', None)
        if lineno is None:
            m = _TOML_POS_RE.search(msg)
            if m:
                lineno, colno = int(m.group(1)), int(m.group(2))
            else:
                # "at end of document"
                lines = text.split('\n')
                lineno, colno = len(lines), len(lines[-1]) + 1
        msg = _TOML_POS_RE.sub('', msg).replace('(at end of document)', '').replace('()', '').strip()
        return cls(msg, lineno, colno)


class EdfSchemaError(EdfError):
    """Well-formed document with an unknown key or a value of the wrong kind"""

    def __init__(self, field_path, message, lineno=None, colno=None):
        self.field = field_path
        super().__init__('%s: %s' % (field_path, message), lineno, colno)


class VariableSyntaxError(EdfError):
    """Malformed variable reference, eg. an unterminated `${`"""


class UndefinedVariableError(EdfError):
    """Variable referenced by the document is not defined in the host environment"""

    def __init__(self, name, field_path):
        self.name = name
        self.field = field_path
        super().__init__('undefined variable %s referenced in %s' % (name, field_path))


class ReservedAnnotationError(EdfError):
    """Annotation in the reserved `com.sarus.` namespace is not recognized, or has a bad value"""

    def __init__(self, key, message='unrecognized reserved annotation'):
        self.key = key
        super().__init__('%s: %s' % (key, message))


class EdfValidationError(EdfError):
    """Raised by `resolve_edf()` when validation reports errors"""

    def __init__(self, report):
        self.report = report
        super().__init__('; '.join('%s: %s' % (path, msg) for path, msg in report.errors))


@dataclass(frozen=True)
class Mount:
    source: str
    destination: str
    readonly: bool = False

    @classmethod
    def parse(cls, spec, field_path='mounts'):
        """Parse `src:dst[:ro|rw]`"""
        parts = spec.split(':')
        if len(parts) == 3 and parts[2] in ('ro', 'rw'):
            readonly = parts[2] == 'ro'
        elif len(parts) == 2:
            readonly = False
        else:
            raise EdfSchemaError(field_path, 'mount %r is not of the form src:dst[:ro|rw]' % spec)
        if not parts[0] or not parts[1]:
            raise EdfSchemaError(field_path, 'mount %r has an empty source or destination' % spec)
        return cls(parts[0], parts[1], readonly)

    def __str__(self):
        return '%s:%s%s' % (self.source, self.destination, ':ro' if self.readonly else '')


@dataclass(frozen=True)
class Edf:
    """Parsed environment definition. `env` and `annotations` are order-sensitive maps."""
    image: str = ''
    mounts: tuple = ()
    workdir: Optional[str] = None
    entrypoint: bool = True
    writable: bool = True
    devices: tuple = ()
    env: OrderedDict = field(default_factory=OrderedDict)
    annotations: OrderedDict = field(default_factory=OrderedDict)
    expanded: bool = field(default=False, compare=False)


@dataclass(frozen=True)
class ControlPlaneSettings:
    store_path: Optional[str] = None
    engine_module: Optional[str] = None
    tmpdir: Optional[str] = None
    features: dict = field(default_factory=dict)
    consumed: OrderedDict = field(default_factory=OrderedDict, compare=False)


@dataclass
class ValidationReport:
    errors: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.errors

    def error(self, path, msg):
        self.errors.append((path, msg))

    def warn(self, path, msg):
        self.warnings.append((path, msg))

    def to_records(self):
        """Line-delimited records, errors first"""
        return [dict(level='error', field=p, message=m) for p, m in self.errors] + \
               [dict(level='warning', field=p, message=m) for p, m in self.warnings]

    def __str__(self):
        lines = ['error\t%s\t%s' % e for e in self.errors] + ['warning\t%s\t%s' % w for w in self.warnings]
        return '\n'.join(lines) if lines else 'ok'


# ---- parsing

def _locate(text, key):
    """Best-effort 1-based line of the first assignment or table header for `key`"""
    pat = re.compile(r'^\s*(\[\s*%s\s*\]|"?%s"?\s*=)' % (re.escape(key), re.escape(key)))
    for lineno, line in enumerate(text.split('\n'), 1):
        if pat.match(line):
            return lineno
    return None


def _string_list(doc, key, text):
    val = doc[key]
    if not isinstance(val, list) or not all(isinstance(v, str) for v in val):
        raise EdfSchemaError(key, 'expected an array of strings', _locate(text, key), 1)
    return val


def _flatten_table(table, prefix, field_path, text, out):
    for k, v in table.items():
        key = '%s.%s' % (prefix, k) if prefix else k
        if isinstance(v, dict):
            _flatten_table(v, key, field_path, text, out)
        elif isinstance(v, str):
            if key in out:
                raise EdfSchemaError('%s.%s' % (field_path, key), 'duplicate key', _locate(text, field_path), 1)
            out[key] = v
        else:
            raise EdfSchemaError('%s.%s' % (field_path, key), 'expected a string value, got %s' % type(v).__name__,
                                 _locate(text, k.split('.')[0]), 1)
    return out


def parse_edf(text):
    """Parse EDF document text into an `Edf`. Absent optional keys take their defaults."""
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise EdfSyntaxError.from_decode_error(e, text) from None

    for key in doc:
        if key not in TOP_LEVEL_KEYS:
            raise EdfSchemaError(key, 'unknown top-level key', _locate(text, key), 1)

    kwargs = {}
    if 'image' in doc:
        if not isinstance(doc['image'], str):
            raise EdfSchemaError('image', 'expected a string', _locate(text, 'image'), 1)
        kwargs['image'] = doc['image']
    if 'workdir' in doc:
        if not isinstance(doc['workdir'], str):
            raise EdfSchemaError('workdir', 'expected a string', _locate(text, 'workdir'), 1)
        kwargs['workdir'] = doc['workdir']
    for key in ('entrypoint', 'writable'):
        if key in doc:
            if not isinstance(doc[key], bool):
                raise EdfSchemaError(key, 'expected a boolean', _locate(text, key), 1)
            kwargs[key] = doc[key]
    if 'mounts' in doc:
        specs = _string_list(doc, 'mounts', text)
        kwargs['mounts'] = tuple(Mount.parse(s, 'mounts[%d]' % i) for i, s in enumerate(specs))
    if 'devices' in doc:
        kwargs['devices'] = tuple(_string_list(doc, 'devices', text))
    if 'env' in doc:
        if not isinstance(doc['env'], dict):
            raise EdfSchemaError('env', 'expected a table', _locate(text, 'env'), 1)
        env = OrderedDict()
        for k, v in doc['env'].items():
            if not isinstance(v, str):
                raise EdfSchemaError('env.%s' % k, 'expected a string value, got %s' % type(v).__name__, _locate(text, k), 1)
            env[k] = v
        kwargs['env'] = env
    if 'annotations' in doc:
        if not isinstance(doc['annotations'], dict):
            raise EdfSchemaError('annotations', 'expected a table', _locate(text, 'annotations'), 1)
        kwargs['annotations'] = _flatten_table(doc['annotations'], '', 'annotations', text, OrderedDict())

    return Edf(**kwargs)


def load_edf(path):
    """Read and parse an EDF file"""
    log.debug('Loading EDF %s', path)
    with io.open(path, 'r', encoding='utf-8') as f:
        return parse_edf(f.read())


# ---- canonical serialization

def _toml_string(s):
    return json.dumps(s, ensure_ascii=False).replace('\x7f', '\\u007F')


def _toml_key(k):
    return k if BARE_KEY_RE.fullmatch(k) else _toml_string(k)


def _toml_array(items):
    return '[%s]' % ', '.join(_toml_string(i) for i in items)


def serialize_edf(edf):
    """Render `edf` as canonical EDF text: keys in fixed order, every key present except an absent workdir"""
    lines = ['image = %s' % _toml_string(edf.image),
             'mounts = %s' % _toml_array(str(m) for m in edf.mounts)]
    if edf.workdir is not None:
        lines.append('workdir = %s' % _toml_string(edf.workdir))
    lines.append('entrypoint = %s' % ('true' if edf.entrypoint else 'false'))
    lines.append('writable = %s' % ('true' if edf.writable else 'false'))
    lines.append('devices = %s' % _toml_array(edf.devices))
    lines.append('')
    lines.append('[env]')
    lines.extend('%s = %s' % (_toml_key(k), _toml_string(v)) for k, v in edf.env.items())
    lines.append('')
    lines.append('[annotations]')
    lines.extend('%s = %s' % (_toml_key(k), _toml_string(v)) for k, v in edf.annotations.items())
    return '\n'.join(lines) + '\n'


# ---- variable expansion

def _expand_value(value, host_env, field_path):
    out = []
    i, n = 0, len(value)
    while i < n:
        c = value[i]
        if c != '$':
            out.append(c)
            i += 1
            continue
        nxt = value[i+1:i+2]
        if nxt == '$':
            out.append('$')
            i += 2
        elif nxt == '{':
            end = value.find('}', i+2)
            if end < 0:
                raise VariableSyntaxError('%s: unterminated ${ in %r' % (field_path, value))
            name = value[i+2:end]
            if not ENV_NAME_RE.fullmatch(name):
                raise VariableSyntaxError('%s: bad variable name %r' % (field_path, name))
            if name not in host_env:
                raise UndefinedVariableError(name, field_path)
            out.append(host_env[name])
            i = end + 1
        else:
            m = _VAR_NAME_PREFIX_RE.match(value, i+1)
            if not m:
                out.append('$')  # lone dollar
                i += 1
                continue
            name = m.group()
            if name not in host_env:
                raise UndefinedVariableError(name, field_path)
            out.append(host_env[name])
            i = m.end()
    return ''.join(out)


def expand_variables(edf, host_env):
    """Substitute `$NAME` / `${NAME}` in value fields, single pass. Keys are never expanded."""
    if edf.expanded:
        return edf
    x = lambda v, p: _expand_value(v, host_env, p)
    return replace(
        edf,
        image=x(edf.image, 'image'),
        mounts=tuple(Mount(x(m.source, 'mounts[%d]' % i), x(m.destination, 'mounts[%d]' % i), m.readonly)
                     for i, m in enumerate(edf.mounts)),
        workdir=x(edf.workdir, 'workdir') if edf.workdir is not None else None,
        env=OrderedDict((k, x(v, 'env.%s' % k)) for k, v in edf.env.items()),
        annotations=OrderedDict((k, x(v, 'annotations.%s' % k)) for k, v in edf.annotations.items()),
        expanded=True,
    )


# ---- validation

def validate_edf(edf):
    """Check every Edf invariant; violations are reported, never raised"""
    report = ValidationReport()

    if not edf.image.strip():
        report.error('image', 'image reference is empty')
    elif any(c.isspace() for c in edf.image):
        report.error('image', 'image reference contains whitespace')

    seen = {}
    for i, m in enumerate(edf.mounts):
        path = 'mounts[%d]' % i
        if ':' in m.source or ':' in m.destination:
            report.error(path, 'mount %s:%s has a ":" inside a path' % (m.source, m.destination))
            continue
        if not m.destination.startswith('/'):
            report.error(path, 'mount destination %r is not absolute' % m.destination)
            continue
        dst = posixpath.normpath(m.destination)
        if dst in seen:
            report.error(path, 'duplicate mount destination %s (also mounts[%d])' % (dst, seen[dst]))
        else:
            seen[dst] = i
        if not m.source.startswith('/'):
            report.warn(path, 'mount source %r is relative' % m.source)

    if edf.workdir is not None and not edf.workdir.startswith('/'):
        report.error('workdir', 'workdir %r is not absolute' % edf.workdir)

    for i, dev in enumerate(edf.devices):
        if not DEVICE_NAME_RE.fullmatch(dev):
            report.error('devices[%d]' % i, 'device %r is not a vendor/class=name device name' % dev)

    for k in edf.env:
        if not ENV_NAME_RE.fullmatch(k):
            report.error('env.%s' % k, 'not a valid environment variable name')

    for k in edf.annotations:
        if not ANNOTATION_KEY_RE.fullmatch(k):
            report.error('annotations.%s' % k, 'annotation key is not a dot-separated identifier')

    if not edf.expanded and '$' in serialize_edf(edf):
        report.warn('', 'document has not been variable-expanded')

    return report


# ---- annotation split

def split_annotations(edf):
    """Consume `com.sarus.*` keys into control-plane settings; everything else is forwarded verbatim"""
    settings = dict(store_path=None, engine_module=None, tmpdir=None)
    features = {}
    consumed = OrderedDict()
    forwarded = OrderedDict()

    for key, value in edf.annotations.items():
        if not key.startswith(RESERVED_PREFIX):
            forwarded[key] = value
            continue
        if key == RESERVED_STORE:
            settings['store_path'] = value
        elif key == RESERVED_ENGINE_MODULE:
            settings['engine_module'] = value
        elif key == RESERVED_TMPDIR:
            settings['tmpdir'] = value
        elif key.startswith(RESERVED_FEATURE_PREFIX) and FEATURE_NAME_RE.fullmatch(key[len(RESERVED_FEATURE_PREFIX):]):
            if value not in ('true', 'false'):
                raise ReservedAnnotationError(key, 'feature toggle must be "true" or "false", got %r' % value)
            features[key[len(RESERVED_FEATURE_PREFIX):]] = value == 'true'
        else:
            raise ReservedAnnotationError(key)
        consumed[key] = value

    if consumed:
        log.debug('Consumed control-plane annotations: %s', ', '.join(consumed))
    return ControlPlaneSettings(features=features, consumed=consumed, **settings), forwarded


def resolve_edf(text, host_env):
    """Parse, expand, validate and split in one go (the allocator-side rendering path).

    Returns (edf with only forwarded annotations, control-plane settings).
    """
    edf = expand_variables(parse_edf(text), host_env)
    report = validate_edf(edf)
    for path, msg in report.warnings:
        log.warning('EDF %s: %s', path or '<document>', msg)
    if not report.ok:
        raise EdfValidationError(report)
    settings, forwarded = split_annotations(edf)
    return replace(edf, annotations=forwarded), settings


# ---- job environment payload

def encode_job_environment(edf):
    """Serialize an expanded Edf into job environment variables: canonical text plus its digest"""
    text = serialize_edf(edf).encode('utf-8')
    return {JOB_ENV_EDF: base64.b64encode(text).decode('ascii'),
            JOB_ENV_DIGEST: hashlib.sha256(text).hexdigest()}


def decode_job_environment(env):
    """Reconstruct the Edf rendered by the allocator from the job environment"""
    try:
        text = base64.b64decode(env[JOB_ENV_EDF], validate=True)
    except KeyError:
        raise EdfError('job environment carries no %s' % JOB_ENV_EDF) from None
    except ValueError as e:
        raise EdfError('job environment %s is not valid base64: %s' % (JOB_ENV_EDF, e)) from None
    if hashlib.sha256(text).hexdigest() != env.get(JOB_ENV_DIGEST):
        raise EdfError('job environment EDF digest mismatch')
    return replace(parse_edf(text.decode('utf-8')), expanded=True)
