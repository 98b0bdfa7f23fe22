"""
Render a validated Edf, site configuration and step context into an explicit, ordered engine plan.

The plan is engine-abstract: options are (flag, value) pairs and `plan_to_argv()` is the only place
that knows the token syntax. `argv_to_plan()` inverts it.

---------------
Skiff HPC container launcher
Copyright (C) 2026 The Skiff Developers, all rights reserved.
You may use, distribute, and modify this code under the terms of the MIT License.
"""

import io
import os
import json
import string
from dataclasses import dataclass, field, replace, fields
from typing import Optional

from skiff import ValidationError
from skiff.edf import RESERVED_PREFIX, validate_edf

import logging
log = logging.getLogger(__name__)


CONFIG_ENV_VAR = 'SKIFF_CONFIG'
DEFAULT_CONFIG_FILE = '~/.skiff/site.json'

TEMPLATE_PLACEHOLDERS = frozenset(('job', 'step', 'user', 'tmpdir'))

SHIM_COMMAND = ('skiff-shim', '--keepalive')


class PlanError(ValidationError):
    """Plan cannot be rendered from the given inputs"""


class PlanConflictError(PlanError):
    """Plan already carries an option the engine module wants to set differently"""


@dataclass(frozen=True)
class Option:
    flag: str
    value: Optional[str] = None

    def tokens(self):
        return [self.flag] if self.value is None else [self.flag, self.value]


# Namespace, cgroup and timezone settings of each engine configuration module, in rendering order
ENGINE_MODULES = {
    'hpc': (
        Option('--ipc', 'host'), Option('--network', 'host'), Option('--pid', 'host'), Option('--uts', 'host'),
        Option('--userns', 'keep-id'), Option('--cgroupns', 'host'), Option('--cgroups', 'no-conmon'),
        Option('--tz', 'local'),
    ),
    'hpc-private-network': (
        Option('--ipc', 'host'), Option('--network', 'private'), Option('--pid', 'host'), Option('--uts', 'host'),
        Option('--userns', 'keep-id'), Option('--cgroupns', 'host'), Option('--cgroups', 'no-conmon'),
        Option('--tz', 'local'),
    ),
}

GLOBAL_FLAGS = frozenset(('--ipc', '--network', '--pid', '--uts', '--userns', '--cgroupns', '--cgroups', '--tz',
                          '--root', '--runroot', '--storage-opt'))
# run flag -> takes a value?
RUN_FLAGS = {'--mount': True, '--workdir': True, '--entrypoint': True, '--read-only': False,
             '--device': True, '--env': True, '--annotation': True}


@dataclass(frozen=True)
class SiteConfig:
    hpc_module: str = 'hpc'
    store_path: str = '/capstor/skiff/store'
    local_store_path: str = '/tmp/skiff-local'
    mount_program: str = '/usr/bin/parallax-mount-program'
    root_template: str = '{tmpdir}/skiff-{user}/{job}.{step}/root'
    runroot_template: str = '{tmpdir}/skiff-{user}/{job}.{step}/runroot'
    pidfile_template: str = '{tmpdir}/skiff-{user}/{job}.{step}/shim.pid'
    tmpdir: str = '/tmp'
    hook_pipeline: str = 'default'
    cdi_dir: Optional[str] = None
    hooks_config: Optional[str] = None
    engine: str = 'podman'

    def check(self):
        """Raise PlanError listing every broken site invariant"""
        problems = []
        if not self.store_path.startswith('/'):
            problems.append('store_path %r is not absolute' % self.store_path)
        if not self.tmpdir.startswith('/'):
            problems.append('tmpdir %r is not absolute' % self.tmpdir)
        for name in ('root_template', 'runroot_template', 'pidfile_template'):
            template = getattr(self, name)
            try:
                names = {f for _, f, _, _ in string.Formatter().parse(template) if f is not None}
            except ValueError as e:
                problems.append('%s %r: %s' % (name, template, e))
                continue
            unknown = names - TEMPLATE_PLACEHOLDERS
            if unknown:
                problems.append('%s %r uses unknown placeholder(s) %s' % (name, template, ', '.join(sorted(unknown))))
            elif 'step' not in names:
                problems.append('%s %r lacks the {step} placeholder' % (name, template))
            elif not template.format(job=0, step=0, user='u', tmpdir=self.tmpdir).startswith('/'):
                problems.append('%s %r is not absolute' % (name, template))
        if self.hpc_module not in ENGINE_MODULES:
            problems.append('unknown engine module %r' % self.hpc_module)
        if problems:
            raise PlanError('invalid site configuration: ' + '; '.join(problems))
        return self


@dataclass(frozen=True)
class StepContext:
    job_id: int
    step_id: int
    user: str
    uid: int
    gid: int
    nodes: int = 1
    ranks_per_node: int = 1

    def __post_init__(self):
        if self.nodes < 1 or self.ranks_per_node < 1:
            raise ValueError('node count and ranks per node must be >= 1 (got %d, %d)' % (self.nodes, self.ranks_per_node))


@dataclass(frozen=True)
class EnginePlan:
    image: str
    global_options: tuple = ()
    run_options: tuple = ()
    detach: bool = False
    pidfile: Optional[str] = None
    command: tuple = ()
    engine: str = 'podman'

    def global_value(self, flag):
        """Value of the first global option named `flag`, or None"""
        for opt in self.global_options:
            if opt.flag == flag:
                return opt.value
        return None

    def run_values(self, flag):
        return [opt.value for opt in self.run_options if opt.flag == flag]


def load_site_config(path=None):
    """Load site configuration from `path`, $SKIFF_CONFIG or ~/.skiff/site.json, else built-in defaults"""
    path = path or os.environ.get(CONFIG_ENV_VAR)
    if not path:
        default = os.path.expanduser(DEFAULT_CONFIG_FILE)
        if not os.path.exists(default):
            log.debug('No site configuration found, using defaults')
            return SiteConfig()
        path = default
    log.debug('Loading site configuration %s', path)
    with io.open(os.path.expanduser(path), 'r', encoding='utf-8') as f:
        try:
            conf = json.load(f)
        except ValueError as e:
            raise PlanError('site configuration %s is not valid JSON: %s' % (path, e)) from None
    known = {f.name for f in fields(SiteConfig)}
    for key in sorted(set(conf) - known):
        log.warning('Ignoring unknown site configuration key %r in %s', key, path)
    return SiteConfig(**{k: v for k, v in conf.items() if k in known})


def apply_settings(site, settings):
    """Overlay per-step control-plane settings (from reserved annotations) onto the site configuration"""
    changes = {}
    if settings.store_path:
        changes['store_path'] = settings.store_path
    if settings.engine_module:
        changes['hpc_module'] = settings.engine_module
    if settings.tmpdir:
        changes['tmpdir'] = settings.tmpdir
    if changes:
        log.info('Control-plane overrides: %s', ', '.join('%s=%s' % kv for kv in sorted(changes.items())))
    return replace(site, **changes)


def step_paths(site, ctx):
    """Per-step engine root, runroot and pidfile"""
    values = dict(job=ctx.job_id, step=ctx.step_id, user=ctx.user, tmpdir=site.tmpdir)
    return dict(root=site.root_template.format(**values),
                runroot=site.runroot_template.format(**values),
                pidfile=site.pidfile_template.format(**values))


def apply_hpc_module(plan, site):
    """Put the engine module's namespace options at the front of the global options; idempotent"""
    try:
        module = ENGINE_MODULES[site.hpc_module]
    except KeyError:
        raise PlanError('unknown engine module %r' % site.hpc_module) from None
    wanted = {opt.flag: opt.value for opt in module}

    for opt in plan.global_options:
        if opt.flag in wanted and opt.value != wanted[opt.flag]:
            raise PlanConflictError('%s %s conflicts with engine module %r (%s %s)'
                                    % (opt.flag, opt.value, site.hpc_module, opt.flag, wanted[opt.flag]))

    if plan.global_options[:len(module)] == module:
        return plan
    rest = tuple(opt for opt in plan.global_options if opt.flag not in wanted)
    return replace(plan, global_options=module + rest)


def render_plan(edf, site, ctx):
    """Render the explicit, non-detached engine plan for one step"""
    reserved = [k for k in edf.annotations if k.startswith(RESERVED_PREFIX)]
    if reserved:
        raise PlanError('reserved annotations must be split out before rendering: %s' % ', '.join(reserved))
    report = validate_edf(edf)
    if not report.ok:
        raise PlanError('EDF is not valid: %s' % '; '.join('%s: %s' % e for e in report.errors))
    site.check()

    paths = step_paths(site, ctx)
    global_options = (
        Option('--root', paths['root']),
        Option('--runroot', paths['runroot']),
        Option('--storage-opt', 'additionalimagestore=%s' % site.store_path),
        Option('--storage-opt', 'mount_program=%s' % site.mount_program),
    )

    run_options = []
    for m in edf.mounts:
        run_options.append(Option('--mount', 'type=bind,src=%s,dst=%s%s' % (m.source, m.destination, ',readonly' if m.readonly else '')))
    if edf.workdir is not None:
        run_options.append(Option('--workdir', edf.workdir))
    if not edf.entrypoint:
        run_options.append(Option('--entrypoint', ''))
    if not edf.writable:
        run_options.append(Option('--read-only'))
    run_options.extend(Option('--device', d) for d in edf.devices)
    run_options.extend(Option('--env', '%s=%s' % kv) for kv in edf.env.items())
    run_options.extend(Option('--annotation', '%s=%s' % kv) for kv in edf.annotations.items())

    plan = EnginePlan(image=edf.image, global_options=global_options, run_options=tuple(run_options), engine=site.engine)
    return apply_hpc_module(plan, site)


def shim_plan(plan, site, ctx):
    """Detached per-node variant of `plan` running the namespace-holding shim"""
    return replace(plan, detach=True, pidfile=step_paths(site, ctx)['pidfile'], command=SHIM_COMMAND)


def plan_to_argv(plan):
    """Render the plan to its deterministic token list"""
    argv = [plan.engine]
    for opt in plan.global_options:
        argv.extend(opt.tokens())
    argv.append('run')
    if plan.detach:
        argv.append('--detach')
    if plan.pidfile is not None:
        argv.extend(('--pidfile', plan.pidfile))
    for opt in plan.run_options:
        argv.extend(opt.tokens())
    argv.append(plan.image)
    argv.extend(plan.command)
    return argv


def argv_to_plan(argv):
    """Parse a token list produced by `plan_to_argv()` back into an EnginePlan"""
    tokens = list(argv)
    if len(tokens) < 3:
        raise PlanError('token list too short')
    engine, i = tokens[0], 1

    global_options = []
    while i < len(tokens) and tokens[i] != 'run':
        if tokens[i] not in GLOBAL_FLAGS or i + 1 >= len(tokens):
            raise PlanError('unexpected global token %r at %d' % (tokens[i], i))
        global_options.append(Option(tokens[i], tokens[i+1]))
        i += 2
    if i >= len(tokens):
        raise PlanError('missing run verb')
    i += 1

    detach, pidfile = False, None
    if i < len(tokens) and tokens[i] == '--detach':
        detach, i = True, i + 1
    if i + 1 < len(tokens) and tokens[i] == '--pidfile':
        pidfile, i = tokens[i+1], i + 2

    run_options = []
    while i < len(tokens) and tokens[i] in RUN_FLAGS:
        if RUN_FLAGS[tokens[i]]:
            if i + 1 >= len(tokens):
                raise PlanError('option %s lacks a value' % tokens[i])
            run_options.append(Option(tokens[i], tokens[i+1]))
            i += 2
        else:
            run_options.append(Option(tokens[i]))
            i += 1
    if i >= len(tokens):
        raise PlanError('missing image reference')
    return EnginePlan(image=tokens[i], global_options=tuple(global_options), run_options=tuple(run_options),
                      detach=detach, pidfile=pidfile, command=tuple(tokens[i+1:]), engine=engine)


def format_golden(argv):
    """One token per line, trailing newline"""
    return ''.join('%s\n' % t for t in argv)
