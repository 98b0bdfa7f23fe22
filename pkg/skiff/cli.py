"""
Command-line interface: `skiff <command> ...`

    validate EDF                     parse, expand and validate an EDF
    render EDF                       print the engine invocation, one token per line
    images import|migrate|list|remove
    run [--import LAYOUT] EDF [-- CMD...]   run one container against the shared store
    sim-launch EDF                   simulate a multi-node job step
    kube-run MANIFEST                run a Pod manifest
    bench startup|pynamic            benchmark reports

Exit codes: 0 ok, 1 runtime failure, 2 validation/parse error, 3 store error, 4 simulation failure.

---------------
Skiff HPC container launcher
Copyright (C) 2026 The Skiff Developers, all rights reserved.
You may use, distribute, and modify this code under the terms of the MIT License.
"""

import io
import os
import sys
import json
import argparse
import platform
import logging
from collections import OrderedDict
from dataclasses import replace

import skiff
from skiff import SkiffError, ValidationError, configure_logging
from skiff.edf import load_edf, expand_variables, validate_edf, resolve_edf
from skiff.plan import StepContext, load_site_config, apply_settings, render_plan, plan_to_argv, format_golden
from skiff.runtime import RuntimeSpec
from skiff.hooks import HookRegistry, run_pipeline
from skiff.ldcache import ContainerTree
from skiff.storage import DiskBackend, MemoryBackend
from skiff.imagestore import (LocalStore, SharedStore, Bind, load_layout, import_image, migrate, list_images,
                              remove_image, mount_view, release_view)
from skiff.executor import Executor
from skiff.launchsim import CostModel, FaultPlan, build_cluster, run_job_step
from skiff.bench import (LAYOUTS, PynamicWorkload, measure_startup, pynamic_run, sample_image, startup_bench)
from skiff.pod import load_pod_manifest, plan_pod, run_pod
from skiff.system import current_identity, make_private_dir

log = logging.getLogger(__name__)


LOG_FILE_ENV_VAR = 'SKIFF_LOG_FILE'
DEFAULT_LOG_FILE = '~/.skiff/logs/skiff.log'


def _emit(args, records, text):
    """Line-delimited JSON with --json, else `text`"""
    if args.json:
        for rec in records:
            print(json.dumps(rec, sort_keys=True))
    elif text:
        sys.stdout.write(text if text.endswith('\n') else text + '\n')


def _site(args):
    site = load_site_config(args.config)
    changes = {}
    if args.store:
        changes['store_path'] = os.path.abspath(args.store)
    if args.local_store:
        changes['local_store_path'] = os.path.abspath(args.local_store)
    return replace(site, **changes) if changes else site


def _shared_store(site, create=False):
    return SharedStore(DiskBackend(site.store_path, create=create))


def _local_store(site):
    return LocalStore(DiskBackend(make_private_dir(site.local_store_path)))


def _ctx(args, nodes=1, ranks_per_node=1):
    user, uid, gid = current_identity()
    job = args.job if args.job is not None else int(os.environ.get('SLURM_JOB_ID', 0))
    step = args.step if args.step is not None else int(os.environ.get('SLURM_STEP_ID', 0))
    return StepContext(job, step, args.user or user, uid, gid, nodes, ranks_per_node)


def _read(fname):
    with io.open(fname, 'r', encoding='utf-8') as f:
        return f.read()


# ---- commands

def cmd_validate(args):
    edf = expand_variables(load_edf(args.edf), os.environ)
    report = validate_edf(edf)
    _emit(args, report.to_records(), str(report))
    return 0 if report.ok else ValidationError.exit_code


def cmd_render(args):
    site = _site(args)
    edf, settings = resolve_edf(_read(args.edf), os.environ)
    site = apply_settings(site, settings)
    argv = plan_to_argv(render_plan(edf, site, _ctx(args)))
    _emit(args, [dict(argv=argv)], format_golden(argv))
    return 0


def _migrate_reference(args, site, reference):
    shared = _shared_store(site, create=True)
    local = _local_store(site)
    if os.path.isdir(reference):
        image = load_layout(reference)
        import_image(image, local)
        reference = image.reference
    before = shared.find(reference)
    squashed = migrate(reference, local, shared)
    present = before is not None and before.digest == squashed.digest
    msg = '%s %s as %s' % (reference, 'already present' if present else 'migrated', squashed.digest)
    _emit(args, [dict(reference=reference, digest=squashed.digest, already_present=present)], msg)
    return 0


def cmd_images(args):
    site = _site(args)
    if args.images_command == 'import':
        image = load_layout(args.layout)
        record = import_image(image, _local_store(site))
        _emit(args, [dict(reference=record.reference, digest=record.digest)],
              'imported %s as %s' % (record.reference, record.digest))
        return 0
    if args.images_command == 'migrate':
        return _migrate_reference(args, site, args.reference)
    if args.images_command == 'list':
        listings = list_images(_shared_store(site, create=True))
        _emit(args, [dict(reference=l.reference, digest=l.digest, created=l.created) for l in listings],
              ''.join('%s\t%s\t%s\n' % (l.reference, l.digest, l.created) for l in listings))
        return 0
    if args.images_command == 'remove':
        report = remove_image(_shared_store(site), args.reference)
        _emit(args, [dict(reference=report.reference, digest=report.digest, artifact_removed=report.artifact_removed)],
              'removed %s (%s)%s' % (report.reference, report.digest, '' if report.artifact_removed else ', artifact kept'))
        return 0
    raise ValidationError('unknown images command %r' % args.images_command)


def _import_on_demand(layout, reference, site, shared):
    image = load_layout(layout)
    if image.reference != reference:
        raise ValidationError('image layout holds %s, EDF wants %s' % (image.reference, reference))
    log.info('Importing %s on demand from %s', reference, layout)
    local = _local_store(site)
    import_image(image, local)
    return migrate(reference, local, shared)


def cmd_run(args):
    site = _site(args)
    edf, settings = resolve_edf(_read(args.edf), os.environ)
    site = apply_settings(site, settings)
    ctx = _ctx(args)
    plan = render_plan(edf, site, ctx)
    shared = _shared_store(site, create=bool(args.import_layout))
    if args.import_layout and shared.find(edf.image) is None:
        _import_on_demand(args.import_layout, edf.image, site, shared)
    image = shared.open_image(edf.image)
    hooks = HookRegistry.load(site.hooks_config, site.cdi_dir)
    pipeline = run_pipeline(RuntimeSpec.from_plan(plan), edf.annotations, edf.devices, hooks,
                            ContainerTree(image.artifact.paths()), settings.features)
    binds = [Bind(m.destination, DiskBackend(m.source, create=False), m.readonly) for m in edf.mounts]
    view = mount_view(image, MemoryBackend(name='run-upper'), (ctx.uid, ctx.gid), owner=(ctx.job_id, ctx.step_id),
                      binds=binds, readonly=not edf.writable, store=shared)
    env = OrderedDict(image.record.config.get('env') or {})
    env.update(pipeline.spec.env_dict())
    command = args.command[1:] if args.command[:1] == ['--'] else args.command
    command = list(command) or list(image.record.config.get('cmd') or ())
    prelude = list(image.record.config.get('entrypoint') or ()) if edf.entrypoint else None
    executor = Executor(view, env, name=edf.image)
    try:
        code = executor.run(command, prelude)
    finally:
        release_view(view, shared)
    for line in executor.stdout:
        print(line)
    for line in executor.stderr:
        print(line, file=sys.stderr)
    return code


def _cost(args):
    return CostModel(join_mode=args.join_mode)


def _sim_cluster(args, edf_text, layout=None):
    cluster = build_cluster(args.nodes, args.ranks_per_node, seed=args.seed)
    edf, _ = resolve_edf(edf_text, os.environ)
    image = load_layout(layout) if layout else sample_image(edf.image)
    if image.reference != edf.image:
        raise ValidationError('image layout holds %s, EDF wants %s' % (image.reference, edf.image))
    cluster.publish(image)
    return cluster


def cmd_sim_launch(args):
    site = _site(args)
    edf_text = _read(args.edf)
    cluster = _sim_cluster(args, edf_text, args.image_layout)
    hooks = HookRegistry.load(site.hooks_config, site.cdi_dir)
    cost = _cost(args)
    if args.mode == 'warm':
        prime = run_job_step(cluster, edf_text, site, 'cold', cost=cost, hooks=hooks, host_env=os.environ)
        if not prime.completed:
            raise SkiffError('could not populate the store for a warm start: %s' % prime.failure)
    try:
        faults = FaultPlan.of(*args.fault)
    except ValueError as e:
        raise ValidationError(str(e)) from None
    trace = run_job_step(cluster, edf_text, site, args.mode, cost=cost, hooks=hooks, faults=faults, host_env=os.environ)

    os.makedirs(args.out, exist_ok=True)
    trace.save(os.path.join(args.out, 'trace.jsonl'))
    summary = trace.summary()
    text = '%s start on %d node(s) x %d rank(s): %s%s\n' % (args.mode, args.nodes, args.ranks_per_node, trace.status,
                                                            ' (%s)' % trace.failure if trace.failure else '')
    text += ''.join('  %-22s %d\n' % kv for kv in sorted(trace.counters.items()))
    if trace.completed:
        table = measure_startup([trace], cost.join_bound)
        text += table.to_text()
        with io.open(os.path.join(args.out, 'report.txt'), 'w', encoding='utf-8') as f:
            f.write(table.to_text())
        with io.open(os.path.join(args.out, 'report.jsonl'), 'w', encoding='utf-8') as f:
            f.write(table.to_jsonl())
    _emit(args, [summary], text)
    return 0 if trace.completed else 4


def cmd_kube_run(args):
    site = _site(args)
    manifest = load_pod_manifest(args.manifest)
    user, uid, gid = current_identity()
    pod_plan = plan_pod(manifest, site, args.user or user, uid, gid)
    hooks = HookRegistry.load(site.hooks_config, site.cdi_dir)
    result = run_pod(pod_plan, _shared_store(site), hooks, host_root=args.host_root, seed=args.seed)
    if args.out:
        with io.open(args.out, 'w', encoding='utf-8') as f:
            f.write(result.to_jsonl())
    text = ''.join('%-16s %-4s exit %s\n' % (c.name, c.phase, c.exit_code) for c in result.containers)
    text += 'pod %s %s\n' % (result.name, result.status)
    _emit(args, [c.to_dict() for c in result.containers] + [dict(kind='pod', name=result.name, status=result.status)], text)
    return result.exit_code


def cmd_bench(args):
    site = _site(args)
    if args.bench_command == 'startup':
        edf_text = _read(args.edf)
        cluster = _sim_cluster(args, edf_text, args.image_layout)
        hooks = HookRegistry.load(site.hooks_config, site.cdi_dir)
        table, _ = startup_bench(cluster, edf_text, args.reps, site, _cost(args), hooks, os.environ)
        if args.plot:
            from skiff.plot import plot_startup
            plot_startup(table, args.plot)
        _emit(args, table.to_records(), table.to_text())
        return 0

    workload = PynamicWorkload()
    layouts = LAYOUTS if args.layout == 'both' else (args.layout,)
    reports = []
    for nodes in args.nodes_list:
        for layout in layouts:
            cluster = build_cluster(nodes, 1, seed=args.seed)
            reports.append(pynamic_run(cluster, workload, layout))
    if args.plot:
        from skiff.plot import plot_pynamic
        plot_pynamic(reports, args.plot)
    _emit(args, [r.to_dict() for r in reports], ''.join(r.to_text() for r in reports))
    return 0


# ---- argument parsing

def _int_list(text):
    try:
        return [int(x) for x in text.split(',') if x]
    except ValueError:
        raise argparse.ArgumentTypeError('expected comma separated integers, got %r' % text) from None


def build_parser():
    parser = argparse.ArgumentParser(prog='skiff', description='HPC container launcher and launch simulator')
    parser.add_argument('--version', action='version', version='%(prog)s ' + skiff.__version__)
    parser.add_argument('--config', help='site configuration JSON (default: $SKIFF_CONFIG or ~/.skiff/site.json)')
    parser.add_argument('--store', help='shared image store directory (overrides the site configuration)')
    parser.add_argument('--local-store', help='temporary local image store directory')
    parser.add_argument('--log-file', help='log file (default: $%s or %s)' % (LOG_FILE_ENV_VAR, DEFAULT_LOG_FILE))
    parser.add_argument('-v', '--verbose', action='count', default=0, help='-v for info, -vv for debug output')
    parser.add_argument('--json', action='store_true', help='line-delimited JSON output')
    sub = parser.add_subparsers(dest='command', required=True)

    def step_args(p):
        p.add_argument('--job', type=int, help='job id (default: $SLURM_JOB_ID or 0)')
        p.add_argument('--step', type=int, help='step id (default: $SLURM_STEP_ID or 0)')
        p.add_argument('--user', help='user name for path templates (default: invoking user)')

    def sim_args(p):
        p.add_argument('--nodes', type=int, default=1)
        p.add_argument('--ranks-per-node', type=int, default=4)
        p.add_argument('--seed', type=int, default=0)
        p.add_argument('--join-mode', choices=('setns', 'exec'), default='setns')
        p.add_argument('--image-layout', help='image layout directory to pull from (default: synthetic image)')

    p = sub.add_parser('validate', help='parse, expand and validate an EDF')
    p.add_argument('edf')
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser('render', help='print the engine invocation for an EDF')
    p.add_argument('edf')
    step_args(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser('images', help='manage the shared image store')
    isub = p.add_subparsers(dest='images_command', required=True)
    ip = isub.add_parser('import', help='import an image layout into the local store')
    ip.add_argument('layout')
    ip = isub.add_parser('migrate', help='migrate a local image (or a layout directory) into the shared store')
    ip.add_argument('reference')
    isub.add_parser('list', help='list images in the shared store')
    ip = isub.add_parser('remove', help='remove an image from the shared store')
    ip.add_argument('reference')
    p.set_defaults(func=cmd_images)

    p = sub.add_parser('run', help='run an EDF-described container')
    p.add_argument('--import', dest='import_layout', metavar='LAYOUT',
                   help='import and migrate this image layout first when the image is not in the shared store')
    p.add_argument('edf')
    p.add_argument('command', nargs=argparse.REMAINDER)
    step_args(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser('sim-launch', help='simulate a multi-node job step')
    p.add_argument('edf')
    sim_args(p)
    p.add_argument('--mode', choices=('cold', 'warm'), default='cold')
    p.add_argument('--fault', action='append', default=[], help='inject a failure, eg. start:node=1 (repeatable)')
    p.add_argument('--out', default='sim-out', help='output directory for trace and report')
    p.set_defaults(func=cmd_sim_launch)

    p = sub.add_parser('kube-run', help='run a Kubernetes Pod manifest')
    p.add_argument('manifest')
    p.add_argument('--host-root', help='directory hostPath volumes are resolved under')
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--user', help='user name for path templates')
    p.add_argument('--out', help='write the pod event trace here')
    p.set_defaults(func=cmd_kube_run)

    p = sub.add_parser('bench', help='benchmark reports')
    bsub = p.add_subparsers(dest='bench_command', required=True)
    bp = bsub.add_parser('startup', help='startup decomposition over repeated warm steps')
    bp.add_argument('edf')
    sim_args(bp)
    bp.add_argument('--reps', type=int, default=10)
    bp.add_argument('--plot', help='write a bar chart to this image file')
    bp = bsub.add_parser('pynamic', help='metadata pressure of a Python import storm')
    bp.add_argument('--nodes', dest='nodes_list', type=_int_list, default=[1, 2, 4, 8, 16, 32, 64])
    bp.add_argument('--layout', choices=LAYOUTS + ('both',), default='both')
    bp.add_argument('--seed', type=int, default=0)
    bp.add_argument('--plot', help='write a scaling plot to this image file')
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None):
    """Main entrypoint"""
    parser = build_parser()
    args = parser.parse_args(argv)
    level = {0: logging.WARNING, 1: logging.INFO}.get(args.verbose, logging.DEBUG)
    configure_logging(args.log_file or os.environ.get(LOG_FILE_ENV_VAR) or DEFAULT_LOG_FILE, level)
    log.debug('skiff %s on %s %s %s', skiff.__version__, platform.python_implementation(), platform.python_version(),
              platform.platform())
    try:
        return args.func(args)
    except SkiffError as e:
        log.debug('%s failed', args.command, exc_info=True)
        print('skiff: error: %s' % e, file=sys.stderr)
        return e.exit_code
    except OSError as e:
        log.exception('%s failed with an I/O error', args.command)
        print('skiff: error: %s' % e, file=sys.stderr)
        return 1
    except Exception:
        log.exception('%s failed!', args.command)
        return 1


if __name__ == '__main__':
    sys.exit(main())
