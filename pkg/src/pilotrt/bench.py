"""Benchmark harness.

    bench micro --component scheduler --clone-factor 10000
    bench agent --durations 1,4,16,64 --generations 3 --cores 16
    bench integrated --generations 5 --duration 2 --cores 16 --channel-latency 0.01
    bench replay RUN_DIR

Every run leaves ``<out>/<run>/profile/`` (raw events) and
``<out>/<run>/meta.json``; all CSVs are computed from those two alone, so
``bench replay`` regenerates them byte for byte.  Exit status is 0 only if
every run passed its conservation audit.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import platform
import shutil
import sys
import threading
import time
from pathlib import Path

import numpy as np

from . import __version__
from .agent import COMPONENTS, Agent, AgentConfig, CloneSpec
from .channel import WorkloadChannel
from .managers import BarrierMode, desk_scale_cores, run_scenario
from .model import Pilot, PilotDescription, PilotState, StagingDirective, Unit, \
    UnitDescription, UnitState, advance
from .profiler import (Profiler, agent_span, busy_core_series, compute_ttc_a,
                       compute_utilization, concurrency_series, integrate_steps,
                       load_events, occupation_decomposition, rate_summary,
                       steady_window, throughput_series, zero_troughs)
from .resource import ResourceManager, load_resource_config
from .workload import WorkloadSpec

log = logging.getLogger(__name__)

FINAL = ('DONE', 'CANCELED', 'FAILED', 'UM_STAGING_OUT')


# ------------------------------------------------------------------------------
# audit

def held_core_time(events) -> int:
    """Σ cores × (release − allocation) over every allocation in the log."""
    open_at = {}
    total = 0
    for e in events:
        if e.label == 'schedule_ok':
            open_at[e.uid] = (e.ts, int(e.detail_value('cores', 1)))
        elif e.label == 'unschedule' and e.uid in open_at:
            t, c = open_at.pop(e.uid)
            total += c * (e.ts - t)
    return total


def audit(events, report: dict) -> dict:
    """Conservation checks for one run; ``ok`` is their conjunction."""
    states = report.get('states', {})
    ended = sum(states.get(s, 0) for s in FINAL) + report.get('dropped', 0)
    entered = report.get('pulled', 0) + report.get('clones', 0)
    series = busy_core_series(events)
    if series:
        integral = integrate_steps(series, series[0][0], series[-1][0])
        leftover = series[-1][1]
    else:
        integral, leftover = 0, 0
    occupation = held_core_time(events)
    out = {'entered': entered, 'ended': ended,
           'units_conserved': entered == ended,
           'busy_integral': integral, 'occupation_sum': occupation,
           'busy_conserved': integral == occupation and leftover == 0}
    out['ok'] = out['units_conserved'] and out['busy_conserved']
    return out


# ------------------------------------------------------------------------------
# CSV output

def _metadata(meta: dict) -> str:
    lines = []
    for key in sorted(meta):
        val = meta[key]
        text = val if isinstance(val, str) else json.dumps(val, sort_keys=True,
                                                           separators=(',', ':'))
        lines.append('# %s: %s\n' % (key, text))
    return ''.join(lines)


def render_csv(meta: dict, header, rows) -> str:
    buf = io.StringIO()
    buf.write(_metadata(meta))
    w = csv.writer(buf, lineterminator='\n')
    w.writerow(header)
    for row in rows:
        w.writerow([repr(x) if isinstance(x, float) else x for x in row])
    return buf.getvalue()


def read_csv(path) -> tuple:
    """Return (metadata, header, rows) of a CSV written by this harness."""
    meta, body = {}, []
    with open(path) as fh:
        for line in fh:
            if line.startswith('# '):
                k, _, v = line[2:].rstrip('\n').partition(': ')
                meta[k] = v
            else:
                body.append(line)
    rows = list(csv.reader(body))
    return meta, rows[0], rows[1:]


def _environment() -> dict:
    return {'pilotrt': __version__, 'python': platform.python_version(),
            'numpy': np.__version__, 'platform': platform.platform(),
            'cpus': os.cpu_count()}


def run_csvs(run_dir) -> dict:
    """Compute every CSV of one run from its profile and metadata."""
    run_dir = Path(run_dir)
    meta = json.loads((run_dir / 'meta.json').read_text())
    events = load_events(run_dir / 'profile')
    out = {}
    if meta['kind'] == 'micro':
        comp = meta['component']
        series = throughput_series(events, comp, steady_window(events, comp))
        out['throughput.csv'] = render_csv(meta, ['t', 'rate'], series)
        return out
    t0, _ = agent_span(events)
    conc = [((t - t0) / 1e6, n) for t, n in concurrency_series(events)]
    out['concurrency.csv'] = render_csv(meta, ['t', 'units'], conc)
    phases = occupation_decomposition(events)
    rows = [(p.uid, p.scheduling, p.pickup, p.spawn, p.runtime, p.unschedule,
             p.occupation, p.held, p.cores)
            for _, p in sorted(phases.items())]
    out['decomposition.csv'] = render_csv(
        meta, ['uid', 'scheduling_us', 'pickup_us', 'spawn_us', 'runtime_us',
               'unschedule_us', 'occupation_us', 'held_us', 'cores'], rows)
    return out


def run_summary(run_dir) -> dict:
    """Scalar metrics of one run, recomputed from its profile."""
    run_dir = Path(run_dir)
    meta = json.loads((run_dir / 'meta.json').read_text())
    events = load_events(run_dir / 'profile')
    if meta['kind'] == 'micro':
        comp = meta['component']
        window = steady_window(events, comp)
        series = throughput_series(events, comp, window)
        summary = rate_summary(series)
        return {'component': comp, 'instances': meta['instances'], 'window': window,
                'clone_factor': meta['clone_factor'], 'mean': summary.mean,
                'stdev': summary.stdev, 'cv': summary.cv, 'windows': summary.windows}
    t0, t1 = agent_span(events)
    series = concurrency_series(events)
    return {'ttc_a': compute_ttc_a(events),
            'utilization': compute_utilization(events, meta['pilot_cores']),
            'troughs': len(zero_troughs(series, t0, t1)),
            'max_concurrency': max((n for _, n in series), default=0)}


def write_run_outputs(run_dir) -> list:
    paths = []
    for name, text in run_csvs(run_dir).items():
        p = Path(run_dir) / name
        p.write_text(text)
        paths.append(p)
    return paths


def _finish_run(run_dir, meta, report):
    run_dir = Path(run_dir)
    events = load_events(run_dir / 'profile')
    meta = dict(meta, audit=audit(events, report), agent=report)
    (run_dir / 'meta.json').write_text(json.dumps(meta, indent=1, sort_keys=True))
    write_run_outputs(run_dir)
    return meta


# ------------------------------------------------------------------------------
# micro-benchmarks

def micro_unit(component: str, sandbox: Path) -> Unit:
    """The single seed unit for a component benchmark."""
    if component == 'stager_in':
        src = sandbox.parent / 'input.dat'
        src.write_bytes(b'x')
        desc = UnitDescription('/bin/true', input_staging=[
            StagingDirective(str(src), 'input.dat')])
    elif component == 'stager_out':
        desc = UnitDescription('/bin/sh', ['-c', 'echo out; echo err >&2'])
    else:
        desc = UnitDescription('/bin/true')
    unit = Unit(desc)
    advance(unit, UnitState.UM_SCHEDULING)
    unit.sandbox = str(sandbox / unit.uid)
    return unit


def run_micro(component: str, clone_factor: int = 10000, instances: int = 1,
              resource='local', cores=None, spawner=None, out_dir=None,
              run_name=None, timeout: float = 600.0) -> dict:
    """Clone one unit ``clone_factor`` times at ``component`` and drop after it."""
    if component not in COMPONENTS:
        raise ValueError('component must be one of %s' % ', '.join(COMPONENTS))
    cfg = load_resource_config(resource) if isinstance(resource, str) else resource
    cores = cores or min(cfg.total_cores, desk_scale_cores())
    out_dir = Path(out_dir or 'bench-out')
    run_dir = out_dir / (run_name or 'micro_%s_%d' % (component, instances))
    if run_dir.exists():
        shutil.rmtree(run_dir)
    (run_dir / 'sandbox').mkdir(parents=True)
    overrides = {'executors': instances} if component == 'executor' else \
        {'stagers': instances} if component.startswith('stager') else {}
    config = AgentConfig.from_resource(cfg, clone=CloneSpec(component, clone_factor),
                                       drop_after=component, **overrides)
    if spawner:
        config.spawner = spawner
    rm = ResourceManager(cfg)
    active = threading.Event()
    pilot = Pilot(PilotDescription(cores, timeout, cfg.resource_id))
    handle = rm.submit_pilot_job(pilot.description, lambda h, l: active.set())
    active.wait(10)
    pilot.nodes = rm.query_layout(handle)
    for s in (PilotState.PM_LAUNCH, PilotState.P_ACTIVE):
        advance(pilot, s)
    profiler = Profiler(run_dir / 'profile')
    channel = WorkloadChannel()
    agent = Agent(pilot, config, channel, profiler, run_dir / 'sandbox')
    seed = micro_unit(component, run_dir / 'sandbox')
    t0 = time.monotonic()
    agent.start()
    channel.push_units(pilot.uid, [seed.to_doc()])
    channel.seal(pilot.uid)
    finished = agent.wait_accounted(clone_factor, timeout)
    wall = time.monotonic() - t0
    channel.request_shutdown(pilot.uid)
    agent.join(timeout)
    report = agent.report()
    profiler.close()
    rm.release_pilot_job(handle)
    rm.close()
    meta = {'kind': 'micro', 'component': component, 'instances': instances,
            'clone_factor': clone_factor, 'pilot_cores': pilot.nodes.total_cores,
            'resource': cfg.to_doc(), 'agent_config': config.to_doc(),
            'seed': 'none (deterministic workload)', 'wall_s': wall,
            'completed': finished, 'env': _environment()}
    meta = _finish_run(run_dir, meta, report)
    meta['summary'] = run_summary(run_dir)
    meta['run_dir'] = str(run_dir)
    return meta


# ------------------------------------------------------------------------------
# scenarios

def run_agent_level(duration: float, generations: int, cores: int, resource='local',
                    out_dir=None, run_name=None, executable='sleep',
                    profile=True) -> dict:
    out_dir = Path(out_dir or 'bench-out')
    run_dir = out_dir / (run_name or 'agent_d%g_g%d_c%d' % (duration, generations, cores))
    if run_dir.exists():
        shutil.rmtree(run_dir)
    spec = WorkloadSpec(unit_duration=duration, generations=generations,
                        executable=executable)
    rep = run_scenario(spec, BarrierMode.AGENT_BARRIER, cores, resource, run_dir,
                       profile=profile)
    return _scenario_meta(rep, run_dir, spec, resource)


def run_integrated(mode, duration: float, generations: int, cores: int,
                   resource='local', channel_latency: float = 0.0, out_dir=None,
                   run_name=None, executable='sleep') -> dict:
    mode = BarrierMode(mode)
    out_dir = Path(out_dir or 'bench-out')
    run_dir = out_dir / (run_name or 'integrated_%s' % mode.value)
    if run_dir.exists():
        shutil.rmtree(run_dir)
    spec = WorkloadSpec(unit_duration=duration, generations=generations,
                        executable=executable)
    rep = run_scenario(spec, mode, cores, resource, run_dir,
                       channel_latency=channel_latency)
    return _scenario_meta(rep, run_dir, spec, resource, channel_latency)


def _scenario_meta(rep, run_dir, spec, resource, latency=0.0):
    cfg = load_resource_config(resource) if isinstance(resource, str) else resource
    meta = {'kind': 'scenario', 'mode': rep.mode.value, 'pilot_cores': rep.pilot_cores,
            'workload': {'n_units': rep.n_units, 'unit_duration': rep.unit_duration,
                         'generations': rep.generations,
                         'cores_per_unit': spec.cores_per_unit,
                         'executable': spec.executable},
            'channel_latency': latency, 'ttc': rep.ttc, 'optimal_ttc': rep.optimal_ttc,
            'counts': rep.counts, 'resource': cfg.to_doc(),
            'seed': 'none (deterministic workload)', 'env': _environment()}
    meta = _finish_run(run_dir, meta, rep.agent or {})
    meta['summary'] = run_summary(run_dir)
    meta['run_dir'] = str(run_dir)
    meta['all_done'] = rep.counts.get('DONE', 0) == rep.n_units
    return meta


def summary_csv(run_dirs, kind: str) -> str:
    """Table across runs, recomputed from their profiles."""
    rows = []
    metas = []
    for d in run_dirs:
        meta = json.loads((Path(d) / 'meta.json').read_text())
        s = run_summary(d)
        metas.append(meta)
        if kind == 'micro':
            rows.append((meta['component'], meta['instances'], meta['clone_factor'],
                         s['mean'], s['stdev'], s['cv'], s['windows']))
        elif kind == 'agent':
            w = meta['workload']
            rows.append((w['unit_duration'], meta['pilot_cores'], w['generations'],
                         w['n_units'], s['ttc_a'], s['utilization'],
                         s['max_concurrency']))
        else:
            rows.append((meta['mode'], meta['ttc'], s['ttc_a'], meta['optimal_ttc'],
                         s['utilization'], s['troughs']))
    header = {'micro': ['component', 'instances', 'clone_factor', 'mean_rate',
                        'stdev', 'cv', 'windows'],
              'agent': ['unit_duration', 'pilot_cores', 'generations', 'n_units',
                        'ttc_a', 'utilization', 'max_concurrency'],
              'integrated': ['mode', 'ttc', 'ttc_a', 'optimal_ttc', 'utilization',
                             'troughs']}[kind]
    head = {'kind': kind + '-summary', 'runs': [Path(d).name for d in run_dirs],
            'env': metas[0]['env'] if metas else {}}
    return render_csv(head, header, rows)


# ------------------------------------------------------------------------------
# CLI

def _floats(text):
    return [float(x) for x in text.split(',') if x]


def _parser():
    p = argparse.ArgumentParser(prog='bench', description=__doc__.split('\n')[0])
    sub = p.add_subparsers(dest='cmd', required=True)

    def common(sp):
        sp.add_argument('--resource', default='local', help='resource profile or file')
        sp.add_argument('--out', default='bench-out', help='output directory')
        sp.add_argument('--cores', type=int, default=None, help='pilot cores')
        sp.add_argument('--repeat', type=int, default=1)
        sp.add_argument('-v', '--verbose', action='store_true')

    m = sub.add_parser('micro', help='one component in isolation (clone/drop)')
    common(m)
    m.add_argument('--component', required=True, choices=COMPONENTS)
    m.add_argument('--clone-factor', type=int, default=10000)
    m.add_argument('--instances', type=int, nargs='+', default=[1])
    m.add_argument('--spawner', choices=('direct', 'shell'), default=None)

    a = sub.add_parser('agent', help='agent-level generations sweep')
    common(a)
    a.add_argument('--durations', type=_floats, default=[1.0, 4.0, 16.0, 64.0])
    a.add_argument('--generations', type=int, default=3)
    a.add_argument('--executable', choices=('sleep', 'spin', 'true'), default='sleep')

    i = sub.add_parser('integrated', help='agent / application / generation barriers')
    common(i)
    i.add_argument('--duration', type=float, default=2.0)
    i.add_argument('--generations', type=int, default=5)
    i.add_argument('--channel-latency', type=float, default=0.01)
    i.add_argument('--modes', default='agent,application,generation')

    r = sub.add_parser('replay', help='regenerate CSVs from stored profiles')
    r.add_argument('run_dirs', nargs='+')
    r.add_argument('--check', action='store_true',
                   help='compare with the stored CSVs instead of rewriting them')
    return p


def _cores(args, cfg):
    cap = desk_scale_cores()
    if args.cores is None:
        return min(cfg.total_cores, cap, 64)
    if args.cores > cap:
        log.warning('%d cores exceeds the desk-scale cap of %d (host cpus x 8)',
                    args.cores, cap)
    return args.cores


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, 'verbose', False)
                        else logging.WARNING, format='%(levelname)s %(message)s')
    if args.cmd == 'replay':
        status = 0
        for d in args.run_dirs:
            for name, text in run_csvs(d).items():
                path = Path(d) / name
                if args.check:
                    same = path.exists() and path.read_text() == text
                    print('%s %s' % ('same' if same else 'DIFFERS', path))
                    status |= 0 if same else 1
                else:
                    path.write_text(text)
                    print('wrote %s' % path)
        return status

    try:
        cfg = load_resource_config(args.resource)
    except KeyError as exc:
        print('bench: %s' % exc.args[0], file=sys.stderr)
        return 2
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cores = _cores(args, cfg)
    if cores > cfg.total_cores:
        print('bench: %d cores requested, %s has %d'
              % (cores, cfg.resource_id, cfg.total_cores), file=sys.stderr)
        return 2
    runs = []
    if args.cmd == 'micro':
        if args.clone_factor < 1 or min(args.instances) < 1:
            print('bench: clone factor and instances must be >= 1', file=sys.stderr)
            return 2
        for n in args.instances:
            for k in range(args.repeat):
                name = 'micro_%s_%d' % (args.component, n) + \
                    ('_r%d' % k if args.repeat > 1 else '')
                meta = run_micro(args.component, args.clone_factor, n, cfg, cores,
                                 args.spawner, out, name)
                s = meta['summary']
                print('%-10s instances=%d  [%.1f +/- %.1f]/s  cv=%.3f  windows=%d  %s'
                      % (args.component, n, s['mean'], s['stdev'], s['cv'],
                         s['windows'], 'ok' if meta['audit']['ok'] else 'AUDIT FAILED'))
                runs.append(meta)
    elif args.cmd == 'agent':
        for d in args.durations:
            for k in range(args.repeat):
                name = 'agent_d%g_g%d_c%d' % (d, args.generations, cores) + \
                    ('_r%d' % k if args.repeat > 1 else '')
                meta = run_agent_level(d, args.generations, cores, cfg, out, name,
                                       args.executable)
                s = meta['summary']
                print('duration=%gs cores=%d ttc_a=%.2fs utilization=%.3f  %s'
                      % (d, cores, s['ttc_a'], s['utilization'],
                         'ok' if meta['audit']['ok'] else 'AUDIT FAILED'))
                runs.append(meta)
    else:
        modes = [BarrierMode(m.strip()) for m in args.modes.split(',') if m.strip()]
        for mode in modes:
            for k in range(args.repeat):
                name = 'integrated_%s' % mode.value + \
                    ('_r%d' % k if args.repeat > 1 else '')
                meta = run_integrated(mode, args.duration, args.generations, cores,
                                      cfg, args.channel_latency, out, name)
                s = meta['summary']
                print('%-12s ttc=%.2fs ttc_a=%.2fs optimal=%.0fs troughs=%d  %s'
                      % (mode.value, meta['ttc'], s['ttc_a'], meta['optimal_ttc'],
                         s['troughs'], 'ok' if meta['audit']['ok'] else 'AUDIT FAILED'))
                runs.append(meta)
    summary = out / ('%s_summary.csv' % args.cmd)
    summary.write_text(summary_csv([m['run_dir'] for m in runs], args.cmd))
    print('wrote %s' % summary)
    ok = all(m['audit']['ok'] and m.get('all_done', m.get('completed', True))
             for m in runs)
    return 0 if ok else 1


if __name__ == '__main__':
    sys.exit(main())
