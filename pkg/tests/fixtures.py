"""Synthetic agent profiles whose metrics are known by construction.

Each generated log comes with the ground truth it was built from: the
executing intervals, the agent span and the per-unit phase lengths.  The
truth is accumulated while the timeline is laid out, never read back from
the log.
"""

import random
from dataclasses import dataclass, field


@dataclass
class Truth:
    cores: int
    t0: int = None
    t1: int = None
    intervals: list = field(default_factory=list)   # (uid, start, end, cores)
    phases: dict = field(default_factory=dict)      # uid -> (sched, pickup, spawn, run, unsched)
    held: dict = field(default_factory=dict)        # uid -> schedule_ok .. unschedule


def _line(ts, uid, comp, label, detail=''):
    wall = ts + 1_600_000_000_000_000
    return (ts, '%d.%06d,%d.%06d,%s,%s,%s,%s\n' % (
        divmod(ts, 10**6) + divmod(wall, 10**6) + (uid, comp, label, detail)))


def synthetic_profile(rng: random.Random, cores: int = None, n_units: int = None):
    """Return (files, truth); ``files`` maps component name to file text."""
    cores = cores or rng.choice([1, 2, 4, 8, 16])
    n_units = n_units or rng.randint(1, 40)
    truth = Truth(cores)
    lines = []
    free_at = [rng.randint(1_000_000, 2_000_000)] * cores
    for k in range(n_units):
        uid = 'unit.%06d' % k
        need = rng.randint(1, min(cores, 4))
        # the unit occupies the `need` cores that become free first
        order = sorted(range(cores), key=lambda c: free_at[c])[:need]
        ready = max(free_at[c] for c in order)
        arrive = ready - rng.randint(0, 500_000)
        t = arrive
        lines.append(_line(t, uid, 'agent.puller', 'arrive'))
        staged = rng.random() < 0.3
        if staged:
            t += rng.randint(1, 2000)
            lines.append(_line(t, uid, 'stager_in.0', 'A_STAGING_IN'))
            agent_in = t
            t += rng.randint(1, 5000)
            lines.append(_line(t, uid, 'stager_in.0', 'stage_in_done'))
        t += rng.randint(1, 2000)
        a_sched = t
        if not staged:
            agent_in = t
        lines.append(_line(t, uid, 'scheduler.0', 'A_SCHEDULING'))
        t = max(t, ready) + rng.randint(0, 3000)
        sched_ok = t
        lines.append(_line(t, uid, 'scheduler.0', 'schedule_ok', 'cores=%d' % need))
        t += rng.randint(0, 300)
        pending = t
        lines.append(_line(t, uid, 'scheduler.0', 'A_EXECUTING_PENDING'))
        t += rng.randint(0, 20_000)
        pickup = t
        lines.append(_line(t, uid, 'executor.0', 'exec_pickup'))
        t += rng.randint(100, 10_000)
        start = t
        lines.append(_line(t, uid, 'executor.0', 'A_EXECUTING',
                           'cores=%d;pid=%d' % (need, 1000 + k)))
        t += rng.randint(1000, 3_000_000)
        stop = t
        lines.append(_line(t, uid, 'executor.watcher', 'exec_stop', 'exit=0'))
        failed = rng.random() < 0.1
        if failed:
            t += rng.randint(0, 500)
            unsched = t
            lines.append(_line(t, uid, 'scheduler.0', 'unschedule', 'cores=%d' % need))
            t += rng.randint(0, 500)
            lines.append(_line(t, uid, 'executor.watcher', 'FAILED', 'exit=1'))
            end_exec = t
            agent_out = t
        else:
            t += rng.randint(0, 500)
            end_exec = t
            lines.append(_line(t, uid, 'executor.watcher', 'A_STAGING_OUT_PENDING'))
            t += rng.randint(0, 500)
            unsched = t
            lines.append(_line(t, uid, 'scheduler.0', 'unschedule', 'cores=%d' % need))
            t += rng.randint(1, 8000)
            if rng.random() < 0.3:
                lines.append(_line(t, uid, 'stager_out.0', 'A_STAGING_OUT'))
                t += rng.randint(1, 3000)
            lines.append(_line(t, uid, 'stager_out.0', 'DONE'))
            agent_out = t
            lines.append(_line(t + 1, uid, 'stager_out.0', 'stage_out_done'))
        for c in order:
            free_at[c] = max(unsched, end_exec)
        truth.intervals.append((uid, start, end_exec, need))
        truth.phases[uid] = (pending - a_sched, pickup - pending, start - pickup,
                             stop - start, unsched - stop)
        truth.held[uid] = unsched - sched_ok
        truth.t0 = agent_in if truth.t0 is None else min(truth.t0, agent_in)
        truth.t1 = agent_out if truth.t1 is None else max(truth.t1, agent_out)
    files = {}
    for ts, text in sorted(lines):
        comp = text.split(',')[3]
        files.setdefault(comp, []).append(text)
    return {c: ''.join(v) for c, v in files.items()}, truth


def write_profile(directory, files):
    directory.mkdir(parents=True, exist_ok=True)
    for comp, text in files.items():
        (directory / ('%s.prof' % comp)).write_text(text)
    return directory
