"""The pilot-side Agent: a pipeline of components connected by queues.

Units pulled from the workload channel flow through

    puller -> stager_in -> scheduler -> executor -> stager_out -> updater

Each arrow is a bounded queue with blocking put, so a slow component pushes
back on its producers instead of buffering without limit.  Units that end
early (FAILED, CANCELED) go straight to the updater, which reports state
back over the channel.

For micro-benchmarks a unit can be cloned at the entry of one component and
dropped at the exit of the same or a later one, which stresses that
component while everything downstream stays idle.

Run out of process with ``python -m pilotrt.agent bootstrap.json``.
"""

from __future__ import annotations

import collections
import json
import logging
import queue
import sys
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .executor import Executor
from .model import Pilot, Unit, UnitState, advance, wall_us
from .profiler import NULL_PROFILER, Profiler
from .scheduler import Scheduler
from .stager import Stager

log = logging.getLogger(__name__)

COMPONENTS = ('stager_in', 'scheduler', 'executor', 'stager_out')


class AgentBootstrapError(RuntimeError):
    pass


@dataclass(frozen=True)
class CloneSpec:
    component: str
    factor: int

    def __post_init__(self):
        if self.component not in COMPONENTS:
            raise ValueError('cannot clone at %r; choose one of %s'
                             % (self.component, ', '.join(COMPONENTS)))
        if self.factor < 1:
            raise ValueError('clone factor must be >= 1')


@dataclass
class AgentConfig:
    executors: int = 1
    stagers: int = 1
    spawner: str = 'direct'
    scheduler: str = 'continuous'
    clone: Optional[CloneSpec] = None
    drop_after: Optional[str] = None
    startup_barrier: bool = False
    fail_on_nonzero: bool = True
    queue_factor: int = 2
    serial_method: str = 'FORK'
    mpi_method: str = 'SHELL_WRAPPER'
    shutdown_deadline: float = 5.0

    def validate(self):
        if self.executors < 1 or self.stagers < 1:
            raise ValueError('executors and stagers must be >= 1')
        if self.spawner not in ('direct', 'shell'):
            raise ValueError('spawner must be "direct" or "shell"')
        if self.scheduler not in ('continuous', 'torus'):
            raise ValueError('scheduler must be "continuous" or "torus"')
        if self.queue_factor < 1:
            raise ValueError('queue_factor must be >= 1')
        if self.drop_after is not None:
            if self.clone is None:
                raise ValueError('drop_after requires a clone spec')
            if self.drop_after not in COMPONENTS:
                raise ValueError('unknown component %r' % self.drop_after)
            if COMPONENTS.index(self.drop_after) < COMPONENTS.index(self.clone.component):
                raise ValueError('drop_after must not precede the clone point')
        return self

    @classmethod
    def from_resource(cls, config, **overrides) -> 'AgentConfig':
        kw = dict(executors=config.executors, stagers=config.stagers,
                  spawner=config.spawner,
                  scheduler='torus' if config.topology.is_torus else 'continuous',
                  serial_method=config.serial_launch_method,
                  mpi_method=config.mpi_launch_method)
        kw.update(overrides)
        return cls(**kw).validate()

    def to_doc(self) -> dict:
        doc = {k: getattr(self, k) for k in (
            'executors', 'stagers', 'spawner', 'scheduler', 'drop_after',
            'startup_barrier', 'fail_on_nonzero', 'queue_factor',
            'serial_method', 'mpi_method', 'shutdown_deadline')}
        doc['clone'] = None if self.clone is None else \
            {'component': self.clone.component, 'factor': self.clone.factor}
        return doc

    @classmethod
    def from_doc(cls, doc: dict) -> 'AgentConfig':
        doc = dict(doc)
        clone = doc.pop('clone', None)
        if clone is not None:
            clone = CloneSpec(clone['component'], int(clone['factor']))
        return cls(clone=clone, **doc).validate()


STOP = object()


class Agent:
    """Wire the components for one active pilot and run them."""

    def __init__(self, pilot: Pilot, config: AgentConfig, channel,
                 profiler=NULL_PROFILER, sandbox_root=None):
        if pilot.nodes is None:
            raise AgentBootstrapError('pilot %s has no node layout' % pilot.uid)
        self.pilot = pilot
        self.config = config.validate()
        self.channel = channel
        self.profiler = profiler
        self.sandbox_root = Path(sandbox_root or Path.cwd() / pilot.uid)
        maxsize = config.queue_factor * pilot.nodes.total_cores
        try:
            self.stager_in = Stager('in', lambda u: self._forward('stager_in', u),
                                    self._finish, self.sandbox_root,
                                    config.stagers, profiler, maxsize)
            self.scheduler = Scheduler(pilot.nodes,
                                       lambda u: self._forward('scheduler', u),
                                       self._finish, config.scheduler, profiler,
                                       maxsize)
            self.executor = Executor(lambda u: self._forward('executor', u),
                                     self._finish, self.scheduler.release_unit,
                                     self.sandbox_root, config.executors,
                                     config.spawner, config.serial_method,
                                     config.mpi_method, config.fail_on_nonzero,
                                     profiler, maxsize)
            self.stager_out = Stager('out', lambda u: self._forward('stager_out', u),
                                     self._finish, self.sandbox_root,
                                     config.stagers, profiler, maxsize)
        except ValueError as exc:
            raise AgentBootstrapError(str(exc)) from exc
        self._inbox = {'stager_in': self.stager_in.inbox,
                       'scheduler': self.scheduler.inbox,
                       'executor': self.executor.inbox,
                       'stager_out': self.stager_out.inbox}
        self.stager_in.on_stopped = self.scheduler.stop_allocation
        self.scheduler.on_stopped = lambda: self.executor.stop(config.shutdown_deadline)
        self.executor.on_stopped = self._executor_stopped
        self.stager_out.on_stopped = lambda: self._updates.put(STOP)

        self._updates: queue.Queue = queue.Queue()
        self._seen: set = set()
        self._held: list = []
        self._stop = threading.Event()
        self._finished = threading.Event()
        self._cond = threading.Condition()
        self.pulled = 0
        self.clones = 0
        self.dropped = 0
        self.states: collections.Counter = collections.Counter()
        self.units: dict = {}
        self.walls = {}
        self._threads = []

    # --------------------------------------------------------------------------
    def start(self):
        self.walls['start'] = wall_us() / 1e6
        self.profiler.record(self.pilot.uid, 'agent', 'agent_start',
                             'cores=%d' % self.pilot.nodes.total_cores)
        for comp in (self.stager_out, self.executor, self.scheduler, self.stager_in):
            comp.start()
        self._threads = [
            threading.Thread(target=self._updater, name='agent.updater', daemon=True),
            threading.Thread(target=self._puller, name='agent.puller', daemon=True)]
        for t in self._threads:
            t.start()
        return self

    def stop(self):
        """Begin the cascading shutdown; returns immediately."""
        self._stop.set()

    def join(self, timeout=None) -> bool:
        return self._finished.wait(timeout)

    def run(self) -> dict:
        """Start, run until the channel (or :meth:`stop`) ends the pilot, report."""
        self.start()
        self.join()
        return self.report()

    @property
    def accounted(self) -> int:
        with self._cond:
            return sum(self.states.values()) + self.dropped

    def wait_accounted(self, n: int, timeout: Optional[float] = None) -> bool:
        """Block until ``n`` units have ended (final state, handed off, or dropped)."""
        with self._cond:
            return self._cond.wait_for(
                lambda: sum(self.states.values()) + self.dropped >= n, timeout)

    def report(self) -> dict:
        with self._cond:
            states = {k: v for k, v in sorted(self.states.items())}
            ended = sum(self.states.values()) + self.dropped
        return {'pilot': self.pilot.uid,
                'pulled': self.pulled,
                'clones': self.clones,
                'dropped': self.dropped,
                'states': states,
                'conserved': self.pulled + self.clones == ended,
                'walls': dict(self.walls),
                'max_running': self.executor.max_running,
                'max_fds': self.executor.max_fds,
                'profile_dropped': self.profiler.dropped}

    # --------------------------------------------------------------------------
    def _puller(self):
        pid = self.pilot.uid
        barrier = self.config.startup_barrier
        while not self._stop.is_set() and not self.channel.shutdown_requested(pid):
            docs = self.channel.pull_units(pid, timeout=0.1)
            for doc in docs:
                unit = Unit.from_doc(doc)
                if unit.uid in self._seen:
                    continue
                self._seen.add(unit.uid)
                unit.pilot = pid
                self.pulled += 1
                self.profiler.record(unit.uid, 'agent.puller', 'arrive')
                if barrier:
                    self._held.append(unit)
                else:
                    self._enter('stager_in', unit)
            if barrier and self.channel.workload_complete(pid):
                self.profiler.record(pid, 'agent.puller', 'barrier_release',
                                     'n=%d' % len(self._held))
                held, self._held = self._held, []
                barrier = False
                for unit in held:
                    self._enter('stager_in', unit)
        for unit in self._held:
            advance(unit, UnitState.CANCELED, profiler=self.profiler,
                    component='agent.puller', detail='shutdown')
            self._finish(unit)
        self._held = []
        self.stager_in.stop()

    def _enter(self, comp, unit):
        box = self._inbox[comp]
        clone = self.config.clone
        if clone is not None and clone.component == comp and unit.clone_of is None:
            # snapshot first: the original may move on as soon as it is queued
            template = unit.clone(unit.uid)
            box.put(unit)
            twin_root = self.sandbox_root if comp == 'stager_in' else None
            for k in range(1, clone.factor):
                twin = template.clone('%s.clone.%05d' % (unit.uid, k))
                if twin_root is not None:
                    # staged-in clones need their own sandbox
                    twin.sandbox = str(twin_root / twin.uid)
                with self._cond:
                    self.clones += 1
                box.put(twin)
            return
        box.put(unit)

    def _forward(self, src, unit):
        if self.config.drop_after == src:
            self._drop(src, unit)
            return
        i = COMPONENTS.index(src)
        if i + 1 < len(COMPONENTS):
            self._enter(COMPONENTS[i + 1], unit)
        else:
            self._finish(unit)

    def _drop(self, comp, unit):
        self.profiler.record(unit.uid, comp, 'drop')
        if unit.owns_slots:
            self.scheduler.release_unit(unit)
        with self._cond:
            self.dropped += 1
            self._cond.notify_all()

    def _finish(self, unit):
        self._updates.put(unit)

    def _executor_stopped(self):
        self.scheduler.stop_release()
        self.stager_out.stop()

    def _updater(self):
        pid = self.pilot.uid
        done = False
        while not done:
            batch = [self._updates.get()]
            while True:
                try:
                    batch.append(self._updates.get_nowait())
                except queue.Empty:
                    break
            docs = []
            with self._cond:
                for unit in batch:
                    if unit is STOP:
                        done = True
                        continue
                    self.states[unit.state.value] += 1
                    self.units[unit.uid] = unit
                    if unit.clone_of is None:
                        docs.append(unit.to_doc())
                self._cond.notify_all()
            if docs:
                try:
                    self.channel.push_updates(pid, docs)
                except (OSError, ConnectionError) as exc:
                    log.warning('cannot push %d update(s): %s', len(docs), exc)
        self.walls['stop'] = wall_us() / 1e6
        self.profiler.record(pid, 'agent', 'agent_stop')
        for comp in (self.stager_in, self.scheduler, self.executor, self.stager_out):
            comp.join(1.0)
        self._finished.set()


def run_agent(pilot: Pilot, config: AgentConfig, channel, profiler=NULL_PROFILER,
              sandbox_root=None) -> dict:
    return Agent(pilot, config, channel, profiler, sandbox_root).run()


# ------------------------------------------------------------------------------
# out-of-process bootstrap

def write_bootstrap(path, pilot: Pilot, config: AgentConfig, address,
                    sandbox_root, profile_dir=None, report_path=None) -> Path:
    path = Path(path)
    doc = {'pilot': pilot.to_doc(), 'config': config.to_doc(),
           'address': list(address), 'sandbox_root': str(sandbox_root),
           'profile_dir': None if profile_dir is None else str(profile_dir),
           'report': str(report_path or path.with_suffix('.report.json'))}
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))
    return path


def bootstrap(path) -> dict:
    from .channel import LoopbackChannelClient
    doc = json.loads(Path(path).read_text())
    pilot = Pilot.from_doc(doc['pilot'])
    config = AgentConfig.from_doc(doc['config'])
    profiler = Profiler(doc['profile_dir']) if doc.get('profile_dir') \
        else Profiler(enabled=False)
    try:
        client = LoopbackChannelClient(tuple(doc['address']))
    except OSError as exc:
        profiler.close()
        raise AgentBootstrapError('cannot reach channel at %s: %s'
                                  % (doc['address'], exc)) from exc
    try:
        report = run_agent(pilot, config, client, profiler, doc['sandbox_root'])
    finally:
        profiler.close()
        client.close()
    Path(doc['report']).write_text(json.dumps(report, sort_keys=True))
    return report


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) != 1:
        print('usage: python -m pilotrt.agent BOOTSTRAP.json', file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.WARNING)
    try:
        report = bootstrap(argv[0])
    except AgentBootstrapError as exc:
        print('agent bootstrap failed: %s' % exc, file=sys.stderr)
        return 3
    return 0 if report['conserved'] else 1


if __name__ == '__main__':
    sys.exit(main())
