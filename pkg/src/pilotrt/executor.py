"""The Agent's executor: launch commands, process spawning and monitoring.

Launch methods turn a unit plus its slots into a command line.  Two are
implemented: ``FORK`` (run the executable directly) and ``SHELL_WRAPPER``
(write a small ``/bin/sh`` script into the sandbox and run that).  The other
method names are registered so resource configurations can name them, but
invoking them raises :class:`Unsupported`.

Spawning is either ``direct`` (argv handed to the OS) or ``shell`` (the
command string is interpreted by ``/bin/sh -c``).  Completion is detected
through pidfds on one watcher thread per executor component, so running
processes cost no polling.
"""

from __future__ import annotations

import enum
import logging
import os
import queue
import selectors
import shlex
import signal
import subprocess
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

from .model import UnitState, advance, now_us
from .profiler import NULL_PROFILER

log = logging.getLogger(__name__)


class LaunchMethodId(str, enum.Enum):
    FORK = 'FORK'
    SHELL_WRAPPER = 'SHELL_WRAPPER'
    MPIRUN = 'MPIRUN'
    MPIEXEC = 'MPIEXEC'
    APRUN = 'APRUN'
    CCMRUN = 'CCMRUN'
    RUNJOB = 'RUNJOB'
    DPLACE = 'DPLACE'
    IBRUN = 'IBRUN'
    ORTE = 'ORTE'
    RSH = 'RSH'
    SSH = 'SSH'
    POE = 'POE'


class Unsupported(NotImplementedError):
    pass


class SpawnFailure(RuntimeError):
    pass


@dataclass
class LaunchCommand:
    argv: list
    command: str
    env: dict
    script_path: Optional[str] = None
    script_text: Optional[str] = None


@dataclass
class SpawnRecord:
    uid: str
    pid: int
    spawned: int
    completed: Optional[int] = None
    exit_code: Optional[int] = None


def slot_environment(unit, slots, sandbox) -> dict:
    env = {'PILOTRT_UNIT_ID': unit.uid,
           'PILOTRT_SANDBOX': str(sandbox),
           'PILOTRT_CORES': str(slots.total_cores),
           'PILOTRT_NODES': ','.join(slots.node_ids),
           'PILOTRT_SLOTS': ';'.join('%s:%s' % (n, ','.join(str(c) for c in cores))
                                     for n, cores in slots.nodes)}
    env.update({str(k): str(v) for k, v in unit.description.environment.items()})
    return env


def render_wrapper_script(uid: str, sandbox, env: dict, argv: list) -> str:
    lines = ['#!/bin/sh',
             '# launch wrapper for %s' % uid,
             'cd %s || exit 1' % shlex.quote(str(sandbox))]
    for key in sorted(env):
        lines.append('export %s=%s' % (key, shlex.quote(env[key])))
    lines.append('exec %s' % shlex.join(argv))
    return '\n'.join(lines) + '\n'


def _fork(unit, slots, sandbox) -> LaunchCommand:
    argv = [unit.description.executable] + [str(a) for a in unit.description.arguments]
    return LaunchCommand(argv, shlex.join(argv), slot_environment(unit, slots, sandbox))


def _shell_wrapper(unit, slots, sandbox) -> LaunchCommand:
    task = [unit.description.executable] + [str(a) for a in unit.description.arguments]
    env = slot_environment(unit, slots, sandbox)
    path = str(Path(sandbox) / ('%s.sh' % unit.uid))
    argv = ['/bin/sh', path]
    return LaunchCommand(argv, shlex.join(argv), env, path,
                         render_wrapper_script(unit.uid, sandbox, env, task))


def _stub(method):
    def launch(unit, slots, sandbox):
        raise Unsupported('launch method %s is not available on this host' % method)
    return launch


LAUNCH_METHODS = {m: _stub(m.value) for m in LaunchMethodId}
LAUNCH_METHODS[LaunchMethodId.FORK] = _fork
LAUNCH_METHODS[LaunchMethodId.SHELL_WRAPPER] = _shell_wrapper


def build_launch_command(unit, method, slots, sandbox=None) -> LaunchCommand:
    if slots is None:
        raise ValueError('%s has no slots assigned' % unit.uid)
    sandbox = sandbox or unit.sandbox or os.getcwd()
    return LAUNCH_METHODS[LaunchMethodId(method)](unit, slots, sandbox)


def spawn(unit, cmd: LaunchCommand, mechanism: str = 'direct',
          sandbox=None, base_env=None) -> subprocess.Popen:
    """Start the unit's process in its sandbox; stdout/stderr go to files."""
    sandbox = Path(sandbox or unit.sandbox)
    try:
        sandbox.mkdir(parents=True, exist_ok=True)
        if cmd.script_text is not None:
            Path(cmd.script_path).write_text(cmd.script_text)
        out = open(sandbox / ('%s.out' % unit.uid), 'wb')
        err = open(sandbox / ('%s.err' % unit.uid), 'wb')
    except OSError as exc:
        raise SpawnFailure('cannot prepare sandbox %s: %s' % (sandbox, exc)) from exc
    env = dict(os.environ if base_env is None else base_env)
    env.update(cmd.env)
    if mechanism == 'direct':
        args, shell = cmd.argv, False
    elif mechanism == 'shell':
        args, shell = cmd.command, True
    else:
        raise ValueError('unknown spawn mechanism %r' % mechanism)
    try:
        return subprocess.Popen(args, shell=shell, cwd=str(sandbox), env=env,
                                stdin=subprocess.DEVNULL, stdout=out, stderr=err,
                                close_fds=True, start_new_session=True)
    except OSError as exc:
        raise SpawnFailure('cannot spawn %s: %s' % (cmd.argv[0], exc)) from exc
    finally:
        out.close()
        err.close()


# ------------------------------------------------------------------------------

STOP = object()


class InstanceCrash(RuntimeError):
    pass


@dataclass
class _Running:
    unit: object
    proc: subprocess.Popen
    record: SpawnRecord
    pidfd: int
    killed: bool = False


class Executor:
    """Executor component with ``n_instances`` competing pickup threads.

    ``release(unit)`` hands freed cores back to the scheduler; ``emit(unit)``
    receives units in A_STAGING_OUT_PENDING; ``sink(unit)`` receives units
    that ended here (FAILED, CANCELED).
    """

    def __init__(self, emit: Callable, sink: Callable, release: Callable,
                 sandbox_root, n_instances: int = 1, mechanism: str = 'direct',
                 serial_method='FORK', mpi_method='SHELL_WRAPPER',
                 fail_on_nonzero: bool = True, profiler=NULL_PROFILER,
                 maxsize: int = 0, name: str = 'executor'):
        if n_instances < 1:
            raise ValueError('need at least one executor instance')
        self.n_instances = n_instances
        self.mechanism = mechanism
        self.serial_method = LaunchMethodId(serial_method)
        self.mpi_method = LaunchMethodId(mpi_method)
        self.fail_on_nonzero = fail_on_nonzero
        self.sandbox_root = Path(sandbox_root)
        self.profiler = profiler
        self.name = name
        self.inbox: queue.Queue = queue.Queue(maxsize)
        self.records: dict = {}
        self._emit = emit
        self._sink = sink
        self._release = release
        self._base_env = dict(os.environ)
        self._crash = set()
        self._alive = 0
        self._alive_lock = threading.Lock()
        self._threads = []
        self._running: dict = {}
        self._running_lock = threading.Lock()
        self._sel = selectors.DefaultSelector()
        self._wake_r, self._wake_w = os.pipe()
        os.set_blocking(self._wake_r, False)
        self._sel.register(self._wake_r, selectors.EVENT_READ, None)
        self._pending: list = []
        self._instances_done = threading.Event()
        self._kill_at: Optional[float] = None
        self._deadline = 5.0
        self.max_running = 0
        self.max_fds = 0
        self.on_stopped = None

    # --------------------------------------------------------------------------
    def start(self):
        self._alive = self.n_instances
        for i in range(self.n_instances):
            t = threading.Thread(target=self._instance, args=(i,),
                                 name='%s.%d' % (self.name, i), daemon=True)
            self._threads.append(t)
        self._watcher = threading.Thread(target=self._watch, daemon=True,
                                         name='%s.watcher' % self.name)
        for t in self._threads + [self._watcher]:
            t.start()

    def crash_instance(self, index: int):
        """Fault injection: instance ``index`` dies while handling its next unit."""
        self._crash.add(index)

    def stop(self, deadline: float = 5.0):
        """Drain the inbox, then wait up to ``deadline`` for running processes."""
        self._deadline = deadline
        with self._alive_lock:
            alive = self._alive
        for _ in range(max(alive, 1)):
            self.inbox.put(STOP)

    def join(self, timeout=None):
        for t in self._threads + [self._watcher]:
            t.join(timeout)

    def running_pids(self) -> list:
        with self._running_lock:
            return [r.proc.pid for r in self._running.values()]

    # --------------------------------------------------------------------------
    def sandbox_for(self, unit) -> Path:
        if unit.sandbox:
            return Path(unit.sandbox)
        return self.sandbox_root / unit.uid

    def _instance(self, index):
        comp = '%s.%d' % (self.name, index)
        try:
            while True:
                unit = self.inbox.get()
                if unit is STOP:
                    break
                try:
                    self._handle(unit, comp, index)
                except Exception as exc:
                    log.exception('%s crashed while handling %s', comp, unit.uid)
                    unit.diagnostic = '%s crashed: %s' % (comp, exc)
                    self._fail(unit, comp, 'instance crash')
                    return
        finally:
            with self._alive_lock:
                self._alive -= 1
                last = self._alive == 0
            if last:
                self._instances_done.set()
                self._wake()

    def _handle(self, unit, comp, index):
        self.profiler.record(unit.uid, comp, 'exec_pickup')
        if index in self._crash:
            self._crash.discard(index)
            raise InstanceCrash('injected fault')
        sandbox = self.sandbox_for(unit)
        unit.sandbox = str(sandbox)
        method = self.mpi_method if unit.description.mpi else self.serial_method
        try:
            cmd = build_launch_command(unit, method, unit.slots, sandbox)
            proc = spawn(unit, cmd, self.mechanism, sandbox, self._base_env)
        except (SpawnFailure, Unsupported) as exc:
            unit.diagnostic = str(exc)
            self._fail(unit, comp, 'spawn failure')
            return
        pidfd = os.pidfd_open(proc.pid)
        ts = now_us()
        advance(unit, UnitState.A_EXECUTING, clock=lambda: ts,
                profiler=self.profiler, component=comp,
                detail='cores=%d;pid=%d' % (unit.description.cores, proc.pid))
        rec = SpawnRecord(unit.uid, proc.pid, ts)
        self.records[unit.uid] = rec
        with self._running_lock:
            self._pending.append(_Running(unit, proc, rec, pidfd))
        self._wake()

    def _fail(self, unit, comp, why):
        self._release(unit)
        advance(unit, UnitState.FAILED, profiler=self.profiler, component=comp,
                detail=why)
        self._sink(unit)

    def _wake(self):
        try:
            os.write(self._wake_w, b'x')
        except OSError:
            pass

    # --------------------------------------------------------------------------
    def _watch(self):
        comp = '%s.watcher' % self.name
        while True:
            timeout = None
            if self._instances_done.is_set():
                timeout = max(0.0, self._arm_deadline() - time.monotonic())
            for key, _ in self._sel.select(timeout):
                if key.data is None:
                    try:
                        while os.read(self._wake_r, 4096):
                            pass
                    except BlockingIOError:
                        pass
                else:
                    self._reap(key.data, comp)
            with self._running_lock:
                pending, self._pending = self._pending, []
                for r in pending:
                    self._running[r.unit.uid] = r
                    self._sel.register(r.pidfd, selectors.EVENT_READ, r)
                nrun = len(self._running)
                self.max_running = max(self.max_running, nrun)
            if self._instances_done.is_set():
                self._fail_orphans(comp)
                if not nrun:
                    break
                if time.monotonic() >= self._arm_deadline():
                    self._kill_all(comp)
        self._sel.close()
        os.close(self._wake_r)
        os.close(self._wake_w)
        if self.on_stopped is not None:
            self.on_stopped()

    def _arm_deadline(self) -> float:
        if self._kill_at is None:
            self._kill_at = time.monotonic() + self._deadline
        return self._kill_at

    def _reap(self, r: _Running, comp):
        rc = r.proc.wait()
        ts = now_us()
        self._sel.unregister(r.pidfd)
        os.close(r.pidfd)
        with self._running_lock:
            self._running.pop(r.unit.uid, None)
        try:
            self.max_fds = max(self.max_fds, len(os.listdir('/proc/self/fd')))
        except OSError:
            pass
        unit = r.unit
        r.record.completed = ts
        r.record.exit_code = rc
        self.profiler.record(unit.uid, comp, 'exec_stop', 'exit=%d' % rc, ts=ts)
        if r.killed:
            self._release(unit)
            advance(unit, UnitState.CANCELED, profiler=self.profiler,
                    component=comp, detail='killed at shutdown')
            self._sink(unit)
            return
        unit.exit_code = rc
        if rc != 0 and self.fail_on_nonzero:
            unit.diagnostic = 'exit code %d' % rc
            self._release(unit)
            advance(unit, UnitState.FAILED, profiler=self.profiler,
                    component=comp, detail='exit=%d' % rc)
            self._sink(unit)
            return
        advance(unit, UnitState.A_STAGING_OUT_PENDING, profiler=self.profiler,
                component=comp)
        self._release(unit)
        self._emit(unit)

    def _fail_orphans(self, comp):
        # units left in the inbox when every instance has died
        while True:
            try:
                unit = self.inbox.get_nowait()
            except queue.Empty:
                return
            if unit is not STOP:
                unit.diagnostic = 'no executor instance left'
                self._fail(unit, comp, 'no executor')

    def _kill_all(self, comp):
        with self._running_lock:
            running = list(self._running.values())
        for r in running:
            if r.killed:
                continue
            r.killed = True
            try:
                os.killpg(r.proc.pid, signal.SIGKILL)
            except ProcessLookupError:
                pass
        log.info('%s killed %d process(es) at shutdown', comp, len(running))
