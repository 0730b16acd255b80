"""Input and output staging on the local filesystem."""

from __future__ import annotations

import logging
import os
import queue
import shutil
import threading
from pathlib import Path
from typing import Callable, Optional

from .model import StagingMode, UnitState, advance
from .profiler import NULL_PROFILER

log = logging.getLogger(__name__)

# bytes of stdout / stderr kept on the unit
OUTPUT_TAIL = 1024


class StagingFailure(RuntimeError):
    def __init__(self, path, cause):
        self.path = path
        self.cause = cause
        super().__init__('staging %s failed: %s' % (path, cause))


def _resolve(path, base) -> Path:
    p = Path(path)
    return p if p.is_absolute() else Path(base) / p


def execute_directive(directive, sandbox, output: bool = False):
    """Perform one transfer; relative paths on the sandbox side use ``sandbox``."""
    if output:
        src = _resolve(directive.source, sandbox)
        dst = Path(directive.target).absolute()
    else:
        src = Path(directive.source).absolute()
        dst = _resolve(directive.target, sandbox)
    try:
        dst.parent.mkdir(parents=True, exist_ok=True)
        if directive.mode is StagingMode.COPY:
            shutil.copyfile(src, dst)
        elif directive.mode is StagingMode.LINK:
            if dst.is_symlink() or dst.exists():
                dst.unlink()
            os.symlink(src.absolute(), dst)
        else:
            shutil.move(str(src), str(dst))
    except OSError as exc:
        raise StagingFailure(src, exc) from exc


def _tail(path: Path) -> Optional[str]:
    try:
        with open(path, 'rb') as fh:
            fh.seek(0, os.SEEK_END)
            size = fh.tell()
            fh.seek(max(0, size - OUTPUT_TAIL))
            return fh.read().decode('utf-8', 'replace')
    except OSError:
        return None


def stage_in(unit, sandbox, profiler=NULL_PROFILER, component='stager_in',
             location='agent') -> bool:
    """Run the unit's input directives for ``location``.

    Returns False (and touches nothing) when there are none, leaving the
    staging state skipped.
    """
    directives = unit.description.directives(output=False, location=location)
    if not directives:
        return False
    state = UnitState.A_STAGING_IN if location == 'agent' else UnitState.UM_STAGING_IN
    advance(unit, state, profiler=profiler, component=component)
    Path(sandbox).mkdir(parents=True, exist_ok=True)
    unit.sandbox = str(sandbox)
    for i, d in enumerate(directives):
        execute_directive(d, sandbox, output=False)
        profiler.record(unit.uid, component, 'stage_directive', 'index=%d' % i)
    return True


def collect_output(unit, sandbox):
    sandbox = Path(sandbox)
    base = unit.uid
    # clones made after execution share their parent's output files
    if unit.clone_of and not (sandbox / ('%s.out' % base)).exists():
        base = unit.clone_of
    unit.stdout = _tail(sandbox / ('%s.out' % base))
    unit.stderr = _tail(sandbox / ('%s.err' % base))


def stage_out(unit, sandbox, profiler=NULL_PROFILER, component='stager_out',
              location='agent') -> bool:
    """Run the unit's output directives for ``location``; False if none."""
    directives = unit.description.directives(output=True, location=location)
    if not directives:
        return False
    state = UnitState.A_STAGING_OUT if location == 'agent' else UnitState.UM_STAGING_OUT
    advance(unit, state, profiler=profiler, component=component)
    for i, d in enumerate(directives):
        execute_directive(d, sandbox, output=True)
        profiler.record(unit.uid, component, 'stage_directive', 'index=%d' % i)
    return True


# ------------------------------------------------------------------------------

STOP = object()


class Stager:
    """``n_instances`` threads competing on one inbox.

    ``direction='in'`` runs agent-side input staging and passes units on via
    ``emit``.  ``direction='out'`` reads the unit's stdout/stderr, runs
    agent-side output staging and moves the unit to UM_STAGING_OUT or DONE
    before passing it on.  Failed units go to ``sink``.
    """

    def __init__(self, direction: str, emit: Callable, sink: Callable,
                 sandbox_root, n_instances: int = 1, profiler=NULL_PROFILER,
                 maxsize: int = 0, name: Optional[str] = None):
        if direction not in ('in', 'out'):
            raise ValueError('direction must be "in" or "out"')
        if n_instances < 1:
            raise ValueError('need at least one stager instance')
        self.direction = direction
        self.name = name or 'stager_%s' % direction
        self.n_instances = n_instances
        self.sandbox_root = Path(sandbox_root)
        self.profiler = profiler
        self.inbox: queue.Queue = queue.Queue(maxsize)
        self._emit = emit
        self._sink = sink
        self._threads = []
        self._remaining = 0
        self._lock = threading.Lock()
        self.on_stopped = None

    def start(self):
        self._remaining = self.n_instances
        for i in range(self.n_instances):
            t = threading.Thread(target=self._loop, args=('%s.%d' % (self.name, i),),
                                 name='%s.%d' % (self.name, i), daemon=True)
            self._threads.append(t)
            t.start()

    def stop(self):
        for _ in range(self.n_instances):
            self.inbox.put(STOP)

    def join(self, timeout=None):
        for t in self._threads:
            t.join(timeout)

    def sandbox_for(self, unit) -> Path:
        return Path(unit.sandbox) if unit.sandbox else self.sandbox_root / unit.uid

    def _loop(self, comp):
        try:
            while True:
                unit = self.inbox.get()
                if unit is STOP:
                    break
                try:
                    self._handle(unit, comp)
                except StagingFailure as exc:
                    unit.diagnostic = str(exc)
                    advance(unit, UnitState.FAILED, profiler=self.profiler,
                            component=comp, detail='staging failure')
                    self._sink(unit)
        finally:
            with self._lock:
                self._remaining -= 1
                last = self._remaining == 0
            if last and self.on_stopped is not None:
                self.on_stopped()

    def _handle(self, unit, comp):
        sandbox = self.sandbox_for(unit)
        if self.direction == 'in':
            if stage_in(unit, sandbox, self.profiler, comp):
                self.profiler.record(unit.uid, comp, 'stage_in_done')
            self._emit(unit)
            return
        collect_output(unit, sandbox)
        stage_out(unit, sandbox, self.profiler, comp)
        if unit.description.directives(output=True, location='client'):
            advance(unit, UnitState.UM_STAGING_OUT, profiler=self.profiler,
                    component=comp)
        else:
            advance(unit, UnitState.DONE, profiler=self.profiler, component=comp)
        self.profiler.record(unit.uid, comp, 'stage_out_done')
        self._emit(unit)
