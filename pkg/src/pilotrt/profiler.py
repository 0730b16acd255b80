"""Event recording and the offline analyzer.

Every state transition and component action can be recorded as a
:class:`ProfileEvent`.  Events are buffered per component and written by a
background thread to ``<dir>/<component>.prof``, one event per line::

    ts_mono,ts_wall,uid,component,label,detail

Timestamps are seconds with exactly six decimals (microsecond ticks), so a
file round-trips to the same integers it was written from.  The analyzer
functions take either a list of events or a profile directory.
"""

from __future__ import annotations

import collections
import logging
import math
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .model import AGENT_STATES, UNIT_STATE_ORDER, UnitState, now_us, wall_us

log = logging.getLogger(__name__)

UNIT_STATE_LABELS = frozenset(s.value for s in UnitState)
AGENT_STATE_LABELS = frozenset(s.value for s in AGENT_STATES)
FINAL_LABELS = frozenset({'DONE', 'CANCELED', 'FAILED'})
_STATE_RANK = {s.value: r for s, r in UNIT_STATE_ORDER.items()}

# label that marks "one unit handled" for each component, used by
# throughput_series
COMPLETION_LABELS = {
    'scheduler': 'schedule_ok',
    'executor': 'A_EXECUTING',
    'stager_in': 'stage_in_done',
    'stager_out': 'stage_out_done',
}


class EmptyLog(ValueError):
    """The event log holds nothing the requested metric can be computed from."""


def format_ts(us: int) -> str:
    return '%d.%06d' % divmod(us, 1_000_000)


def parse_ts(text: str) -> int:
    sec, _, frac = text.partition('.')
    return int(sec) * 1_000_000 + int(frac.ljust(6, '0')[:6] or 0)


@dataclass(frozen=True, order=True)
class ProfileEvent:
    ts: int                  # monotonic, microseconds
    wall: int                # wall clock, microseconds
    uid: str
    component: str
    label: str
    detail: str = ''

    def to_line(self) -> str:
        return '%s,%s,%s,%s,%s,%s\n' % (format_ts(self.ts), format_ts(self.wall),
                                        self.uid, self.component, self.label,
                                        self.detail)

    @classmethod
    def from_line(cls, line: str) -> 'ProfileEvent':
        ts, wall, uid, comp, label, detail = line.rstrip('\n').split(',', 5)
        return cls(parse_ts(ts), parse_ts(wall), uid, comp, label, detail)

    def detail_value(self, key: str, default=None):
        for item in self.detail.split(';'):
            k, _, v = item.partition('=')
            if k == key:
                return v
        return default


def _clean(text: str) -> str:
    return str(text).replace(',', ';').replace('\n', ' ')


# ------------------------------------------------------------------------------

class Profiler:
    """Non-blocking event recorder.

    With ``path=None`` events are only kept in memory; otherwise they are
    flushed asynchronously to per-component files under ``path``.  A disabled
    profiler records nothing and creates no files.
    """

    def __init__(self, path=None, enabled: bool = True,
                 buffer_size: int = 1_000_000, flush_interval: float = 0.25,
                 keep_in_memory: Optional[bool] = None):
        self.enabled = enabled
        self.path = Path(path) if path is not None else None
        self.buffer_size = buffer_size
        self.flush_interval = flush_interval
        self.keep_in_memory = (self.path is None) if keep_in_memory is None \
            else keep_in_memory
        self.dropped = 0
        self._buffers: dict = {}
        self._buffers_lock = threading.Lock()
        self._memory: list = []
        self._files: dict = {}
        self._stop = threading.Event()
        self._flush_lock = threading.Lock()
        self._thread = None
        if self.enabled and self.path is not None:
            self.path.mkdir(parents=True, exist_ok=True)
            self._thread = threading.Thread(target=self._flush_loop,
                                            name='profiler-flush', daemon=True)
            self._thread.start()

    # --------------------------------------------------------------------------
    def record(self, uid: str, component: str, label: str, detail: str = '',
               ts: Optional[int] = None):
        if not self.enabled:
            return
        event = ProfileEvent(now_us() if ts is None else ts, wall_us(),
                             _clean(uid), _clean(component), _clean(label),
                             _clean(detail))
        self.record_event(event)

    def record_event(self, event: ProfileEvent):
        if not self.enabled:
            return
        buf = self._buffers.get(event.component)
        if buf is None:
            with self._buffers_lock:
                buf = self._buffers.setdefault(event.component,
                                               collections.deque())
        if len(buf) >= self.buffer_size:
            self.dropped += 1
            return
        buf.append(event)

    # --------------------------------------------------------------------------
    def flush(self):
        with self._flush_lock:
            for comp, buf in list(self._buffers.items()):
                batch = []
                while buf:
                    batch.append(buf.popleft())
                if not batch:
                    continue
                if self.keep_in_memory:
                    self._memory.extend(batch)
                if self.path is not None and self.enabled:
                    self._write(comp, batch)

    def _write(self, comp, batch):
        try:
            fh = self._files.get(comp)
            if fh is None:
                fh = open(self.path / ('%s.prof' % comp), 'a')
                self._files[comp] = fh
            fh.write(''.join(e.to_line() for e in batch))
            fh.flush()
        except OSError as exc:
            log.warning('profiling disabled: cannot write %s (%s)', self.path, exc)
            self.enabled = False

    def _flush_loop(self):
        while not self._stop.wait(self.flush_interval):
            self.flush()

    def close(self):
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
        self.flush()
        for fh in self._files.values():
            try:
                fh.close()
            except OSError:
                pass
        self._files.clear()

    def events(self) -> list:
        """All recorded events, sorted by time."""
        self.flush()
        if self.keep_in_memory:
            return sorted(self._memory)
        if self.path is None:
            return []
        for fh in self._files.values():
            fh.flush()
        return read_profiles(self.path)


NULL_PROFILER = Profiler(enabled=False)


def read_profiles(path) -> list:
    """Read every ``*.prof`` file under ``path`` into one sorted event list."""
    events = []
    for f in sorted(Path(path).glob('*.prof')):
        with open(f) as fh:
            for line in fh:
                if line.strip():
                    events.append(ProfileEvent.from_line(line))
    events.sort()
    return events


def load_events(source) -> list:
    if isinstance(source, (str, os.PathLike)):
        return read_profiles(source)
    if isinstance(source, Profiler):
        return source.events()
    return sorted(source)


def events_from_units(units: Iterable) -> list:
    """Synthesize state events from unit histories (profiling-off fallback)."""
    out = []
    for u in units:
        cores = 'cores=%d' % u.description.cores
        for state, ts in u.state_history:
            detail = cores if state is UnitState.A_EXECUTING else ''
            out.append(ProfileEvent(ts, 0, u.uid, 'history', state.value, detail))
    out.sort()
    return out


# ------------------------------------------------------------------------------
# analysis

def _by_uid(events, labels=None) -> dict:
    groups = collections.defaultdict(list)
    for e in events:
        if labels is None or e.label in labels:
            groups[e.uid].append(e)
    for evs in groups.values():
        # same-microsecond state events keep their lifecycle order
        evs.sort(key=lambda e: (e.ts, _STATE_RANK.get(e.label, -1), e))
    return groups


_EXIT_LABELS = UNIT_STATE_LABELS | {'drop'}


def agent_span(events) -> tuple:
    """(start, end) in microseconds of agent-side activity.

    Start is the first entry into any agent-side state (A_STAGING_IN, or the
    first agent state reached when staging is skipped); end is the last exit
    from an agent-side state.
    """
    events = load_events(events)
    start = None
    end = None
    for uid, evs in _by_uid(events, _EXIT_LABELS).items():
        inside = False
        for e in evs:
            if e.label in AGENT_STATE_LABELS:
                if start is None or e.ts < start:
                    start = e.ts
                inside = True
            elif inside:
                end = e.ts if end is None else max(end, e.ts)
                inside = False
        if inside:
            last = evs[-1].ts
            end = last if end is None else max(end, last)
    if start is None:
        raise EmptyLog('no agent-side unit events in log')
    return start, end


def compute_ttc_a(events) -> float:
    """Agent-side time to completion in seconds."""
    start, end = agent_span(events)
    return (end - start) / 1e6


def executing_intervals(events) -> list:
    """(uid, start_us, end_us, cores) for every unit that entered A_EXECUTING."""
    events = load_events(events)
    if not events:
        return []
    horizon = events[-1].ts
    out = []
    for uid, evs in _by_uid(events, _EXIT_LABELS).items():
        start = None
        cores = 1
        for e in evs:
            if start is None:
                if e.label == 'A_EXECUTING':
                    start = e.ts
                    cores = int(e.detail_value('cores', 1))
            elif e.label != 'A_EXECUTING':
                out.append((uid, start, e.ts, cores))
                start = None
        if start is not None:
            out.append((uid, start, horizon, cores))
    return out


def _step_series(deltas) -> list:
    deltas.sort()
    series = []
    level = 0
    for t, d in deltas:
        level += d
        if series and series[-1][0] == t:
            series[-1] = (t, level)
        else:
            series.append((t, level))
    return series


def concurrency_series(events, weighted: bool = False) -> list:
    """Step series ``[(t_us, n), ...]`` of units (or cores) in A_EXECUTING.

    The value holds from its timestamp until the next entry.
    """
    deltas = []
    for _, s, e, cores in executing_intervals(events):
        w = cores if weighted else 1
        deltas.append((s, w))
        deltas.append((e, -w))
    return _step_series(deltas)


def busy_core_series(events) -> list:
    """Step series of scheduler-held cores, from allocation to release."""
    events = load_events(events)
    deltas = []
    for e in events:
        if e.label == 'schedule_ok':
            deltas.append((e.ts, int(e.detail_value('cores', 1))))
        elif e.label == 'unschedule':
            deltas.append((e.ts, -int(e.detail_value('cores', 1))))
    return _step_series(deltas)


def integrate_steps(series, t0: int, t1: int) -> int:
    """Integral (value x microseconds) of a step series over [t0, t1]."""
    total = 0
    for (ta, va), (tb, _) in zip(series, series[1:] + [(t1, 0)]):
        lo, hi = max(ta, t0), min(tb, t1)
        if hi > lo:
            total += va * (hi - lo)
    return total


def compute_utilization(events, cores: int) -> float:
    """Fraction of pilot core-time spent executing units during ttc_a."""
    events = load_events(events)
    t0, t1 = agent_span(events)
    if t1 <= t0:
        raise EmptyLog('zero-length agent span')
    used = integrate_steps(concurrency_series(events, weighted=True), t0, t1)
    return used / (cores * (t1 - t0))


def plateaus(series, min_duration_us: int, min_level: int = 1) -> list:
    """Maximal constant-level stretches lasting at least ``min_duration_us``.

    Returns ``[(t_start, t_end, level), ...]``.
    """
    out = []
    for (ta, va), (tb, _) in zip(series, series[1:]):
        if va >= min_level and tb - ta >= min_duration_us:
            out.append((ta, tb, va))
    return out


def zero_troughs(series, t0: Optional[int] = None, t1: Optional[int] = None) -> list:
    """Intervals strictly inside (t0, t1) where the series drops to zero."""
    if not series:
        return []
    t0 = series[0][0] if t0 is None else t0
    t1 = series[-1][0] if t1 is None else t1
    out = []
    for (ta, va), (tb, _) in zip(series, series[1:]):
        if va == 0 and ta > t0 and tb < t1:
            out.append((ta, tb))
    return out


def _matches(comp: str, name: str) -> bool:
    return comp == name or comp.startswith(name + '.')


def throughput_series(events, component: str, window: float = 1.0,
                      label: Optional[str] = None) -> list:
    """Units handled per second by ``component`` in fixed windows.

    Returns ``[(t_start_s, rate), ...]`` with ``t`` relative to the first
    handled unit.  The last window is normalized by the time it actually
    covers.
    """
    events = load_events(events)
    label = label or COMPLETION_LABELS.get(component)
    if label is None:
        raise KeyError('no completion label known for %r' % component)
    ts = np.array([e.ts for e in events
                   if e.label == label and _matches(e.component, component)],
                  dtype=np.int64)
    if ts.size == 0:
        raise EmptyLog('no %r events from %r' % (label, component))
    w = int(round(window * 1e6))
    rel = ts - ts.min()
    counts = np.bincount(rel // w)
    span = int(rel.max())
    series = []
    for k, c in enumerate(counts):
        covered = min(w, span - k * w) if k == len(counts) - 1 else w
        covered = max(covered, 1)
        series.append((k * window, c / (covered / 1e6)))
    return series


def steady_window(events, component: str, label: Optional[str] = None,
                  min_windows: int = 10, window: float = 1.0) -> float:
    """``window`` unless the run is too short to give ``min_windows`` of them.

    Short runs get span / min_windows, rounded down to two significant digits.
    """
    events = load_events(events)
    label = label or COMPLETION_LABELS.get(component)
    ts = [e.ts for e in events if e.label == label and _matches(e.component, component)]
    if len(ts) < 2:
        return window
    span = (max(ts) - min(ts)) / 1e6
    if span >= min_windows * window:
        return window
    w = span / min_windows
    if w <= 0:
        return window
    scale = 10 ** (math.floor(math.log10(w)) - 1)
    return max(math.floor(w / scale) * scale, 1e-3)


@dataclass
class RateSummary:
    mean: float
    stdev: float
    cv: float
    windows: int
    overall: float

    def __str__(self):
        return '[%.0f +/- %.0f]/s' % (self.mean, self.stdev)


def rate_summary(series, total: Optional[int] = None, span_s: Optional[float] = None,
                 warmup: int = 1) -> RateSummary:
    """Steady-state rate over interior windows (warm-up and tail dropped)."""
    rates = np.array([r for _, r in series], dtype=float)
    interior = rates[warmup:-1] if len(rates) > warmup + 1 else rates[:-1]
    if interior.size == 0:
        interior = rates
    mean = float(interior.mean())
    std = float(interior.std(ddof=1)) if interior.size > 1 else 0.0
    overall = (total / span_s) if total and span_s else mean
    return RateSummary(mean, std, std / mean if mean else float('inf'),
                       int(interior.size), overall)


# ------------------------------------------------------------------------------

@dataclass
class Phases:
    """Per-unit phases between entering A_SCHEDULING and core release (µs)."""

    uid: str
    scheduling: int
    pickup: int
    spawn: int
    runtime: int
    unschedule: int
    held: int                  # allocation -> release, cores BUSY
    cores: int = 1

    @property
    def occupation(self) -> int:
        return (self.scheduling + self.pickup + self.spawn + self.runtime
                + self.unschedule)

    @property
    def overhead(self) -> int:
        return self.occupation - self.runtime


def occupation_decomposition(events) -> dict:
    """Split each unit's core occupation into its chronological phases.

    Only units with the complete event chain (A_SCHEDULING,
    A_EXECUTING_PENDING, exec_pickup, A_EXECUTING, exec_stop, unschedule)
    are decomposed.
    """
    events = load_events(events)
    if not events:
        raise EmptyLog('empty log')
    needed = ('A_SCHEDULING', 'schedule_ok', 'A_EXECUTING_PENDING',
              'exec_pickup', 'A_EXECUTING', 'exec_stop', 'unschedule')
    out = {}
    for uid, evs in _by_uid(events, set(needed)).items():
        first = {}
        for e in evs:
            first.setdefault(e.label, e)
        if any(k not in first for k in needed):
            continue
        t = {k: first[k].ts for k in needed}
        out[uid] = Phases(uid,
                          scheduling=t['A_EXECUTING_PENDING'] - t['A_SCHEDULING'],
                          pickup=t['exec_pickup'] - t['A_EXECUTING_PENDING'],
                          spawn=t['A_EXECUTING'] - t['exec_pickup'],
                          runtime=t['exec_stop'] - t['A_EXECUTING'],
                          unschedule=t['unschedule'] - t['exec_stop'],
                          held=t['unschedule'] - t['schedule_ok'],
                          cores=int(first['schedule_ok'].detail_value('cores', 1)))
    return out


def release_minus_schedule(events) -> dict:
    """Per unit: release time minus A_SCHEDULING entry (µs)."""
    out = {}
    for uid, evs in _by_uid(load_events(events), {'A_SCHEDULING', 'unschedule'}).items():
        first = {}
        for e in evs:
            first.setdefault(e.label, e.ts)
        if len(first) == 2:
            out[uid] = first['unschedule'] - first['A_SCHEDULING']
    return out


# ------------------------------------------------------------------------------

@dataclass
class MetricsReport:
    ttc_a: float
    ttc: Optional[float]
    utilization: float
    concurrency: list = field(default_factory=list)
    throughput: dict = field(default_factory=dict)
    decomposition: dict = field(default_factory=dict)
    t0: int = 0


def analyze(events, cores: int, ttc: Optional[float] = None,
            components=('scheduler', 'executor', 'stager_in', 'stager_out')) -> MetricsReport:
    events = load_events(events)
    t0, _ = agent_span(events)
    conc = [((t - t0) / 1e6, n) for t, n in concurrency_series(events)]
    thr = {}
    for c in components:
        try:
            thr[c] = throughput_series(events, c)
        except EmptyLog:
            pass
    return MetricsReport(ttc_a=compute_ttc_a(events), ttc=ttc,
                         utilization=compute_utilization(events, cores),
                         concurrency=conc, throughput=thr,
                         decomposition=occupation_decomposition(events), t0=t0)
