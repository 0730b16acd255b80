"""Client-side managers: pilots, units, and the barrier scenarios.

:class:`PilotManager` submits pilot jobs to a simulated resource manager
and starts an Agent for each pilot once it is active.  :class:`UnitManager`
holds submitted units until some pilot is active, binds them to pilots
(round-robin by default) and pushes them into the workload channel; a
dedicated thread merges the agents' state updates back into its units.

Document schema
---------------
Units and pilots travel as JSON-compatible dicts tagged with
``"schema": "pilotrt.unit/1"`` or ``"pilotrt.pilot/1"``.  Unit documents
carry ``uid, pilot, description, state, state_history, exit_code, sandbox,
stdout, stderr, diagnostic, clone_of``; the description holds
``executable, arguments, cores, mpi, environment, input_staging,
output_staging, name``.  ``state_history`` is a list of ``[state, t_us]``.
"""

from __future__ import annotations

import collections
import enum
import itertools
import json
import logging
import os
import subprocess
import sys
import tempfile
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from .agent import Agent, AgentBootstrapError, AgentConfig, write_bootstrap
from .channel import LoopbackChannelServer, WorkloadChannel
from .model import (FINAL_PILOT_STATES, UNIT_STATE_ORDER,
                    Pilot, PilotDescription, PilotState, Unit, UnitState,
                    advance, now_us)
from .profiler import (NULL_PROFILER, Profiler, analyze,
                       concurrency_series, events_from_units, load_events,
                       agent_span, zero_troughs)
from .resource import CapacityExceeded, ResourceManager, load_resource_config
from .stager import StagingFailure, execute_directive, stage_in
from .workload import WorkloadSpec

log = logging.getLogger(__name__)

# sleep tasks are idle, so a desk machine can host more slots than cores
OVERSUBSCRIPTION = 8


def desk_scale_cores() -> int:
    return (os.cpu_count() or 1) * OVERSUBSCRIPTION


# ------------------------------------------------------------------------------
# pilots

class PilotManager:
    """Launch pilots on simulated resources and run one Agent per pilot."""

    def __init__(self, session_dir=None, channel: Optional[WorkloadChannel] = None,
                 profiler=NULL_PROFILER, resources: Optional[dict] = None,
                 agent_config: Optional[AgentConfig] = None,
                 out_of_process: bool = False):
        self.session_dir = Path(session_dir or tempfile.mkdtemp(prefix='pilotrt-'))
        self.channel = channel or WorkloadChannel(profiler=profiler)
        self.profiler = profiler
        self.agent_config = agent_config
        self.out_of_process = out_of_process
        self._configs = dict(resources or {})
        self._rms: dict = {}
        self._lock = threading.RLock()
        self._cond = threading.Condition(self._lock)
        self.pilots: dict = {}
        self._handles: dict = {}
        self._agents: dict = {}
        self._runners: dict = {}
        self._timers: dict = {}
        self._final: dict = {}
        self.reports: dict = {}
        self._callbacks: list = []
        self._server: Optional[LoopbackChannelServer] = None

    def register_callback(self, fn: Callable):
        """``fn(pilot, state)`` is called after every pilot state change."""
        self._callbacks.append(fn)

    def _notify(self, pilot):
        with self._cond:
            self._cond.notify_all()
        for fn in list(self._callbacks):
            try:
                fn(pilot, pilot.state)
            except Exception:
                log.exception('pilot callback failed')

    def _advance(self, pilot, state, detail=''):
        with self._lock:
            if pilot.is_final:
                return False
            advance(pilot, state, profiler=self.profiler, component='pmgr',
                    detail=detail)
        self._notify(pilot)
        return True

    def resource_manager(self, resource_id: str) -> ResourceManager:
        with self._lock:
            rm = self._rms.get(resource_id)
            if rm is None:
                cfg = self._configs.get(resource_id)
                if cfg is None:
                    cfg = load_resource_config(resource_id)
                    self._configs[resource_id] = cfg
                rm = self._rms[resource_id] = ResourceManager(cfg)
            return rm

    # --------------------------------------------------------------------------
    def submit_pilots(self, descs) -> list:
        if isinstance(descs, PilotDescription):
            descs = [descs]
        out = []
        for desc in descs:
            pilot = Pilot(desc)
            self.profiler.record(pilot.uid, 'pmgr', 'NEW', ts=pilot.state_history[0][1])
            with self._lock:
                self.pilots[pilot.uid] = pilot
            out.append(pilot)
            try:
                desc.validate()
                rm = self.resource_manager(desc.resource_id)
                self._advance(pilot, PilotState.PM_LAUNCH)
                self._handles[pilot.uid] = rm.submit_pilot_job(
                    desc, lambda h, layout, p=pilot: self._activated(p, h, layout))
            except (ValueError, KeyError, CapacityExceeded) as exc:
                pilot.diagnostic = str(exc)
                self._advance(pilot, PilotState.FAILED, 'submission failed')
        return out

    def _activated(self, pilot, handle, layout):
        rm = self.resource_manager(pilot.description.resource_id)
        with self._lock:
            if pilot.is_final:
                rm.release_pilot_job(handle)
                return
            pilot.nodes = layout
        config = self.agent_config or AgentConfig.from_resource(rm.config)
        sandbox = self.session_dir / pilot.uid
        try:
            if self.out_of_process:
                agent = None
                if config.scheduler == 'torus' and not layout.topology.is_torus:
                    raise AgentBootstrapError('torus scheduler needs a torus layout')
            else:
                agent = Agent(pilot, config, self.channel, self.profiler, sandbox)
        except AgentBootstrapError as exc:
            pilot.diagnostic = str(exc)
            self._advance(pilot, PilotState.FAILED, 'agent bootstrap failed')
            rm.release_pilot_job(handle)
            return
        runner = threading.Thread(target=self._run_agent,
                                  args=(pilot, agent, config, sandbox, handle),
                                  name='pmgr.%s' % pilot.uid, daemon=True)
        with self._lock:
            self._agents[pilot.uid] = agent
            self._runners[pilot.uid] = runner
        # the agent exists before the pilot is announced active
        if agent is not None:
            agent.start()
        runner.start()
        timer = threading.Timer(pilot.description.runtime, self.terminate,
                                args=(pilot.uid, PilotState.DONE, False))
        timer.daemon = True
        self._timers[pilot.uid] = timer
        timer.start()
        self._advance(pilot, PilotState.P_ACTIVE,
                      'nodes=%d' % len(layout.node_ids))

    def _run_agent(self, pilot, agent, config, sandbox, handle):
        rm = self.resource_manager(pilot.description.resource_id)
        report = None
        failed = None
        try:
            if agent is not None:
                agent.join()
                report = agent.report()
            else:
                report = self._run_out_of_process(pilot, config, sandbox)
        except Exception as exc:
            log.exception('agent for %s failed', pilot.uid)
            failed = str(exc)
        self.reports[pilot.uid] = report
        timer = self._timers.pop(pilot.uid, None)
        if timer is not None:
            timer.cancel()
        if failed is not None:
            pilot.diagnostic = failed
            self._advance(pilot, PilotState.FAILED, 'agent failed')
        else:
            state = self._final.get(pilot.uid, PilotState.DONE)
            self._advance(pilot, state)
        try:
            rm.release_pilot_job(handle)
        except KeyError:
            pass

    def _run_out_of_process(self, pilot, config, sandbox):
        with self._lock:
            if self._server is None:
                self._server = LoopbackChannelServer(self.channel)
        sandbox.mkdir(parents=True, exist_ok=True)
        path = write_bootstrap(sandbox / 'bootstrap.json', pilot, config,
                               self._server.address, sandbox,
                               getattr(self.profiler, 'path', None)
                               if self.profiler.enabled else None)
        proc = subprocess.run([sys.executable, '-m', 'pilotrt.agent', str(path)],
                              stdout=subprocess.PIPE, stderr=subprocess.PIPE)
        if proc.returncode not in (0, 1):
            raise AgentBootstrapError('agent process exited %d: %s'
                                      % (proc.returncode,
                                         proc.stderr.decode(errors='replace')[-500:]))
        return json.loads(path.with_suffix('.report.json').read_text())

    # --------------------------------------------------------------------------
    def terminate(self, uid: str, state: PilotState = PilotState.DONE,
                  wait: bool = True, timeout: Optional[float] = None):
        """End a pilot: its agent drains and the pilot moves to ``state``."""
        with self._lock:
            pilot = self.pilots[uid]
            if pilot.is_final:
                return pilot
            self._final.setdefault(uid, state)
            runner = self._runners.get(uid)
        if runner is None:
            # still queued at the resource manager; it never ran, so it cannot be DONE
            if state is PilotState.DONE:
                state = PilotState.CANCELED
            handle = self._handles.get(uid)
            if handle is not None:
                try:
                    self.resource_manager(pilot.description.resource_id) \
                        .release_pilot_job(handle)
                except KeyError:
                    pass
            self._advance(pilot, state)
            return pilot
        self.channel.request_shutdown(uid)
        agent = self._agents.get(uid)
        if agent is not None:
            agent.stop()
        if wait:
            runner.join(timeout)
        return pilot

    def wait_pilots(self, uids=None, states=FINAL_PILOT_STATES,
                    timeout: Optional[float] = None) -> bool:
        """Wait until every pilot is in (or past) one of ``states``."""
        states = set(states)

        def reached():
            pilots = [self.pilots[u] for u in (uids or list(self.pilots))]
            return all(p.state in states or p.is_final for p in pilots)

        with self._cond:
            return self._cond.wait_for(reached, timeout)

    def agent(self, uid: str) -> Optional[Agent]:
        return self._agents.get(uid)

    def close(self):
        for uid in list(self.pilots):
            self.terminate(uid, PilotState.CANCELED)
        with self._lock:
            for rm in self._rms.values():
                rm.close()
            if self._server is not None:
                self._server.close()
                self._server = None


# ------------------------------------------------------------------------------
# units

class RoundRobin:
    """Bind units to active pilots in turn."""

    def __init__(self):
        self._counter = itertools.count()

    def pick(self, unit, pilots: list):
        return pilots[next(self._counter) % len(pilots)]


class UnitManager:
    """Late binding of units to active pilots through the workload channel."""

    def __init__(self, channel: WorkloadChannel, profiler=NULL_PROFILER,
                 policy=None, session_dir=None):
        self.channel = channel
        self.profiler = profiler
        self.policy = policy or RoundRobin()
        self.session_dir = Path(session_dir or tempfile.mkdtemp(prefix='pilotrt-'))
        self.units: dict = {}
        self._pilots: list = []
        self._held: list = []
        self._seen: set = set()
        self._lock = threading.RLock()
        self._cond = threading.Condition(self._lock)
        self._bind_lock = threading.Lock()
        self._callbacks: list = []
        self._stop = threading.Event()
        self.updates_merged = 0
        self.updates_ignored = 0
        self._thread = threading.Thread(target=self._update_loop, name='umgr.updater',
                                        daemon=True)
        self._thread.start()

    def register_callback(self, fn: Callable):
        """``fn(unit, state)`` is called after every merged state change."""
        self._callbacks.append(fn)

    def add_pilot_manager(self, pm: PilotManager):
        pm.register_callback(self._pilot_changed)
        for p in list(pm.pilots.values()):
            self._pilot_changed(p, p.state)

    def add_pilot(self, pilot: Pilot):
        self._pilot_changed(pilot, pilot.state)

    def _pilot_changed(self, pilot, state):
        with self._lock:
            if state is PilotState.P_ACTIVE:
                if pilot not in self._pilots:
                    self._pilots.append(pilot)
                held, self._held = self._held, []
            else:
                if state in FINAL_PILOT_STATES and pilot in self._pilots:
                    self._pilots.remove(pilot)
                return
        self._bind(held, bulk=True)

    # --------------------------------------------------------------------------
    def submit_units(self, descs, bulk: bool = True) -> list:
        """Create units and bind them once a pilot is active.

        Invalid descriptions yield FAILED units; the rest are unaffected.
        ``bulk=False`` pushes units one at a time.
        """
        out = []
        valid = []
        for desc in descs:
            unit = Unit(desc)
            self.profiler.record(unit.uid, 'umgr', 'NEW', ts=unit.state_history[0][1])
            with self._lock:
                self.units[unit.uid] = unit
            out.append(unit)
            try:
                desc.validate()
            except ValueError as exc:
                unit.diagnostic = str(exc)
                self._set_final(unit, UnitState.FAILED, 'invalid description')
                continue
            advance(unit, UnitState.UM_SCHEDULING, profiler=self.profiler,
                    component='umgr')
            valid.append(unit)
        with self._lock:
            if not self._pilots:
                self._held.extend(valid)
                return out
        self._bind(valid, bulk)
        return out

    def _bind(self, units, bulk):
        if not units:
            return
        per_pilot = collections.defaultdict(list)
        with self._bind_lock:
            with self._lock:
                pilots = list(self._pilots)
                if not pilots:
                    self._held.extend(units)
                    return
                for unit in units:
                    pilot = self.policy.pick(unit, pilots)
                    unit.pilot = pilot.uid
                    unit.sandbox = str(self.session_dir / pilot.uid / unit.uid)
                    per_pilot[pilot.uid].append(unit)
            for pid, group in per_pilot.items():
                ready = []
                for unit in group:
                    try:
                        stage_in(unit, unit.sandbox, self.profiler, 'umgr', 'client')
                    except StagingFailure as exc:
                        unit.diagnostic = str(exc)
                        self._set_final(unit, UnitState.FAILED, 'staging failure')
                        continue
                    self.profiler.record(unit.uid, 'umgr', 'bind', 'pilot=%s' % pid)
                    ready.append(unit)
                if bulk:
                    self.channel.push_units(pid, [u.to_doc() for u in ready])
                else:
                    for u in ready:
                        self.channel.push_units(pid, [u.to_doc()])

    def _set_final(self, unit, state, detail=''):
        with self._lock:
            advance(unit, state, profiler=self.profiler, component='umgr',
                    detail=detail)
            self._seen.add((unit.uid, state.value))
            self._cond.notify_all()
        self._fire(unit)

    def _fire(self, unit):
        for fn in list(self._callbacks):
            try:
                fn(unit, unit.state)
            except Exception:
                log.exception('unit callback failed')

    # --------------------------------------------------------------------------
    def merge_update(self, doc: dict) -> bool:
        """Apply one agent update; duplicates and backward moves are ignored."""
        key = (doc['uid'], doc['state'])
        with self._lock:
            unit = self.units.get(doc['uid'])
            new = UnitState(doc['state'])
            if (unit is None or key in self._seen or unit.is_final
                    or UNIT_STATE_ORDER[new] <= UNIT_STATE_ORDER[unit.state]):
                self.updates_ignored += 1
                return False
            self._seen.add(key)
            history = [(UnitState(s), int(ts)) for s, ts in doc['state_history']]
            if len(history) >= len(unit.state_history):
                unit.state_history = history
            unit.state = new
            for attr in ('exit_code', 'sandbox', 'stdout', 'stderr', 'diagnostic'):
                if doc.get(attr) is not None:
                    setattr(unit, attr, doc[attr])
            self.updates_merged += 1
            self._cond.notify_all()
        if new is UnitState.UM_STAGING_OUT:
            self._stage_out(unit)
        else:
            self._fire(unit)
        return True

    def _stage_out(self, unit):
        try:
            for i, d in enumerate(unit.description.directives(output=True,
                                                              location='client')):
                execute_directive(d, unit.sandbox, output=True)
                self.profiler.record(unit.uid, 'umgr', 'stage_directive', 'index=%d' % i)
        except StagingFailure as exc:
            unit.diagnostic = str(exc)
            self._set_final(unit, UnitState.FAILED, 'staging failure')
            return
        self._set_final(unit, UnitState.DONE)

    def _update_loop(self):
        while not self._stop.is_set():
            for doc in self.channel.pull_updates(timeout=0.1):
                try:
                    self.merge_update(doc)
                except Exception:
                    log.exception('bad update document for %s', doc.get('uid'))

    # --------------------------------------------------------------------------
    def wait_units(self, units=None, timeout: Optional[float] = None) -> bool:
        """Wait until the given units (default: all) reached a final state."""
        if units is None:
            with self._lock:
                units = list(self.units.values())
        units = [self.units[u] if isinstance(u, str) else u for u in units]
        with self._cond:
            return self._cond.wait_for(lambda: all(u.is_final for u in units),
                                       timeout)

    def counts(self) -> dict:
        with self._lock:
            return dict(collections.Counter(u.state.value for u in self.units.values()))

    def close(self):
        self._stop.set()
        self._thread.join(1.0)


# ------------------------------------------------------------------------------
# scenarios

class BarrierMode(str, enum.Enum):
    AGENT_BARRIER = 'agent'
    APPLICATION_BARRIER = 'application'
    GENERATION_BARRIER = 'generation'


class ScenarioAborted(RuntimeError):
    pass


@dataclass
class ScenarioReport:
    mode: BarrierMode
    pilot_cores: int
    n_units: int
    generations: int
    unit_duration: float
    ttc: float
    ttc_a: float
    utilization: float
    optimal_ttc: float
    counts: dict
    concurrency: list = field(default_factory=list)
    troughs: int = 0
    agent: Optional[dict] = None
    session_dir: Optional[str] = None
    profile_dir: Optional[str] = None
    profiling: bool = True
    metrics: Optional[object] = None
    units: list = field(default_factory=list)


def _await_active(pm, pilot, timeout):
    if not pm.wait_pilots([pilot.uid], {PilotState.P_ACTIVE}, timeout) \
            or pilot.state is not PilotState.P_ACTIVE:
        raise ScenarioAborted('pilot %s did not become active (%s: %s)'
                              % (pilot.uid, pilot.state.value, pilot.diagnostic))


def run_scenario(workload: WorkloadSpec, mode: BarrierMode = BarrierMode.AGENT_BARRIER,
                 pilot_cores: Optional[int] = None, resource='local',
                 session_dir=None, profile: bool = True,
                 channel_latency: float = 0.0,
                 agent_config: Optional[AgentConfig] = None,
                 abort_on_failure: bool = True, out_of_process: bool = False,
                 timeout: Optional[float] = None) -> ScenarioReport:
    """Run ``workload`` on one pilot under the given barrier mode."""
    mode = BarrierMode(mode)
    cfg = load_resource_config(resource) if isinstance(resource, str) else resource
    if pilot_cores is None:
        pilot_cores = min(cfg.total_cores, desk_scale_cores())
    if pilot_cores > cfg.total_cores:
        raise ValueError('%d cores requested, %s has %d'
                         % (pilot_cores, cfg.resource_id, cfg.total_cores))
    nodes = -(-pilot_cores // cfg.cores_per_node)
    cores = nodes * cfg.cores_per_node
    spec = workload.resolve(cores)
    session = Path(session_dir or tempfile.mkdtemp(prefix='pilotrt-scenario-'))
    session.mkdir(parents=True, exist_ok=True)
    profile_dir = session / 'profile'
    profiler = Profiler(profile_dir) if profile else Profiler(enabled=False)
    channel = WorkloadChannel(channel_latency, profiler)
    config = agent_config or AgentConfig.from_resource(cfg)
    config = AgentConfig.from_doc(dict(config.to_doc(),
                                       startup_barrier=mode is BarrierMode.AGENT_BARRIER))
    pm = PilotManager(session, channel, profiler, {cfg.resource_id: cfg}, config,
                      out_of_process)
    um = UnitManager(channel, profiler, session_dir=session)
    um.add_pilot_manager(pm)
    if timeout is None:
        timeout = max(60.0, 10 * spec.optimal_ttc(cores) + 0.05 * spec.n_units)
    runtime = timeout + 60.0
    try:
        pilot = pm.submit_pilots(PilotDescription(cores, runtime, cfg.resource_id))[0]
        _await_active(pm, pilot, timeout)
        slices = spec.generation_slices(cores)
        t_start = now_us()
        units = []
        if mode is BarrierMode.GENERATION_BARRIER:
            for gen in slices:
                batch = um.submit_units(gen, bulk=False)
                units.extend(batch)
                if not um.wait_units(batch, timeout):
                    raise ScenarioAborted('generation did not complete in %.0f s' % timeout)
                if abort_on_failure and any(u.state is UnitState.FAILED for u in batch):
                    raise ScenarioAborted('a unit FAILED: %s' % next(
                        u.diagnostic for u in batch if u.state is UnitState.FAILED))
        else:
            descs = [d for gen in slices for d in gen]
            units = um.submit_units(descs, bulk=mode is BarrierMode.AGENT_BARRIER)
            channel.seal(pilot.uid)
            if not um.wait_units(units, timeout):
                raise ScenarioAborted('workload did not complete in %.0f s' % timeout)
        ttc = (now_us() - t_start) / 1e6
        if abort_on_failure and any(u.state is UnitState.FAILED for u in units):
            raise ScenarioAborted('a unit FAILED: %s' % next(
                u.diagnostic for u in units if u.state is UnitState.FAILED))
        pm.terminate(pilot.uid, PilotState.DONE, wait=True, timeout=timeout)
    finally:
        pm.close()
        um.close()
        profiler.close()
    events = load_events(profile_dir) if profile else events_from_units(units)
    metrics = analyze(events, cores, ttc)
    series = concurrency_series(events)
    t0, t1 = agent_span(events)
    return ScenarioReport(mode=mode, pilot_cores=cores, n_units=spec.n_units,
                          generations=spec.generations,
                          unit_duration=spec.unit_duration, ttc=ttc,
                          ttc_a=metrics.ttc_a, utilization=metrics.utilization,
                          optimal_ttc=spec.optimal_ttc(cores), counts=um.counts(),
                          concurrency=series,
                          troughs=len(zero_troughs(series, t0, t1)),
                          agent=pm.reports.get(pilot.uid),
                          session_dir=str(session),
                          profile_dir=str(profile_dir) if profile else None,
                          profiling=profile, metrics=metrics, units=units)
