import os
import queue
import subprocess
import sys
import time
from pathlib import Path

import pytest

from conftest import live_children
from pilotrt.executor import (Executor, LaunchMethodId, SpawnFailure, Unsupported,
                              build_launch_command, spawn)
from pilotrt.model import Unit, UnitDescription, UnitState, advance
from pilotrt.profiler import Profiler
from pilotrt.resource import NodeLayout
from pilotrt.scheduler import CoreMap, SlotAssignment, allocate_continuous, release

GOLDEN = Path(__file__).parent / 'golden'


def pending_unit(cmap, exe, args=(), cores=1, **kw):
    u = Unit(UnitDescription(exe, list(args), cores=cores, **kw))
    for s in ('UM_SCHEDULING', 'A_SCHEDULING'):
        advance(u, UnitState(s))
    u.slots = allocate_continuous(cmap, cores, True, u.uid)
    u.owns_slots = True
    advance(u, UnitState.A_EXECUTING_PENDING)
    return u


class Rig:
    def __init__(self, tmp_path, cores=8, **kw):
        self.cmap = CoreMap(NodeLayout(['node-0000'], cores))
        self.out = queue.Queue()
        self.prof = Profiler()
        self.released = []

        def rel(u):
            if u.slots is not None:
                release(self.cmap, u.slots)
                self.released.append(u.uid)

        self.ex = Executor(self.out.put, self.out.put, rel, tmp_path, profiler=self.prof,
                           **kw)
        self.ex.start()

    def submit(self, exe, args=(), **kw):
        u = pending_unit(self.cmap, exe, args, **kw)
        self.ex.inbox.put(u)
        return u

    def collect(self, n, timeout=20):
        got = [self.out.get(timeout=timeout) for _ in range(n)]
        return {u.uid: u for u in got}

    def stop(self, deadline=5.0):
        self.ex.stop(deadline)
        self.ex.join(deadline + 10)


# --- launch commands -----------------------------------------------------------

SLOTS = SlotAssignment((('node-0000', (0, 1)), ('node-0001', (3,))), 3)


def test_fork_command_is_the_executable():
    u = Unit(UnitDescription('/bin/sleep', ['64']))
    cmd = build_launch_command(u, 'FORK', SLOTS, '/tmp/x')
    assert cmd.command == '/bin/sleep 64'
    assert cmd.argv == ['/bin/sleep', '64']
    assert cmd.env['PILOTRT_NODES'] == 'node-0000,node-0001'
    assert cmd.env['PILOTRT_SLOTS'] == 'node-0000:0,1;node-0001:3'
    assert cmd.env['PILOTRT_CORES'] == '3'


def test_wrapper_script_matches_golden():
    u = Unit(UnitDescription('/bin/sleep', ['64'], environment={'MODE': 'a b'}),
             uid='unit.000007')
    sandbox = '/tmp/session/pilot.0000/unit.000007'
    cmd = build_launch_command(u, LaunchMethodId.SHELL_WRAPPER, SLOTS, sandbox)
    assert cmd.script_path == sandbox + '/unit.000007.sh'
    assert cmd.argv == ['/bin/sh', cmd.script_path]
    assert cmd.script_text == (GOLDEN / 'wrapper_unit.000007.sh').read_text()


def test_command_is_deterministic():
    u = Unit(UnitDescription('/bin/echo', ['a', 'b c']))
    a = build_launch_command(u, 'SHELL_WRAPPER', SLOTS, '/tmp/s')
    b = build_launch_command(u, 'SHELL_WRAPPER', SLOTS, '/tmp/s')
    assert a == b


@pytest.mark.parametrize('method', [m for m in LaunchMethodId
                                    if m not in (LaunchMethodId.FORK,
                                                 LaunchMethodId.SHELL_WRAPPER)])
def test_stub_methods_raise(method):
    with pytest.raises(Unsupported):
        build_launch_command(Unit(UnitDescription('/bin/true')), method, SLOTS, '/tmp')


def test_launch_needs_slots():
    with pytest.raises(ValueError):
        build_launch_command(Unit(UnitDescription('/bin/true')), 'FORK', None)


def test_spawn_writes_named_output_files(tmp_path):
    u = Unit(UnitDescription('/bin/sh', ['-c', 'echo hi; echo oops >&2']))
    cmd = build_launch_command(u, 'FORK', SLOTS, tmp_path)
    p = spawn(u, cmd, 'direct', tmp_path)
    assert p.wait() == 0
    assert (tmp_path / ('%s.out' % u.uid)).read_text() == 'hi\n'
    assert (tmp_path / ('%s.err' % u.uid)).read_text() == 'oops\n'


def test_spawn_mechanisms_differ_only_in_interpretation(tmp_path):
    u = Unit(UnitDescription('/bin/echo', ['$HOME']))
    cmd = build_launch_command(u, 'FORK', SLOTS, tmp_path)
    spawn(u, cmd, 'direct', tmp_path).wait()
    direct = (tmp_path / ('%s.out' % u.uid)).read_text()
    spawn(u, cmd, 'shell', tmp_path).wait()
    shelled = (tmp_path / ('%s.out' % u.uid)).read_text()
    assert direct == '$HOME\n' and shelled == '$HOME\n'   # quoted on the way in
    raw = cmd.__class__(cmd.argv, 'echo $PILOTRT_CORES', cmd.env)
    spawn(u, raw, 'shell', tmp_path).wait()
    assert (tmp_path / ('%s.out' % u.uid)).read_text() == '3\n'


def test_spawn_missing_executable(tmp_path):
    u = Unit(UnitDescription('/no/such/binary'))
    with pytest.raises(SpawnFailure):
        spawn(u, build_launch_command(u, 'FORK', SLOTS, tmp_path), 'direct', tmp_path)
    with pytest.raises(ValueError):
        spawn(u, build_launch_command(u, 'FORK', SLOTS, tmp_path), 'rsh', tmp_path)


# --- component -----------------------------------------------------------------

@pytest.mark.parametrize('code', [0, 1, 42])
def test_exit_codes_propagate(tmp_path, no_orphans, code):
    rig = Rig(tmp_path)
    u = rig.submit('/bin/sh', ['-c', 'exit %d' % code])
    rig.collect(1)
    rig.stop()
    assert u.exit_code == code
    assert rig.ex.records[u.uid].exit_code == code
    assert u.state is (UnitState.A_STAGING_OUT_PENDING if code == 0 else UnitState.FAILED)
    assert rig.cmap.busy_cores == 0


def test_lenient_mode_keeps_nonzero_units(tmp_path):
    rig = Rig(tmp_path, fail_on_nonzero=False)
    u = rig.submit('/bin/sh', ['-c', 'exit 42'])
    rig.collect(1)
    rig.stop()
    assert u.state is UnitState.A_STAGING_OUT_PENDING and u.exit_code == 42


def test_missing_executable_fails_unit(tmp_path):
    rig = Rig(tmp_path)
    u = rig.submit('/no/such/binary')
    rig.collect(1)
    rig.stop()
    assert u.state is UnitState.FAILED and 'cannot spawn' in u.diagnostic
    assert rig.cmap.busy_cores == 0
    assert u.uid not in rig.ex.records


def test_shell_wrapper_runs_in_sandbox(tmp_path):
    rig = Rig(tmp_path, mpi_method='SHELL_WRAPPER')
    u = rig.submit('/bin/sh', ['-c', 'pwd; echo $PILOTRT_CORES'], cores=2, mpi=True)
    rig.collect(1)
    rig.stop()
    box = tmp_path / u.uid
    assert (box / ('%s.sh' % u.uid)).exists()
    assert (box / ('%s.out' % u.uid)).read_text() == '%s\n2\n' % box


def test_hundred_units_one_instance(tmp_path, no_orphans):
    rig = Rig(tmp_path, cores=8, fail_on_nonzero=True)
    units = []
    for _ in range(100):
        while rig.cmap.free_count[0] == 0:
            time.sleep(0.005)
        units.append(rig.submit('/bin/true'))
    got = rig.collect(100)
    rig.stop()
    assert set(got) == {u.uid for u in units}
    assert all(u.state is UnitState.A_STAGING_OUT_PENDING for u in units)
    for u in units:
        rec = rig.ex.records[u.uid]
        assert rec.completed >= rec.spawned and rec.exit_code == 0
    pickups = [e for e in rig.prof.events() if e.label == 'exec_pickup']
    assert len(pickups) == 100


def test_occupation_covers_runtime(tmp_path):
    rig = Rig(tmp_path)
    u = rig.submit('/bin/sleep', ['0.1'])
    rig.collect(1)
    rig.stop()
    hist = dict((s.value, t) for s, t in u.state_history)
    rec = rig.ex.records[u.uid]
    assert hist['A_EXECUTING_PENDING'] <= rec.spawned <= rec.completed
    assert rec.completed <= hist['A_STAGING_OUT_PENDING']


def test_crashed_instance_fails_only_its_unit(tmp_path, no_orphans):
    rig = Rig(tmp_path, n_instances=2)
    rig.ex.crash_instance(1)
    units = []
    for _ in range(20):
        while rig.cmap.free_count[0] == 0:
            time.sleep(0.005)
        units.append(rig.submit('/bin/true'))
    rig.collect(20)
    rig.stop()
    failed = [u for u in units if u.state is UnitState.FAILED]
    assert len(failed) == 1 and 'crash' in failed[0].diagnostic
    assert sum(u.state is UnitState.A_STAGING_OUT_PENDING for u in units) == 19
    assert rig.cmap.busy_cores == 0


def test_all_instances_gone_fails_leftovers(tmp_path):
    rig = Rig(tmp_path, n_instances=1)
    rig.ex.crash_instance(0)
    a = rig.submit('/bin/true')
    rig.out.get(timeout=5)
    b = rig.submit('/bin/true')
    assert rig.out.get(timeout=5) is b
    rig.ex.join(5)
    assert a.state is UnitState.FAILED and b.state is UnitState.FAILED
    assert 'no executor' in b.diagnostic


def test_deadline_kills_running_processes(tmp_path, no_orphans):
    rig = Rig(tmp_path)
    u = rig.submit('/bin/sh', ['-c', 'sleep 30 & sleep 30'])
    time.sleep(0.3)
    assert rig.ex.running_pids()
    t0 = time.monotonic()
    rig.stop(deadline=0.3)
    assert time.monotonic() - t0 < 5
    assert u.state is UnitState.CANCELED
    assert rig.cmap.busy_cores == 0
    assert not live_children()


def test_no_busy_polling_while_waiting(tmp_path):
    rig = Rig(tmp_path)
    rig.submit('/bin/sleep', ['1'])
    time.sleep(0.2)
    cpu0 = os.times()
    time.sleep(0.6)
    cpu1 = os.times()
    rig.collect(1)
    rig.stop()
    used = (cpu1.user - cpu0.user) + (cpu1.system - cpu0.system)
    assert used < 0.1


def test_fd_count_stays_bounded(tmp_path):
    rig = Rig(tmp_path, cores=8)
    base = len(os.listdir('/proc/self/fd'))
    for _ in range(200):
        while rig.cmap.free_count[0] == 0:
            time.sleep(0.002)
        rig.submit('/bin/true')
    rig.collect(200)
    rig.stop()
    assert rig.ex.max_fds < base + 40


def test_zero_instances_rejected(tmp_path):
    with pytest.raises(ValueError):
        Executor(print, print, print, tmp_path, n_instances=0)


def test_child_runs_with_the_interpreter_available(tmp_path):
    rig = Rig(tmp_path)
    u = rig.submit(sys.executable, ['-c', 'print(6*7)'])
    rig.collect(1)
    rig.stop()
    assert (tmp_path / u.uid / ('%s.out' % u.uid)).read_text() == '42\n'
    assert subprocess is not None
