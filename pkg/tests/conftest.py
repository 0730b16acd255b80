import os
import sys
from pathlib import Path

import psutil
import pytest

sys.path.insert(0, str(Path(__file__).parent))

ACCEPTANCE_LINES = []


def report_criterion(number, ok, detail):
    line = 'criterion %2d: %s  %s' % (number, 'PASS' if ok else 'FAIL', detail)
    ACCEPTANCE_LINES.append(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section('acceptance criteria')
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def live_children():
    """Child processes of the test run that have not exited."""
    me = psutil.Process(os.getpid())
    out = []
    for p in me.children(recursive=True):
        try:
            if p.status() != psutil.STATUS_ZOMBIE:
                out.append(p)
        except psutil.NoSuchProcess:
            pass
    return out


@pytest.fixture
def no_orphans():
    yield
    left = live_children()
    assert not left, 'processes left behind: %s' % [p.cmdline() for p in left]


@pytest.fixture
def layout16():
    from pilotrt.resource import NodeLayout
    return NodeLayout(['node-0000', 'node-0001'], 8)


def active_pilot(cores, cores_per_node=None):
    """A pilot already in P_ACTIVE on a synthetic node layout."""
    from pilotrt.model import Pilot, PilotDescription, PilotState, advance
    from pilotrt.resource import NodeLayout
    cpn = cores_per_node or cores
    nodes = -(-cores // cpn)
    pilot = Pilot(PilotDescription(cores, 600))
    pilot.nodes = NodeLayout(['node-%04d' % i for i in range(nodes)], cpn)
    for s in (PilotState.PM_LAUNCH, PilotState.P_ACTIVE):
        advance(pilot, s)
    return pilot
