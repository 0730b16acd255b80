import itertools

import pytest
from hypothesis import given, settings, strategies as st

from oracles import PILOT_EDGES, UNIT_EDGES, unit_path
from pilotrt.model import (FINAL_UNIT_STATES, IllegalTransition, Pilot,
                           PilotDescription, PilotState, SchemaError,
                           StagingDirective, Unit, UnitDescription, UnitState,
                           UNIT_STATE_ORDER, advance, legal_successors,
                           replay_history, validate_transition)
from pilotrt.profiler import Profiler


def test_transition_tables_match_written_edges():
    for a, b in itertools.product(PilotState, PilotState):
        assert validate_transition(a, b) == ((a.value, b.value) in PILOT_EDGES)
    for a, b in itertools.product(UnitState, UnitState):
        assert validate_transition(a, b) == ((a.value, b.value) in UNIT_EDGES)


def test_documented_examples():
    assert validate_transition(PilotState.NEW, PilotState.PM_LAUNCH)
    assert not validate_transition(UnitState.DONE, UnitState.NEW)
    assert not validate_transition(UnitState.A_SCHEDULING, UnitState.A_STAGING_OUT)


def test_mixed_kinds_never_validate():
    assert not validate_transition(UnitState.NEW, PilotState.PM_LAUNCH)
    assert not validate_transition(PilotState.NEW, UnitState.UM_SCHEDULING)


def test_final_states_absorbing():
    for s in FINAL_UNIT_STATES:
        assert not legal_successors(s)


def test_advance_appends_history():
    u = Unit(UnitDescription('/bin/true'))
    advance(u, UnitState.UM_SCHEDULING)
    assert len(u.state_history) == 2
    assert u.state is UnitState.UM_SCHEDULING


def test_canceled_pilot_is_absorbing():
    p = Pilot(PilotDescription(4, 10))
    for s in (PilotState.PM_LAUNCH, PilotState.P_ACTIVE, PilotState.CANCELED):
        advance(p, s)
    for s in PilotState:
        with pytest.raises(IllegalTransition):
            advance(p, s)


def test_illegal_transition_carries_states():
    u = Unit(UnitDescription('/bin/true'))
    with pytest.raises(IllegalTransition) as info:
        advance(u, UnitState.DONE)
    assert info.value.current is UnitState.NEW
    assert info.value.next_state is UnitState.DONE


@pytest.mark.parametrize('flags', list(itertools.product([False, True], repeat=4)))
def test_skip_paths_follow_directive_presence(flags):
    path = unit_path(*flags)
    u = Unit(UnitDescription('/bin/true'))
    for name in path[1:]:
        advance(u, UnitState(name))
    assert [s.value for s, _ in u.state_history] == path
    assert replay_history(u.state_history)


def test_no_staging_skip_path():
    u = Unit(UnitDescription('/bin/true'))
    for s in ('UM_SCHEDULING', 'A_SCHEDULING', 'A_EXECUTING_PENDING', 'A_EXECUTING',
              'A_STAGING_OUT_PENDING', 'DONE'):
        advance(u, UnitState(s))
    assert u.state is UnitState.DONE


def test_slots_cleared_when_leaving_holding_states():
    u = Unit(UnitDescription('/bin/true'))
    for s in ('UM_SCHEDULING', 'A_SCHEDULING', 'A_EXECUTING_PENDING'):
        advance(u, UnitState(s))
    u.slots = object()
    advance(u, UnitState.A_EXECUTING)
    advance(u, UnitState.A_STAGING_OUT_PENDING)
    assert u.slots is not None
    advance(u, UnitState.DONE)
    assert u.slots is None


def test_clock_never_runs_backwards():
    u = Unit(UnitDescription('/bin/true'))
    t = u.state_history[0][1]
    advance(u, UnitState.UM_SCHEDULING, clock=lambda: t - 50)
    assert u.state_history[1][1] == t


def test_advance_records_profile_event():
    prof = Profiler()
    u = Unit(UnitDescription('/bin/true'))
    advance(u, UnitState.UM_SCHEDULING, profiler=prof, component='umgr')
    (e,) = prof.events()
    assert (e.uid, e.component, e.label, e.ts) == (u.uid, 'umgr', 'UM_SCHEDULING',
                                                  u.state_history[1][1])


def test_description_validation():
    with pytest.raises(ValueError):
        UnitDescription('', cores=1).validate()
    with pytest.raises(ValueError):
        UnitDescription('/bin/true', cores=0).validate()
    with pytest.raises(ValueError):
        PilotDescription(0, 10).validate()
    with pytest.raises(ValueError):
        PilotDescription(4, 0).validate()
    with pytest.raises(ValueError):
        StagingDirective('', 'x')
    with pytest.raises(ValueError):
        StagingDirective('a', 'b', mode='teleport')


def test_unit_document_roundtrip():
    d = UnitDescription('/bin/echo', ['a b'], cores=2, mpi=True,
                        environment={'K': 'v'},
                        input_staging=[StagingDirective('/tmp/x', 'x', 'link')],
                        output_staging=[StagingDirective('y', '/tmp/y', 'move', 'client')])
    u = Unit(d)
    advance(u, UnitState.UM_SCHEDULING)
    back = Unit.from_doc(u.to_doc())
    assert back.description == d
    assert back.state_history == u.state_history
    assert back.uid == u.uid


def test_pilot_document_roundtrip():
    from pilotrt.resource import NodeLayout
    p = Pilot(PilotDescription(16, 60))
    p.nodes = NodeLayout(['a', 'b'], 8)
    back = Pilot.from_doc(p.to_doc())
    assert back.nodes.node_ids == ['a', 'b']
    with pytest.raises(SchemaError):
        Pilot.from_doc(dict(p.to_doc(), schema='other/1'))


# --- properties ---------------------------------------------------------------

@settings(max_examples=300, deadline=None)
@given(st.lists(st.integers(min_value=0, max_value=1000), max_size=20),
       st.lists(st.integers(min_value=0, max_value=5), max_size=20))
def test_random_legal_walks_keep_history_consistent(picks, steps):
    u = Unit(UnitDescription('/bin/true'))
    t = [u.state_history[0][1]]

    def clock():
        t[0] += steps.pop() if steps else 1
        return t[0]

    for k in picks:
        succ = sorted(legal_successors(u.state), key=lambda s: s.value)
        if not succ:
            break
        advance(u, succ[k % len(succ)], clock=clock)
    hist = u.state_history
    assert replay_history(hist)
    assert all(a[1] <= b[1] for a, b in zip(hist, hist[1:]))
    assert all(UNIT_STATE_ORDER[a[0]] < UNIT_STATE_ORDER[b[0]] or b[0] in FINAL_UNIT_STATES
               for a, b in zip(hist, hist[1:]))
    finals = [s for s, _ in hist if s in FINAL_UNIT_STATES]
    assert len(finals) <= 1
    if u.state in FINAL_UNIT_STATES:
        assert finals == [u.state]
