"""Domain types and the pilot / unit state machines.

All lifecycle changes go through :func:`advance`, which consults
:func:`validate_transition` and refuses anything the state machine does not
allow.  Timestamps are integer microseconds of the monotonic clock so that
differences between them are exact.
"""

from __future__ import annotations

import copy
import enum
import itertools
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Union


def now_us() -> int:
    """Monotonic time in integer microseconds."""
    return time.monotonic_ns() // 1000


def wall_us() -> int:
    return time.time_ns() // 1000


# ------------------------------------------------------------------------------
# identifiers

_counters: dict = {}
_counter_lock = threading.Lock()


def generate_uid(prefix: str) -> str:
    with _counter_lock:
        counter = _counters.setdefault(prefix, itertools.count())
        return '%s.%06d' % (prefix, next(counter))


# ------------------------------------------------------------------------------
# states

class PilotState(str, enum.Enum):
    NEW = 'NEW'
    PM_LAUNCH = 'PM_LAUNCH'
    P_ACTIVE = 'P_ACTIVE'
    DONE = 'DONE'
    CANCELED = 'CANCELED'
    FAILED = 'FAILED'

    def __str__(self):
        return self.value


class UnitState(str, enum.Enum):
    NEW = 'NEW'
    UM_SCHEDULING = 'UM_SCHEDULING'
    UM_STAGING_IN = 'UM_STAGING_IN'
    A_STAGING_IN = 'A_STAGING_IN'
    A_SCHEDULING = 'A_SCHEDULING'
    A_EXECUTING_PENDING = 'A_EXECUTING_PENDING'
    A_EXECUTING = 'A_EXECUTING'
    A_STAGING_OUT_PENDING = 'A_STAGING_OUT_PENDING'
    A_STAGING_OUT = 'A_STAGING_OUT'
    UM_STAGING_OUT = 'UM_STAGING_OUT'
    DONE = 'DONE'
    CANCELED = 'CANCELED'
    FAILED = 'FAILED'

    def __str__(self):
        return self.value


FINAL_PILOT_STATES = frozenset({PilotState.DONE, PilotState.CANCELED,
                                PilotState.FAILED})
FINAL_UNIT_STATES = frozenset({UnitState.DONE, UnitState.CANCELED,
                               UnitState.FAILED})

U = UnitState
P = PilotState

# forward edges only; CANCELED / FAILED are added for every non-final state
_PILOT_EDGES = {
    P.NEW: {P.PM_LAUNCH},
    P.PM_LAUNCH: {P.P_ACTIVE},
    P.P_ACTIVE: {P.DONE},
}

# staging states may be skipped when a unit carries no directives for them
_UNIT_EDGES = {
    U.NEW: {U.UM_SCHEDULING},
    U.UM_SCHEDULING: {U.UM_STAGING_IN, U.A_STAGING_IN, U.A_SCHEDULING},
    U.UM_STAGING_IN: {U.A_STAGING_IN, U.A_SCHEDULING},
    U.A_STAGING_IN: {U.A_SCHEDULING},
    U.A_SCHEDULING: {U.A_EXECUTING_PENDING},
    U.A_EXECUTING_PENDING: {U.A_EXECUTING},
    U.A_EXECUTING: {U.A_STAGING_OUT_PENDING},
    U.A_STAGING_OUT_PENDING: {U.A_STAGING_OUT, U.UM_STAGING_OUT, U.DONE},
    U.A_STAGING_OUT: {U.UM_STAGING_OUT, U.DONE},
    U.UM_STAGING_OUT: {U.DONE},
}

# position along the forward path, used for monotone merging of updates
UNIT_STATE_ORDER = {s: i for i, s in enumerate(UnitState)}
UNIT_STATE_ORDER[U.CANCELED] = UNIT_STATE_ORDER[U.DONE]
UNIT_STATE_ORDER[U.FAILED] = UNIT_STATE_ORDER[U.DONE]
PILOT_STATE_ORDER = {s: i for i, s in enumerate(PilotState)}
PILOT_STATE_ORDER[P.CANCELED] = PILOT_STATE_ORDER[P.DONE]
PILOT_STATE_ORDER[P.FAILED] = PILOT_STATE_ORDER[P.DONE]

# states between core assignment and core release
SLOT_HOLDING_STATES = frozenset({U.A_EXECUTING_PENDING, U.A_EXECUTING,
                                 U.A_STAGING_OUT_PENDING})

AGENT_STATES = frozenset({U.A_STAGING_IN, U.A_SCHEDULING,
                          U.A_EXECUTING_PENDING, U.A_EXECUTING,
                          U.A_STAGING_OUT_PENDING, U.A_STAGING_OUT})


def _successors(state):
    if isinstance(state, UnitState):
        final, edges = FINAL_UNIT_STATES, _UNIT_EDGES
        kind = UnitState
    else:
        final, edges = FINAL_PILOT_STATES, _PILOT_EDGES
        kind = PilotState
    if state in final:
        return frozenset()
    return frozenset(edges.get(state, set()) | {kind.CANCELED, kind.FAILED})


def validate_transition(current, next_state) -> bool:
    """True iff ``current -> next_state`` is an edge of its state machine."""
    if not isinstance(current, (UnitState, PilotState)):
        return False
    if type(current) is not type(next_state):
        return False
    return next_state in _successors(current)


def legal_successors(state):
    """All states reachable from ``state`` in one legal step."""
    return _successors(state)


class IllegalTransition(RuntimeError):
    """An entity was asked to make a transition its state machine forbids."""

    def __init__(self, current, next_state, uid=None):
        self.current = current
        self.next_state = next_state
        self.uid = uid
        super().__init__('%s: illegal transition %s -> %s'
                         % (uid or '?', current, next_state))


# ------------------------------------------------------------------------------
# descriptions

class StagingMode(str, enum.Enum):
    COPY = 'copy'
    LINK = 'link'
    MOVE = 'move'


@dataclass(frozen=True)
class StagingDirective:
    """One file transfer around unit execution.

    ``location`` selects which side performs the transfer: ``agent`` runs it
    in A_STAGING_IN / A_STAGING_OUT, ``client`` in UM_STAGING_IN /
    UM_STAGING_OUT.  Relative targets of input directives (and relative
    sources of output directives) resolve against the unit sandbox.
    """

    source: str
    target: str
    mode: StagingMode = StagingMode.COPY
    location: str = 'agent'

    def __post_init__(self):
        if not self.source or not self.target:
            raise ValueError('staging directive needs source and target')
        object.__setattr__(self, 'mode', StagingMode(self.mode))
        if self.location not in ('agent', 'client'):
            raise ValueError('invalid staging location %r' % self.location)

    def to_doc(self) -> dict:
        return {'source': self.source, 'target': self.target,
                'mode': self.mode.value, 'location': self.location}

    @classmethod
    def from_doc(cls, doc: Mapping) -> 'StagingDirective':
        return cls(doc['source'], doc['target'], doc.get('mode', 'copy'),
                   doc.get('location', 'agent'))


@dataclass
class UnitDescription:
    executable: str
    arguments: list = field(default_factory=list)
    cores: int = 1
    input_staging: list = field(default_factory=list)
    output_staging: list = field(default_factory=list)
    environment: dict = field(default_factory=dict)
    mpi: bool = False
    name: Optional[str] = None

    def validate(self):
        if not isinstance(self.executable, str) or not self.executable:
            raise ValueError('unit executable must be a non-empty string')
        if not isinstance(self.cores, int) or self.cores < 1:
            raise ValueError('unit cores must be a positive integer, got %r'
                             % (self.cores,))
        for d in list(self.input_staging) + list(self.output_staging):
            if not isinstance(d, StagingDirective):
                raise ValueError('staging entries must be StagingDirective')
        return self

    def directives(self, output: bool, location: str) -> list:
        items = self.output_staging if output else self.input_staging
        return [d for d in items if d.location == location]

    def to_doc(self) -> dict:
        return {'executable': self.executable,
                'arguments': [str(a) for a in self.arguments],
                'cores': self.cores,
                'input_staging': [d.to_doc() for d in self.input_staging],
                'output_staging': [d.to_doc() for d in self.output_staging],
                'environment': dict(self.environment),
                'mpi': self.mpi,
                'name': self.name}

    @classmethod
    def from_doc(cls, doc: Mapping) -> 'UnitDescription':
        return cls(executable=doc['executable'],
                   arguments=list(doc.get('arguments', [])),
                   cores=doc.get('cores', 1),
                   input_staging=[StagingDirective.from_doc(d)
                                  for d in doc.get('input_staging', [])],
                   output_staging=[StagingDirective.from_doc(d)
                                   for d in doc.get('output_staging', [])],
                   environment=dict(doc.get('environment', {})),
                   mpi=bool(doc.get('mpi', False)),
                   name=doc.get('name'))


@dataclass
class PilotDescription:
    cores: int
    runtime: float
    resource_id: str = 'local'
    queue_label: Optional[str] = None

    def validate(self):
        if not isinstance(self.cores, int) or self.cores < 1:
            raise ValueError('pilot cores must be a positive integer')
        if not self.runtime or self.runtime <= 0:
            raise ValueError('pilot runtime must be positive')
        return self

    def to_doc(self) -> dict:
        return {'cores': self.cores, 'runtime': self.runtime,
                'resource_id': self.resource_id,
                'queue_label': self.queue_label}

    @classmethod
    def from_doc(cls, doc: Mapping) -> 'PilotDescription':
        return cls(doc['cores'], doc['runtime'],
                   doc.get('resource_id', 'local'), doc.get('queue_label'))


# ------------------------------------------------------------------------------
# entities

@dataclass
class Unit:
    description: UnitDescription
    uid: str = field(default_factory=lambda: generate_uid('unit'))
    state: UnitState = UnitState.NEW
    slots: Optional[object] = None
    exit_code: Optional[int] = None
    state_history: list = field(default_factory=list)
    pilot: Optional[str] = None
    sandbox: Optional[str] = None
    stdout: Optional[str] = None
    stderr: Optional[str] = None
    diagnostic: Optional[str] = None
    # clone bookkeeping for the micro-benchmarks
    clone_of: Optional[str] = None
    owns_slots: bool = False

    def __post_init__(self):
        if not self.state_history:
            self.state_history.append((self.state, now_us()))

    @property
    def is_final(self) -> bool:
        return self.state in FINAL_UNIT_STATES

    def timestamp(self, state) -> Optional[int]:
        for s, ts in self.state_history:
            if s == state:
                return ts
        return None

    def clone(self, uid: str) -> 'Unit':
        twin = copy.copy(self)
        twin.uid = uid
        twin.description = copy.deepcopy(self.description)
        twin.state_history = list(self.state_history)
        twin.clone_of = self.uid
        twin.owns_slots = False
        return twin

    def to_doc(self) -> dict:
        return {'schema': UNIT_SCHEMA,
                'uid': self.uid,
                'pilot': self.pilot,
                'description': self.description.to_doc(),
                'state': self.state.value,
                'state_history': [[s.value, ts] for s, ts in self.state_history],
                'exit_code': self.exit_code,
                'sandbox': self.sandbox,
                'stdout': self.stdout,
                'stderr': self.stderr,
                'diagnostic': self.diagnostic,
                'clone_of': self.clone_of}

    @classmethod
    def from_doc(cls, doc: Mapping) -> 'Unit':
        check_schema(doc, UNIT_SCHEMA)
        return cls(description=UnitDescription.from_doc(doc['description']),
                   uid=doc['uid'],
                   state=UnitState(doc['state']),
                   exit_code=doc.get('exit_code'),
                   state_history=[(UnitState(s), int(ts))
                                  for s, ts in doc['state_history']],
                   pilot=doc.get('pilot'),
                   sandbox=doc.get('sandbox'),
                   stdout=doc.get('stdout'),
                   stderr=doc.get('stderr'),
                   diagnostic=doc.get('diagnostic'),
                   clone_of=doc.get('clone_of'))


@dataclass
class Pilot:
    description: PilotDescription
    uid: str = field(default_factory=lambda: generate_uid('pilot'))
    state: PilotState = PilotState.NEW
    nodes: Optional[object] = None
    state_history: list = field(default_factory=list)
    diagnostic: Optional[str] = None

    def __post_init__(self):
        if not self.state_history:
            self.state_history.append((self.state, now_us()))

    @property
    def is_final(self) -> bool:
        return self.state in FINAL_PILOT_STATES

    def timestamp(self, state) -> Optional[int]:
        for s, ts in self.state_history:
            if s == state:
                return ts
        return None

    def to_doc(self) -> dict:
        return {'schema': PILOT_SCHEMA,
                'uid': self.uid,
                'description': self.description.to_doc(),
                'state': self.state.value,
                'state_history': [[s.value, ts] for s, ts in self.state_history],
                'nodes': self.nodes.to_doc() if self.nodes is not None else None,
                'diagnostic': self.diagnostic}

    @classmethod
    def from_doc(cls, doc: Mapping) -> 'Pilot':
        from .resource import NodeLayout
        check_schema(doc, PILOT_SCHEMA)
        nodes = doc.get('nodes')
        return cls(description=PilotDescription.from_doc(doc['description']),
                   uid=doc['uid'],
                   state=PilotState(doc['state']),
                   nodes=NodeLayout.from_doc(nodes) if nodes else None,
                   state_history=[(PilotState(s), int(ts))
                                  for s, ts in doc['state_history']],
                   diagnostic=doc.get('diagnostic'))


UNIT_SCHEMA = 'pilotrt.unit/1'
PILOT_SCHEMA = 'pilotrt.pilot/1'


class SchemaError(ValueError):
    pass


def check_schema(doc: Mapping, expected: str):
    got = doc.get('schema')
    if got != expected:
        raise SchemaError('expected document schema %r, got %r' % (expected, got))


Entity = Union[Unit, Pilot]


def advance(entity: Entity, next_state, clock: Callable[[], int] = now_us,
            profiler=None, component: str = '', detail: str = '') -> Entity:
    """Move ``entity`` to ``next_state`` and record the transition.

    Raises :class:`IllegalTransition` if the edge is not in the state machine.
    """
    if not validate_transition(entity.state, next_state):
        raise IllegalTransition(entity.state, next_state, entity.uid)
    ts = clock()
    last = entity.state_history[-1][1] if entity.state_history else ts
    if ts < last:
        # clocks from another strand or process may lag by a tick
        ts = last
    entity.state = next_state
    entity.state_history.append((next_state, ts))
    if isinstance(entity, Unit) and next_state not in SLOT_HOLDING_STATES:
        entity.slots = None
    if profiler is not None:
        profiler.record(entity.uid, component, next_state.value, detail, ts=ts)
    return entity


def replay_history(history) -> bool:
    """Check that a recorded history is a legal walk with monotone time."""
    for (s0, t0), (s1, t1) in zip(history, history[1:]):
        if not validate_transition(s0, s1) or t1 < t0:
            return False
    return True
