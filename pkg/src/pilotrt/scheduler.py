"""The Agent's scheduler: BUSY/FREE accounting of the pilot's cores.

Two placement algorithms are provided.  ``allocate_continuous`` treats the
cores as one ordered continuum and does a strict first-fit scan (node order,
then core order).  ``allocate_torus`` hands out axis-aligned rectangular
blocks of whole nodes on an n-dimensional torus.

The :class:`Scheduler` component runs allocation and release on two
message-driven threads that share the :class:`CoreMap` under one lock.
"""

from __future__ import annotations

import collections
import itertools
import logging
import math
import queue
import threading
from dataclasses import dataclass
from typing import Callable, Optional

from .model import UnitState, advance
from .profiler import NULL_PROFILER
from .resource import NodeLayout

log = logging.getLogger(__name__)

FREE = 0
BUSY = 1


class RequestTooLarge(ValueError):
    """The request can never be satisfied by this pilot."""


class DoubleRelease(RuntimeError):
    """Cores were released that are not held by the releasing unit."""


@dataclass(frozen=True)
class SlotAssignment:
    nodes: tuple                 # ((node_id, (core, ...)), ...)
    total_cores: int
    owner: Optional[str] = None
    node_indices: tuple = ()

    def to_doc(self):
        return {'nodes': [[n, list(c)] for n, c in self.nodes],
                'total_cores': self.total_cores}

    @property
    def node_ids(self):
        return [n for n, _ in self.nodes]


class CoreMap:
    """Per-node FREE/BUSY vectors for the cores held by one pilot."""

    def __init__(self, layout: NodeLayout):
        self.layout = layout
        self.node_ids = list(layout.node_ids)
        self.cores_per_node = layout.cores_per_node
        self.cores = [bytearray(self.cores_per_node) for _ in self.node_ids]
        self.free_count = [self.cores_per_node] * len(self.node_ids)
        self.owners: dict = {}
        self.topology = layout.topology
        self.grid: dict = {}
        if self.topology.is_torus:
            if layout.coords is None:
                raise ValueError('torus layout without node coordinates')
            self.grid = {tuple(c): i for i, c in enumerate(layout.coords)}

    @property
    def total_cores(self) -> int:
        return len(self.node_ids) * self.cores_per_node

    @property
    def busy_cores(self) -> int:
        return self.total_cores - sum(self.free_count)

    def snapshot(self) -> list:
        return [bytes(c) for c in self.cores]

    def _mark(self, owner, picks) -> SlotAssignment:
        nodes = []
        for idx, cores in picks:
            vec = self.cores[idx]
            for c in cores:
                vec[c] = BUSY
            self.free_count[idx] -= len(cores)
            nodes.append((self.node_ids[idx], tuple(cores)))
        slots = SlotAssignment(tuple(nodes), sum(len(c) for _, c in picks),
                               owner, tuple(i for i, _ in picks))
        if owner is not None:
            self.owners[owner] = slots
        return slots


def allocate_continuous(cmap: CoreMap, cores: int, single_node: bool = False,
                        owner: Optional[str] = None) -> Optional[SlotAssignment]:
    """First-fit allocation; returns ``None`` when nothing fits right now."""
    if cores < 1:
        raise ValueError('request must be at least one core')
    if cores > cmap.total_cores or (single_node and cores > cmap.cores_per_node):
        raise RequestTooLarge('%d cores requested, pilot holds %d (%d per node)'
                              % (cores, cmap.total_cores, cmap.cores_per_node))
    if single_node:
        for idx, nfree in enumerate(cmap.free_count):
            if nfree >= cores:
                vec = cmap.cores[idx]
                picked = [c for c in range(cmap.cores_per_node) if vec[c] == FREE]
                return cmap._mark(owner, [(idx, picked[:cores])])
        return None
    if sum(cmap.free_count) < cores:
        return None
    picks = []
    needed = cores
    for idx, nfree in enumerate(cmap.free_count):
        if not nfree:
            continue
        vec = cmap.cores[idx]
        picked = [c for c in range(cmap.cores_per_node) if vec[c] == FREE][:needed]
        picks.append((idx, picked))
        needed -= len(picked)
        if not needed:
            break
    return cmap._mark(owner, picks)


def release(cmap: CoreMap, slots: SlotAssignment):
    """Return the cores of ``slots`` to FREE."""
    if slots.owner is not None:
        held = cmap.owners.get(slots.owner)
        if held is None or held != slots:
            raise DoubleRelease('%s does not hold %s' % (slots.owner, slots.nodes))
    index = {n: i for i, n in enumerate(cmap.node_ids)} if not slots.node_indices \
        else None
    for k, (node, cores) in enumerate(slots.nodes):
        idx = slots.node_indices[k] if index is None else index[node]
        vec = cmap.cores[idx]
        for c in cores:
            if vec[c] != BUSY:
                raise DoubleRelease('core %d on %s is already FREE' % (c, node))
    for k, (node, cores) in enumerate(slots.nodes):
        idx = slots.node_indices[k] if index is None else index[node]
        vec = cmap.cores[idx]
        for c in cores:
            vec[c] = FREE
        cmap.free_count[idx] += len(cores)
    if slots.owner is not None:
        del cmap.owners[slots.owner]


# ------------------------------------------------------------------------------
# torus

def block_shapes(dims, nodes_requested: int) -> list:
    """Candidate block shapes, ordered by (surplus, shape).

    Extents are powers of two no larger than the torus dimension.
    """
    extents = [[1 << k for k in range(int(math.log2(d)) + 1)] for d in dims]
    shapes = []
    for shape in itertools.product(*extents):
        size = math.prod(shape)
        if size >= nodes_requested:
            shapes.append((size - nodes_requested, shape))
    shapes.sort()
    return shapes


def block_nodes(origin, shape, dims) -> list:
    """Coordinates covered by a block, with wraparound."""
    ranges = [[(o + k) % d for k in range(e)] for o, e, d in zip(origin, shape, dims)]
    return list(itertools.product(*ranges))


def allocate_torus(cmap: CoreMap, nodes_requested: int,
                   owner: Optional[str] = None) -> Optional[SlotAssignment]:
    """Allocate a minimal-surplus block of whole nodes; ``None`` if none fits."""
    if not cmap.topology.is_torus:
        raise ValueError('core map has no torus topology')
    if nodes_requested < 1:
        raise ValueError('request must be at least one node')
    dims = cmap.topology.dims
    shapes = block_shapes(dims, nodes_requested)
    if nodes_requested > len(cmap.node_ids) or not shapes:
        raise RequestTooLarge('%d nodes requested, pilot holds %d'
                              % (nodes_requested, len(cmap.node_ids)))
    full = cmap.cores_per_node
    grid = cmap.grid

    def usable(coord):
        idx = grid.get(coord)
        return idx is not None and cmap.free_count[idx] == full

    for surplus, group in itertools.groupby(shapes, key=lambda s: s[0]):
        best = None
        for _, shape in group:
            for origin in itertools.product(*[range(d) for d in dims]):
                if best is not None and (origin, shape) >= best:
                    break
                if all(usable(c) for c in block_nodes(origin, shape, dims)):
                    best = (origin, shape)
                    break
        if best is not None:
            origin, shape = best
            coords = sorted(set(block_nodes(origin, shape, dims)))
            picks = [(grid[c], list(range(full))) for c in coords]
            return cmap._mark(owner, picks)
    return None


# ------------------------------------------------------------------------------
# component

STOP = object()


class Scheduler:
    """Message-driven allocation and release over one :class:`CoreMap`.

    ``emit(unit)`` receives units that got slots (already in
    A_EXECUTING_PENDING); ``sink(unit)`` receives units that reached a final
    state here (FAILED for impossible requests, CANCELED at shutdown).
    """

    def __init__(self, layout: NodeLayout, emit: Callable, sink: Callable,
                 kind: str = 'continuous', profiler=NULL_PROFILER,
                 maxsize: int = 0, name: str = 'scheduler'):
        if kind not in ('continuous', 'torus'):
            raise ValueError('unknown scheduler kind %r' % kind)
        if kind == 'torus' and not layout.topology.is_torus:
            raise ValueError('torus scheduler needs a torus layout')
        self.kind = kind
        self.map = CoreMap(layout)
        self.name = name
        self.profiler = profiler
        self.inbox: queue.Queue = queue.Queue(maxsize)
        self.releases: queue.Queue = queue.Queue()
        self._emit = emit
        self._sink = sink
        self._lock = threading.Lock()
        # held by the release strand while it drains and forwards, so no unit
        # is emitted after allocation has reported itself stopped
        self._fwd_lock = threading.Lock()
        self._wait: collections.deque = collections.deque()
        self._stopping = False
        self._threads = []
        self.scheduled = 0
        self.canceled = 0
        self.on_stopped = None

    def start(self):
        self._threads = [
            threading.Thread(target=self._alloc_loop, name=self.name, daemon=True),
            threading.Thread(target=self._release_loop,
                             name=self.name + '.release', daemon=True)]
        for t in self._threads:
            t.start()

    def join(self, timeout=None):
        for t in self._threads:
            t.join(timeout)

    @property
    def waiting(self) -> int:
        with self._lock:
            return len(self._wait)

    # --------------------------------------------------------------------------
    def _try(self, unit, comp):
        cores = unit.description.cores
        if self.kind == 'torus':
            n = math.ceil(cores / self.map.cores_per_node)
            slots = allocate_torus(self.map, n, owner=unit.uid)
        else:
            slots = allocate_continuous(self.map, cores,
                                        single_node=not unit.description.mpi,
                                        owner=unit.uid)
        if slots is not None:
            unit.slots = slots
            unit.owns_slots = True
            self.profiler.record(unit.uid, comp, 'schedule_ok',
                                 'cores=%d' % slots.total_cores)
        return slots

    def _drain_waitlist(self, comp) -> list:
        # FIFO, no backfill: stop at the first parked unit that does not fit
        ready = []
        while self._wait and not self._stopping:
            if self._try(self._wait[0], comp) is None:
                break
            ready.append(self._wait.popleft())
        return ready

    def _forward(self, units, comp):
        for u in units:
            advance(u, UnitState.A_EXECUTING_PENDING, profiler=self.profiler,
                    component=comp)
            self.scheduled += 1
            self._emit(u)

    def _alloc_loop(self):
        comp = self.name
        while True:
            unit = self.inbox.get()
            if unit is STOP:
                break
            advance(unit, UnitState.A_SCHEDULING, profiler=self.profiler,
                    component=comp)
            ready = []
            failed = None
            with self._lock:
                if self._wait:
                    self._wait.append(unit)
                else:
                    try:
                        if self._try(unit, comp) is None:
                            self._wait.append(unit)
                        else:
                            ready.append(unit)
                    except RequestTooLarge as exc:
                        failed = exc
            if failed is not None:
                unit.diagnostic = str(failed)
                advance(unit, UnitState.FAILED, profiler=self.profiler,
                        component=comp, detail='request too large')
                self._sink(unit)
            self._forward(ready, comp)

        with self._lock:
            self._stopping = True
            parked = list(self._wait)
            self._wait.clear()
        with self._fwd_lock:
            pass
        for unit in parked:
            advance(unit, UnitState.CANCELED, profiler=self.profiler,
                    component=comp, detail='shutdown')
            self.canceled += 1
            self._sink(unit)
        if self.on_stopped is not None:
            self.on_stopped()

    def _release_loop(self):
        comp = self.name + '.release'
        while True:
            msg = self.releases.get()
            if msg is STOP:
                return
            uid, slots = msg
            with self._fwd_lock:
                with self._lock:
                    release(self.map, slots)
                    self.profiler.record(uid, comp, 'unschedule',
                                         'cores=%d' % slots.total_cores)
                    ready = self._drain_waitlist(comp)
                self._forward(ready, comp)

    # --------------------------------------------------------------------------
    def release_unit(self, unit):
        """Queue release of the unit's cores, if it still owns them."""
        if unit.owns_slots and unit.slots is not None:
            unit.owns_slots = False
            self.releases.put((unit.uid, unit.slots))

    def stop_allocation(self):
        self.inbox.put(STOP)

    def stop_release(self):
        self.releases.put(STOP)
