"""Simulated local resource manager.

Stands in for the batch system of an HPC machine: it knows the machine
layout, keeps a FIFO queue of pilot jobs and activates them, whole node by
whole node, as capacity allows.  Activation callbacks run on the manager's
own notifier thread.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
import threading
from dataclasses import dataclass, field
from importlib import resources as _pkg_resources
from pathlib import Path
from typing import Callable, Optional

log = logging.getLogger(__name__)


class CapacityExceeded(ValueError):
    """A pilot asked for more cores than the whole machine has."""


class UnknownHandle(KeyError):
    pass


class NotActive(RuntimeError):
    pass


# ------------------------------------------------------------------------------

@dataclass(frozen=True)
class Topology:
    kind: str = 'continuum'          # 'continuum' or 'torus'
    dims: tuple = ()

    def __post_init__(self):
        if self.kind not in ('continuum', 'torus'):
            raise ValueError('unknown topology %r' % self.kind)
        object.__setattr__(self, 'dims', tuple(int(d) for d in self.dims))
        if self.kind == 'torus':
            if not self.dims or any(d < 1 for d in self.dims):
                raise ValueError('torus needs positive dimensions')

    @property
    def is_torus(self):
        return self.kind == 'torus'

    def to_doc(self):
        if self.is_torus:
            return {'kind': 'torus', 'dims': list(self.dims)}
        return {'kind': 'continuum'}

    @classmethod
    def from_doc(cls, doc):
        if isinstance(doc, str):
            return cls(doc)
        return cls(doc.get('kind', 'continuum'), tuple(doc.get('dims', ())))


@dataclass
class ResourceConfig:
    resource_id: str
    nodes: int
    cores_per_node: int
    topology: Topology = field(default_factory=Topology)
    mpi_launch_method: str = 'FORK'
    serial_launch_method: str = 'FORK'
    spawner: str = 'direct'
    executors: int = 1
    stagers: int = 1
    description: str = ''

    def __post_init__(self):
        if self.nodes < 1 or self.cores_per_node < 1:
            raise ValueError('nodes and cores_per_node must be positive')
        if self.topology.is_torus and math.prod(self.topology.dims) != self.nodes:
            raise ValueError('torus dims %s do not cover %d nodes'
                             % (self.topology.dims, self.nodes))
        if self.executors < 1 or self.stagers < 1:
            raise ValueError('agent needs at least one executor and one stager')
        if self.spawner not in ('direct', 'shell'):
            raise ValueError('unknown spawner %r' % self.spawner)

    @property
    def total_cores(self) -> int:
        return self.nodes * self.cores_per_node

    @classmethod
    def from_doc(cls, doc: dict) -> 'ResourceConfig':
        lm = doc.get('launch_methods', {})
        agent = doc.get('agent_layout', {})
        return cls(resource_id=doc['resource_id'],
                   nodes=int(doc['nodes']),
                   cores_per_node=int(doc['cores_per_node']),
                   topology=Topology.from_doc(doc.get('topology', 'continuum')),
                   mpi_launch_method=lm.get('mpi', 'FORK'),
                   serial_launch_method=lm.get('serial', 'FORK'),
                   spawner=doc.get('spawner', 'direct'),
                   executors=int(agent.get('executors', 1)),
                   stagers=int(agent.get('stagers', 1)),
                   description=doc.get('description', ''))

    def to_doc(self) -> dict:
        return {'resource_id': self.resource_id,
                'description': self.description,
                'nodes': self.nodes,
                'cores_per_node': self.cores_per_node,
                'topology': self.topology.to_doc(),
                'launch_methods': {'mpi': self.mpi_launch_method,
                                   'serial': self.serial_launch_method},
                'spawner': self.spawner,
                'agent_layout': {'executors': self.executors,
                                 'stagers': self.stagers}}


def list_resource_configs() -> list:
    root = _pkg_resources.files('pilotrt') / 'resources'
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith('.json'))


def load_resource_config(name_or_path, **overrides) -> ResourceConfig:
    """Load a shipped profile by name, or a configuration file by path.

    Keyword overrides replace top-level fields of the document, e.g.
    ``load_resource_config('stampede', nodes=4)``.
    """
    path = Path(str(name_or_path))
    if path.suffix == '.json' and path.exists():
        doc = json.loads(path.read_text())
    else:
        res = _pkg_resources.files('pilotrt') / 'resources' / ('%s.json' % name_or_path)
        if not res.is_file():
            raise KeyError('no resource profile %r (known: %s)'
                           % (name_or_path, ', '.join(list_resource_configs())))
        doc = json.loads(res.read_text())
    for key, val in overrides.items():
        if key in ('executors', 'stagers'):
            doc.setdefault('agent_layout', {})[key] = val
        else:
            doc[key] = val
    return ResourceConfig.from_doc(doc)


# ------------------------------------------------------------------------------

@dataclass
class NodeLayout:
    node_ids: list
    cores_per_node: int
    topology: Topology = field(default_factory=Topology)
    coords: Optional[list] = None

    def __post_init__(self):
        if not self.node_ids:
            raise ValueError('empty node layout')
        if self.coords is not None:
            self.coords = [tuple(c) for c in self.coords]

    @property
    def total_cores(self) -> int:
        return len(self.node_ids) * self.cores_per_node

    def to_doc(self):
        doc = {'node_ids': list(self.node_ids),
               'cores_per_node': self.cores_per_node,
               'topology': self.topology.to_doc()}
        if self.coords is not None:
            doc['coords'] = [list(c) for c in self.coords]
        return doc

    @classmethod
    def from_doc(cls, doc):
        return cls(list(doc['node_ids']), int(doc['cores_per_node']),
                   Topology.from_doc(doc.get('topology', 'continuum')),
                   doc.get('coords'))


def node_name(index: int, topology: Topology) -> tuple:
    if topology.is_torus:
        coord = _unravel(index, topology.dims)
        return 'node-' + '-'.join(str(c) for c in coord), coord
    return 'node-%04d' % index, None


def _unravel(index, dims):
    coord = []
    for d in reversed(dims):
        coord.append(index % d)
        index //= d
    return tuple(reversed(coord))


# ------------------------------------------------------------------------------

@dataclass
class _Job:
    handle: int
    cores: int
    nodes_needed: int
    callback: Optional[Callable]
    node_indices: Optional[list] = None
    layout: Optional[NodeLayout] = None


class ResourceManager:
    """FIFO, whole-node pilot-job queue over a fixed machine layout."""

    def __init__(self, config: ResourceConfig):
        self.config = config
        names = [node_name(i, config.topology) for i in range(config.nodes)]
        self._names = [n for n, _ in names]
        self._coords = [c for _, c in names]
        self._free = [True] * config.nodes
        self._queue: list = []
        self._jobs: dict = {}
        self._handles = itertools.count(1)
        self._lock = threading.Condition()
        self._pending_callbacks: list = []
        self._closed = False
        self._notifier = threading.Thread(target=self._notify_loop,
                                          name='rm-%s' % config.resource_id,
                                          daemon=True)
        self._notifier.start()

    # --------------------------------------------------------------------------
    def submit_pilot_job(self, desc, callback: Optional[Callable] = None) -> int:
        """Queue a pilot job; ``callback(handle, layout)`` fires on activation."""
        if desc.cores > self.config.total_cores:
            raise CapacityExceeded('%d cores requested, %s has %d'
                                   % (desc.cores, self.config.resource_id,
                                      self.config.total_cores))
        with self._lock:
            job = _Job(next(self._handles), desc.cores,
                       math.ceil(desc.cores / self.config.cores_per_node), callback)
            self._jobs[job.handle] = job
            self._queue.append(job)
            self._schedule()
            return job.handle

    def release_pilot_job(self, handle: int):
        with self._lock:
            job = self._jobs.pop(handle, None)
            if job is None:
                raise UnknownHandle(handle)
            if job in self._queue:
                self._queue.remove(job)
            if job.node_indices:
                for i in job.node_indices:
                    self._free[i] = True
            self._schedule()

    def query_layout(self, handle: int) -> NodeLayout:
        with self._lock:
            job = self._jobs.get(handle)
            if job is None:
                raise UnknownHandle(handle)
            if job.layout is None:
                raise NotActive('pilot job %d is not active' % handle)
            return job.layout

    def is_active(self, handle: int) -> bool:
        with self._lock:
            job = self._jobs.get(handle)
            return job is not None and job.layout is not None

    def active_jobs(self) -> dict:
        with self._lock:
            return {h: list(j.node_indices) for h, j in self._jobs.items()
                    if j.node_indices is not None}

    def close(self):
        with self._lock:
            self._closed = True
            self._lock.notify_all()

    # --------------------------------------------------------------------------
    def _schedule(self):
        # strict FIFO: the head of the queue blocks everything behind it
        while self._queue:
            job = self._queue[0]
            free = [i for i, f in enumerate(self._free) if f]
            if len(free) < job.nodes_needed:
                break
            self._queue.pop(0)
            chosen = free[:job.nodes_needed]
            for i in chosen:
                self._free[i] = False
            job.node_indices = chosen
            coords = ([self._coords[i] for i in chosen]
                      if self.config.topology.is_torus else None)
            job.layout = NodeLayout([self._names[i] for i in chosen],
                                    self.config.cores_per_node,
                                    self.config.topology, coords)
            log.debug('activated pilot job %d on %d node(s)', job.handle,
                      len(chosen))
            if job.callback is not None:
                self._pending_callbacks.append(job)
        self._lock.notify_all()

    def _notify_loop(self):
        while True:
            with self._lock:
                while not self._pending_callbacks and not self._closed:
                    self._lock.wait()
                if self._closed and not self._pending_callbacks:
                    return
                batch, self._pending_callbacks = self._pending_callbacks, []
            for job in batch:
                try:
                    job.callback(job.handle, job.layout)
                except Exception:
                    log.exception('activation callback for job %d failed',
                                  job.handle)
