"""Reference implementations the package is checked against.

Each oracle is written from the behavioural contract alone, as plainly as
possible, and shares no code with ``pilotrt``.
"""

import itertools
import math

# ------------------------------------------------------------------------------
# state machines, written out edge by edge

PILOT_EDGES = {
    ('NEW', 'PM_LAUNCH'), ('PM_LAUNCH', 'P_ACTIVE'), ('P_ACTIVE', 'DONE'),
}
for _s in ('NEW', 'PM_LAUNCH', 'P_ACTIVE'):
    PILOT_EDGES |= {(_s, 'CANCELED'), (_s, 'FAILED')}

UNIT_EDGES = {
    ('NEW', 'UM_SCHEDULING'),
    ('UM_SCHEDULING', 'UM_STAGING_IN'),
    ('UM_SCHEDULING', 'A_STAGING_IN'),      # no client-side input
    ('UM_SCHEDULING', 'A_SCHEDULING'),      # no input staging at all
    ('UM_STAGING_IN', 'A_STAGING_IN'),
    ('UM_STAGING_IN', 'A_SCHEDULING'),      # no agent-side input
    ('A_STAGING_IN', 'A_SCHEDULING'),
    ('A_SCHEDULING', 'A_EXECUTING_PENDING'),
    ('A_EXECUTING_PENDING', 'A_EXECUTING'),
    ('A_EXECUTING', 'A_STAGING_OUT_PENDING'),
    ('A_STAGING_OUT_PENDING', 'A_STAGING_OUT'),
    ('A_STAGING_OUT_PENDING', 'UM_STAGING_OUT'),   # no agent-side output
    ('A_STAGING_OUT_PENDING', 'DONE'),             # no output staging at all
    ('A_STAGING_OUT', 'UM_STAGING_OUT'),
    ('A_STAGING_OUT', 'DONE'),
    ('UM_STAGING_OUT', 'DONE'),
}
for _s in ('NEW', 'UM_SCHEDULING', 'UM_STAGING_IN', 'A_STAGING_IN', 'A_SCHEDULING',
           'A_EXECUTING_PENDING', 'A_EXECUTING', 'A_STAGING_OUT_PENDING',
           'A_STAGING_OUT', 'UM_STAGING_OUT'):
    UNIT_EDGES |= {(_s, 'CANCELED'), (_s, 'FAILED')}


def unit_path(client_in, agent_in, agent_out, client_out):
    """Forward unit path given which staging kinds have directives."""
    path = ['NEW', 'UM_SCHEDULING']
    if client_in:
        path.append('UM_STAGING_IN')
    if agent_in:
        path.append('A_STAGING_IN')
    path += ['A_SCHEDULING', 'A_EXECUTING_PENDING', 'A_EXECUTING',
             'A_STAGING_OUT_PENDING']
    if agent_out:
        path.append('A_STAGING_OUT')
    if client_out:
        path.append('UM_STAGING_OUT')
    path.append('DONE')
    return path


# ------------------------------------------------------------------------------
# continuous first-fit

class FirstFitOracle:
    """Cores as a set of (node, core) pairs; first fit by brute force."""

    def __init__(self, nodes, cores_per_node):
        self.nodes = nodes
        self.cpn = cores_per_node
        self.busy = set()
        self.held = {}

    def all_cores(self):
        return [(n, c) for n in range(self.nodes) for c in range(self.cpn)]

    def allocate(self, owner, k, single_node):
        if k > self.nodes * self.cpn or (single_node and k > self.cpn):
            return 'TOO_LARGE'
        free = [x for x in self.all_cores() if x not in self.busy]
        if single_node:
            pick = None
            for n in range(self.nodes):
                on_node = [x for x in free if x[0] == n]
                if len(on_node) >= k:
                    pick = on_node[:k]
                    break
        else:
            pick = free[:k] if len(free) >= k else None
        if pick is None:
            return None
        self.busy |= set(pick)
        self.held[owner] = pick
        return pick

    def release(self, owner):
        for x in self.held.pop(owner):
            self.busy.remove(x)


# ------------------------------------------------------------------------------
# torus blocks

def torus_candidates(dims, k):
    """All axis-aligned blocks (origin, shape) with power-of-two extents."""
    ext = [[e for e in range(1, d + 1) if e & (e - 1) == 0] for d in dims]
    for shape in itertools.product(*ext):
        if math.prod(shape) < k:
            continue
        for origin in itertools.product(*[range(d) for d in dims]):
            cells = frozenset(
                tuple((o + i) % d for o, i, d in zip(origin, off, dims))
                for off in itertools.product(*[range(e) for e in shape]))
            yield origin, shape, cells


def torus_oracle(dims, k, busy, present=None):
    """Exhaustively pick the minimal-surplus free block; ties by (origin, shape)."""
    best = None
    for origin, shape, cells in torus_candidates(dims, k):
        if present is not None and not cells <= present:
            continue
        if cells & busy:
            continue
        key = (math.prod(shape) - k, origin, shape)
        if best is None or key < best[0]:
            best = (key, cells)
    return None if best is None else set(best[1])


# ------------------------------------------------------------------------------
# metrics

def riemann_busy_integral(intervals, t0, t1):
    """Integrate Σ cores over [t0, t1] one microsecond boundary at a time."""
    cuts = sorted({t0, t1} | {t for _, s, e, _ in intervals for t in (s, e)
                              if t0 <= t <= t1})
    total = 0
    for a, b in zip(cuts, cuts[1:]):
        mid2 = a + b          # compare at the midpoint without fractions
        level = sum(c for _, s, e, c in intervals if 2 * s <= mid2 < 2 * e)
        total += level * (b - a)
    return total


def utilization_oracle(intervals, t0, t1, cores):
    return riemann_busy_integral(intervals, t0, t1) / (cores * (t1 - t0))


# ------------------------------------------------------------------------------
# resource manager

def fifo_rm_oracle(total_nodes, cpn, script):
    """Replay submit/release steps; return activation order of handles.

    ``script`` is a list of ('submit', handle, cores) / ('release', handle).
    """
    free = total_nodes
    queue = []
    active = {}
    order = []
    for step in script:
        if step[0] == 'submit':
            queue.append((step[1], -(-step[2] // cpn)))
        else:
            h = step[1]
            if h in active:
                free += active.pop(h)
            else:
                queue = [q for q in queue if q[0] != h]
        while queue and queue[0][1] <= free:
            h, n = queue.pop(0)
            free -= n
            active[h] = n
            order.append(h)
    return order
