"""Drive the package and an oracle through the same trace and compare."""

import math
import random

from oracles import FirstFitOracle, torus_candidates, torus_oracle
from pilotrt.resource import NodeLayout, Topology
from pilotrt.scheduler import (CoreMap, RequestTooLarge, allocate_continuous,
                               allocate_torus, release)


def flat(slots):
    return [(int(n.split('-')[1]), c) for n, cores in slots.nodes for c in cores]


def continuous_trace(rng: random.Random, nodes: int, cpn: int, steps: int):
    """Random allocate/release trace; returns the number of compared steps."""
    layout = NodeLayout(['node-%04d' % i for i in range(nodes)], cpn)
    cmap = CoreMap(layout)
    oracle = FirstFitOracle(nodes, cpn)
    held = []
    for k in range(steps):
        if held and rng.random() < 0.4:
            owner, slots = held.pop(rng.randrange(len(held)))
            release(cmap, slots)
            oracle.release(owner)
        else:
            owner = 'u%d' % k
            want = rng.randint(1, max(1, min(nodes * cpn, 2 * cpn)))
            single = rng.random() < 0.5
            expect = oracle.allocate(owner, want, single)
            try:
                got = allocate_continuous(cmap, want, single, owner)
            except RequestTooLarge:
                got = 'TOO_LARGE'
            if got is None or got == 'TOO_LARGE':
                assert got == expect, (k, want, single, got, expect)
            else:
                assert flat(got) == expect, (k, want, single, flat(got), expect)
                held.append((owner, got))
        busy = {(i, c) for i, vec in enumerate(cmap.cores)
                for c, v in enumerate(vec) if v}
        assert busy == oracle.busy
    return steps


def torus_trace(rng: random.Random, dims, steps: int, present=None):
    n = 1
    for d in dims:
        n *= d
    coords = [c for c in _all_coords(dims) if present is None or c in present]
    layout = NodeLayout(['node-' + '-'.join(map(str, c)) for c in coords], 2,
                        Topology('torus', dims), coords)
    cmap = CoreMap(layout)
    busy = set()
    held = []
    for k in range(steps):
        if held and rng.random() < 0.35:
            slots, cells = held.pop(rng.randrange(len(held)))
            release(cmap, slots)
            busy -= cells
            continue
        want = rng.randint(1, n)
        expect = torus_oracle(dims, want, busy, present)
        try:
            got = allocate_torus(cmap, want, 'u%d' % k)
        except RequestTooLarge:
            biggest = max(math.prod(s) for _, s, _ in torus_candidates(dims, 1))
            assert want > len(coords) or want > biggest
            assert expect is None
            continue
        if got is None:
            assert expect is None, (k, want, expect)
            continue
        cells = {layout.coords[i] for i in got.node_indices}
        assert cells == expect, (k, want, cells, expect)
        assert not cells & busy
        busy |= cells
        held.append((got, cells))
    return steps


def _all_coords(dims):
    import itertools
    return list(itertools.product(*[range(d) for d in dims]))
