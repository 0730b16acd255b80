"""Isolated throughput of each agent component using clone/drop runs.

    python demos/component_throughput.py [clone_factor]
"""

import sys
import tempfile

from pilotrt.agent import COMPONENTS
from pilotrt.bench import run_micro


def main(clones=2000):
    out = tempfile.mkdtemp(prefix='micro-')
    for comp in COMPONENTS:
        meta = run_micro(comp, clones, out_dir=out)
        s = meta['summary']
        print('%-10s [%.0f +/- %.0f]/s over %d windows of %gs  audit=%s'
              % (comp, s['mean'], s['stdev'], s['windows'], s['window'],
                 'ok' if meta['audit']['ok'] else 'FAILED'))
    print('profiles and CSVs in', out)


if __name__ == '__main__':
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 2000)
