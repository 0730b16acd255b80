"""Same workload under the three barrier modes; prints TTC and idle troughs.

    python demos/barrier_modes.py [cores] [generations] [duration]
"""

import sys
import tempfile

from pilotrt import BarrierMode, WorkloadSpec, run_scenario


def main(cores=8, generations=3, duration=1.0):
    spec = WorkloadSpec(unit_duration=duration, generations=generations)
    for mode in BarrierMode:
        rep = run_scenario(spec, mode, cores, 'local', tempfile.mkdtemp(),
                           channel_latency=0.01)
        print('%-12s cores=%d units=%d optimal=%.1fs ttc=%6.2fs ttc_a=%6.2fs '
              'utilization=%.3f troughs=%d'
              % (mode.value, rep.pilot_cores, rep.n_units, rep.optimal_ttc, rep.ttc,
                 rep.ttc_a, rep.utilization, rep.troughs))


if __name__ == '__main__':
    args = sys.argv[1:]
    main(int(args[0]) if args else 8,
         int(args[1]) if len(args) > 1 else 3,
         float(args[2]) if len(args) > 2 else 1.0)
