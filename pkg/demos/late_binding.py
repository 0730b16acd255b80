"""Submit units before any pilot exists; they bind to the first pilot that becomes active.

    python demos/late_binding.py
"""

import tempfile
import time
from collections import Counter

from pilotrt import (PilotDescription, PilotManager, Profiler, UnitDescription,
                     UnitManager)
from pilotrt.channel import WorkloadChannel
from pilotrt.resource import ResourceConfig


def main():
    session = tempfile.mkdtemp(prefix='late-binding-')
    prof = Profiler()
    channel = WorkloadChannel(profiler=prof)
    pm = PilotManager(session, channel, prof, {'box': ResourceConfig('box', 2, 4)})
    um = UnitManager(channel, prof, session_dir=session)
    um.add_pilot_manager(pm)

    units = um.submit_units([UnitDescription('/bin/sleep', ['0.2']) for _ in range(16)])
    time.sleep(0.3)
    print('before any pilot:', Counter(u.state.value for u in units))

    pilots = pm.submit_pilots([PilotDescription(4, 60, 'box'),
                               PilotDescription(4, 60, 'box')])
    um.wait_units(timeout=60)
    print('after:', um.counts())
    print('units per pilot:', Counter(u.pilot for u in units))
    for p in pilots:
        pm.terminate(p.uid, timeout=20)
        print(p.uid, p.state.value)
    pm.close()
    um.close()
    print('session in', session)


if __name__ == '__main__':
    main()
