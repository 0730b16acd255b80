"""Synthetic benchmark workloads."""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass
from typing import Optional

from .model import UnitDescription

# busy loop for the spin variant; keeps one core occupied for N seconds
_SPIN = ('import sys,time\n'
         't=time.monotonic()+float(sys.argv[1])\n'
         'while time.monotonic()<t: pass\n')


@dataclass
class WorkloadSpec:
    """Homogeneous bag of units.

    Give ``generations`` to size the workload to the pilot: it then holds
    ``generations * pilot_cores / cores_per_unit`` units.
    """
    n_units: Optional[int] = None
    unit_duration: float = 1.0
    cores_per_unit: int = 1
    generations: Optional[int] = None
    executable: str = 'sleep'

    def validate(self):
        if self.unit_duration < 0:
            raise ValueError('unit_duration must be >= 0')
        if self.cores_per_unit < 1:
            raise ValueError('cores_per_unit must be >= 1')
        if self.n_units is not None and self.n_units < 1:
            raise ValueError('n_units must be >= 1')
        if self.generations is not None and self.generations < 1:
            raise ValueError('generations must be >= 1')
        if self.n_units is None and self.generations is None:
            raise ValueError('give n_units or generations')
        if self.executable not in ('sleep', 'spin', 'true'):
            raise ValueError('executable must be sleep, spin or true')
        return self

    def units_per_generation(self, pilot_cores: int) -> int:
        per = pilot_cores // self.cores_per_unit
        if per < 1:
            raise ValueError('a %d-core unit does not fit a %d-core pilot'
                             % (self.cores_per_unit, pilot_cores))
        return per

    def resolve(self, pilot_cores: int) -> 'WorkloadSpec':
        """Return a copy with both ``n_units`` and ``generations`` filled in."""
        self.validate()
        per = self.units_per_generation(pilot_cores)
        n, g = self.n_units, self.generations
        if g is not None and n is not None and math.ceil(n / per) != g:
            raise ValueError('%d units do not make %d generations of up to %d'
                             % (n, g, per))
        if n is None:
            n = g * per
        if g is None:
            g = math.ceil(n / per)
        return WorkloadSpec(n, self.unit_duration, self.cores_per_unit, g,
                            self.executable)

    def description(self) -> UnitDescription:
        d = self.unit_duration
        if self.executable == 'sleep':
            exe, args = '/bin/sleep', ['%g' % d]
        elif self.executable == 'spin':
            exe, args = sys.executable, ['-c', _SPIN, '%g' % d]
        else:
            exe, args = '/bin/true', []
        return UnitDescription(exe, args, cores=self.cores_per_unit,
                               mpi=self.cores_per_unit > 1)

    def descriptions(self, pilot_cores: Optional[int] = None) -> list:
        spec = self.resolve(pilot_cores) if pilot_cores else self.validate()
        return [spec.description() for _ in range(spec.n_units)]

    def generation_slices(self, pilot_cores: int) -> list:
        """Descriptions split into pilot-sized generations."""
        spec = self.resolve(pilot_cores)
        per = spec.units_per_generation(pilot_cores)
        descs = spec.descriptions(pilot_cores)
        return [descs[i:i + per] for i in range(0, len(descs), per)]

    def optimal_ttc(self, pilot_cores: int) -> float:
        return self.resolve(pilot_cores).generations * self.unit_duration
