"""Pilot-job runtime for many-task workloads on a local simulated machine."""

__version__ = '0.1.0'

from .model import (PilotDescription, PilotState, StagingDirective, StagingMode,
                    Unit, UnitDescription, UnitState, advance, validate_transition)
from .resource import ResourceManager, load_resource_config
from .agent import Agent, AgentConfig, CloneSpec
from .managers import BarrierMode, PilotManager, UnitManager, run_scenario
from .profiler import Profiler
from .workload import WorkloadSpec

__all__ = ['PilotDescription', 'PilotState', 'StagingDirective', 'StagingMode',
           'Unit', 'UnitDescription', 'UnitState', 'advance', 'validate_transition',
           'ResourceManager', 'load_resource_config', 'Agent', 'AgentConfig',
           'CloneSpec', 'BarrierMode', 'PilotManager', 'UnitManager', 'run_scenario',
           'Profiler', 'WorkloadSpec']
