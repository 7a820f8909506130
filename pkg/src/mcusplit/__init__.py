"""Split CNN inference across fleets of memory-constrained workers:
partition planning, virtual-time execution simulation and verification
against a dense single-node reference."""

from .allocator import (
    DEFAULT_CALIBRATION,
    CalibrationRecord,
    K1Table,
    Plan,
    WorkerSpec,
    build_plan,
    load_fleet,
    partition_ranges,
    uniform_fleet,
)
from .errors import (
    AllocationError,
    DeploymentFault,
    FusionError,
    InfeasibleCapacityError,
    ModelError,
    OutOfMemoryFault,
    ProtocolError,
    SimulationFault,
    StructuralError,
    UnsupportedOperatorError,
)
from .model import (
    Model,
    ReceptiveField,
    TensorShape,
    fuse_conv_bn_relu,
    get_input,
    quantize,
    reinterpret,
    save_model,
)
from .oracle import EquivalenceVerdict, brute_force_dependencies, check_equivalence, reference_forward
from .routing import BoundaryRouting, plan_all_boundaries
from .runtime import RunResult, execute, simulate_timing, track_peak_memory, traffic_report

__version__ = "0.1.0"

__all__ = [
    "AllocationError",
    "BoundaryRouting",
    "CalibrationRecord",
    "DEFAULT_CALIBRATION",
    "DeploymentFault",
    "EquivalenceVerdict",
    "FusionError",
    "InfeasibleCapacityError",
    "K1Table",
    "Model",
    "ModelError",
    "OutOfMemoryFault",
    "Plan",
    "ProtocolError",
    "ReceptiveField",
    "RunResult",
    "SimulationFault",
    "StructuralError",
    "TensorShape",
    "UnsupportedOperatorError",
    "WorkerSpec",
    "brute_force_dependencies",
    "build_plan",
    "check_equivalence",
    "execute",
    "fuse_conv_bn_relu",
    "get_input",
    "load_fleet",
    "partition_ranges",
    "plan_all_boundaries",
    "quantize",
    "reference_forward",
    "reinterpret",
    "save_model",
    "simulate_timing",
    "track_peak_memory",
    "traffic_report",
    "uniform_fleet",
]
