"""Exception taxonomy shared across the pipeline.

The CLI maps these onto distinct exit codes, so keep the hierarchy flat and
stable: model/description problems, allocation problems, simulation faults.
"""


class ModelError(Exception):
    """Problem with a model description or its structural metadata."""


class StructuralError(ModelError):
    """Layer chain is shape-inconsistent; names the offending layer."""


class UnsupportedOperatorError(ModelError):
    """Layer kind the pipeline does not handle."""


class FusionError(ModelError):
    """BatchNorm folding attempted on a layer that is not conv-preceded."""


class BoundsError(ModelError, IndexError):
    """Coordinates outside a layer's output (or input) shape."""


class AllocationError(ValueError):
    """Workload allocation is impossible (e.g. all ratings zero)."""


class InfeasibleCapacityError(AllocationError):
    """Fleet storage limits sum to less than the model size (Eq. 7 precondition)."""


class SimulationFault(RuntimeError):
    """Fault raised by the execution simulator, mirroring an on-device failure."""

    def __init__(self, message: str, worker: int | None = None, layer: int | None = None):
        super().__init__(message)
        self.worker = worker
        self.layer = layer


class OutOfMemoryFault(SimulationFault):
    """A worker's RAM gauge exceeded its limit; simulation halts."""


class DeploymentFault(SimulationFault):
    """A worker's weight fragments do not fit its flash storage."""


class ProtocolError(SimulationFault):
    """A worker was asked to compute without all required activations."""
