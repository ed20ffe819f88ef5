"""Three-phase radial feeder state estimation toolkit.

Estimates bus voltages two ways -- classic weighted-least-squares
(Gauss-Newton) and topology-pruned neural networks -- and benchmarks
them across observability scenarios on synthetic measurement data.
"""

from dsse.grid_model import (
    Branch,
    Bus,
    FeederModel,
    FeederValidationError,
    Load,
    PhaseSet,
    dump_feeder,
    load_feeder,
)
from dsse.powerflow import PowerFlowResult, StateVector, solve_power_flow, voltage_magnitudes
from dsse.measurements import (
    Measurement,
    MeasurementSet,
    jacobian_rows,
    measurement_function,
    plan_measurements,
    synthesize,
)
from dsse.wls import NonConvergedError, UnobservableError, WlsConfig, WlsReport, estimate, objective
from dsse.partitioning import (
    MaskPlan,
    ParamCount,
    Partition,
    build_mask_plan,
    count_params,
    partition_at_pmus,
    partition_diameters,
)
from dsse.network import EvalReport, MaskedNetwork, TrainConfig, embed_input, evaluate, train

__version__ = "0.1.0"
