from .params import (
    ControllerRanges,
    PerturbationSpec,
    SimConfig,
    VehicleParams,
    nominal_vehicle,
    perturb_plant,
)
from .track import ReferenceTrajectory, TrackConfig, generate_oval_reference, match_reference
from .dynamics import dynamics, integrate_step, tire_forces
from .controller import lateral_controller, longitudinal_controller, new_controller_state
from .lap import LapResult, rms, run_lap, second_derivative, tracking_cost

__all__ = [
    "ControllerRanges", "PerturbationSpec", "SimConfig", "VehicleParams",
    "nominal_vehicle", "perturb_plant", "ReferenceTrajectory", "TrackConfig",
    "generate_oval_reference", "match_reference", "dynamics",
    "integrate_step", "tire_forces", "lateral_controller",
    "longitudinal_controller", "new_controller_state", "LapResult", "rms",
    "run_lap", "second_derivative", "tracking_cost",
]
