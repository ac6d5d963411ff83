"""Port-Hamiltonian modelling, simulation and identification of a HASEL-driven 3PS platform."""

__version__ = "0.1.0"

from .core import (  # noqa: E402
    PARAM_NAMES,
    TABLE1_PARAMS,
    ActuatorParams,
    ActuatorState,
    DomainError,
    SharedConstants,
    SystemState,
    delta1,
    dynamic_capacitance,
    grad_hamiltonian,
    hamiltonian,
    rest_state,
    shell_area,
    zipped_length,
)
from .dynamics import (  # noqa: E402
    DEFAULT_U0,
    SineInput,
    TabulatedInput,
    output_y,
    prismatic_heights,
    structure_matrices,
    vector_field,
)
from .integrator import SolverConfig, StiffnessFailure, Trajectory, integrate, integrate_actuator  # noqa: E402
from .kinematics import DegenerateGeometry, PlatformGeometry, SingularNormal, fkm, ikm  # noqa: E402
from .identification import (  # noqa: E402
    DegenerateSignal,
    IdentProblem,
    IdentResult,
    LMConfig,
    heights_from_tip,
    identify,
    nrmse_fit,
    pooled_fit,
    residuals,
    simulate_heights,
)
