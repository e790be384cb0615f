"""Actor-critic deep Galerkin solver for Principal-Agent HJB equations.

Typical use::

    from deeppaac import get_problem, TrainConfig, train
    prob = get_problem("continuous_payment")
    report = train(prob, TrainConfig.for_problem(prob, seed=1))
"""

from .autodiff import JetValue, NonFiniteError, Tape, check_against_fd
from .diagnostics import GridSpec, MetricRecord, analytic_error_grid, export_grid, monotonicity_checks, parse_grid, validate
from .networks import ControlSurrogate, NetConfig, Network, ValueSurrogate
from .problems import PROBLEMS, ProblemSpec, UnsupportedError, get_problem
from .sampling import Domain, SampleDesign, draw_batch, make_validation
from .trainer import TrainConfig, lr_at, train

__version__ = "0.1.0"

__all__ = [
    "JetValue",
    "NonFiniteError",
    "Tape",
    "check_against_fd",
    "GridSpec",
    "MetricRecord",
    "analytic_error_grid",
    "export_grid",
    "monotonicity_checks",
    "parse_grid",
    "validate",
    "ControlSurrogate",
    "NetConfig",
    "Network",
    "ValueSurrogate",
    "PROBLEMS",
    "ProblemSpec",
    "UnsupportedError",
    "get_problem",
    "Domain",
    "SampleDesign",
    "draw_batch",
    "make_validation",
    "TrainConfig",
    "lr_at",
    "train",
]
