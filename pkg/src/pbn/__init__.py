"""Projected belief networks with saddle-point layer densities."""

from .errors import (AlignmentError, ConfigError, DomainError, FormatError, GroupError,
                     InfeasibleTarget, LengthError, NoConvergence, PBNError, PlanError,
                     ShapeError, SingularJacobian, SingularMatrix, TrainingStall, Unclassifiable)
from .linops import ComposedMap, ConvMap, DenseMap, LinearMap, spd_solve
from .maxent import GAUSSIAN, TRUNCATED_EXPONENTIAL, TRUNCATED_GAUSSIAN, get_prior
from .network import (LINEAR, SIGMOID, TG, Group, LayerSpec, NetworkSpec, forward_pass,
                      glg_compose, jacobian_logdet, pbn_log_likelihood)
from .saddle import (DirectEstimator, fit_direct_estimator, log_p0z, solve_gaussian,
                     solve_newton)

__version__ = "0.1.0"
