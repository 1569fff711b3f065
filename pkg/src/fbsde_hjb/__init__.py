"""Extended-HJB policy iteration and Monte Carlo verification for controlled FBSDEs."""

from .errors import CFLError, ConfigError, ExpressionError, NonFiniteError, SingularSystemError
from .grid import GridSpec, ScalarField, solve_g
from .hjb import FieldPair, SolveReport, solve_extended_hjb
from .mc import CostEstimate, PathEnsemble, backward_regression, check_dpp, estimate_cost, simulate_forward
from .policy import FeedbackPolicy
from .problem import ProblemSpec, check_assumptions, from_expressions, transform_gamma

__version__ = "0.1.0"
