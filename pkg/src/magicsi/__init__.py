"""Selective inference after randomized l1-penalized programs."""

from .exceptions import (ArgumentError, ConfigError, ConstraintViolationError,
                         ConvergenceError, DataError, GridTooCoarseError,
                         InfeasibleTruncationError, MagicError, ModelFitError,
                         SamplerInitError, SingularSelectionError)
from .inference import (InferenceResult, ks_uniformity, power_estimate, selective_ci,
                        selective_pvalue, tilted_pvalue)
from .models import (GaussianLinearModel, GraphicalModel, LogisticModel, NodeEvents,
                     fit_unpenalized_mle, symmetrize_edges)
from .randomization import Family, RandomizationDist, gaussian, laplace
from .sampler import SampleSet, SamplerConfig, adapt_step, run_chain
from .solver import (Logistic, NodeRegression, ProgramSpec, SelectionEvent, Solution,
                     SquaredError, jacobian_logdet, kkt_residual, reconstruct_omega,
                     solve_randomized)
from .state import ChainState

__version__ = "0.1.0"
