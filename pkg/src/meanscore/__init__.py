"""Two-phase mean score estimation and validation design for discrete-time survival models."""
__version__ = "0.1.0"

from .errors import (ConvergenceError, DataError, EstimationError, MeanScoreError,
                     SingularMatrixError)
from .kernels import BACKEND
from .model import (Cohort, FitResult, LinkKind, SubjectRecord, ThetaParams, fit_weighted,
                    hazard, hessian, loglik, score, survival_curve)
from .strata import StratumKey, StratumTable, build_strata
from .mean_score import mean_score_fit, sandwich_variance
from .design import (Allocation, NuisanceEstimates, adaptive_allocation, balanced_allocation,
                     optimal_allocation, oracle_nuisance, pilot_nuisance, sample_allocation,
                     srs_allocation, undersampled_pilot)
from .cox import ContinuousRecord, cox_fit, discretize_equivalence_check
