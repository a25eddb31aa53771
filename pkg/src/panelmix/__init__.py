"""Finite mixture normal panel regression: penalized EM and component-count tests."""

from .asymdist import NullDistribution, critical_value, p_value, project_cone, simulate_null, vmap
from .dgp import DGPSpec, ExperimentCell, generate, run_experiment
from .em import (
    EMConfig,
    FitResult,
    RestrictionSpec,
    build_restriction,
    e_step,
    em_k_steps,
    fit_pmle,
    fit_restricted,
    m_step,
)
from .model import (
    ComponentParams,
    MixtureParams,
    PanelDataset,
    canonicalize,
    component_loglik,
    mixture_loglik,
    posterior_weights,
)
from .penalty import PenaltyConfig, compute_an, misclassification, p_tau, pn_sigma, total_penalty
from .scores import InformationBlocks, ScoreBundle, hermite, hermite_scaled, information, score_general, score_homogeneity
from .sht import SelectionResult, information_criteria, select_sht
from .testing import TestOutcome, bootstrap_test, demonstrate_unboundedness, em_test, plrt

__version__ = "0.1.0"
