"""Debiased flow matching for counterfactual outcome distributions."""

from .coupling import CouplingPlan, eot_conditional_resample, resample_indices, sinkhorn_duals, sinkhorn_plan
from .loss import dr_fm_step_eot, dr_fm_step_indep, pairwise_fm_loss, weighted_pair_loss
from .model import FlowModel, sample_counterfactual, train, write_loss_log
from .problem import TrainConfig, TrainingProblem, prepare_problem
from .tilt import FeatureMap, TiltWeights, dr_moment_estimate, fit_tilt, random_cosine_features

__all__ = [
    "CouplingPlan", "FeatureMap", "FlowModel", "TiltWeights", "TrainConfig", "TrainingProblem",
    "dr_fm_step_eot", "dr_fm_step_indep", "dr_moment_estimate", "eot_conditional_resample",
    "fit_tilt", "pairwise_fm_loss", "prepare_problem", "random_cosine_features",
    "resample_indices", "sample_counterfactual", "sinkhorn_duals", "sinkhorn_plan", "train",
    "weighted_pair_loss", "write_loss_log",
]
