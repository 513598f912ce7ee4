from pii.nuisance.crossfit import CrossFitPlan, GridResult, fit_predict_crossfit, grid_select, make_plan
from pii.nuisance.forest import ForestModel, fit_forests
from pii.nuisance.learners import LearnerSpec, derive_seeds, fit_predict

__all__ = [
    "CrossFitPlan", "ForestModel", "GridResult", "LearnerSpec", "derive_seeds",
    "fit_forests", "fit_predict", "fit_predict_crossfit", "grid_select", "make_plan",
]
