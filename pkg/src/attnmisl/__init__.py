"""Attention-based multiple-instance survival learning on patch features."""

from .clustering import PhenotypeAssignment, PhenotypeTensor, build_phenotype_tensors, kmeans_cluster
from .cohort import (
    Cohort,
    PatientBag,
    SurvivalLabel,
    generate_synthetic_cohort,
    load_manifest,
    load_patient_features,
    save_patient_features,
    split_cohort,
)
from .cox import cox_loss, cox_loss_gradient
from .errors import DataError, NumericalError
from .metrics import concordance_index, kaplan_meier, log_rank_test, median_risk_split, survival_auc
from .model import (
    ModelConfig,
    RiskOutput,
    attention_pool,
    init_params,
    mi_fcn_forward,
    model_gradient,
    risk_forward,
)
from .training import TrainConfig, TrainedModel, adam_step, cross_validate, ensemble_predict, train

__version__ = "0.1.0"
