"""Dose-response analysis of longitudinal randomised trials with a synthetic-trial
simulator for ground-truth checks."""

__version__ = "0.1.0"

from .data import ObservationTable, OutcomeInfo, TreatmentAssignment, ingest_csv, pool_items  # noqa: E402
from .design import ModelSpec, build_design  # noqa: E402
from .fixed import fisher_exact, fit_logistic, fit_ols, lr_test  # noqa: E402
from .mixed import compare_fixed_specs, extract_subject_slopes, fit_crossed_lmm, fit_lmm  # noqa: E402
from .contrasts import ReferenceGrid, condition_slopes, emm, lambda_equivalence, paired_contrast  # noqa: E402
from .multiplicity import HypothesisFamily, apply_hierarchy, bh_adjust  # noqa: E402
from .trajectory import classify_profiles, decoupling_ttest, proportion_test_one_sided  # noqa: E402
from .psychometrics import efa_uls, kmeans, polychoric, polychoric_matrix, score_anchored  # noqa: E402
from .simulate import TrialGroundTruth, simulate_binary_endpoint, simulate_frontier_panel, simulate_trial  # noqa: E402
