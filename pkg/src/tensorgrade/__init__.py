"""Patch-based grading of deformation tensor fields.

From displacement volumes to Jacobians, deformation tensors, log-Euclidean
grading maps, elastic-net voxel selection, global grading scores and SVM
evaluation under repeated stratified cross-validation.
"""

from .classify import (
    EvaluationReport,
    FeatureRow,
    FeatureTable,
    LinearSVM,
    MetricValues,
    SvmModel,
    metrics,
    stratified_cv,
    svm_predict,
    svm_train,
)
from .grading import (
    GradingMap,
    LibraryEntry,
    PatchDistanceCache,
    PatchGrader,
    TemplateLibrary,
    build_library,
    grade_map,
    grade_templates,
    grade_voxel,
    patch_distance,
    patch_distance_field,
)
from .io import load_mask, load_volume, save_mask, save_volume
from .phantom import PhantomConfig, generate_population, generate_subject
from .pipeline import PipelineResult, RunConfig, run_pipeline
from .selection import (
    CoefficientMap,
    DesignMatrix,
    ElasticNetSelector,
    GlobalGrading,
    elastic_net_fit,
    fit_coefficient_map,
    global_grading,
    kkt_violation,
)
from .tensors import (
    deformation_tensor,
    deformation_tensor_field,
    displacement_to_log_tensor,
    jacobian_field,
    log_distance_field,
    log_distance_voxel,
    log_tensor_field,
    sym_eigen,
    tensor_exp,
    tensor_log,
)
from .volume import BoundingBox, RoiMask, SubjectMeta, Volume, crop, union_bbox

__version__ = "0.1.0"
