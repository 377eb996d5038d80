"""Active appearance models with bidirectional (template-side / image-side) warping fits."""

from .errors import DegenerateAnchors, DegenerateShape, NonDiffeomorphicUpdate, TrackingLost
from .evaluation import ExperimentConfig, Metrics, perturb_initialization, rmse, run_experiment
from .fitting import (FitState, Fitter, FitterConfig, WarpParams, apply_constraint, fit,
                      initialize_from_anchor_points, precompute, project_out_sd)
from .geometry import (GlobalBasis, TemplateFrame, build_triangulation, compose_inverse_update,
                       global_jacobian_dN_dq, instantiate_shape, piecewise_affine_warp, warp_jacobian_dW_dp)
from .model import (AAM, AppearanceModel, ShapeModel, assemble_aam, build_aam, pca, procrustes_align,
                    train_aam, train_appearance_model, train_shape_model)
from .synthetic import SyntheticSpec, generate_synthetic_dataset

__version__ = "0.1.0"
