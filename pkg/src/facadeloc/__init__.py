"""Map-based localization of a single street-level view from building facades."""

__version__ = "0.1.0"

from .mapdata import Building, BuildingMap, FormatError, ValidationError, load_map, make_building, save_map
from .scene import CameraIntrinsics, ObservedFacade, SceneModel, SemanticLabelMap, load_scene
from .projection import Pose, PredictedFacade, project_map
from .likelihood import LikelihoodParams, SceneScorer, pose_likelihood, similarity, similarity_max
from .localizer import LikelihoodGrid, PoseSampling, evaluate_grid, query_sampling, reference_sampling, top_n_error
from .identity import (PixelIdentityField, identity_at_pose, label_reference_greedy, label_reference_marginalized,
                       pixel_accuracy, transfer_identity)
