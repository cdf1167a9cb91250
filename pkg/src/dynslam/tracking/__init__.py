"""Front end: features, correspondences, pose and motion estimation, object bookkeeping."""
from .features import (detect_features, reanchor, sample_object_points, track_correspondence,
                       track_correspondences)
from .frontend import FrameStats, Tracker
from .motion import (estimate_camera_pose_joint, estimate_object_motion_joint, fit_transform,
                     initialize_motion)
from .objects import classify_objects, majority_label, propagate_labels, propagate_mask, scene_flow
from .p3p import kabsch, p3p, ransac_p3p

__all__ = [
    "detect_features", "reanchor", "sample_object_points", "track_correspondence", "track_correspondences",
    "FrameStats", "Tracker", "estimate_camera_pose_joint", "estimate_object_motion_joint", "fit_transform",
    "initialize_motion", "classify_objects", "majority_label", "propagate_labels", "propagate_mask",
    "scene_flow", "kabsch", "p3p", "ransac_p3p",
]
