"""
hrapr: retrieval-based uncertainty gating for absolute pose regressors.

Predictions are scored by comparing the query embedding with the training
embeddings stored around the predicted position; the score decides how many
refinement steps a prediction gets, or whether it is dropped.
"""

from hrapr.exceptions import HRAPRError
from hrapr.feature_store import PoseFeatureDB, build_database, load_db, retrieve_by_position, save_db
from hrapr.geometry import Pose, PoseError, pose_error, rot_error, slerp, trans_error
from hrapr.uncertainty import GatingPolicy, ScoredQuery, classify_and_schedule, score_batch, similarity_score

__version__ = "1.0.0"

__all__ = [
    "HRAPRError",
    "PoseFeatureDB",
    "build_database",
    "load_db",
    "retrieve_by_position",
    "save_db",
    "Pose",
    "PoseError",
    "pose_error",
    "rot_error",
    "slerp",
    "trans_error",
    "GatingPolicy",
    "ScoredQuery",
    "classify_and_schedule",
    "score_batch",
    "similarity_score",
]
