"""Rank unseen transients by the minimum per-class isolation-forest score in a
classifier's latent space."""

from .config import RunConfig, config_digest
from .dataset import AuditTrail, DatasetSplit, EncodedSequence, FeatureVector, LightCurve, load_light_curves, preprocess
from .encoder import EncoderClassifier, LatentVector, NetworkConfig, encode, train
from .evaluation import EvalReport, PopulationSpec, auroc, recall_at_k
from .iforest import IsolationForest, IsolationTree, avg_path_correction, fit, path_length, score
from .mcif import McifModel, fit_mcif, rank, score_mcif
from .synthdata import ClassTemplate, PopulationConfig, default_population, generate

__version__ = "0.1.0"

__all__ = [
    "AuditTrail", "ClassTemplate", "DatasetSplit", "EncodedSequence", "EncoderClassifier", "EvalReport",
    "FeatureVector", "IsolationForest", "IsolationTree", "LatentVector", "LightCurve", "McifModel",
    "NetworkConfig", "PopulationConfig", "PopulationSpec", "RunConfig", "auroc", "avg_path_correction",
    "config_digest", "default_population", "encode", "fit", "fit_mcif", "generate", "load_light_curves",
    "path_length", "preprocess", "rank", "recall_at_k", "score", "score_mcif", "train",
]
