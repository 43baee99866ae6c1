"""GAN synthesis of single-channel medical-style images, synthesis-quality
metrics, and downstream classifier evaluation across dataset-size ablations."""

from .classifier import auc_roc, random_search, score_frames, train_classifier
from .dataset import FrameSet, load_manifest, preprocess_frame, sample_ablation_subset
from .dcgan import GanCheckpoint, generate_images, train_gan
from .embedding import embed_images, load_backbone
from .experiments import AblationPlan, EvaluationReport, ScenarioConfig, run_ablation, run_scenario
from .gan_metrics import kmmd, one_nn_loo_accuracy, select_best_checkpoint
from .surrogate import SurrogateSpec, generate_surrogate

__version__ = "0.1.0"

__all__ = [
    "AblationPlan",
    "EvaluationReport",
    "FrameSet",
    "GanCheckpoint",
    "ScenarioConfig",
    "SurrogateSpec",
    "auc_roc",
    "embed_images",
    "generate_images",
    "generate_surrogate",
    "kmmd",
    "load_backbone",
    "load_manifest",
    "one_nn_loo_accuracy",
    "preprocess_frame",
    "random_search",
    "run_ablation",
    "run_scenario",
    "sample_ablation_subset",
    "score_frames",
    "select_best_checkpoint",
    "train_classifier",
    "train_gan",
]
