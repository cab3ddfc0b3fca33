"""Teacher pretraining and knowledge distillation."""

from .config import StudentObjectiveConfig, SyncSchedule, TeacherObjectiveConfig, TrainConfig, load_run_config
from .features import FeatureExtractor, build_feature_extractor
from .losses import (
    ChannelAdapters,
    channel_attention,
    channel_kd_loss,
    feature_loss,
    gan_losses,
    gram,
    recon_loss,
    ssim_index,
    ssim_loss,
    style_loss,
    sync_loss,
    tv_loss,
)
from .train import (
    ObjectiveResult,
    TrainingDiverged,
    TrainResult,
    combine,
    student_objective,
    student_weights,
    teacher_objective,
    teacher_weights,
    train_student,
    train_teacher,
)

__all__ = [
    "StudentObjectiveConfig", "SyncSchedule", "TeacherObjectiveConfig", "TrainConfig", "load_run_config",
    "FeatureExtractor", "build_feature_extractor",
    "ChannelAdapters", "channel_attention", "channel_kd_loss", "feature_loss", "gan_losses", "gram",
    "recon_loss", "ssim_index", "ssim_loss", "style_loss", "sync_loss", "tv_loss",
    "ObjectiveResult", "TrainingDiverged", "TrainResult", "combine", "student_objective", "student_weights",
    "teacher_objective", "teacher_weights", "train_student", "train_teacher",
]
