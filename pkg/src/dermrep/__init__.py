"""Melanoma classification with GAN augmentation and gradient-reversed hair debiasing, at desk scale."""
from .autodiff import Tensor, backward, grad_reverse
from .gda import GanConfig, sample_synthetic, train_dcgan
from .metrics import FoldReport, aggregate, auc, roc_curve
from .model import BackboneConfig, predict_proba, train
from .optim import AdamState, ParamGroups, joint_step
from .preprocess import max_rgb, morph_hair_removal, resize, shades_of_gray
from .synthdata import ConfoundConfig, Dataset, LabeledSample, build_confounded_dataset, load_manifest, save_manifest

__all__ = [
    "AdamState", "BackboneConfig", "ConfoundConfig", "Dataset", "FoldReport", "GanConfig", "LabeledSample",
    "ParamGroups", "Tensor", "aggregate", "auc", "backward", "build_confounded_dataset", "grad_reverse",
    "joint_step", "load_manifest", "max_rgb", "morph_hair_removal", "predict_proba", "resize", "roc_curve",
    "sample_synthetic", "save_manifest", "shades_of_gray", "train", "train_dcgan",
]
