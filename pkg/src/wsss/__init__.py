"""Weakly supervised segmentation from image-level labels via CAM, GradCAM, PCM and SEM."""

from .data import SyntheticConfig, generate, load_dataset, save_dataset
from .explain import METHODS, cam, gradcam, pcm, pcm_refine, sem, top_e_seeds
from .metrics import compare_methods, evaluate_method, pixel_f1, sweep_seeds
from .model import BackboneConfig, Model, TrainConfig, param_count, train
from .segment import assemble, predict_classes, segment_image

__version__ = "0.1.0"
