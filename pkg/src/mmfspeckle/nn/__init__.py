"""Reconstruction network, classifier, and their training machinery."""

from .checkpoint import load_model, save_model
from .classifier import Classifier, classifier_predict, classifier_train
from .optim import AdamState, adam_update, lr_schedule
from .train import train
from .unet import UNet, binarize_output

__all__ = [
    "AdamState",
    "Classifier",
    "UNet",
    "adam_update",
    "binarize_output",
    "classifier_predict",
    "classifier_train",
    "load_model",
    "lr_schedule",
    "save_model",
    "train",
]
