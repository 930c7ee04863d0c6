"""Zero-shot recognition over pre-extracted feature banks.

A class-conditional VAE scores (feature, class) pairs by their ELBO; the
negated ELBO acts as an energy and inference ranks candidate classes by it.
Training combines the positive-pair ELBO with a listwise energy margin loss
(semantically biased toward confusable negatives, modulated by posterior
uncertainty) and a latent prototype contrast term.
"""

from .databank import BankFormatError, FeatureBank, SynthSpec, load_bank, save_bank, synthesize_bank
from .diffcore import NumericalError
from .model import ModelDims, RecognitionModel
from .objectives import ScaleHyper
from .trainer import ModelState, TrainConfig, load_checkpoint, save_checkpoint, train
from .zeroshot import EnergyTable, evaluate, export_energies, predict

__version__ = "0.1.0"

__all__ = [
    "BankFormatError",
    "EnergyTable",
    "FeatureBank",
    "ModelDims",
    "ModelState",
    "NumericalError",
    "RecognitionModel",
    "ScaleHyper",
    "SynthSpec",
    "TrainConfig",
    "evaluate",
    "export_energies",
    "load_bank",
    "load_checkpoint",
    "predict",
    "save_bank",
    "save_checkpoint",
    "synthesize_bank",
    "train",
]
