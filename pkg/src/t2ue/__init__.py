"""Zero-contact unlearnable examples: noise generated from captions alone.

A frozen dual-encoder surrogate guides a text-conditioned generator whose
bounded output, added to images, turns them into a shortcut that stops
victim models from learning the real content.
"""

from .generator import GeneratorModel, generate_noise, quantize_noise
from .nn_core import SSCBN, info_nce
from .protector import ProtectionPlan, make_plan, noise_bank, train_generator
from .surrogate import SurrogateModel, train_surrogate
from .toydata import DatasetSpec, build_in_memory, generate_dataset, load_dataset

__version__ = "0.1.0"

__all__ = ["DatasetSpec", "GeneratorModel", "ProtectionPlan", "SSCBN", "SurrogateModel", "build_in_memory",
           "generate_dataset", "generate_noise", "info_nce", "load_dataset", "make_plan", "noise_bank",
           "quantize_noise", "train_generator", "train_surrogate"]
