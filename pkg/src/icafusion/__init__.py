"""Infrared/visible image fusion with interactive and compensatory attention."""
from .discriminator import Critic, CriticSpec
from .generator import VARIANTS, Generator, GeneratorSpec, build_variant
from .metrics import MetricReport, evaluate
from .trainer import TrainConfig, load_generator, train

__version__ = "0.1.0"

__all__ = [
    "Critic",
    "CriticSpec",
    "Generator",
    "GeneratorSpec",
    "MetricReport",
    "TrainConfig",
    "VARIANTS",
    "build_variant",
    "evaluate",
    "load_generator",
    "train",
]
