"""Export VGG-19 trunk weights to TWF1 plus a verification fixture."""

__version__ = "0.1.0"

from .export import (
    FIXTURE_TAPS,
    VGG19_TORCHVISION,
    ExportError,
    ExportRecipe,
    RecipeError,
    ValidationError,
    export,
    load_state_dict,
    make_fixture,
    random_state_dict,
    trunk_layers,
)
from .twf1 import FormatError

__all__ = [
    "__version__",
    "ExportRecipe",
    "VGG19_TORCHVISION",
    "FIXTURE_TAPS",
    "export",
    "make_fixture",
    "random_state_dict",
    "load_state_dict",
    "trunk_layers",
    "ExportError",
    "RecipeError",
    "ValidationError",
    "FormatError",
]
