"""Multi-scale pixel-space visual prompting for small-image classifiers."""
from .backbones import (BackboneSpec, PromptedModel, build_backbone, build_cnn4, build_resnet18_small,
                        build_vit_tiny, count_params, wrap_with_msvp)
from .estimator import MSVPClassifier
from .prompt import MultiScalePrompt, PromptScales, count_msvp_params, init_prompts

__version__ = "0.1.0"

__all__ = [
    "BackboneSpec", "MSVPClassifier", "MultiScalePrompt", "PromptScales", "PromptedModel",
    "build_backbone", "build_cnn4", "build_resnet18_small", "build_vit_tiny", "count_msvp_params",
    "count_params", "init_prompts", "wrap_with_msvp",
]
