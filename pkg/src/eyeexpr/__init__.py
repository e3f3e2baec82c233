"""Periocular expression classification toolkit.

Classifies facial expressions and action units from concatenated eye-pair
images using a compact CNN trained from scratch, with mean-neutral-image
personalization, participant-holdout evaluation, and a streaming inference
runtime that emits avatar blendshape weights.
"""

__version__ = "0.1.0"

from .labels import AU10, EMO5, LabelSet, get_label_set

__all__ = ["AU10", "EMO5", "LabelSet", "get_label_set", "__version__"]
