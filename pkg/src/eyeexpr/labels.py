"""Label sets for action-unit and emotive-expression classification.

Class order is fixed and identical across generation, training and
reporting; argmax ties are broken toward the lowest index.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import InputError

NEUTRAL = "Neutral"

# Classes whose ground truth has both eyes closed.  These are exempt from
# blink injection and blink filtering.
CLOSED_CLASSES = frozenset({"EyesClosed", "ClosedEyes"})

# Classes a participant may skip during collection (hard for many people).
SKIPPABLE_CLASSES = ("LeftBrowRaise", "RightBrowRaise")


@dataclass(frozen=True)
class LabelSet:
    name: str
    classes: tuple[str, ...]

    def __post_init__(self):
        if len(self.classes) != len(set(self.classes)):
            raise InputError(f"duplicate class names in label set {self.name!r}")
        if len(self.classes) < 2:
            raise InputError("a label set needs at least 2 classes")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def index(self, label: str) -> int:
        try:
            return self.classes.index(label)
        except ValueError:
            raise InputError(f"label {label!r} not in label set {self.name!r}") from None

    def __contains__(self, label: str) -> bool:
        return label in self.classes

    def non_neutral(self) -> tuple[str, ...]:
        return tuple(c for c in self.classes if c != NEUTRAL)

    def to_dict(self) -> dict:
        return {"name": self.name, "classes": list(self.classes)}

    @staticmethod
    def from_dict(obj: dict) -> "LabelSet":
        return LabelSet(obj["name"], tuple(obj["classes"]))


AU10 = LabelSet(
    "au10",
    (
        "Neutral",
        "LeftBrowRaise",
        "RightBrowRaise",
        "BrowLower",
        "UpperLidRaise",
        "Squint",
        "EyesClosed",
        "LeftWink",
        "RightWink",
        "CheekRaise",
    ),
)

EMO5 = LabelSet("emo5", ("Anger", "ClosedEyes", "Happiness", "Neutral", "Surprise"))

_PRESETS = {"au10": AU10, "emo5": EMO5}


def get_label_set(name: str) -> LabelSet:
    """Look up a preset label set by name (case-insensitive)."""
    try:
        return _PRESETS[name.lower()]
    except KeyError:
        raise InputError(f"unknown label set {name!r}; expected one of {sorted(_PRESETS)}") from None
