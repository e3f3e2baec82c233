"""Dataset manifest: one JSON object per line, one line per labeled frame.

Fields are exactly {participant_id, session_id, hmd_id, label, left_path,
right_path, frame_index, blink_flag}.  Paths are relative to the manifest's
directory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

from .errors import FormatError

_FIELDS = (
    "participant_id",
    "session_id",
    "hmd_id",
    "label",
    "left_path",
    "right_path",
    "frame_index",
    "blink_flag",
)


@dataclass(frozen=True)
class Sample:
    participant_id: int
    session_id: int
    hmd_id: int
    label: str
    left_path: str
    right_path: str
    frame_index: int
    blink_flag: bool = False

    def key(self) -> tuple[int, int]:
        return (self.participant_id, self.session_id)

    def to_obj(self) -> dict:
        return {name: getattr(self, name) for name in _FIELDS}

    @staticmethod
    def from_obj(obj: dict) -> "Sample":
        missing = [name for name in _FIELDS if name not in obj]
        if missing:
            raise FormatError(f"manifest entry missing fields {missing}")
        extra = sorted(set(obj) - set(_FIELDS))
        if extra:
            raise FormatError(f"manifest entry has unknown fields {extra}")
        return Sample(**{name: obj[name] for name in _FIELDS})

    def with_flag(self, blink_flag: bool) -> "Sample":
        return replace(self, blink_flag=blink_flag)


def sample_line(sample: Sample) -> str:
    return json.dumps(sample.to_obj(), sort_keys=True, separators=(",", ":"))


def save_manifest(samples: list[Sample], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(sample_line(s))
            fh.write("\n")


def load_manifest(path) -> list[Sample]:
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: invalid JSON: {exc}") from None
            samples.append(Sample.from_obj(obj))
    return samples


def manifest_dir(path) -> Path:
    return Path(path).resolve().parent


def participants(samples: list[Sample]) -> list[int]:
    return sorted({s.participant_id for s in samples})
