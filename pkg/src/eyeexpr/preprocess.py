"""Network input assembly: rectification, augmentation, personalization.

Rectification reduces to a deterministic center-crop plus normalization
(synthetic frames carry no lens distortion); the two eyes are concatenated
left|right and bilinearly resized to the configured input size.
Personalization subtracts a per-(participant, session) mean neutral image
built from the first five seconds of neutral frames.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, InputError
from .imageops import affine_warp, bilinear_resize, center_crop_square, extrapolate_pad
from .pgmio import read_pgm

_PROFILE_MAGIC = b"EYEP"
_PROFILE_VERSION = 1


@dataclass(frozen=True)
class EyePairImage:
    """A rectified, concatenated eye-pair frame in [0, 1]."""

    pixels: np.ndarray  # (H, W) float32, W = 2 x per-eye width
    participant_id: int = -1
    session_id: int = -1
    frame_index: int = -1


@dataclass(frozen=True)
class PersonalizationProfile:
    participant_id: int
    session_id: int
    mean_neutral: np.ndarray  # same shape as the eye-pair frames it was built from
    source_frame_count: int


@dataclass(frozen=True)
class AugmentConfig:
    """Constrained augmentation bounds; flips are never applied.

    The rotation default is 2% of a half turn (3.6 degrees); scale and
    brightness default to a multiplicative 2%.
    """

    rotation_bound_deg: float = 3.6
    scale_bound: float = 0.02
    brightness_bound: float = 0.02

    def __post_init__(self):
        if self.rotation_bound_deg < 0 or self.scale_bound < 0 or self.brightness_bound < 0:
            raise InputError("augmentation bounds must be non-negative")
        if self.scale_bound >= 1.0:
            raise InputError("scale_bound must be below 1")


@dataclass(frozen=True)
class AugmentDraw:
    rotation_deg: float
    scale: float
    brightness: float


def _normalize(image: np.ndarray) -> np.ndarray:
    if image.dtype == np.uint8:
        return image.astype(np.float32) / 255.0
    image = np.asarray(image, dtype=np.float32)
    if image.size and (image.min() < -1e-6 or image.max() > 1.0 + 1e-6):
        raise InputError("float eye images must already be normalized to [0, 1]")
    return image


def rectify_and_concat(left: np.ndarray, right: np.ndarray,
                       target_size: tuple[int, int] = (64, 128)) -> np.ndarray:
    """Center-crop each eye square, normalize, concatenate left|right, resize.

    Accepts uint8 (divided by 255) or already-normalized float images.
    Returns a float32 (H, W) array with W = target width.
    """
    left = np.asarray(left)
    right = np.asarray(right)
    if left.ndim != 2 or right.ndim != 2:
        raise InputError("eye images must be 2-D")
    if left.shape != right.shape:
        raise InputError(f"eye dimensions differ: left {left.shape} vs right {right.shape}")
    th, tw = int(target_size[0]), int(target_size[1])
    if th < 1 or tw < 2:
        raise InputError("target size too small")
    pair = np.concatenate([_normalize(center_crop_square(left)),
                           _normalize(center_crop_square(right))], axis=1)
    return bilinear_resize(pair, th, tw).astype(np.float32)


def load_eye_pair(sample, data_root, target_size: tuple[int, int] = (64, 128)) -> EyePairImage:
    """Decode a manifest sample's PGM pair into a rectified EyePairImage."""
    root = Path(data_root)
    pixels = rectify_and_concat(read_pgm(root / sample.left_path),
                                read_pgm(root / sample.right_path), target_size)
    return EyePairImage(pixels, sample.participant_id, sample.session_id, sample.frame_index)


def sample_augmentation(config: AugmentConfig, rng: np.random.Generator) -> AugmentDraw:
    """Draw rotation, scale and brightness factors; order of draws is fixed."""
    theta = float(rng.uniform(-config.rotation_bound_deg, config.rotation_bound_deg))
    scale = float(rng.uniform(1.0 - config.scale_bound, 1.0 + config.scale_bound))
    brightness = float(rng.uniform(1.0 - config.brightness_bound, 1.0 + config.brightness_bound))
    return AugmentDraw(theta, scale, brightness)


def apply_augmentation(image: np.ndarray, draw: AugmentDraw) -> np.ndarray:
    """Rotate/scale about the center, multiply brightness, clamp to [0, 1]."""
    image = np.asarray(image, dtype=np.float32)
    out = image
    if draw.rotation_deg != 0.0 or draw.scale != 1.0:
        # extrapolated padding keeps corner samples in-bounds during the warp
        h, w = image.shape
        radius = 0.5 * float(np.hypot(h, w))
        margin = abs(np.deg2rad(draw.rotation_deg)) * radius + abs(1.0 - 1.0 / draw.scale) * radius
        pad = int(np.ceil(margin)) + 2
        warped = affine_warp(extrapolate_pad(out, pad),
                             rotation_deg=draw.rotation_deg, scale=draw.scale)
        out = warped[pad : pad + h, pad : pad + w].astype(np.float32)
    if draw.brightness != 1.0:
        out = out * np.float32(draw.brightness)
    if out is image:
        return image.copy()
    return np.clip(out, 0.0, 1.0)


def augment(image: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    return apply_augmentation(image, sample_augmentation(config, rng))


def build_profile(neutral_frames: list[np.ndarray], frame_rate: float,
                  participant_id: int = -1, session_id: int = -1) -> PersonalizationProfile:
    """Element-wise mean of the earliest min(5 * frame_rate, all) neutral frames."""
    if not neutral_frames:
        raise InputError("no neutral data for personalization "
                         f"(participant {participant_id}, session {session_id})")
    count = min(int(round(5.0 * frame_rate)), len(neutral_frames))
    count = max(count, 1)
    shape = np.asarray(neutral_frames[0]).shape
    acc = np.zeros(shape, dtype=np.float64)
    for frame in neutral_frames[:count]:
        frame = np.asarray(frame)
        if frame.shape != shape:
            raise InputError("neutral frames have inconsistent shapes")
        acc += frame
    mean = (acc / count).astype(np.float32)
    return PersonalizationProfile(participant_id, session_id, mean, count)


def personalize(image: np.ndarray, profile: PersonalizationProfile,
                participant_id: int | None = None) -> np.ndarray:
    """Subtract the mean neutral image; output may be negative, no clamping."""
    image = np.asarray(image, dtype=np.float32)
    if image.shape != profile.mean_neutral.shape:
        raise InputError(
            f"image shape {image.shape} does not match profile shape {profile.mean_neutral.shape}"
        )
    if participant_id is not None and participant_id != profile.participant_id:
        warnings.warn(
            f"applying participant {profile.participant_id}'s profile to participant "
            f"{participant_id}'s image (permitted for ablation runs only)",
            stacklevel=2,
        )
    return image - profile.mean_neutral


# Profile file format --------------------------------------------------------


def save_profile(profile: PersonalizationProfile, path) -> None:
    h, w = profile.mean_neutral.shape
    if h > 0xFFFF or w > 0xFFFF:
        raise FormatError("profile dimensions exceed the u16 header fields")
    with open(path, "wb") as fh:
        fh.write(_PROFILE_MAGIC)
        fh.write(struct.pack("<HHH", _PROFILE_VERSION, h, w))
        fh.write(profile.mean_neutral.astype("<f4").tobytes())


def load_profile(path, participant_id: int = -1, session_id: int = -1) -> PersonalizationProfile:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 10 or data[:4] != _PROFILE_MAGIC:
        raise FormatError(f"{path}: not a personalization profile (bad magic)")
    version, h, w = struct.unpack("<HHH", data[4:10])
    if version != _PROFILE_VERSION:
        raise FormatError(f"{path}: unsupported profile version {version}")
    body = data[10:]
    if len(body) != 4 * h * w:
        raise FormatError(f"{path}: truncated profile data ({len(body)} of {4 * h * w} bytes)")
    mean = np.frombuffer(body, dtype="<f4").reshape(h, w).copy()
    return PersonalizationProfile(participant_id, session_id, mean, 0)


# Blink filtering ------------------------------------------------------------


@dataclass(frozen=True)
class BlinkFilterReport:
    examined: int
    removed: int
    removed_by_class: dict
    exempt_classes: tuple


def blink_filter(samples, closed_probability, closed_class_names, threshold: float):
    """Drop non-closed-class frames whose closed probability exceeds threshold.

    `closed_probability` maps a sample to P(eyes closed) from a trained
    binary open/closed classifier.  Frames of the closed classes themselves
    are never removed.  Returns (kept samples, report).
    """
    if not 0.0 <= threshold <= 1.0:
        raise InputError("threshold must be in [0, 1]")
    exempt = frozenset(closed_class_names)
    kept = []
    removed_by_class: dict[str, int] = {}
    examined = 0
    for s in samples:
        if s.label in exempt:
            kept.append(s)
            continue
        examined += 1
        if closed_probability(s) > threshold:
            removed_by_class[s.label] = removed_by_class.get(s.label, 0) + 1
        else:
            kept.append(s)
    report = BlinkFilterReport(
        examined=examined,
        removed=sum(removed_by_class.values()),
        removed_by_class=removed_by_class,
        exempt_classes=tuple(sorted(exempt)),
    )
    return kept, report
