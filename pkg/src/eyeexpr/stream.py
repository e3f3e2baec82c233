"""Streaming inference: per-frame class probabilities, exponential smoothing,
and blendshape-weight emission for avatar driving.

Emission is one JSON object per line, deterministic for a given frame
sequence; wall-clock latency lives only in the trailing summary (written to
a separate stream by the CLI so record bytes stay reproducible).
"""

from __future__ import annotations

import json
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import EnrollmentError, InputError
from .labels import LabelSet
from .pgmio import read_pgm
from .preprocess import PersonalizationProfile, personalize, rectify_and_concat
from .training import ModelCheckpoint


@dataclass(frozen=True)
class SmoothedState:
    """Exponentially smoothed probability vector; stays on the simplex."""

    probs: np.ndarray
    alpha: float = 0.3

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise InputError("alpha must be in (0, 1]")

    @staticmethod
    def uniform(num_classes: int, alpha: float = 0.3) -> "SmoothedState":
        return SmoothedState(np.full(num_classes, 1.0 / num_classes), alpha)


def smooth(state: SmoothedState, p: np.ndarray) -> SmoothedState:
    """s <- alpha * p + (1 - alpha) * s; a convex combination on the simplex."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape != state.probs.shape:
        raise InputError(f"probability vector shape {p.shape} != state shape {state.probs.shape}")
    if np.any(p < -1e-9) or abs(float(p.sum()) - 1.0) > 1e-6:
        raise InputError("input is not a probability vector (off the simplex beyond 1e-6)")
    s = state.alpha * p + (1.0 - state.alpha) * state.probs
    return replace(state, probs=s)


@dataclass(frozen=True)
class BlendshapeFrame:
    timestamp_ms: int
    weights: dict  # channel name -> weight in [0, 1], one channel per non-neutral class
    stable_label: str


def to_blendshapes(state: SmoothedState, label_set: LabelSet, timestamp_ms: int) -> BlendshapeFrame:
    """Channel weight per non-neutral class = its smoothed probability.

    A fully-neutral state therefore maps to all-zero channels; the stable
    label is the smoothed argmax with ties to the lowest class index.
    """
    if len(state.probs) != label_set.num_classes:
        raise InputError("state size does not match label set")
    weights = {
        name: float(state.probs[label_set.index(name)]) for name in label_set.non_neutral()
    }
    stable = label_set.classes[int(np.argmax(state.probs))]
    return BlendshapeFrame(int(timestamp_ms), weights, stable)


def infer_frame(network, eye_pair: np.ndarray,
                profile: PersonalizationProfile | None) -> np.ndarray:
    """Probability vector for one rectified eye-pair frame."""
    frame = np.asarray(eye_pair, dtype=np.float32)
    if profile is not None:
        frame = personalize(frame, profile)
    return network.forward_probs(frame[None, ..., None])[0]


@dataclass(frozen=True)
class StreamSummary:
    frames: int
    p50_ms: float
    p99_ms: float

    def to_json(self) -> str:
        return json.dumps({"frames": self.frames, "p50_ms": self.p50_ms, "p99_ms": self.p99_ms},
                          sort_keys=True, separators=(",", ":"))


def stream_run(
    checkpoint: ModelCheckpoint,
    frame_paths,
    data_root=".",
    profile: PersonalizationProfile | None = None,
    alpha: float = 0.3,
    frame_rate: float = 10.0,
    out=None,
    summary_out=None,
    warn_out=None,
) -> StreamSummary:
    """Run inference over (left, right) path pairs in order, one record per frame.

    Timestamps derive from the sequence number and frame rate so emission is
    reproducible; measured latency appears only in the summary.  Unreadable
    frames are skipped with a warning and their sequence number is kept.
    """
    out = out if out is not None else sys.stdout
    warn_out = warn_out if warn_out is not None else sys.stderr
    if checkpoint.personalization and profile is None:
        raise EnrollmentError(
            "this checkpoint was trained with personalization; provide a profile "
            "(enroll by capturing ~5 seconds of neutral frames and building their mean)"
        )
    network = checkpoint.to_network()
    label_set = checkpoint.label_set
    state = SmoothedState.uniform(label_set.num_classes, alpha)
    root = Path(data_root)
    latencies = []
    emitted = 0
    for seq, (left_path, right_path) in enumerate(frame_paths):
        t0 = time.perf_counter()
        try:
            left = read_pgm(root / left_path)
            right = read_pgm(root / right_path)
        except Exception as exc:  # unreadable frame: skip, keep numbering
            print(f"warning: frame {seq} skipped: {exc}", file=warn_out)
            continue
        frame = rectify_and_concat(left, right, checkpoint.input_size)
        probs = infer_frame(network, frame, profile)
        state = smooth(state, probs)
        ts = int(round(seq * 1000.0 / frame_rate))
        blend = to_blendshapes(state, label_set, ts)
        record = {
            "seq": seq,
            "timestamp_ms": ts,
            "probs": {name: float(probs[i]) for i, name in enumerate(label_set.classes)},
            "stable_label": blend.stable_label,
            "blendshapes": blend.weights,
        }
        print(json.dumps(record, sort_keys=True, separators=(",", ":")), file=out)
        latencies.append((time.perf_counter() - t0) * 1000.0)
        emitted += 1
    if latencies:
        p50 = float(np.percentile(latencies, 50))
        p99 = float(np.percentile(latencies, 99))
    else:
        p50 = p99 = 0.0
    summary = StreamSummary(emitted, p50, p99)
    if summary_out is not None:
        print(summary.to_json(), file=summary_out)
    return summary
