"""Compact CNN definition, training loop, and versioned checkpoints.

Architecture (fixed): conv3x3(8)-relu-pool, conv3x3(16)-relu-pool,
conv3x3(32)-relu-pool, flatten, dense(64)-relu, dense(C), softmax.
The learning rate starts at 0.045 and decays stepwise by 0.94 every epoch;
L2 weight decay is 0.0004 and excludes biases.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import ConfigError, FormatError, InputError, NumericsError
from .labels import EMO5, NEUTRAL, LabelSet
from .manifest import Sample
from .preprocess import (
    AugmentConfig,
    PersonalizationProfile,
    apply_augmentation,
    build_profile,
    load_eye_pair,
    personalize,
    sample_augmentation,
)

_CKPT_MAGIC = b"EYEM"
_CKPT_VERSION = 1

# rng stream tags
_T_SHUFFLE = 21
_T_AUGMENT = 22


@dataclass(frozen=True)
class TrainConfig:
    initial_lr: float = 0.045
    lr_decay_per_epoch: float = 0.94
    l2_lambda: float = 0.0004
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0
    personalization: bool = False
    label_set: LabelSet = EMO5
    input_size: tuple[int, int] = (64, 128)
    frame_rate: float = 10.0
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    augment_enabled: bool = True
    momentum: float = 0.9
    rms_decay: float = 0.9
    epsilon: float = 1.0

    def __post_init__(self):
        if self.initial_lr <= 0:
            raise ConfigError("initial_lr must be positive")
        if not 0 < self.lr_decay_per_epoch <= 1:
            raise ConfigError("lr_decay_per_epoch must be in (0, 1]")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")

    def optimizer(self) -> nn.OptimizerConfig:
        return nn.OptimizerConfig(self.initial_lr, self.momentum, self.rms_decay, self.epsilon)

    def to_dict(self) -> dict:
        return {
            "initial_lr": self.initial_lr,
            "lr_decay_per_epoch": self.lr_decay_per_epoch,
            "l2_lambda": self.l2_lambda,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "seed": self.seed,
            "personalization": self.personalization,
            "label_set": self.label_set.to_dict(),
            "input_size": list(self.input_size),
            "frame_rate": self.frame_rate,
            "augment": {
                "rotation_bound_deg": self.augment.rotation_bound_deg,
                "scale_bound": self.augment.scale_bound,
                "brightness_bound": self.augment.brightness_bound,
            },
            "augment_enabled": self.augment_enabled,
            "momentum": self.momentum,
            "rms_decay": self.rms_decay,
            "epsilon": self.epsilon,
        }

    def hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def architecture(num_classes: int) -> list[nn.LayerSpec]:
    return [
        nn.conv2d(8), nn.relu(), nn.maxpool2x2(),
        nn.conv2d(16), nn.relu(), nn.maxpool2x2(),
        nn.conv2d(32), nn.relu(), nn.maxpool2x2(),
        nn.flatten(),
        nn.dense(64), nn.relu(),
        nn.dense(num_classes), nn.softmax(),
    ]


def build_model(label_set: LabelSet, input_size: tuple[int, int], seed: int = 0,
                dtype=np.float32) -> nn.Network:
    h, w = input_size
    if h < 16 or w < 16:
        raise ConfigError(f"input size {h}x{w} is below the 16x16 minimum")
    return nn.Network(architecture(label_set.num_classes), (h, w), seed=seed, dtype=dtype)


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    """Stepwise schedule: initial_lr * decay^epoch, constant within an epoch."""
    if epoch < 0:
        raise InputError("epoch must be >= 0")
    return config.initial_lr * config.lr_decay_per_epoch ** epoch


# Input assembly -------------------------------------------------------------


def load_inputs(samples: list[Sample], data_root, input_size: tuple[int, int]) -> np.ndarray:
    """Decode and rectify every sample into a float32 (N, H, W) stack."""
    out = np.empty((len(samples), input_size[0], input_size[1]), dtype=np.float32)
    for i, s in enumerate(samples):
        out[i] = load_eye_pair(s, data_root, input_size).pixels
    return out


def build_profiles(samples: list[Sample], inputs: np.ndarray, frame_rate: float,
                   require_all: bool = True) -> dict[tuple[int, int], PersonalizationProfile]:
    """One mean-neutral profile per (participant, session) found in the samples."""
    by_key: dict[tuple[int, int], list[tuple[int, int]]] = {}
    keys = {s.key() for s in samples}
    for i, s in enumerate(samples):
        if s.label == NEUTRAL:
            by_key.setdefault(s.key(), []).append((s.frame_index, i))
    profiles = {}
    for key in sorted(keys):
        entries = sorted(by_key.get(key, []))
        if not entries:
            if require_all:
                raise InputError(
                    f"no neutral frames to build a profile for participant {key[0]}, session {key[1]}"
                )
            continue
        frames = [inputs[i] for _, i in entries]
        profiles[key] = build_profile(frames, frame_rate, key[0], key[1])
    return profiles


def enrollment_indices(samples: list[Sample],
                       profiles: dict[tuple[int, int], PersonalizationProfile]) -> set[int]:
    """Sample indices consumed as enrollment neutrals when the profiles were built."""
    per_key: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for i, s in enumerate(samples):
        if s.label == NEUTRAL and s.key() in profiles:
            per_key.setdefault(s.key(), []).append((s.frame_index, i))
    used = set()
    for key, entries in per_key.items():
        entries.sort()
        used.update(i for _, i in entries[: profiles[key].source_frame_count])
    return used


# Checkpoints ----------------------------------------------------------------


@dataclass
class ModelCheckpoint:
    descriptor: dict
    tensors: list[np.ndarray]

    @property
    def label_set(self) -> LabelSet:
        return LabelSet.from_dict(self.descriptor["label_set"])

    @property
    def input_size(self) -> tuple[int, int]:
        return tuple(self.descriptor["input_size"])

    @property
    def personalization(self) -> bool:
        return bool(self.descriptor["personalization"])

    def to_network(self, dtype=np.float32) -> nn.Network:
        specs = [nn.LayerSpec.from_dict(d) for d in self.descriptor["arch"]]
        net = nn.Network(specs, self.input_size, seed=0, dtype=dtype)
        net.set_parameter_arrays([t.astype(dtype) for t in self.tensors])
        return net

    @staticmethod
    def from_network(net: nn.Network, label_set: LabelSet, personalization: bool,
                     metadata: dict) -> "ModelCheckpoint":
        descriptor = {
            "arch": [s.to_dict() for s in net.specs],
            "input_size": list(net.input_size),
            "label_set": label_set.to_dict(),
            "personalization": personalization,
            "metadata": metadata,
        }
        return ModelCheckpoint(descriptor, [a.astype(np.float32) for a in net.parameter_arrays()])


def save_checkpoint(ckpt: ModelCheckpoint, path) -> None:
    desc = json.dumps(ckpt.descriptor, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<H", _CKPT_VERSION))
        fh.write(struct.pack("<I", len(desc)))
        fh.write(desc)
        fh.write(struct.pack("<I", len(ckpt.tensors)))
        for t in ckpt.tensors:
            if t.ndim > 255:
                raise FormatError("tensor rank exceeds the u8 header field")
            fh.write(struct.pack("<B", t.ndim))
            fh.write(struct.pack(f"<{t.ndim}I", *t.shape))
            fh.write(np.ascontiguousarray(t, dtype="<f4").tobytes())


def load_checkpoint(path) -> ModelCheckpoint:
    with open(path, "rb") as fh:
        data = fh.read()

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"{path}: truncated checkpoint while reading {what}")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    pos = 0
    if take(4, "magic") != _CKPT_MAGIC:
        raise FormatError(f"{path}: not a model checkpoint (bad magic)")
    (version,) = struct.unpack("<H", take(2, "version"))
    if version != _CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (desc_len,) = struct.unpack("<I", take(4, "descriptor length"))
    try:
        descriptor = json.loads(take(desc_len, "descriptor").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt architecture descriptor: {exc}") from None
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    tensors = []
    for i in range(count):
        (rank,) = struct.unpack("<B", take(1, f"tensor {i} rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"tensor {i} dims"))
        size = int(np.prod(dims)) if dims else 1
        raw = take(4 * size, f"tensor {i} data")
        tensors.append(np.frombuffer(raw, dtype="<f4").reshape(dims).copy())
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes after checkpoint payload")
    return ModelCheckpoint(descriptor, tensors)


def checkpoint_file_size(ckpt: ModelCheckpoint) -> int:
    """Exact on-disk size: header + descriptor + per-tensor rank/dims/data."""
    desc = json.dumps(ckpt.descriptor, sort_keys=True, separators=(",", ":")).encode("utf-8")
    size = 4 + 2 + 4 + len(desc) + 4
    for t in ckpt.tensors:
        size += 1 + 4 * t.ndim + 4 * t.size
    return size


# Training loop --------------------------------------------------------------


def train(samples: list[Sample], data_root, config: TrainConfig,
           inputs: np.ndarray | None = None) -> tuple[ModelCheckpoint, list[float]]:
    """Train the compact CNN; returns the checkpoint and the per-epoch loss trace.

    Deterministic given (samples, config): shuffling is reseeded per epoch
    from (seed, epoch) and augmentation draws from (seed, epoch, position).
    `inputs` may carry pre-rectified frames aligned with `samples` to skip
    decoding.
    """
    if not samples:
        raise InputError("training manifest is empty")
    label_set = config.label_set
    for s in samples:
        if s.label not in label_set:
            raise InputError(f"sample label {s.label!r} not in label set {label_set.name!r}")
    if inputs is None:
        inputs = load_inputs(samples, data_root, config.input_size)
    if inputs.shape[0] != len(samples):
        raise InputError("inputs are not aligned with samples")

    profiles: dict[tuple[int, int], PersonalizationProfile] = {}
    if config.personalization:
        profiles = build_profiles(samples, inputs, config.frame_rate, require_all=True)

    net = build_model(label_set, config.input_size, seed=config.seed)
    params = net.parameter_arrays()
    state = nn.RMSPropState.zeros_like(params)
    opt = config.optimizer()
    loss_spec = nn.LossSpec(label_set.num_classes, config.l2_lambda)
    labels_idx = np.array([label_set.index(s.label) for s in samples])
    eye = np.eye(label_set.num_classes, dtype=np.float32)

    trace: list[float] = []
    for epoch in range(config.epochs):
        lr = lr_at_epoch(config, epoch)
        order = np.random.default_rng([config.seed, _T_SHUFFLE, epoch]).permutation(len(samples))
        aug_rng = np.random.default_rng([config.seed, _T_AUGMENT, epoch])
        epoch_losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            batch = np.empty((len(idx), config.input_size[0], config.input_size[1]),
                             dtype=np.float32)
            for j, i in enumerate(idx):
                frame = inputs[i]
                if config.augment_enabled:
                    frame = apply_augmentation(frame, sample_augmentation(config.augment, aug_rng))
                if config.personalization:
                    frame = personalize(frame, profiles[samples[i].key()])
                batch[j] = frame
            x = batch[..., None]
            y = eye[labels_idx[idx]]
            net.set_parameter_arrays(params)
            try:
                loss, grads, _ = nn.loss_and_grads(net, x, y, loss_spec)
            except NumericsError as exc:
                raise NumericsError(
                    f"non-finite loss at epoch {epoch}, batch {start // config.batch_size}: {exc}"
                ) from None
            if not np.isfinite(loss):
                raise NumericsError(
                    f"non-finite loss at epoch {epoch}, batch {start // config.batch_size}"
                )
            params, state = nn.rmsprop_step(params, grads, state, opt, lr)
            epoch_losses.append(loss)
        trace.append(float(np.mean(epoch_losses)))
    net.set_parameter_arrays(params)

    metadata = {
        "config_hash": config.hash(),
        "epochs": config.epochs,
        "final_train_loss": trace[-1],
        "seed": config.seed,
    }
    return ModelCheckpoint.from_network(net, label_set, config.personalization, metadata), trace


def train_blink_classifier(samples: list[Sample], data_root, config: TrainConfig,
                           closed_class: str, open_class: str = NEUTRAL,
                           ) -> tuple[ModelCheckpoint, list[float]]:
    """Binary eyes-open/closed model from the manifest's neutral and closed frames."""
    subset = [s for s in samples if s.label in (closed_class, open_class)]
    if not subset:
        raise InputError("manifest has no open/closed frames to train a blink classifier")
    binary = LabelSet("blink2", ("Open", "Closed"))
    remapped = [
        Sample(s.participant_id, s.session_id, s.hmd_id,
               "Closed" if s.label == closed_class else "Open",
               s.left_path, s.right_path, s.frame_index, s.blink_flag)
        for s in subset
    ]
    blink_cfg = dataclasses.replace(config, label_set=binary, personalization=False)
    return train(remapped, data_root, blink_cfg)
