"""Deterministic procedural generator of labeled periocular image pairs.

Each participant gets a fixed anatomy (brow geometry, aperture size, iris
radius, skin tone, texture) plus a constant additive appearance field; each
headset session adds a pose offset, rotation and illumination gain, and each
frame adds gaze-driven iris motion and bounded sensor noise.  Expressions
deform the geometry (brow shifts, lid openness, closures) by amounts well
above the per-frame noise so the classes are learnable.

Determinism: every random draw is seeded from
(global_seed, stream tag, participant, session, label, frame), so a config
regenerates a byte-identical dataset.

The additive appearance field is applied in whole 8-bit steps after
quantization and never clips in the default parameter ranges, so mean-image
subtraction can cancel it exactly; this is the signal personalization
removes.
"""

from __future__ import annotations

import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputError
from .imageops import affine_warp
from .labels import AU10, CLOSED_CLASSES, EMO5, SKIPPABLE_CLASSES, LabelSet
from .manifest import Sample, save_manifest
from .pgmio import write_pgm

# stable label codes for rng stream derivation (independent of label set order)
_ALL_LABELS = tuple(dict.fromkeys(AU10.classes + EMO5.classes))
_LABEL_CODE = {name: i for i, name in enumerate(_ALL_LABELS)}

_HMD_EYE_SIZE = {1: (200, 200), 2: (240, 320)}  # (height, width) per eye

# rng stream tags
_S_PARTICIPANT = 11
_S_SESSION = 12
_S_GAZE = 13
_S_NOISE = 14
_S_SKIP = 15
_S_BLINK = 16


@dataclass(frozen=True)
class Deformation:
    """Label-conditioned geometry changes, per eye where asymmetric."""

    brow_shift_l: float = 0.0  # fraction of image height, positive raises
    brow_shift_r: float = 0.0
    brow_thick_mult: float = 1.0
    lid_top_mult: float = 1.0  # upper-lid opening multiplier
    lid_bot_mult: float = 1.0  # lower-lid opening multiplier
    closed_l: bool = False
    closed_r: bool = False
    cheek: bool = False


_DEFORMATIONS: dict[str, Deformation] = {
    "Neutral": Deformation(),
    "LeftBrowRaise": Deformation(brow_shift_l=0.11),
    "RightBrowRaise": Deformation(brow_shift_r=0.11),
    "BrowLower": Deformation(brow_shift_l=-0.06, brow_shift_r=-0.06, brow_thick_mult=1.3),
    "UpperLidRaise": Deformation(lid_top_mult=1.55),
    "Squint": Deformation(lid_top_mult=0.50, lid_bot_mult=0.60),
    "EyesClosed": Deformation(closed_l=True, closed_r=True),
    "LeftWink": Deformation(closed_l=True),
    "RightWink": Deformation(closed_r=True),
    "CheekRaise": Deformation(lid_bot_mult=0.40, cheek=True),
    "Anger": Deformation(brow_shift_l=-0.06, brow_shift_r=-0.06, brow_thick_mult=1.25, lid_top_mult=0.72),
    "ClosedEyes": Deformation(closed_l=True, closed_r=True),
    "Happiness": Deformation(lid_bot_mult=0.45, lid_top_mult=0.85, cheek=True),
    "Surprise": Deformation(brow_shift_l=0.10, brow_shift_r=0.10, lid_top_mult=1.55),
}


@dataclass(frozen=True)
class GenConfig:
    num_participants: int = 23
    sessions_per_participant: int = 2
    frames_per_expression: int = 100
    frame_rate: float = 10.0
    hmd_id: int = 1
    eye_size: tuple[int, int] | None = None  # (H, W); None uses the HMD default
    label_set: LabelSet = AU10
    global_seed: int = 0
    skip_fraction: float = 0.15
    blink_rate: float = 0.0
    appearance_field_scale: float = 1.0
    noise_amp: float = 0.008

    def __post_init__(self):
        if self.num_participants < 1:
            raise InputError("num_participants must be >= 1")
        if self.sessions_per_participant < 1:
            raise InputError("sessions_per_participant must be >= 1")
        if self.frames_per_expression < 1:
            raise InputError("frames_per_expression must be >= 1")
        if self.frame_rate <= 0:
            raise InputError("frame_rate must be positive")
        if self.hmd_id not in _HMD_EYE_SIZE:
            raise InputError(f"hmd_id must be one of {sorted(_HMD_EYE_SIZE)}")
        if not 0.0 <= self.skip_fraction <= 1.0:
            raise InputError("skip_fraction must be in [0, 1]")
        if not 0.0 <= self.blink_rate <= 0.2:
            raise InputError("blink_rate must be in [0, 0.2]")

    @property
    def eye_hw(self) -> tuple[int, int]:
        return self.eye_size if self.eye_size is not None else _HMD_EYE_SIZE[self.hmd_id]


@dataclass(frozen=True)
class ParticipantProfile:
    """Anatomy and appearance, fully determined by (global_seed, participant_id)."""

    participant_id: int
    skin_base: float
    texture: tuple[np.ndarray, np.ndarray]  # per-eye anatomy texture, warps with pose
    field_int: tuple[np.ndarray, np.ndarray]  # per-eye additive field in whole u8 steps
    brow_height: float  # distance above eye center, fraction of H
    brow_thickness: float
    brow_darkness: float
    aperture_half_w: float  # fraction of W
    aperture_half_h: float  # fraction of H
    iris_radius: float  # fraction of H (documented range 0.15..0.30)
    sclera: float
    iris_shade: float
    eye_center_y: float
    eye_size: tuple[int, int]
    noise_amp: float
    global_seed: int


@dataclass(frozen=True)
class SessionContext:
    """Headset fit for one session: pose offset, rotation and lighting gain."""

    participant_id: int
    session_id: int
    dx: float  # fraction of W
    dy: float  # fraction of H
    rotation_deg: float
    gain: float


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(list(key))


def _low_freq_field(rng: np.random.Generator, h: int, w: int, amplitude: float,
                    grid: int = 5) -> np.ndarray:
    """Smooth random field from a small control grid, bilinearly upsampled."""
    control = rng.uniform(-amplitude, amplitude, size=(grid, grid))
    ys = np.linspace(0, grid - 1, h)
    xs = np.linspace(0, grid - 1, w)
    y0 = np.minimum(ys.astype(int), grid - 2)
    x0 = np.minimum(xs.astype(int), grid - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    c00 = control[np.ix_(y0, x0)]
    c01 = control[np.ix_(y0, x0 + 1)]
    c10 = control[np.ix_(y0 + 1, x0)]
    c11 = control[np.ix_(y0 + 1, x0 + 1)]
    return (c00 * (1 - fy) * (1 - fx) + c01 * (1 - fy) * fx
            + c10 * fy * (1 - fx) + c11 * fy * fx)


def make_participant(config: GenConfig, participant_id: int) -> ParticipantProfile:
    h, w = config.eye_hw
    rng = _rng(config.global_seed, _S_PARTICIPANT, participant_id)
    skin = float(rng.uniform(0.46, 0.68))
    textures = tuple(_low_freq_field(rng, h, w, 0.03, grid=6) for _ in range(2))
    amp = float(rng.uniform(0.05, 0.08)) * config.appearance_field_scale
    fields = tuple(
        np.round(_low_freq_field(rng, h, w, amp) * 255.0).astype(np.int16) for _ in range(2)
    )
    return ParticipantProfile(
        participant_id=participant_id,
        skin_base=skin,
        texture=textures,
        field_int=fields,
        brow_height=float(rng.uniform(0.13, 0.19)),
        brow_thickness=float(rng.uniform(0.04, 0.08)),
        brow_darkness=float(rng.uniform(0.20, 0.45)),
        aperture_half_w=float(rng.uniform(0.21, 0.30)),
        aperture_half_h=float(rng.uniform(0.10, 0.14)),
        iris_radius=float(rng.uniform(0.15, 0.30)),
        sclera=float(rng.uniform(0.74, 0.80)),
        # near-IR: iris mid-bright, pupil dark, sclera brightest
        iris_shade=float(rng.uniform(0.50, 0.60)),
        eye_center_y=float(rng.uniform(0.54, 0.62)),
        eye_size=(h, w),
        noise_amp=config.noise_amp,
        global_seed=config.global_seed,
    )


def make_session(config: GenConfig, participant_id: int, session_id: int) -> SessionContext:
    rng = _rng(config.global_seed, _S_SESSION, participant_id, session_id)
    return SessionContext(
        participant_id=participant_id,
        session_id=session_id,
        dx=float(rng.uniform(-0.08, 0.08)),
        dy=float(rng.uniform(-0.08, 0.08)),
        rotation_deg=float(rng.uniform(-4.0, 4.0)),
        gain=float(rng.uniform(0.94, 1.06)),
    )


def _coverage(signed_dist_px: np.ndarray, soft: float = 1.0) -> np.ndarray:
    """Antialiased coverage from a signed distance in pixels (negative inside)."""
    return np.clip(0.5 - signed_dist_px / soft, 0.0, 1.0)


def _render_eye(profile: ParticipantProfile, deform: Deformation, gaze: np.ndarray,
                eye: int, closed: bool, brow_jitter: float = 0.0) -> np.ndarray:
    """One eye in float, before pose warp / gain / noise / appearance field."""
    h, w = profile.eye_size
    yy, xx = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    yn, xn = yy / h, xx / w

    img = np.full((h, w), profile.skin_base)
    img += profile.texture[eye]

    cx, cy = 0.5, profile.eye_center_y
    top_open = profile.aperture_half_h * deform.lid_top_mult
    bot_open = profile.aperture_half_h * 0.75 * deform.lid_bot_mult
    half_w = profile.aperture_half_w

    brow_shift = (deform.brow_shift_l if eye == 0 else deform.brow_shift_r) + brow_jitter
    brow_y = cy - profile.brow_height - brow_shift
    thick = profile.brow_thickness * deform.brow_thick_mult
    brow_center = brow_y + 0.06 * ((xn - cx) / half_w) ** 2
    brow_dist = (np.abs(yn - brow_center) - thick / 2.0) * h
    in_x = _coverage((np.abs(xn - cx) - half_w * 1.15) * w, soft=4.0)
    brow_cov = _coverage(brow_dist, soft=3.5) * in_x
    img = img * (1 - brow_cov) + profile.brow_darkness * brow_cov

    if deform.cheek:
        cheek_y = cy + profile.aperture_half_h * 1.4
        cheek_dist = (np.abs(yn - cheek_y) - 0.035) * h
        cheek_cov = _coverage(cheek_dist, soft=3.0) * in_x
        img += 0.06 * cheek_cov

    if closed:
        # closed lid: darker shade over the aperture area plus a lash line
        b = profile.aperture_half_h * 0.8
        lid_dist = (np.sqrt(((xn - cx) / half_w) ** 2 + ((yn - cy) / b) ** 2) - 1.0) * b * h
        lid_cov = _coverage(lid_dist, soft=3.0)
        img = img * (1 - lid_cov) + (profile.skin_base * 0.55) * lid_cov
        lash_dist = (np.abs(yn - cy) - 0.012) * h
        lash_cov = _coverage(lash_dist, soft=3.0) * _coverage((np.abs(xn - cx) - half_w) * w, soft=2.0)
        img = img * (1 - lash_cov) + 0.18 * lash_cov
        return img

    # open aperture: asymmetric vertical half-axes for upper/lower lids
    b_axis = np.where(yn < cy, np.maximum(top_open, 1e-4), np.maximum(bot_open, 1e-4))
    ap_dist = (np.sqrt(((xn - cx) / half_w) ** 2 + ((yn - cy) / b_axis) ** 2) - 1.0) \
        * np.minimum(half_w * w, b_axis * h)
    ap_cov = _coverage(ap_dist, soft=3.0)
    img = img * (1 - ap_cov) + profile.sclera * ap_cov

    ix = cx + gaze[0] * half_w * 0.35
    iy = cy + gaze[1] * top_open * 0.30
    r = profile.iris_radius
    iris_dist = (np.sqrt(((xn - ix) / r) ** 2 + ((yn - iy) / r) ** 2) - 1.0) * r * h
    iris_cov = _coverage(iris_dist, soft=3.0) * ap_cov
    img = img * (1 - iris_cov) + profile.iris_shade * iris_cov
    pup_dist = (np.sqrt(((xn - ix) / r) ** 2 + ((yn - iy) / r) ** 2) - 0.28) * r * h
    pup_cov = _coverage(pup_dist, soft=3.0) * ap_cov
    img = img * (1 - pup_cov) + (profile.iris_shade * 0.30) * pup_cov
    return img


def render_frame(
    profile: ParticipantProfile,
    session: SessionContext,
    label: str,
    gaze,
    frame_index: int,
    force_closed: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Render one labeled frame as a (left, right) pair of 8-bit images.

    Deterministic in all arguments.  `force_closed` renders the frame with
    both eyes shut (a blink) while keeping the label's other deformations and
    the frame's own gaze/noise draws.  A shut eye gets a per-frame brow
    position draw: nothing constrains the brow while the lids are closed, and
    blink cleanup must not be able to key on brow pose.
    """
    if label not in _DEFORMATIONS:
        raise InputError(f"no rendering geometry for label {label!r}")
    gaze = np.asarray(gaze, dtype=np.float64)
    if gaze.shape != (2,) or np.any(np.abs(gaze) > 1.0):
        raise InputError("gaze must be a 2-vector in [-1, 1]^2")
    deform = _DEFORMATIONS[label]
    h, w = profile.eye_size
    out = []
    for eye in range(2):
        closed = force_closed or (deform.closed_l if eye == 0 else deform.closed_r)
        noise_rng = _rng(profile.global_seed, _S_NOISE, profile.participant_id,
                         session.session_id, _LABEL_CODE[label], frame_index, eye)
        jitter = float(noise_rng.uniform(-0.04, 0.10)) if closed else 0.0
        img = _render_eye(profile, deform, gaze, eye, closed, brow_jitter=jitter)
        img = affine_warp(img, rotation_deg=session.rotation_deg, scale=1.0,
                          tx=session.dx * w, ty=session.dy * h)
        img *= session.gain
        img += noise_rng.uniform(-profile.noise_amp, profile.noise_amp, size=img.shape)
        q = np.round(img * 255.0).astype(np.int16)
        q += profile.field_int[eye]
        out.append(np.clip(q, 0, 255).astype(np.uint8))
    return out[0], out[1]


# Aperture statistics (test oracle) -----------------------------------------


def aperture_mask(profile: ParticipantProfile, session: SessionContext) -> np.ndarray:
    """Boolean mask of the neutral open-aperture region, session-warped."""
    h, w = profile.eye_size
    yy, xx = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    yn, xn = yy / h, xx / w
    cx, cy = 0.5, profile.eye_center_y
    b_axis = np.where(yn < cy, profile.aperture_half_h, profile.aperture_half_h * 0.75)
    inside = (((xn - cx) / profile.aperture_half_w) ** 2 + ((yn - cy) / b_axis) ** 2) < 1.0
    warped = affine_warp(inside.astype(np.float64), rotation_deg=session.rotation_deg,
                         scale=1.0, tx=session.dx * w, ty=session.dy * h)
    return warped > 0.5


def aperture_intensity(image: np.ndarray, mask: np.ndarray) -> float:
    """Mean intensity (0..1) of an 8-bit eye image inside an aperture mask."""
    if image.shape != mask.shape:
        raise InputError("image and mask shapes differ")
    return float(image[mask].mean()) / 255.0


# Dataset generation ---------------------------------------------------------


def gaze_for_frame(config: GenConfig, participant_id: int, session_id: int,
                   label: str, frame_index: int) -> np.ndarray:
    rng = _rng(config.global_seed, _S_GAZE, participant_id, session_id,
               _LABEL_CODE[label], frame_index)
    return rng.uniform(-1.0, 1.0, size=2)


def _skipped_label(config: GenConfig, participant_id: int) -> str | None:
    skippable = [c for c in SKIPPABLE_CLASSES if c in config.label_set.classes]
    if not skippable or config.skip_fraction == 0.0:
        return None
    rng = _rng(config.global_seed, _S_SKIP, participant_id)
    if rng.uniform() < config.skip_fraction:
        return skippable[rng.integers(len(skippable))]
    return None


def plan_dataset(config: GenConfig) -> list[tuple[int, int, str, int]]:
    """(participant, session, label, frame) tuples the generator will render."""
    plan = []
    for pid in range(config.num_participants):
        skipped = _skipped_label(config, pid)
        for sid in range(config.sessions_per_participant):
            for label in config.label_set.classes:
                if label == skipped:
                    continue
                for f in range(config.frames_per_expression):
                    plan.append((pid, sid, label, f))
    return plan


def select_blinks(config: GenConfig, plan) -> set[tuple[int, int, str, int]]:
    """Exactly floor(rate * n) flagged frames per non-closed class."""
    flagged: set[tuple[int, int, str, int]] = set()
    if config.blink_rate == 0.0:
        return flagged
    by_class: dict[str, list] = {}
    for entry in plan:
        if entry[2] not in CLOSED_CLASSES:
            by_class.setdefault(entry[2], []).append(entry)
    for label in sorted(by_class):
        entries = by_class[label]
        count = int(config.blink_rate * len(entries))
        rng = _rng(config.global_seed, _S_BLINK, _LABEL_CODE[label])
        chosen = rng.choice(len(entries), size=count, replace=False)
        flagged.update(entries[int(i)] for i in chosen)
    return flagged


def _frame_paths(pid: int, sid: int, label: str, frame: int) -> tuple[str, str]:
    stem = f"images/p{pid:03d}/s{sid}/{label}_{frame:04d}"
    return stem + "_L.pgm", stem + "_R.pgm"


def generate_dataset(config: GenConfig, output_dir) -> list[Sample]:
    """Render the full dataset and write images plus manifest.jsonl.

    On any I/O failure the partially written images and manifest are removed
    before the error propagates.
    """
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    images_dir = out / "images"
    manifest_path = out / "manifest.jsonl"
    plan = plan_dataset(config)
    flagged = select_blinks(config, plan)
    profiles = {pid: make_participant(config, pid) for pid in range(config.num_participants)}
    sessions = {
        (pid, sid): make_session(config, pid, sid)
        for pid in range(config.num_participants)
        for sid in range(config.sessions_per_participant)
    }
    samples: list[Sample] = []
    try:
        for pid, sid, label, f in plan:
            gaze = gaze_for_frame(config, pid, sid, label, f)
            is_blink = (pid, sid, label, f) in flagged
            left, right = render_frame(profiles[pid], sessions[(pid, sid)], label, gaze, f,
                                       force_closed=is_blink)
            lpath, rpath = _frame_paths(pid, sid, label, f)
            (out / lpath).parent.mkdir(parents=True, exist_ok=True)
            write_pgm(out / lpath, left)
            write_pgm(out / rpath, right)
            samples.append(Sample(pid, sid, config.hmd_id, label, lpath, rpath, f, is_blink))
        save_manifest(samples, manifest_path)
    except OSError:
        shutil.rmtree(images_dir, ignore_errors=True)
        manifest_path.unlink(missing_ok=True)
        raise
    return samples


def inject_blinks(samples: list[Sample], blink_rate: float, config: GenConfig,
                  data_root) -> list[Sample]:
    """Re-render a per-class fraction of non-closed frames as blinks.

    Exactly floor(blink_rate * n) frames per non-closed class are re-rendered
    with both eyes shut; the samples keep their original labels and get
    blink_flag=True (ground truth for blink-filter testing).
    """
    if not 0.0 <= blink_rate <= 0.2:
        raise InputError("blink_rate must be in [0, 0.2]")
    if blink_rate == 0.0:
        return list(samples)
    root = Path(data_root)
    cfg = GenConfig(**{**_config_dict(config), "blink_rate": blink_rate})
    plan = [(s.participant_id, s.session_id, s.label, s.frame_index) for s in samples]
    flagged = select_blinks(cfg, plan)
    profiles: dict[int, ParticipantProfile] = {}
    sessions: dict[tuple[int, int], SessionContext] = {}
    updated = []
    for s in samples:
        key = (s.participant_id, s.session_id, s.label, s.frame_index)
        if key not in flagged or s.blink_flag:
            updated.append(s)
            continue
        pid, sid = s.participant_id, s.session_id
        if pid not in profiles:
            profiles[pid] = make_participant(cfg, pid)
        if (pid, sid) not in sessions:
            sessions[(pid, sid)] = make_session(cfg, pid, sid)
        gaze = gaze_for_frame(cfg, pid, sid, s.label, s.frame_index)
        left, right = render_frame(profiles[pid], sessions[(pid, sid)], s.label, gaze,
                                   s.frame_index, force_closed=True)
        write_pgm(root / s.left_path, left)
        write_pgm(root / s.right_path, right)
        updated.append(s.with_flag(True))
    return updated


def _config_dict(config: GenConfig) -> dict:
    return {f.name: getattr(config, f.name) for f in config.__dataclass_fields__.values()}
