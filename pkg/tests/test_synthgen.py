import hashlib

import numpy as np
import pytest

from eyeexpr import synthgen
from eyeexpr.errors import InputError
from eyeexpr.labels import AU10, EMO5
from eyeexpr.manifest import load_manifest
from eyeexpr.pgmio import read_pgm, write_pgm


def small_cfg(**kw):
    base = dict(num_participants=2, sessions_per_participant=2, frames_per_expression=3,
                eye_size=(48, 48), label_set=EMO5, global_seed=77)
    base.update(kw)
    return synthgen.GenConfig(**base)


def test_render_frame_is_deterministic():
    cfg = small_cfg()
    prof = synthgen.make_participant(cfg, 0)
    sess = synthgen.make_session(cfg, 0, 1)
    a = synthgen.render_frame(prof, sess, "Happiness", (0.3, -0.4), 2)
    b = synthgen.render_frame(prof, sess, "Happiness", (0.3, -0.4), 2)
    assert np.array_equal(a[0], b[0])
    assert np.array_equal(a[1], b[1])
    assert a[0].dtype == np.uint8


def test_closed_eyes_darker_than_neutral_in_aperture():
    # documented margin: closed sits at least 0.08 below neutral
    cfg = small_cfg(label_set=AU10)
    for pid in range(2):
        prof = synthgen.make_participant(cfg, pid)
        for sid in range(2):
            sess = synthgen.make_session(cfg, pid, sid)
            mask = synthgen.aperture_mask(prof, sess)
            neutral = synthgen.render_frame(prof, sess, "Neutral", (0.0, 0.0), 0)
            closed = synthgen.render_frame(prof, sess, "EyesClosed", (0.0, 0.0), 0)
            for eye in (0, 1):
                n = synthgen.aperture_intensity(neutral[eye], mask)
                c = synthgen.aperture_intensity(closed[eye], mask)
                assert c < n - 0.08


def test_left_wink_closes_only_left_eye():
    cfg = small_cfg(label_set=AU10)
    prof = synthgen.make_participant(cfg, 1)
    sess = synthgen.make_session(cfg, 1, 0)
    mask = synthgen.aperture_mask(prof, sess)
    wink_l, wink_r = synthgen.render_frame(prof, sess, "LeftWink", (0.0, 0.0), 0)
    closed_l, _ = synthgen.render_frame(prof, sess, "EyesClosed", (0.0, 0.0), 0)
    neutral_l, neutral_r = synthgen.render_frame(prof, sess, "Neutral", (0.0, 0.0), 0)
    # left eye matches the closed rendering, right stays near neutral
    assert abs(synthgen.aperture_intensity(wink_l, mask)
               - synthgen.aperture_intensity(closed_l, mask)) < 0.02
    assert abs(synthgen.aperture_intensity(wink_r, mask)
               - synthgen.aperture_intensity(neutral_r, mask)) < 0.02


def test_appearance_parameters_within_documented_ranges():
    cfg = small_cfg(num_participants=6)
    for pid in range(6):
        prof = synthgen.make_participant(cfg, pid)
        assert 0.15 <= prof.iris_radius <= 0.30
        assert 0.10 <= prof.aperture_half_h <= 0.14
        assert 0.46 <= prof.skin_base <= 0.68
    again = synthgen.make_participant(cfg, 3)
    ref = synthgen.make_participant(cfg, 3)
    assert again.skin_base == ref.skin_base
    assert np.array_equal(again.field_int[0], ref.field_int[0])


def test_manifest_counting(tmp_path):
    cfg = small_cfg(num_participants=2, sessions_per_participant=2,
                    frames_per_expression=10, eye_size=(32, 32))
    samples = synthgen.generate_dataset(cfg, tmp_path)
    assert len(samples) == 2 * 2 * 5 * 10
    loaded = load_manifest(tmp_path / "manifest.jsonl")
    assert len(loaded) == len(samples)
    assert loaded[0] == samples[0]


def test_identical_seed_identical_dataset_checksum(tmp_path):
    cfg = small_cfg(eye_size=(32, 32))

    def checksum(out):
        samples = synthgen.generate_dataset(cfg, out)
        h = hashlib.sha256((out / "manifest.jsonl").read_bytes())
        for s in samples[::7]:
            h.update((out / s.left_path).read_bytes())
            h.update((out / s.right_path).read_bytes())
        return h.hexdigest()

    a = checksum(tmp_path / "a")
    b = checksum(tmp_path / "b")
    assert a == b


def test_default_config_plan_matches_reported_scale():
    # about 2,000 frames per participant, about 46,000 per headset
    cfg = synthgen.GenConfig(skip_fraction=0.0)
    plan = synthgen.plan_dataset(cfg)
    per_participant = len(plan) / cfg.num_participants
    assert per_participant == 2000
    assert len(plan) == pytest.approx(23 * 2000)
    assert cfg.eye_hw == (200, 200)
    assert synthgen.GenConfig(hmd_id=2).eye_hw == (240, 320)
    assert cfg.frame_rate == 10.0


def test_participants_can_skip_one_asymmetric_brow_class():
    cfg = small_cfg(label_set=AU10, num_participants=30, skip_fraction=0.5,
                    frames_per_expression=1)
    plan = synthgen.plan_dataset(cfg)
    skipped = 0
    for pid in range(30):
        labels = {e[2] for e in plan if e[0] == pid}
        missing = {"LeftBrowRaise", "RightBrowRaise"} - labels
        assert len(missing) <= 1
        skipped += len(missing)
    assert 0 < skipped < 30  # some but not all skip at fraction 0.5


def test_blink_injection_counts_and_flags(tmp_path):
    cfg = small_cfg(num_participants=2, frames_per_expression=10, eye_size=(32, 32),
                    blink_rate=0.1)
    samples = synthgen.generate_dataset(cfg, tmp_path)
    per_class_total = 2 * 2 * 10
    for label in EMO5.classes:
        flagged = sum(1 for s in samples if s.label == label and s.blink_flag)
        if label == "ClosedEyes":
            assert flagged == 0
        else:
            assert flagged == int(0.1 * per_class_total)


def test_inject_blinks_zero_rate_is_identity(tmp_path):
    cfg = small_cfg(eye_size=(32, 32))
    samples = synthgen.generate_dataset(cfg, tmp_path)
    out = synthgen.inject_blinks(samples, 0.0, cfg, tmp_path)
    assert out == samples


def test_inject_blinks_rate_bounds(tmp_path):
    cfg = small_cfg(eye_size=(32, 32))
    with pytest.raises(InputError):
        synthgen.inject_blinks([], 0.5, cfg, tmp_path)


def test_flagged_frames_score_more_closed_than_unflagged(tmp_path):
    cfg = small_cfg(num_participants=2, frames_per_expression=10, eye_size=(48, 48),
                    blink_rate=0.15)
    samples = synthgen.generate_dataset(cfg, tmp_path)
    profiles = {pid: synthgen.make_participant(cfg, pid) for pid in range(2)}
    sessions = {(p, s): synthgen.make_session(cfg, p, s) for p in range(2) for s in range(2)}

    def closure_score(sample):
        mask = synthgen.aperture_mask(profiles[sample.participant_id],
                                      sessions[sample.key()])
        img = read_pgm(tmp_path / sample.left_path)
        return -synthgen.aperture_intensity(img, mask)  # higher = more closed

    flagged = [s for s in samples if s.blink_flag]
    unflagged = [s for s in samples if not s.blink_flag and s.label != "ClosedEyes"]
    assert flagged
    f_scores = [closure_score(s) for s in flagged]
    u_scores = [closure_score(s) for s in unflagged[:: max(1, len(unflagged) // 40)]]
    assert np.mean(f_scores) > np.mean(u_scores)
    assert min(f_scores) > np.percentile(u_scores, 60)


def test_nearest_centroid_within_session_beats_floor_and_transfers_worse(tmp_path):
    cfg = small_cfg(num_participants=3, sessions_per_participant=1,
                    frames_per_expression=12, eye_size=(48, 48), global_seed=5)
    samples = synthgen.generate_dataset(cfg, tmp_path)

    def frames_for(pid):
        by_label = {}
        for s in samples:
            if s.participant_id == pid:
                img = read_pgm(tmp_path / s.left_path).astype(np.float64) / 255.0
                by_label.setdefault(s.label, []).append(img)
        return by_label

    def centroid_accuracy(train_frames, test_frames):
        classes = sorted(train_frames)
        centroids = {c: np.mean(train_frames[c][:6], axis=0) for c in classes}
        correct = total = 0
        for c in classes:
            for img in test_frames[c][6:]:
                dists = {k: float(np.sum((img - v) ** 2)) for k, v in centroids.items()}
                pred = min(sorted(dists), key=dists.get)
                correct += pred == c
                total += 1
        return correct / total

    frames = {pid: frames_for(pid) for pid in range(3)}
    within = np.mean([centroid_accuracy(frames[p], frames[p]) for p in range(3)])
    across = np.mean([centroid_accuracy(frames[a], frames[b])
                      for a in range(3) for b in range(3) if a != b])
    assert within > 0.6
    assert across < within


def test_generate_cleans_up_on_io_failure(tmp_path, monkeypatch):
    cfg = small_cfg(eye_size=(32, 32))
    calls = {"n": 0}
    real_write = write_pgm

    def failing_write(path, image):
        calls["n"] += 1
        if calls["n"] > 5:
            raise OSError("disk full (simulated)")
        real_write(path, image)

    monkeypatch.setattr(synthgen, "write_pgm", failing_write)
    out = tmp_path / "broken"
    with pytest.raises(OSError):
        synthgen.generate_dataset(cfg, out)
    assert not (out / "manifest.jsonl").exists()
    assert not (out / "images").exists()


def test_pgm_round_trip(tmp_path):
    img = np.arange(48, dtype=np.uint8).reshape(6, 8)
    path = tmp_path / "x.pgm"
    write_pgm(path, img)
    assert np.array_equal(read_pgm(path), img)
