import numpy as np
import pytest

from eyeexpr import preprocess as pp
from eyeexpr import synthgen
from eyeexpr.errors import FormatError, InputError
from eyeexpr.imageops import bilinear_resize
from eyeexpr.labels import EMO5


def bilinear_oracle(image, out_h, out_w):
    """Independent bilinear reference: explicit per-pixel weight enumeration."""
    h, w = image.shape
    out = np.zeros((out_h, out_w))
    for i in range(out_h):
        for j in range(out_w):
            sy = min(max((i + 0.5) * h / out_h - 0.5, 0), h - 1)
            sx = min(max((j + 0.5) * w / out_w - 0.5, 0), w - 1)
            y0, x0 = int(np.floor(sy)), int(np.floor(sx))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = sy - y0, sx - x0
            out[i, j] = (image[y0, x0] * (1 - fy) * (1 - fx)
                         + image[y0, x1] * (1 - fy) * fx
                         + image[y1, x0] * fy * (1 - fx)
                         + image[y1, x1] * fy * fx)
    return out


class TestRectifyAndConcat:
    def test_constant_128_maps_to_half(self):
        l = np.full((4, 4), 128, np.uint8)
        out = pp.rectify_and_concat(l, l.copy(), (6, 12))
        assert out.shape == (6, 12)
        assert np.allclose(out, 128 / 255)

    def test_left_right_order_preserved(self):
        left = np.zeros((6, 6), np.uint8)
        right = np.full((6, 6), 255, np.uint8)
        out = pp.rectify_and_concat(left, right, (4, 8))
        assert np.allclose(out[:, :4], 0.0)
        assert np.allclose(out[:, 4:], 1.0)

    def test_bilinear_downsample_matches_hand_weights(self):
        # 4x4 ramp rows [0, 1, 2, 3]: 4->2 samples at 0.5 and 2.5 average pairs
        ramp = np.tile(np.arange(4, dtype=np.float64), (4, 1))
        got = bilinear_resize(ramp, 2, 2)
        assert np.allclose(got, [[0.5, 2.5], [0.5, 2.5]])
        rng = np.random.default_rng(3)
        img = rng.uniform(0, 1, (4, 4))
        assert np.allclose(bilinear_resize(img, 2, 2), bilinear_oracle(img, 2, 2), atol=1e-12)
        assert np.allclose(bilinear_resize(img, 7, 5), bilinear_oracle(img, 7, 5), atol=1e-12)

    def test_center_crop_rectangular_eyes(self):
        tall = np.zeros((8, 4), np.uint8)
        tall[2:6, :] = 200  # the centered square
        out = pp.rectify_and_concat(tall, tall.copy(), (4, 8))
        assert np.allclose(out, 200 / 255)

    def test_idempotent_on_target_size_normalized_pairs(self, rng):
        a = rng.uniform(0, 1, (16, 16)).astype(np.float32)
        b = rng.uniform(0, 1, (16, 16)).astype(np.float32)
        once = pp.rectify_and_concat(a, b, (16, 32))
        twice = pp.rectify_and_concat(once[:, :16], once[:, 16:], (16, 32))
        assert np.abs(once - twice).max() < 1e-6

    def test_mismatched_eye_dimensions_rejected(self):
        with pytest.raises(InputError, match="differ"):
            pp.rectify_and_concat(np.zeros((4, 4), np.uint8), np.zeros((5, 5), np.uint8))


class TestAugment:
    def test_zero_bounds_is_identity(self, rng):
        img = rng.uniform(0, 1, (12, 24)).astype(np.float32)
        cfg = pp.AugmentConfig(0.0, 0.0, 0.0)
        out = pp.augment(img, cfg, np.random.default_rng(0))
        assert np.array_equal(out, img)

    def test_brightness_only_draw(self):
        img = np.full((8, 8), 0.5, np.float32)
        out = pp.apply_augmentation(img, pp.AugmentDraw(0.0, 1.0, 1.02))
        assert np.allclose(out, 0.51, atol=1e-7)

    def test_rotation_round_trip_deviation_bound(self, emo5_dataset):
        # rotate by the bound then back; trip error stays under 0.05 at 64x128
        cfg, samples, root = emo5_dataset
        from eyeexpr.pgmio import read_pgm

        s = samples[0]
        img = pp.rectify_and_concat(read_pgm(root / s.left_path),
                                    read_pgm(root / s.right_path), (64, 128))
        fwd = pp.apply_augmentation(img, pp.AugmentDraw(3.6, 1.0, 1.0))
        back = pp.apply_augmentation(fwd, pp.AugmentDraw(-3.6, 1.0, 1.0))
        assert np.abs(back - img).max() < 0.05

    def test_draws_respect_bounds(self, rng):
        cfg = pp.AugmentConfig()
        assert cfg.rotation_bound_deg == 3.6
        for _ in range(200):
            d = pp.sample_augmentation(cfg, rng)
            assert -3.6 <= d.rotation_deg <= 3.6
            assert 0.98 <= d.scale <= 1.02
            assert 0.98 <= d.brightness <= 1.02

    def test_augmentation_never_flips_left_right_structure(self):
        # left half dark, right half bright; aperture statistics stay on their sides
        img = np.concatenate([np.full((16, 16), 0.2), np.full((16, 16), 0.8)], axis=1)
        img = img.astype(np.float32)
        rng = np.random.default_rng(5)
        cfg = pp.AugmentConfig()
        for _ in range(25):
            out = pp.augment(img, cfg, rng)
            assert out[:, :16].mean() < out[:, 16:].mean()

    def test_output_clamped_to_unit_range(self):
        img = np.full((8, 8), 0.999, np.float32)
        out = pp.apply_augmentation(img, pp.AugmentDraw(0.0, 1.0, 1.02))
        assert out.max() <= 1.0


class TestProfile:
    def test_single_frame_profile_equals_frame(self, rng):
        frame = rng.uniform(0, 1, (6, 6)).astype(np.float32)
        prof = pp.build_profile([frame], frame_rate=10.0)
        assert np.allclose(prof.mean_neutral, frame)
        assert prof.source_frame_count == 1

    def test_two_constant_frames_mean(self):
        a = np.full((4, 4), 0.2, np.float32)
        b = np.full((4, 4), 0.4, np.float32)
        prof = pp.build_profile([a, b], frame_rate=10.0)
        assert np.allclose(prof.mean_neutral, 0.3)

    def test_five_second_rule_uses_exactly_50_of_70_at_10hz(self, rng):
        frames = [rng.uniform(0, 1, (4, 4)).astype(np.float32) for _ in range(70)]
        prof = pp.build_profile(frames, frame_rate=10.0)
        assert prof.source_frame_count == 50
        assert np.allclose(prof.mean_neutral, np.mean(frames[:50], axis=0), atol=1e-6)

    def test_no_neutral_frames_is_an_error(self):
        with pytest.raises(InputError, match="no neutral data"):
            pp.build_profile([], frame_rate=10.0, participant_id=4, session_id=1)

    def test_personalize_self_subtraction_and_constants(self):
        img = np.full((4, 4), 0.5, np.float32)
        prof = pp.build_profile([img], frame_rate=10.0)
        assert np.allclose(pp.personalize(img, prof), 0.0)
        prof3 = pp.build_profile([np.full((4, 4), 0.3, np.float32)], frame_rate=10.0)
        assert np.allclose(pp.personalize(img, prof3), 0.2)

    def test_mean_of_personalized_constituents_is_zero(self, rng):
        frames = [rng.uniform(0, 1, (8, 8)).astype(np.float32) for _ in range(30)]
        prof = pp.build_profile(frames, frame_rate=4.0)
        used = frames[: prof.source_frame_count]
        residual = np.mean([pp.personalize(f, prof) for f in used], axis=0)
        assert np.abs(residual).max() < 1e-6

    def test_shape_mismatch_rejected(self, rng):
        prof = pp.build_profile([rng.uniform(0, 1, (4, 4)).astype(np.float32)], 10.0)
        with pytest.raises(InputError, match="shape"):
            pp.personalize(np.zeros((5, 5), np.float32), prof)

    def test_cross_participant_profile_warns(self, rng):
        frame = rng.uniform(0, 1, (4, 4)).astype(np.float32)
        prof = pp.build_profile([frame], 10.0, participant_id=1, session_id=0)
        with pytest.warns(UserWarning, match="ablation"):
            pp.personalize(frame, prof, participant_id=2)

    def test_profile_file_round_trip_and_corruption(self, tmp_path, rng):
        prof = pp.build_profile([rng.uniform(0, 1, (6, 10)).astype(np.float32)], 10.0, 3, 1)
        path = tmp_path / "p.eyep"
        pp.save_profile(prof, path)
        back = pp.load_profile(path, 3, 1)
        assert np.array_equal(back.mean_neutral, prof.mean_neutral)
        raw = path.read_bytes()
        (tmp_path / "trunc.eyep").write_bytes(raw[:-8])
        with pytest.raises(FormatError, match="truncated"):
            pp.load_profile(tmp_path / "trunc.eyep")
        (tmp_path / "magic.eyep").write_bytes(b"XXXX" + raw[4:])
        with pytest.raises(FormatError, match="magic"):
            pp.load_profile(tmp_path / "magic.eyep")


def test_appearance_field_removed_exactly_by_personalization():
    """Per-participant additive offsets cancel through the full pipeline."""

    def personalized_frames(field_scale):
        cfg = synthgen.GenConfig(num_participants=1, frames_per_expression=6,
                                 eye_size=(48, 48), label_set=EMO5, global_seed=15,
                                 appearance_field_scale=field_scale)
        prof = synthgen.make_participant(cfg, 0)
        sess = synthgen.make_session(cfg, 0, 0)
        rectified = {}
        for label in ("Neutral", "Anger", "Surprise"):
            for f in range(6):
                gaze = synthgen.gaze_for_frame(cfg, 0, 0, label, f)
                left, right = synthgen.render_frame(prof, sess, label, gaze, f)
                rectified[(label, f)] = pp.rectify_and_concat(left, right, (48, 96))
        profile = pp.build_profile([rectified[("Neutral", f)] for f in range(6)], 10.0)
        return {k: pp.personalize(v, profile) for k, v in rectified.items()}

    with_field = personalized_frames(1.0)
    without_field = personalized_frames(0.0)
    worst = max(np.abs(with_field[k] - without_field[k]).max() for k in with_field)
    assert worst < 1e-6
