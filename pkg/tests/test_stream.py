import io
import json

import numpy as np
import pytest

from eyeexpr import stream, training
from eyeexpr.errors import EnrollmentError, InputError
from eyeexpr.labels import EMO5


class TestSmooth:
    def test_hand_recurrence_alpha_half(self):
        state = stream.SmoothedState(np.array([1.0, 0.0]), alpha=0.5)
        state = stream.smooth(state, np.array([0.0, 1.0]))
        assert np.allclose(state.probs, [0.5, 0.5])
        state = stream.smooth(state, np.array([0.0, 1.0]))
        assert np.allclose(state.probs, [0.25, 0.75])

    def test_geometric_contraction_to_constant_input(self):
        p = np.array([0.7, 0.2, 0.1])
        state = stream.SmoothedState.uniform(3, alpha=0.3)
        gap0 = np.abs(state.probs - p).max()
        for t in range(1, 12):
            state = stream.smooth(state, p)
            expected = gap0 * 0.7**t
            assert np.abs(state.probs - p).max() == pytest.approx(expected, rel=1e-9)

    def test_alpha_one_is_passthrough(self):
        state = stream.SmoothedState.uniform(4, alpha=1.0)
        p = np.array([0.1, 0.2, 0.3, 0.4])
        assert np.allclose(stream.smooth(state, p).probs, p)

    def test_stays_on_simplex(self):
        state = stream.SmoothedState.uniform(5, alpha=0.3)
        rng = np.random.default_rng(0)
        for _ in range(50):
            p = rng.dirichlet(np.ones(5))
            state = stream.smooth(state, p)
            assert abs(state.probs.sum() - 1.0) < 1e-9
            assert np.all(state.probs >= 0)

    def test_off_simplex_input_rejected(self):
        state = stream.SmoothedState.uniform(3)
        with pytest.raises(InputError):
            stream.smooth(state, np.array([0.5, 0.5, 0.5]))

    def test_alpha_bounds(self):
        with pytest.raises(InputError):
            stream.SmoothedState.uniform(3, alpha=0.0)


class TestBlendshapes:
    def test_uniform_state_ties_to_lowest_index(self):
        state = stream.SmoothedState.uniform(5)
        frame = stream.to_blendshapes(state, EMO5, 0)
        assert frame.stable_label == "Anger"
        assert set(frame.weights) == {"Anger", "ClosedEyes", "Happiness", "Surprise"}
        assert all(w == pytest.approx(0.2) for w in frame.weights.values())

    def test_neutral_one_hot_gives_all_zero_channels(self):
        probs = np.zeros(5)
        probs[EMO5.index("Neutral")] = 1.0
        frame = stream.to_blendshapes(stream.SmoothedState(probs), EMO5, 10)
        assert frame.stable_label == "Neutral"
        assert all(w == 0.0 for w in frame.weights.values())

    def test_argmax_channel(self):
        probs = np.array([0.1, 0.1, 0.6, 0.1, 0.1])
        frame = stream.to_blendshapes(stream.SmoothedState(probs), EMO5, 5)
        assert frame.stable_label == "Happiness"
        assert frame.weights["Happiness"] == pytest.approx(0.6)


@pytest.fixture(scope="module")
def stream_setup(tmp_path_factory):
    from eyeexpr import synthgen

    root = tmp_path_factory.mktemp("stream_data")
    gen = synthgen.GenConfig(num_participants=1, sessions_per_participant=1,
                             frames_per_expression=6, eye_size=(32, 32),
                             label_set=EMO5, global_seed=21)
    samples = synthgen.generate_dataset(gen, root)
    cfg = training.TrainConfig(epochs=2, batch_size=8, seed=0, input_size=(16, 32),
                               label_set=EMO5, augment_enabled=False)
    ckpt, _ = training.train(samples, root, cfg)
    return samples, root, ckpt


class TestStreamRun:
    def run(self, ckpt, samples, root, **kw):
        out = io.StringIO()
        summary = stream.stream_run(ckpt, [(s.left_path, s.right_path) for s in samples],
                                    data_root=root, out=out, **kw)
        return out.getvalue(), summary

    def test_one_record_per_frame_plus_summary(self, stream_setup):
        samples, root, ckpt = stream_setup
        text, summary = self.run(ckpt, samples[:10], root)
        lines = text.strip().splitlines()
        assert len(lines) == 10
        assert summary.frames == 10
        rec = json.loads(lines[0])
        assert set(rec) == {"seq", "timestamp_ms", "probs", "stable_label", "blendshapes"}
        assert rec["seq"] == 0
        assert rec["timestamp_ms"] == 0
        assert json.loads(lines[3])["timestamp_ms"] == 300  # 10 Hz default
        assert sum(rec["probs"].values()) == pytest.approx(1.0, abs=1e-5)

    def test_empty_source_summary_only(self, stream_setup):
        _, root, ckpt = stream_setup
        text, summary = self.run(ckpt, [], root)
        assert text == ""
        assert summary.frames == 0

    def test_emission_bytes_are_deterministic(self, stream_setup):
        samples, root, ckpt = stream_setup
        a, _ = self.run(ckpt, samples[:8], root)
        b, _ = self.run(ckpt, samples[:8], root)
        assert a == b

    def test_unreadable_frame_skipped_sequence_preserved(self, stream_setup):
        samples, root, ckpt = stream_setup
        pairs = [(samples[0].left_path, samples[0].right_path),
                 ("missing_L.pgm", "missing_R.pgm"),
                 (samples[1].left_path, samples[1].right_path)]
        out, warn = io.StringIO(), io.StringIO()
        summary = stream.stream_run(ckpt, pairs, data_root=root, out=out, warn_out=warn)
        lines = out.getvalue().strip().splitlines()
        assert summary.frames == 2
        assert [json.loads(ln)["seq"] for ln in lines] == [0, 2]
        assert "skipped" in warn.getvalue()

    def test_personalized_checkpoint_requires_profile(self, stream_setup, tmp_path):
        samples, root, _ = stream_setup
        cfg = training.TrainConfig(epochs=1, batch_size=8, seed=0, input_size=(16, 32),
                                   label_set=EMO5, personalization=True,
                                   augment_enabled=False, frame_rate=1.0)
        ckpt, _ = training.train(samples, root, cfg)
        with pytest.raises(EnrollmentError, match="enroll"):
            stream.stream_run(ckpt, [], data_root=root, profile=None, out=io.StringIO())

    def test_latency_summary_fields(self, stream_setup):
        samples, root, ckpt = stream_setup
        _, summary = self.run(ckpt, samples[:5], root)
        assert summary.p50_ms > 0
        assert summary.p99_ms >= summary.p50_ms
        obj = json.loads(summary.to_json())
        assert set(obj) == {"frames", "p50_ms", "p99_ms"}


class TestSmoothingReducesFlips:
    def oscillating_probs(self, n=60):
        # raw argmax flips every frame; amplitudes are slightly asymmetric
        a = np.array([0.51, 0.49])
        b = np.array([0.498, 0.502])
        return [a if i % 2 == 0 else b for i in range(n)]

    def count_flips(self, labels):
        return sum(1 for x, y in zip(labels, labels[1:]) if x != y)

    @pytest.mark.parametrize("alpha", [0.1, 0.3, 0.5])
    def test_fewer_stable_label_transitions_than_raw(self, alpha):
        seq = self.oscillating_probs()
        raw = [int(np.argmax(p)) for p in seq]
        assert self.count_flips(raw) == len(seq) - 1
        state = stream.SmoothedState.uniform(2, alpha=alpha)
        smoothed = []
        for p in seq:
            state = stream.smooth(state, p)
            smoothed.append(int(np.argmax(state.probs)))
        assert self.count_flips(smoothed) < self.count_flips(raw)
