import numpy as np
import pytest

from eyeexpr import nn, training
from eyeexpr.errors import ConfigError, FormatError, InputError
from eyeexpr.labels import EMO5, LabelSet
from eyeexpr.preprocess import PersonalizationProfile


TOY2 = LabelSet("toy2", ("ClosedEyes", "Neutral"))


@pytest.fixture(scope="module")
def toy_subset(emo5_dataset_module):
    cfg, samples, root = emo5_dataset_module
    subset = [s for s in samples if s.label in TOY2.classes]
    inputs = training.load_inputs(subset, root, (16, 32))
    return subset, inputs, root


@pytest.fixture(scope="module")
def emo5_dataset_module(tmp_path_factory):
    from eyeexpr import synthgen

    root = tmp_path_factory.mktemp("train_data")
    cfg = synthgen.GenConfig(num_participants=2, sessions_per_participant=1,
                             frames_per_expression=24, eye_size=(32, 32),
                             label_set=EMO5, global_seed=3)
    samples = synthgen.generate_dataset(cfg, root)
    return cfg, samples, root


class TestBuildModel:
    def test_output_length_matches_classes(self):
        net = training.build_model(EMO5, (64, 128), seed=0)
        x = np.zeros((2, 64, 128, 1), dtype=np.float32)
        probs = net.forward_probs(x)
        assert probs.shape == (2, 5)

    def test_same_seed_identical_parameters(self):
        a = training.build_model(EMO5, (32, 64), seed=9)
        b = training.build_model(EMO5, (32, 64), seed=9)
        assert all(np.array_equal(x, y)
                   for x, y in zip(a.parameter_arrays(), b.parameter_arrays()))

    def test_parameter_count_closed_form(self):
        # conv k*k*cin*cout + cout; three 2x2 pools shrink 64x128 to 8x16;
        # flatten 32*8*16 = 4096; dense 4096*64 + 64; dense 64*5 + 5
        net = training.build_model(EMO5, (64, 128))
        expected = (
            (3 * 3 * 1 * 8 + 8)
            + (3 * 3 * 8 * 16 + 16)
            + (3 * 3 * 16 * 32 + 32)
            + (4096 * 64 + 64)
            + (64 * 5 + 5)
        )
        assert expected == 268421
        assert net.num_parameters() == expected

    def test_too_small_input_rejected(self):
        with pytest.raises(ConfigError, match="16x16"):
            training.build_model(EMO5, (15, 64))


class TestLrSchedule:
    def test_schedule_defaults(self):
        cfg = training.TrainConfig()
        assert training.lr_at_epoch(cfg, 0) == 0.045
        assert training.lr_at_epoch(cfg, 1) == pytest.approx(0.0423, abs=1e-12)

    def test_monotone_nonincreasing(self):
        cfg = training.TrainConfig()
        values = [training.lr_at_epoch(cfg, e) for e in range(20)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_negative_epoch_rejected(self):
        with pytest.raises(InputError):
            training.lr_at_epoch(training.TrainConfig(), -1)


class TestTrain:
    def test_separable_toy_reaches_full_accuracy(self, toy_subset):
        subset, inputs, root = toy_subset
        cfg = training.TrainConfig(epochs=10, batch_size=8, seed=1, input_size=(16, 32),
                                   label_set=TOY2, augment_enabled=False)
        ckpt, trace = training.train(subset, root, cfg, inputs=inputs)
        net = ckpt.to_network()
        preds = net.forward_probs(inputs[..., None]).argmax(axis=1)
        truth = np.array([TOY2.index(s.label) for s in subset])
        assert (preds == truth).mean() == 1.0
        assert len(trace) == 10
        assert all(np.isfinite(v) for v in trace)
        assert trace[-1] < trace[0]

    def test_training_is_deterministic(self, toy_subset, tmp_path):
        subset, inputs, root = toy_subset
        cfg = training.TrainConfig(epochs=2, batch_size=8, seed=4, input_size=(16, 32),
                                   label_set=TOY2)
        a, _ = training.train(subset, root, cfg, inputs=inputs)
        b, _ = training.train(subset, root, cfg, inputs=inputs)
        training.save_checkpoint(a, tmp_path / "a.eyem")
        training.save_checkpoint(b, tmp_path / "b.eyem")
        assert (tmp_path / "a.eyem").read_bytes() == (tmp_path / "b.eyem").read_bytes()

    def test_first_step_decreases_fixed_batch_loss(self, toy_subset):
        subset, inputs, root = toy_subset
        net = training.build_model(TOY2, (16, 32), seed=2)
        spec = nn.LossSpec(2, 0.0004)
        x = inputs[:16][..., None]
        y = np.eye(2, dtype=np.float32)[[TOY2.index(s.label) for s in subset[:16]]]
        loss0, grads, _ = nn.loss_and_grads(net, x, y, spec)
        params, _ = nn.rmsprop_step(net.parameter_arrays(), grads,
                                    nn.RMSPropState.zeros_like(net.parameter_arrays()),
                                    nn.OptimizerConfig(), 0.045)
        net.set_parameter_arrays(params)
        loss1, _, _ = nn.loss_and_grads(net, x, y, spec)
        assert loss1 < loss0

    def test_empty_manifest_rejected(self, tmp_path):
        with pytest.raises(InputError, match="empty"):
            training.train([], tmp_path, training.TrainConfig())

    def test_missing_profile_names_participant_session(self, toy_subset):
        subset, inputs, root = toy_subset
        no_neutral = [s for s in subset if s.label != "Neutral"]
        cfg = training.TrainConfig(epochs=1, input_size=(16, 32), label_set=TOY2,
                                   personalization=True)
        with pytest.raises(InputError, match=r"participant 0, session 0"):
            training.train(no_neutral, root,
                           cfg, inputs=inputs[[i for i, s in enumerate(subset)
                                               if s.label != "Neutral"]])

    def test_personalization_with_zero_profile_matches_off(self, toy_subset, monkeypatch):
        # the two modes differ only at the input-assembly boundary
        subset, inputs, root = toy_subset

        def zero_profiles(samples, inputs_, frame_rate, require_all=True):
            shape = inputs_.shape[1:]
            return {key: PersonalizationProfile(key[0], key[1],
                                                np.zeros(shape, np.float32), 1)
                    for key in {s.key() for s in samples}}

        monkeypatch.setattr(training, "build_profiles", zero_profiles)
        base = training.TrainConfig(epochs=2, batch_size=8, seed=6, input_size=(16, 32),
                                    label_set=TOY2)
        on = training.TrainConfig(epochs=2, batch_size=8, seed=6, input_size=(16, 32),
                                  label_set=TOY2, personalization=True)
        ckpt_off, _ = training.train(subset, root, base, inputs=inputs)
        ckpt_on, _ = training.train(subset, root, on, inputs=inputs)
        assert all(np.array_equal(a, b)
                   for a, b in zip(ckpt_off.tensors, ckpt_on.tensors))

    def test_label_outside_label_set_rejected(self, toy_subset):
        subset, inputs, root = toy_subset
        cfg = training.TrainConfig(label_set=LabelSet("tiny", ("Neutral", "Surprise")))
        with pytest.raises(InputError, match="not in label set"):
            training.train(subset, root, cfg, inputs=inputs)


class TestCheckpointFormat:
    def make_ckpt(self, toy_subset, **kw):
        subset, inputs, root = toy_subset
        cfg = training.TrainConfig(epochs=1, batch_size=16, seed=7, input_size=(16, 32),
                                   label_set=TOY2, **kw)
        return training.train(subset, root, cfg, inputs=inputs)[0]

    def test_round_trip_forward_bit_exact(self, toy_subset, tmp_path):
        ckpt = self.make_ckpt(toy_subset)
        subset, inputs, root = toy_subset
        before = ckpt.to_network().forward_probs(inputs[:8][..., None])
        path = tmp_path / "m.eyem"
        training.save_checkpoint(ckpt, path)
        loaded = training.load_checkpoint(path)
        after = loaded.to_network().forward_probs(inputs[:8][..., None])
        assert np.array_equal(before, after)
        assert loaded.descriptor == ckpt.descriptor
        assert all(np.array_equal(a, b) for a, b in zip(loaded.tensors, ckpt.tensors))

    def test_file_size_arithmetic(self, toy_subset, tmp_path):
        ckpt = self.make_ckpt(toy_subset)
        path = tmp_path / "m.eyem"
        training.save_checkpoint(ckpt, path)
        assert path.stat().st_size == training.checkpoint_file_size(ckpt)

    def test_truncated_and_corrupt_files_rejected(self, toy_subset, tmp_path):
        ckpt = self.make_ckpt(toy_subset)
        path = tmp_path / "m.eyem"
        training.save_checkpoint(ckpt, path)
        raw = path.read_bytes()

        (tmp_path / "t.eyem").write_bytes(raw[: len(raw) // 2])
        with pytest.raises(FormatError, match="truncated"):
            training.load_checkpoint(tmp_path / "t.eyem")

        (tmp_path / "m2.eyem").write_bytes(b"NOPE" + raw[4:])
        with pytest.raises(FormatError, match="magic"):
            training.load_checkpoint(tmp_path / "m2.eyem")

        bad_version = raw[:4] + b"\x63\x00" + raw[6:]
        (tmp_path / "v.eyem").write_bytes(bad_version)
        with pytest.raises(FormatError, match="version"):
            training.load_checkpoint(tmp_path / "v.eyem")

        (tmp_path / "x.eyem").write_bytes(raw + b"\x00")
        with pytest.raises(FormatError, match="trailing"):
            training.load_checkpoint(tmp_path / "x.eyem")

    def test_personalization_flag_round_trips(self, toy_subset, tmp_path):
        ckpt = self.make_ckpt(toy_subset, personalization=True)
        path = tmp_path / "p.eyem"
        training.save_checkpoint(ckpt, path)
        assert training.load_checkpoint(path).personalization is True
