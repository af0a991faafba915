"""Model assembly, training loop, prediction, and weights-file tests."""

import numpy as np
import pytest

from densiscope import phantom
from densiscope.exceptions import ShapeError, WeightsFormatError
from densiscope.model import (
    DensityModel,
    ModelSpec,
    TrainConfig,
    build_model,
    load_weights,
    predict,
    save_weights,
    train,
)
from densiscope.nn import mape_loss
from densiscope.preprocess import SplitSpec, prepare_dataset, split_by_patient

from oracles import rel_error

# small-but-valid spec keeps unit tests fast; the default spec is exercised
# by the acceptance suite
SMALL_SPEC = ModelSpec(conv_channels=(4, 4, 8, 8, 8), dense_widths=(16, 8),
                       input_size=32)


def phantom_dataset(seed=0, n_patients=6, slices=3, size=32):
    params = phantom.PhantomParams(image_size=(size, size))
    raw = phantom.generate_dataset(seed, n_patients, slices, params)
    return prepare_dataset(raw, out_h=size, out_w=size)


class TestBuildModel:
    def test_output_shape(self):
        model = build_model(ModelSpec(), seed=1)
        x = np.zeros((3, 1, 128, 128), dtype=np.float32)
        assert model.infer(x).shape == (3,)

    def test_spatial_ladder_ends_at_4(self):
        assert ModelSpec().final_spatial() == 4

    def test_same_seed_bit_identical(self):
        a = build_model(SMALL_SPEC, seed=5)
        b = build_model(SMALL_SPEC, seed=5)
        for name, arr in a.param_table().items():
            assert arr.tobytes() == b.param_table()[name].tobytes()

    def test_different_seed_differs(self):
        a = build_model(SMALL_SPEC, seed=5)
        b = build_model(SMALL_SPEC, seed=6)
        assert a.param_table()["conv1.weight"].tobytes() != \
               b.param_table()["conv1.weight"].tobytes()

    def test_six_conv_blocks_rejected(self):
        with pytest.raises(ValueError):
            ModelSpec(conv_channels=(8, 8, 8, 8, 8, 8))

    def test_ladder_underflow_rejected(self):
        with pytest.raises(ValueError):
            ModelSpec(input_size=16)

    def test_bn_initialized_to_identity(self):
        model = build_model(SMALL_SPEC, seed=0)
        bn = model.layers[1]
        np.testing.assert_array_equal(bn.gamma, 1.0)
        np.testing.assert_array_equal(bn.beta, 0.0)


class TestPredict:
    def test_zero_output_layer_gives_zero(self):
        model = build_model(SMALL_SPEC, seed=2)
        out_layer = model.layers[-1]
        out_layer.weight[:] = 0.0
        out_layer.bias[:] = 0.0
        x = np.random.default_rng(0).random((4, 1, 32, 32)).astype(np.float32)
        np.testing.assert_array_equal(predict(model, x), 0.0)

    def test_negative_raw_output_clamps_to_zero(self):
        model = build_model(SMALL_SPEC, seed=2)
        out_layer = model.layers[-1]
        out_layer.weight[:] = 0.0
        out_layer.bias[:] = -0.03
        x = np.zeros((2, 1, 32, 32), dtype=np.float32)
        np.testing.assert_array_equal(predict(model, x), 0.0)

    def test_count_and_range(self):
        model = build_model(SMALL_SPEC, seed=3)
        x = np.random.default_rng(1).random((7, 1, 32, 32)).astype(np.float32)
        out = predict(model, x, batch_size=3)
        assert out.shape == (7,)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_wrong_input_size(self):
        model = build_model(SMALL_SPEC, seed=3)
        with pytest.raises(ShapeError):
            model.infer(np.zeros((1, 1, 16, 16), dtype=np.float32))

    def test_inference_is_pure(self):
        model = build_model(SMALL_SPEC, seed=4)
        x = np.random.default_rng(2).random((3, 1, 32, 32)).astype(np.float32)
        a = predict(model, x)
        b = predict(model, x)
        assert a.tobytes() == b.tobytes()


class TestTrain:
    def test_partial_batch_bookkeeping(self):
        ds = phantom_dataset(n_patients=4, slices=2)
        train_set, val_set, _ = split_by_patient(ds, SplitSpec(fractions=(0.5, 0.25, 0.25)))
        model = build_model(SMALL_SPEC, seed=0)
        model, history = train(model, train_set, val_set,
                               TrainConfig(epochs=1, batch_size=100, seed=0))
        assert len(history.train_loss) == 1
        assert len(history.val_loss) == 1
        assert model.epoch == 1
        assert model.optimizer.step_count == 1  # one partial batch

    def test_same_seed_same_final_weights(self):
        ds = phantom_dataset(n_patients=6, slices=2)
        splits = split_by_patient(ds, SplitSpec(seed=1))
        cfg = TrainConfig(epochs=2, batch_size=4, seed=7)
        m1, _ = train(build_model(SMALL_SPEC, 3), splits[0], splits[1], cfg)
        m2, _ = train(build_model(SMALL_SPEC, 3), splits[0], splits[1], cfg)
        for name, arr in m1.param_table().items():
            assert arr.tobytes() == m2.param_table()[name].tobytes(), name

    def test_loss_decreases(self):
        """Median train MAPE over the last epochs beats the first epochs."""
        ds = phantom_dataset(seed=5, n_patients=10, slices=4)
        splits = split_by_patient(ds, SplitSpec(fractions=(0.6, 0.2, 0.2), seed=2))
        model = build_model(SMALL_SPEC, seed=1)
        _, history = train(model, splits[0], splits[1],
                           TrainConfig(epochs=12, batch_size=8, seed=0))
        first = float(np.median(history.train_loss[:5]))
        last = float(np.median(history.train_loss[-5:]))
        assert last < first

    def test_resume_continues_epoch_counter(self, tmp_path):
        ds = phantom_dataset(n_patients=6, slices=2)
        splits = split_by_patient(ds, SplitSpec(seed=1))
        cfg = TrainConfig(epochs=2, batch_size=4, seed=7)
        model, _ = train(build_model(SMALL_SPEC, 3), splits[0], splits[1], cfg)
        save_weights(model, tmp_path / "w.dnsw")
        resumed = load_weights(tmp_path / "w.dnsw")
        assert resumed.epoch == 2
        resumed, _ = train(resumed, splits[0], splits[1],
                           TrainConfig(epochs=1, batch_size=4, seed=7))
        assert resumed.epoch == 3

    def test_resume_equals_uninterrupted_run(self, tmp_path):
        """Epoch seeds are absolute, so 1+1 epochs == 2 epochs bit for bit."""
        ds = phantom_dataset(n_patients=6, slices=2)
        splits = split_by_patient(ds, SplitSpec(seed=1))
        straight, _ = train(build_model(SMALL_SPEC, 3), splits[0], splits[1],
                            TrainConfig(epochs=2, batch_size=4, seed=7))
        part, _ = train(build_model(SMALL_SPEC, 3), splits[0], splits[1],
                        TrainConfig(epochs=1, batch_size=4, seed=7))
        save_weights(part, tmp_path / "w.dnsw")
        resumed, _ = train(load_weights(tmp_path / "w.dnsw"), splits[0], splits[1],
                           TrainConfig(epochs=1, batch_size=4, seed=7))
        for name, arr in straight.param_table().items():
            assert arr.tobytes() == resumed.param_table()[name].tobytes(), name

    def test_best_val_snapshot_retained(self):
        ds = phantom_dataset(n_patients=6, slices=2)
        splits = split_by_patient(ds, SplitSpec(seed=1))
        _, history = train(build_model(SMALL_SPEC, 3), splits[0], splits[1],
                           TrainConfig(epochs=3, batch_size=4, seed=0))
        assert history.best_val_epoch >= 1
        assert history.best_val_params is not None
        assert history.best_val_loss == min(history.val_loss)

    def test_batch_size_floor(self):
        with pytest.raises(ValueError):
            TrainConfig(batch_size=1)


class TestFullPipelineGradient:
    def test_backprop_matches_finite_differences(self):
        """Finite differences through the whole net plus MAPE loss, on a
        handful of randomly chosen parameters, double precision."""
        rng = np.random.default_rng(0)
        model = build_model(SMALL_SPEC, seed=9)
        for layer in model.layers:
            if hasattr(layer, "astype"):
                layer.astype(np.float64)
        x = rng.random((2, 1, 32, 32))
        target = np.array([0.25, 0.4])

        def run_loss():
            # fixed dropout rng -> the perturbed passes see identical masks
            raw = model.forward_train(x, np.random.default_rng(123))[:, 0]
            return mape_loss(raw, target)[0], raw

        table = model.param_table()
        # keep running stats fixed across FD evaluations
        stats_backup = {k: v.copy() for k, v in model.state_table().items()}

        def loss_only():
            val = run_loss()[0]
            for k, v in model.state_table().items():
                v[...] = stats_backup[k]
            return val

        loss, raw = run_loss()
        for k, v in model.state_table().items():
            v[...] = stats_backup[k]
        _, grad = mape_loss(raw, target)
        grads = model.backward(grad[:, None])

        picks = [("conv1.weight", (0, 0, 1, 1)), ("conv3.weight", (2, 1, 0, 2)),
                 ("bn2.gamma", (1,)), ("dense1.weight", (5, 3)),
                 ("out.bias", (0,)), ("conv5.bias", (3,))]
        eps = 1e-6
        for name, index in picks:
            arr = table[name]
            orig = arr[index]
            arr[index] = orig + eps
            hi = loss_only()
            arr[index] = orig - eps
            lo = loss_only()
            arr[index] = orig
            fd = (hi - lo) / (2 * eps)
            analytic = grads[name][index]
            assert rel_error(np.array([analytic]), np.array([fd])) < 1e-3, \
                f"{name}{index}: analytic {analytic} vs fd {fd}"


class TestWeightsFile:
    def trained_model(self, tmp_path):
        ds = phantom_dataset(n_patients=6, slices=2)
        splits = split_by_patient(ds, SplitSpec(seed=1))
        model, _ = train(build_model(SMALL_SPEC, 3), splits[0], splits[1],
                         TrainConfig(epochs=1, batch_size=4, seed=7))
        return model

    def test_save_load_save_is_byte_identical(self, tmp_path):
        model = self.trained_model(tmp_path)
        p1 = save_weights(model, tmp_path / "a.dnsw")
        p2 = save_weights(load_weights(p1), tmp_path / "b.dnsw")
        assert p1.read_bytes() == p2.read_bytes()

    def test_predictions_survive_round_trip(self, tmp_path):
        model = self.trained_model(tmp_path)
        x = np.random.default_rng(5).random((4, 1, 32, 32)).astype(np.float32)
        before = predict(model, x)
        save_weights(model, tmp_path / "w.dnsw")
        after = predict(load_weights(tmp_path / "w.dnsw"), x)
        assert before.tobytes() == after.tobytes()

    def test_corrupted_checksum_rejected(self, tmp_path):
        model = self.trained_model(tmp_path)
        path = save_weights(model, tmp_path / "w.dnsw")
        raw = bytearray(path.read_bytes())
        raw[100] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(WeightsFormatError, match="checksum"):
            load_weights(path)

    def test_truncated_file_rejected(self, tmp_path):
        model = self.trained_model(tmp_path)
        path = save_weights(model, tmp_path / "w.dnsw")
        path.write_bytes(path.read_bytes()[:50])
        with pytest.raises(WeightsFormatError):
            load_weights(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.dnsw"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(WeightsFormatError, match="magic"):
            load_weights(path)

    def test_version_mismatch_rejected(self, tmp_path):
        model = self.trained_model(tmp_path)
        path = save_weights(model, tmp_path / "w.dnsw")
        raw = bytearray(path.read_bytes())
        raw[4] = 99  # bump the version field
        body = bytes(raw[:-4])
        import binascii, struct
        path.write_bytes(body + struct.pack("<I", binascii.crc32(body)))
        with pytest.raises(WeightsFormatError, match="version"):
            load_weights(path)
