"""Model tests: training behaviour, taps, checkpoint format."""

import numpy as np
import pytest

from advspec import model as M


def tiny_config(seed=5, num_classes=2):
    return M.ModelConfig(input_shape=(2, 8, 8), conv_blocks=((4, 1), (6, 1)),
                         num_classes=num_classes, hidden_units=12, seed=seed)


@pytest.fixture(scope="module")
def blob_set():
    """Linearly separable blobs: dark class 0, bright class 1."""
    rng = np.random.default_rng(1)
    n = 60
    imgs = np.concatenate([rng.uniform(0.0, 0.45, size=(n, 2, 8, 8)),
                           rng.uniform(0.55, 1.0, size=(n, 2, 8, 8))])
    return M.LabeledImageSet(imgs, np.array([0] * n + [1] * n))


@pytest.fixture(scope="module")
def trained(blob_set):
    losses = []
    params = M.train(tiny_config(), blob_set, epochs=5, lr=0.05,
                     callback=lambda e, l: losses.append(l))
    return params, losses


class TestConfig:
    def test_divisibility_enforced(self):
        with pytest.raises(ValueError, match="divisible"):
            M.ModelConfig(input_shape=(3, 12, 12), conv_blocks=((4, 1), (8, 1), (8, 1)))

    def test_param_count_matches_layers(self):
        cfg = tiny_config()
        params = M.init_params(cfg)
        total = sum(a.size for layer in params.layers() for a in layer.param_arrays())
        assert total == params.flat.size == M.param_count(cfg)

    def test_wrong_length_vector_rejected(self):
        cfg = tiny_config()
        with pytest.raises(ValueError, match="parameter vector"):
            M.ModelParams(cfg, np.zeros(M.param_count(cfg) + 1))


class TestTrain:
    def test_separable_blobs_learned(self, blob_set, trained):
        params, _ = trained
        acc = np.mean(M.predict_batch(params, blob_set.images) == blob_set.labels)
        assert acc >= 0.95

    def test_zero_epochs_returns_init(self, blob_set):
        cfg = tiny_config()
        params = M.train(cfg, blob_set, epochs=0, lr=0.05)
        assert np.array_equal(params.flat, M.init_params(cfg).flat)

    def test_same_seed_bit_identical(self, blob_set):
        a = M.train(tiny_config(seed=9), blob_set, epochs=2, lr=0.05)
        b = M.train(tiny_config(seed=9), blob_set, epochs=2, lr=0.05)
        assert np.array_equal(a.flat, b.flat)

    def test_loss_non_increasing_early(self, trained):
        _, losses = trained
        for a, b in zip(losses[:2], losses[1:3]):
            assert b <= a * 1.05  # 5% slack per step for SGD noise

    def test_divergence_aborts(self, blob_set):
        with pytest.raises(RuntimeError, match="diverged"):
            M.train(tiny_config(), blob_set, epochs=3, lr=1e80)

    def test_empty_set_rejected(self):
        empty = M.LabeledImageSet(np.zeros((0, 2, 8, 8)), np.zeros(0, dtype=int))
        with pytest.raises(ValueError, match="empty"):
            M.train(tiny_config(), empty, epochs=1, lr=0.05)

    def test_label_out_of_range_rejected(self, blob_set):
        bad = M.LabeledImageSet(blob_set.images, blob_set.labels + 5)
        with pytest.raises(ValueError, match="num_classes"):
            M.train(tiny_config(), bad, epochs=1, lr=0.05)


class TestPredict:
    def test_argmax_consistency(self, trained, blob_set):
        params, _ = trained
        for img in blob_set.images[:5]:
            logits, label = M.predict(params, img)
            assert label == int(np.argmax(logits))

    def test_tie_breaks_to_lowest_index(self):
        cfg = tiny_config()
        params = M.init_params(cfg)
        params.flat[:] = 0.0  # all-zero net: every logit identical
        _, label = M.predict(params, np.full(cfg.input_shape, 0.3))
        assert label == 0

    def test_shape_mismatch_rejected(self, trained):
        params, _ = trained
        with pytest.raises(ValueError, match="shape"):
            M.predict(params, np.zeros((2, 4, 4)))

    def test_train_accuracy_above_chance(self, trained, blob_set):
        params, _ = trained
        acc = np.mean(M.predict_batch(params, blob_set.images) == blob_set.labels)
        assert acc > 1.0 / 2 + 0.2

    def test_pure_function(self, trained, blob_set):
        params, _ = trained
        a, _ = M.predict(params, blob_set.images[0])
        b, _ = M.predict(params, blob_set.images[0])
        assert np.array_equal(a, b)


class TestFeatureMaps:
    def test_ordinal_zero_is_input(self, trained):
        params, _ = trained
        img = np.random.default_rng(0).uniform(size=(2, 8, 8))
        maps = M.feature_maps(params, img, [0])
        assert np.array_equal(maps[0], img)

    def test_maps_nonnegative(self, trained):
        params, _ = trained
        img = np.random.default_rng(1).uniform(size=(2, 8, 8))
        for fmap in M.feature_maps(params, img, range(1, params.num_activations + 1)):
            assert fmap.min() >= 0.0

    def test_request_order_preserved(self, trained):
        params, _ = trained
        img = np.random.default_rng(2).uniform(size=(2, 8, 8))
        maps = M.feature_maps(params, img, [2, 0, 1])
        assert maps[1].shape == (2, 8, 8)
        assert np.array_equal(maps[0], M.feature_maps(params, img, [2])[0])

    def test_invalid_ordinal_rejected(self, trained):
        params, _ = trained
        with pytest.raises(ValueError, match="ordinal"):
            M.feature_maps(params, np.zeros((2, 8, 8)), [17])

    def test_forward_splice_reproduces_logits(self, trained):
        params, _ = trained
        img = np.random.default_rng(3).uniform(size=(2, 8, 8))
        logits, _ = M.predict(params, img)
        for o in range(0, params.num_activations + 1):
            fmap = M.feature_maps(params, img, [o])[0]
            spliced = M.resume_forward(params, o, fmap)
            assert np.abs(spliced - logits).max() < 1e-10

    def test_batch_matches_single(self, trained):
        params, _ = trained
        imgs = np.random.default_rng(4).uniform(size=(3, 2, 8, 8))
        batch = M.feature_maps_batch(params, imgs, [1, 3])
        for i in range(3):
            single = M.feature_maps(params, imgs[i], [1, 3])
            # batched and single GEMMs may differ in the final ulp
            assert np.allclose(batch[0][i], single[0], rtol=0, atol=1e-12)
            assert np.allclose(batch[1][i], single[1], rtol=0, atol=1e-12)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, trained, tmp_path):
        params, _ = trained
        path = tmp_path / "model.sdck"
        M.save_checkpoint(params, path)
        loaded = M.load_checkpoint(path)
        assert loaded.config == params.config
        assert np.array_equal(loaded.flat, params.flat)

    def test_predictions_survive_round_trip(self, trained, blob_set, tmp_path):
        params, _ = trained
        path = tmp_path / "model.sdck"
        M.save_checkpoint(params, path)
        loaded = M.load_checkpoint(path)
        a, la = M.predict(params, blob_set.images[0])
        b, lb = M.predict(loaded, blob_set.images[0])
        assert np.array_equal(a, b) and la == lb

    def test_corrupted_header_rejected(self, trained, tmp_path):
        params, _ = trained
        path = tmp_path / "model.sdck"
        M.save_checkpoint(params, path)
        blob = bytearray(path.read_bytes())
        blob[0] = 0x58
        path.write_bytes(bytes(blob))
        with pytest.raises(ValueError, match="magic"):
            M.load_checkpoint(path)

    def test_truncated_rejected(self, trained, tmp_path):
        params, _ = trained
        path = tmp_path / "model.sdck"
        M.save_checkpoint(params, path)
        path.write_bytes(path.read_bytes()[:-17])
        with pytest.raises(ValueError):
            M.load_checkpoint(path)

    def test_payload_corruption_rejected(self, trained, tmp_path):
        params, _ = trained
        path = tmp_path / "model.sdck"
        M.save_checkpoint(params, path)
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(ValueError, match="checksum"):
            M.load_checkpoint(path)

    def test_version_mismatch_rejected(self, trained, tmp_path):
        import hashlib
        import struct
        params, _ = trained
        path = tmp_path / "model.sdck"
        M.save_checkpoint(params, path)
        blob = bytearray(path.read_bytes()[:-8])
        struct.pack_into("<H", blob, 4, 99)
        blob = bytes(blob)
        path.write_bytes(blob + hashlib.sha256(blob).digest()[:8])
        with pytest.raises(ValueError, match="version"):
            M.load_checkpoint(path)


class TestImageSet:
    def test_pixel_range_enforced(self):
        with pytest.raises(ValueError, match="0,1"):
            M.LabeledImageSet(np.full((1, 1, 2, 2), 1.5), np.zeros(1, dtype=int))

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError, match="labels"):
            M.LabeledImageSet(np.zeros((2, 1, 2, 2)), np.zeros(3, dtype=int))
