import numpy as np
import pytest

from buffertta.checkpoint import (CheckpointError, deserialize, load_checkpoint,
                                  save_checkpoint, serialize)
from buffertta.model import Backbone, BackboneConfig, build_backbone

SMALL = BackboneConfig(stages=2, blocks_per_stage=1, base_channels=4,
                       input_shape=(3, 8, 8))


def small_model(seed=3):
    return build_backbone(SMALL, seed=seed)


class TestConstruction:
    def test_same_seed_same_params(self):
        a = build_backbone(SMALL, seed=11)
        b = build_backbone(SMALL, seed=11)
        assert a.hash_params() == b.hash_params()

    def test_different_seed_different_params(self):
        a = build_backbone(SMALL, seed=11)
        b = build_backbone(SMALL, seed=12)
        assert a.hash_params() != b.hash_params()

    def test_parameter_count(self):
        model = small_model()
        n_blocks = SMALL.stages * SMALL.blocks_per_stage
        # conv weight+bias per block, head weight+bias
        assert len(list(model.params)) == 2 * n_blocks + 2
        assert len(model.norms.layers) == n_blocks

    def test_insertion_points(self):
        model = small_model()
        points = list(model.insertion_points())
        assert len(points) == SMALL.stages * SMALL.blocks_per_stage * 3
        assert "stage0.block0.conv" in points
        assert "stage1.block0.relu" in points

    def test_stage_channel_doubling(self):
        assert SMALL.stage_channels(0) == 4
        assert SMALL.stage_channels(1) == 8

    def test_everything_frozen_after_pretrain_load(self, pretrained_model):
        assert all(not pretrained_model.params.trainable(n)
                   for n in pretrained_model.params)
        assert all(not layer.affine_trainable
                   for _, layer in pretrained_model.norms)


class TestForward:
    def test_logits_shape(self):
        model = small_model()
        x = np.random.default_rng(0).standard_normal((5, 3, 8, 8))
        assert model.logits(x, check_finite=False).shape == (5, SMALL.num_classes)

    def test_rejects_wrong_input_shape(self):
        model = small_model()
        x = np.zeros((2, 3, 7, 7))
        with pytest.raises(ValueError):
            model.logits(x)

    def test_forward_is_deterministic(self):
        model = small_model()
        x = np.random.default_rng(1).standard_normal((4, 3, 8, 8))
        a = model.logits(x, check_finite=False)
        b = model.logits(x, check_finite=False)
        assert np.array_equal(a, b)

    def test_capture_collects_all_points(self):
        model = small_model()
        x = np.random.default_rng(2).standard_normal((2, 3, 8, 8))
        capture = {}
        model.logits(x, capture=capture, check_finite=False)
        for point in model.insertion_points():
            assert point in capture
        assert "stage0.out" in capture

    def test_forward_does_not_change_theta(self):
        model = small_model()
        before = model.hash_params()
        x = np.random.default_rng(3).standard_normal((4, 3, 8, 8))
        model.logits(x, check_finite=False)
        assert model.hash_params() == before


class TestHashing:
    def test_hash_sensitive_to_any_parameter(self):
        model = small_model()
        before = model.hash_params()
        model.params["head.bias"][0] += 1e-9
        assert model.hash_params() != before

    def test_hash_ignores_running_stats(self):
        model = small_model()
        before = model.hash_params()
        for _, layer in model.norms:
            layer.mu_run += 1.0
        assert model.hash_params() == before

    def test_source_state_hash_covers_source_stats(self):
        model = small_model()
        before = model.hash_source_norm_state()
        next(iter(model.norms.layers.values())).mu_s[0] += 1.0
        assert model.hash_source_norm_state() != before

    def test_clone_is_independent(self):
        model = small_model()
        clone = model.clone()
        assert clone.hash_params() == model.hash_params()
        clone.params["head.bias"][0] += 1.0
        assert clone.hash_params() != model.hash_params()


class TestCheckpoint:
    def test_round_trip_preserves_state(self, tmp_path):
        model = small_model(seed=5)
        model.prep_mean = np.array([0.4, 0.5, 0.6])
        model.prep_std = np.array([0.2, 0.25, 0.3])
        path = tmp_path / "m.btta"
        save_checkpoint(model, path)
        loaded, bank = load_checkpoint(path)
        assert bank is None
        assert loaded.hash_params() == model.hash_params()
        assert loaded.hash_source_norm_state() == model.hash_source_norm_state()
        assert np.array_equal(loaded.prep_mean, model.prep_mean)
        x = np.random.default_rng(4).standard_normal((3, 3, 8, 8))
        assert np.array_equal(loaded.logits(x, check_finite=False),
                              model.logits(x, check_finite=False))

    def test_round_trip_is_byte_stable(self):
        model = small_model(seed=6)
        blob = serialize(model)
        loaded, _ = deserialize(blob)
        assert serialize(loaded) == blob

    def test_corruption_detected(self, tmp_path):
        model = small_model()
        blob = bytearray(serialize(model))
        blob[len(blob) // 2] ^= 0xFF
        with pytest.raises(CheckpointError):
            deserialize(bytes(blob))

    def test_truncation_detected(self):
        model = small_model()
        blob = serialize(model)
        with pytest.raises(CheckpointError):
            deserialize(blob[: len(blob) // 2])

    def test_bad_magic_detected(self):
        model = small_model()
        import hashlib

        body = b"XXXX" + serialize(model)[4:-32]
        with pytest.raises(CheckpointError):
            deserialize(body + hashlib.sha256(body).digest())


class TestStandardize:
    def test_channel_standardization(self):
        model = small_model()
        model.prep_mean = np.array([0.1, 0.2, 0.3])
        model.prep_std = np.array([0.5, 0.25, 0.125])
        x = np.full((2, 3, 8, 8), 0.3)
        z = model.standardize(x)
        expected = (0.3 - model.prep_mean) / model.prep_std
        assert np.allclose(z.mean(axis=(0, 2, 3)), expected, atol=1e-12)
