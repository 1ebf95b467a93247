"""Full-model contracts: shapes, thresholds, ablation plumbing, checkpoints."""

import numpy as np
import pytest

from cloudseg.model import (
    CheckpointError,
    CloudSegModel,
    ModelConfig,
    ablation_variants,
    load_checkpoint,
    save_checkpoint,
)
from cloudseg.tensor import ShapeError


@pytest.fixture(scope="module")
def tiny_model():
    return CloudSegModel(ModelConfig.tiny(seed=7))


def rand_batch(n=1, bands=4, size=64, seed=0):
    return np.random.default_rng(seed).standard_normal((n, bands, size, size)).astype(np.float32)


class TestForward:
    def test_shape_and_range(self, tiny_model):
        probs = tiny_model.predict_proba(rand_batch())
        assert probs.shape == (1, 64, 64)
        assert (probs > 0).all() and (probs < 1).all()

    def test_batch_equals_per_sample(self, tiny_model):
        x = rand_batch(n=2, seed=1)
        both = tiny_model.predict_proba(x)
        one = tiny_model.predict_proba(x[:1])
        two = tiny_model.predict_proba(x[1:])
        np.testing.assert_allclose(both[0], one[0], rtol=1e-5, atol=1e-6)
        np.testing.assert_allclose(both[1], two[0], rtol=1e-5, atol=1e-6)

    def test_indivisible_input_rejected(self, tiny_model):
        with pytest.raises(ShapeError, match="divisible"):
            tiny_model.predict_proba(rand_batch(size=48))

    def test_wrong_band_count_rejected(self, tiny_model):
        with pytest.raises(ShapeError, match="4"):
            tiny_model.predict_proba(rand_batch(bands=3))

    def test_same_seed_bit_identical(self):
        cfg = ModelConfig.tiny(seed=3)
        x = rand_batch(seed=2)
        a = CloudSegModel(cfg).predict_proba(x)
        b = CloudSegModel(cfg).predict_proba(x)
        np.testing.assert_array_equal(a, b)


class TestPredictMask:
    def test_threshold_and_tie_break(self, tiny_model):
        probs = tiny_model.predict_proba(rand_batch(seed=3))[0]
        mask = tiny_model.predict_mask(rand_batch(seed=3))[0]
        np.testing.assert_array_equal(mask, (probs >= 0.5).astype(np.uint8))
        # explicit tie rule on synthetic values
        assert (np.array([0.7]) >= 0.5).astype(np.uint8)[0] == 1
        assert (np.array([0.5]) >= 0.5).astype(np.uint8)[0] == 1

    def test_monotone_in_threshold(self, tiny_model):
        x = rand_batch(seed=4)
        low = tiny_model.predict_mask(x, threshold=0.3)
        high = tiny_model.predict_mask(x, threshold=0.7)
        assert (high <= low).all()

    def test_invalid_threshold_rejected(self, tiny_model):
        with pytest.raises(ValueError, match="threshold"):
            tiny_model.predict_mask(rand_batch(), threshold=1.0)


class TestAblations:
    def test_structural_orderings(self):
        base = ModelConfig.tiny()
        params = {}
        for name, cfg in ablation_variants(base):
            params[name] = CloudSegModel(cfg).param_count()
        full = params["backbone+pyramid+skip_gates"]
        with_pyramid = params["backbone+pyramid"]
        backbone = params["backbone"]
        assert full >= with_pyramid >= backbone
        assert params["backbone+skip_gates"] - backbone < 0.02e6
        assert params["backbone+skip_gates"] > backbone

    def test_gateless_skips_pass_through(self):
        cfg = ModelConfig.tiny(use_skip_attention=False)
        model = CloudSegModel(cfg)
        from cloudseg.layers import Identity
        assert all(isinstance(g, Identity) for g in model.skip_gates[:cfg.skip_levels])

    def test_pyramid_replaced_by_pointwise(self):
        from cloudseg.pyramid import PointwiseNeck
        model = CloudSegModel(ModelConfig.tiny(use_pyramid=False))
        assert isinstance(model.neck, PointwiseNeck)


class TestModelConfig:
    def test_json_round_trip(self):
        cfg = ModelConfig.reference(seed=11, threshold=0.4)
        again = ModelConfig.from_json(cfg.to_json())
        assert again == cfg

    def test_unknown_field_rejected(self):
        with pytest.raises(ValueError, match="unknown"):
            ModelConfig.from_dict({"bands": 4, "bogus": 1})

    def test_invalid_threshold_rejected(self):
        with pytest.raises(ValueError, match="threshold"):
            ModelConfig.tiny(threshold=1.5)

    def test_deep_stride(self):
        assert ModelConfig.reference().deep_stride == 32


class TestCheckpoint:
    def test_round_trip_bit_identical(self, tmp_path):
        cfg = ModelConfig.tiny(seed=5)
        model = CloudSegModel(cfg)
        # a couple of training steps so running stats differ from init
        from cloudseg.data import synth_scene, Patch
        from cloudseg.train import TrainConfig, train
        scenes = [synth_scene(s, size=32, cloud_density=0.4) for s in range(8)]
        patches = [Patch(s.id, 0, 0, s.bands, s.mask) for s in scenes]
        train(model, patches, TrainConfig.desk(epochs=1, val_fraction=0.0, seed=5))

        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        x = rand_batch(seed=6, size=32)
        np.testing.assert_array_equal(model.predict_proba(x), loaded.predict_proba(x))
        for (na, a), (nb, b) in zip(sorted(model.named_state()), sorted(loaded.named_state())):
            assert na == nb
            np.testing.assert_array_equal(a, b)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_truncated_file_rejected(self, tmp_path):
        model = CloudSegModel(ModelConfig.gradcheck_scale())
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        blob = path.read_bytes()
        (tmp_path / "cut.ckpt").write_bytes(blob[: len(blob) // 2])
        with pytest.raises((CheckpointError, ValueError)):
            load_checkpoint(tmp_path / "cut.ckpt")
