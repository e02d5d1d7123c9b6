import numpy as np
import pytest

from adapt.encoders import (
    Encoder,
    ModalitySpec,
    ModelConfig,
    build_encoders,
    encode,
    encode_batch,
    trainable_anchoring_params,
)
from adapt.errors import ConfigError, ShapeError
from adapt.rng import RandomStream


def small_config(d=16) -> ModelConfig:
    return ModelConfig(
        modalities=(
            ModalitySpec("video", "feature-vector", (12,), is_anchor=True),
            ModalitySpec("audio", "grid-2d", (10, 10)),
            ModalitySpec("biosignal", "sequence-1d", (48,)),
        ),
        d=d,
        mlp_hidden=24,
    )


class TestBuild:
    def test_one_encoder_per_modality_exactly_one_frozen(self):
        encs = build_encoders(small_config(), RandomStream(3))
        assert set(encs) == {"video", "audio", "biosignal"}
        assert [e.frozen for e in encs.values()].count(True) == 1
        assert encs["video"].frozen

    def test_same_seed_bit_identical_params(self):
        a = build_encoders(small_config(), RandomStream(3))
        b = build_encoders(small_config(), RandomStream(3))
        for name in a:
            for pname in a[name].params:
                np.testing.assert_array_equal(a[name].params[pname].data, b[name].params[pname].data)

    def test_anchor_only_config_is_valid(self):
        cfg = ModelConfig(modalities=(ModalitySpec("video", "feature-vector", (8,), is_anchor=True),), d=8)
        encs = build_encoders(cfg, RandomStream(0))
        assert len(encs) == 1 and encs["video"].frozen

    def test_no_anchor_rejected(self):
        cfg = ModelConfig(modalities=(ModalitySpec("video", "feature-vector", (8,)),))
        with pytest.raises(ConfigError):
            build_encoders(cfg, RandomStream(0))

    def test_zero_modalities_rejected(self):
        with pytest.raises(ConfigError):
            build_encoders(ModelConfig(modalities=()), RandomStream(0))

    def test_too_short_sequence_rejected(self):
        cfg = ModelConfig(
            modalities=(
                ModalitySpec("video", "feature-vector", (8,), is_anchor=True),
                ModalitySpec("biosignal", "sequence-1d", (10,)),
            )
        )
        with pytest.raises(ConfigError, match="too small"):
            build_encoders(cfg, RandomStream(0))


class TestEncode:
    def setup_method(self):
        self.cfg = small_config()
        self.encs = build_encoders(self.cfg, RandomStream(11))
        self.rng = RandomStream(12)

    @pytest.mark.parametrize("name,shape", [("video", (12,)), ("audio", (10, 10)), ("biosignal", (48,))])
    def test_output_length_is_d(self, name, shape):
        out = encode(self.encs[name], self.rng.normal(shape))
        assert out.shape == (self.cfg.d,)
        assert np.isfinite(out).all()

    def test_frozen_anchor_deterministic(self):
        x = self.rng.normal(12)
        np.testing.assert_array_equal(encode(self.encs["video"], x), encode(self.encs["video"], x))

    def test_zero_head_gives_zero_embedding(self):
        enc = self.encs["biosignal"]
        enc.params["head.w"].data = np.zeros_like(enc.params["head.w"].data)
        enc.params["head.b"].data = np.zeros_like(enc.params["head.b"].data)
        np.testing.assert_array_equal(encode(enc, np.zeros(48)), np.zeros(self.cfg.d))

    def test_shape_mismatch_names_modality(self):
        with pytest.raises(ShapeError, match="audio"):
            encode(self.encs["audio"], self.rng.normal((3, 3)))

    def test_batch_consistent_with_single(self):
        x = self.rng.normal((4, 48))
        batch = encode_batch(self.encs["biosignal"], x).data
        for i in range(4):
            np.testing.assert_allclose(batch[i], encode(self.encs["biosignal"], x[i]), atol=1e-12)


class TestTrainableParams:
    def test_anchor_body_excluded(self):
        encs = build_encoders(small_config(), RandomStream(5))
        params = trainable_anchoring_params(encs)
        assert not any(k.startswith("video.body.") for k in params)
        assert "video.head.w" in params
        assert "audio.body.c1.w" in params

    def test_anchor_head_switchable(self):
        encs = build_encoders(small_config(), RandomStream(5))
        params = trainable_anchoring_params(encs, train_anchor_head=False)
        assert not any(k.startswith("video.") for k in params)
