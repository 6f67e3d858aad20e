"""Codecs and data pipeline: round trips, corpus guards, pair alignment."""

import numpy as np
import pytest

from luasr.codec import (
    Codec, CodecTrainingError, analytic_codec, gen_corpus,
    high_frequency_energy_fraction, load_codec, load_pairs, make_pairs,
    save_codec, save_pairs, train_toy_codec,
)
from luasr.tensor import ShapeError, Tensor, backward, sum_


def rng_for(seed):
    return np.random.default_rng(seed)


class TestAnalyticCodec:
    def test_roundtrip_bit_exact(self):
        codec = analytic_codec(4)
        x = rng_for(0).random(size=(3, 64, 64)).astype(np.float32)
        np.testing.assert_array_equal(codec.decode_array(codec.encode(x)), x)

    def test_encode_shape(self):
        codec = analytic_codec(4)
        z = codec.encode(np.zeros((3, 64, 64), dtype=np.float32))
        assert z.shape == (48, 16, 16)

    def test_decode_gradient_is_ones_rearranged(self):
        codec = analytic_codec(2)
        z = Tensor(rng_for(1).random((12, 4, 4)).astype(np.float32), requires_grad=True)
        backward(sum_(codec.decode(z)))
        np.testing.assert_array_equal(z.grad, np.ones_like(z.numpy()))

    def test_invalid_stride_rejected(self):
        with pytest.raises(ValueError):
            analytic_codec(3)

    def test_indivisible_extents_rejected(self):
        with pytest.raises(ShapeError):
            analytic_codec(4).encode(np.zeros((3, 30, 30), dtype=np.float32))


class TestGenCorpus:
    def test_deterministic(self):
        a = gen_corpus(6, 64, seed=5)
        b = gen_corpus(6, 64, seed=5)
        np.testing.assert_array_equal(a, b)

    def test_different_seed_differs(self):
        assert not np.array_equal(gen_corpus(2, 64, 1), gen_corpus(2, 64, 2))

    def test_empty_corpus(self):
        assert gen_corpus(0, 64, seed=0).shape == (0, 3, 64, 64)

    def test_range_and_dtype(self):
        c = gen_corpus(4, 64, seed=9)
        assert c.dtype == np.float32
        assert c.min() >= 0.0 and c.max() <= 1.0

    def test_texture_richness_guard(self):
        c = gen_corpus(40, 64, seed=31)
        fracs = [high_frequency_energy_fraction(img) for img in c]
        assert np.mean([f > 1e-3 for f in fracs]) >= 0.9

    def test_bad_size_rejected(self):
        with pytest.raises(ValueError):
            gen_corpus(2, 48, seed=0)
        with pytest.raises(ValueError):
            gen_corpus(2, 32, seed=0)

    def test_quantized_to_8bit_levels(self):
        c = gen_corpus(2, 64, seed=3)
        np.testing.assert_allclose(c * 255, np.round(c * 255), atol=1e-4)


class TestLearnedCodec:
    def test_holdout_gate_met(self, learned_codec):
        assert learned_codec.holdout_psnr >= 28.0

    def test_encode_shape(self, learned_codec):
        z = learned_codec.encode(np.zeros((3, 64, 64), dtype=np.float32))
        assert z.shape == (8, 16, 16)

    def test_encode_deterministic(self, learned_codec, corpus128):
        a = learned_codec.encode(corpus128[0])
        b = learned_codec.encode(corpus128[0])
        np.testing.assert_array_equal(a, b)

    def test_frozen_params_receive_no_grads(self, learned_codec, corpus128):
        z = Tensor(learned_codec.encode(corpus128[0]), requires_grad=True)
        before = {n: p.numpy().copy() for n, p in learned_codec.named_params()}
        backward(sum_(learned_codec.decode(z)))
        assert z.grad is not None
        for n, p in learned_codec.named_params():
            assert p.grad is None, f"{n} got a gradient through frozen decode"
            np.testing.assert_array_equal(p.numpy(), before[n])

    def test_decode_call_counter(self, learned_codec):
        z = Tensor(np.zeros((8, 4, 4), dtype=np.float32))
        start = learned_codec.decode_calls
        learned_codec.decode(z)
        assert learned_codec.decode_calls == start + 1

    def test_bad_inputs_rejected(self):
        with pytest.raises(ValueError):
            train_toy_codec(np.zeros((0, 3, 64, 64)), s=4, c=8)
        with pytest.raises(ValueError):
            train_toy_codec(np.zeros((4, 3, 64, 64)), s=4, c=0)
        with pytest.raises(ValueError):
            train_toy_codec(np.zeros((4, 3, 64, 64)), s=3, c=8)

    def test_unreachable_gate_reported(self, corpus128):
        with pytest.raises(CodecTrainingError):
            train_toy_codec(corpus128[:12], s=4, c=8, steps=3, seed=0)

    def test_save_load_roundtrip(self, learned_codec, tmp_path):
        save_codec(learned_codec, tmp_path / "codec")
        back = load_codec(tmp_path / "codec")
        assert back.kind == "learned" and back.frozen
        for (n1, p1), (n2, p2) in zip(learned_codec.named_params(), back.named_params()):
            assert n1 == n2
            np.testing.assert_array_equal(p1.numpy(), p2.numpy())
        x = np.zeros((3, 64, 64), dtype=np.float32)
        np.testing.assert_array_equal(learned_codec.encode(x), back.encode(x))


class TestMakePairs:
    def test_desk_scale_shapes(self, learned_codec, corpus128):
        pairs = make_pairs(corpus128[:6], learned_codec, alpha=2, seed=1)
        assert pairs.z_lr.shape == (6, 8, 8, 8)
        assert pairs.z_hr.shape == (6, 8, 16, 16)
        assert pairs.x_hr.shape == (6, 3, 64, 64)

    def test_alpha4_shapes(self, learned_codec, corpus128):
        pairs = make_pairs(corpus128[:4], learned_codec, alpha=4, seed=1)
        assert pairs.z_lr.shape == (4, 8, 4, 4)

    def test_paper_scale_recipe(self):
        codec = analytic_codec(8)
        img = gen_corpus(1, 512, seed=2)
        pairs = make_pairs(img, codec, alpha=2)
        assert pairs.z_lr.shape[2:] == (32, 32)
        assert pairs.z_hr.shape[2:] == (64, 64)

    def test_alignment_analytic(self):
        codec = analytic_codec(4)
        corpus = gen_corpus(3, 64, seed=7)
        pairs = make_pairs(corpus, codec, alpha=2)
        for i in range(3):
            np.testing.assert_array_equal(codec.decode_array(pairs.z_hr[i]),
                                          pairs.x_hr[i])

    def test_alignment_learned_within_codec_error(self, learned_codec, corpus128):
        pairs = make_pairs(corpus128[:3], learned_codec, alpha=2)
        for i in range(3):
            recon = learned_codec.decode_array(pairs.z_hr[i])
            mse = np.mean((recon - pairs.x_hr[i]) ** 2)
            assert 10 * np.log10(1.0 / mse) >= 26.0

    def test_indivisible_rejected(self, learned_codec):
        with pytest.raises(ShapeError):
            make_pairs(np.zeros((1, 3, 36, 36), dtype=np.float32), learned_codec, 2)

    def test_latent_percentiles_recorded(self, learned_codec, corpus128):
        pairs = make_pairs(corpus128[:8], learned_codec, alpha=2)
        assert pairs.latent_lo < pairs.latent_hi

    def test_record_view(self, learned_codec, corpus128):
        pairs = make_pairs(corpus128[:2], learned_codec, alpha=2)
        zl, zh, xh = pairs.record(1)
        assert zl.codec_id == learned_codec.codec_id
        assert zl.stride == 4
        np.testing.assert_array_equal(zl.data, pairs.z_lr[1])

    def test_save_load_roundtrip(self, learned_codec, corpus128, tmp_path):
        pairs = make_pairs(corpus128[:3], learned_codec, alpha=2, seed=9)
        save_pairs(pairs, tmp_path / "pairs")
        back = load_pairs(tmp_path / "pairs")
        np.testing.assert_array_equal(back.z_lr, pairs.z_lr)
        np.testing.assert_array_equal(back.z_hr, pairs.z_hr)
        np.testing.assert_array_equal(back.x_hr, pairs.x_hr)
        assert back.alpha == pairs.alpha and back.codec_id == pairs.codec_id
