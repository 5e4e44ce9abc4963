"""Model forward contracts, confidence heads, checkpoints, freezing."""

import numpy as np
import pytest

from cifconf import kernel
from cifconf.errors import ContractViolation, EmptyDecodeError, ShapeMismatch, VocabError
from cifconf.kernel import Rng, backward
from cifconf.labeling import corrupt
from cifconf.model import (
    VARIANT_CIF_ALIGNED,
    VARIANT_HYP_SYNC,
    ConfidenceResult,
    Model,
    ModelConfig,
    bce_loss,
    load_checkpoint,
    save_checkpoint,
)

from gradcheck import assert_grads_match


def feats(seed, t=9, f=6):
    return Rng(seed).normal((t, f))


@pytest.fixture
def base(tiny_config):
    return Model.build(tiny_config, seed=1)


@pytest.fixture
def ca_model(tiny_config):
    return Model.build(tiny_config, seed=1, variant=VARIANT_CIF_ALIGNED)


@pytest.fixture
def hyp_model(tiny_config):
    return Model.build(tiny_config, seed=1, variant=VARIANT_HYP_SYNC)


class TestConfigValidation:
    def test_dim_must_divide_heads(self):
        with pytest.raises(ContractViolation):
            ModelConfig(model_dim=10, heads=4)

    def test_counts_positive(self):
        with pytest.raises(ContractViolation):
            ModelConfig(encoder_layers=0)

    def test_ffn_default_is_four_x(self):
        assert ModelConfig(model_dim=32).ffn_dim == 128


class TestEncode:
    def test_output_shape(self, base):
        out = base.encode(feats(0))
        assert out.shape == (9, base.config.model_dim)

    def test_eval_mode_deterministic(self, base):
        x = feats(1)
        np.testing.assert_array_equal(base.encode(x).data, base.encode(x).data)

    def test_empty_input_rejected(self, base):
        with pytest.raises(ContractViolation):
            base.encode(np.zeros((0, 6)))

    def test_too_many_frames_rejected(self, base):
        with pytest.raises(ContractViolation):
            base.encode(feats(2, t=base.config.max_frames + 1))

    def test_wrong_feature_width_rejected(self, base):
        with pytest.raises(ShapeMismatch):
            base.encode(feats(3, f=5))

    def test_gradcheck_through_one_block(self, tiny_config):
        cfg = ModelConfig(**{**tiny_config.__dict__, "dropout": 0.0})
        model = Model.build(cfg, seed=2)
        x = feats(4, t=4)
        probe = {
            name: model.params[name]
            for name in (
                "encoder.block0.self_attn.wq",
                "encoder.block0.ffn.w1",
                "encoder.final_ln.g",
                "encoder.in_proj.b",
            )
        }
        w = kernel.constant(Rng(5).normal((4, cfg.model_dim)))
        assert_grads_match(
            lambda: kernel.sum_all(kernel.mul(model.encode(x), w)),
            probe, tol=1e-3,
        )


class TestEmbedChars:
    def test_empty_sequence(self, base):
        assert base.embed_chars([]).shape == (0, base.config.model_dim)

    def test_repeated_token_differs_only_by_position_encoding(self, base):
        emb = base.embed_chars([4, 4]).data
        pos = kernel.sinusoidal_positions(2, base.config.model_dim)
        np.testing.assert_allclose(emb[0] - pos[0], emb[1] - pos[1], atol=1e-12)

    def test_out_of_vocab(self, base):
        with pytest.raises(VocabError):
            base.embed_chars([base.config.vocab_size])


class TestParallelDecode:
    def test_all_outputs_have_input_rows(self, base):
        e = base.encode(feats(6))
        out = base.parallel_decode(e, base.embed_chars([1, 2, 3]))
        assert out.a.rows == out.d_self.rows == out.hidden.rows == 3
        assert out.logits.shape == (3, base.config.vocab_size)

    def test_single_row_self_attention_is_value_projection(self, base):
        # With one query the attention weights are [1], so the fused head
        # output must equal the value projection followed by the output
        # projection.
        x = kernel.constant(Rng(7).normal((1, base.config.model_dim)))
        p = base.params.group("decoder.block0.self_attn")
        got = base._mha(x, x, p)
        v = kernel.linear(x, p["wv"], p["bv"])
        expected = kernel.linear(v, p["wo"], p["bo"])
        np.testing.assert_allclose(got.data, expected.data, atol=1e-12)


class TestAsrDecode:
    def test_decode_length_equals_firing_count(self, base):
        for seed in range(5):
            x = feats(seed, t=12)
            e = base.encode(x)
            emb, _, _ = base.fire(e)
            assert len(base.asr_decode(x)) == emb.rows

    def test_noise_input_does_not_crash(self, base):
        decode = base.asr_decode(Rng(8).normal((6, 6), sigma=5.0))
        assert isinstance(decode, list)

    def test_empty_decode_when_weights_suppressed(self, base):
        base.params["cif.out.b"].data[:] = -30.0
        assert base.asr_decode(feats(9)) == []


class TestSoftmaxConfidence:
    def test_scores_in_unit_interval(self, base):
        res = base.softmax_confidence(feats(10))
        assert res.variant == "softmax"
        assert all(0.0 < s < 1.0 for s in res.scores)
        assert res.average == pytest.approx(np.mean(res.scores))

    def test_uniform_logits_give_inverse_vocab(self, base):
        base.params["out_proj.w"].data[:] = 0.0
        base.params["out_proj.b"].data[:] = 0.0
        res = base.softmax_confidence(feats(11))
        assert res.scores, "expected a non-empty decode"
        np.testing.assert_allclose(res.scores, 1.0 / base.config.vocab_size, atol=1e-12)

    def test_forced_mode_scores_supplied_tokens(self, base):
        dec = base.softmax_confidence(feats(12), mode="decode")
        forced_tokens = [(t + 1) % base.config.vocab_size for t in dec.tokens]
        res = base.softmax_confidence(feats(12), mode="forced", forced_tokens=forced_tokens)
        assert res.tokens == forced_tokens
        # Probability of a non-argmax token can never beat the argmax.
        assert all(f <= d for f, d in zip(res.scores, dec.scores))

    def test_forced_mode_length_mismatch_rejected(self, base):
        dec = base.softmax_confidence(feats(13), mode="decode")
        with pytest.raises(ContractViolation):
            base.softmax_confidence(feats(13), mode="forced",
                                    forced_tokens=dec.tokens + [0])


class TestHypSyncConfidence:
    def test_score_length_tracks_hypothesis_even_with_deletions(self, hyp_model):
        x = feats(14)
        rng = Rng(15)
        for _ in range(10):
            ref = rng.integers(0, 10, 6).tolist()
            hyp = corrupt(ref, 0.1, 0.5, 0.0, rng, vocab_size=10)
            if not hyp:
                continue
            res = hyp_model.hyp_sync_confidence(x, hyp)
            assert len(res.scores) == len(hyp)
            assert res.tokens == hyp

    def test_zero_final_layer_gives_half_scores(self, hyp_model):
        res = hyp_model.hyp_sync_confidence(feats(16), [1, 2, 3])
        np.testing.assert_allclose(res.scores, 0.5, atol=1e-12)

    def test_empty_hypothesis_rejected(self, hyp_model):
        with pytest.raises(ContractViolation):
            hyp_model.hyp_sync_confidence(feats(17), [])

    def test_wrong_variant_rejected(self, ca_model):
        with pytest.raises(ContractViolation):
            ca_model.hyp_sync_confidence(feats(18), [1])


class TestCifAlignedConfidence:
    def test_score_length_follows_own_decode_not_hypothesis(self, ca_model):
        x = feats(19, t=12)
        decode = ca_model.asr_decode(x)
        assert decode, "fixture needs a non-empty decode"
        rng = Rng(20)
        for _ in range(10):
            ref = rng.integers(0, 10, 8).tolist()
            hyp = corrupt(ref, 0.0, 0.5, 0.0, rng, vocab_size=10)
            if not hyp:
                continue
            res = ca_model.cif_aligned_confidence(x, hyp)
            assert len(res.scores) == len(decode)
            assert res.tokens == decode

    def test_empty_decode_raises(self, ca_model):
        ca_model.params["cif.out.b"].data[:] = -30.0
        with pytest.raises(EmptyDecodeError):
            ca_model.cif_aligned_confidence(feats(21), [1, 2])

    def test_gradients_reach_heads_but_not_frozen_encoder(self, ca_model):
        ca_model.freeze_for_confidence_training()
        # The score head starts at zero (scores exactly 0.5), which also
        # blocks upstream flow until its first update; give it values so
        # this test sees the steady-state gradient paths.
        ca_model.params["estimator.out.w"].data[:] = Rng(40).normal((16, 1), sigma=0.3)
        e = ca_model.encode(feats(22))
        scores, _ = ca_model.cif_aligned_scores(e, [1, 2, 3])
        ca_model.params.zero_grads()
        backward(bce_loss(scores, [i % 2 for i in range(scores.rows)]))
        by_group = {}
        for name, t in ca_model.params.items():
            group = name.split(".")[0]
            norm = 0.0 if t.grad is None else float(np.abs(t.grad).sum())
            by_group[group] = by_group.get(group, 0.0) + norm
        assert by_group["encoder"] == 0.0
        assert by_group["char_emb"] == 0.0
        assert by_group["cif"] == 0.0
        assert by_group["out_proj"] == 0.0
        for group in ("decoder", "aligner", "estimator"):
            assert by_group[group] > 0.0, group


class TestBceLoss:
    def test_matches_kernel(self):
        p = kernel.constant([[0.3], [0.8]])
        assert bce_loss(p, [0, 1]).item() == pytest.approx(
            -(np.log(0.7) + np.log(0.8)) / 2
        )


class TestEndToEndGradient:
    def test_full_confidence_forward_matches_finite_differences(self):
        # Every parameter of the full two-branch forward pass, including
        # the (unfrozen) encoder, against central differences; large
        # matrices are spot-checked on sampled entries.
        cfg = ModelConfig(
            vocab_size=6, model_dim=8, encoder_layers=1, decoder_layers=1,
            estimator_layers=1, heads=2, dropout=0.0, max_frames=16,
            feature_dim=4, ffn_dim=16,
        )
        model = Model.build(cfg, seed=3, variant=VARIANT_CIF_ALIGNED)
        # A trained-ish firing head can sit near a boundary; nudge the
        # bias so the finite-difference probe stays on one branch.
        model.params["cif.out.b"].data[:] = 0.4
        batch = [
            (Rng(30).normal((5, 4)), [1, 2]),
            (Rng(31).normal((7, 4)), [3, 0, 4]),
        ]

        def loss():
            total = None
            for x, hyp in batch:
                e = model.encode(x)
                scores, decode = model.cif_aligned_scores(e, hyp)
                labels = [i % 2 for i in range(scores.rows)]
                term = bce_loss(scores, labels)
                total = term if total is None else kernel.add(total, term)
            return kernel.scale(total, 0.5)

        probe = dict(model.params.items())
        assert_grads_match(
            loss, probe, tol=1e-3, sample=6, rng=np.random.default_rng(0)
        )


class TestCheckpoint:
    def test_round_trip_bit_exact(self, ca_model, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, ca_model)
        loaded = load_checkpoint(path)
        assert loaded.variant == ca_model.variant
        assert loaded.config == ca_model.config
        assert sorted(loaded.params.census()) == sorted(ca_model.params.census())
        for name, t in ca_model.params.items():
            np.testing.assert_array_equal(loaded.params[name].data, t.data)

    def test_rewrite_is_byte_identical(self, ca_model, tmp_path):
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(a, ca_model)
        save_checkpoint(b, load_checkpoint(a))
        assert a.read_bytes() == b.read_bytes()

    def test_same_forward_after_reload(self, ca_model, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, ca_model)
        x = feats(23)
        before = ca_model.cif_aligned_confidence(x, [1, 2, 3])
        after = load_checkpoint(path).cif_aligned_confidence(x, [1, 2, 3])
        assert before.scores == after.scores


class TestConfidenceResult:
    def test_average_is_mean(self):
        r = ConfidenceResult.make([1, 2], [0.25, 0.75], "softmax")
        assert r.average == 0.5

    def test_length_mismatch_rejected(self):
        with pytest.raises(ContractViolation):
            ConfidenceResult.make([1], [0.5, 0.5], "softmax")
