"""Training loops: descent, determinism, freezing, schedules."""

import numpy as np
import pytest

from cifconf.data import CorpusSpec, attach_corrupted_hypotheses, generate_corpus
from cifconf.errors import ContractViolation, DataError, DivergenceError
from cifconf.model import VARIANT_CIF_ALIGNED, VARIANT_HYP_SYNC, Model, ModelConfig
from cifconf.train import (
    RunConfig,
    _check_finite,
    default_cem_run,
    noam_lr,
    train_base,
    train_confidence,
)

from conftest import TINY_CORPUS, TINY_MODEL


def tiny_run(**over):
    base = dict(
        model=ModelConfig(**TINY_MODEL),
        peak_lr=1e-3,
        warmup_steps=5,
        total_steps=30,
        batch_size=4,
        seed=0,
        eval_every=0,
        log_every=0,
    )
    base.update(over)
    return RunConfig(**base)


class TestRunConfig:
    def test_warmup_capped_by_total(self):
        with pytest.raises(ContractViolation):
            tiny_run(warmup_steps=50, total_steps=10)

    def test_cem_defaults_carry_variant(self):
        run = default_cem_run(model=ModelConfig(**TINY_MODEL))
        assert run.variant == VARIANT_CIF_ALIGNED


class TestNoamSchedule:
    def test_linear_warmup(self):
        assert noam_lr(1, 1e-3, 10) == pytest.approx(1e-4)
        assert noam_lr(10, 1e-3, 10) == pytest.approx(1e-3)

    def test_inverse_sqrt_decay(self):
        assert noam_lr(40, 1e-3, 10) == pytest.approx(1e-3 / 2)

    def test_peak_at_warmup(self):
        values = [noam_lr(s, 1.0, 10) for s in range(1, 30)]
        assert max(values) == pytest.approx(values[9])


class TestTrainBase:
    def test_loss_decreases(self, tiny_corpus):
        _, history = train_base(tiny_corpus, tiny_run(total_steps=60))
        early = np.mean([h["loss"] for h in history[:10]])
        late = np.mean([h["loss"] for h in history[-10:]])
        assert late < early

    def test_bit_reproducible(self, tiny_corpus):
        m1, h1 = train_base(tiny_corpus, tiny_run())
        m2, h2 = train_base(tiny_corpus, tiny_run())
        assert [h["loss"] for h in h1] == [h["loss"] for h in h2]
        for name, t in m1.params.items():
            np.testing.assert_array_equal(t.data, m2.params[name].data)

    def test_seed_changes_outcome(self, tiny_corpus):
        m1, _ = train_base(tiny_corpus, tiny_run())
        m2, _ = train_base(tiny_corpus, tiny_run(seed=1))
        assert not np.array_equal(
            m1.params["out_proj.w"].data, m2.params["out_proj.w"].data
        )

    def test_feature_dim_mismatch_rejected(self, tiny_corpus):
        bad = ModelConfig(**{**TINY_MODEL, "feature_dim": 9})
        with pytest.raises(DataError):
            train_base(tiny_corpus, tiny_run(model=bad))

    def test_early_stop_on_dev_target(self, tiny_corpus):
        run = tiny_run(total_steps=30, eval_every=5, target_cer=2.0)
        _, history = train_base(tiny_corpus, run, dev_corpus=tiny_corpus)
        assert history[-1]["step"] == 5  # any CER clears a target of 2.0

    def test_divergence_guard(self):
        with pytest.raises(DivergenceError) as err:
            _check_finite(float("nan"), step=7)
        assert "7" in str(err.value)


@pytest.fixture(scope="module")
def prepared():
    corpus = generate_corpus(CorpusSpec(n_utts=24, **TINY_CORPUS), seed=11)
    base, _ = train_base(corpus, tiny_run(total_steps=40))
    attach_corrupted_hypotheses(corpus, 0.2, 0.1, 0.0, seed=5)
    return corpus, base


class TestTrainConfidence:

    def _clone(self, model):
        from cifconf.model import ParamStore
        import copy

        store = ParamStore()
        for name, t in model.params.items():
            from cifconf import kernel

            store.add(name, kernel.parameter(t.data.copy()))
        return Model(copy.deepcopy(model.config), store, model.variant)

    def test_encoder_bits_frozen_and_loss_moves(self, prepared):
        corpus, base = prepared
        model = self._clone(base)
        before = {n: t.data.copy() for n, t in model.params.items()
                  if n.startswith(("encoder.", "char_emb.", "cif.", "out_proj"))}
        run = default_cem_run(model=model.config, total_steps=25, warmup_steps=5,
                              batch_size=4, seed=0, log_every=0)
        trained, history = train_confidence(model, corpus, run)
        for name, snap in before.items():
            np.testing.assert_array_equal(trained.params[name].data, snap)
        assert history[-1]["loss"] != history[0]["loss"]

    def test_bce_decreases_over_training(self, prepared):
        corpus, base = prepared
        run = default_cem_run(model=base.config, total_steps=120, warmup_steps=10,
                              batch_size=4, seed=0, log_every=0)
        _, history = train_confidence(self._clone(base), corpus, run)
        early = np.mean([h["loss"] for h in history[:15]])
        late = np.mean([h["loss"] for h in history[-15:]])
        assert late < early

    def test_bit_reproducible(self, prepared):
        corpus, base = prepared
        run = default_cem_run(model=base.config, total_steps=15, warmup_steps=5,
                              batch_size=4, seed=3, log_every=0)
        m1, _ = train_confidence(self._clone(base), corpus, run)
        m2, _ = train_confidence(self._clone(base), corpus, run)
        for name, t in m1.params.items():
            np.testing.assert_array_equal(t.data, m2.params[name].data)

    def test_hyp_sync_variant_trains(self, prepared):
        corpus, base = prepared
        run = default_cem_run(model=base.config, variant=VARIANT_HYP_SYNC,
                              total_steps=15, warmup_steps=5, batch_size=4,
                              seed=0, log_every=0)
        trained, history = train_confidence(self._clone(base), corpus, run)
        assert trained.variant == VARIANT_HYP_SYNC
        assert len(history) == 15

    def test_needs_hypotheses(self, prepared):
        _, base = prepared
        clean = generate_corpus(CorpusSpec(n_utts=4, **TINY_CORPUS), seed=12)
        run = default_cem_run(model=base.config, total_steps=5, warmup_steps=1,
                              batch_size=2, seed=0, log_every=0)
        with pytest.raises(DataError):
            train_confidence(self._clone(base), clean, run)

    def test_unknown_variant_rejected(self, prepared):
        corpus, base = prepared
        run = default_cem_run(model=base.config, total_steps=5, warmup_steps=1,
                              batch_size=2, seed=0, log_every=0)
        run.variant = "bogus"
        with pytest.raises(ContractViolation):
            train_confidence(self._clone(base), corpus, run)
