"""Training loops: base recognizer and confidence estimators.

Both loops draw batch indices and dropout masks from seed-keyed streams
and walk utterances one at a time, scaling each loss by 1/batch and
letting backward accumulate into the parameter gradients before a single
Adam step per batch, so a run is bit-reproducible from its seed.

Confidence training freezes the encoder, character embedding, firing
head, and output projection; only the decoder, aligner, and estimator
move.  The frozen front end is evaluated once per utterance and cached,
which is also why confidence epochs are much cheaper than base epochs.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernel
from .cif import quantity_loss
from .data import Corpus
from .errors import ContractViolation, DataError, DivergenceError, EmptyDecodeError
from .kernel import AdamState, Rng, adam_step, backward
from .labeling import cer, labels_for_decode, labels_for_hypothesis
from .model import (
    VARIANT_CIF_ALIGNED,
    VARIANT_HYP_SYNC,
    Model,
    ModelConfig,
    bce_loss,
)

logger = logging.getLogger(__name__)

STREAM_BATCH = 11
STREAM_DROPOUT = 12
STREAM_CEM_INIT = 13


@dataclass
class RunConfig:
    """One training run: model, optimizer schedule, and data source."""

    model: ModelConfig = field(default_factory=ModelConfig)
    peak_lr: float = 1e-3
    warmup_steps: int = 200
    total_steps: int = 3000
    batch_size: int = 16
    seed: int = 0
    variant: str = "base"
    quantity_weight: float = 1.0
    log_every: int = 50
    eval_every: int = 100        # dev-set cadence; 0 disables
    target_cer: float = 0.10     # stop early once dev CER falls this low; 0 disables
    # Confidence training: relative step size for the pretrained decoder
    # versus the freshly initialized aligner/estimator.  Kept small so
    # pure-BCE fine-tuning cannot bend the decode toward the hypothesis
    # (which would make the labels trivially predictable).
    decoder_lr_scale: float = 0.05
    # Hypothesis source for confidence training / evaluation corpora.
    hyp_mode: str = "field"      # field | corrupt | file
    hyp_rates: tuple = (0.10, 0.03, 0.02)
    hyp_file: str | None = None
    hyp_seed: int = 1234

    def __post_init__(self):
        if self.warmup_steps > self.total_steps:
            raise ContractViolation(
                f"warmup {self.warmup_steps} exceeds total steps {self.total_steps}"
            )
        if self.batch_size < 1 or self.total_steps < 1:
            raise ContractViolation(f"degenerate run config: {self}")
        self.hyp_rates = tuple(self.hyp_rates)


def default_cem_run(**overrides) -> RunConfig:
    base = RunConfig(
        peak_lr=1e-3,
        warmup_steps=100,
        total_steps=1500,
        variant=VARIANT_CIF_ALIGNED,
        eval_every=0,
        target_cer=0.0,
        hyp_mode="corrupt",
        hyp_rates=(0.15, 0.05, 0.03),
    )
    return replace(base, **overrides)


def noam_lr(step: int, peak: float, warmup: int) -> float:
    """Linear warm-up to ``peak`` then inverse-square-root decay."""
    if step < 1:
        raise ContractViolation(f"schedule steps are 1-based, got {step}")
    return peak * min(step / warmup, math.sqrt(warmup / step))


def _check_finite(loss_value: float, step: int) -> None:
    if not math.isfinite(loss_value):
        raise DivergenceError(f"training loss became non-finite at step {step}")


def _held_out_metrics(model: Model, corpus: Corpus, limit: int = 200) -> tuple[float, float]:
    """(corpus CER of greedy decodes, mean |sum(alpha) - ref length|)."""
    errors = 0.0
    tokens = 0
    gaps = []
    for utt in corpus.utterances[:limit]:
        e = model.encode(utt.frames)
        alpha = model.predict_weights(e)
        gaps.append(abs(float(alpha.data.sum()) - len(utt.ref)))
        emb, _, _ = model.fire(e)
        if emb.rows:
            decode = [int(t) for t in model.parallel_decode(e, emb).logits.data.argmax(axis=1)]
        else:
            decode = []
        errors += cer(decode, utt.ref) * len(utt.ref)
        tokens += len(utt.ref)
    return errors / tokens, float(np.mean(gaps))


def train_base(
    corpus: Corpus, run: RunConfig, dev_corpus: Corpus | None = None
) -> tuple[Model, list[dict]]:
    """Train the recognizer: cross entropy on the acoustic-branch logits
    plus the weighted token-count loss.  Returns the model and a history
    of per-step records; stops early once the dev CER target is met."""
    if run.model.feature_dim != corpus.spec.feature_dim:
        raise DataError(
            f"model feature_dim {run.model.feature_dim} vs corpus "
            f"{corpus.spec.feature_dim}"
        )
    if run.model.vocab_size < corpus.spec.vocab_size:
        raise DataError(
            f"model vocab {run.model.vocab_size} smaller than corpus "
            f"{corpus.spec.vocab_size}"
        )
    model = Model.build(run.model, run.seed)
    batch_rng = Rng(run.seed, STREAM_BATCH)
    drop_rng = Rng(run.seed, STREAM_DROPOUT)
    state = AdamState()
    trainable = model.trainable()
    history: list[dict] = []
    n = len(corpus.utterances)

    for step in range(1, run.total_steps + 1):
        picks = batch_rng.integers(0, n, run.batch_size)
        model.params.zero_grads()
        batch_loss = 0.0
        for i in picks:
            utt = corpus.utterances[int(i)]
            e = model.encode(utt.frames, training=True, rng=drop_rng)
            emb, alpha, _ = model.fire(e, scale_to=len(utt.ref))
            out = model.parallel_decode(e, emb, training=True, rng=drop_rng)
            loss = kernel.add(
                kernel.cross_entropy(out.logits, utt.ref),
                kernel.scale(quantity_loss(alpha, len(utt.ref)), run.quantity_weight),
            )
            backward(kernel.scale(loss, 1.0 / run.batch_size))
            batch_loss += loss.item() / run.batch_size
        _check_finite(batch_loss, step)
        lr = noam_lr(step, run.peak_lr, run.warmup_steps)
        adam_step([t for _, t in trainable], [t.grad for _, t in trainable], state, lr)

        record = {"step": step, "loss": batch_loss, "lr": lr}
        if dev_corpus is not None and run.eval_every and step % run.eval_every == 0:
            record["dev_cer"], record["dev_count_gap"] = _held_out_metrics(model, dev_corpus)
            logger.info(
                "step %d loss %.4f dev_cer %.4f count_gap %.3f",
                step, batch_loss, record["dev_cer"], record["dev_count_gap"],
            )
        elif run.log_every and step % run.log_every == 0:
            logger.info("step %d loss %.4f lr %.2e", step, batch_loss, lr)
        history.append(record)
        if (
            run.target_cer > 0.0
            and "dev_cer" in record
            and record["dev_cer"] <= run.target_cer
        ):
            logger.info("dev CER target %.3f reached at step %d", run.target_cer, step)
            break
    if not model.params.all_finite():
        raise DivergenceError(f"non-finite parameters after step {history[-1]['step']}")
    return model, history


def train_confidence(
    base: Model, corpus: Corpus, run: RunConfig, dev_corpus: Corpus | None = None
) -> tuple[Model, list[dict]]:
    """Fine-tune one confidence variant from a trained base model.

    The corpus must already carry hypotheses; utterances with empty
    hypotheses are skipped (a score column needs at least one token).
    Labels are recomputed from the current decode every step for the
    decode-synchronous variant, so they track decoder fine-tuning.
    ``base`` is mutated; load a fresh checkpoint per run.
    """
    if run.variant not in (VARIANT_HYP_SYNC, VARIANT_CIF_ALIGNED):
        raise ContractViolation(f"unknown confidence variant {run.variant!r}")
    utts = corpus.with_hypotheses()
    if not utts:
        raise DataError("confidence training needs utterances with hypotheses")

    model = base
    model.add_confidence_head(run.variant, Rng(run.seed, STREAM_CEM_INIT))
    model.freeze_for_confidence_training()
    encoder_snapshot = {
        name: t.data.copy() for name, t in model.params.items()
        if name.startswith("encoder.")
    }

    # The frozen front end never changes: encode (and for the aligned
    # variant, fire) once per utterance.
    front_cache: dict[str, tuple] = {}

    def front(utt):
        if utt.utt_id not in front_cache:
            e = model.encode(utt.frames)
            emb = None
            if run.variant == VARIANT_CIF_ALIGNED:
                emb, _, _ = model.fire(e)
            front_cache[utt.utt_id] = (e, emb)
        return front_cache[utt.utt_id]

    batch_rng = Rng(run.seed, STREAM_BATCH)
    drop_rng = Rng(run.seed, STREAM_DROPOUT)
    decoder_group = [t for n_, t in model.trainable() if n_.startswith("decoder.")]
    head_group = [t for n_, t in model.trainable() if not n_.startswith("decoder.")]
    decoder_state = AdamState()
    head_state = AdamState()
    history: list[dict] = []
    n = len(utts)

    for step in range(1, run.total_steps + 1):
        picks = batch_rng.integers(0, n, run.batch_size)
        model.params.zero_grads()
        batch_loss = 0.0
        skipped = 0
        for i in picks:
            utt = utts[int(i)]
            e, emb = front(utt)
            if run.variant == VARIANT_CIF_ALIGNED:
                if emb.rows == 0:
                    skipped += 1
                    continue
                scores, decode = model.cif_aligned_scores(
                    e, utt.hyp, training=True, rng=drop_rng, acoustic=emb
                )
                labels = labels_for_decode(decode, utt.hyp).labels
            else:
                scores = model.hyp_sync_scores(e, utt.hyp, training=True, rng=drop_rng)
                labels = labels_for_hypothesis(utt.hyp, utt.ref).labels
            loss = bce_loss(scores, labels)
            backward(kernel.scale(loss, 1.0 / run.batch_size))
            batch_loss += loss.item() / run.batch_size
        _check_finite(batch_loss, step)
        lr = noam_lr(step, run.peak_lr, run.warmup_steps)
        adam_step(head_group, [t.grad for t in head_group], head_state, lr)
        if run.decoder_lr_scale > 0.0:
            adam_step(
                decoder_group,
                [t.grad for t in decoder_group],
                decoder_state,
                lr * run.decoder_lr_scale,
            )

        record = {"step": step, "loss": batch_loss, "lr": lr}
        if skipped:
            record["skipped"] = skipped
        if dev_corpus is not None and run.eval_every and step % run.eval_every == 0:
            record["dev_bce"] = _held_out_bce(model, dev_corpus, run.variant)
            logger.info("step %d loss %.4f dev_bce %.4f", step, batch_loss, record["dev_bce"])
        elif run.log_every and step % run.log_every == 0:
            logger.info("step %d loss %.4f lr %.2e", step, batch_loss, lr)
        history.append(record)

    for name, snap in encoder_snapshot.items():
        if not np.array_equal(model.params[name].data, snap):
            raise ContractViolation(f"frozen parameter {name} changed during training")
    if not model.params.all_finite():
        raise DivergenceError(f"non-finite parameters after step {history[-1]['step']}")
    return model, history


def _held_out_bce(model: Model, corpus: Corpus, variant: str, limit: int = 100) -> float:
    total = 0.0
    count = 0
    for utt in corpus.with_hypotheses()[:limit]:
        e = model.encode(utt.frames)
        if variant == VARIANT_CIF_ALIGNED:
            try:
                scores, decode = model.cif_aligned_scores(e, utt.hyp)
            except EmptyDecodeError:
                continue
            labels = labels_for_decode(decode, utt.hyp).labels
        else:
            scores = model.hyp_sync_scores(e, utt.hyp)
            labels = labels_for_hypothesis(utt.hyp, utt.ref).labels
        total += bce_loss(scores, labels).item()
        count += 1
    return total / max(count, 1)
