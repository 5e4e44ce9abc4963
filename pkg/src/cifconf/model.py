"""Toy non-autoregressive recognizer with token-synchronous confidence heads.

The model is a transformer encoder over feature frames, a firing-weight
head feeding continuous integrate-and-fire, and a bidirectional (non-
causal) parallel decoder that maps token-synchronous inputs to logits.
The same decoder weights serve two input kinds: character embeddings of
a written hypothesis, and integrated acoustic embeddings from firing.

Three confidence variants share this backbone:

* softmax          - per-position probability of the decoded (or a
                     supplied) token under the decoder softmax.
* hyp_synchronous  - an estimator stack over the decoder's states for
                     the hypothesis characters, cross-attending the
                     encoder; emits one score per hypothesis token, so
                     dropped tokens are invisible to it by construction.
* cif_aligned      - both decoder branches are run, an aligner cross-
                     attends the hypothesis branch from the acoustic
                     branch, and the estimator scores every position of
                     the model's own decode; dropped tokens therefore
                     get their own (low) score.

Training-time firing rescales the weights to the reference length so
label lengths are deterministic; inference fires unscaled and emits a
trailing residual of at least 0.5 as one final token (normalized to
unit mass), so the decode length is the model's own length estimate.
"""

from __future__ import annotations

import base64
import json
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import cif, kernel
from .cif import FiringResult
from .errors import ContractViolation, DataError, EmptyDecodeError, ShapeMismatch
from .kernel import Rng, Tensor

RESIDUAL_FIRE_THRESHOLD = 0.5
CHECKPOINT_FORMAT = "cifconf-checkpoint-v1"

VARIANT_SOFTMAX = "softmax"
VARIANT_HYP_SYNC = "hyp_synchronous"
VARIANT_CIF_ALIGNED = "cif_aligned"

# Parameter groups left untouched by confidence fine-tuning.
CEM_FROZEN_PREFIXES = ("encoder.", "char_emb.", "cif.", "out_proj.")


@dataclass
class ModelConfig:
    vocab_size: int = 32
    model_dim: int = 64
    encoder_layers: int = 2
    decoder_layers: int = 2
    estimator_layers: int = 2
    heads: int = 4
    dropout: float = 0.15
    max_frames: int = 128
    feature_dim: int = 16
    ffn_dim: int = 0  # 0 means 4 * model_dim

    def __post_init__(self):
        counts = (
            self.vocab_size,
            self.model_dim,
            self.encoder_layers,
            self.decoder_layers,
            self.estimator_layers,
            self.heads,
            self.max_frames,
            self.feature_dim,
        )
        if any(c < 1 for c in counts):
            raise ContractViolation(f"all model counts must be >= 1: {self}")
        if self.model_dim % self.heads:
            raise ContractViolation(
                f"model_dim {self.model_dim} not divisible by heads {self.heads}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ContractViolation(f"dropout must be in [0, 1), got {self.dropout}")
        if self.ffn_dim == 0:
            self.ffn_dim = 4 * self.model_dim


@dataclass
class ConfidenceResult:
    """Per-token confidence scores for one utterance."""

    tokens: list[int]
    scores: list[float]
    average: float
    variant: str

    @classmethod
    def make(cls, tokens: Sequence[int], scores: Sequence[float], variant: str):
        tokens = [int(t) for t in tokens]
        scores = [float(s) for s in scores]
        if len(tokens) != len(scores):
            raise ContractViolation(
                f"{len(scores)} scores for {len(tokens)} tokens"
            )
        avg = float(np.mean(scores)) if scores else 0.0
        return cls(tokens=tokens, scores=scores, average=avg, variant=variant)


class DecoderOut(NamedTuple):
    a: Tensor        # state after the cross-attention sublayer (last block)
    d_self: Tensor   # state after the self-attention sublayer (last block)
    hidden: Tensor   # normalized output of the block stack
    logits: Tensor   # hidden projected to vocabulary width


class ParamStore:
    """Named, ordered collection of parameter tensors."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._groups: dict[str, dict[str, Tensor]] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise ContractViolation(f"duplicate parameter name {name!r}")
        self._params[name] = tensor
        self._groups.clear()
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def group(self, prefix: str) -> dict[str, Tensor]:
        """View of parameters under ``prefix.``, keyed by the suffix."""
        if prefix not in self._groups:
            head = prefix + "."
            self._groups[prefix] = {
                name[len(head):]: t for name, t in self._params.items()
                if name.startswith(head)
            }
        return self._groups[prefix]

    def census(self) -> list[tuple[str, int, int]]:
        return [(name, t.rows, t.cols) for name, t in self._params.items()]

    def freeze(self, prefixes: Sequence[str]) -> None:
        for name, t in self._params.items():
            if name.startswith(tuple(prefixes)):
                t.requires_grad = False
                t.grad = None

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self._params.items() if t.requires_grad]

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def all_finite(self) -> bool:
        return all(np.isfinite(t.data).all() for t in self._params.values())


# ---------------------------------------------------------------------------
# Parameter construction
# ---------------------------------------------------------------------------


def _uniform_init(rng: Rng, fan_in: int, fan_out: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, (fan_in, fan_out))


def _add_linear(store, prefix, rng, fan_in, fan_out, zero=False):
    if zero:
        store.add(f"{prefix}.w", kernel.parameter(np.zeros((fan_in, fan_out))))
        store.add(f"{prefix}.b", kernel.parameter(np.zeros((1, fan_out))))
    else:
        store.add(f"{prefix}.w", kernel.parameter(_uniform_init(rng, fan_in, fan_out)))
        store.add(f"{prefix}.b", kernel.parameter(np.zeros((1, fan_out))))


def _add_layer_norm(store, prefix, d):
    store.add(f"{prefix}.g", kernel.parameter(np.ones((1, d))))
    store.add(f"{prefix}.b", kernel.parameter(np.zeros((1, d))))


def _add_attention(store, prefix, rng, d):
    for name in ("wq", "wk", "wv", "wo"):
        store.add(f"{prefix}.{name}", kernel.parameter(_uniform_init(rng, d, d)))
    for name in ("bq", "bk", "bv", "bo"):
        store.add(f"{prefix}.{name}", kernel.parameter(np.zeros((1, d))))


def _add_block(store, prefix, rng, d, ffn, cross: bool):
    _add_layer_norm(store, f"{prefix}.self_attn_ln", d)
    _add_attention(store, f"{prefix}.self_attn", rng, d)
    if cross:
        _add_layer_norm(store, f"{prefix}.cross_attn_ln", d)
        _add_attention(store, f"{prefix}.cross_attn", rng, d)
    _add_layer_norm(store, f"{prefix}.ffn_ln", d)
    store.add(f"{prefix}.ffn.w1", kernel.parameter(_uniform_init(rng, d, ffn)))
    store.add(f"{prefix}.ffn.b1", kernel.parameter(np.zeros((1, ffn))))
    store.add(f"{prefix}.ffn.w2", kernel.parameter(_uniform_init(rng, ffn, d)))
    store.add(f"{prefix}.ffn.b2", kernel.parameter(np.zeros((1, d))))


def build_base_params(config: ModelConfig, rng: Rng) -> ParamStore:
    """Encoder, character embedding, firing head, decoder, output head."""
    d, ffn = config.model_dim, config.ffn_dim
    store = ParamStore()
    _add_linear(store, "encoder.in_proj", rng, config.feature_dim, d)
    for i in range(config.encoder_layers):
        _add_block(store, f"encoder.block{i}", rng, d, ffn, cross=False)
    _add_layer_norm(store, "encoder.final_ln", d)

    store.add("char_emb.table", kernel.parameter(_uniform_init(rng, config.vocab_size, d)))

    _add_linear(store, "cif.hidden", rng, d, d)
    _add_linear(store, "cif.out", rng, d, 1)

    for i in range(config.decoder_layers):
        _add_block(store, f"decoder.block{i}", rng, d, ffn, cross=True)
    _add_layer_norm(store, "decoder.final_ln", d)
    _add_linear(store, "out_proj", rng, d, config.vocab_size)
    return store


def add_confidence_params(store: ParamStore, config: ModelConfig, variant: str, rng: Rng) -> None:
    """Freshly initialized aligner/estimator stacks for one variant.

    The estimator's final layer starts at zero so an untrained head
    scores everything 0.5.
    """
    d, ffn = config.model_dim, config.ffn_dim
    if variant == VARIANT_CIF_ALIGNED:
        for i in range(config.estimator_layers):
            _add_block(store, f"aligner.block{i}", rng, d, ffn, cross=True)
        _add_layer_norm(store, "aligner.final_ln", d)
    elif variant != VARIANT_HYP_SYNC:
        raise ContractViolation(f"no confidence parameters for variant {variant!r}")
    _add_linear(store, "estimator.in_proj", rng, 2 * d, d)
    estimator_cross = variant == VARIANT_HYP_SYNC
    for i in range(config.estimator_layers):
        _add_block(store, f"estimator.block{i}", rng, d, ffn, cross=estimator_cross)
    _add_layer_norm(store, "estimator.final_ln", d)
    _add_linear(store, "estimator.out", rng, d, 1, zero=True)


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


class Model:
    def __init__(self, config: ModelConfig, params: ParamStore, variant: str = "base"):
        self.config = config
        self.params = params
        self.variant = variant
        self._positions = kernel.sinusoidal_positions(config.max_frames, config.model_dim)
        self._emb_scale = float(np.sqrt(config.model_dim))

    @classmethod
    def build(cls, config: ModelConfig, seed: int, variant: str = "base") -> "Model":
        rng = Rng(seed, stream=0xC0DE)
        store = build_base_params(config, rng)
        if variant != "base":
            add_confidence_params(store, config, variant, rng)
        return cls(config, store, variant)

    def add_confidence_head(self, variant: str, rng: Rng) -> None:
        add_confidence_params(self.params, self.config, variant, rng)
        self.variant = variant

    # -- shared layers ----------------------------------------------------

    def _positions_for(self, n: int) -> Tensor:
        if n > self.config.max_frames:
            raise ContractViolation(
                f"sequence length {n} exceeds max_frames {self.config.max_frames}"
            )
        return kernel.constant(self._positions[:n])

    def _mha(self, q_in: Tensor, kv_in: Tensor, p: dict) -> Tensor:
        q = kernel.linear(q_in, p["wq"], p["bq"])
        k = kernel.linear(kv_in, p["wk"], p["bk"])
        v = kernel.linear(kv_in, p["wv"], p["bv"])
        att = kernel.multi_head_attention(q, k, v, self.config.heads)
        return kernel.linear(att, p["wo"], p["bo"])

    def _ln(self, x: Tensor, prefix: str) -> Tensor:
        g = self.params.group(prefix)
        return kernel.layer_norm(x, g["g"], g["b"])

    def _ffn(self, x: Tensor, prefix: str) -> Tensor:
        g = self.params.group(prefix)
        h = kernel.relu(kernel.linear(x, g["w1"], g["b1"]))
        return kernel.linear(h, g["w2"], g["b2"])

    def _drop(self, x: Tensor, training: bool, rng: Rng | None) -> Tensor:
        return kernel.dropout(x, self.config.dropout, rng, training)

    def _block(self, x, memory, prefix, training, rng):
        """Pre-norm transformer block; returns the stage outputs.

        d_stage is the state after the self-attention sublayer, a_stage
        after cross-attention (None without a memory).
        """
        h = self._ln(x, f"{prefix}.self_attn_ln")
        x = kernel.add(x, self._drop(self._mha(h, h, self.params.group(f"{prefix}.self_attn")), training, rng))
        d_stage = x
        a_stage = None
        if memory is not None:
            h = self._ln(x, f"{prefix}.cross_attn_ln")
            x = kernel.add(x, self._drop(self._mha(h, memory, self.params.group(f"{prefix}.cross_attn")), training, rng))
            a_stage = x
        h = self._ln(x, f"{prefix}.ffn_ln")
        x = kernel.add(x, self._drop(self._ffn(h, f"{prefix}.ffn"), training, rng))
        return x, d_stage, a_stage

    # -- primary operations ------------------------------------------------

    def encode(self, features, training: bool = False, rng: Rng | None = None) -> Tensor:
        """Feature frames (T x feature_dim) to contextual frames (T x d)."""
        feats = features if isinstance(features, Tensor) else kernel.constant(features)
        if feats.rows == 0:
            raise ContractViolation("cannot encode an empty feature sequence")
        if feats.cols != self.config.feature_dim:
            raise ShapeMismatch(
                f"features are {feats.shape}, expected width {self.config.feature_dim}"
            )
        g = self.params.group("encoder.in_proj")
        x = kernel.linear(feats, g["w"], g["b"])
        x = kernel.add(x, self._positions_for(x.rows))
        for i in range(self.config.encoder_layers):
            x, _, _ = self._block(x, None, f"encoder.block{i}", training, rng)
        return self._ln(x, "encoder.final_ln")

    def embed_chars(self, tokens: Sequence[int]) -> Tensor:
        """Token embeddings scaled by sqrt(d) plus sinusoidal positions."""
        emb = kernel.embedding_lookup(self.params["char_emb.table"], tokens)
        emb = kernel.scale(emb, self._emb_scale)
        if emb.rows == 0:
            return emb
        return kernel.add(emb, self._positions_for(emb.rows))

    def predict_weights(self, encoder_out: Tensor) -> Tensor:
        return cif.predict_weights(encoder_out, self.params.group("cif"))

    def fire(
        self, encoder_out: Tensor, scale_to: int | None = None
    ) -> tuple[Tensor, Tensor, FiringResult]:
        """Integrate-and-fire over the encoder output.

        With ``scale_to`` the weights are rescaled first (training);
        otherwise firing is unscaled and a trailing residual of at
        least 0.5 is emitted as one extra unit-mass output.  Returns
        (acoustic embeddings with positions added, raw weights, firing).
        """
        alpha = self.predict_weights(encoder_out)
        if scale_to is not None:
            firing = cif.integrate_and_fire(encoder_out, cif.scale_weights(alpha, scale_to))
            emb = firing.embeddings
        else:
            firing = cif.integrate_and_fire(encoder_out, alpha)
            emb = firing.embeddings
            if firing.residual_weight >= RESIDUAL_FIRE_THRESHOLD:
                tail = kernel.scale(firing.residual_embedding, 1.0 / firing.residual_weight)
                emb = kernel.concat_rows(emb, tail)
        if emb.rows:
            emb = kernel.add(emb, self._positions_for(emb.rows))
        return emb, alpha, firing

    def parallel_decode(
        self, e: Tensor, z: Tensor, training: bool = False, rng: Rng | None = None
    ) -> DecoderOut:
        """Bidirectional decode of token-synchronous inputs z against
        encoder memory e; the same weights serve character embeddings
        and acoustic embeddings."""
        x = z
        d_stage = a_stage = z
        for i in range(self.config.decoder_layers):
            x, d_stage, a_stage = self._block(x, e, f"decoder.block{i}", training, rng)
        hidden = self._ln(x, "decoder.final_ln")
        g = self.params.group("out_proj")
        logits = kernel.linear(hidden, g["w"], g["b"])
        return DecoderOut(a=a_stage, d_self=d_stage, hidden=hidden, logits=logits)

    def asr_decode(self, features) -> list[int]:
        """Greedy one-pass recognition; length equals the firing count."""
        e = self.encode(features)
        emb, _, _ = self.fire(e)
        if emb.rows == 0:
            return []
        out = self.parallel_decode(e, emb)
        return [int(t) for t in out.logits.data.argmax(axis=1)]

    # -- confidence heads ---------------------------------------------------

    def _estimator(self, a: Tensor, d_self: Tensor, memory: Tensor | None,
                   training: bool, rng: Rng | None) -> Tensor:
        g = self.params.group("estimator.in_proj")
        x = kernel.linear(kernel.concat_cols(a, d_self), g["w"], g["b"])
        for i in range(self.config.estimator_layers):
            x, _, _ = self._block(x, memory, f"estimator.block{i}", training, rng)
        x = self._ln(x, "estimator.final_ln")
        g = self.params.group("estimator.out")
        return kernel.sigmoid(kernel.linear(x, g["w"], g["b"]))

    def hyp_sync_scores(
        self, e: Tensor, hypothesis: Sequence[int],
        training: bool = False, rng: Rng | None = None,
    ) -> Tensor:
        """Hypothesis-synchronous confidence column (|hyp| x 1).

        The estimator sees the decoder's self- and cross-attention
        states for the hypothesis characters and cross-attends the
        encoder frames; it cannot score what the hypothesis left out.
        """
        if self.variant != VARIANT_HYP_SYNC:
            raise ContractViolation(
                f"model variant {self.variant!r} has no hypothesis-synchronous estimator"
            )
        if len(hypothesis) < 1:
            raise ContractViolation("hypothesis must contain at least one token")
        dec = self.parallel_decode(e, self.embed_chars(hypothesis), training, rng)
        return self._estimator(dec.a, dec.d_self, e, training, rng)

    def cif_aligned_scores(
        self, e: Tensor, hypothesis: Sequence[int],
        training: bool = False, rng: Rng | None = None,
        acoustic: Tensor | None = None,
    ) -> tuple[Tensor, list[int]]:
        """Decode-synchronous confidence column (L' x 1) plus the decode.

        Both decoder branches run with shared weights; the aligner
        cross-attends the hypothesis branch from the acoustic branch,
        so scores follow the model's own length estimate, not the
        hypothesis.  ``acoustic`` short-circuits the firing pass when
        the caller has already computed it for this encoder output.
        """
        if self.variant != VARIANT_CIF_ALIGNED:
            raise ContractViolation(
                f"model variant {self.variant!r} has no aligner/estimator head"
            )
        if len(hypothesis) < 1:
            raise ContractViolation("hypothesis must contain at least one token")
        if acoustic is None:
            emb, _, _ = self.fire(e)
        else:
            emb = acoustic
        if emb.rows == 0:
            raise EmptyDecodeError("firing produced no outputs; nothing to score")
        dec_e = self.parallel_decode(e, emb, training, rng)
        dec_c = self.parallel_decode(e, self.embed_chars(hypothesis), training, rng)
        x = dec_e.hidden
        d_stage = a_stage = x
        for i in range(self.config.estimator_layers):
            x, d_stage, a_stage = self._block(x, dec_c.hidden, f"aligner.block{i}", training, rng)
        del x
        scores = self._estimator(a_stage, d_stage, None, training, rng)
        decode = [int(t) for t in dec_e.logits.data.argmax(axis=1)]
        return scores, decode

    def hyp_sync_confidence(self, features, hypothesis: Sequence[int]) -> ConfidenceResult:
        e = self.encode(features)
        p = self.hyp_sync_scores(e, hypothesis)
        return ConfidenceResult.make(hypothesis, p.data[:, 0], VARIANT_HYP_SYNC)

    def cif_aligned_confidence(self, features, hypothesis: Sequence[int]) -> ConfidenceResult:
        e = self.encode(features)
        p, decode = self.cif_aligned_scores(e, hypothesis)
        return ConfidenceResult.make(decode, p.data[:, 0], VARIANT_CIF_ALIGNED)

    def softmax_confidence(
        self, features, mode: str = "decode", forced_tokens: Sequence[int] | None = None
    ) -> ConfidenceResult:
        """Decoder-softmax probabilities as confidence.

        "decode": probability of each argmax token.  "forced": the
        probability of each supplied token at the corresponding decode
        position; raises when the lengths disagree.
        """
        e = self.encode(features)
        emb, _, _ = self.fire(e)
        if emb.rows == 0:
            return ConfidenceResult.make([], [], VARIANT_SOFTMAX)
        logits = self.parallel_decode(e, emb).logits
        probs = kernel.softmax_rows(logits).data
        if mode == "decode":
            tokens = probs.argmax(axis=1)
        elif mode == "forced":
            if forced_tokens is None or len(forced_tokens) != probs.shape[0]:
                got = 0 if forced_tokens is None else len(forced_tokens)
                raise ContractViolation(
                    f"forced scoring needs {probs.shape[0]} tokens, got {got}"
                )
            tokens = np.asarray(forced_tokens, dtype=np.int64)
        else:
            raise ContractViolation(f"unknown softmax confidence mode {mode!r}")
        scores = probs[np.arange(probs.shape[0]), tokens]
        return ConfidenceResult.make(tokens, scores, VARIANT_SOFTMAX)

    # -- training-facing helpers --------------------------------------------

    def freeze_for_confidence_training(self) -> None:
        self.params.freeze(CEM_FROZEN_PREFIXES)

    def trainable(self) -> list[tuple[str, Tensor]]:
        return self.params.trainable()


def bce_loss(scores: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean binary cross entropy of a score column against 0/1 labels."""
    return kernel.binary_cross_entropy(scores, labels)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, model: Model) -> None:
    """Write config echo plus named parameter matrices.

    Matrix payloads are base64 of the little-endian float64 bytes, so a
    save/load round trip is bit-exact.
    """
    payload = {
        "format": CHECKPOINT_FORMAT,
        "variant": model.variant,
        "config": asdict(model.config),
        "params": {
            name: {
                "rows": t.rows,
                "cols": t.cols,
                "data": base64.b64encode(t.data.astype("<f8").tobytes()).decode("ascii"),
            }
            for name, t in model.params.items()
        },
    }
    with open(path, "w", encoding="ascii") as f:
        json.dump(payload, f, sort_keys=True, separators=(",", ":"))
        f.write("\n")


def load_checkpoint(path) -> Model:
    try:
        with open(path, encoding="ascii") as f:
            payload = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    config = ModelConfig(**payload["config"])
    store = ParamStore()
    for name in payload["params"]:
        entry = payload["params"][name]
        raw = np.frombuffer(base64.b64decode(entry["data"]), dtype="<f8")
        if raw.size != entry["rows"] * entry["cols"]:
            raise DataError(f"checkpoint matrix {name!r} has wrong element count")
        store.add(name, kernel.parameter(raw.reshape(entry["rows"], entry["cols"]).copy()))
    return Model(config, store, payload["variant"])
