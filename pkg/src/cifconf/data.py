"""Synthetic corpus: token sequences rendered as noisy prototype frames.

Every token id owns one fixed random prototype vector; an utterance is a
random token sequence where each token emits a few frames of prototype
plus white noise.  Feature regeneration is keyed by a per-utterance seed,
so corpora are tiny on disk by default ({"regen_seed": ...} in place of
the frame payload) and a whole test set can be re-rendered at a different
noise level with the same underlying noise draws (noise is sampled unit
scale, then multiplied by sigma).

Corpus files are JSONL records
    {"id": str, "ref": [int], "hyp": [int]?, "frames": [[float]] | {"regen_seed": int}}
with a sibling ``spec.json`` echoing the generation parameters.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractViolation, DataError
from .kernel import Rng
from .labeling import corrupt

# Rng stream ids; distinct per purpose so streams never collide.
STREAM_PROTOTYPES = 1
STREAM_SEQUENCES = 2


@dataclass
class CorpusSpec:
    vocab_size: int = 32
    frames_per_token: tuple[int, int] = (2, 3)   # inclusive range
    feature_dim: int = 16
    prototype_seed: int = 7
    noise_sigma: float = 0.1
    n_utts: int = 2000
    utt_len: tuple[int, int] = (4, 10)           # inclusive range
    # Prototype entries are N(0, prototype_scale^2); with noise_sigma
    # absolute, this sets the task's signal-to-noise ratio.  0.3 keeps
    # recognition easy at the training noise level while letting a 2x/4x
    # noise sweep degrade it measurably.
    prototype_scale: float = 0.3

    def __post_init__(self):
        self.frames_per_token = tuple(self.frames_per_token)
        self.utt_len = tuple(self.utt_len)
        for lo, hi in (self.frames_per_token, self.utt_len):
            if lo < 1 or hi < lo:
                raise ContractViolation(f"empty range ({lo}, {hi}) in corpus spec")
        if self.noise_sigma < 0 or self.prototype_scale <= 0:
            raise ContractViolation(
                f"bad noise_sigma/prototype_scale in corpus spec: {self}"
            )
        if self.vocab_size < 2 or self.n_utts < 1 or self.feature_dim < 1:
            raise ContractViolation(f"degenerate corpus spec: {self}")


@dataclass
class Utterance:
    utt_id: str
    ref: list[int]
    frames: np.ndarray
    hyp: list[int] | None = None
    regen_seed: int | None = None


@dataclass
class Corpus:
    spec: CorpusSpec
    utterances: list[Utterance] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.utterances)

    def by_id(self, utt_id: str) -> Utterance:
        for utt in self.utterances:
            if utt.utt_id == utt_id:
                return utt
        raise DataError(f"utterance {utt_id!r} not found in corpus")

    def with_hypotheses(self) -> list[Utterance]:
        """Utterances carrying a non-empty hypothesis (scoring needs one)."""
        return [u for u in self.utterances if u.hyp]


def prototypes(spec: CorpusSpec) -> np.ndarray:
    """Fixed random prototype vector per token id."""
    return Rng(spec.prototype_seed, STREAM_PROTOTYPES).normal(
        (spec.vocab_size, spec.feature_dim), sigma=spec.prototype_scale
    )


def render_frames(
    ref: list[int], regen_seed: int, spec: CorpusSpec, sigma: float | None = None
) -> np.ndarray:
    """Frames for one utterance: per token, k ~ uniform(frames_per_token)
    copies of its prototype plus sigma-scaled unit noise.

    The frame-count and noise draws depend only on regen_seed, so the
    same utterance re-rendered at another sigma keeps its noise shape.
    """
    sigma = spec.noise_sigma if sigma is None else sigma
    protos = prototypes(spec)
    rng = Rng(regen_seed)
    lo, hi = spec.frames_per_token
    rows = []
    for tok in ref:
        k = rng.integers(lo, hi + 1)
        noise = rng.normal((k, spec.feature_dim))
        rows.append(protos[tok] + sigma * noise)
    return np.concatenate(rows, axis=0)


def generate_corpus(spec: CorpusSpec, seed: int, id_prefix: str = "utt") -> Corpus:
    """Deterministic corpus of spec.n_utts utterances under one seed."""
    rng = Rng(seed, STREAM_SEQUENCES)
    lo, hi = spec.utt_len
    utts = []
    for i in range(spec.n_utts):
        length = rng.integers(lo, hi + 1)
        ref = rng.integers(0, spec.vocab_size, length).tolist()
        regen = rng.u64()
        utts.append(
            Utterance(
                utt_id=f"{id_prefix}{i:05d}",
                ref=ref,
                frames=render_frames(ref, regen, spec),
                regen_seed=regen,
            )
        )
    return Corpus(spec=spec, utterances=utts)


# ---------------------------------------------------------------------------
# Disk format
# ---------------------------------------------------------------------------


def save_corpus(corpus: Corpus, path, inline_frames: bool = False) -> None:
    """Write JSONL records plus a sibling spec.json.

    By default frames are stored as {"regen_seed": ...} markers; pass
    inline_frames=True for a self-contained (much larger) file.
    """
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="ascii") as f:
            for utt in corpus.utterances:
                record: dict = {"id": utt.utt_id, "ref": utt.ref}
                if utt.hyp is not None:
                    record["hyp"] = utt.hyp
                if inline_frames or utt.regen_seed is None:
                    record["frames"] = [[float(v) for v in row] for row in utt.frames]
                else:
                    record["frames"] = {"regen_seed": utt.regen_seed}
                f.write(json.dumps(record, sort_keys=True, separators=(",", ":")))
                f.write("\n")
        spec_path = path.parent / "spec.json"
        if not spec_path.exists():
            with open(spec_path, "w", encoding="ascii") as f:
                json.dump(asdict(corpus.spec), f, sort_keys=True, indent=2)
                f.write("\n")
    except OSError as exc:
        raise DataError(f"cannot write corpus {path}: {exc}") from exc


def load_spec(path) -> CorpusSpec:
    try:
        with open(path, encoding="ascii") as f:
            return CorpusSpec(**json.load(f))
    except OSError as exc:
        raise DataError(f"cannot read corpus spec {path}: {exc}") from exc
    except (TypeError, ValueError, json.JSONDecodeError) as exc:
        raise DataError(f"malformed corpus spec {path}: {exc}") from exc


def load_corpus(path, spec: CorpusSpec | None = None) -> Corpus:
    """Read a JSONL corpus; regen-marked records need the sibling
    spec.json (or an explicit spec) to re-render their frames."""
    path = Path(path)
    if spec is None:
        spec_path = path.parent / "spec.json"
        if not spec_path.exists():
            raise DataError(f"no corpus spec next to {path}; pass one explicitly")
        spec = load_spec(spec_path)
    utts = []
    try:
        lines = path.read_text(encoding="ascii").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read corpus {path}: {exc}") from exc
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{line_no}: bad JSON: {exc}") from exc
        frames = record.get("frames")
        regen = None
        if isinstance(frames, dict):
            regen = int(frames["regen_seed"])
            rendered = render_frames(record["ref"], regen, spec)
        elif isinstance(frames, list):
            rendered = np.asarray(frames, dtype=np.float64)
        else:
            raise DataError(f"{path}:{line_no}: record has no frames payload")
        utts.append(
            Utterance(
                utt_id=str(record["id"]),
                ref=[int(t) for t in record["ref"]],
                frames=rendered,
                hyp=[int(t) for t in record["hyp"]] if "hyp" in record else None,
                regen_seed=regen,
            )
        )
    return Corpus(spec=spec, utterances=utts)


# ---------------------------------------------------------------------------
# Hypothesis sources
# ---------------------------------------------------------------------------


def attach_corrupted_hypotheses(
    corpus: Corpus, sub_rate: float, del_rate: float, ins_rate: float, seed: int
) -> None:
    """Derive each utterance's hypothesis by corrupting its reference.

    Deterministic per (seed, utterance index) regardless of ordering of
    prior draws.
    """
    for i, utt in enumerate(corpus.utterances):
        utt.hyp = corrupt(
            utt.ref, sub_rate, del_rate, ins_rate, Rng(seed, i), corpus.spec.vocab_size
        )


def attach_hypotheses_from_file(corpus: Corpus, path) -> None:
    """Take hypotheses from a decode JSONL ({"id": ..., "hyp": [...]})."""
    try:
        lines = Path(path).read_text(encoding="ascii").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read hypothesis file {path}: {exc}") from exc
    table = {}
    for line in lines:
        if line.strip():
            record = json.loads(line)
            table[str(record["id"])] = [int(t) for t in record["hyp"]]
    missing = [u.utt_id for u in corpus.utterances if u.utt_id not in table]
    if missing:
        raise DataError(f"hypothesis file {path} misses {len(missing)} utterances "
                        f"(first: {missing[0]})")
    for utt in corpus.utterances:
        utt.hyp = table[utt.utt_id]


def save_hypotheses(path, pairs) -> None:
    """Write decode output as JSONL (utt_id, hyp token ids)."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="ascii") as f:
            for utt_id, hyp in pairs:
                f.write(json.dumps({"id": utt_id, "hyp": [int(t) for t in hyp]},
                                   sort_keys=True, separators=(",", ":")))
                f.write("\n")
    except OSError as exc:
        raise DataError(f"cannot write hypotheses {path}: {exc}") from exc
