"""Corpus decoding, confidence evaluation, case studies, and noise sweeps.

Evaluation scores each utterance's hypothesis under every available
variant and writes, per variant, the per-token scores, per-utterance
records, label dumps, ROC and filtering curves (TSV), a metrics report
(JSON), and a cross-variant summary.  Figures are rendered next to the
delimited output.  Everything is recomputable from the dumped TSVs; no
stage here ever trains.

Label conventions per variant:

* softmax and hyp_synchronous score a written sequence, so their labels
  come from aligning that sequence against the ground truth.
* cif_aligned scores the model's own decode, and its labels come from
  aligning that decode against the hypothesis under assessment, which
  is also how the variant is trained.

Utterance-level records always measure the hypothesis against the
ground truth (CER, deletion flag), so the calibration metrics of all
variants answer the same question: how close is the average confidence
to the hypothesis's accuracy.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Corpus, render_frames
from .errors import ContractViolation, DataError, EmptyDecodeError
from .labeling import cer, edit_distance, labels_for_decode, labels_for_hypothesis
from .metrics import (
    MetricsReport,
    ScoredToken,
    UttRecord,
    auc,
    ece,
    ece_u,
    equally_spaced,
    filter_curve,
    rmse_u,
    roc_points,
    split_by_deletion,
)
from .model import (
    VARIANT_CIF_ALIGNED,
    VARIANT_HYP_SYNC,
    VARIANT_SOFTMAX,
    ConfidenceResult,
    Model,
)

logger = logging.getLogger(__name__)

MISSING = "**"


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------


def decode_corpus(model: Model, corpus: Corpus) -> tuple[list, float, int]:
    """Greedy-decode every utterance.

    Returns ((utt_id, tokens) pairs, corpus CER, empty-decode count).
    Empty decodes are kept (and logged), not fatal.
    """
    pairs = []
    errors = 0.0
    tokens = 0
    empties = 0
    for utt in corpus.utterances:
        decode = model.asr_decode(utt.frames)
        if not decode:
            empties += 1
            logger.warning("empty decode for %s", utt.utt_id)
        pairs.append((utt.utt_id, decode))
        dist, _ = edit_distance(utt.ref, decode)
        errors += dist
        tokens += len(utt.ref)
    return pairs, errors / tokens, empties


# ---------------------------------------------------------------------------
# Confidence collection
# ---------------------------------------------------------------------------


@dataclass
class VariantEval:
    """Raw per-token and per-utterance material for one variant."""

    variant: str
    tokens: list[ScoredToken] = field(default_factory=list)
    utts: list[UttRecord] = field(default_factory=list)
    token_rows: list = field(default_factory=list)   # (utt_id, pos, token, score, label)
    label_rows: list = field(default_factory=list)   # (utt_id, basis, labels as 0/1 string)
    n_skipped: int = 0
    corpus_errors: float = 0.0
    corpus_ref_tokens: int = 0

    def add(self, utt, result: ConfidenceResult, labels: list[int], basis: str) -> None:
        if len(labels) != len(result.scores):
            raise ContractViolation(
                f"{self.variant}: {len(result.scores)} scores vs {len(labels)} labels "
                f"for {utt.utt_id}"
            )
        for pos, (tok, score, label) in enumerate(zip(result.tokens, result.scores, labels)):
            self.tokens.append(ScoredToken(score, label))
            self.token_rows.append((utt.utt_id, pos, tok, score, label))
        self.label_rows.append((utt.utt_id, basis, "".join(str(v) for v in labels)))
        dist, path = edit_distance(utt.ref, utt.hyp)
        self.utts.append(
            UttRecord(
                utt_id=utt.utt_id,
                avg_conf=result.average,
                cer=dist / len(utt.ref),
                has_deletion=path.has_deletion,
                token_count=len(utt.ref),
            )
        )
        self.corpus_errors += dist
        self.corpus_ref_tokens += len(utt.ref)


def collect_confidence(
    corpus: Corpus, base_model: Model, cem_models: Sequence[Model]
) -> dict[str, VariantEval]:
    """Score every hypothesis-bearing utterance under every variant.

    The softmax baseline always comes from the base model: it scores
    the hypothesis in forced mode when the lengths line up and falls
    back to scoring its own decode otherwise.
    """
    by_variant = {m.variant: m for m in cem_models}
    if len(by_variant) != len(cem_models):
        raise ContractViolation("one model per confidence variant, got duplicates")
    evals = {VARIANT_SOFTMAX: VariantEval(VARIANT_SOFTMAX)}
    for variant in by_variant:
        evals[variant] = VariantEval(variant)

    for utt in corpus.utterances:
        if not utt.hyp:
            for ev in evals.values():
                ev.n_skipped += 1
            continue

        decode_result = base_model.softmax_confidence(utt.frames, mode="decode")
        if len(utt.hyp) == len(decode_result.tokens):
            result = base_model.softmax_confidence(
                utt.frames, mode="forced", forced_tokens=utt.hyp
            )
        else:
            result = decode_result
        if result.tokens:
            labels = labels_for_hypothesis(result.tokens, utt.ref).labels
            evals[VARIANT_SOFTMAX].add(utt, result, labels, basis="hypothesis")
        else:
            evals[VARIANT_SOFTMAX].n_skipped += 1

        for variant, m in by_variant.items():
            if variant == VARIANT_HYP_SYNC:
                result = m.hyp_sync_confidence(utt.frames, utt.hyp)
                labels = labels_for_hypothesis(utt.hyp, utt.ref).labels
                evals[variant].add(utt, result, labels, basis="hypothesis")
            elif variant == VARIANT_CIF_ALIGNED:
                try:
                    result = m.cif_aligned_confidence(utt.frames, utt.hyp)
                except EmptyDecodeError:
                    evals[variant].n_skipped += 1
                    continue
                labels = labels_for_decode(result.tokens, utt.hyp).labels
                evals[variant].add(utt, result, labels, basis="decode")
            else:
                raise ContractViolation(f"cannot evaluate variant {variant!r}")
    return evals


def compute_report(
    ev: VariantEval,
    n_thresholds: int = 201,
    n_bins: int = 10,
    ece_u_mode: str = "per_utterance",
) -> MetricsReport:
    thresholds = equally_spaced(n_thresholds)
    return MetricsReport(
        variant=ev.variant,
        auc=auc(ev.tokens),
        auc_equal_spaced=auc(ev.tokens, method="equal_spaced", n_thresholds=n_thresholds),
        ece=ece(ev.tokens, n_bins),
        ece_u=ece_u(ev.utts, n_bins, mode=ece_u_mode),
        rmse_u=rmse_u(ev.utts),
        corpus_cer=ev.corpus_errors / ev.corpus_ref_tokens,
        n_utts=len(ev.utts),
        n_tokens=len(ev.tokens),
        ece_bins=n_bins,
        ece_u_mode=ece_u_mode,
        auc_methods=("exact_rank", f"equal_spaced_{n_thresholds}"),
        roc_curve=roc_points(ev.tokens, thresholds),
        filter_curve=filter_curve(ev.utts, thresholds),
    )


# ---------------------------------------------------------------------------
# File output
# ---------------------------------------------------------------------------


def write_tsv(path, header: Sequence[str], rows) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            f.write("\t".join(header) + "\n")
            for row in rows:
                f.write("\t".join(_cell(v) for v in row) + "\n")
    except OSError as exc:
        raise DataError(f"cannot write table {path}: {exc}") from exc


def _cell(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_variant_files(out_dir, ev: VariantEval, report: MetricsReport) -> None:
    out = Path(out_dir)
    write_tsv(
        out / f"tokens_{ev.variant}.tsv",
        ("utt_id", "pos", "token", "score", "label"),
        ev.token_rows,
    )
    write_tsv(
        out / f"utts_{ev.variant}.tsv",
        ("utt_id", "avg_conf", "cer", "has_deletion", "token_count"),
        (
            (u.utt_id, u.avg_conf, u.cer, u.has_deletion, u.token_count)
            for u in ev.utts
        ),
    )
    write_tsv(out / f"labels_{ev.variant}.tsv", ("utt_id", "basis", "labels"), ev.label_rows)
    write_tsv(out / f"roc_{ev.variant}.tsv", ("threshold", "tpr", "fpr"),
               ((t, tpr, fpr) for t, tpr, fpr in report.roc_curve))
    write_tsv(out / f"filter_{ev.variant}.tsv", ("threshold", "n", "error_rate"),
               report.filter_curve)
    without, with_del = split_by_deletion(ev.utts)
    thresholds = [t for t, _, _ in report.filter_curve]
    for tag, subset in (("nodeletion", without), ("deletion", with_del)):
        rows = filter_curve(subset, thresholds) if subset else []
        write_tsv(out / f"filter_{tag}_{ev.variant}.tsv",
                   ("threshold", "n", "error_rate"), rows)
    with open(out / f"report_{ev.variant}.json", "w", encoding="ascii") as f:
        payload = report.to_dict()
        payload["n_skipped"] = ev.n_skipped
        json.dump(payload, f, sort_keys=True, indent=2)
        f.write("\n")


def write_summary(out_dir, reports: dict[str, MetricsReport]) -> None:
    out = Path(out_dir)
    order = [VARIANT_SOFTMAX, VARIANT_HYP_SYNC, VARIANT_CIF_ALIGNED]
    ordered = [reports[v] for v in order if v in reports]
    ordered += [r for v, r in reports.items() if v not in order]
    write_tsv(
        out / "summary.tsv",
        ("variant", "auc", "ece", "ece_u", "rmse_u", "corpus_cer", "n_utts", "n_tokens"),
        (
            (r.variant, r.auc, r.ece, r.ece_u, r.rmse_u, r.corpus_cer, r.n_utts, r.n_tokens)
            for r in ordered
        ),
    )
    with open(out / "summary.json", "w", encoding="ascii") as f:
        json.dump({r.variant: r.to_dict() for r in ordered}, f, sort_keys=True, indent=2)
        f.write("\n")


def evaluate(
    corpus: Corpus,
    base_model: Model,
    cem_models: Sequence[Model],
    out_dir,
    n_thresholds: int = 201,
    n_bins: int = 10,
    ece_u_mode: str = "per_utterance",
    figures: bool = True,
) -> dict[str, MetricsReport]:
    """Full evaluation: collect, report, dump TSV/JSON, render figures."""
    evals = collect_confidence(corpus, base_model, cem_models)
    reports = {}
    for variant, ev in evals.items():
        if not ev.tokens:
            logger.warning("variant %s produced no scored tokens; skipped", variant)
            continue
        report = compute_report(ev, n_thresholds, n_bins, ece_u_mode)
        reports[variant] = report
        write_variant_files(out_dir, ev, report)
    write_summary(out_dir, reports)
    if figures and reports:
        from . import plots

        split_curves = {}
        for variant, ev in evals.items():
            if variant not in reports:
                continue
            thresholds = [t for t, _, _ in reports[variant].filter_curve]
            without, with_del = split_by_deletion(ev.utts)
            split_curves[variant] = {
                "all": reports[variant].filter_curve,
                "nodeletion": filter_curve(without, thresholds) if without else [],
                "deletion": filter_curve(with_del, thresholds) if with_del else [],
            }
        plots.save_filter_curves(split_curves, Path(out_dir) / "figures" / "filter_curves.png")
        plots.save_roc_curves(
            {v: reports[v].roc_curve for v in reports},
            Path(out_dir) / "figures" / "roc_curves.png",
        )
    return reports


def read_utt_records(path) -> list[UttRecord]:
    """Load a dumped utts_<variant>.tsv back into records."""
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read utterance table {path}: {exc}") from exc
    if not lines or lines[0].split("\t") != [
        "utt_id", "avg_conf", "cer", "has_deletion", "token_count",
    ]:
        raise DataError(f"{path} is not an utterance table")
    out = []
    for line in lines[1:]:
        utt_id, avg_conf, cer_val, has_del, token_count = line.split("\t")
        out.append(
            UttRecord(utt_id, float(avg_conf), float(cer_val), has_del == "1", int(token_count))
        )
    return out


# ---------------------------------------------------------------------------
# Case study
# ---------------------------------------------------------------------------


@dataclass
class CaseStudy:
    """Slot-aligned view of one utterance across all variants.

    Columns follow the reference/hypothesis alignment; decode-
    synchronous scores are mapped onto reference slots through the
    reference/decode alignment, and unaligned decode positions get
    trailing extra columns.  Missing cells read "**".
    """

    utt_id: str
    accuracy: float
    columns: list[dict]
    averages: dict[str, float]
    decode: list[int]
    variants: list[str]

    def table_rows(self):
        """(slot, ref, hyp, hyp_label, <variant scores...>) rows."""
        for i, col in enumerate(self.columns):
            row = [
                i,
                MISSING if col["ref"] is None else col["ref"],
                MISSING if col["hyp"] is None else col["hyp"],
                MISSING if col.get("hyp_label") is None else col["hyp_label"],
            ]
            for variant in self.variants:
                score = col.get(variant)
                row.append(MISSING if score is None else f"{score:.3f}")
            yield row


def case_study(
    corpus: Corpus, utt_id: str, base_model: Model, cem_models: Sequence[Model]
) -> CaseStudy:
    utt = corpus.by_id(utt_id)
    if not utt.hyp:
        raise DataError(f"utterance {utt_id!r} carries no hypothesis to study")
    evals = collect_confidence(
        Corpus(spec=corpus.spec, utterances=[utt]), base_model, cem_models
    )

    _, path = edit_distance(utt.ref, utt.hyp)
    columns = []
    ref_slot = {}
    hyp_slot = {}
    for op in path.ops:
        col = {
            "ref": None if op.ref_index is None else utt.ref[op.ref_index],
            "hyp": None if op.hyp_index is None else utt.hyp[op.hyp_index],
            "hyp_label": None if op.hyp_index is None else int(op.kind == "match"),
        }
        if op.ref_index is not None:
            ref_slot[op.ref_index] = len(columns)
        if op.hyp_index is not None:
            hyp_slot[op.hyp_index] = len(columns)
        columns.append(col)

    averages = {}
    decode: list[int] = []
    variants = list(evals)
    for variant, ev in evals.items():
        if not ev.token_rows:
            continue
        averages[variant] = ev.utts[0].avg_conf
        scored = [(pos, tok, score) for _, pos, tok, score, _ in ev.token_rows]
        basis = ev.label_rows[0][1]
        if basis == "hypothesis" and len(scored) == len(utt.hyp):
            for pos, _, score in scored:
                columns[hyp_slot[pos]][variant] = score
        else:
            seq = [tok for _, tok, _ in scored]
            if variant == VARIANT_CIF_ALIGNED:
                decode = seq
            _, dpath = edit_distance(utt.ref, seq)
            for op in dpath.ops:
                if op.ref_index is not None and op.hyp_index is not None:
                    columns[ref_slot[op.ref_index]][variant] = scored[op.hyp_index][2]
                elif op.hyp_index is not None:
                    columns.append({
                        "ref": None, "hyp": None, "hyp_label": None,
                        variant: scored[op.hyp_index][2],
                    })
    dist, _ = edit_distance(utt.ref, utt.hyp)
    return CaseStudy(
        utt_id=utt_id,
        accuracy=1.0 - min(dist / len(utt.ref), 1.0),
        columns=columns,
        averages=averages,
        decode=decode,
        variants=variants,
    )


def write_case_study(out_dir, study: CaseStudy, firing_rows=None) -> None:
    out = Path(out_dir)
    header = ["slot", "ref", "hyp", "hyp_label", *study.variants]
    write_tsv(out / f"case_{study.utt_id}.tsv", header, study.table_rows())
    with open(out / f"case_{study.utt_id}.json", "w", encoding="ascii") as f:
        json.dump(
            {
                "utt_id": study.utt_id,
                "accuracy": study.accuracy,
                "decode": study.decode,
                "averages": study.averages,
            },
            f, sort_keys=True, indent=2,
        )
        f.write("\n")
    if firing_rows is not None:
        write_tsv(
            out / f"firing_trace_{study.utt_id}.tsv",
            ("output_index", "frame_index", "weight"),
            firing_rows,
        )


def format_case_study(study: CaseStudy) -> str:
    """Fixed-width text rendering: one row per sequence, slots aligned."""
    names = ["ref", "hyp", "hyp_label", *study.variants]
    rows = {name: [] for name in names}
    for row in study.table_rows():
        _, ref, hyp, label, *scores = row
        rows["ref"].append(str(ref))
        rows["hyp"].append(str(hyp))
        rows["hyp_label"].append(str(label))
        for name, score in zip(study.variants, scores):
            rows[name].append(str(score))
    width = max(5, max(len(c) for cells in rows.values() for c in cells))
    label_w = max(len(n) for n in names) + 2
    lines = [f"utterance {study.utt_id}   accuracy {study.accuracy:.3f}"]
    for name in names:
        cells = " ".join(c.rjust(width) for c in rows[name])
        avg = f"   avg {study.averages[name]:.3f}" if name in study.averages else ""
        lines.append(f"{name.ljust(label_w)}{cells}{avg}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Noise sweep
# ---------------------------------------------------------------------------


def noise_sweep(
    model: Model, corpus: Corpus, sigmas: Sequence[float], out_dir=None
) -> list[dict]:
    """Re-render the corpus at each noise level (same noise draws, new
    scale) and track CER plus average decode-synchronous confidence when
    scoring the ground truth vs the model's own hypothesis."""
    if list(sigmas) != sorted(sigmas):
        raise ContractViolation("noise sweep sigmas must be ascending")
    missing = [u.utt_id for u in corpus.utterances if u.regen_seed is None]
    if missing:
        raise DataError(
            f"noise sweep needs regenerable corpora; {len(missing)} utterances "
            f"carry inline frames only (first: {missing[0]})"
        )
    rows = []
    for sigma in sigmas:
        errors = 0.0
        tokens = 0
        conf_gt = []
        conf_hyp = []
        skipped = 0
        for utt in corpus.utterances:
            frames = render_frames(utt.ref, utt.regen_seed, corpus.spec, sigma)
            e = model.encode(frames)
            emb, _, _ = model.fire(e)
            if emb.rows == 0:
                errors += len(utt.ref)
                tokens += len(utt.ref)
                skipped += 1
                continue
            scores_gt, decode = model.cif_aligned_scores(e, utt.ref, acoustic=emb)
            dist, _ = edit_distance(utt.ref, decode)
            errors += dist
            tokens += len(utt.ref)
            conf_gt.append(float(scores_gt.data.mean()))
            scores_hyp, _ = model.cif_aligned_scores(e, decode, acoustic=emb)
            conf_hyp.append(float(scores_hyp.data.mean()))
        rows.append(
            {
                "sigma": float(sigma),
                "cer": errors / tokens,
                "avg_conf_gt": float(np.mean(conf_gt)) if conf_gt else None,
                "avg_conf_hyp": float(np.mean(conf_hyp)) if conf_hyp else None,
                "n_utts": len(corpus.utterances),
                "n_skipped": skipped,
            }
        )
        logger.info(
            "sigma %.3f cer %.4f conf_gt %s conf_hyp %s",
            sigma, rows[-1]["cer"], rows[-1]["avg_conf_gt"], rows[-1]["avg_conf_hyp"],
        )
    if out_dir is not None:
        write_tsv(
            Path(out_dir) / "noise_sweep.tsv",
            ("sigma", "cer", "avg_conf_gt", "avg_conf_hyp", "n_utts", "n_skipped"),
            (
                (r["sigma"], r["cer"], r["avg_conf_gt"], r["avg_conf_hyp"],
                 r["n_utts"], r["n_skipped"])
                for r in rows
            ),
        )
        from . import plots

        plots.save_noise_sweep(rows, Path(out_dir) / "figures" / "noise_sweep.png")
    return rows
