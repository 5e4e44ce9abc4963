"""Evaluation harness: collection, reports, files, case study, sweep."""

import json

import numpy as np
import pytest

from cifconf.data import CorpusSpec, attach_corrupted_hypotheses, generate_corpus
from cifconf.errors import ContractViolation, DataError
from cifconf.evaluate import (
    case_study,
    collect_confidence,
    compute_report,
    decode_corpus,
    evaluate,
    format_case_study,
    noise_sweep,
    read_utt_records,
    write_case_study,
)
from cifconf.kernel import Rng
from cifconf.labeling import cer
from cifconf.model import VARIANT_CIF_ALIGNED, VARIANT_HYP_SYNC, Model, ModelConfig
from cifconf.train import RunConfig, default_cem_run, train_base, train_confidence

from conftest import TINY_CORPUS, TINY_MODEL


@pytest.fixture(scope="module")
def setup():
    """A lightly trained base model plus untrained confidence heads and a
    hypothesis-bearing test corpus."""
    corpus = generate_corpus(CorpusSpec(n_utts=30, **TINY_CORPUS), seed=21)
    run = RunConfig(model=ModelConfig(**TINY_MODEL), peak_lr=1e-3, warmup_steps=5,
                    total_steps=50, batch_size=4, seed=0, eval_every=0, log_every=0)
    base, _ = train_base(corpus, run)
    test = generate_corpus(CorpusSpec(n_utts=15, **TINY_CORPUS), seed=22)
    attach_corrupted_hypotheses(test, 0.2, 0.15, 0.05, seed=9)
    ca = Model.build(ModelConfig(**TINY_MODEL), seed=2, variant=VARIANT_CIF_ALIGNED)
    for name, t in base.params.items():
        if name in ca.params._params:
            ca.params[name].data[:] = t.data
    hyp = Model.build(ModelConfig(**TINY_MODEL), seed=2, variant=VARIANT_HYP_SYNC)
    for name, t in base.params.items():
        if name in hyp.params._params:
            hyp.params[name].data[:] = t.data
    return base, ca, hyp, test


class TestDecodeCorpus:
    def test_pairs_cover_corpus_and_cer_consistent(self, setup):
        base, _, _, test = setup
        pairs, corpus_cer, _ = decode_corpus(base, test)
        assert [p[0] for p in pairs] == [u.utt_id for u in test.utterances]
        errors = sum(cer(d, u.ref) * len(u.ref) for (_, d), u in zip(pairs, test.utterances))
        tokens = sum(len(u.ref) for u in test.utterances)
        assert corpus_cer == pytest.approx(errors / tokens)


class TestCollectConfidence:
    def test_all_variants_scored(self, setup):
        base, ca, hyp, test = setup
        evals = collect_confidence(test, base, [ca, hyp])
        assert set(evals) == {"softmax", "cif_aligned", "hyp_synchronous"}
        n_scorable = len(test.with_hypotheses())
        assert len(evals["hyp_synchronous"].utts) == n_scorable
        assert len(evals["cif_aligned"].utts) + evals["cif_aligned"].n_skipped >= n_scorable

    def test_hyp_sync_scores_follow_hypothesis_length(self, setup):
        base, _, hyp, test = setup
        evals = collect_confidence(test, base, [hyp])
        lengths = {u.utt_id: len(u.hyp) for u in test.with_hypotheses()}
        from collections import Counter

        per_utt = Counter(r[0] for r in evals["hyp_synchronous"].token_rows)
        assert dict(per_utt) == {k: v for k, v in lengths.items() if v}

    def test_cif_aligned_scores_follow_decode_length(self, setup):
        base, ca, _, test = setup
        evals = collect_confidence(test, base, [ca])
        from collections import Counter

        per_utt = Counter(r[0] for r in evals["cif_aligned"].token_rows)
        for utt in test.with_hypotheses():
            decode = ca.asr_decode(utt.frames)
            if decode:
                assert per_utt[utt.utt_id] == len(decode)

    def test_duplicate_variants_rejected(self, setup):
        base, ca, _, test = setup
        with pytest.raises(ContractViolation):
            collect_confidence(test, base, [ca, ca])


class TestEvaluateFiles:
    def test_full_report_tree(self, setup, tmp_path):
        base, ca, hyp, test = setup
        reports = evaluate(test, base, [ca, hyp], tmp_path)
        assert set(reports) == {"softmax", "cif_aligned", "hyp_synchronous"}
        for variant in reports:
            for stem in ("tokens", "utts", "labels", "roc", "filter",
                         "filter_nodeletion", "filter_deletion", "report"):
                ext = "json" if stem == "report" else "tsv"
                assert (tmp_path / f"{stem}_{variant}.{ext}").exists(), (stem, variant)
        assert (tmp_path / "summary.tsv").exists()
        assert (tmp_path / "summary.json").exists()
        assert (tmp_path / "figures" / "filter_curves.png").stat().st_size > 0
        assert (tmp_path / "figures" / "roc_curves.png").stat().st_size > 0

    def test_report_numbers_recomputable_from_dumps(self, setup, tmp_path):
        base, ca, _, test = setup
        reports = evaluate(test, base, [ca], tmp_path, figures=False)
        for variant, report in reports.items():
            tokens_path = tmp_path / f"tokens_{variant}.tsv"
            lines = tokens_path.read_text().splitlines()[1:]
            scores, labels = [], []
            for line in lines:
                _, _, _, score, label = line.split("\t")
                scores.append(float(score))
                labels.append(int(label))
            from cifconf.metrics import ScoredToken, auc, ece

            tokens = [ScoredToken(s, l) for s, l in zip(scores, labels)]
            assert auc(tokens) == pytest.approx(report.auc, abs=1e-12)
            assert ece(tokens) == pytest.approx(report.ece, abs=1e-12)
            from cifconf.metrics import ece_u, rmse_u

            records = read_utt_records(tmp_path / f"utts_{variant}.tsv")
            assert ece_u(records) == pytest.approx(report.ece_u, abs=1e-12)
            assert rmse_u(records) == pytest.approx(report.rmse_u, abs=1e-12)

    def test_summary_json_matches_reports(self, setup, tmp_path):
        base, ca, _, test = setup
        reports = evaluate(test, base, [ca], tmp_path, figures=False)
        summary = json.loads((tmp_path / "summary.json").read_text())
        for variant, report in reports.items():
            assert summary[variant]["auc"] == report.auc
            assert summary[variant]["ece_u"] == report.ece_u


class TestCaseStudy:
    def test_columns_and_lengths(self, setup, tmp_path):
        base, ca, hyp, test = setup
        utt = next(u for u in test.with_hypotheses())
        study = case_study(test, utt.utt_id, base, [ca, hyp])
        # The estimator column counts must match the structural contract:
        # one hyp-sync score per hypothesis token, one aligned score per
        # decode token.
        hyp_scores = [c for c in study.columns if "hyp_synchronous" in c]
        assert len(hyp_scores) == len(utt.hyp)
        decode = ca.asr_decode(utt.frames)
        ca_scores = [c for c in study.columns if "cif_aligned" in c]
        assert len(ca_scores) == len(decode)
        assert study.decode == decode
        dist, _ = __import__("cifconf.labeling", fromlist=["edit_distance"]).edit_distance(
            utt.ref, utt.hyp
        )
        assert study.accuracy == pytest.approx(1 - min(dist / len(utt.ref), 1.0))

    def test_deleted_slot_has_hyp_marker_but_ca_score(self, setup):
        base, ca, _, test = setup
        utt = test.with_hypotheses()[0]
        utt.hyp = utt.ref[:2] + utt.ref[3:]  # force one clean deletion
        study = case_study(test, utt.utt_id, base, [ca])
        deleted = [c for c in study.columns if c["ref"] is not None and c["hyp"] is None]
        assert deleted, "expected a deletion column"

    def test_unknown_utterance_rejected(self, setup):
        base, ca, _, test = setup
        with pytest.raises(DataError):
            case_study(test, "missing", base, [ca])

    def test_write_and_format(self, setup, tmp_path):
        base, ca, hyp, test = setup
        utt = test.with_hypotheses()[0]
        study = case_study(test, utt.utt_id, base, [ca, hyp])
        write_case_study(tmp_path, study)
        table = (tmp_path / f"case_{utt.utt_id}.tsv").read_text().splitlines()
        assert table[0].split("\t") == ["slot", "ref", "hyp", "hyp_label", *study.variants]
        assert len(table) == 1 + len(study.columns)
        text = format_case_study(study)
        assert utt.utt_id in text and "accuracy" in text


class TestNoiseSweep:
    def test_rows_and_file(self, setup, tmp_path):
        _, ca, _, test = setup
        rows = noise_sweep(ca, test, [0.1, 0.3], tmp_path)
        assert [r["sigma"] for r in rows] == [0.1, 0.3]
        for r in rows:
            assert 0.0 <= r["cer"]
            assert r["n_utts"] == len(test.utterances)
        assert (tmp_path / "noise_sweep.tsv").exists()
        assert (tmp_path / "figures" / "noise_sweep.png").stat().st_size > 0

    def test_descending_sigmas_rejected(self, setup):
        _, ca, _, test = setup
        with pytest.raises(ContractViolation):
            noise_sweep(ca, test, [0.3, 0.1])

    def test_inline_corpus_rejected(self, setup):
        _, ca, _, test = setup
        import copy

        frozen = copy.deepcopy(test)
        for u in frozen.utterances:
            u.regen_seed = None
        with pytest.raises(DataError):
            noise_sweep(ca, frozen, [0.1])
