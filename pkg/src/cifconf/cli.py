"""Command-line pipeline: data, training, decoding, reports.

Subcommands: gen-data, train-asr, decode, train-cem, evaluate,
filter-curve, case-study, noise-sweep.  Global flags --seed, --config
(JSON), --out (directory).  Exit codes: 0 success, 1 usage error,
2 data or contract error, 3 training divergence.

The config file is a JSON object with optional sections "corpus",
"model", "train_asr", and "train_cem" whose keys override the dataclass
defaults of CorpusSpec, ModelConfig, and RunConfig respectively.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import plots
from .data import (
    Corpus,
    CorpusSpec,
    attach_corrupted_hypotheses,
    attach_hypotheses_from_file,
    generate_corpus,
    load_corpus,
    save_corpus,
    save_hypotheses,
)
from .errors import CifconfError, DataError, DivergenceError
from .evaluate import (
    case_study,
    decode_corpus,
    evaluate,
    filter_curve,
    format_case_study,
    noise_sweep,
    read_utt_records,
    write_case_study,
    write_tsv,
)
from .metrics import equally_spaced
from .model import (
    VARIANT_CIF_ALIGNED,
    Model,
    ModelConfig,
    load_checkpoint,
    save_checkpoint,
)
from .train import RunConfig, default_cem_run, train_base, train_confidence

logger = logging.getLogger(__name__)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed config {path}: {exc}") from exc


def _corpus_spec(config: dict, **overrides) -> CorpusSpec:
    merged = dict(config.get("corpus", {}))
    merged.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return CorpusSpec(**merged)
    except TypeError as exc:
        raise DataError(f"bad corpus config: {exc}") from exc


def _run_config(config: dict, section: str, spec: CorpusSpec, seed, cem: bool) -> RunConfig:
    model_cfg = dict(config.get("model", {}))
    model_cfg.setdefault("feature_dim", spec.feature_dim)
    model_cfg.setdefault("vocab_size", spec.vocab_size)
    try:
        model = ModelConfig(**model_cfg)
        merged = dict(config.get(section, {}))
        if seed is not None:
            merged["seed"] = seed
        if cem:
            return default_cem_run(model=model, **merged)
        return RunConfig(model=model, **merged)
    except TypeError as exc:
        raise DataError(f"bad {section} config: {exc}") from exc


def _apply_hypotheses(corpus: Corpus, run: RunConfig) -> None:
    if run.hyp_mode == "field":
        if not corpus.with_hypotheses():
            raise DataError(
                "corpus carries no hypotheses; use --hyp-mode corrupt or file"
            )
    elif run.hyp_mode == "corrupt":
        sub, dele, ins = run.hyp_rates
        attach_corrupted_hypotheses(corpus, sub, dele, ins, run.hyp_seed)
    elif run.hyp_mode == "file":
        if not run.hyp_file:
            raise DataError("--hyp-mode file needs --hyp-file")
        attach_hypotheses_from_file(corpus, run.hyp_file)
    else:
        raise DataError(f"unknown hypothesis mode {run.hyp_mode!r}")


def _add_hyp_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--hyp-mode", choices=("field", "corrupt", "file"), default=None)
    p.add_argument("--hyp-rates", default=None,
                   help="sub,del,ins corruption rates, e.g. 0.2,0.06,0.04")
    p.add_argument("--hyp-file", default=None, help="decode JSONL with hypotheses")
    p.add_argument("--hyp-seed", type=int, default=None)


def _hyp_overrides(args) -> dict:
    out = {}
    if args.hyp_mode is not None:
        out["hyp_mode"] = args.hyp_mode
    if args.hyp_rates is not None:
        parts = [float(v) for v in args.hyp_rates.split(",")]
        if len(parts) != 3:
            raise UsageError("--hyp-rates wants three comma-separated rates")
        out["hyp_rates"] = tuple(parts)
    if args.hyp_file is not None:
        out["hyp_file"] = args.hyp_file
        out.setdefault("hyp_mode", "file")
    if args.hyp_seed is not None:
        out["hyp_seed"] = args.hyp_seed
    return out


def _write_history(out: Path, history: list) -> None:
    keys = ["step", "loss", "lr", "dev_cer", "dev_count_gap", "dev_bce", "skipped"]
    used = [k for k in keys if any(k in h for h in history)]
    write_tsv(out, used, ([h.get(k) for k in used] for h in history))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cifconf", description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    parser.add_argument("--config", default=None, help="JSON config file")
    parser.add_argument("--out", default=None, help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate train/dev/test corpora")
    p.add_argument("--n-dev", type=int, default=150)
    p.add_argument("--n-test", type=int, default=500)
    p.add_argument("--inline-frames", action="store_true",
                   help="store frame values instead of regeneration seeds")

    p = sub.add_parser("train-asr", help="train the base recognizer")
    p.add_argument("--data", required=True, help="corpus directory from gen-data")

    p = sub.add_parser("decode", help="greedy-decode a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="corpus JSONL")

    p = sub.add_parser("train-cem", help="train a confidence estimator")
    p.add_argument("--base-checkpoint", required=True)
    p.add_argument("--data", required=True, help="training corpus JSONL")
    p.add_argument("--variant", choices=("cif_aligned", "hyp_synchronous"),
                   default=VARIANT_CIF_ALIGNED)
    _add_hyp_flags(p)

    p = sub.add_parser("evaluate", help="score hypotheses and write reports")
    p.add_argument("--base-checkpoint", required=True)
    p.add_argument("--checkpoint", action="append", default=[],
                   help="confidence checkpoint (repeatable)")
    p.add_argument("--data", required=True, help="test corpus JSONL")
    _add_hyp_flags(p)

    p = sub.add_parser("filter-curve", help="recompute filtering curves from saved tables")
    p.add_argument("--utts", action="append", required=True,
                   help="utts_<variant>.tsv from a previous evaluate run (repeatable)")
    p.add_argument("--thresholds", type=int, default=201)

    p = sub.add_parser("case-study", help="per-token score table for one utterance")
    p.add_argument("--base-checkpoint", required=True)
    p.add_argument("--checkpoint", action="append", default=[])
    p.add_argument("--data", required=True)
    p.add_argument("--utt-id", required=True)
    _add_hyp_flags(p)

    p = sub.add_parser("noise-sweep", help="confidence vs noise level")
    p.add_argument("--checkpoint", required=True, help="cif_aligned checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--sigmas", default="0.1,0.2,0.4")
    return parser


def _out_dir(args) -> Path:
    out = Path(args.out if args.out is not None else "out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dispatch(args) -> int:
    config = _load_config(args.config)
    seed = args.seed if args.seed is not None else config.get("seed", 0)
    out = _out_dir(args)

    if args.command == "gen-data":
        spec = _corpus_spec(config)
        for name, n, offset in (
            ("train", spec.n_utts, 0),
            ("dev", args.n_dev, 1),
            ("test", args.n_test, 2),
        ):
            split = CorpusSpec(**{**spec.__dict__, "n_utts": n,
                                  "frames_per_token": spec.frames_per_token,
                                  "utt_len": spec.utt_len})
            corpus = generate_corpus(split, seed + offset, id_prefix=f"{name}-")
            save_corpus(corpus, out / f"{name}.jsonl", inline_frames=args.inline_frames)
            logger.info("wrote %s (%d utterances)", out / f"{name}.jsonl", n)
        return 0

    if args.command == "train-asr":
        data = Path(args.data)
        corpus = load_corpus(data / "train.jsonl")
        dev_path = data / "dev.jsonl"
        dev = load_corpus(dev_path) if dev_path.exists() else None
        run = _run_config(config, "train_asr", corpus.spec, seed, cem=False)
        model, history = train_base(corpus, run, dev)
        save_checkpoint(out / "base.ckpt", model)
        _write_history(out / "train_log.tsv", history)
        plots.save_training_curve(history, out / "figures" / "training.png")
        logger.info("checkpoint written to %s", out / "base.ckpt")
        return 0

    if args.command == "decode":
        model = load_checkpoint(args.checkpoint)
        corpus = load_corpus(args.data)
        pairs, corpus_cer, empties = decode_corpus(model, corpus)
        save_hypotheses(out / "decodes.jsonl", pairs)
        print(f"corpus CER {corpus_cer:.4f} over {len(pairs)} utterances "
              f"({empties} empty decodes)")
        return 0

    if args.command == "train-cem":
        base = load_checkpoint(args.base_checkpoint)
        corpus = load_corpus(args.data)
        run = _run_config(config, "train_cem", corpus.spec, seed, cem=True)
        run = default_cem_run(**{**run.__dict__, "variant": args.variant,
                                 **_hyp_overrides(args)})
        _apply_hypotheses(corpus, run)
        model, history = train_confidence(base, corpus, run)
        path = out / f"cem_{args.variant}.ckpt"
        save_checkpoint(path, model)
        _write_history(out / f"train_log_{args.variant}.tsv", history)
        logger.info("checkpoint written to %s", path)
        return 0

    if args.command == "evaluate":
        base = load_checkpoint(args.base_checkpoint)
        cems = [load_checkpoint(p) for p in args.checkpoint]
        corpus = load_corpus(args.data)
        run = _run_config(config, "train_cem", corpus.spec, seed, cem=True)
        run = default_cem_run(**{**run.__dict__, **_hyp_overrides(args)})
        _apply_hypotheses(corpus, run)
        reports = evaluate(corpus, base, cems, out)
        for variant in sorted(reports):
            r = reports[variant]
            print(f"{variant:16s} AUC {r.auc:.3f}  ECE-U {r.ece_u:.4f}  "
                  f"RMSE {r.rmse_u:.4f}  CER {r.corpus_cer:.4f}")
        return 0

    if args.command == "filter-curve":
        thresholds = equally_spaced(args.thresholds)
        curves = {}
        for path in args.utts:
            variant = Path(path).stem.replace("utts_", "")
            records = read_utt_records(path)
            curve = filter_curve(records, thresholds)
            curves[variant] = {"all": curve, "nodeletion": [], "deletion": []}
            write_tsv(out / f"filter_{variant}.tsv",
                       ("threshold", "n", "error_rate"), curve)
        plots.save_filter_curves(curves, out / "figures" / "filter_curves.png")
        return 0

    if args.command == "case-study":
        base = load_checkpoint(args.base_checkpoint)
        cems = [load_checkpoint(p) for p in args.checkpoint]
        corpus = load_corpus(args.data)
        run = _run_config(config, "train_cem", corpus.spec, seed, cem=True)
        run = default_cem_run(**{**run.__dict__, **_hyp_overrides(args)})
        _apply_hypotheses(corpus, run)
        study = case_study(corpus, args.utt_id, base, cems)
        firing_rows = None
        ca = next((m for m in cems if m.variant == VARIANT_CIF_ALIGNED), None)
        if ca is not None:
            from .cif import firing_trace_rows

            utt = corpus.by_id(args.utt_id)
            _, _, firing = ca.fire(ca.encode(utt.frames))
            firing_rows = firing_trace_rows(firing)
        write_case_study(out, study, firing_rows)
        print(format_case_study(study))
        return 0

    if args.command == "noise-sweep":
        model = load_checkpoint(args.checkpoint)
        corpus = load_corpus(args.data)
        sigmas = sorted(float(v) for v in args.sigmas.split(","))
        rows = noise_sweep(model, corpus, sigmas, out)
        for r in rows:
            print(f"sigma {r['sigma']:.3f}  CER {r['cer']:.4f}  "
                  f"conf(ref) {r['avg_conf_gt']}  conf(decode) {r['avg_conf_hyp']}")
        return 0

    raise UsageError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _dispatch(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 3
    except CifconfError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
