"""Command-line surface: gen-data, train, decode, score, analyze, avg-ckpt.

Logs go to stderr, data products go to files (or stdout for reports).
Exit codes: 0 success, 1 I/O failure, 2 config or compatibility error,
3 numeric failure during training.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .container import ContainerError
from .data import ManifestError, gen_corpus, load_features, read_manifest
from .decoding import (
    DecodeConfig,
    decode_corpus,
    measure_rtf,
    read_hypotheses,
    write_hypotheses,
)
from .model import average_checkpoints, load_checkpoint, save_checkpoint
from .scoring import (
    error_breakdown,
    format_breakdown_table,
    mcnemar,
    paired_ttest,
    per_score,
    report_to_json,
    score_corpus,
)
from .training import NumericError, train
from .vocab import PinyinTable, Vocabulary, tokenize

log = logging.getLogger("csnar")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="csnar", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic corpus")
    _add_common(p)
    p.add_argument("--out", default=None, help="output dir (default: config paths.data_dir)")

    p = sub.add_parser("train", help="train a model")
    _add_common(p)
    p.add_argument("--data-dir", default=None)
    p.add_argument("--work-dir", default=None)

    p = sub.add_parser("decode", help="decode a manifest with a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="hypothesis JSONL path")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--p-thres", type=float, default=None, help="override decode.p_thres")
    p.add_argument("--iterations", type=int, default=None, help="override decode.iterations")

    p = sub.add_parser("score", help="score hypotheses against a reference manifest")
    p.add_argument("--refs", required=True, help="reference manifest JSONL")
    p.add_argument("--hyps", required=True, help="hypothesis JSONL")
    p.add_argument("--data-dir", required=True, help="dir with vocab and pinyin table files")
    p.add_argument("--format", choices=("json", "table"), default="json")
    p.add_argument("--out", default=None, help="write the report here instead of stdout")

    p = sub.add_parser("analyze", help="compare two systems with significance tests")
    p.add_argument("--refs", required=True)
    p.add_argument("--hyps-a", required=True)
    p.add_argument("--hyps-b", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out", default=None)

    p = sub.add_parser("avg-ckpt", help="average the best k checkpoints")
    p.add_argument("--dir", required=True, help="checkpoint directory")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--out", required=True)
    return parser


def _load_refs(manifest_path) -> dict[str, list[str]]:
    return {r.utt_id: tokenize(r.text) for r in read_manifest(manifest_path, check_files=False)}


def _hyp_tokens(path) -> dict[str, list[str]]:
    return {u: rec["tokens"] for u, rec in read_hypotheses(path).items()}


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, args.seed)
    out_dir = Path(args.out or cfg.paths.data_dir)
    corpus = gen_corpus(cfg.data, out_dir)
    sizes = {k: len(v) for k, v in corpus.manifests.items()}
    log.info(
        "wrote %s: %s utterances, |char vocab|=%d, |pinyin vocab|=%d",
        out_dir,
        sizes,
        len(corpus.char_vocab),
        len(corpus.pinyin_vocab),
    )
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.seed)
    data_dir = Path(args.data_dir or cfg.paths.data_dir)
    work_dir = Path(args.work_dir or cfg.paths.work_dir)
    work_dir.mkdir(parents=True, exist_ok=True)
    result = train(cfg, data_dir, work_dir)
    best = min(result.history, key=lambda h: h["val_ter"])
    log.info(
        "finished %d epochs; best val TER %.2f%% at epoch %d",
        len(result.history),
        100.0 * best["val_ter"],
        best["epoch"],
    )
    return 0


def cmd_decode(args) -> int:
    cfg = load_config(args.config, args.seed)
    bundle, _ = load_checkpoint(args.checkpoint)
    decode_cfg = cfg.decode
    if cfg.architecture != bundle.architecture and cfg.decode.architecture != "ctc_only":
        decode_cfg = DecodeConfig(
            p_thres=cfg.decode.p_thres,
            iterations=cfg.decode.iterations,
            architecture=bundle.architecture,
            mask_source=cfg.decode.mask_source,
        )
    if args.p_thres is not None or args.iterations is not None:
        decode_cfg = DecodeConfig(
            p_thres=args.p_thres if args.p_thres is not None else decode_cfg.p_thres,
            iterations=args.iterations if args.iterations is not None else decode_cfg.iterations,
            architecture=decode_cfg.architecture,
            mask_source=decode_cfg.mask_source,
        )
    records = read_manifest(args.manifest)
    utts = [(r.utt_id, load_features(args.manifest, r)) for r in records]
    hyps = decode_corpus(utts, bundle, decode_cfg, workers=args.workers)
    write_hypotheses(args.out, hyps)
    log.info("decoded %d utterances, RTF %.4f", len(hyps), measure_rtf(hyps))
    return 0


def _scoring_context(data_dir):
    data_dir = Path(data_dir)
    vocab = Vocabulary.load(data_dir / "char_vocab.tsv")
    table = PinyinTable.load(data_dir / "pinyin_table.tsv")
    return vocab, table


def cmd_score(args) -> int:
    vocab, table = _scoring_context(args.data_dir)
    refs = _load_refs(args.refs)
    hyps = _hyp_tokens(args.hyps)
    report = score_corpus(refs, hyps, vocab)
    per, _ = per_score(refs, hyps, table, vocab)
    if args.format == "json":
        text = report_to_json(report, per)
    else:
        text = format_breakdown_table({"system": error_breakdown(report, per)})
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return 0


def cmd_analyze(args) -> int:
    vocab, table = _scoring_context(args.data_dir)
    refs = _load_refs(args.refs)
    hyps_a = _hyp_tokens(args.hyps_a)
    hyps_b = _hyp_tokens(args.hyps_b)
    rep_a = score_corpus(refs, hyps_a, vocab)
    rep_b = score_corpus(refs, hyps_b, vocab)
    per_a, _ = per_score(refs, hyps_a, table, vocab)
    per_b, _ = per_score(refs, hyps_b, table, vocab)
    utts = sorted(refs)
    flags_a = rep_a.sentence_flags()
    flags_b = rep_b.sentence_flags()
    errs_a = rep_a.utterance_error_rates()
    errs_b = rep_b.utterance_error_rates()
    payload = {
        "system_a": error_breakdown(rep_a, per_a),
        "system_b": error_breakdown(rep_b, per_b),
        "ter_delta": 100.0 * (rep_b.ter - rep_a.ter),
        "mcnemar_p": mcnemar([flags_a[u] for u in utts], [flags_b[u] for u in utts]),
        "ttest_p": paired_ttest([errs_a[u] for u in utts], [errs_b[u] for u in utts]),
    }
    text = json.dumps(payload, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return 0


def cmd_avg_ckpt(args) -> int:
    ckpt_dir = Path(args.dir)
    paths = sorted(ckpt_dir.glob("*.mccs"))
    if not paths:
        raise ManifestError(f"no checkpoints under {ckpt_dir}")
    bundle = average_checkpoints(paths, args.k)
    save_checkpoint(bundle, args.out, meta={"averaged_from": [p.name for p in paths]})
    log.info("averaged %d checkpoints into %s", min(args.k, len(paths)), args.out)
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "decode": cmd_decode,
    "score": cmd_score,
    "analyze": cmd_analyze,
    "avg-ckpt": cmd_avg_ckpt,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except NumericError as e:
        log.error("numeric failure: %s", e)
        return 3
    except (ConfigError, ValueError) as e:
        log.error("config error: %s", e)
        return 2
    except (ContainerError, ManifestError, OSError) as e:
        log.error("i/o error: %s", e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
