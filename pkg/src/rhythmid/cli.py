"""Command-line interface: ``rhythmid <command> [<action>] [flags]``.

Every command writes its outputs atomically and prints one JSON summary line
on success. Usage errors exit with status 2, runtime errors with status 1.
The default seed can be overridden with the ``RHYTHMID_SEED`` environment
variable.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from rhythmid import __version__, checkpoint, facs, synthgen
from rhythmid._io import atomic_write_text
from rhythmid.fusion import FusionAssembly, XVectorBaseline, load_xvectors, preflight, write_xvectors
from rhythmid.gradcheck import TOLERANCE, run_suite
from rhythmid.metrics import MetricsReport
from rhythmid.rhythm_encoder import RhythmEncoderConfig, init_model
from rhythmid.training import (
    BaselineTask,
    Example,
    FusionTask,
    RhythmTask,
    TrainConfig,
    derive_rng,
    evaluate,
    load_task,
    make_examples,
    rhythm_model_from_checkpoint,
    speaker_table,
    train,
)

SEED_ENV = "RHYTHMID_SEED"
log = logging.getLogger("rhythmid")


def _default_seed() -> int:
    value = os.environ.get(SEED_ENV)
    if value is None:
        return 0
    try:
        return int(value)
    except ValueError:
        raise SystemExit(f"rhythmid: {SEED_ENV} must be an integer, got {value!r}") from None


def _emit(summary: dict) -> None:
    print(json.dumps(summary, sort_keys=True))


# ---------------------------------------------------------------------------
# facs / vocab
# ---------------------------------------------------------------------------


def _parse(path: str) -> facs.ParseResult:
    result = facs.parse_alignment_file(path)
    for lineno, utt_id, reason in result.discarded_ids:
        log.warning("%s:%d: discarded %s (%s)", path, lineno, utt_id or "<unknown>", reason)
    return result


def cmd_vocab_build(args) -> dict:
    parsed = _parse(args.alignments)
    vocab = facs.build_vocabulary(parsed.utterances)
    atomic_write_text(args.out, vocab.to_text())
    return {"vocab": str(args.out), "size": len(vocab), "sha256": vocab.digest(),
            "discarded": dict(parsed.discards)}


def cmd_facs_encode(args) -> dict:
    parsed = _parse(args.alignments)
    vocab = facs.load_vocabulary(args.vocab)
    seqs = facs.encode_corpus(parsed.utterances, vocab, args.frame_ms)
    facs.write_facs_corpus(args.out, seqs, vocab)
    return {"out": str(args.out), "utterances": len(seqs), "frames": int(sum(len(s) for s in seqs)),
            "frame_ms": args.frame_ms, "discarded": dict(parsed.discards)}


def cmd_facs_decode(args) -> dict:
    vocab = facs.load_vocabulary(args.vocab)
    lines = []
    with open(args.facs, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{args.facs}:{lineno}: expected utt_id<TAB>speaker_id<TAB>facs")
            runs = facs.facs_decode(parts[2], vocab)
            lines.append(json.dumps({"utt_id": parts[0], "speaker": parts[1], "runs": runs}, ensure_ascii=False))
    atomic_write_text(args.out, "".join(line + "\n" for line in lines))
    return {"out": str(args.out), "utterances": len(lines)}


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def cmd_synth_gen(args) -> dict:
    rng = np.random.default_rng(args.seed)
    profiles = synthgen.gen_profiles(args.n_speakers, separation=args.separation, rng=rng)
    total = args.utts_per_speaker + args.test_utts_per_speaker
    utts = synthgen.gen_corpus(profiles, n_utts_per_speaker=total, variability=args.variability,
                               rng=rng, frame_ms=args.frame_ms)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_part = [u for u in utts if int(u.utt_id.rsplit("-", 1)[1]) < args.utts_per_speaker]
    test_part = [u for u in utts if int(u.utt_id.rsplit("-", 1)[1]) >= args.utts_per_speaker]
    facs.write_alignment_file(out / "train.jsonl", train_part)
    summary = {"out_dir": str(out), "speakers": len(profiles), "train_utterances": len(train_part)}
    if test_part:
        facs.write_alignment_file(out / "test.jsonl", test_part)
        summary["test_utterances"] = len(test_part)
    if args.xvec_dim > 0:
        table = synthgen.gen_xvectors(profiles, utts, args.informativeness, args.xvec_dim, rng)
        write_xvectors(out / "xvectors.tsv", table)
        summary["xvec_dim"] = args.xvec_dim
    return summary


# ---------------------------------------------------------------------------
# train / eval
# ---------------------------------------------------------------------------


def _read_examples(path: str, vocab: facs.Vocabulary | None, speakers: list[str] | None,
                   max_tokens: int | None) -> tuple[list[Example], list[str]]:
    """Examples from a FACS corpus file. Without a vocabulary only ids and speakers are read."""
    if vocab is not None:
        seqs = facs.read_facs_corpus(path, vocab)
        if speakers is None:
            speakers = speaker_table([s.speaker_id for s in seqs])
        return make_examples(seqs, speakers, max_tokens), speakers
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            if len(parts) >= 2 and parts[0]:
                rows.append((parts[0], parts[1]))
    if speakers is None:
        speakers = speaker_table([s for _, s in rows])
    index = {s: i for i, s in enumerate(speakers)}
    missing = sorted({s for _, s in rows if s not in index})
    if missing:
        raise ValueError(f"speakers not in the model's speaker table: {', '.join(missing[:10])}")
    return [Example(u, s, index[s]) for u, s in rows], speakers


def _encoder_config(args, vocab: facs.Vocabulary, n_speakers: int) -> RhythmEncoderConfig:
    return RhythmEncoderConfig(vocab_size=len(vocab), n_speakers=n_speakers, d_model=args.d_model,
                               n_heads=args.n_heads, n_layers=args.n_layers, ffn_dim=args.ffn_dim,
                               attn_window_radius=args.radius, dropout_rate=args.dropout, max_len=args.max_tokens)


def _train_config(args, mode: str) -> TrainConfig:
    return TrainConfig(mode=mode, epochs=args.epochs, batch_size=args.batch_size, lr0=args.lr0,
                       eta_min=args.eta_min, val_fraction=args.val_fraction, early_stop_patience=args.patience,
                       max_tokens=args.max_tokens, seed=args.seed, grad_clip=args.grad_clip,
                       weight_decay=args.weight_decay)


def _run_summary(run, run_dir) -> dict:
    return {"run_dir": str(run_dir), "mode": run.config.mode, "steps": run.steps, "epochs_run": len(run.val_log),
            "best_epoch": run.best_epoch, "best_val_balanced_accuracy": run.best_score,
            "stop_reason": run.stop_reason, "n_train": run.n_train, "n_val": run.n_val}


def cmd_train_rhythm(args) -> dict:
    vocab = facs.load_vocabulary(args.vocab)
    data, speakers = _read_examples(args.facs, vocab, None, args.max_tokens)
    cfg = _train_config(args, "rhythm_only")
    model = init_model(_encoder_config(args, vocab, len(speakers)), derive_rng(cfg.seed, "init"))
    task = RhythmTask(model, speakers, vocab.digest())
    return _run_summary(train(cfg, data, task, args.run_dir), args.run_dir)


def cmd_train_fusion(args) -> dict:
    vocab = facs.load_vocabulary(args.vocab)
    table = load_xvectors(args.xvectors)
    data, speakers = _read_examples(args.facs, vocab, None, args.max_tokens)
    preflight([ex.utt_id for ex in data], table)
    cfg = _train_config(args, "fusion")
    init = derive_rng(cfg.seed, "init")
    if args.rhythm_checkpoint:
        params, header = checkpoint.load(args.rhythm_checkpoint)
        if header.get("kind") != "rhythm":
            raise ValueError(f"{args.rhythm_checkpoint} is not a rhythm checkpoint")
        if header.get("vocab_sha256") not in ("", vocab.digest()):
            raise ValueError("rhythm checkpoint was trained with a different vocabulary")
        rhythm = rhythm_model_from_checkpoint(params, header)
    else:
        log.warning("no --rhythm-checkpoint given: the rhythm encoder starts from random weights")
        rhythm = init_model(_encoder_config(args, vocab, len(speakers)), init)
    assembly = FusionAssembly.create(rhythm, table.dim, len(speakers), init, args.d_proj, args.fuse)
    task = FusionTask(assembly, table, speakers, vocab.digest())
    return _run_summary(train(cfg, data, task, args.run_dir), args.run_dir)


def cmd_train_baseline(args) -> dict:
    table = load_xvectors(args.xvectors)
    data, speakers = _read_examples(args.facs, None, None, None)
    cfg = _train_config(args, "xvector_baseline")
    task = BaselineTask(XVectorBaseline.create(table.dim, len(speakers), derive_rng(cfg.seed, "init")),
                        table, speakers)
    return _run_summary(train(cfg, data, task, args.run_dir), args.run_dir)


def cmd_eval(args) -> dict:
    table = load_xvectors(args.xvectors) if args.xvectors else None
    task = load_task(args.checkpoint, table)
    vocab = None
    if not isinstance(task, BaselineTask):
        if not args.vocab:
            raise ValueError("--vocab is required for rhythm and fusion checkpoints")
        vocab = facs.load_vocabulary(args.vocab)
        if task.vocab_sha256 and task.vocab_sha256 != vocab.digest():
            raise ValueError("vocabulary does not match the one the checkpoint was trained with")
    max_tokens = None
    if isinstance(task, RhythmTask):
        max_tokens = task.model.config.max_len
    elif isinstance(task, FusionTask):
        max_tokens = task.assembly.rhythm.config.max_len
    data, _ = _read_examples(args.facs, vocab, task.speakers, max_tokens)
    if table is not None:
        preflight([ex.utt_id for ex in data], table)
    cm = evaluate(task, data)
    report = MetricsReport.from_confusion(cm)
    if args.out:
        atomic_write_text(args.out, report.to_json() + "\n")
    if args.confusion_csv:
        atomic_write_text(args.confusion_csv, cm.to_csv())
    return json.loads(report.to_json())


def cmd_gradcheck(args) -> dict:
    worst = run_suite(range(args.seeds), args.n_layers)
    for name, err in worst.items():
        print(f"{name}\t{err:.3e}", file=sys.stderr)
    passed = all(err < TOLERANCE for err in worst.values())
    return {"max_rel_error": worst, "tolerance": TOLERANCE, "seeds": args.seeds, "passed": passed}


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


class _Formatter(argparse.ArgumentDefaultsHelpFormatter):
    pass


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("encoder")
    g.add_argument("--d-model", type=int, default=128, help="embedding and model width")
    g.add_argument("--n-heads", type=int, default=8, help="attention heads per layer")
    g.add_argument("--n-layers", type=int, default=4, help="transformer layers (4 for short clips, 6 for long reads)")
    g.add_argument("--ffn-dim", type=int, default=None, help="feed-forward width (None means 4 * d-model)")
    g.add_argument("--radius", type=int, default=2, help="local attention radius in tokens")
    g.add_argument("--dropout", type=float, default=0.1, help="dropout rate")


def _add_train_flags(p: argparse.ArgumentParser, epochs: int, lr0: float) -> None:
    p.add_argument("--facs", required=True, help="FACS corpus file (utt_id, speaker, facs per line)")
    p.add_argument("--run-dir", required=True, help="output directory for logs and best.ckpt")
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int, default=epochs, help="maximum epochs")
    g.add_argument("--batch-size", type=int, default=32, help="utterances per batch")
    g.add_argument("--lr0", type=float, default=lr0, help="initial learning rate of the cosine schedule")
    g.add_argument("--eta-min", type=float, default=0.0, help="final learning rate of the cosine schedule")
    g.add_argument("--val-fraction", type=float, default=0.1, help="fraction of utterances held out for validation")
    g.add_argument("--patience", type=int, default=15, help="epochs without improvement before stopping")
    g.add_argument("--max-tokens", type=int, default=512, help="truncate FACS sequences to this many tokens")
    g.add_argument("--grad-clip", type=float, default=None, help="global gradient norm clip (None disables)")
    g.add_argument("--weight-decay", type=float, default=0.0, help="L2 weight decay added to gradients")
    g.add_argument("--seed", type=int, default=_default_seed(), help=f"run seed (env {SEED_ENV} overrides the default)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rhythmid", description="Speaker identification from speech rhythm.",
                                     formatter_class=_Formatter)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    top = parser.add_subparsers(dest="command", required=True, metavar="command")

    p_facs = top.add_parser("facs", help="encode or decode FACS corpora", formatter_class=_Formatter)
    facs_sub = p_facs.add_subparsers(dest="action", required=True, metavar="action")
    p = facs_sub.add_parser("encode", help="alignments -> FACS corpus", formatter_class=_Formatter)
    p.add_argument("--alignments", required=True, help="alignment JSON-lines file")
    p.add_argument("--vocab", required=True, help="vocabulary TSV")
    p.add_argument("--out", required=True, help="output FACS corpus file")
    p.add_argument("--frame-ms", type=int, default=facs.DEFAULT_FRAME_MS, help="frame length in milliseconds")
    p.set_defaults(func=cmd_facs_encode)
    p = facs_sub.add_parser("decode", help="FACS corpus -> run-length JSON lines", formatter_class=_Formatter)
    p.add_argument("--facs", required=True, help="FACS corpus file")
    p.add_argument("--vocab", required=True, help="vocabulary TSV")
    p.add_argument("--out", required=True, help="output JSON-lines file")
    p.set_defaults(func=cmd_facs_decode)

    p_vocab = top.add_parser("vocab", help="build a symbol vocabulary", formatter_class=_Formatter)
    vocab_sub = p_vocab.add_subparsers(dest="action", required=True, metavar="action")
    p = vocab_sub.add_parser("build", help="alignments -> vocabulary TSV", formatter_class=_Formatter)
    p.add_argument("--alignments", required=True, help="alignment JSON-lines file")
    p.add_argument("--out", required=True, help="output vocabulary TSV")
    p.set_defaults(func=cmd_vocab_build)

    p_synth = top.add_parser("synth", help="synthetic corpora", formatter_class=_Formatter)
    synth_sub = p_synth.add_subparsers(dest="action", required=True, metavar="action")
    p = synth_sub.add_parser("gen", help="generate alignments and x-vectors", formatter_class=_Formatter)
    p.add_argument("--out-dir", required=True, help="writes train.jsonl, test.jsonl and xvectors.tsv here")
    p.add_argument("--n-speakers", type=int, default=10, help="number of speakers")
    p.add_argument("--utts-per-speaker", type=int, default=200, help="training utterances per speaker")
    p.add_argument("--test-utts-per-speaker", type=int, default=0, help="held-out utterances per speaker")
    p.add_argument("--separation", type=float, default=1.5, help="spread of speaker duration signatures")
    p.add_argument("--variability", type=float, default=0.25, help="intra-speaker variability level")
    p.add_argument("--xvec-dim", type=int, default=64, help="x-vector dimension (0 disables x-vectors)")
    p.add_argument("--informativeness", type=float, default=0.9, help="weight of the speaker center in x-vectors")
    p.add_argument("--frame-ms", type=int, default=facs.DEFAULT_FRAME_MS, help="frame grid for segment times")
    p.add_argument("--seed", type=int, default=_default_seed(), help=f"generator seed (env {SEED_ENV})")
    p.set_defaults(func=cmd_synth_gen)

    p_train = top.add_parser("train", help="train a model", formatter_class=_Formatter)
    train_sub = p_train.add_subparsers(dest="action", required=True, metavar="action")
    p = train_sub.add_parser("rhythm", help="rhythm-only encoder", formatter_class=_Formatter)
    p.add_argument("--vocab", required=True, help="vocabulary TSV")
    _add_train_flags(p, epochs=300, lr0=1e-4)
    _add_model_flags(p)
    p.set_defaults(func=cmd_train_rhythm)
    p = train_sub.add_parser("fusion", help="rhythm encoder fused with x-vectors", formatter_class=_Formatter)
    p.add_argument("--vocab", required=True, help="vocabulary TSV")
    p.add_argument("--xvectors", required=True, help="x-vector TSV")
    p.add_argument("--rhythm-checkpoint", default=None,
                   help="pretrained rhythm-only best.ckpt to start from (random init when omitted)")
    p.add_argument("--d-proj", type=int, default=128, help="projection width of each stream")
    p.add_argument("--fuse", choices=("concat", "sum"), default="concat", help="how projected streams are joined")
    _add_train_flags(p, epochs=300, lr0=1e-3)
    _add_model_flags(p)
    p.set_defaults(func=cmd_train_fusion)
    p = train_sub.add_parser("xvec-baseline", help="linear classifier on x-vectors only", formatter_class=_Formatter)
    p.add_argument("--xvectors", required=True, help="x-vector TSV")
    _add_train_flags(p, epochs=150, lr0=1e-3)
    p.set_defaults(func=cmd_train_baseline)

    p = top.add_parser("eval", help="evaluate a checkpoint", formatter_class=_Formatter)
    p.add_argument("--checkpoint", required=True, help="best.ckpt from a training run")
    p.add_argument("--facs", required=True, help="FACS corpus file to score")
    p.add_argument("--vocab", default=None, help="vocabulary TSV (rhythm and fusion checkpoints)")
    p.add_argument("--xvectors", default=None, help="x-vector TSV (fusion and baseline checkpoints)")
    p.add_argument("--out", default=None, help="write the JSON report here")
    p.add_argument("--confusion-csv", default=None, help="write the confusion matrix here")
    p.set_defaults(func=cmd_eval)

    p = top.add_parser("gradcheck", help="finite-difference gradient suite", formatter_class=_Formatter)
    p.add_argument("--seeds", type=int, default=10, help="number of random seeds")
    p.add_argument("--n-layers", type=int, default=2, help="layers of the encoder under test")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        summary = args.func(args)
    except (OSError, ValueError, RuntimeError, KeyError, checkpoint.CheckpointError) as exc:
        print(f"rhythmid: error: {exc}", file=sys.stderr)
        return 1
    _emit(summary)
    if args.func is cmd_gradcheck and not summary["passed"]:
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
