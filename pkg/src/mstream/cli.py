"""Command-line pipeline: synth, train, train-lm, decode, score, corrupt.

Every command is deterministic given its flags (all randomness is seeded).
Machine-readable output is JSON; decode writes ``utt_id<TAB>text`` files and
optional per-utterance attention-dump JSON.

Exit codes: 0 success, 2 usage or configuration, 3 data or format,
4 numeric divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from mstream import autograd as ag
from mstream.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from mstream.data import (
    GRAMMARS,
    Utterance,
    Vocabulary,
    corrupt_features,
    read_features,
    read_manifest,
    save_corpus,
    synth_corpus,
    write_features,
    write_manifest,
)
from mstream.encoder import EncoderConfig
from mstream.errors import DataFormatError, DivergenceError
from mstream.lm import LmConfig, RnnLm, lm_train
from mstream.metrics import read_trn, score_corpus, write_trn
from mstream.model import ModelConfig, MultiStreamModel
from mstream.search import dump_attention, joint_beam_search
from mstream.training import TrainConfig, train

USAGE_EXIT = 2
DATA_EXIT = 3
DIVERGED_EXIT = 4


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------- config ---

_MODEL_KEYS = {"streams", "encoder", "attention_dim", "decoder_cells", "embed_dim"}
_ENCODER_KEYS = {"kind", "layers", "cells", "projection", "subsample", "conv_channels"}
_TRAIN_KEYS = {"ctc_weight", "lr", "epochs", "batch_size", "seed", "grad_clip",
               "lr_decay", "dev_beam", "dev_ctc_weight", "stop_dev_cer"}
_DECODE_KEYS = {"ctc_weight", "lm_weight", "beam"}
_LM_KEYS = {"embed_dim", "cells", "lr", "epochs", "batch_size", "seed", "grad_clip"}


def _check_keys(section: dict, allowed: set, where: str) -> None:
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise UsageError(f"unknown config key(s) in {where}: {', '.join(unknown)}")


def load_run_config(path) -> dict:
    """Parse and validate the run-config JSON (unknown keys are rejected)."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{path}: invalid JSON: {e}") from e
    _check_keys(doc, {"model", "training", "decode", "lm", "paths"}, "config")
    for key in ("model", "training"):
        if key not in doc:
            raise UsageError(f"config is missing required key: {key}")
    _check_keys(doc["model"], _MODEL_KEYS, "model")
    _check_keys(doc["model"].get("encoder", {}), _ENCODER_KEYS, "model.encoder")
    _check_keys(doc["training"], _TRAIN_KEYS, "training")
    _check_keys(doc.get("decode", {}), _DECODE_KEYS, "decode")
    _check_keys(doc.get("lm", {}), _LM_KEYS, "lm")
    if "paths" in doc:
        _check_keys(doc["paths"], {"train", "dev", "out"}, "paths")
    return doc


def _model_config(doc: dict, vocab_size: int, input_dims: tuple[int, ...]) -> ModelConfig:
    m = doc["model"]
    enc = m.get("encoder", {})
    try:
        enc_cfg = EncoderConfig(
            kind=enc.get("kind", "blstm"),
            layers=enc.get("layers", 2),
            cells=enc.get("cells", 32),
            projection=enc.get("projection", 32),
            subsample=tuple(enc.get("subsample", (2, 2))),
            conv_channels=tuple(enc.get("conv_channels", (4, 8))),
        )
        return ModelConfig(
            vocab_size=vocab_size,
            n_streams=m.get("streams", len(input_dims)),
            input_dims=input_dims,
            encoder=enc_cfg,
            att_dim=m.get("attention_dim", 32),
            dec_cells=m.get("decoder_cells", 30),
            embed_dim=m.get("embed_dim", 16),
        )
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad model config: {e}") from e


def _train_config(doc: dict) -> TrainConfig:
    try:
        return TrainConfig(**doc["training"])
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad training config: {e}") from e


# -------------------------------------------------------------- commands ---

def cmd_synth(args) -> int:
    grammar = GRAMMARS.get(args.task)
    if grammar is None:
        raise UsageError(f"unknown task {args.task!r}; choose from {sorted(GRAMMARS)}")
    if args.streams < 1:
        raise UsageError("--streams must be >= 1")
    if args.utts < 1:
        raise UsageError("--utts must be >= 1")
    if args.sigma < 0:
        raise UsageError("--sigma must be >= 0")
    grammar = dataclasses.replace(grammar, sigma=args.sigma, sigma_jitter=args.sigma_jitter)
    utts = synth_corpus(grammar, args.utts, args.streams, args.seed)
    manifest = save_corpus(args.out, utts, grammar.vocabulary())
    print(json.dumps({"manifest": str(manifest), "utterances": len(utts),
                      "streams": args.streams}))
    return 0


def cmd_train(args) -> int:
    doc = load_run_config(args.config)
    paths = doc.get("paths", {})
    train_manifest = args.train or paths.get("train")
    dev_manifest = args.dev or paths.get("dev")
    out_dir = args.out or paths.get("out")
    if not train_manifest or not out_dir:
        raise UsageError("need --train and --out (flags or config paths)")
    vocab_path = args.vocab or (Path(train_manifest).parent / "vocab.txt")
    vocab = Vocabulary.load(vocab_path)
    corpus = read_manifest(train_manifest, vocab)
    dev = read_manifest(dev_manifest, vocab) if dev_manifest else []
    if not corpus:
        raise UsageError(f"{train_manifest}: no utterances")
    input_dims = tuple(s.D for s in corpus[0].streams)
    model_cfg = _model_config(doc, len(vocab), input_dims)
    train_cfg = _train_config(doc)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = train(corpus, dev, model_cfg, train_cfg,
                   warn=lambda m: print(m, file=sys.stderr))
    with open(out / "train_log.jsonl", "w", encoding="utf-8") as fh:
        for row in result.log:
            fh.write(json.dumps(row) + "\n")
    config = {"kind": "asr", "model": model_cfg.to_dict(), "vocab": vocab.tokens,
              "decode": doc.get("decode", {})}
    save_checkpoint(out / "model.msck", result.params, config, result.norm)
    if result.diverged:
        raise DivergenceError("training loss became non-finite; "
                              "last good checkpoint written")
    print(json.dumps({"checkpoint": str(out / "model.msck"),
                      "best_epoch": result.best_epoch,
                      "final_dev_cer": result.log[-1]["dev_cer"] if result.log else None}))
    return 0


def cmd_train_lm(args) -> int:
    doc = load_run_config(args.config) if args.config else {"model": {}, "training": {}}
    vocab_path = args.vocab or (Path(args.train).parent / "vocab.txt")
    vocab = Vocabulary.load(vocab_path)
    corpus = read_manifest(args.train, vocab)
    if not corpus:
        raise UsageError(f"{args.train}: no utterances")
    lm_cfg = LmConfig(vocab_size=len(vocab), **doc.get("lm", {}))
    params, log = lm_train([u.transcript for u in corpus], lm_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "lm_log.jsonl", "w", encoding="utf-8") as fh:
        for row in log:
            fh.write(json.dumps(row) + "\n")
    config = {"kind": "lm", "vocab": vocab.tokens,
              "lm": {k: v for k, v in dataclasses.asdict(lm_cfg).items() if k != "vocab_size"}}
    save_checkpoint(out / "lm.msck", params, config)
    print(json.dumps({"checkpoint": str(out / "lm.msck"),
                      "final_perplexity": log[-1]["perplexity"]}))
    return 0


def _load_model(path) -> tuple[MultiStreamModel, Vocabulary, dict]:
    ckpt = load_checkpoint(path)
    if ckpt.config.get("kind") != "asr":
        raise DataFormatError(f"{path}: not a recognizer checkpoint")
    cfg = ModelConfig.from_dict(ckpt.config["model"])
    vocab = Vocabulary(ckpt.config["vocab"])
    return MultiStreamModel(cfg, ckpt.params, ckpt.norm), vocab, ckpt.config


def _load_lm(path, vocab: Vocabulary) -> RnnLm:
    ckpt = load_checkpoint(path)
    if ckpt.config.get("kind") != "lm":
        raise DataFormatError(f"{path}: not an LM checkpoint")
    if ckpt.config["vocab"] != vocab.tokens:
        raise DataFormatError(f"{path}: LM vocabulary does not match the recognizer's")
    return RnnLm(ckpt.params)


def cmd_decode(args) -> int:
    model, vocab, config = _load_model(args.model)
    decode_defaults = config.get("decode", {})
    ctc_weight = args.ctc_weight if args.ctc_weight is not None \
        else decode_defaults.get("ctc_weight", 0.3)
    lm_weight = args.lm_weight if args.lm_weight is not None \
        else decode_defaults.get("lm_weight", 0.0)
    beam = args.beam if args.beam is not None else decode_defaults.get("beam", 8)
    lm = _load_lm(args.lm, vocab) if args.lm else None
    if lm_weight != 0.0 and lm is None:
        raise UsageError("--lm-weight is set but no --lm checkpoint given")
    utts = read_manifest(args.manifest, vocab)

    dump_dir = Path(args.dump_attention) if args.dump_attention else None
    if dump_dir:
        dump_dir.mkdir(parents=True, exist_ok=True)

    def decode_one(utt: Utterance):
        results = joint_beam_search(model, utt, beam=beam, ctc_weight=ctc_weight,
                                    lm_weight=lm_weight, lm=lm)
        best = results[0]
        record = None
        if dump_dir and best.tokens:
            record = dump_attention(model, utt, best.tokens, vocab)
        return utt.id, best, record

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            decoded = list(pool.map(decode_one, utts))
    else:
        decoded = [decode_one(u) for u in utts]

    hyps: dict[str, str] = {}
    for utt_id, best, record in decoded:  # manifest order regardless of workers
        hyps[utt_id] = vocab.decode(best.tokens)
        if best.truncated:
            print(f"warning: {utt_id}: no finished hypothesis within the length "
                  f"cap; emitting best unfinished", file=sys.stderr)
        if record is not None:
            with open(dump_dir / f"{utt_id}.attention.json", "w", encoding="utf-8") as fh:
                json.dump(record, fh)
    write_trn(args.out, hyps)
    print(json.dumps({"hyp": str(args.out), "utterances": len(hyps),
                      "ctc_weight": ctc_weight, "lm_weight": lm_weight, "beam": beam}))
    return 0


def cmd_score(args) -> int:
    refs = read_trn(args.ref)
    hyps = read_trn(args.hyp)
    report = score_corpus(refs, hyps, unit=args.unit)
    print(json.dumps(report.to_dict()))
    return 0


def cmd_corrupt(args) -> int:
    if args.sigma < 0:
        raise UsageError("--sigma must be >= 0")
    src = Path(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    with open(src, encoding="utf-8") as fh:
        records = [json.loads(line) for line in fh if line.strip()]
    for rec in records:
        if not 0 <= args.stream < len(rec["streams"]):
            raise UsageError(f"--stream {args.stream} out of range for {rec['id']}")
        new_paths = []
        for s, rel in enumerate(rec["streams"]):
            feats = read_features(src.parent / rel)
            if s == args.stream and args.sigma > 0:
                feats = corrupt_features(feats.frames, rec["id"], s, args.sigma, args.seed)
            write_features(out / rel, feats)
            new_paths.append(rel)
        entries.append({"id": rec["id"], "streams": new_paths, "text": rec["text"]})
    vocab_src = src.parent / "vocab.txt"
    if vocab_src.exists():
        (out / "vocab.txt").write_bytes(vocab_src.read_bytes())
    manifest = out / "manifest.jsonl"
    write_manifest(manifest, entries)
    print(json.dumps({"manifest": str(manifest), "stream": args.stream,
                      "sigma": args.sigma}))
    return 0


# ------------------------------------------------------------------ main ---

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mstream",
        description="Multi-stream recognizer: synthesize data, train, decode, score.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic multi-stream corpus")
    p.add_argument("--task", default="letters6", help="grammar preset name")
    p.add_argument("--streams", type=int, default=2)
    p.add_argument("--utts", type=int, default=100)
    p.add_argument("--sigma", type=float, default=0.0, help="feature noise level")
    p.add_argument("--sigma-jitter", action="store_true",
                   help="draw each (utterance, stream) noise level from [0, sigma]")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train a multi-stream model")
    p.add_argument("--config", required=True, help="run-config JSON")
    p.add_argument("--train", help="training manifest (or config paths.train)")
    p.add_argument("--dev", help="validation manifest")
    p.add_argument("--vocab", help="vocabulary file (default: vocab.txt beside --train)")
    p.add_argument("--out", help="output directory (or config paths.out)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("train-lm", help="train the character LM")
    p.add_argument("--config", help="run-config JSON with an 'lm' section")
    p.add_argument("--train", required=True, help="manifest providing transcripts")
    p.add_argument("--vocab")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train_lm)

    p = sub.add_parser("decode", help="joint beam decoding of a manifest")
    p.add_argument("--model", required=True, help="model checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--beam", type=int, default=None)
    p.add_argument("--ctc-weight", type=float, default=None)
    p.add_argument("--lm", help="LM checkpoint for shallow fusion")
    p.add_argument("--lm-weight", type=float, default=None)
    p.add_argument("--out", required=True, help="hypothesis file (utt_id TAB text)")
    p.add_argument("--dump-attention", help="directory for attention-dump JSON")
    p.add_argument("--jobs", type=int, default=1,
                   help="worker threads across utterances")
    p.set_defaults(fn=cmd_decode)

    p = sub.add_parser("score", help="CER/WER scoring of ref vs hyp files")
    p.add_argument("--ref", required=True)
    p.add_argument("--hyp", required=True)
    p.add_argument("--unit", choices=("char", "word"), default="char")
    p.set_defaults(fn=cmd_score)

    p = sub.add_parser("corrupt", help="add Gaussian noise to one stream")
    p.add_argument("--manifest", required=True)
    p.add_argument("--stream", type=int, required=True)
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_corrupt)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return USAGE_EXIT
    except (DataFormatError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return DATA_EXIT
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return DIVERGED_EXIT


if __name__ == "__main__":
    sys.exit(main())
