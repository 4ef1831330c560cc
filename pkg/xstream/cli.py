"""Command-line entry point: ``xstream <command> ...``."""

import argparse
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from xstream import __version__
from xstream import data as xdata
from xstream import evaluation as ev
from xstream import geometry
from xstream import search
from xstream.accessors import create_mask_da
from xstream.config import RunConfig, load_run_config
from xstream.core import TransducerModel
from xstream.exceptions import ConfigError, XStreamError
from xstream.trainer import Trainer
from xstream.transducer import Vocab
from xstream.utils import atomic_write_bytes, dumps_line, substream

logger = logging.getLogger("xstream")

LOG_LEVEL_ENV = "XSTREAM_LOG_LEVEL"
EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

def parse_left_context(value: str) -> int | None:
    """``full`` or a non-negative number of chunks."""
    if value.lower() == "full":
        return None
    try:
        chunks = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer or 'full', got {value!r}") from None
    if chunks < 0:
        raise argparse.ArgumentTypeError("left context cannot be negative")
    return chunks

def _non_negative(value: str) -> int:
    n = int(value)
    if n < 0:
        raise argparse.ArgumentTypeError("expected a non-negative integer")
    return n

def _positive(value: str) -> int:
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError("expected a positive integer")
    return n

def configure_logging(verbose: int = 0) -> None:
    if verbose:
        level = logging.DEBUG if verbose > 1 else logging.INFO
    else:
        level = os.environ.get(LOG_LEVEL_ENV, "WARNING").upper()
    logging.basicConfig(
        level=level,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        stream=sys.stderr,
        )
    logging.captureWarnings(True)

def _emit(lines, out: str | None) -> None:
    text = "".join(line + "\n" for line in lines)
    if out is None:
        sys.stdout.write(text)
    else:
        atomic_write_bytes(out, text.encode("utf-8"))

def _require_file(path: str | os.PathLike, what: str) -> Path:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path

def _vocab_for(entries, vocab_size: int) -> Vocab:
    """Synthetic spelling when it covers every text, else the words seen."""
    texts = [e.text or "" for e in entries]
    synthetic = Vocab.synthetic(vocab_size)
    known = set(synthetic.tokens[1:])
    if all(w in known for t in texts for w in t.split()):
        return synthetic
    vocab = Vocab.from_texts(texts)
    if vocab.size != vocab_size:
        raise ConfigError(
            "model.vocab_size",
            f"is {vocab_size} but the manifest spells {vocab.size} tokens (with blank)",
            )
    return vocab

def _load_manifest(path, require_text=True):
    path = _require_file(path, "manifest")
    return xdata.read_manifest(path, require_text=require_text), path.parent

def _mask_from_args(args) -> geometry.MaskSpec:
    if args.full_attention:
        return geometry.MaskSpec.full_attention()
    return geometry.MaskSpec(args.chunk_frames, args.left_context, args.sink_frames)


# Commands

def cmd_synth_data(args) -> int:
    cfg = load_run_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    utts = xdata.gen_synthetic(cfg.data.synthetic, args.n_utts, seed, cfg.model.input_kind)
    out = Path(args.out)
    manifest = xdata.write_synthetic(out, utts, args.manifest_name)
    atomic_write_bytes(out / "run_config.json", (cfg.dumps() + "\n").encode("utf-8"))
    logger.info("wrote %d utterances to %s", len(utts), manifest)
    _emit([dumps_line({"manifest": str(manifest), "n_utts": len(utts), "seed": seed})], None)
    return EXIT_OK

def _synthetic_splits(cfg: RunConfig):
    syn = cfg.data.synthetic
    kind = cfg.model.input_kind
    train = xdata.gen_synthetic(syn, cfg.data.n_train, cfg.seed, kind)
    dev = xdata.gen_synthetic(syn, cfg.data.n_dev, cfg.seed + 1, kind)
    return train, dev, Vocab.synthetic(syn.vocab_size)

def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    train_path = args.data or cfg.data.train_manifest
    dev_path = args.dev or cfg.data.dev_manifest
    if train_path is None:
        train, dev, vocab = _synthetic_splits(cfg)
    else:
        entries, base = _load_manifest(train_path)
        vocab = _vocab_for(entries, cfg.model.vocab_size)
        train = xdata.load_dataset(entries, vocab, base)
        dev = []
        if dev_path is not None:
            dev_entries, dev_base = _load_manifest(dev_path)
            dev = xdata.load_dataset(dev_entries, vocab, dev_base)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(out / "run_config.json", (cfg.dumps() + "\n").encode("utf-8"))
    if args.resume is not None:
        trainer = Trainer.from_checkpoint(_require_file(args.resume, "checkpoint"), cfg.train_config)
        trainer.vocab = trainer.vocab or vocab
    else:
        dtype = np.float64 if args.float64 else np.float32
        model = TransducerModel.init(cfg.model, substream(cfg.seed, "init"), dtype)
        trainer = Trainer(model, cfg.train_config, cfg.to_dict(), vocab)
    logger.info("training %r for %d epochs on %d utterances", trainer.model, cfg.train.epochs, len(train))
    history = trainer.fit(train, dev or None, checkpoint_dir=out, metrics_path=out / "metrics.jsonl")
    summary = {
        "epochs_run": len(history),
        "step": trainer.step,
        "best_dev_nll": None if np.isinf(trainer.best_dev_nll) else trainer.best_dev_nll,
        "checkpoint": str(out / "last.xtrd"),
    }
    _emit([dumps_line(summary)], None)
    return EXIT_OK

def _load_model(args):
    ckpt = xdata.load_checkpoint(_require_file(args.ckpt, "checkpoint"))
    model = ckpt.model()
    if args.float64:
        model = model.astype(np.float64)
    vocab = ckpt.vocab or Vocab.synthetic(model.cfg.vocab_size)
    return model, vocab

def _decode_all(model, utts, cfg, mode, vocab, push_size=None):
    results, reports, total = [], [], ev.WerReport()
    for utt in utts:
        result, report = search.decode_utterance(model, utt, cfg, mode, vocab, push_size)
        results.append(result)
        reports.append(report)
        if utt.text:
            total = total + ev.utterance_errors(utt.text, result.text)
    return results, reports, total

def cmd_decode(args) -> int:
    model, vocab = _load_model(args)
    entries, base = _load_manifest(args.data, require_text=False)
    utts = xdata.load_dataset(entries, None, base)
    cfg = search.DecodeConfig(args.beam, _mask_from_args(args), args.max_symbols)
    results, reports, scores = _decode_all(model, utts, cfg, args.mode, vocab, args.push_size)
    summary = {
        "config": {"mode": args.mode, "beam_width": cfg.beam_width, "mask": cfg.mask.label(),
                   "max_symbols_per_frame": cfg.max_symbols_per_frame, "checkpoint": str(args.ckpt)},
        "n_utts": len(results),
        "attended_keys_total": sum(r.total_keys for r in reports),
        "query_key_pairs_total": sum(r.total_pairs for r in reports),
        "chunks": sum(r.n_chunks for r in reports),
        "peak_cache_frames": max((r.peak_cache_frames for r in reports), default=0),
        "chunk_ms": reports[0].chunk_ms if reports else None,
        "wer": scores.to_dict() if scores.n_ref_words else None,
    }
    records = [{**r.to_dict(), "cost": c.to_dict()} for r, c in zip(results, reports)]
    _emit([dumps_line(r) for r in records] + [dumps_line({"summary": summary})], args.out)
    return EXIT_OK

def cmd_inspect_mask(args) -> int:
    spec = _mask_from_args(args).with_frames(args.frames)
    mask_da = create_mask_da(spec)
    mask_da.xstm.verify()
    table = mask_da.xstm.chunk_table
    record = {
        "spec": spec.label(),
        "frames": args.frames,
        "attended_count": [int(c) for c in table["attended"]],
        "cached_count": [int(c) for c in table["cached"]],
    }
    lines = [] if args.no_grid else [mask_da.xstm.to_ascii()]
    _emit(lines + [dumps_line(record)], None)
    if args.plot is not None:
        from xstream.plotting import plot_mask
        ax = plot_mask(mask_da)
        ax.figure.savefig(args.plot)
    return EXIT_OK

def _read_transcripts(path) -> dict | list:
    """Id-keyed texts from a JSON lines file, or one transcript per plain line."""
    path = _require_file(path, "transcript file")
    lines = path.read_text(encoding="utf-8").splitlines()
    if path.suffix not in (".jsonl", ".json"):
        return lines
    texts = {}
    for line_no, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as err:
            raise ConfigError(str(path), f"line {line_no}: invalid JSON ({err.msg})") from err
        if "utterance_id" in record:
            texts[record["utterance_id"]] = record.get("text") or ""
    return texts

def cmd_eval_wer(args) -> int:
    refs, hyps = _read_transcripts(args.ref), _read_transcripts(args.hyp)
    if isinstance(refs, dict) != isinstance(hyps, dict):
        raise ConfigError("--hyp", "reference and hypothesis files must both be JSON lines or both plain text")
    if isinstance(refs, dict):
        missing = [uid for uid in refs if uid not in hyps]
        if missing:
            warnings.warn(f"{len(missing)} utterances have no hypothesis; scored as empty.", stacklevel=2)
        hyps = [hyps.get(uid, "") for uid in refs]
        refs = list(refs.values())
    report = ev.wer(refs, hyps)
    _emit([dumps_line(report.to_dict())], args.out)
    return EXIT_OK

def cmd_sweep(args) -> int:
    model, vocab = _load_model(args)
    entries, base = _load_manifest(args.data)
    utts = xdata.load_dataset(entries, None, base)
    records = []
    for chunk in args.chunk_frames:
        for left in args.left_context:
            for sinks in args.sink_frames:
                mask = geometry.MaskSpec(chunk, left, sinks)
                cfg = search.DecodeConfig(args.beam, mask, args.max_symbols)
                _, reports, scores = _decode_all(model, utts, cfg, args.mode, vocab)
                keys = sum(r.total_keys for r in reports)
                chunks = sum(r.n_chunks for r in reports)
                records.append({
                    "chunk_frames": chunk,
                    "left_context": left,
                    "sink_frames": sinks,
                    "wer": scores.wer,
                    "keys_per_chunk": keys / chunks if chunks else 0.0,
                })
                logger.info("%s: wer %.4f", mask.label(), scores.wer)
    table = ev.sweep_table(records)
    table = table.astype(object).where(table.notna(), None)
    _emit([dumps_line(row) for row in table.to_dict(orient="records")], args.out)
    return EXIT_OK


# Parser

def _add_mask_args(parser, sweep=False):
    if sweep:
        parser.add_argument("--chunk-frames", type=_positive, nargs="+", required=True)
        parser.add_argument("--left-context", type=parse_left_context, nargs="+", default=[None])
        parser.add_argument("--sink-frames", type=_non_negative, nargs="+", default=[0])
        return
    group = parser.add_mutually_exclusive_group()
    group.add_argument("--chunk-frames", type=_positive, default=None, help="Frames per chunk.")
    group.add_argument("--full-attention", action="store_true", help="Non-streaming mask.")
    parser.add_argument("--left-context", type=parse_left_context, default=None,
                        help="Left context in chunks, or 'full' (default).")
    parser.add_argument("--sink-frames", type=_non_negative, default=0)

def _add_decode_args(parser):
    parser.add_argument("--ckpt", required=True, help="Checkpoint file.")
    parser.add_argument("--data", required=True, help="Manifest of utterances to decode.")
    parser.add_argument("--beam", type=_positive, default=4, help="Beam width; 1 decodes greedily.")
    parser.add_argument("--max-symbols", type=_positive, default=8, help="Emissions per frame.")
    parser.add_argument("--mode", choices=search.DECODE_MODES, default="offline")
    parser.add_argument("--float64", action="store_true", help="Decode in double precision.")
    parser.add_argument("--out", default=None, help="Output file; stdout by default.")

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xstream", description="Chunked streaming transducer ASR.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="Generate a synthetic dataset.")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-utts", type=_non_negative, required=True)
    p.add_argument("--seed", type=_non_negative, default=None, help="Overrides the config seed.")
    p.add_argument("--manifest-name", default="manifest.jsonl")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="Train a model.")
    p.add_argument("--config", required=True)
    p.add_argument("--data", default=None, help="Training manifest; synthetic data when absent.")
    p.add_argument("--dev", default=None, help="Dev manifest.")
    p.add_argument("--out", required=True, help="Checkpoint and metrics directory.")
    p.add_argument("--resume", default=None, help="Checkpoint to continue from.")
    p.add_argument("--float64", action="store_true", help="Train in double precision.")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", help="Decode a manifest.")
    _add_decode_args(p)
    _add_mask_args(p)
    p.add_argument("--push-size", type=_positive, default=None,
                   help="Samples or frames per streaming push.")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("inspect-mask", help="Print a chunk mask and its key counts.")
    _add_mask_args(p)
    p.add_argument("--frames", type=_positive, required=True)
    p.add_argument("--no-grid", action="store_true", help="Only print the JSON counts.")
    p.add_argument("--plot", default=None, help="Save a matplotlib figure of the mask.")
    p.set_defaults(func=cmd_inspect_mask)

    p = sub.add_parser("eval-wer", help="Score hypotheses against references.")
    p.add_argument("--ref", required=True)
    p.add_argument("--hyp", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval_wer)

    p = sub.add_parser("sweep", help="Decode over a grid of mask geometries.")
    _add_decode_args(p)
    _add_mask_args(p, sweep=True)
    p.set_defaults(func=cmd_sweep)
    return parser

def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return EXIT_OK if err.code in (0, None) else EXIT_USAGE
    configure_logging(args.verbose)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as err:
        print(f"xstream: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (XStreamError, OSError, ValueError) as err:
        logger.error("%s failed: %s", args.command, err)
        print(f"xstream: error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
