"""Command-line driver.

Exit codes: 0 success, 1 usage or configuration error, 2 data or file-format
error, 3 numeric failure. Results go to stdout (or ``--out``), diagnostics to
stderr.
"""

from __future__ import annotations

import argparse
from dataclasses import asdict
import io
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .checkpoint import load_checkpoint
from .config import DataConfig, build_configs, parse_overrides, read_config
from .data import BOS, EOS, PAD, Corpus, load_jsonl, tokenize
from .errors import (CapabilityError, ConfigError, EmptyDocumentError, EncodingError, FormatError,
                     NumericError, ParseError, SchemaError, VocabError)
from .model import CellState, cell_step, log_softmax, output_logits, param_shapes
from .training import format_metric, substream, train

log = logging.getLogger("factorcell")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def generate(model, value, max_len: int = 200, temperature: float = 1.0, seed: int = 0) -> str:
    """Ancestral sampling from softmax(logits / temperature) until the end sentinel or ``max_len`` tokens."""
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    rng = substream(seed, "generation")
    cell = model.adapt(value)
    state = CellState.zeros(model.config.hidden_dim, model.dtype)
    tok = BOS
    out = []
    for t in range(max_len):
        state = cell_step(cell, model.embed(tok), state, step=t)
        logits = output_logits(model.params, model.config, cell, state.h).astype(np.float64)
        logits[[PAD, BOS]] = -np.inf
        p = np.exp(log_softmax(logits / temperature))
        p /= p.sum()
        tok = int(rng.choice(p.shape[0], p=p))
        if tok == EOS:
            break
        out.append(tok)
    return model.vocab.join(model.vocab.decode(out))


def _context_arg(model, text):
    if text is None:
        return tuple([None] * len(model.schema))
    try:
        obj = json.loads(text)
    except json.JSONDecodeError:
        p = Path(text)
        if not p.exists():
            raise ParseError(f"context {text!r} is neither JSON nor a file") from None
        obj = json.loads(p.read_text(encoding="utf-8"))
    if not isinstance(obj, dict):
        raise ParseError("a context must be a JSON object")
    return model.schema.value(obj)


def _load_models(paths):
    models = [load_checkpoint(p) for p in paths]
    for m in models[1:]:
        if m.vocab != models[0].vocab or m.schema != models[0].schema:
            raise FormatError("ensemble members disagree on vocabulary or context schema")
    return models


def _load_docs(model, path, lenient=False, cap=None):
    docs = load_jsonl(path, model.schema, lenient=lenient)
    if cap is None:
        cap = (model.meta.get("data_config") or {}).get("max_len") or None
    return tokenize(docs, model.vocab, model.schema, cap)


def _read_labels(model, path):
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(obj, dict):
        items = list(obj.items())
    elif isinstance(obj, list):
        items = []
        for i, entry in enumerate(obj):
            if isinstance(entry, dict) and "context" in entry:
                items.append((str(entry.get("name", i)), entry["context"]))
            elif isinstance(entry, dict):
                items.append((json.dumps(entry, sort_keys=True), entry))
            else:
                raise ParseError(f"label entry {i} is not an object")
    else:
        raise ParseError("labels file must hold a JSON object or list")
    return [(str(name), model.schema.value(ctx)) for name, ctx in items]


def _emit(args, payload: dict, text: str, to_out: bool = True):
    body = json.dumps(payload, indent=None) + "\n" if args.format == "json" else text
    if to_out and getattr(args, "out", None):
        Path(args.out).write_text(body, encoding="utf-8")
    else:
        sys.stdout.write(body)


def cmd_train(args):
    values = read_config(args.config) if args.config else {}
    values.update(parse_overrides(args.set))
    if args.seed is not None:
        values["seed"] = str(args.seed)
    model_cfg, train_cfg, data_cfg = build_configs(values)
    cap = data_cfg.max_len or None
    train_docs = load_jsonl(args.corpus, lenient=data_cfg.lenient)
    dev_docs = load_jsonl(args.dev, lenient=data_cfg.lenient) if args.dev else []
    corpus = Corpus.from_documents(train_docs, dev_docs, unit=model_cfg.unit, cap=cap,
                                   min_count=data_cfg.min_count, kinds=data_cfg.kinds(),
                                   context_min_count=data_cfg.context_min_count,
                                   max_vocab=data_cfg.max_vocab or None)
    metrics_path = args.metrics or str(args.out) + ".metrics.tsv"
    Path(metrics_path).write_text("", encoding="utf-8")
    log.info("training %s: %d train docs, %d dev docs, |V|=%d", model_cfg.variant,
             len(corpus.train), len(corpus.dev), len(corpus.vocab))
    if args.vocab_out:
        Path(args.vocab_out).write_text(corpus.vocab.dump(), encoding="utf-8")

    def progress(step, loss, ppl):
        log.info("%s", format_metric(step, loss, ppl))

    # Data settings travel with the checkpoint so evaluation truncates identically.
    result = train(corpus, model_cfg, train_cfg, args.out, progress, metrics_path,
                   meta={"data_config": asdict(data_cfg)})
    payload = {"checkpoint": str(args.out), "metrics": metrics_path, "steps": result.steps,
               "best_step": result.best_step, "parameters": result.model.n_params()}
    if result.metrics:
        payload["train_loss"] = result.metrics[-1][1]
        payload["dev_ppl"] = None if math.isnan(result.metrics[-1][2]) else result.metrics[-1][2]
    # --out names the checkpoint here, so the summary always goes to stdout
    _emit(args, payload, "".join(f"{k:<12}{v}\n" for k, v in payload.items()), to_out=False)


def cmd_ppl(args):
    models = _load_models(args.model)
    docs = _load_docs(models[0], args.corpus, args.lenient)
    rep = ev.perplexity(models if len(models) > 1 else models[0], docs)
    _emit(args, rep.to_json(), rep.to_text())


def cmd_classify(args):
    models = _load_models(args.model)
    labels = _read_labels(models[0], args.labels)
    docs = _load_docs(models[0], args.corpus, args.lenient)
    prior = [float(x) for x in args.prior.split(",")] if args.prior else None
    rep = ev.classify_corpus(models if len(models) > 1 else models[0], docs, labels, prior)
    _emit(args, rep.to_json(), rep.to_text())


def cmd_llr(args):
    models = _load_models(args.model)
    m0 = models[0]
    pairs = ev.log_likelihood_ratio(models if len(models) > 1 else m0, args.text,
                                    _context_arg(m0, args.ctx_a), _context_arg(m0, args.ctx_b))
    buf = io.StringIO()
    ev.write_ratios_csv(pairs, buf)
    if args.out:
        Path(args.out).write_text(buf.getvalue(), encoding="utf-8")
    else:
        sys.stdout.write(buf.getvalue())


def cmd_boost(args):
    model = load_checkpoint(args.model[0])
    words = ev.top_boosted_words(model, _context_arg(model, args.context), args.n)
    payload = {"words": [{"token": t, "score": s} for t, s in words]}
    _emit(args, payload, "".join(f"{t:<20}{s:>12.6f}\n" for t, s in words))


def cmd_embed(args):
    model = load_checkpoint(args.model[0])
    text = Path(args.contexts).read_text(encoding="utf-8").strip()
    if text.startswith("["):
        objs = json.loads(text)
    else:
        objs = [json.loads(line) for line in text.splitlines() if line.strip()]
    objs = [o.get("context", o) if isinstance(o, dict) else o for o in objs]
    values = [model.schema.value(o) for o in objs]
    if not args.out:
        raise UsageError("embed requires --out")
    ev.export_context_embeddings(model, values, args.out)
    sys.stdout.write(json.dumps({"rows": len(values), "out": args.out}) + "\n")


def cmd_gen(args):
    model = load_checkpoint(args.model[0])
    text = generate(model, _context_arg(model, args.context), args.max_len, args.temperature, args.seed or 0)
    _emit(args, {"text": text}, text + "\n")


def info(model) -> dict:
    shapes = {k: list(v.shape) for k, v in model.params.items()}
    return {"variant": model.config.variant, "bias_mode": model.config.bias_mode,
            "dtype": str(model.dtype), "shapes": shapes, "parameters": model.n_params(),
            "vocab_size": model.config.vocab_size, "context": model.schema.to_dict()["variables"],
            "config": model.config.to_dict()}


def cmd_info(args):
    model = load_checkpoint(args.model[0])
    d = info(model)
    text = [f"variant     {d['variant']}", f"bias_mode   {d['bias_mode']}", f"dtype       {d['dtype']}",
            f"parameters  {d['parameters']}"]
    text += [f"  {k:<12}{'x'.join(map(str, s))}" for k, s in d["shapes"].items()]
    _emit(args, d, "\n".join(text) + "\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="factorcell", description="Context-adapted recurrent language models.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, model=True, out=True):
        if model:
            sp.add_argument("--model", action="append", required=True,
                            help="checkpoint path (repeat for an ensemble where supported)")
        if out:
            sp.add_argument("--out", help="write the result here instead of stdout")
        sp.add_argument("--format", choices=("json", "text"), default="json")
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("train", help="train a model")
    common(sp, model=False, out=False)
    sp.add_argument("--config")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--dev")
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--metrics", help="metrics log path (default <out>.metrics.tsv)")
    sp.add_argument("--vocab-out", help="write the vocabulary dump here")
    sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("ppl", help="context-conditioned perplexity")
    common(sp)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--lenient", action="store_true")
    sp.set_defaults(func=cmd_ppl)

    sp = sub.add_parser("classify", help="generative classification over a label set")
    common(sp)
    sp.add_argument("--labels", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--prior", help="comma-separated prior weights, one per label")
    sp.add_argument("--lenient", action="store_true")
    sp.set_defaults(func=cmd_classify)

    sp = sub.add_parser("llr", help="per-token log-likelihood ratio between two contexts (CSV)")
    common(sp)
    sp.add_argument("--text", required=True)
    sp.add_argument("--ctx-a", required=True)
    sp.add_argument("--ctx-b", required=True)
    sp.set_defaults(func=cmd_llr)

    sp = sub.add_parser("boost", help="top boosted words of the softmax bias")
    common(sp)
    sp.add_argument("--context", required=True)
    sp.add_argument("-n", type=int, default=10)
    sp.set_defaults(func=cmd_boost)

    sp = sub.add_parser("embed", help="export context embeddings (CSV)")
    common(sp)
    sp.add_argument("--contexts", required=True, help="JSON list or JSONL of context objects")
    sp.set_defaults(func=cmd_embed)

    sp = sub.add_parser("gen", help="sample text under a context")
    common(sp)
    sp.add_argument("--context")
    sp.add_argument("--max-len", type=int, default=200)
    sp.add_argument("--temperature", type=float, default=1.0)
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("info", help="describe a checkpoint")
    common(sp)
    sp.set_defaults(func=cmd_info)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(f"usage error: {exc}\n")
        return EXIT_USAGE
    except SystemExit as exc:   # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except (UsageError, ConfigError, CapabilityError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_USAGE
    except (FormatError, ParseError, SchemaError, EncodingError, VocabError, EmptyDocumentError,
            OSError, json.JSONDecodeError) as exc:
        sys.stderr.write(f"data error: {exc}\n")
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        sys.stderr.write(f"numeric error: {exc}\n")
        return EXIT_NUMERIC
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
