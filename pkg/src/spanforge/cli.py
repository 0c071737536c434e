"""``spanforge`` command line: vocab, pretrain, finetune, eval, predict and data utilities.

Exit codes: 0 ok, 2 configuration, 3 data validation, 4 checkpoint integrity.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import dataset as dsm
from . import encoder as enc
from . import evalkit
from . import finetune as ft
from . import tokenizer as tk
from .checkpoint import file_sha256
from .config import RunConfig, config_mentions, dump_config, load_config, resolve_seed
from .errors import ConfigError, InputError, IntegrityError, SpanforgeError
from .model import QAModel, load_model

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CHECKPOINT = 0, 2, 3, 4


def _read_text(path) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc


def _corpus_lines(path) -> list[str]:
    """A dataset JSON contributes its contexts and questions; any other file is one document per line."""
    text = _read_text(path)
    if str(path).endswith(".json"):
        ds = dsm.parse(json.loads(text))
        return list(dict.fromkeys(ex.context for ex in ds)) + [ex.question for ex in ds]
    return [ln for ln in text.splitlines() if ln.strip()]


def _load_data(path) -> dsm.Dataset:
    if not path:
        raise ConfigError("no dataset given (use --data or [data] train)")
    if not Path(path).is_file():
        raise ConfigError(f"dataset file not found: {path}")
    return dsm.load(path)


def _vocab_for(cfg: RunConfig, corpus_path) -> tk.Vocabulary:
    if cfg.tokenizer.vocab:
        if not Path(cfg.tokenizer.vocab).is_file():
            raise ConfigError(f"vocabulary file not found: {cfg.tokenizer.vocab}")
        return tk.Vocabulary.load(cfg.tokenizer.vocab)
    return tk.train_vocab(_corpus_lines(corpus_path), cfg.tokenizer.vocab_size)


def _fresh_model(cfg: RunConfig, vocab, seed) -> QAModel:
    cfg.encoder.vocab_size = len(vocab)
    cfg.encoder.max_positions = max(cfg.encoder.max_positions, cfg.tokenizer.max_len)
    cfg.encoder.validate()
    return QAModel(enc.init_weights(cfg.encoder, seed), vocab, cfg.tokenizer.max_len, cfg.tokenizer.stride)


def _adopt_base(cfg: RunConfig, model: QAModel):
    # the base checkpoint fixes geometry and windowing; echo them so the written config is exact
    for k, v in model.config.to_dict().items():
        setattr(cfg.encoder, k, v)
    cfg.tokenizer.max_len, cfg.tokenizer.stride = model.max_len, model.stride


def _write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _abs(path) -> str:
    return str(Path(path).resolve()) if path else ""


def _prepare(args):
    cfg = load_config(args.config)
    seed = resolve_seed(args.seed, cfg, config_mentions(args.config, "run", "seed"))
    cfg.run.seed = seed
    if getattr(args, "out", None):
        cfg.run.out_dir = args.out
    return cfg, seed


# ---------------------------------------------------------------- commands

def cmd_vocab(args) -> int:
    vocab = tk.train_vocab(_corpus_lines(args.corpus), args.size)
    vocab.save(args.out)
    print(f"wrote {len(vocab)} pieces to {args.out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg, seed = _prepare(args)
    if args.data:
        cfg.data.train = _abs(args.data)
    if args.steps is not None:
        cfg.pretrain.steps = args.steps
    ds = _load_data(cfg.data.train)
    vocab = _vocab_for(cfg, cfg.data.train)
    model = _fresh_model(cfg, vocab, seed)
    contexts = list(dict.fromkeys(ex.context for ex in ds))
    windows, labels = enc.build_nsp_pairs(contexts, vocab, cfg.tokenizer.max_len, seed)
    out = Path(cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    hist = enc.pretrain(model.weights, windows, labels, cfg.pretrain.steps, cfg.pretrain.batch_size,
                        cfg.pretrain.lr, cfg.pretrain.weight_decay, seed)
    _write_csv(out / "pretrain_log.csv", ["step", "mlm", "nsp", "total"],
               [[i + 1, repr(h.mlm), repr(h.nsp), repr(h.total)] for i, h in enumerate(hist)])
    digest = model.save(out / "model.spqa")
    vocab.save(out / "vocab.txt")
    (out / "config.ini").write_text(dump_config(cfg), encoding="utf-8")
    print(f"pretrained {cfg.pretrain.steps} steps; model.spqa sha256 {digest}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg, seed = _prepare(args)
    fc = cfg.finetune
    for flag, attr in (("mode", "mode"), ("rank", "lora_rank"), ("lr", "lr"), ("max_steps", "max_steps"),
                       ("epochs", "max_epochs")):
        if getattr(args, flag) is not None:
            setattr(fc, attr, getattr(args, flag))
    fc.seed = seed
    if args.data:
        cfg.data.train = _abs(args.data)
    if args.val:
        cfg.data.val = _abs(args.val)
    if args.base:
        cfg.run.base = _abs(args.base)
    fc.validate()

    if fc.mode == "lora" and not cfg.run.base:
        raise ConfigError("--mode lora needs a --base checkpoint")
    train_ds = _load_data(cfg.data.train)
    val_ds = _load_data(cfg.data.val) if cfg.data.val else None
    if cfg.run.base:
        model = load_model(cfg.run.base)
        _adopt_base(cfg, model)
    else:
        model = _fresh_model(cfg, _vocab_for(cfg, cfg.data.train), seed)

    out = Path(cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    # the resolved config goes out first so a failed run still records what was attempted
    (out / "config.ini").write_text(dump_config(cfg), encoding="utf-8")
    result = ft.train(model, list(train_ds), fc, list(val_ds) if val_ds else None)

    _write_csv(out / "train_log.csv", ["epoch", "train_loss", "val_loss", "steps"],
               [[r.epoch, repr(r.train_loss), repr(r.val_loss), r.steps] for r in result.history])
    _write_csv(out / "timing.csv", ["epoch", "seconds"], [[r.epoch, f"{r.seconds:.3f}"] for r in result.history])
    model.vocab.save(out / "vocab.txt")
    if fc.mode == "lora":
        digest = model.save_adapter(out / "adapter.spqa", file_sha256(cfg.run.base))
        name = "adapter.spqa"
    else:
        digest = model.save(out / "model.spqa")
        name = "model.spqa"
    last = result.history[-1]
    print(f"{fc.mode}: {len(result.history)} epoch(s), {result.steps} step(s), best epoch {result.best_epoch}, "
          f"final train loss {last.train_loss:.4f}")
    print(f"{name} sha256 {digest}")
    return EXIT_OK


def _model_from_args(args) -> QAModel:
    if not Path(args.model).is_file():
        raise IntegrityError(f"model checkpoint not found: {args.model}")
    if args.adapter and not Path(args.adapter).is_file():
        raise IntegrityError(f"adapter checkpoint not found: {args.adapter}")
    return load_model(args.model, args.adapter)


def cmd_eval(args) -> int:
    model = _model_from_args(args)
    ds = _load_data(args.data)
    if args.split == "all":
        examples = list(ds)
    else:
        seed = resolve_seed(args.seed, RunConfig(), False)
        train, test = dsm.split(ds, args.train_fraction, seed)
        examples = list(train if args.split == "train" else test)
    config = evalkit.EvalConfig(args.max_answer_tokens, model_tag=args.tag)
    report, _ = evalkit.evaluate(model, examples, config)
    if args.csv:
        Path(args.csv).write_text(report.to_csv(), encoding="utf-8")
    if args.json:
        print(report.to_json())
    else:
        print(report.to_table())
        print()
        print(report.to_csv(), end="")
    return EXIT_OK


def cmd_predict(args) -> int:
    model = _model_from_args(args)
    config = evalkit.EvalConfig(args.max_answer_tokens)
    pred = evalkit.predict(model, args.question, args.context, config)
    answer = evalkit.NO_ANSWER if pred.is_empty or not pred.text else pred.text
    print(f"{answer}\t{pred.score:.6f}")
    return EXIT_OK


def cmd_data(args) -> int:
    sub = args.data_cmd
    if sub == "kappa":
        a = _read_text(args.labels_a).split()
        b = _read_text(args.labels_b).split()
        print(f"{dsm.cohen_kappa(a, b):.6f}")
        return EXIT_OK
    ds = _load_data(args.path) if sub != "validate" else None
    if sub == "validate":
        if not Path(args.path).is_file():
            raise ConfigError(f"dataset file not found: {args.path}")
        ds = dsm.load(args.path, strict=args.strict)
        print(f"ok: {len(ds)} examples in {len(ds.contexts())} contexts")
    elif sub == "split":
        train, test = dsm.split(ds, args.fraction, resolve_seed(args.seed, RunConfig(), False))
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        train.save(out / "train.json")
        test.save(out / "test.json")
        print(f"train {len(train)}  test {len(test)}")
    elif sub == "dedup":
        kept, removals = dsm.dedup(ds, args.threshold)
        for r in removals:
            print(f"removed {r.dropped_id}\tkept {r.kept_id}\tscore {r.score:.4f}")
        print(f"{len(removals)} removal(s), {len(kept)} kept")
        if args.out:
            kept.save(args.out)
    elif sub == "report":
        rep = dsm.subdomain_report(ds)
        if args.json:
            body = {s: dict(zip(dsm.PROVENANCES, rep.row(s))) for s in dsm.SUBDOMAINS}
            print(json.dumps({"subdomains": body, "totals": rep.totals}, ensure_ascii=False, indent=1))
        else:
            print(rep.to_table())
    elif sub == "ingest":
        try:
            raw = json.loads(_read_text(args.generated))
        except json.JSONDecodeError as exc:
            raise InputError(f"{args.generated}: not valid JSON ({exc})") from exc
        merged, rejected = dsm.ingest_generated(raw, ds)
        for r in rejected:
            print(f"rejected: {r.reason}: {r.question}")
        merged.save(args.out)
        print(f"accepted {len(merged) - len(ds)}, rejected {len(rejected)}")
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spanforge", description="Extractive Hindi QA toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("vocab", help="train a subword vocabulary")
    v.add_argument("corpus")
    v.add_argument("--size", type=int, required=True)
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_vocab)

    pt = sub.add_parser("pretrain", help="toy MLM + NSP pretraining")
    pt.add_argument("--config")
    pt.add_argument("--data")
    pt.add_argument("--steps", type=int)
    pt.add_argument("--out")
    pt.add_argument("--seed", type=int)
    pt.set_defaults(func=cmd_pretrain)

    f = sub.add_parser("finetune", help="sft or lora fine-tuning")
    f.add_argument("--mode", choices=("sft", "lora"))
    f.add_argument("--rank", type=int)
    f.add_argument("--config")
    f.add_argument("--data")
    f.add_argument("--val")
    f.add_argument("--base")
    f.add_argument("--out")
    f.add_argument("--seed", type=int)
    f.add_argument("--lr", type=float)
    f.add_argument("--epochs", type=int)
    f.add_argument("--max-steps", dest="max_steps", type=int)
    f.set_defaults(func=cmd_finetune)

    for name, func in (("eval", cmd_eval), ("predict", cmd_predict)):
        e = sub.add_parser(name)
        e.add_argument("--model", required=True)
        e.add_argument("--adapter")
        e.add_argument("--max-answer-tokens", dest="max_answer_tokens", type=int, default=50)
        e.set_defaults(func=func)
        if name == "eval":
            e.add_argument("--data", required=True)
            e.add_argument("--split", choices=("train", "test", "all"), default="test")
            e.add_argument("--train-fraction", dest="train_fraction", type=float, default=0.8)
            e.add_argument("--seed", type=int)
            e.add_argument("--tag", default="model")
            e.add_argument("--json", action="store_true")
            e.add_argument("--csv")
        else:
            e.add_argument("--question", required=True)
            e.add_argument("--context", required=True)

    d = sub.add_parser("data", help="dataset utilities")
    d.set_defaults(func=cmd_data)
    dsub = d.add_subparsers(dest="data_cmd", required=True)
    x = dsub.add_parser("validate")
    x.add_argument("path")
    x.add_argument("--strict", action="store_true")
    x = dsub.add_parser("split")
    x.add_argument("path")
    x.add_argument("--out", required=True)
    x.add_argument("--fraction", type=float, default=0.8)
    x.add_argument("--seed", type=int)
    x = dsub.add_parser("dedup")
    x.add_argument("path")
    x.add_argument("--threshold", type=float, default=0.85)
    x.add_argument("--out")
    x = dsub.add_parser("kappa")
    x.add_argument("labels_a")
    x.add_argument("labels_b")
    x = dsub.add_parser("report")
    x.add_argument("path")
    x.add_argument("--json", action="store_true")
    x = dsub.add_parser("ingest")
    x.add_argument("path")
    x.add_argument("--generated", required=True)
    x.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SpanforgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
