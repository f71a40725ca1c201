"""Command-line entry point.

Every command resolves an ExperimentConfig (defaults, then the config stored
in an input checkpoint, then ``--config``, then ``--set key=value``), does its
work and writes a manifest next to its outputs.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import checkpoint
from .corpus import CorpusError, write_corpus
from .erasers import (
    METHODS,
    ContrastiveDecoder,
    MemorizationError,
    collapse_flag,
    erase,
    select_blocks,
    train_memo_model,
)
from .lab import ConfigError, ExperimentConfig, input_hash, load_config, make_splits, memorize, train_base
from .metrics import evaluate
from .model import attention_pattern
from .selection import selection_report

log = logging.getLogger("emso")

COMMANDS = ("make-corpus", "train-base", "memorize", "select", "erase", "evaluate", "sweep-k", "attn-dump", "report")
REPORT_SUFFIX = ".report.json"
TABLE_COLUMNS = ("el_3", "ma", "ematch_mean", "ppl", "ppl_ratio", "rep_2", "div_3")


class CommandError(RuntimeError):
    pass


# configuration and I/O helpers


def resolve_config(args, stored: dict | None = None) -> ExperimentConfig:
    base = ExperimentConfig.from_dict(stored) if stored else ExperimentConfig()
    cfg = load_config(args.config, []) if args.config else base
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        cfg.set(k.strip(), v.strip())
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out_dir is not None:
        cfg.out_dir = args.out_dir
    return cfg


def out_dir(cfg: ExperimentConfig) -> Path:
    d = Path(cfg.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def load_checkpoint(path: str):
    model, meta = checkpoint.load(path)
    return model, meta


def load_for_eval(path: str):
    """Model callable for evaluation; decoding-time wrappers are rebuilt here."""
    model, meta = load_checkpoint(path)
    dec = meta.get("decoding")
    if dec:
        memo, _ = load_checkpoint(dec["memo"])
        return ContrastiveDecoder(model, memo, dec["gamma"]), meta
    return model, meta


def save_checkpoint(path: Path, model, cfg: ExperimentConfig, lineage: list, extra: dict | None = None) -> Path:
    meta = {"experiment": cfg.to_dict()}
    meta.update(extra or {})
    return checkpoint.save(path, model, lineage=lineage, seeds=cfg.seeds(), extra=meta)


def write_manifest(cfg: ExperimentConfig, command: str, argv: list[str], inputs: dict, outputs: list[Path], tag: str = "") -> Path:
    d = out_dir(cfg)
    manifest = {
        "command": command,
        "argv": argv,
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "seeds": cfg.seeds(),
        "inputs": inputs,
        "outputs": {str(p): checkpoint.file_hash(p) for p in outputs},
    }
    path = d / f"manifest-{command}{'-' + tag if tag else ''}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def checkpoint_inputs(cfg: ExperimentConfig, **paths) -> dict:
    inputs = {"corpus": cfg.corpus or "synthetic", "corpus_sha256": input_hash(cfg)}
    for k, p in paths.items():
        if p is not None:
            inputs[k] = {"path": str(p), "sha256": checkpoint.file_hash(p)}
    return inputs


def metric_report(cfg: ExperimentConfig, model, splits, reference_ppl: float | None = None) -> dict:
    rep = evaluate(model, splits.forget, splits.val_tokens(), splits.prompts,
                   el_ns=tuple(cfg.el_n), rep_ns=(2,), div_ns=(3,), gen_len=cfg.gen_len)
    d = rep.to_dict()
    ratio = d["ppl"] / reference_ppl if reference_ppl else None
    d["ppl_ratio"] = ratio
    d["collapse"] = collapse_flag(d.get("rep_2"), ratio if ratio is not None else 1.0)
    return d


def write_report(path: Path, record: dict) -> Path:
    path.write_text(json.dumps(record, sort_keys=True) + "\n")
    return path


# commands


def cmd_make_corpus(args, argv) -> int:
    path = write_corpus(args.out, args.lines, args.seed or 0)
    print(path)
    return 0


def cmd_train_base(args, argv) -> int:
    cfg = resolve_config(args).validate()
    splits = make_splits(cfg)
    model = train_base(cfg, splits)
    out = save_checkpoint(out_dir(cfg) / args.out, model, cfg, [{"step": "train-base", "epochs": cfg.base_epochs}])
    write_manifest(cfg, "train-base", argv, checkpoint_inputs(cfg), [out])
    print(out)
    return 0


def cmd_memorize(args, argv) -> int:
    base, meta = load_checkpoint(args.base)
    cfg = resolve_config(args, meta.get("experiment")).validate()
    splits = make_splits(cfg)
    model = memorize(cfg, base, splits)
    lineage = meta.get("lineage", []) + [{"step": "memorize", "target_ma": cfg.target_ma}]
    out = save_checkpoint(out_dir(cfg) / args.out, model, cfg, lineage)
    write_manifest(cfg, "memorize", argv, checkpoint_inputs(cfg, base=args.base), [out])
    print(out)
    return 0


def _erase_config(cfg: ExperimentConfig, args) -> None:
    for flag, key in (("method", "method"), ("k", "k"), ("epochs", "max_epochs"), ("lr", "lr"), ("gamma", "gamma"), ("tau", "tau")):
        v = getattr(args, flag, None)
        if v is not None:
            cfg.set(f"erase.{key}", v)


def cmd_select(args, argv) -> int:
    model, meta = load_checkpoint(args.ckpt)
    cfg = resolve_config(args, meta.get("experiment"))
    _erase_config(cfg, args)
    cfg.validate()
    splits = make_splits(cfg)
    mask, scores = select_blocks(model, splits.forget, cfg.erase)
    out = out_dir(cfg) / "selection.jsonl"
    out.write_text("".join(line + "\n" for line in selection_report(scores, mask)))
    write_manifest(cfg, "select", argv, checkpoint_inputs(cfg, ckpt=args.ckpt), [out])
    print(json.dumps({"selected": mask.names(), "k": mask.k}))
    return 0


def run_erase(cfg: ExperimentConfig, model, meta: dict, ckpt_path: str, name: str, memo_path: str | None, argv, command="erase") -> dict:
    cfg.validate()
    d = out_dir(cfg)
    splits = make_splits(cfg)
    method = cfg.erase.method
    memo = None
    if method in ("TA", "CD"):
        if memo_path is None:
            memo = train_memo_model(model, splits.forget, seed=cfg.seeds()["memorize"])
            memo_path = str(save_checkpoint(d / "memo.ckpt", memo, cfg, meta.get("lineage", []) + [{"step": "memo"}]))
        else:
            memo, _ = load_checkpoint(memo_path)
    result = erase(model, splits, cfg.erase, memo)
    lineage = meta.get("lineage", []) + [{"step": "erase", **cfg.erase.to_dict(), "epochs_run": result.epochs}]
    extra = {}
    weights = result.model
    if method == "CD":
        extra["decoding"] = {"method": "CD", "gamma": cfg.erase.gamma, "memo": str(Path(memo_path).resolve())}
        weights = model
    out = save_checkpoint(d / f"{name}.ckpt", weights, cfg, lineage, extra)
    log_path = d / f"{name}.log.jsonl"
    result.write_log(log_path)
    record = {
        "name": name,
        "method": method,
        "k": cfg.erase.k if method in ("EMSO", "Select&NLL", "Random&EM", "w/o-Dir") else None,
        "epochs": result.epochs,
        "stop_reason": result.stop_reason,
        "mask": result.masks[-1].names() if result.masks else None,
        "checkpoint": str(out),
        **metric_report(cfg, result.model, splits, result.base_ppl),
    }
    rep = write_report(d / f"{name}{REPORT_SUFFIX}", record)
    write_manifest(cfg, command, argv, checkpoint_inputs(cfg, ckpt=ckpt_path, memo=memo_path), [out, log_path, rep], tag=name)
    return record


def cmd_erase(args, argv) -> int:
    model, meta = load_checkpoint(args.ckpt)
    cfg = resolve_config(args, meta.get("experiment"))
    _erase_config(cfg, args)
    name = args.name or cfg.erase.method.lower().replace("&", "-").replace("/", "")
    record = run_erase(cfg, model, meta, args.ckpt, name, args.memo, argv)
    print(json.dumps(record, sort_keys=True))
    return 0


def cmd_evaluate(args, argv) -> int:
    model, meta = load_for_eval(args.ckpt)
    cfg = resolve_config(args, meta.get("experiment")).validate()
    splits = make_splits(cfg)
    ref_ppl = None
    if args.reference:
        ref, _ = load_for_eval(args.reference)
        ref_ppl = evaluate(ref, [], splits.val_tokens()).perplexity
    name = args.name or Path(args.ckpt).stem
    record = {"name": name, "checkpoint": args.ckpt, **metric_report(cfg, model, splits, ref_ppl)}
    d = out_dir(cfg)
    rep = write_report(d / f"{name}{REPORT_SUFFIX}", record)
    write_manifest(cfg, "evaluate", argv, checkpoint_inputs(cfg, ckpt=args.ckpt, reference=args.reference), [rep], tag=name)
    print(json.dumps(record, sort_keys=True))
    return 0


def cmd_sweep_k(args, argv) -> int:
    model, meta = load_checkpoint(args.ckpt)
    try:
        values = [int(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--values expects comma-separated integers, got {args.values!r}") from None
    if not values:
        raise ConfigError("--values is empty")
    for k in values:
        cfg = resolve_config(args, meta.get("experiment"))
        _erase_config(cfg, args)
        cfg.set("erase.k", k)
        record = run_erase(cfg, model, meta, args.ckpt, f"k{k}", None, argv, command="sweep-k")
        print(json.dumps({"k": k, "ma": record["ma"], "ppl_ratio": record["ppl_ratio"], "collapse": record["collapse"]}))
    return 0


def cmd_attn_dump(args, argv) -> int:
    model, meta = load_checkpoint(args.ckpt)
    cfg = resolve_config(args, meta.get("experiment")).validate()
    if args.text is not None:
        tokens = list(args.text.encode("utf-8"))
        label = "text"
    else:
        seqs = getattr(make_splits(cfg), args.split)
        if not 0 <= args.index < len(seqs):
            raise ConfigError(f"--index {args.index} out of range for {args.split} ({len(seqs)} sequences)")
        tokens = list(seqs[args.index].tokens)
        label = f"{args.split}{args.index}"
    pattern = attention_pattern(model, tokens, args.layer, args.head)
    d = out_dir(cfg)
    stem = d / f"attn-L{args.layer}H{args.head}-{label}"
    rows = pattern.tolist()
    Path(f"{stem}.json").write_text(json.dumps({"layer": args.layer, "head": args.head, "tokens": tokens, "pattern": rows}) + "\n")
    with open(f"{stem}.csv", "w", newline="") as f:
        csv.writer(f).writerows(rows)
    write_manifest(cfg, "attn-dump", argv, checkpoint_inputs(cfg, ckpt=args.ckpt), [Path(f"{stem}.json"), Path(f"{stem}.csv")], tag=stem.name)
    print(f"{stem}.json")
    return 0


def collect_reports(paths: list[str]) -> list[dict]:
    records = []
    for p in map(Path, paths):
        files = sorted(p.glob(f"*{REPORT_SUFFIX}")) if p.is_dir() else [p]
        for f in files:
            if not f.is_file():
                raise CommandError(f"no report at {f}")
            records.append(json.loads(f.read_text()))
    return records


def rank_records(records: list[dict]) -> list[dict]:
    """Rank by MA (lower is better, ties by ppl ratio); collapsed rows get no rank."""
    live = [i for i, r in enumerate(records) if not r.get("collapse")]
    live.sort(key=lambda i: (records[i].get("ma", 1.0), records[i].get("ppl_ratio") or records[i].get("ppl", 0.0)))
    rank = {i: n + 1 for n, i in enumerate(live)}
    return [{**r, "rank": rank.get(i)} for i, r in enumerate(records)]


def render_table(records: list[dict]) -> str:
    header = ["name", *TABLE_COLUMNS, "collapse", "rank"]
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for r in records:
        cells = [str(r.get("name", "?"))]
        for c in TABLE_COLUMNS:
            v = r.get(c)
            cells.append("-" if v is None else f"{v:.4f}" if isinstance(v, float) else str(v))
        cells.append(r.get("collapse") or "")
        cells.append("-" if r.get("rank") is None else str(r["rank"]))
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def cmd_report(args, argv) -> int:
    records = rank_records(collect_reports(args.inputs))
    if not records:
        raise CommandError("no reports found")
    table = render_table(records)
    d = Path(args.out_dir or ".")
    d.mkdir(parents=True, exist_ok=True)
    (d / "table.md").write_text(table)
    with open(d / "tradeoff.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["name", "ma", "el_3", "ppl_ratio", "rep_2", "collapse"])
        for r in records:
            w.writerow([r.get("name"), r.get("ma"), r.get("el_3"), r.get("ppl_ratio"), r.get("rep_2"), r.get("collapse") or ""])
    sys.stdout.write(table)
    return 0


# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value (repeatable)")
    common.add_argument("--seed", type=int, help="root seed")
    common.add_argument("--out-dir", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="emso", description="Erase memorized sequences from a small byte-level GPT.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-corpus", parents=[common], help="write a synthetic record corpus")
    s.add_argument("--lines", type=int, default=3000)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_make_corpus)

    s = sub.add_parser("train-base", parents=[common], help="train the base model on the retain split")
    s.add_argument("--out", default="base.ckpt")
    s.set_defaults(func=cmd_train_base)

    s = sub.add_parser("memorize", parents=[common], help="overfit the forget split to the target MA")
    s.add_argument("--base", required=True)
    s.add_argument("--out", default="memorized.ckpt")
    s.set_defaults(func=cmd_memorize)

    erase_flags = argparse.ArgumentParser(add_help=False)
    erase_flags.add_argument("--ckpt", required=True)
    erase_flags.add_argument("--k", type=int)
    erase_flags.add_argument("--epochs", type=int)
    erase_flags.add_argument("--lr", type=float)
    erase_flags.add_argument("--tau", type=float)

    s = sub.add_parser("select", parents=[common, erase_flags], help="score blocks and print the mask")
    s.add_argument("--method", default="EMSO")
    s.set_defaults(func=cmd_select)

    s = sub.add_parser("erase", parents=[common, erase_flags], help="run one erasure method")
    s.add_argument("--method", default="EMSO", help=f"one of {', '.join(METHODS)} (case-insensitive)")
    s.add_argument("--gamma", type=float)
    s.add_argument("--memo", help="memorized reference checkpoint for TA/CD")
    s.add_argument("--name")
    s.set_defaults(func=cmd_erase)

    s = sub.add_parser("evaluate", parents=[common], help="write a MetricReport for a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--reference", help="checkpoint whose perplexity is the ratio baseline")
    s.add_argument("--name")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("sweep-k", parents=[common, erase_flags], help="EMSO for several k")
    s.add_argument("--values", default="1,2,3,4")
    s.add_argument("--method", default="EMSO")
    s.set_defaults(func=cmd_sweep_k)

    s = sub.add_parser("attn-dump", parents=[common], help="export one head's attention pattern")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--layer", type=int, required=True)
    s.add_argument("--head", type=int, required=True)
    s.add_argument("--split", default="forget", choices=["forget", "retain", "val", "holdout"])
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--text")
    s.set_defaults(func=cmd_attn_dump)

    s = sub.add_parser("report", parents=[common], help="comparison grid over report files")
    s.add_argument("inputs", nargs="+", help="report files or directories")
    s.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, argv)
    except (ConfigError, CorpusError, checkpoint.CheckpointError, CommandError, MemorizationError, ValueError, IndexError) as e:
        print(f"emso {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
