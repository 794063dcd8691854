"""Command-line entry point: ``vulgraph <command> ...``.

Every command that writes an output also writes ``<output>.run_config.json``
next to it with the fully resolved configuration that produced it.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .checkpoint import Checkpoint
from .config import load_config
from .cpg import DEFAULT_MAX_NODES, ingest_directory, parse_cpg_export, read_corpus, write_corpus
from .errors import VulGraphError
from .harness import (
    RunConfig,
    evaluation_split,
    lambda_sweep,
    parse_grid,
    student_ablation,
    write_run_config,
)
from .metrics import per_cwe_accuracy
from .train import DetectorModel, branch_probabilities, decide, predict, train

logger = logging.getLogger("vulgraph")


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vulgraph", description="CPG + language-model vulnerability detection")
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("ingest", help="parse CPG documents into a corpus file")
    p.add_argument("--input", required=True, help="directory of .json / .jsonl CPG documents")
    p.add_argument("--out", required=True)
    p.add_argument("--max-nodes", type=int, default=DEFAULT_MAX_NODES)
    p.add_argument("--no-dedup", action="store_true")
    p.add_argument("--seed", type=int, default=0, help="seed for split assignment")

    p = sub.add_parser("train", help="train students and the auxiliary head")
    p.add_argument("--config")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="training log (JSON Lines); default <out>.log.jsonl")

    p = sub.add_parser("eval", help="score a checkpoint on a corpus split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--split", default="test")

    p = sub.add_parser("predict", help="predict one CPG document")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--cpg", required=True)
    p.add_argument("--out")

    p = sub.add_parser("sweep-lambda", help="metrics across interpolation weights")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--grid", default="0:1:0.1")
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="valid")

    p = sub.add_parser("ablate-students", help="train once per student count")
    p.add_argument("--config")
    p.add_argument("--corpus", required=True)
    p.add_argument("--counts", default="1,2,3")
    p.add_argument("--out", required=True)

    p = sub.add_parser("report-cwe", help="per-CWE accuracy table")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--top", type=int, default=30)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    return ap


def _ensure_parent(path: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _cmd_ingest(args) -> RunConfig:
    records, stats = ingest_directory(args.input, args.max_nodes, dedup=not args.no_dedup, seed=args.seed)
    write_corpus(records, _ensure_parent(args.out))
    logger.info("ingested %s", stats)
    print(json.dumps(stats, sort_keys=True))
    cfg = {"max_nodes": args.max_nodes, "dedup": not args.no_dedup}
    return RunConfig("ingest", cfg, {"input": args.input}, {"corpus": args.out}, args.seed)


def _cmd_train(args) -> RunConfig:
    config = load_config(args.config)
    corpus = read_corpus(args.corpus)
    log_path = _ensure_parent(args.log or args.out + ".log.jsonl")
    with open(log_path, "w") as log_fh:
        def on_epoch(entry):
            log_fh.write(json.dumps(entry, sort_keys=True) + "\n")
            log_fh.flush()
        result = train(config, corpus, on_epoch=on_epoch)
    result.checkpoint.save(_ensure_parent(args.out))
    return RunConfig("train", config.to_dict(), {"corpus": args.corpus, "config": args.config},
                     {"checkpoint": args.out, "log": str(log_path)}, config.seed)


def _load_model(path: str) -> tuple[Checkpoint, DetectorModel]:
    ckpt = Checkpoint.load(path)
    return ckpt, DetectorModel.from_checkpoint(ckpt)


def _cmd_eval(args) -> RunConfig:
    ckpt, model = _load_model(args.ckpt)
    graphs = evaluation_split(read_corpus(args.corpus), args.split)
    branches = branch_probabilities(model, graphs)
    lam = model.config.lam
    report = {
        "split": args.split,
        "records": len(graphs),
        "lambda": lam,
        "selected_student": model.selected,
        "final": branches.metrics(lam).as_dict(),
        "graph": branches.metrics(1.0).as_dict(),
        "sequence": branches.metrics(0.0).as_dict(),
    }
    _ensure_parent(args.report).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(json.dumps(report["final"], sort_keys=True))
    return RunConfig("eval", ckpt.config.to_dict(), {"checkpoint": args.ckpt, "corpus": args.corpus},
                     {"report": args.report}, ckpt.config.seed)


def _cmd_predict(args) -> RunConfig | None:
    ckpt, model = _load_model(args.ckpt)
    g = parse_cpg_export(Path(args.cpg).read_text(encoding="utf-8"))
    out = predict(model, g).as_dict()
    out["function_id"] = g.function_id
    text = json.dumps(out, sort_keys=True)
    print(text)
    if not args.out:
        return None
    _ensure_parent(args.out).write_text(text + "\n")
    return RunConfig("predict", ckpt.config.to_dict(), {"checkpoint": args.ckpt, "cpg": args.cpg},
                     {"prediction": args.out}, ckpt.config.seed)


def _cmd_sweep(args) -> RunConfig:
    ckpt, model = _load_model(args.ckpt)
    graphs = evaluation_split(read_corpus(args.corpus), args.split)
    result = lambda_sweep(branch_probabilities(model, graphs), parse_grid(args.grid))
    result.write_csv(_ensure_parent(args.out))
    print(json.dumps({"best_lambda": result.best("accuracy")}))
    cfg = dict(ckpt.config.to_dict(), sweep={"grid": result.grid, "split": args.split})
    return RunConfig("sweep-lambda", cfg, {"checkpoint": args.ckpt, "corpus": args.corpus},
                     {"csv": args.out}, ckpt.config.seed)


def _cmd_ablate(args) -> RunConfig:
    config = load_config(args.config)
    counts = [int(c) for c in args.counts.split(",") if c.strip()]
    result = student_ablation(counts, config, read_corpus(args.corpus))
    result.write_csv(_ensure_parent(args.out))
    cfg = dict(config.to_dict(), ablation={"counts": result.grid})
    return RunConfig("ablate-students", cfg, {"corpus": args.corpus, "config": args.config},
                     {"csv": args.out}, config.seed)


def _cmd_report_cwe(args) -> RunConfig:
    ckpt, model = _load_model(args.ckpt)
    graphs = evaluation_split(read_corpus(args.corpus), args.split)
    branches = branch_probabilities(model, graphs)
    preds = decide(branches.final(model.config.lam)).tolist()
    table = per_cwe_accuracy(preds, branches.labels.tolist(), branches.cwe_tags, top=args.top)
    table.write_csv(_ensure_parent(args.out))
    cfg = dict(ckpt.config.to_dict(), report={"top": args.top, "split": args.split})
    return RunConfig("report-cwe", cfg, {"checkpoint": args.ckpt, "corpus": args.corpus},
                     {"csv": args.out}, ckpt.config.seed)


COMMANDS = {
    "ingest": _cmd_ingest,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "predict": _cmd_predict,
    "sweep-lambda": _cmd_sweep,
    "ablate-students": _cmd_ablate,
    "report-cwe": _cmd_report_cwe,
}


def run_command(argv: list[str] | None = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        run = COMMANDS[args.command](args)
    except (VulGraphError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"vulgraph {args.command}: error: {exc}", file=sys.stderr)
        return 1
    if run is not None:
        for output in run.outputs.values():
            write_run_config(output, run)
    return 0


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
