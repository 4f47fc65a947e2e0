"""Command line entry point: ``structdial <subcommand> [flags]``.

Every run writes into ``$STRUCTDIAL_RUN_ROOT/<timestamp>-seed<seed>/`` unless
``--run-dir`` is given. ``STRUCTDIAL_THREADS`` sets the torch thread count
(default 1, which keeps runs bit-reproducible).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

import torch

from ..checkpoint import load_checkpoint
from ..errors import ConfigError, StructDialError
from ..evaluation import RankingInstance, compute_report, load_predictions, save_predictions
from ..synthcorpus import SynthConfig, generate, split, write_corpus
from ..text.corpus import load_corpus
from .config import RunConfig, _parse_pairs, config_from_mapping, dump_config, parse_config_text
from .gradsuite import LOSSES, run_suite
from .train import ModelScorer, run_dap_posttrain, run_finetune, run_mtf, sweep_delta, DEFAULT_SWEEP

log = logging.getLogger("structdial")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_CONFIG = 0, 1, 2, 3


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="config file (key = value lines or a JSON object)")
    p.add_argument("--run-dir", help="output directory (default: timestamped under the run root)")
    group = p.add_argument_group("config keys (override the file)")
    for f in fields(RunConfig):
        group.add_argument("--" + f.name.replace("_", "-"), dest=f"cfg_{f.name}", metavar="V")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="structdial", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--out", help="output directory (default: a new run directory)")
    p.add_argument("--split", default="0.8,0.1,0.1", help="train,valid,test fractions")
    for f in fields(SynthConfig):
        p.add_argument("--" + f.name.replace("_", "-"), dest=f"synth_{f.name}", type=type(f.default),
                       default=f.default)

    p = sub.add_parser("posttrain", help="domain-adaptive post-training")
    _add_config_flags(p)
    p.add_argument("--resume", help="checkpoint to resume from")

    p = sub.add_parser("finetune", help="fine-tune on the matching loss (optionally from --init-checkpoint)")
    _add_config_flags(p)

    p = sub.add_parser("mtf", help="multi-task fine-tuning")
    _add_config_flags(p)

    p = sub.add_parser("sweep", help="permutation-ratio sweep of the configured regime")
    _add_config_flags(p)
    p.add_argument("--deltas", default=",".join(str(d) for d in DEFAULT_SWEEP))

    p = sub.add_parser("eval", help="metrics from a prediction file or a checkpoint")
    p.add_argument("--predictions", help="JSONL with id, scores, labels")
    p.add_argument("--checkpoint")
    p.add_argument("--corpus")
    p.add_argument("--pairs", help="n:k list such as 10:1,10:2,10:5")
    p.add_argument("--max-len", type=int, default=128)
    p.add_argument("--max-utterances", type=int, default=20)
    p.add_argument("--save-predictions")
    p.add_argument("--json", action="store_true", help="print the report as JSON")

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--coords", type=int, default=2, help="sampled coordinates per tensor")
    p.add_argument("--losses", default=",".join(LOSSES))
    return parser


def _run_config(args, regime: str | None) -> RunConfig:
    data = {}
    if args.config:
        data.update(parse_config_text(Path(args.config).read_text(encoding="utf-8")))
    for f in fields(RunConfig):
        value = getattr(args, f"cfg_{f.name}")
        if value is not None:
            data[f.name] = value
    if regime is not None:
        data["regime"] = regime
    return config_from_mapping(data)


def _run_dir(explicit: str | None, seed: int) -> Path:
    if explicit:
        path = Path(explicit)
    else:
        root = Path(os.environ.get("STRUCTDIAL_RUN_ROOT", "runs"))
        stamp = time.strftime("%Y%m%d-%H%M%S")
        path = root / f"{stamp}-seed{seed}"
        n = 1
        while path.exists():
            path = root / f"{stamp}-seed{seed}-{n}"
            n += 1
    path.mkdir(parents=True, exist_ok=True)
    return path


_FILE_HANDLERS: list[logging.Handler] = []


def _attach_log(run_dir: Path) -> None:
    handler = logging.FileHandler(run_dir / "run.log", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger().addHandler(handler)
    _FILE_HANDLERS.append(handler)


def _detach_logs() -> None:
    root = logging.getLogger()
    while _FILE_HANDLERS:
        handler = _FILE_HANDLERS.pop()
        root.removeHandler(handler)
        handler.close()


def _start(args, cfg: RunConfig) -> Path:
    run_dir = _run_dir(args.run_dir, cfg.seed)
    _attach_log(run_dir)
    (run_dir / "config.txt").write_text(dump_config(cfg) + f"# threads = {torch.get_num_threads()}\n",
                                        encoding="utf-8")
    log.info("run directory %s", run_dir)
    return run_dir


def _print_report(report, as_json: bool = False) -> None:
    print(report.to_json() if as_json else report.to_text(), end="" if not as_json else "\n")


def cmd_synth(args) -> int:
    cfg = SynthConfig(**{f.name: getattr(args, f"synth_{f.name}") for f in fields(SynthConfig)})
    out = Path(args.out) if args.out else _run_dir(None, cfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    corpus = generate(cfg)
    fractions = [float(x) for x in args.split.split(",") if x.strip()]
    names = ("train", "valid", "test")[: len(fractions)]
    if len(fractions) == 1:
        parts = [corpus]
    else:
        parts = split(corpus, fractions, cfg.seed)
    for name, part in zip(names, parts):
        write_corpus(part, out / f"{name}.jsonl", cfg)
        print(f"{out / (name + '.jsonl')}\t{len(part)} dialogues")
    return EXIT_OK


def cmd_train(args, regime: str | None) -> int:
    cfg = _run_config(args, regime)
    run_dir = _start(args, cfg)
    if cfg.regime == "dap-posttrain":
        result = run_dap_posttrain(cfg, run_dir=run_dir, resume=getattr(args, "resume", None))
    elif cfg.regime == "mtf":
        result = run_mtf(cfg, run_dir=run_dir)
    else:
        result = run_finetune(cfg, run_dir=run_dir)
    if result.log.steps:
        last = result.log.steps[-1]
        print(f"steps\t{last['step']}\nfinal_total\t{last['total']:.6f}")
    if result.report is not None:
        print(f"best_epoch\t{result.best_epoch}")
        _print_report(result.report)
    if result.test_report is not None:
        print("# test")
        _print_report(result.test_report)
    print(f"run_dir\t{run_dir}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _run_config(args, None)
    if cfg.regime not in ("dap-finetune", "baseline-finetune"):
        regime = "dap-finetune" if cfg.init_checkpoint else "baseline-finetune"
        return cmd_train(args, regime)
    return cmd_train(args, None)


def cmd_sweep(args) -> int:
    cfg = _run_config(args, None)
    try:
        deltas = [float(x) for x in args.deltas.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --deltas: {args.deltas!r}") from exc
    if len(deltas) < 2 or 0.0 not in deltas:
        raise ConfigError("a sweep needs at least two deltas including 0")
    run_dir = _start(args, cfg)
    rows = sweep_delta(cfg, deltas, run_dir=run_dir)
    print(f"delta\t{rows[0].metric}")
    for row in rows:
        print(f"{row.delta:.2f}\t{row.value:.6f}")
    print(f"run_dir\t{run_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    pairs = _parse_pairs(args.pairs) if args.pairs else None
    if args.predictions:
        instances = load_predictions(args.predictions)
    elif args.checkpoint and args.corpus:
        ckpt = load_checkpoint(args.checkpoint)
        model = ckpt.build_model()
        examples = load_corpus(args.corpus)
        scorer = ModelScorer(model, ckpt.vocab, args.max_len, args.max_utterances)
        scores = scorer.score_many(examples)
        instances = [RankingInstance(ex.id, s, ex.labels, ex.turns, ex.mean_utterance_length)
                     for ex, s in zip(examples, scores)]
    else:
        print("eval needs --predictions, or --checkpoint with --corpus", file=sys.stderr)
        return EXIT_USAGE
    if args.save_predictions:
        save_predictions(instances, args.save_predictions)
    _print_report(compute_report(instances, pairs), args.json)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    losses = [x.strip() for x in args.losses.split(",") if x.strip()]
    unknown = set(losses) - set(LOSSES)
    if unknown:
        print(f"unknown loss(es): {sorted(unknown)}; choose from {LOSSES}", file=sys.stderr)
        return EXIT_USAGE

    def progress(res, seconds):
        status = "ok" if res.passed else "FAIL"
        print(f"{res.loss}\tseed={res.seed}\tmax_rel={res.report.max_rel_error:.3e}\t{seconds:.2f}s\t{status}")

    results = run_suite(args.seeds, losses, args.coords, progress=progress)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_FAIL


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    root = logging.getLogger()
    if not root.handlers:
        console = logging.StreamHandler()
        console.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        console.setLevel(logging.INFO if args.verbose else logging.WARNING)
        root.addHandler(console)
    root.setLevel(logging.INFO)
    torch.set_num_threads(int(os.environ.get("STRUCTDIAL_THREADS", "1")))
    handlers = {
        "synth": cmd_synth,
        "posttrain": lambda a: cmd_train(a, "dap-posttrain"),
        "finetune": cmd_finetune,
        "mtf": lambda a: cmd_train(a, "mtf"),
        "sweep": cmd_sweep,
        "eval": cmd_eval,
        "gradcheck": cmd_gradcheck,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StructDialError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    finally:
        _detach_logs()


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
