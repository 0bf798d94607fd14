"""Command-line entry point: ``metar {synth,pretrain,train,eval,ablate,stats}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, load_embeddings, save_checkpoint, save_embeddings
from .config import ConfigError, RunConfig, parse_config_file
from .evaluation import EvalReport, evaluate, format_report, write_report
from .kg import BackgroundMode, dataset_stats, generate_synthetic, load_benchmark, write_benchmark
from .train import (
    INIT_STREAM,
    PRETRAIN_STREAM,
    eval_support_triples,
    init_params,
    pretrain_transe,
    train_loop,
)

logger = logging.getLogger("metar")

COMMANDS = ("synth", "pretrain", "train", "eval", "ablate", "stats")
ABLATION_LABELS = {"standard": "standard", "minus_g": "-g", "minus_g_minus_r": "-g -r"}


class CommandError(RuntimeError):
    pass


def _split_overrides(extra: list[str]) -> dict[str, str]:
    out = {}
    i = 0
    while i < len(extra):
        token = extra[i]
        if not token.startswith("--"):
            raise ConfigError(f"unexpected argument {token!r}; overrides look like --key value")
        key = token[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"missing value for --{key}")
            i += 1
            value = extra[i]
        out[key.replace("-", "_")] = value
        i += 1
    return out


def _data_dir(cfg: RunConfig) -> Path:
    if not cfg.data_dir:
        raise CommandError("no dataset directory: set data_dir or METAR_DATA_DIR")
    return Path(cfg.data_dir)


def _load(cfg: RunConfig):
    return load_benchmark(_data_dir(cfg), BackgroundMode.parse(cfg.background))


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(report: EvalReport, cfg: RunConfig, label: str) -> None:
    sys.stdout.write(format_report(report, label) if cfg.report_format == "text" else json.dumps(report.as_dict(), indent=2) + "\n")
    if cfg.report:
        write_report(report, cfg.report, cfg.report_format)


def cmd_synth(cfg: RunConfig) -> Path:
    bundle = generate_synthetic(cfg.synth_config())
    out = write_benchmark(bundle, cfg.out_dir)
    logger.info("wrote synthetic benchmark to %s", out)
    return out


def _pretrain(cfg: RunConfig, bundle, extra=()):
    rng = np.random.default_rng([cfg.seed, PRETRAIN_STREAM])
    return pretrain_transe(
        bundle, cfg.transe_dim, cfg.pretrain_epochs, cfg.pretrain_lr, cfg.pretrain_margin, rng,
        batch_size=cfg.pretrain_batch, extra_triples=extra,
    )


def cmd_pretrain(cfg: RunConfig) -> Path:
    mode = BackgroundMode.parse(cfg.background)
    if mode is not BackgroundMode.PRE_TRAIN:
        raise CommandError(f"pretrain needs background=pretrain (got {mode.value}); the background graph trains the embeddings")
    bundle = _load(cfg)
    if not bundle.background_triples:
        raise CommandError("no background triples to pretrain on")
    model = _pretrain(cfg, bundle)
    path = Path(cfg.checkpoint) if cfg.checkpoint else _out(cfg) / "pretrained.ckpt"
    save_embeddings(model, path)
    logger.info("wrote pretrained embeddings to %s", path)
    return path


def _initial_params(cfg: RunConfig, bundle):
    hp = cfg.hyperparams()
    pretrained = None
    if cfg.init == "from_pretrained":
        pretrained = load_embeddings(cfg.pretrained).entity
    return init_params(hp, bundle.vocab, np.random.default_rng([cfg.seed, INIT_STREAM]), pretrained)


def _train(cfg: RunConfig, bundle, ablation: str, log_path: Path | None = None):
    params = _initial_params(cfg, bundle)
    log = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        def on_eval(record):
            if log:
                log.write(json.dumps(record) + "\n")
                log.flush()

        return train_loop(bundle, cfg.sampler(), cfg.train_config(ablation), cfg.hyperparams(), params, on_eval=on_eval)
    finally:
        if log:
            log.close()


def cmd_train(cfg: RunConfig) -> Path:
    if cfg.ablation == "minus_g_minus_r":
        raise CommandError("ablation minus_g_minus_r is a TransE baseline; use 'ablate'")
    bundle = _load(cfg)
    out = _out(cfg)
    result = _train(cfg, bundle, cfg.ablation, out / "train_log.jsonl")
    path = Path(cfg.checkpoint) if cfg.checkpoint else out / "best.ckpt"
    save_checkpoint(result.best, path)
    save_checkpoint(result.last, out / "last.ckpt")
    (out / "config.txt").write_text(cfg.dumps(), encoding="utf-8")
    logger.info("best dev hits@10 %.4f at iteration %d -> %s", result.best.best_hits10, result.best.iteration, path)
    return path


def cmd_eval(cfg: RunConfig, checkpoint: str | None = None) -> EvalReport:
    path = checkpoint or cfg.checkpoint
    if not path:
        raise CommandError("no checkpoint given")
    if not Path(path).exists():
        raise CommandError(f"checkpoint not found: {path}")
    ckpt = load_checkpoint(path)
    bundle = _load(cfg)
    mode = "minus_g" if cfg.ablation == "minus_g" else "standard"
    report = evaluate(ckpt.params, bundle, cfg.eval_split, cfg.k, mode, cfg.hyperparams(), seed=cfg.seed)
    _emit(report, cfg, f"MetaR ({cfg.k}-shot)")
    return report


def run_ablation(cfg: RunConfig, bundle) -> dict[str, EvalReport]:
    hp = cfg.hyperparams()
    reports = {}
    for ablation in ("standard", "minus_g"):
        result = _train(cfg, bundle, ablation)
        reports[ablation] = evaluate(
            result.best.params, bundle, cfg.eval_split, cfg.k, cfg.train_config(ablation).eval_mode, hp, seed=cfg.seed
        )
    transe = _pretrain(cfg, bundle, extra=eval_support_triples(bundle, cfg.k))
    reports["minus_g_minus_r"] = evaluate(None, bundle, cfg.eval_split, cfg.k, "minus_g_minus_r", transe=transe)
    return reports


def format_ablation(reports: dict[str, EvalReport]) -> str:
    lines = [f"{'ablation':<12}{'Hits@10':>9}{'MRR':>8}{'Hits@5':>8}{'Hits@1':>8}"]
    for key, label in ABLATION_LABELS.items():
        r = reports[key]
        lines.append(f"{label:<12}{r.hits10:>9.3f}{r.mrr:>8.3f}{r.hits5:>8.3f}{r.hits1:>8.3f}")
    return "\n".join(lines) + "\n"


def cmd_ablate(cfg: RunConfig) -> dict[str, EvalReport]:
    bundle = _load(cfg)
    reports = run_ablation(cfg, bundle)
    table = format_ablation(reports)
    sys.stdout.write(table)
    if cfg.report:
        Path(cfg.report).write_text(table, encoding="utf-8")
    return reports


def cmd_stats(cfg: RunConfig) -> dict:
    stats = dataset_stats(_load(cfg)).as_dict()
    sys.stdout.write(json.dumps(stats, indent=2) + "\n")
    return stats


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="metar",
        description="Few-shot link prediction with relation and gradient meta.",
        epilog="Any config key can be overridden with --key value (e.g. --k 5 --max_iters 2000).",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("checkpoint_arg", nargs="?", help="checkpoint path (eval only)")
    parser.add_argument("--config", help="flat 'key = value' config file")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        file_values = parse_config_file(args.config) if args.config else {}
        cfg = RunConfig.from_sources(file_values, _split_overrides(extra))
        if args.checkpoint_arg and args.command != "eval":
            raise ConfigError(f"unexpected argument {args.checkpoint_arg!r}")
        if args.command == "eval":
            cmd_eval(cfg, args.checkpoint_arg)
        else:
            globals()[f"cmd_{args.command}"](cfg)
    except (ConfigError, CommandError, ValueError, KeyError, OSError) as exc:
        message = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
        print(f"metar {args.command}: error: {message}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
