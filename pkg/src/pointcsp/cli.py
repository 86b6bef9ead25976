"""Command-line entry point.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import checkpoint as ck
from . import training as tr
from .config import ConfigError, TrainingConfig, architecture_hash, dumps, load, parse
from .evaluation import evaluate, export_embeddings, extract_features
from .pointcloud import read_pointcloud, write_pointcloud

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("pointcsp")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pointcsp", description="Cross-sample semantic propagation toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name: str, help: str, out_required: bool = True):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", type=Path, help="key = value config file")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--out", type=Path, required=out_required)
        return p

    p = command("gen-corpus", "generate a synthetic labeled corpus")
    p.add_argument("--binary", action="store_true", help="write .pcspb files")

    p = command("pretrain", "self-distillation pretraining")
    p.add_argument("--corpus", type=Path, help="directory of point-cloud files (default: generate)")

    p = command("finetune", "segmentation finetuning with optional distillation")
    p.add_argument("--checkpoint", type=Path, help="pretrained checkpoint (omit to start from scratch)")
    p.add_argument("--corpus", type=Path)

    p = command("ablate", "component ablation plus batch-size sweep")
    p.add_argument("--corpus-seeds", type=_int_list, default=[0, 1, 2])
    p.add_argument("--batch-sizes", type=_int_list, default=[1, 2, 4, 8])
    p.add_argument("--no-consistency", action="store_true", help="skip the CSP-off pretraining comparison")
    p.add_argument("--parallel", action="store_true", help="run arms in separate processes")

    p = command("eval", "probe a checkpoint's student features")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--corpus", type=Path)
    p.add_argument("--batch-size", type=int, default=1)

    p = command("export-embeddings", "write per-point student features to CSV")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--corpus", type=Path)

    p = command("grad-check", "finite-difference audit of every loss", out_required=False)
    p.add_argument("--seeds", type=int, default=5)
    return parser


def resolve_config(args) -> TrainingConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError([])
        key, value = item.split("=", 1)
        overrides[key.strip()] = value
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.config is not None:
        return load(args.config, overrides)
    return parse("", overrides)


def _corpus(args, cfg: TrainingConfig):
    if getattr(args, "corpus", None) is None:
        return tr.corpus_for(cfg)
    files = sorted(p for p in args.corpus.iterdir() if p.suffix in (".pcsp", ".pcspb"))
    if len(files) < 2:
        raise ValueError(f"{args.corpus}: need at least two point-cloud files")
    return [read_pointcloud(f) for f in files]


def _prepare_out(args, cfg: TrainingConfig) -> Path:
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "config.lock").write_text(dumps(cfg))
    return args.out


def cmd_gen_corpus(args, cfg):
    out = _prepare_out(args, cfg)
    corpus_dir = out / "corpus"
    corpus_dir.mkdir(exist_ok=True)
    ext = ".pcspb" if args.binary else ".pcsp"
    scenes = tr.corpus_for(cfg)
    for pc in scenes:
        write_pointcloud(pc, corpus_dir / f"{pc.scene_id}{ext}")
    print(f"wrote {len(scenes)} scenes to {corpus_dir}")


def cmd_pretrain(args, cfg):
    from .report import plot_loss_curves

    out = _prepare_out(args, cfg)
    train, _ = tr.split(cfg, _corpus(args, cfg))
    result = tr.run_pretrain(cfg, train, out)
    if result.history:
        plot_loss_curves(result.history, out / "figures" / "pretrain_loss.png",
                         keys=("loss_total", "loss_csc", "loss_geo"))
        print(f"pretrained {len(result.history)} steps; final loss {result.history[-1]['loss_total']:.5f}")
    print(f"checkpoint: {out / 'checkpoints' / f'step_{result.checkpoint.step}.ckpt'}")


def _load_checkpoint(path, cfg):
    return ck.load(path, architecture_hash(cfg))


def cmd_finetune(args, cfg):
    from .report import plot_loss_curves

    out = _prepare_out(args, cfg)
    pretrained = None if args.checkpoint is None else _load_checkpoint(args.checkpoint, cfg)
    train, test = tr.split(cfg, _corpus(args, cfg))
    arm = ("csp" if pretrained else "scratch") + ("_spd" if cfg.finetune.spd_enabled else "")
    result = tr.run_finetune(cfg, pretrained, train, test, out, arm=arm)
    if result.history:
        plot_loss_curves(result.history, out / "figures" / "finetune_loss.png",
                         keys=("loss_total", "loss_task", "loss_spd"))
    s = result.summary
    print(f"arm={arm} acc_linear={s['acc_linear']:.4f} miou={s['miou']:.4f} acc_knn={s['acc_knn']:.4f}")


def cmd_ablate(args, cfg):
    out = _prepare_out(args, cfg)
    table = tr.run_ablation(cfg, args.corpus_seeds, out, args.batch_sizes,
                            consistency=not args.no_consistency, parallel=args.parallel)
    for arm_dir in sorted((out).glob("corpus_*/arms/*")):
        log.info("arm summary at %s", arm_dir / "metrics" / "summary.json")
    print("corpus_seed,arm,miou,acc_linear,acc_knn")
    for r in table["arms"]:
        print(f"{r['corpus_seed']},{r['arm']},{r['miou']:.4f},{r['acc_linear']:.4f},{r['acc_knn']:.4f}")


def cmd_eval(args, cfg):
    out = _prepare_out(args, cfg)
    ckpt = _load_checkpoint(args.checkpoint, cfg)
    train, test = tr.split(cfg, _corpus(args, cfg))
    summary = evaluate(ckpt.student, train, test, cfg, arm=ckpt.meta.get("arm", ckpt.kind),
                       batch_size=args.batch_size)
    (out / "metrics").mkdir(exist_ok=True)
    (out / "metrics" / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps({k: summary[k] for k in ("acc_knn", "acc_linear", "miou", "consistency_ratio")}))


def cmd_export(args, cfg):
    out = _prepare_out(args, cfg)
    ckpt = _load_checkpoint(args.checkpoint, cfg)
    feats, labels, sids, _ = extract_features(ckpt.student, _corpus(args, cfg), cfg)
    path = export_embeddings(feats, labels, sids, out / "embeddings.csv")
    print(f"wrote {len(feats)} rows to {path}")


def cmd_grad_check(args, cfg):
    from .diagnostics import format_reports, run_grad_check

    reports = run_grad_check(seeds=range(cfg.seed, cfg.seed + args.seeds))
    print(format_reports(reports))
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "grad_check.json").write_text(json.dumps(
            [{"loss": r.loss, "seed": r.seed, "max_rel_error": r.max_rel_error, "worst": r.worst_param}
             for r in reports], indent=2))
    return EXIT_OK if all(r.ok for r in reports) else EXIT_RUNTIME


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "ablate": cmd_ablate,
    "eval": cmd_eval,
    "export-embeddings": cmd_export,
    "grad-check": cmd_grad_check,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        issues = exc.issues or ["--set expects KEY=VALUE"]
        for issue in issues:
            print(f"{args.config or '<flags>'}: {issue}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        code = COMMANDS[args.command](args, cfg)
    except (ck.IncompatibleCheckpoint, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID if isinstance(exc, ck.IncompatibleCheckpoint) else EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        log.debug("command failed", exc_info=True)
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
