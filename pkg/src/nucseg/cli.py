"""Command-line entry point.

Subcommands: synth, pretrain, finetune, eval, postprocess, version.

Exit codes: 0 success; 2 usage error (bad flags or subcommand); 3 invalid
config or malformed input file; 4 missing file; 5 runtime failure
(including training divergence). Every pipeline run writes a manifest
(tool version plus the full effective config, seeds included) into its
output directory, which is enough to reproduce the run.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .dataio import (
    CheckpointSchemaError,
    load_checkpoint,
    load_dataset,
    load_flat_dataset,
    read_label_map,
    write_label_map,
)
from .metrics import evaluate_dataset
from .postprocess import ternary_to_instances
from .pretrain import TrainingDiverged, pretrain
from .runconfig import ConfigError, RunConfig, default_config, load_config
from .segmenter import Segmenter, finetune, load_segmenter, transfer_encoder
from .synth import write_synth_dataset

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING = 4
EXIT_RUNTIME = 5


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nucseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="config file (defaults used when omitted)")
        p.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="SECTION.KEY=VALUE",
            help="override one config field (repeatable)",
        )
        p.add_argument(
            "--dump-config",
            action="store_true",
            help="print the effective config and exit without running",
        )

    sub.add_parser("version", help="print the package version")

    p = sub.add_parser("synth", help="write a synthetic dataset (images/ and labels/)")
    add_config_flags(p)
    p.add_argument("--out", required=True, help="dataset root to create")
    p.add_argument("--seed", type=int, help="override synth.seed")

    p = sub.add_parser("pretrain", help="self-supervised encoder pretraining")
    add_config_flags(p)
    p.add_argument("--out", required=True, help="run directory for checkpoints and report")
    p.add_argument("--data", help="override data.root")
    p.add_argument("--resume", help="checkpoint to resume from")

    p = sub.add_parser("finetune", help="train the three-class segmenter")
    add_config_flags(p)
    p.add_argument("--encoder-ckpt", help="pretraining checkpoint to transfer from")
    p.add_argument("--from-scratch", action="store_true", help="skip encoder transfer")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--data", help="override data.root")

    p = sub.add_parser("eval", help="AJI/Dice evaluation of a segmentation checkpoint")
    add_config_flags(p)
    p.add_argument("--model", required=True, help="segmentation checkpoint")
    p.add_argument("--data", help="override data.root")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--out", required=True, help="report CSV path")

    p = sub.add_parser("postprocess", help="ternary mask file -> instance label map file")
    add_config_flags(p)
    p.add_argument("--input", required=True, help="ternary mask image (values 0..2)")
    p.add_argument("--out", required=True, help="instance label map to write")
    return parser


def _effective_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else default_config()
    for item in args.set:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        dotted, value = item.split("=", 1)
        section, key = dotted.split(".", 1)
        cfg.set(section.strip(), key.strip(), value)
    if getattr(args, "data", None):
        cfg.set("data", "root", args.data)
    if getattr(args, "seed", None) is not None and args.command == "synth":
        cfg.set("synth", "seed", str(args.seed))
    return cfg


def _write_manifest(out_dir: Path, command: str, cfg: RunConfig, name: str = "manifest.json") -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"tool": "nucseg", "version": __version__, "command": command, "config": cfg.dump()}
    (out_dir / name).write_text(json.dumps(manifest, indent=2) + "\n")
    (out_dir / "config.cfg").write_text(cfg.dump())


def _load_split_dataset(cfg: RunConfig, split: str):
    data = cfg.values["data"]
    if split == "test":
        return load_flat_dataset(data["root"], split="test")
    return load_dataset(data["root"], split_ratio=data["split_ratio"], seed=data["seed"])


def _run(args) -> int:
    if args.command == "version":
        print(__version__)
        return EXIT_OK

    cfg = _effective_config(args)
    if args.dump_config:
        sys.stdout.write(cfg.dump())
        return EXIT_OK

    if args.command == "synth":
        out = Path(args.out)
        write_synth_dataset(cfg.synth_config(), cfg.get("synth", "n_images"), out)
        _write_manifest(out, "synth", cfg)
        print(f"wrote {cfg.get('synth', 'n_images')} images to {out}")
        return EXIT_OK

    if args.command == "pretrain":
        dataset = _load_split_dataset(cfg, "train")
        out = Path(args.out)
        _write_manifest(out, "pretrain", cfg)
        _, _, report = pretrain(
            dataset,
            cfg.pretrain_config(),
            out_dir=out,
            config_snapshot=cfg.dump(),
            resume_from=args.resume,
        )
        msr = report.final_msr
        print(f"pretraining done: {len(report.records)} steps, final msr {msr}")
        return EXIT_OK

    if args.command == "finetune":
        if not args.from_scratch and not args.encoder_ckpt:
            raise ConfigError("finetune needs --encoder-ckpt unless --from-scratch is given")
        model_cfg = cfg.seg_model_config()
        if args.from_scratch:
            model = Segmenter(model_cfg)
        else:
            ckpt = load_checkpoint(args.encoder_ckpt)
            model = transfer_encoder(ckpt.encoder_params, ckpt.arch, model_cfg)
        dataset = _load_split_dataset(cfg, "train")
        out = Path(args.out)
        _write_manifest(out, "finetune", cfg)
        _, report = finetune(
            model,
            dataset,
            cfg.finetune_config(),
            post_cfg=cfg.postprocess_config(),
            out_dir=out,
            config_snapshot=cfg.dump(),
        )
        last = report.records[-1]
        print(f"finetuning done: {last.epoch} epochs, final loss {last.loss:.6g}, val aji {last.val_aji}")
        return EXIT_OK

    if args.command == "eval":
        ckpt = load_checkpoint(args.model)
        from .embedder import EncoderConfig
        from .segmenter import SegModelConfig

        enc_cfg = EncoderConfig(
            architecture_id=ckpt.arch["architecture_id"],
            input_size=ckpt.arch["input_size"],
            embedding_dim=ckpt.arch["embedding_dim"],
        )
        model = load_segmenter(ckpt, SegModelConfig(encoder_cfg=enc_cfg))
        dataset = _load_split_dataset(cfg, args.split)
        report = evaluate_dataset(
            model, dataset, cfg.postprocess_config(), split=args.split, out_csv=args.out
        )
        _write_manifest(Path(args.out).parent, "eval", cfg)
        print(f"eval on {len(report.rows)} images: mean aji {report.mean_aji:.4f}, mean dice {report.mean_dice:.4f}")
        return EXIT_OK

    if args.command == "postprocess":
        mask = read_label_map(args.input)
        labels = ternary_to_instances(mask, cfg.postprocess_config())
        write_label_map(args.out, labels)
        out = Path(args.out)
        _write_manifest(out.parent, "postprocess", cfg, name=f"{out.stem}.manifest.json")
        print(f"wrote {int(labels.max())} instances to {args.out}")
        return EXIT_OK

    raise AssertionError(f"unhandled command {args.command}")


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return _run(args)
    except (ConfigError, CheckpointSchemaError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (TrainingDiverged, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
