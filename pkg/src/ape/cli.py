"""Command-line harness: data generation, training, evaluation, ablation,
and cost profiling.  Reports land as JSON + CSV, plots as PNG/SVG."""

from __future__ import annotations

import argparse
import csv
import json
from pathlib import Path

import yaml

from .config import builtin_config_path, load_run_config


def _resolve_config(path: str):
    if path.startswith("builtin:"):
        return load_run_config(builtin_config_path(path.split(":", 1)[1]))
    return load_run_config(path)


def cmd_gen_data(args) -> int:
    from .datagen import write_coco_dataset
    from .train import SyntheticTaskDataset

    cfg = _resolve_config(args.config)
    out = Path(args.out)
    for spec in cfg.datasets:
        dataset = SyntheticTaskDataset(
            spec, cfg.model.image_size, (cfg.train.connectivity, cfg.train.min_area)
        )
        seeds = [spec.seed_base + i for i in range(min(spec.size, args.limit or spec.size))]
        path = write_coco_dataset(
            out / spec.name,
            seeds,
            dataset.scene_config,
            kind=spec.kind,
            transform=lambda record: dataset.transform(record.image_id, record),
        )
        print(f"wrote {path}")
    return 0


def cmd_train(args) -> int:
    from .train import Trainer

    if args.resume:
        trainer = Trainer.resume(args.resume, out_dir=args.out)
    else:
        cfg = _resolve_config(args.config)
        if args.out:
            cfg.out_dir = args.out
        trainer = Trainer(cfg)
    path = trainer.run(steps=args.steps)
    _plot_losses(trainer)
    print(f"checkpoint: {path}")
    return 0


def _plot_losses(trainer) -> None:
    if not trainer.loss_log:
        return
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    steps = [e["step"] for e in trainer.loss_log]
    losses = [e["loss"] for e in trainer.loss_log]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, losses, lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    fig.tight_layout()
    fig.savefig(Path(trainer.out_dir) / "loss_curve.png", dpi=120)
    plt.close(fig)


def cmd_eval(args) -> int:
    from .evalsuite import eval_detection, eval_segmentation
    from .grounding import grounding_eval
    from .train import load_model

    model, cfg, _bank = load_model(args.ckpt)
    if args.images:
        cfg.eval.images = args.images
    if args.suite == "det":
        report = eval_detection(model, cfg)
    elif args.suite == "seg":
        report = eval_segmentation(model, cfg)
    elif args.suite == "ground":
        report = grounding_eval(model, cfg, mode="intra")
    elif args.suite == "inter":
        report = grounding_eval(model, cfg, mode="inter")
    else:
        raise SystemExit(f"unknown suite {args.suite}")
    payload = report.to_dict()
    print(json.dumps(payload["metrics"], indent=2))
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(payload, indent=2))
        with open(out.with_suffix(".csv"), "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["metric", "value"])
            for key, value in payload["metrics"].items():
                writer.writerow([key, value])
    return 0


def cmd_ablate(args) -> int:
    from .ablation import run_ablation

    doc = yaml.safe_load(Path(args.matrix).read_text(encoding="utf-8"))
    base = _resolve_config(doc["base"])
    rows = run_ablation(
        base,
        axes=doc["axes"],
        seeds=doc.get("seeds", [0]),
        suites=doc.get("suites", ["det"]),
        out_dir=doc.get("out_dir", "runs/ablation"),
        steps=doc.get("steps"),
        quiet=not args.verbose,
    )
    print(json.dumps(rows, indent=2))
    return 0


def cmd_profile(args) -> int:
    from .profiling import profile_cost
    from .train import load_model

    model, cfg, _bank = load_model(args.ckpt)
    sentence_counts = [int(x) for x in args.prompts.split(",")]
    vocabulary_counts = [int(x) for x in args.vocab.split(",")]
    rows = profile_cost(
        model,
        vocabulary_counts=vocabulary_counts,
        sentence_counts=sentence_counts,
        repetitions=args.reps,
    )
    table = [row.to_dict() for row in rows]
    print(json.dumps(table, indent=2))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "cost.json").write_text(json.dumps(table, indent=2))
        with open(out / "cost.csv", "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(table[0].keys()))
            writer.writeheader()
            writer.writerows(table)
        _plot_cost(rows, out / "cost.svg")
    return 0


def _plot_cost(rows, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    labels = [f"{r.label[:3]}-{r.prompt_count}" for r in rows]
    ax.bar(labels, [r.speed_drop_pct for r in rows])
    ax.set_ylabel("speed drop from fusion (%)")
    ax.axhline(0, color="k", lw=0.5)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ape")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render datasets to PNG + COCO-style JSON")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--limit", type=int, default=None, help="cap images per dataset")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run the single-stage training loop")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one suite")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--suite", required=True, choices=["det", "seg", "ground", "inter"])
    p.add_argument("--images", type=int, default=None)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train + compare along ablation axes")
    p.add_argument("--matrix", required=True)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("profile", help="fusion cost table across prompt counts")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prompts", default="1,128,1280")
    p.add_argument("--vocab", default="80,1203")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_profile)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "train" and not (args.config or args.resume):
        raise SystemExit("train needs --config or --resume")
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
