"""Ablation runner: trains fresh models varying exactly one axis per run.

Axes mirror the study grid: fusion mode (none / object-word /
region-sentence), history bank on/off, text encoder slot seed,
thing-stuff equalization on/off, and the presence of class-agnostic
training data.  Every run in a matrix shares the same step budget so rows
stay comparable.
"""

from __future__ import annotations

import copy
import csv
import json
from dataclasses import replace
from pathlib import Path

from .config import RunConfig, run_config_from_dict
from .evalsuite import eval_detection, eval_segmentation
from .grounding import grounding_eval
from .losses import CLASS_AGNOSTIC
from .train import Trainer


def apply_axis(cfg: RunConfig, axis: str, value) -> RunConfig:
    cfg = run_config_from_dict(copy.deepcopy(cfg.to_dict()))
    if axis == "fusion":
        cfg.model.fusion_mode = value
    elif axis == "bank":
        cfg.train.use_bank = bool(value)
    elif axis == "equalize":
        cfg.train.equalize_stuff = bool(value)
    elif axis == "text_seed":
        cfg.text_slot_seed = int(value)
    elif axis == "class_agnostic_data":
        if not value:
            cfg.datasets = [d for d in cfg.datasets if d.kind != CLASS_AGNOSTIC]
    elif axis == "assign":
        cfg.train.assign = value
    else:
        raise ValueError(f"unknown ablation axis {axis!r}")
    return cfg


def _run_suites(model, cfg: RunConfig, suites) -> dict:
    out = {}
    for suite in suites:
        if suite == "det":
            report = eval_detection(model, cfg)
        elif suite == "seg":
            report = eval_segmentation(model, cfg)
        elif suite == "ground":
            report = grounding_eval(model, cfg, mode="intra")
        elif suite == "inter":
            report = grounding_eval(model, cfg, mode="inter")
        else:
            raise ValueError(f"unknown suite {suite!r}")
        for key, value in report.metrics.items():
            out[f"{suite}.{key}"] = value
    return out


def run_ablation(
    base_cfg: RunConfig,
    axes: dict,
    seeds,
    suites,
    out_dir,
    steps: int = None,
    quiet: bool = True,
) -> list:
    """Train and evaluate the full matrix; returns one row dict per run."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for axis, values in axes.items():
        for value in values:
            for seed in seeds:
                cfg = apply_axis(base_cfg, axis, value)
                if steps is not None:
                    cfg.train.steps = int(steps)
                cfg.train.seed = int(seed)
                run_name = f"{axis}-{value}-seed{seed}"
                cfg.out_dir = str(out_dir / run_name)
                trainer = Trainer(cfg)
                trainer.run(quiet=quiet)
                metrics = _run_suites(trainer.model, cfg, suites)
                row = {"axis": axis, "value": value, "seed": int(seed), **metrics}
                rows.append(row)
                (out_dir / run_name / "metrics.json").write_text(
                    json.dumps(row, indent=2)
                )
    write_comparison(rows, out_dir)
    return rows


def write_comparison(rows, out_dir) -> None:
    out_dir = Path(out_dir)
    (out_dir / "comparison.json").write_text(json.dumps(rows, indent=2))
    if rows:
        keys = sorted({k for row in rows for k in row})
        with open(out_dir / "comparison.csv", "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=keys)
            writer.writeheader()
            writer.writerows(rows)


def seed_means(rows, metric: str) -> dict:
    """(axis, value) -> metric averaged over seeds."""
    sums, counts = {}, {}
    for row in rows:
        if metric not in row:
            continue
        key = (row["axis"], row["value"])
        sums[key] = sums.get(key, 0.0) + row[metric]
        counts[key] = counts.get(key, 0) + 1
    return {key: sums[key] / counts[key] for key in sums}
