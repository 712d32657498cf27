"""Single-stage multi-dataset training loop.

One optimizer pass mixes every dataset kind through the ratio-weighted
sampler; the per-kind supervision profile decides which loss terms train.
All per-step randomness (dataset choice, sample indices, federated
negatives, bank negatives) is derived statelessly from (seed, step), so
resuming from a checkpoint reproduces the interrupted run bitwise.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import yaml

from . import datagen, prompts as prompts_mod
from .bank import EmbeddingBank
from .config import DatasetSpec, RunConfig
from .datagen import TAXONOMY, AnnotationRecord, GroundingTriple
from .equalize import decompose_stuff
from .evalsuite import category_prompts
from .losses import (
    CLASS_AGNOSTIC,
    EXHAUSTIVE,
    FEDERATED,
    GROUNDING_BOX,
    GROUNDING_MASK,
    TrainTarget,
    hungarian_assign,
    iou_assign,
    total_loss,
)
from .model import ModelConfig, Perceiver
from .prompts import SENTENCE, Prompt, TextEncoderSlot, encode_prompts


def phrase_id(text: str) -> int:
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 2  # keep it positive


def downsample_mask(mask: np.ndarray, out_size: int) -> np.ndarray:
    h, w = mask.shape
    if h == out_size:
        return mask.astype(bool)
    factor = h // out_size
    if factor * out_size != h:
        raise ValueError("mask size must divide the image size")
    blocks = mask.reshape(out_size, factor, out_size, factor).mean(axis=(1, 3))
    return blocks >= 0.5


def box_to_cxcywh(box, image_size: int) -> tuple:
    x0, y0, x1, y1 = box
    s = float(image_size)
    return ((x0 + x1) / 2 / s, (y0 + y1) / 2 / s, (x1 - x0) / s, (y1 - y0) / s)


class SyntheticTaskDataset:
    """Lazy, cached view of one dataset kind over a contiguous seed range."""

    def __init__(self, spec: DatasetSpec, image_size: int, equalize_params=(8, 16),
                 cache_size: int = 512):
        self.spec = spec
        self.scene_config = spec.scene_config(image_size)
        self.connectivity, self.min_area = equalize_params
        self._cache = OrderedDict()
        self._cache_size = cache_size

    def __len__(self) -> int:
        return self.spec.size

    @property
    def kind(self) -> str:
        return self.spec.kind

    def get(self, index: int):
        index = int(index) % len(self)
        if index in self._cache:
            self._cache.move_to_end(index)
            return self._cache[index]
        seed = self.spec.seed_base + index
        image, record = datagen.generate_scene(seed, self.scene_config)
        record = self.transform(seed, record)
        self._cache[index] = (image, record)
        if len(self._cache) > self._cache_size:
            self._cache.popitem(last=False)
        return image, record

    def transform(self, seed: int, record: AnnotationRecord) -> AnnotationRecord:
        kind = self.spec.kind
        if kind == EXHAUSTIVE:
            return record
        if kind == FEDERATED:
            rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0xFED)))
            present = sorted({i.category for i in record.instances})
            keep = [c for c in present if rng.random() < self.spec.federated_keep_prob]
            absent = [c for c in range(len(TAXONOMY)) if c not in present]
            extra = min(self.spec.federated_extra_absent, len(absent))
            if extra:
                keep += [absent[int(j)] for j in rng.choice(len(absent), extra, replace=False)]
            return datagen.federate(record, keep)
        if kind == CLASS_AGNOSTIC:
            return datagen.strip_labels(record, self.connectivity, self.min_area)
        if kind in (GROUNDING_BOX, GROUNDING_MASK):
            triples, keep_masks = [], {}
            for inst in record.instances:
                if inst.is_stuff:
                    continue
                phrase, ambiguous = datagen.describe(inst, record)
                if ambiguous:
                    continue
                triples.append(GroundingTriple(record.image_id, phrase, inst.box))
                keep_masks[phrase] = inst.mask
            rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0x9)))
            samples = datagen.to_image_centric(triples, self.spec.grounding_dedup_iou, rng)
            instances = []
            for sample in samples:
                for phrase, box in sample.pairs:
                    instances.append(
                        datagen.Instance(
                            phrase=phrase,
                            box=box,
                            mask=keep_masks[phrase],
                            is_stuff=False,
                        )
                    )
            return datagen.AnnotationRecord(
                image_id=record.image_id, instances=instances, kind=kind
            )
        raise ValueError(f"unknown dataset kind {kind}")


def build_target(
    record: AnnotationRecord,
    column_of: dict,
    image_size: int,
    mask_size: int,
    equalize_stuff: bool = True,
    connectivity: int = 8,
    min_area: int = 16,
    dtype=torch.float32,
) -> TrainTarget:
    """Instances -> (boxes, prompt columns, rasterized masks).

    ``column_of`` maps a category id or phrase string to its score column;
    missing keys mean no classification supervision for that instance.
    Stuff instances split into proxy components when equalization is on.
    """
    boxes, cols, masks = [], [], []

    def push(box, mask, key):
        boxes.append(box_to_cxcywh(box, image_size))
        cols.append(column_of.get(key, -1))
        masks.append(downsample_mask(mask, mask_size))

    for inst in record.instances:
        key = inst.phrase if inst.phrase is not None else inst.category
        if inst.is_stuff and equalize_stuff:
            for comp in decompose_stuff(inst.mask, connectivity=connectivity, min_area=min_area):
                push(comp.box, comp.mask, key)
        else:
            push(inst.box, inst.mask, key)
    if boxes:
        return TrainTarget(
            boxes=torch.tensor(boxes, dtype=dtype),
            prompt_cols=torch.tensor(cols, dtype=torch.long),
            masks=torch.tensor(np.stack(masks)),
            present_cols=tuple(
                column_of[c] for c in record.present_categories if c in column_of
            ),
            kind=record.kind,
        )
    return TrainTarget(
        boxes=torch.zeros((0, 4), dtype=dtype),
        prompt_cols=torch.zeros((0,), dtype=torch.long),
        masks=torch.zeros((0, mask_size, mask_size), dtype=torch.bool),
        present_cols=(),
        kind=record.kind,
    )


class Trainer:
    def __init__(self, cfg: RunConfig, out_dir=None):
        self.cfg = cfg
        self.out_dir = Path(out_dir or cfg.out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        # single-threaded BLAS wins at these matrix sizes
        torch.set_num_threads(1)
        torch.manual_seed(cfg.train.seed)
        self.slot = TextEncoderSlot(cfg.text_slot_name, cfg.text_slot_seed, cfg.model.d)
        self.model = Perceiver(cfg.model, self.slot)
        self.bank = EmbeddingBank(cfg.train.bank_capacity, cfg.model.d)
        self.datasets = [
            SyntheticTaskDataset(
                spec, cfg.model.image_size, (cfg.train.connectivity, cfg.train.min_area)
            )
            for spec in cfg.datasets
        ]
        if not self.datasets:
            raise ValueError("training requires at least one dataset")
        self.ratios = [datagen.sampling_ratio(len(d)) for d in self.datasets]
        self.profiles = cfg.profiles()
        self.assigner = hungarian_assign if cfg.train.assign == "hungarian" else iou_assign
        # the scalar temperature needs a much faster rate to reach its
        # operating scale within a desk budget
        main = [p for n, p in self.model.named_parameters() if n != "log_tau"]
        self.optimizer = torch.optim.AdamW(
            [
                {"params": main},
                {"params": [self.model.log_tau], "lr": cfg.train.lr * 50, "weight_decay": 0.0},
            ],
            lr=cfg.train.lr,
            weight_decay=cfg.train.weight_decay,
        )
        self._base_lrs = [g["lr"] for g in self.optimizer.param_groups]
        self.step = 0
        self.loss_log = []
        self._vocab_prompts = category_prompts()
        self._vocab_columns = {i: i for i in range(len(TAXONOMY))}
        (self.out_dir / "config.yaml").write_text(
            yaml.safe_dump(cfg.to_dict()), encoding="utf-8"
        )

    # ------------------------------------------------------------------

    def _lr_scale_for_step(self, step: int) -> float:
        decay_step = int(self.cfg.train.lr_decay_at * self.cfg.train.steps)
        return self.cfg.train.lr_decay_factor if step >= decay_step else 1.0

    def _image_rng(self, tag: int, index: int) -> np.random.Generator:
        return np.random.default_rng(
            np.random.SeedSequence(entropy=(self.cfg.train.seed, self.step, tag, index))
        )

    def _vocab_batch_loss(self, dataset, indices, profile):
        t_cfg = self.cfg.train
        images, records = [], []
        for i in indices:
            image, record = dataset.get(i)
            images.append(torch.as_tensor(image))
            records.append(record)
        batch = torch.stack(images)
        use_prompts = [] if profile.kind == CLASS_AGNOSTIC else self._vocab_prompts
        outputs = self.model.forward_batch(batch, use_prompts)
        losses = []
        report = None
        for i, record in enumerate(records):
            column_of = {} if profile.kind == CLASS_AGNOSTIC else self._vocab_columns
            target = build_target(
                record,
                column_of,
                self.cfg.model.image_size,
                self.cfg.model.mask_size,
                t_cfg.equalize_stuff,
                t_cfg.connectivity,
                t_cfg.min_area,
                dtype=batch.dtype,
            )
            report = total_loss(
                outputs.image(i),
                target,
                profile,
                tau=t_cfg.assign_tau,
                rng=self._image_rng(0xFE, int(indices[i])) if profile.federated else None,
                assigner=self.assigner,
            )
            losses.append(report.total)
        return torch.stack(losses).mean(), report

    def _grounding_batch_loss(self, dataset, indices, profile):
        t_cfg = self.cfg.train
        losses = []
        report = None
        for pos, i in enumerate(indices):
            image, record = dataset.get(i)
            phrases = [inst.phrase for inst in record.instances]
            prompt_list = [
                Prompt(text=p, kind=SENTENCE, id=phrase_id(p)) for p in phrases
            ]
            column_of = {p: j for j, p in enumerate(phrases)}
            negatives = None
            if t_cfg.use_bank and len(self.bank):
                negatives, _ = self.bank.sample_negatives(
                    t_cfg.bank_negatives,
                    exclude={pr.id for pr in prompt_list},
                    rng=self._image_rng(0x9E, int(i)),
                )
            outputs = self.model.forward_batch(
                torch.as_tensor(image)[None], prompt_list, negatives
            )
            target = build_target(
                record,
                column_of,
                self.cfg.model.image_size,
                self.cfg.model.mask_size,
                t_cfg.equalize_stuff,
                t_cfg.connectivity,
                t_cfg.min_area,
            )
            report = total_loss(
                outputs.image(0),
                target,
                profile,
                tau=t_cfg.assign_tau,
                assigner=self.assigner,
            )
            losses.append(report.total)
            if t_cfg.use_bank and prompt_list:
                embeddings = encode_prompts(prompt_list, self.slot, self.cfg.model.max_tokens)
                self.bank.push(embeddings, [pr.id for pr in prompt_list])
        return torch.stack(losses).mean(), report

    def train_step(self) -> dict:
        ds_idx, indices = datagen.sample_step(
            [len(d) for d in self.datasets],
            self.ratios,
            self.cfg.train.batch,
            self.cfg.train.seed,
            self.step,
        )
        dataset = self.datasets[ds_idx]
        profile = self.profiles[dataset.kind]
        if dataset.kind in (GROUNDING_BOX, GROUNDING_MASK):
            loss, report = self._grounding_batch_loss(dataset, indices, profile)
        else:
            loss, report = self._vocab_batch_loss(dataset, indices, profile)
        if not torch.isfinite(loss):
            self._dump_bad_batch(ds_idx, indices, report)
            raise RuntimeError(
                f"non-finite loss at step {self.step}; diagnostics in {self.out_dir}"
            )
        scale = self._lr_scale_for_step(self.step)
        for group, base in zip(self.optimizer.param_groups, self._base_lrs):
            group["lr"] = base * scale
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if self.cfg.train.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.train.grad_clip)
        self.optimizer.step()
        entry = {
            "step": self.step,
            "dataset": dataset.spec.name,
            "loss": float(loss.detach()),
        }
        self.step += 1
        return entry

    def _dump_bad_batch(self, ds_idx, indices, report):
        dump = {
            "step": self.step,
            "dataset": self.cfg.datasets[ds_idx].name,
            "indices": [int(i) for i in indices],
            "terms": None if report is None else report.terms,
        }
        (self.out_dir / "nan_dump.json").write_text(json.dumps(dump, indent=2))

    # ------------------------------------------------------------------

    def run(self, steps: int = None, quiet: bool = False) -> Path:
        total = steps if steps is not None else self.cfg.train.steps
        started = time.time()
        while self.step < total:
            entry = self.train_step()
            if entry["step"] % self.cfg.train.log_every == 0:
                self.loss_log.append(entry)
                if not quiet:
                    rate = (entry["step"] + 1) / max(time.time() - started, 1e-9)
                    print(
                        f"step {entry['step']:>6}/{total} loss {entry['loss']:.4f} "
                        f"[{entry['dataset']}] {rate:.2f} it/s",
                        flush=True,
                    )
            if (
                self.cfg.train.checkpoint_every
                and self.step % self.cfg.train.checkpoint_every == 0
            ):
                self.save_checkpoint(self.out_dir / "checkpoint.pt")
        path = self.out_dir / "checkpoint.pt"
        self.save_checkpoint(path)
        self._write_loss_log()
        return path

    def _write_loss_log(self):
        if not self.loss_log:
            return
        with open(self.out_dir / "losses.csv", "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=["step", "dataset", "loss"])
            writer.writeheader()
            writer.writerows(self.loss_log)

    # ------------------------------------------------------------------

    def save_checkpoint(self, path) -> None:
        torch.save(
            {
                "step": self.step,
                "model": self.model.state_dict(),
                "optimizer": self.optimizer.state_dict(),
                "bank": self.bank.state_dict(),
                "config": self.cfg.to_dict(),
                "torch_rng": torch.get_rng_state(),
                "fingerprint": self.cfg.fingerprint(),
                "loss_log": self.loss_log,
            },
            path,
        )

    @classmethod
    def resume(cls, path, out_dir=None) -> "Trainer":
        from .config import run_config_from_dict

        state = torch.load(path, map_location="cpu", weights_only=False)
        cfg = run_config_from_dict(state["config"])
        trainer = cls(cfg, out_dir=out_dir or Path(path).parent)
        trainer.model.load_state_dict(state["model"])
        trainer.optimizer.load_state_dict(state["optimizer"])
        trainer.bank.load_state_dict(state["bank"])
        trainer.step = int(state["step"])
        trainer.loss_log = list(state.get("loss_log", []))
        torch.set_rng_state(state["torch_rng"])
        return trainer


def load_model(path):
    """Rebuild (model, cfg, bank) from a checkpoint file."""
    from .config import run_config_from_dict

    state = torch.load(path, map_location="cpu", weights_only=False)
    cfg = run_config_from_dict(state["config"])
    slot = TextEncoderSlot(cfg.text_slot_name, cfg.text_slot_seed, cfg.model.d)
    model = Perceiver(cfg.model, slot)
    model.load_state_dict(state["model"])
    model.eval()
    bank = EmbeddingBank(cfg.train.bank_capacity, cfg.model.d)
    bank.load_state_dict(state["bank"])
    return model, cfg, bank
