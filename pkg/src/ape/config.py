"""Run configuration: schema-validated documents driving every CLI entry.

Configs are plain YAML/JSON key-value documents; ``load_run_config``
validates them against SCHEMA before anything is computed.  The
``APE_SEED`` environment variable overrides the training seed.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .datagen import SceneConfig
from .losses import DATASET_KINDS, SupervisionProfile, default_profiles
from .model import ModelConfig


@dataclass
class DatasetSpec:
    name: str
    kind: str
    size: int = 2000
    seed_base: int = 0
    scene: dict = field(default_factory=dict)
    federated_keep_prob: float = 0.7
    federated_extra_absent: int = 3
    grounding_dedup_iou: float = 0.7

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ValueError(f"unknown dataset kind {self.kind}")
        if self.size < 1:
            raise ValueError("dataset size must be >= 1")

    def scene_config(self, image_size: int) -> SceneConfig:
        return SceneConfig(size=image_size, **self.scene)


@dataclass
class TrainConfig:
    steps: int = 20000
    batch: int = 8
    lr: float = 2e-4
    weight_decay: float = 0.05
    lr_decay_at: float = 0.88
    lr_decay_factor: float = 0.1
    grad_clip: float = 0.1
    seed: int = 0
    use_bank: bool = True
    bank_capacity: int = 512
    bank_negatives: int = 16
    equalize_stuff: bool = True
    connectivity: int = 8
    min_area: int = 16
    assign: str = "iou"
    assign_tau: float = 0.5
    prose_grounding_rule: bool = False
    log_every: int = 100
    checkpoint_every: int = 2000


@dataclass
class EvalConfig:
    images: int = 200
    seed_base: int = 900000
    scene: dict = field(default_factory=dict)
    nms_iou: float = 0.7
    score_threshold: float = 0.5
    void_threshold: float = 0.25
    mask_threshold: float = 0.5
    max_detections: int = 100


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    text_slot_name: str = "hash-v1"
    text_slot_seed: int = 1234
    datasets: list = field(default_factory=list)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    out_dir: str = "runs/default"

    def to_dict(self) -> dict:
        out = {
            "model": asdict(self.model),
            "text_slot_name": self.text_slot_name,
            "text_slot_seed": self.text_slot_seed,
            "datasets": [asdict(d) for d in self.datasets],
            "train": asdict(self.train),
            "eval": asdict(self.eval),
            "out_dir": self.out_dir,
        }
        return out

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]

    def profiles(self) -> dict:
        return default_profiles(self.train.prose_grounding_rule)


SCHEMA = {
    "type": "object",
    "properties": {
        "model": {"type": "object"},
        "text_slot_name": {"type": "string"},
        "text_slot_seed": {"type": "integer"},
        "datasets": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["name", "kind"],
                "properties": {
                    "name": {"type": "string"},
                    "kind": {"type": "string", "enum": list(DATASET_KINDS)},
                    "size": {"type": "integer"},
                    "seed_base": {"type": "integer"},
                    "scene": {"type": "object"},
                    "federated_keep_prob": {"type": "number"},
                    "federated_extra_absent": {"type": "integer"},
                    "grounding_dedup_iou": {"type": "number"},
                },
            },
        },
        "train": {"type": "object"},
        "eval": {"type": "object"},
        "out_dir": {"type": "string"},
    },
}

_TYPE_CHECKS = {
    "object": lambda v: isinstance(v, dict),
    "array": lambda v: isinstance(v, list),
    "string": lambda v: isinstance(v, str),
    "integer": lambda v: isinstance(v, int) and not isinstance(v, bool),
    "number": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
    "boolean": lambda v: isinstance(v, bool),
}


def validate_document(doc, schema=None, path="config") -> None:
    """Minimal JSON-schema walk (type / required / enum / items)."""
    schema = schema or SCHEMA
    expected = schema.get("type")
    if expected and not _TYPE_CHECKS[expected](doc):
        raise ValueError(f"{path}: expected {expected}, got {type(doc).__name__}")
    if expected == "object":
        for key in schema.get("required", ()):
            if key not in doc:
                raise ValueError(f"{path}: missing required key {key!r}")
        for key, sub in schema.get("properties", {}).items():
            if key in doc:
                validate_document(doc[key], sub, f"{path}.{key}")
    if expected == "array" and "items" in schema:
        for i, item in enumerate(doc):
            validate_document(item, schema["items"], f"{path}[{i}]")
    if "enum" in schema and doc not in schema["enum"]:
        raise ValueError(f"{path}: {doc!r} not one of {schema['enum']}")


def run_config_from_dict(doc: dict) -> RunConfig:
    validate_document(doc)
    doc = copy.deepcopy(doc)
    cfg = RunConfig()
    if "model" in doc:
        cfg.model = ModelConfig(**doc["model"])
    cfg.text_slot_name = doc.get("text_slot_name", cfg.text_slot_name)
    cfg.text_slot_seed = doc.get("text_slot_seed", cfg.text_slot_seed)
    cfg.datasets = [DatasetSpec(**d) for d in doc.get("datasets", [])]
    if "train" in doc:
        cfg.train = TrainConfig(**doc["train"])
    if "eval" in doc:
        cfg.eval = EvalConfig(**doc["eval"])
    cfg.out_dir = doc.get("out_dir", cfg.out_dir)
    seed_override = os.environ.get("APE_SEED")
    if seed_override is not None:
        cfg.train.seed = int(seed_override)
    return cfg


def load_run_config(path) -> RunConfig:
    doc = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: config must be a mapping")
    return run_config_from_dict(doc)


# ---------------------------------------------------------------------------
# supervision profile table (external file interface)


def profiles_to_document(profiles: dict) -> dict:
    return {
        kind: {
            "enc": {"class": p.enc[0], "bbox": p.enc[1], "giou": p.enc[2]},
            "dec": {
                "class": p.dec[0],
                "bbox": p.dec[1],
                "giou": p.dec[2],
                "mask": p.dec[3],
                "dice": p.dec[4],
            },
            "federated": p.federated,
            "num_federated_negatives": p.num_federated_negatives,
        }
        for kind, p in profiles.items()
    }


def profiles_from_document(doc: dict) -> dict:
    out = {}
    for kind, row in doc.items():
        out[kind] = SupervisionProfile(
            kind=kind,
            enc=(row["enc"]["class"], row["enc"]["bbox"], row["enc"]["giou"]),
            dec=(
                row["dec"]["class"],
                row["dec"]["bbox"],
                row["dec"]["giou"],
                row["dec"]["mask"],
                row["dec"]["dice"],
            ),
            federated=row.get("federated", False),
            num_federated_negatives=row.get("num_federated_negatives", 5),
        )
    return out


def load_profiles(path=None) -> dict:
    if path is None:
        path = Path(__file__).parent / "configs" / "profiles.yaml"
    doc = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    return profiles_from_document(doc)


def builtin_config_path(name: str) -> Path:
    return Path(__file__).parent / "configs" / f"{name}.yaml"
