"""Cost profiling for cross-modality fusion.

Measures forward wall time and peak resident memory across prompt counts,
fusion on versus off, mirroring the decreased-speed / increased-memory
presentation.  The fusion-stage-only timer hooks the fusion layers
directly, which is what the vocabulary-count independence contract is
stated over.
"""

from __future__ import annotations

import copy
import threading
import time
from dataclasses import dataclass

import numpy as np
import psutil
import torch

from .model import Perceiver
from .prompts import SENTENCE, VOCABULARY, Prompt


def synthetic_prompts(count: int, kind: str, start_id: int = 0) -> list:
    """Deterministic filler prompts for stress and profiling runs."""
    out = []
    for i in range(count):
        if kind == VOCABULARY:
            text = f"thing kind {i:04d}"
        else:
            text = f"the odd object number {i:04d} sitting near the corner"
        out.append(Prompt(text=text, kind=kind, id=start_id + i))
    return out


class PeakRssSampler:
    """Samples resident set size on a 10 ms cadence; reports the max."""

    def __init__(self, interval: float = 0.01):
        self.interval = interval
        self._process = psutil.Process()
        self._peak = 0
        self._stop = threading.Event()
        self._thread = None

    def __enter__(self):
        self._peak = self._process.memory_info().rss
        self._stop.clear()
        self._thread = threading.Thread(target=self._loop, daemon=True)
        self._thread.start()
        return self

    def _loop(self):
        while not self._stop.is_set():
            rss = self._process.memory_info().rss
            if rss > self._peak:
                self._peak = rss
            time.sleep(self.interval)

    def __exit__(self, *exc):
        self._stop.set()
        self._thread.join()

    @property
    def peak_gb(self) -> float:
        return self._peak / 1e9


@torch.no_grad()
def median_forward_time(model, image, prompts, repetitions: int = 5, warmup: int = 2):
    for _ in range(warmup):
        model.forward(image, prompts)
    times = []
    for _ in range(repetitions):
        start = time.perf_counter()
        model.forward(image, prompts)
        times.append(time.perf_counter() - start)
    return float(np.median(times))


@torch.no_grad()
def fusion_stage_time(model: Perceiver, image, prompts, repetitions: int = 5, warmup: int = 2):
    """Median summed wall time of the fusion layers inside one forward."""
    if model.fusion_layers is None:
        return 0.0
    records = []
    starts = {}

    def pre_hook(module, args):
        starts[id(module)] = time.perf_counter()

    def post_hook(module, args, output):
        records.append(time.perf_counter() - starts[id(module)])

    handles = []
    for layer in model.fusion_layers:
        handles.append(layer.register_forward_pre_hook(pre_hook))
        handles.append(layer.register_forward_hook(post_hook))
    try:
        for _ in range(warmup):
            records.clear()
            model.forward(image, prompts)
        totals = []
        for _ in range(repetitions):
            records.clear()
            model.forward(image, prompts)
            totals.append(sum(records))
        return float(np.median(totals))
    finally:
        for handle in handles:
            handle.remove()


@dataclass
class CostRow:
    label: str
    prompt_count: int
    time_fusion_on: float
    time_fusion_off: float
    mem_fusion_on: float
    mem_fusion_off: float

    @property
    def speed_drop_pct(self) -> float:
        if self.time_fusion_off == 0:
            return 0.0
        return 100.0 * (self.time_fusion_on - self.time_fusion_off) / self.time_fusion_on

    @property
    def memory_rise_pct(self) -> float:
        if self.mem_fusion_off == 0:
            return 0.0
        return 100.0 * (self.mem_fusion_on - self.mem_fusion_off) / self.mem_fusion_off

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "prompt_count": self.prompt_count,
            "time_fusion_on_s": self.time_fusion_on,
            "time_fusion_off_s": self.time_fusion_off,
            "fps_fusion_on": 1.0 / self.time_fusion_on if self.time_fusion_on else 0.0,
            "fps_fusion_off": 1.0 / self.time_fusion_off if self.time_fusion_off else 0.0,
            "speed_drop_pct": self.speed_drop_pct,
            "mem_fusion_on_gb": self.mem_fusion_on,
            "mem_fusion_off_gb": self.mem_fusion_off,
            "memory_rise_pct": self.memory_rise_pct,
        }


def profile_cost(
    model: Perceiver,
    vocabulary_counts=(80, 1203),
    sentence_counts=(1, 128, 1280),
    repetitions: int = 5,
) -> list:
    """Forward cost per prompt count, fusion on vs off (fusion_mode=none)."""
    cfg_off = copy.deepcopy(model.cfg)
    cfg_off.fusion_mode = "none"
    model_off = Perceiver(cfg_off, model.slot)
    # share weights where shapes coincide so the comparison is like-for-like
    own = model.state_dict()
    model_off.load_state_dict(
        {k: v for k, v in own.items() if not k.startswith("fusion_layers")}, strict=False
    )
    model_off.eval()
    model.eval()
    image = torch.rand(3, model.cfg.image_size, model.cfg.image_size)

    rows = []
    cases = [("vocabulary", VOCABULARY, c) for c in vocabulary_counts]
    cases += [("sentence", SENTENCE, c) for c in sentence_counts]
    for label, kind, count in cases:
        prompts = synthetic_prompts(count, kind)
        with PeakRssSampler() as mem_on:
            t_on = median_forward_time(model, image, prompts, repetitions)
        with PeakRssSampler() as mem_off:
            t_off = median_forward_time(model_off, image, prompts, repetitions)
        rows.append(
            CostRow(
                label=label,
                prompt_count=count,
                time_fusion_on=t_on,
                time_fusion_off=t_off,
                mem_fusion_on=mem_on.peak_gb,
                mem_fusion_off=mem_off.peak_gb,
            )
        )
    return rows
