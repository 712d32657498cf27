"""FIFO history bank of sentence-prompt embeddings.

During training the bank accumulates every sentence embedding it sees and
hands back uniformly sampled rows as negative queries, which the alignment
head must learn to reject.  Stored rows are the pre-fusion embeddings, so
they stay valid across images.  Single writer only; the training loop
serializes access.
"""

from __future__ import annotations

from collections import deque

import numpy as np

from .prompts import SENTENCE, SentenceEmbeddings


class EmbeddingBank:
    def __init__(self, capacity: int = 512, d: int = 128):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.d = d
        self._entries = deque(maxlen=capacity)
        self._step = 0

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def ids(self) -> list:
        return [pid for _, pid, _ in self._entries]

    def push(self, embeddings: SentenceEmbeddings, ids) -> None:
        """Append rows, evicting the oldest past capacity."""
        values = embeddings.values
        if values.shape[0] != len(ids):
            raise ValueError("one id per embedding row required")
        if values.shape[0] == 0:
            return
        if values.shape[1] != self.d:
            raise ValueError(
                f"embedding width {values.shape[1]} does not match bank width {self.d}"
            )
        for row, pid in zip(values, ids):
            self._entries.append((row.copy(), int(pid), self._step))
            self._step += 1

    def sample_negatives(self, k: int, exclude=(), rng=None) -> tuple:
        """Draw up to k rows uniformly without replacement, skipping excluded ids.

        Returns (SentenceEmbeddings, ids).  Short return when the eligible
        pool is smaller than k; that is the contract, not an error.
        """
        if k < 0:
            raise ValueError("k must be >= 0")
        rng = rng or np.random.default_rng()
        exclude = set(int(e) for e in exclude)
        eligible = [(row, pid) for row, pid, _ in self._entries if pid not in exclude]
        if k == 0 or not eligible:
            return (
                SentenceEmbeddings(values=np.zeros((0, self.d), dtype=np.float64)),
                [],
            )
        take = min(k, len(eligible))
        chosen = rng.choice(len(eligible), size=take, replace=False)
        rows = np.stack([eligible[int(i)][0] for i in chosen])
        ids = [eligible[int(i)][1] for i in chosen]
        return SentenceEmbeddings(values=rows, kinds=(SENTENCE,) * take), ids

    def state_dict(self) -> dict:
        return {
            "capacity": self.capacity,
            "d": self.d,
            "step": self._step,
            "rows": np.stack([r for r, _, _ in self._entries])
            if self._entries
            else np.zeros((0, self.d)),
            "ids": [pid for _, pid, _ in self._entries],
            "steps": [s for _, _, s in self._entries],
        }

    def load_state_dict(self, state: dict) -> None:
        self.capacity = int(state["capacity"])
        self.d = int(state["d"])
        self._step = int(state["step"])
        self._entries = deque(maxlen=self.capacity)
        for row, pid, s in zip(state["rows"], state["ids"], state["steps"]):
            self._entries.append((np.asarray(row, dtype=np.float64), int(pid), int(s)))
