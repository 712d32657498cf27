"""Gated cross-modality interaction.

Vocabulary prompts never enter vision-language fusion: a single all-zero
text row stands in for all of them, so the vision stream receives a
constant, image-independent nudge whose cost does not depend on how many
vocabulary prompts were given, and the vocabulary embeddings themselves
pass through bitwise-untouched (they stay fixed anchors in the common
embedding space).  Sentence prompts, plus any sampled negative rows, go
through full bidirectional multi-head attention against the vision tokens.

With a single zero text key the softmax over keys is identically one, so
the text-derived update to every vision token reduces to the learned value
and output bias terms: a constant shift.  That is exactly the intended
meaning of the "static" pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

MODE_NONE = "none"
MODE_OBJECT_WORD = "object_word"
MODE_REGION_SENTENCE = "region_sentence"

FUSION_MODES = (MODE_NONE, MODE_OBJECT_WORD, MODE_REGION_SENTENCE)


@dataclass
class FusedState:
    vision: torch.Tensor  # (B, m, d_v)
    text: torch.Tensor  # (B, n_vocab + n_sent, d) -- vocab rows bitwise-equal input
    n_vocab: int = 0


class BiCrossAttention(nn.Module):
    """One fusion layer: each stream attends to the other, residual-added."""

    def __init__(self, d_v: int, d_t: int, heads: int = 4, head_dim: int = 64):
        super().__init__()
        attn = heads * head_dim
        if attn % heads != 0:
            raise ValueError("head count must divide attention width")
        self.heads = heads
        self.head_dim = head_dim
        # text -> vision direction
        self.v_query = nn.Linear(d_v, attn)
        self.t_key = nn.Linear(d_t, attn)
        self.t_value = nn.Linear(d_t, attn)
        self.v_out = nn.Linear(attn, d_v)
        # vision -> text direction
        self.t_query = nn.Linear(d_t, attn)
        self.v_key = nn.Linear(d_v, attn)
        self.v_value = nn.Linear(d_v, attn)
        self.t_out = nn.Linear(attn, d_t)
        self.v_scale = nn.Parameter(torch.tensor(0.1))
        self.t_scale = nn.Parameter(torch.tensor(0.1))

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, l, _ = x.shape
        return x.view(b, l, self.heads, self.head_dim).transpose(1, 2)

    def _merge(self, x: torch.Tensor) -> torch.Tensor:
        b, _, l, _ = x.shape
        return x.transpose(1, 2).reshape(b, l, self.heads * self.head_dim)

    def forward(self, vision: torch.Tensor, text: torch.Tensor, update_text: bool = True):
        """(B, m, d_v), (B, n, d_t) -> updated pair of the same shapes.

        Both updates are computed from the *input* states, then residual
        added, so the two directions see each other symmetrically.  Empty
        text is a no-op for vision.  ``update_text=False`` skips the
        vision->text direction; the static zero-token pass discards that
        update anyway, so skipping it keeps cost off the vocabulary path.
        """
        if vision.shape[-1] != self.v_query.in_features:
            raise ValueError("vision width does not match fusion parameters")
        if text.shape[-1] != self.t_query.in_features:
            raise ValueError("text width does not match fusion parameters")
        if text.shape[1] == 0:
            return vision, text
        vq = self._split(self.v_query(vision))
        tk = self._split(self.t_key(text))
        tv = self._split(self.t_value(text))
        v_update = self.v_out(self._merge(F.scaled_dot_product_attention(vq, tk, tv)))
        new_vision = vision + self.v_scale * v_update
        if not update_text:
            return new_vision, text

        tq = self._split(self.t_query(text))
        vk = self._split(self.v_key(vision))
        vv = self._split(self.v_value(vision))
        t_update = self.t_out(self._merge(F.scaled_dot_product_attention(tq, vk, vv)))
        return new_vision, text + self.t_scale * t_update


def cross_attend(vision: torch.Tensor, text: torch.Tensor, layer: BiCrossAttention):
    """Functional wrapper handling unbatched (m, d_v) / (n, d_t) inputs."""
    squeeze = vision.ndim == 2
    if squeeze:
        vision = vision[None]
    if text.ndim == 2:
        text = text[None].expand(vision.shape[0], -1, -1)
    v, t = layer(vision, text)
    if squeeze:
        return v[0], t[0]
    return v, t


def gated_fuse(
    vision: torch.Tensor,
    vocab: torch.Tensor,
    sent: torch.Tensor,
    negatives: torch.Tensor = None,
    layer: BiCrossAttention = None,
) -> FusedState:
    """Static zero-token pass for vocabularies, dynamic pass for sentences.

    The static pass runs first and only its vision update is kept; the
    dynamic pass then updates both the vision stream and the sentence (and
    negative) rows.  The same layer parameters serve both passes.
    """
    squeeze = vision.ndim == 2
    if squeeze:
        vision = vision[None]
    b = vision.shape[0]
    d_t = vocab.shape[-1] if vocab.numel() or vocab.ndim == 2 else sent.shape[-1]
    if vocab.ndim == 2:
        vocab = vocab[None].expand(b, -1, -1)
    if sent.ndim == 2:
        sent = sent[None].expand(b, -1, -1)
    if negatives is not None and negatives.numel():
        if negatives.ndim == 2:
            negatives = negatives[None].expand(b, -1, -1)
        dynamic = torch.cat([sent, negatives], dim=1)
    else:
        dynamic = sent

    # static pass: one zero token regardless of vocabulary count
    zero = torch.zeros((b, 1, d_t), dtype=vision.dtype, device=vision.device)
    vision, _ = layer(vision, zero, update_text=False)

    if dynamic.shape[1] > 0:
        vision, dynamic = layer(vision, dynamic)

    text = torch.cat([vocab, dynamic], dim=1)
    if squeeze:
        return FusedState(vision=vision[0], text=text[0], n_vocab=vocab.shape[1])
    return FusedState(vision=vision, text=text, n_vocab=vocab.shape[1])
