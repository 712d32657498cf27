"""DETR-style perception model with gated vision-language fusion.

Single forward contract: given one image and an arbitrary mix of
vocabulary and sentence prompts (plus optional negative rows during
training), produce per-query alignment scores against every prompt,
normalized cxcywh boxes, and mask logits on a fixed grid.  Thousands of
prompts go through one call; nothing is ever split.

Layout: a patchify backbone stub feeds a self-attention encoder with
fusion interleaved after every layer, per-token objectness and box deltas
select top-q proposals (two-stage), and a decoder refines them into object
embeddings for the alignment/box/mask heads.  The forward pass contains no
gradient stops, so end-to-end finite-difference checks hold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .fusion import (
    MODE_NONE,
    MODE_OBJECT_WORD,
    MODE_REGION_SENTENCE,
    FUSION_MODES,
    BiCrossAttention,
)
from .prompts import (
    SENTENCE,
    VOCABULARY,
    SentenceEmbeddings,
    TextEncoderSlot,
    aggregate,
    encode_words,
)


@dataclass
class ModelConfig:
    image_size: int = 128
    patch: int = 8
    d_v: int = 128
    d: int = 128
    q: int = 100
    heads: int = 4
    enc_layers: int = 6
    dec_layers: int = 6
    ffn: int = 256
    fusion_mode: str = MODE_REGION_SENTENCE
    fusion_heads: int = 4
    fusion_head_dim: int = 64
    mask_size: int = 64
    mask_dim: int = 16
    max_tokens: int = 16
    anchor_patches: float = 2.0  # anchor side length, in units of one patch

    def __post_init__(self):
        if self.image_size % self.patch != 0:
            raise ValueError("image size must be divisible by the patch size")
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode: {self.fusion_mode}")
        if self.d_v % self.heads != 0:
            raise ValueError("heads must divide d_v")
        if self.q > self.tokens:
            raise ValueError("cannot select more queries than vision tokens")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def tokens(self) -> int:
        return self.grid * self.grid


def inverse_sigmoid(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    x = x.clamp(eps, 1 - eps)
    return torch.log(x) - torch.log1p(-x)


def sinusoidal_grid_encoding(grid: int, d: int) -> torch.Tensor:
    """Fixed 2D sine/cosine position code, shape (grid*grid, d)."""
    if d % 4 != 0:
        raise ValueError("position encoding needs d divisible by 4")
    half = d // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(0, half, 2, dtype=torch.float64) / half
    )
    pos = torch.arange(grid, dtype=torch.float64)
    angles = pos[:, None] * freqs[None, :]
    code_1d = torch.cat([angles.sin(), angles.cos()], dim=1)  # (grid, half)
    ys = code_1d[:, None, :].expand(grid, grid, half)
    xs = code_1d[None, :, :].expand(grid, grid, half)
    return torch.cat([ys, xs], dim=2).reshape(grid * grid, d)


def _mlp(d_in: int, d_hidden: int, d_out: int, layers: int = 3) -> nn.Sequential:
    mods = []
    width = d_in
    for _ in range(layers - 1):
        mods += [nn.Linear(width, d_hidden), nn.ReLU()]
        width = d_hidden
    mods.append(nn.Linear(width, d_out))
    return nn.Sequential(*mods)


class EncoderLayer(nn.Module):
    def __init__(self, d: int, heads: int, ffn: int):
        super().__init__()
        self.attn = nn.MultiheadAttention(d, heads, batch_first=True)
        self.norm1 = nn.LayerNorm(d)
        self.ffn = nn.Sequential(nn.Linear(d, ffn), nn.ReLU(), nn.Linear(ffn, d))
        self.norm2 = nn.LayerNorm(d)

    def forward(self, x):
        x = self.norm1(x + self.attn(x, x, x, need_weights=False)[0])
        return self.norm2(x + self.ffn(x))


class DecoderLayer(nn.Module):
    def __init__(self, d: int, heads: int, ffn: int):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(d, heads, batch_first=True)
        self.norm1 = nn.LayerNorm(d)
        self.cross_attn = nn.MultiheadAttention(d, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(d)
        self.ffn = nn.Sequential(nn.Linear(d, ffn), nn.ReLU(), nn.Linear(ffn, d))
        self.norm3 = nn.LayerNorm(d)

    def forward(self, x, memory):
        x = self.norm1(x + self.self_attn(x, x, x, need_weights=False)[0])
        x = self.norm2(x + self.cross_attn(x, memory, memory, need_weights=False)[0])
        return self.norm3(x + self.ffn(x))


@dataclass
class TextContext:
    """Prompt embeddings arranged for the gated forward pass.

    Sentence rows are canonically ordered by prompt id inside the fusion
    stream so that reordering the input prompts permutes score columns and
    changes nothing else, bitwise.
    """

    n_prompts: int
    proj: torch.Tensor  # (n, d) projected rows, input order
    vocab_pos: torch.Tensor  # positions of vocabulary prompts
    sent_pos_sorted: torch.Tensor  # positions of sentence prompts, id-sorted
    negatives: torch.Tensor  # (k, d) projected negative rows
    word_proj: torch.Tensor = None  # (W, d) word rows (object-word mode only)
    word_owner: torch.Tensor = None  # (W,) prompt index per word row


@dataclass
class ForwardOutputs:
    """Batched raw outputs; ``image(i)`` yields the per-image loss view."""

    enc_objectness: torch.Tensor  # (B, m)
    enc_boxes: torch.Tensor  # (B, m, 4)
    anchors: torch.Tensor  # (m, 4)
    layer_scores: list  # dec layers of (B, q, n + k)
    layer_boxes: list  # dec layers of (B, q, 4)
    mask_logits: torch.Tensor  # (B, q, mask, mask)
    n_real_cols: int
    object_embeddings: torch.Tensor = None  # (B, q, d_v) final decoder output

    def image(self, i: int) -> "ForwardOutputs":
        return ForwardOutputs(
            enc_objectness=self.enc_objectness[i],
            enc_boxes=self.enc_boxes[i],
            anchors=self.anchors,
            layer_scores=[s[i] for s in self.layer_scores],
            layer_boxes=[b[i] for b in self.layer_boxes],
            mask_logits=self.mask_logits[i],
            n_real_cols=self.n_real_cols,
            object_embeddings=None
            if self.object_embeddings is None
            else self.object_embeddings[i],
        )


@dataclass
class Predictions:
    """The single output contract: everything row i says is about query i."""

    scores: torch.Tensor  # (q, n) alignment logits, negative columns dropped
    boxes: torch.Tensor  # (q, 4) normalized cxcywh in [0, 1]
    masks: torch.Tensor  # (q, h, w) logits
    enc_objectness: torch.Tensor  # (m,) foreground logits


class Perceiver(nn.Module):
    def __init__(self, cfg: ModelConfig, slot: TextEncoderSlot = None):
        super().__init__()
        self.cfg = cfg
        self.slot = slot or TextEncoderSlot(d=cfg.d)
        if self.slot.d != cfg.d:
            raise ValueError("text slot width must equal model text width")
        p = cfg.patch
        self.patch_proj = nn.Linear(3 * p * p, cfg.d_v)
        self.register_buffer("pos", sinusoidal_grid_encoding(cfg.grid, cfg.d_v).float())
        self.register_buffer("anchors", self._make_anchors())
        self.text_proj = nn.Linear(cfg.d, cfg.d)

        self.enc_layers = nn.ModuleList(
            EncoderLayer(cfg.d_v, cfg.heads, cfg.ffn) for _ in range(cfg.enc_layers)
        )
        if cfg.fusion_mode != MODE_NONE:
            self.fusion_layers = nn.ModuleList(
                BiCrossAttention(cfg.d_v, cfg.d, cfg.fusion_heads, cfg.fusion_head_dim)
                for _ in range(cfg.enc_layers)
            )
        else:
            self.fusion_layers = None
        self.enc_score = nn.Linear(cfg.d_v, 1)
        self.enc_delta = nn.Linear(cfg.d_v, 4)
        self.query_proj = nn.Linear(cfg.d_v, cfg.d_v)
        self.query_norm = nn.LayerNorm(cfg.d_v)
        self.dec_layers = nn.ModuleList(
            DecoderLayer(cfg.d_v, cfg.heads, cfg.ffn) for _ in range(cfg.dec_layers)
        )
        self.box_head = _mlp(cfg.d_v, cfg.d_v, 4)
        self.obj_proj = nn.Linear(cfg.d_v, cfg.d)
        # log-parameterized learned temperature, initial value 1/sqrt(d)
        self.log_tau = nn.Parameter(torch.tensor(math.log(cfg.d**-0.5)))
        self.mask_embed = _mlp(cfg.d_v, cfg.d_v, cfg.mask_dim)
        self.pixel_proj = nn.Linear(cfg.d_v, cfg.mask_dim)
        self._init_heads()

    def _make_anchors(self) -> torch.Tensor:
        g = self.cfg.grid
        side = self.cfg.anchor_patches / g
        centers = (torch.arange(g, dtype=torch.float32) + 0.5) / g
        cy, cx = torch.meshgrid(centers, centers, indexing="ij")
        wh = torch.full((g * g,), side)
        return torch.stack([cx.reshape(-1), cy.reshape(-1), wh, wh], dim=1)

    def _init_heads(self):
        # focal-friendly objectness prior; box deltas start at the anchors
        nn.init.constant_(self.enc_score.bias, -math.log((1 - 0.01) / 0.01))
        nn.init.zeros_(self.enc_delta.weight)
        nn.init.zeros_(self.enc_delta.bias)
        nn.init.zeros_(self.box_head[-1].weight)
        nn.init.zeros_(self.box_head[-1].bias)

    # ------------------------------------------------------------------
    # text side

    def encode_text(self, prompts, negatives: SentenceEmbeddings = None) -> TextContext:
        dtype = self.text_proj.weight.dtype
        device = self.text_proj.weight.device
        n = len(prompts)
        if n:
            we = encode_words(prompts, self.slot, self.cfg.max_tokens)
            base = aggregate(we).values
        else:
            base = np.zeros((0, self.cfg.d))
        rows = torch.as_tensor(base, dtype=dtype, device=device)
        proj = self.text_proj(rows) if n else rows
        vocab_pos = torch.tensor(
            [i for i, p in enumerate(prompts) if p.kind == VOCABULARY], dtype=torch.long
        )
        sent = [(p.id, i) for i, p in enumerate(prompts) if p.kind == SENTENCE]
        sent_pos_sorted = torch.tensor([i for _, i in sorted(sent)], dtype=torch.long)
        if negatives is not None and negatives.values.shape[0]:
            neg_rows = torch.as_tensor(negatives.values, dtype=dtype, device=device)
            neg = self.text_proj(neg_rows)
        else:
            neg = torch.zeros((0, self.cfg.d), dtype=dtype, device=device)
        word_proj = word_owner = None
        if self.cfg.fusion_mode == MODE_OBJECT_WORD and n:
            flat, owners = [], []
            for pid, i in sorted((p.id, i) for i, p in enumerate(prompts)):
                for j in range(int(we.lengths[i])):
                    flat.append(we.values[i, j])
                    owners.append(i)
            word_rows = torch.as_tensor(np.stack(flat), dtype=dtype, device=device)
            word_proj = self.text_proj(word_rows)
            if neg.shape[0]:
                # negative rows join the word stream one row each
                word_proj = torch.cat([word_proj, neg], dim=0)
                owners += [n + j for j in range(neg.shape[0])]
            word_owner = torch.tensor(owners, dtype=torch.long)
        return TextContext(
            n_prompts=n,
            proj=proj,
            vocab_pos=vocab_pos,
            sent_pos_sorted=sent_pos_sorted,
            negatives=neg,
            word_proj=word_proj,
            word_owner=word_owner,
        )

    # ------------------------------------------------------------------
    # vision side

    def backbone(self, images: torch.Tensor) -> torch.Tensor:
        """Non-overlapping patchify + linear map; (B, 3, H, W) -> (B, m, d_v)."""
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError("expected images of shape (B, 3, H, W)")
        if images.shape[2] % self.cfg.patch or images.shape[3] % self.cfg.patch:
            raise ValueError("image size must be divisible by the patch size")
        patches = F.unfold(images, self.cfg.patch, stride=self.cfg.patch)
        return self.patch_proj(patches.transpose(1, 2))

    def _fused_encoder(self, tokens: torch.Tensor, ctx: TextContext):
        """Encoder stack with fusion interleaved after every layer.

        Returns (memory, dynamic_rows) where dynamic_rows are the fused
        sentence/negative/word rows, or None when fusion never ran on text.
        """
        mode = self.cfg.fusion_mode
        b = tokens.shape[0]
        dyn = None
        if mode == MODE_REGION_SENTENCE:
            sent_rows = ctx.proj[ctx.sent_pos_sorted]
            dyn = torch.cat([sent_rows, ctx.negatives], dim=0)
            dyn = dyn[None].expand(b, -1, -1)
        elif mode == MODE_OBJECT_WORD and ctx.word_proj is not None:
            dyn = ctx.word_proj[None].expand(b, -1, -1)
        x = tokens
        for i, layer in enumerate(self.enc_layers):
            x = layer(x)
            if mode == MODE_NONE:
                continue
            fuse = self.fusion_layers[i]
            if mode == MODE_REGION_SENTENCE:
                zero = torch.zeros((b, 1, self.cfg.d), dtype=x.dtype, device=x.device)
                x, _ = fuse(x, zero, update_text=False)
                if dyn is not None and dyn.shape[1] > 0:
                    x, dyn = fuse(x, dyn)
            elif dyn is not None and dyn.shape[1] > 0:
                x, dyn = fuse(x, dyn)
        return x, dyn

    def _alignment_rows(self, ctx: TextContext, dyn: torch.Tensor, b: int):
        """Assemble (B, n + k, d) alignment rows in input prompt order."""
        d = self.cfg.d
        dtype = self.text_proj.weight.dtype
        device = self.text_proj.weight.device
        n = ctx.n_prompts
        k = ctx.negatives.shape[0]
        if self.cfg.fusion_mode == MODE_REGION_SENTENCE and dyn is not None:
            rows = torch.zeros((b, n + k, d), dtype=dtype, device=device)
            if ctx.vocab_pos.numel():
                rows[:, ctx.vocab_pos] = ctx.proj[ctx.vocab_pos][None]
            n_sent = ctx.sent_pos_sorted.numel()
            if n_sent:
                rows[:, ctx.sent_pos_sorted] = dyn[:, :n_sent]
            if k:
                rows[:, n:] = dyn[:, n_sent:]
            return rows
        # no fusion on text rows: align against the projected inputs
        rows = torch.cat([ctx.proj, ctx.negatives], dim=0)
        return rows[None].expand(b, -1, -1)

    # ------------------------------------------------------------------
    # full pass

    def forward_batch(
        self, images: torch.Tensor, prompts, negatives: SentenceEmbeddings = None
    ) -> ForwardOutputs:
        cfg = self.cfg
        b = images.shape[0]
        tokens = self.backbone(images) + self.pos[None]
        ctx = self.encode_text(prompts, negatives)
        memory, dyn = self._fused_encoder(tokens, ctx)

        objectness = self.enc_score(memory).squeeze(-1)
        deltas = self.enc_delta(memory)
        proposals = torch.sigmoid(inverse_sigmoid(self.anchors)[None] + deltas)

        top = objectness.topk(cfg.q, dim=1).indices  # (B, q)
        gather = top[..., None]
        ref = torch.take_along_dim(proposals, gather.expand(-1, -1, 4), dim=1)
        feats = torch.take_along_dim(memory, gather.expand(-1, -1, cfg.d_v), dim=1)
        x = self.query_norm(self.query_proj(feats))

        if self.cfg.fusion_mode == MODE_OBJECT_WORD and ctx.word_proj is not None:
            align_rows = None  # handled per-layer through word scores
            word_rows = dyn if dyn is not None else ctx.word_proj[None].expand(b, -1, -1)
        else:
            align_rows = self._alignment_rows(ctx, dyn, b)
            word_rows = None

        ref_logit = inverse_sigmoid(ref)
        layer_scores, layer_boxes = [], []
        for layer in self.dec_layers:
            x = layer(x, memory)
            boxes = torch.sigmoid(ref_logit + self.box_head(x))
            if word_rows is not None:
                word_scores = self.align_scores(x, word_rows)
                scores = self._pool_word_scores(word_scores, ctx, b)
            else:
                scores = self.align_scores(x, align_rows)
            layer_scores.append(scores)
            layer_boxes.append(boxes)

        g = cfg.grid
        pix = self.pixel_proj(memory).view(b, g, g, cfg.mask_dim).permute(0, 3, 1, 2)
        pix = F.interpolate(
            pix, size=(cfg.mask_size, cfg.mask_size), mode="bilinear", align_corners=False
        )
        mask_logits = torch.einsum("bqd,bdhw->bqhw", self.mask_embed(x), pix)

        return ForwardOutputs(
            enc_objectness=objectness,
            enc_boxes=proposals,
            anchors=self.anchors,
            layer_scores=layer_scores,
            layer_boxes=layer_boxes,
            mask_logits=mask_logits,
            n_real_cols=ctx.n_prompts,
            object_embeddings=x,
        )

    @property
    def tau(self) -> torch.Tensor:
        return self.log_tau.exp()

    def align_scores(self, object_embeddings: torch.Tensor, text_rows: torch.Tensor):
        """Temperature-scaled cosine alignment between queries and prompt rows.

        Both sides are unit-normalized after projection, so the learned
        temperature owns the logit scale outright.  Accepts (q, d_v) with
        (n, d) or the batched (B, q, d_v) with (B, n, d).
        """
        emb = F.normalize(self.obj_proj(object_embeddings), dim=-1)
        rows = F.normalize(text_rows, dim=-1)
        if emb.ndim == 2:
            return self.tau * emb @ rows.transpose(-1, -2)
        return self.tau * torch.bmm(emb, rows.transpose(1, 2))

    def _pool_word_scores(self, word_scores: torch.Tensor, ctx: TextContext, b: int):
        """Mean word score per owning prompt (object-word ablation arm)."""
        n_cols = ctx.n_prompts + ctx.negatives.shape[0]
        q = word_scores.shape[1]
        counts = torch.zeros(n_cols, dtype=word_scores.dtype, device=word_scores.device)
        counts.index_add_(
            0, ctx.word_owner, torch.ones_like(ctx.word_owner, dtype=word_scores.dtype)
        )
        sums = torch.zeros(
            (b, q, n_cols), dtype=word_scores.dtype, device=word_scores.device
        )
        sums.index_add_(2, ctx.word_owner, word_scores)
        return sums / counts.clamp(min=1.0)

    def forward(self, image: torch.Tensor, prompts, negatives: SentenceEmbeddings = None) -> Predictions:
        """Single-image convenience wrapper returning the Predictions contract."""
        if image.ndim == 3:
            image = image[None]
        out = self.forward_batch(image, prompts, negatives)
        return Predictions(
            scores=out.layer_scores[-1][0, :, : out.n_real_cols],
            boxes=out.layer_boxes[-1][0],
            masks=out.mask_logits[0],
            enc_objectness=out.enc_objectness[0],
        )

    def parameter_groups(self) -> dict:
        """Named parameter groups for per-group gradient verification."""
        groups = {
            "backbone": list(self.patch_proj.parameters()),
            "text_proj": list(self.text_proj.parameters()),
            "encoder": list(self.enc_layers.parameters())
            + list(self.enc_score.parameters())
            + list(self.enc_delta.parameters()),
            "decoder": list(self.dec_layers.parameters())
            + list(self.query_proj.parameters())
            + list(self.query_norm.parameters()),
            "box_head": list(self.box_head.parameters()),
            "align_head": list(self.obj_proj.parameters()) + [self.log_tau],
            "mask_head": list(self.mask_embed.parameters())
            + list(self.pixel_proj.parameters()),
        }
        if self.fusion_layers is not None:
            groups["fusion"] = list(self.fusion_layers.parameters())
        return groups
