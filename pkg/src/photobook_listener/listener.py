"""Conditioned listener model.

A bidirectionally-initialized transformer backbone is run under a causal
attention mask; per-utterance relevance vectors are projected through a
learnable d x 6 matrix and added to the hidden states of every token in that
utterance's span, at each configured layer. A 2-layer GELU head reads
[pooled target-image features + index embedding ; final hidden state] and
emits a 3-way belief (undecided / common / different) at every token.

The backbone is an injected handle exposing ``embed`` and per-layer ``layer``
calls so desk-scale tests run a small randomly initialized encoder while full
runs can plug in a pretrained one behind the same interface.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .features import PATCH_DIM
from .textalign import TokenizedDialogue

EMB = "emb"  # injection site for the embedding output


class ModelContractError(Exception):
    pass


class SessionError(Exception):
    pass


@dataclass(frozen=True)
class ListenerConfig:
    hidden_size: int = 768
    num_layers: int = 12
    num_heads: int = 12
    ffn_size: int | None = None  # defaults to 4 * hidden_size
    vocab_size: int = 2048
    max_len: int = 512
    image_feature_dim: int = PATCH_DIM
    head_hidden: int | None = None  # defaults to hidden_size
    num_labels: int = 3
    injection_layers: tuple = ()  # () means all transformer layers 1..L
    use_relevance: bool = True
    use_cross_attention: bool = False

    def __post_init__(self):
        if self.hidden_size <= 0 or self.num_layers <= 0:
            raise ValueError("hidden_size and num_layers must be positive")
        if self.hidden_size % self.num_heads:
            raise ValueError("num_heads must divide hidden_size")
        valid = {EMB, *range(1, self.num_layers + 1)}
        if any(l not in valid for l in self.injection_layers):
            raise ValueError(
                f"injection_layers {self.injection_layers} outside "
                f"{{emb, 1..{self.num_layers}}}")

    @property
    def resolved_injection_layers(self) -> tuple:
        if self.injection_layers:
            return self.injection_layers
        return tuple(range(1, self.num_layers + 1))

    @property
    def resolved_ffn_size(self) -> int:
        return self.ffn_size or 4 * self.hidden_size

    @property
    def resolved_head_hidden(self) -> int:
        return self.head_hidden or self.hidden_size

    @classmethod
    def tiny(cls, **overrides) -> "ListenerConfig":
        """Desk-scale config: d=16, L=2, small vocab, 64-d image features."""
        defaults = dict(hidden_size=16, num_layers=2, num_heads=2,
                        vocab_size=512, max_len=256, image_feature_dim=64)
        defaults.update(overrides)
        return cls(**defaults)


def causal_mask(length: int, device=None) -> torch.Tensor:
    """Bool (T, T) mask, True where attention is disallowed (strictly future)."""
    return torch.triu(torch.ones(length, length, dtype=torch.bool,
                                 device=device), diagonal=1)


class EncoderBlock(nn.Module):
    """Pre-norm transformer block: self-attention + FFN on a residual stream.

    Pre-norm keeps small from-scratch encoders stable across seeds, which the
    desk-scale experiments rely on.
    """

    def __init__(self, hidden: int, heads: int, ffn: int):
        super().__init__()
        self.attn = nn.MultiheadAttention(hidden, heads, batch_first=True)
        self.ln1 = nn.LayerNorm(hidden)
        self.ffn_in = nn.Linear(hidden, ffn)
        self.ffn_out = nn.Linear(ffn, hidden)
        self.ln2 = nn.LayerNorm(hidden)

    def forward(self, x, attn_mask, key_padding_mask=None):
        q = self.ln1(x)
        a, _ = self.attn(q, q, q, attn_mask=attn_mask,
                         key_padding_mask=key_padding_mask, need_weights=False)
        x = x + a
        return x + self.ffn_out(F.gelu(self.ffn_in(self.ln2(x))))


class TinyTransformerBackbone(nn.Module):
    """Randomly initialized encoder exposing per-layer hidden states.

    Desk-scale stand-in for a pretrained encoder; same call surface.
    """

    def __init__(self, config: ListenerConfig):
        super().__init__()
        self.hidden_size = config.hidden_size
        self.num_layers = config.num_layers
        self.token_emb = nn.Embedding(config.vocab_size, config.hidden_size,
                                      padding_idx=0)
        self.pos_emb = nn.Embedding(config.max_len, config.hidden_size)
        self.emb_ln = nn.LayerNorm(config.hidden_size)
        self.blocks = nn.ModuleList([
            EncoderBlock(config.hidden_size, config.num_heads,
                         config.resolved_ffn_size)
            for _ in range(config.num_layers)])
        self.out_ln = nn.LayerNorm(config.hidden_size)

    def embed(self, token_ids: torch.Tensor) -> torch.Tensor:
        positions = torch.arange(token_ids.shape[1], device=token_ids.device)
        h = self.token_emb(token_ids) + self.pos_emb(positions)[None]
        return self.emb_ln(h)

    def layer(self, index: int, states: torch.Tensor, attn_mask,
              key_padding_mask=None) -> torch.Tensor:
        return self.blocks[index - 1](states, attn_mask, key_padding_mask)

    def final_norm(self, states: torch.Tensor) -> torch.Tensor:
        return self.out_ln(states)


class CrossAttentionBlock(nn.Module):
    """Residual cross-attention readout of the downsampled patch sequence.

    The residual branch is attention followed by a bias-free FFN, so a
    zero value projection makes the whole block an exact identity.
    """

    def __init__(self, hidden: int, heads: int, ffn: int):
        super().__init__()
        self.ln = nn.LayerNorm(hidden)
        self.attn = nn.MultiheadAttention(hidden, heads, batch_first=True,
                                          bias=False)
        self.ffn_in = nn.Linear(hidden, ffn, bias=False)
        self.ffn_out = nn.Linear(ffn, hidden, bias=False)

    def forward(self, x, patch_seq):
        a, _ = self.attn(self.ln(x), patch_seq, patch_seq, need_weights=False)
        return x + self.ffn_out(F.gelu(self.ffn_in(a)))


class PatchDownsampler(nn.Module):
    """Strided grouped 2-d convolution: 16x16 patch grid -> 8x8."""

    def __init__(self, channels: int = PATCH_DIM, groups: int = 16):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, kernel_size=2, stride=2,
                              groups=groups)

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        """(B, 6, 16, 16, C) -> (B, 6, 8, 8, C)."""
        b, n, g1, g2, c = patches.shape
        x = patches.reshape(b * n, g1, g2, c).permute(0, 3, 1, 2)
        x = self.conv(x)
        return x.permute(0, 2, 3, 1).reshape(b, n, g1 // 2, g2 // 2, c)


class ConditionedListener(nn.Module):
    def __init__(self, config: ListenerConfig, backbone: nn.Module | None = None):
        super().__init__()
        self.config = config
        self.backbone = backbone if backbone is not None else \
            TinyTransformerBackbone(config)
        d = config.hidden_size
        self.relevance_proj = nn.Linear(6, d, bias=False)
        self.target_pos_emb = nn.Embedding(6, config.image_feature_dim)
        self.head_in = nn.Linear(config.image_feature_dim + d,
                                 config.resolved_head_hidden)
        self.head_out = nn.Linear(config.resolved_head_hidden, config.num_labels)
        if config.use_cross_attention:
            if config.image_feature_dim != PATCH_DIM:
                raise ModelContractError(
                    "cross-attention variant requires 512-d patch features")
            self.patch_downsampler = PatchDownsampler()
            self.patch_proj = nn.Linear(PATCH_DIM, d, bias=False)
            # one module applied twice = two weight-tied layers
            self.cross_block = CrossAttentionBlock(d, config.num_heads,
                                                   config.resolved_ffn_size)

    # -- encoding -----------------------------------------------------------

    def patch_pipeline(self, patches: torch.Tensor):
        """Downsample (B,6,16,16,512) patches; return the 384-vector
        cross-attention sequence and per-image pooled 512-d features."""
        down = self.patch_downsampler(patches)  # (B, 6, 8, 8, 512)
        b = down.shape[0]
        pooled = down.reshape(b, 6, -1, PATCH_DIM).mean(dim=2)
        seq = self.patch_proj(down.reshape(b, 6 * 8 * 8, PATCH_DIM))
        return seq, pooled

    def encode(self, token_ids: torch.Tensor, cond: torch.Tensor | None = None,
               pad_mask: torch.Tensor | None = None,
               patches: torch.Tensor | None = None) -> torch.Tensor:
        """Final-layer hidden states under causal masking.

        ``cond`` holds the per-token relevance 6-vector (the utterance's row
        broadcast over its span); None disables injection entirely, which is
        also the forward used by the no-relevance variant regardless of cond.
        """
        cfg = self.config
        if pad_mask is not None and pad_mask.dtype != torch.bool:
            raise ModelContractError("pad_mask must be bool (True = real token)")
        key_padding = None if pad_mask is None else ~pad_mask
        inject = cfg.use_relevance and cond is not None
        if inject and cond.shape[:2] != token_ids.shape:
            raise ModelContractError(
                f"condition shape {tuple(cond.shape)} does not cover tokens "
                f"{tuple(token_ids.shape)}")
        sites = set(cfg.resolved_injection_layers)
        proj = self.relevance_proj(cond) if inject else None

        if patches is not None and not cfg.use_cross_attention:
            raise ModelContractError(
                "patches supplied but the cross-attention variant is off")
        h = self.backbone.embed(token_ids)
        if proj is not None and EMB in sites:
            h = h + proj
        if cfg.use_cross_attention:
            if patches is None:
                raise ModelContractError("cross-attention variant needs patches")
            patch_seq, _ = self.patch_pipeline(patches)
            h = self.cross_block(h, patch_seq)
            h = self.cross_block(h, patch_seq)
        mask = causal_mask(token_ids.shape[1], device=token_ids.device)
        for l in range(1, cfg.num_layers + 1):
            h = self.backbone.layer(l, h, mask, key_padding)
            if proj is not None and l in sites:
                h = h + proj
        if hasattr(self.backbone, "final_norm"):
            h = self.backbone.final_norm(h)
        return h

    # -- prediction ---------------------------------------------------------

    def belief_logits(self, hidden: torch.Tensor, image_feats: torch.Tensor,
                      target_indices: torch.Tensor) -> torch.Tensor:
        """(B,T,d) states + (B,6,Dv) pooled features -> (B,3,T,3) logits."""
        if image_feats.shape[1] != 6:
            raise ModelContractError("image_feats must cover all 6 images")
        b, t, d = hidden.shape
        idx = target_indices.unsqueeze(-1).expand(-1, -1, image_feats.shape[-1])
        v = image_feats.gather(1, idx)  # (B, 3, Dv)
        v = v + self.target_pos_emb(target_indices)
        n_tgt = target_indices.shape[1]
        v_exp = v.unsqueeze(2).expand(b, n_tgt, t, v.shape[-1])
        h_exp = hidden.unsqueeze(1).expand(b, n_tgt, t, d)
        x = torch.cat([v_exp, h_exp], dim=-1)
        return self.head_out(F.gelu(self.head_in(x)))

    def forward(self, batch: "ListenerBatch") -> "ListenerOutput":
        patches = batch.patches if self.config.use_cross_attention else None
        hidden = self.encode(batch.token_ids, batch.cond, batch.pad_mask,
                             patches)
        if self.config.use_cross_attention:
            _, image_feats = self.patch_pipeline(batch.patches)
        else:
            image_feats = batch.image_feats
        logits = self.belief_logits(hidden, image_feats, batch.target_indices)
        return ListenerOutput(logits=logits,
                              beliefs=torch.softmax(logits, dim=-1),
                              hidden=hidden)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


@dataclass
class ListenerBatch:
    token_ids: torch.Tensor          # (B, T) long, 0 = pad
    cond: torch.Tensor               # (B, T, 6) float
    pad_mask: torch.Tensor           # (B, T) bool, True = real token
    image_feats: torch.Tensor        # (B, 6, Dv) pooled features
    target_indices: torch.Tensor     # (B, 3) long
    labels: torch.Tensor | None = None   # (B, 3, T) long
    patches: torch.Tensor | None = None  # (B, 6, 16, 16, 512)
    lengths: torch.Tensor | None = None  # (B,) long

    def to_dtype(self, dtype) -> "ListenerBatch":
        """Cast the floating-point tensors (doubles for gradient checks)."""
        def mv(x):
            return None if x is None else x.to(dtype)
        return ListenerBatch(
            token_ids=self.token_ids, cond=mv(self.cond),
            pad_mask=self.pad_mask, image_feats=mv(self.image_feats),
            target_indices=self.target_indices, labels=self.labels,
            patches=mv(self.patches), lengths=self.lengths)


@dataclass
class ListenerOutput:
    logits: torch.Tensor   # (B, 3, T, 3)
    beliefs: torch.Tensor  # (B, 3, T, 3), softmax over the last axis
    hidden: torch.Tensor   # (B, T, d)


def condition_matrix(dialogue: TokenizedDialogue,
                     relevance: np.ndarray) -> np.ndarray:
    """Broadcast per-utterance relevance rows over their token spans -> (T, 6)."""
    relevance = np.asarray(relevance, dtype=np.float64)
    if relevance.shape != (dialogue.num_utterances, 6):
        raise ModelContractError(
            f"relevance {relevance.shape} does not match "
            f"{dialogue.num_utterances} utterances")
    cond = np.zeros((dialogue.length, 6))
    for k, (s, e) in enumerate(dialogue.spans):
        cond[s:e] = relevance[k]
    return cond


def single_batch(dialogue: TokenizedDialogue, relevance: np.ndarray,
                 image_feats: np.ndarray, target_indices: Sequence[int],
                 labels: np.ndarray | None = None,
                 patches: np.ndarray | None = None,
                 dtype=torch.float32) -> ListenerBatch:
    """Wrap one instance as a batch of size 1."""
    t = dialogue.length
    return ListenerBatch(
        token_ids=torch.tensor([dialogue.token_ids], dtype=torch.long),
        cond=torch.tensor(condition_matrix(dialogue, relevance),
                          dtype=dtype).unsqueeze(0),
        pad_mask=torch.ones(1, t, dtype=torch.bool),
        image_feats=torch.tensor(image_feats, dtype=dtype).unsqueeze(0),
        target_indices=torch.tensor([list(target_indices)], dtype=torch.long),
        labels=None if labels is None else
        torch.tensor(labels, dtype=torch.long).unsqueeze(0),
        patches=None if patches is None else
        torch.tensor(patches, dtype=dtype).unsqueeze(0),
        lengths=torch.tensor([t], dtype=torch.long))


# ---------------------------------------------------------------------------
# Streaming sessions
# ---------------------------------------------------------------------------


class ListenerSession:
    """Incremental evaluation of one round in progress.

    Each appended utterance re-encodes the full (causally masked) prefix, so
    returned beliefs are exactly those of a batch forward truncated at the same
    token; dialogue lengths make the recompute cheap.
    """

    def __init__(self, model: ConditionedListener, tokenizer, scorer,
                 images, target_indices: Sequence[int],
                 image_feats: np.ndarray | None = None,
                 patches: np.ndarray | None = None):
        from . import features as F_
        from . import textalign as TA

        self._ta = TA
        self.model = model
        self.tokenizer = tokenizer
        self.scorer = scorer
        self.images = tuple(images)
        if len(self.images) != 6:
            raise SessionError(f"expected 6 images, got {len(self.images)}")
        self.target_indices = tuple(target_indices)
        if len(set(self.target_indices)) != 3 or \
                any(not 0 <= i < 6 for i in self.target_indices):
            raise SessionError(f"bad target indices {target_indices}")
        if model.config.use_cross_attention:
            if patches is None:
                raise SessionError("cross-attention checkpoint needs patches")
            self.patches = np.asarray(patches)
            self.image_feats = np.zeros((6, model.config.image_feature_dim))
        else:
            if image_feats is None:
                image_feats = F_.image_feature_set(self.images,
                                                   F_.HashPatchEncoder())
            self.patches = None
            self.image_feats = np.asarray(image_feats)
        self.relevance = F_.RelevanceMatrix()
        self.token_ids: list[int] = []
        self.token_texts: list[str] = []
        self.spans: list[tuple[int, int]] = []
        self.markers: list[int] = []
        self.self_flags: list[bool] = []

    @property
    def num_utterances(self) -> int:
        return len(self.spans)

    def dialogue(self) -> TokenizedDialogue:
        return TokenizedDialogue(
            token_ids=tuple(self.token_ids), token_texts=tuple(self.token_texts),
            spans=tuple(self.spans),
            speaker_marker_positions=tuple(self.markers),
            is_self=tuple(self.self_flags))

    def step(self, text: str, is_self: bool,
             relevance_row: np.ndarray | None = None) -> dict:
        """Append one utterance and return beliefs at the latest token.

        The relevance row is computed from the scorer unless supplied
        (precomputed rows keep offline replays byte-identical).
        """
        from . import features as F_

        if not text or not text.strip():
            raise SessionError("empty utterance text")
        if relevance_row is None:
            relevance_row = F_.score_relevance(text, self.images, self.scorer)
        self._ta.append_utterance(self.token_ids, self.token_texts, self.spans,
                                  self.markers, self.self_flags,
                                  self.tokenizer, text, is_self)
        self.relevance.append_row(relevance_row)
        return self._beliefs()

    def _beliefs(self) -> dict:
        batch = single_batch(self.dialogue(), self.relevance.as_array(),
                             self.image_feats, self.target_indices,
                             patches=self.patches)
        self.model.eval()
        with torch.no_grad():
            out = self.model(batch)
        trajectory = out.beliefs[0].numpy()  # (3, T, 3)
        latest = {j: trajectory[i, -1].tolist()
                  for i, j in enumerate(self.target_indices)}
        return {"latest": latest, "trajectory": trajectory,
                "token_count": len(self.token_ids)}


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path, model: nn.Module, kind: str = "listener",
                    extra: dict | None = None) -> None:
    """Versioned archive: config, kind tag, weights, bundle metadata."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "kind": kind,
        "config": asdict(model.config),
        "state": model.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[nn.Module, str, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ModelContractError(f"unsupported checkpoint version {version}")
    kind = payload["kind"]
    cfg = dict(payload["config"])
    if kind == "listener":
        cfg["injection_layers"] = tuple(cfg.get("injection_layers", ()))
        model = ConditionedListener(ListenerConfig(**cfg))
    elif kind == "baseline":
        from .baseline import BaselineConfig, BaselineListener
        model = BaselineListener(BaselineConfig(**cfg))
    else:
        raise ModelContractError(f"unknown checkpoint kind {kind!r}")
    model.load_state_dict(payload["state"])
    model.eval()
    return model, kind, payload["extra"]
