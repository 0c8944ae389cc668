"""Adapted reference-resolution baseline for the full listener task.

Entirely feedforward: a query encoder forms one representation of the whole
round via learnable weighted averaging of token embeddings plus the target
image's features; a context encoder embeds each of the 6 images together with
the mean embedding of its reference-chain utterances and is mean-pooled; a
2-layer GELU head over the concatenation predicts common vs. different. One
prediction per (instance, target) -- there is no dense supervision here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .features import _hash_unit_vector


class BaselineContractError(Exception):
    pass


@dataclass(frozen=True)
class BaselineConfig:
    text_dim: int = 128       # dimension of the injected token embeddings
    image_feature_dim: int = 64
    hidden: int = 128         # shared encoder/head width
    num_labels: int = 2       # common / different

    def __post_init__(self):
        if min(self.text_dim, self.image_feature_dim, self.hidden) <= 0:
            raise ValueError("dimensions must be positive")


@dataclass(frozen=True)
class HashTokenEmbedder:
    """Desk-scale contextual-embedding stand-in: hashed unit vector per word."""

    dim: int = 128
    version: str = "hash-token-v1"

    def embed_tokens(self, words: list[str]) -> np.ndarray:
        if not words:
            return np.zeros((0, self.dim))
        return np.stack([_hash_unit_vector(w.lower(), self.dim, salt="btok")
                         for w in words])


class BaselineListener(nn.Module):
    def __init__(self, config: BaselineConfig):
        super().__init__()
        self.config = config
        h = config.hidden
        self.query_score = nn.Linear(config.text_dim, 1)
        self.query_text = nn.Linear(config.text_dim, h)
        self.query_image = nn.Linear(config.image_feature_dim, h)
        self.ctx_text = nn.Linear(config.text_dim, h)
        self.ctx_image = nn.Linear(config.image_feature_dim, h)
        self.head_in = nn.Linear(2 * h, h)
        self.head_out = nn.Linear(h, config.num_labels)

    def query_encoder(self, token_embs: torch.Tensor, pad_mask: torch.Tensor,
                      target_feats: torch.Tensor) -> torch.Tensor:
        """Learnable weighted average over the round's token embeddings,
        fused with the target image's features."""
        scores = self.query_score(token_embs).squeeze(-1)  # (B, T)
        scores = scores.masked_fill(~pad_mask, float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        pooled = torch.einsum("bt,btd->bd", weights, token_embs)
        return self.query_text(pooled) + self.query_image(target_feats)

    def context_encoder(self, image_feats: torch.Tensor,
                        chain_embs: torch.Tensor) -> torch.Tensor:
        """Encode each image with its chain-average embedding; mean-pool the 6
        context representations (permutation invariant by construction)."""
        if image_feats.shape[1] != 6:
            raise BaselineContractError("context encoder expects 6 images")
        reps = self.ctx_image(image_feats) + self.ctx_text(chain_embs)
        return reps.mean(dim=1)

    def forward(self, batch: "BaselineBatch") -> torch.Tensor:
        """Logits over {common, different}, shape (B, 2)."""
        idx = batch.target_index.view(-1, 1, 1).expand(
            -1, 1, batch.image_feats.shape[-1])
        target_feats = batch.image_feats.gather(1, idx).squeeze(1)
        query = self.query_encoder(batch.token_embs, batch.pad_mask,
                                   target_feats)
        context = self.context_encoder(batch.image_feats, batch.chain_embs)
        x = torch.cat([query, context], dim=-1)
        return self.head_out(F.gelu(self.head_in(x)))

    def predict_proba(self, batch: "BaselineBatch") -> torch.Tensor:
        return torch.softmax(self.forward(batch), dim=-1)


@dataclass
class BaselineBatch:
    token_embs: torch.Tensor    # (B, T, De) whole-round token embeddings
    pad_mask: torch.Tensor      # (B, T) bool, True = real token
    image_feats: torch.Tensor   # (B, 6, Dv)
    chain_embs: torch.Tensor    # (B, 6, De) chain-average text embedding per image
    target_index: torch.Tensor  # (B,) long
    labels: torch.Tensor | None = None  # (B,) long: 0 common, 1 different


BASELINE_COMMON, BASELINE_DIFFERENT = 0, 1


@dataclass
class EncodedBaselineItem:
    instance_id: str
    theme: tuple[str, str]
    token_embs: np.ndarray
    image_feats: np.ndarray
    chain_embs: np.ndarray
    target_index: int
    gold: int


def chain_average_embeddings(utterance_texts, chains_by_image, embedder,
                             num_images: int = 6) -> np.ndarray:
    """Average token embedding of each image's chain utterances; zero vector
    for images with an empty chain (the chain-free ablation passes none)."""
    out = np.zeros((num_images, embedder.dim))
    for image_index, utt_indices in chains_by_image.items():
        vecs = []
        for k in utt_indices:
            embs = embedder.embed_tokens(utterance_texts[k].split())
            if len(embs):
                vecs.append(embs.mean(axis=0))
        if vecs:
            out[image_index] = np.mean(vecs, axis=0)
    return out


def prepare_baseline_items(instance, embedder, image_provider,
                           chains_by_image=None) -> list[EncodedBaselineItem]:
    """One item per target. ``chains_by_image`` maps 0-based image index ->
    utterance indices; None runs the chain-free ablation."""
    words: list[str] = []
    for utt in instance.utterances:
        words.extend(utt.text.split())
    token_embs = embedder.embed_tokens(words)
    texts = [u.text for u in instance.utterances]
    chain_embs = chain_average_embeddings(texts, chains_by_image or {}, embedder)
    image_feats = image_provider.image_features(instance.view.context_images)
    from .gamedata import Mark

    items = []
    for j in instance.target_indices:
        gold = (BASELINE_COMMON if instance.gold_final_labels[j] is Mark.COMMON
                else BASELINE_DIFFERENT)
        items.append(EncodedBaselineItem(
            instance_id=instance.instance_id, theme=instance.round.theme,
            token_embs=token_embs, image_feats=image_feats,
            chain_embs=chain_embs, target_index=j, gold=gold))
    return items


def collate_baseline(items: list[EncodedBaselineItem],
                     dtype=torch.float32) -> BaselineBatch:
    b = len(items)
    t_max = max(len(it.token_embs) for it in items)
    de = items[0].token_embs.shape[-1] if len(items[0].token_embs) else \
        items[0].chain_embs.shape[-1]
    token_embs = torch.zeros(b, t_max, de, dtype=dtype)
    pad_mask = torch.zeros(b, t_max, dtype=torch.bool)
    for i, it in enumerate(items):
        t = len(it.token_embs)
        if t:
            token_embs[i, :t] = torch.tensor(it.token_embs, dtype=dtype)
            pad_mask[i, :t] = True
    return BaselineBatch(
        token_embs=token_embs, pad_mask=pad_mask,
        image_feats=torch.tensor(np.stack([it.image_feats for it in items]),
                                 dtype=dtype),
        chain_embs=torch.tensor(np.stack([it.chain_embs for it in items]),
                                dtype=dtype),
        target_index=torch.tensor([it.target_index for it in items],
                                  dtype=torch.long),
        labels=torch.tensor([it.gold for it in items], dtype=torch.long))


def train_baseline(model: BaselineListener, train_items, valid_items,
                   schedule=None) -> dict:
    """Cross-entropy training on final labels with the shared LR schedule."""
    from .trainer import TrainConfig, lr_at_step, _batches, _NpShuffler
    import math

    schedule = schedule or TrainConfig()
    torch.manual_seed(schedule.seed)
    shuffler = _NpShuffler(np.random.default_rng(schedule.seed))
    optimizer = torch.optim.AdamW(model.parameters(), lr=schedule.peak_lr,
                                  weight_decay=schedule.weight_decay)
    steps_per_epoch = math.ceil(len(train_items) / schedule.batch_size)
    total_steps = steps_per_epoch * schedule.max_epochs
    best_acc, best_epoch, best_state = -1.0, -1, None
    step = 0
    history = []
    import copy
    for epoch in range(1, schedule.max_epochs + 1):
        model.train()
        losses = []
        for chunk in _batches(train_items, schedule.batch_size, shuffler):
            step += 1
            lr = lr_at_step(step, total_steps, schedule.peak_lr,
                            schedule.warmup_steps)
            for group in optimizer.param_groups:
                group["lr"] = lr
            batch = collate_baseline(chunk)
            loss = F.cross_entropy(model(batch), batch.labels)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
        acc = evaluate_baseline(model, valid_items)
        history.append({"epoch": epoch, "loss": float(np.mean(losses)),
                        "valid_accuracy": acc})
        if acc > best_acc:
            best_acc, best_epoch = acc, epoch
            best_state = copy.deepcopy(model.state_dict())
        elif epoch - best_epoch >= schedule.patience:
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    return {"history": history, "best_valid_accuracy": best_acc,
            "best_epoch": best_epoch}


def evaluate_baseline(model: BaselineListener, items,
                      batch_size: int = 32) -> float:
    from .trainer import _batches

    model.eval()
    correct = 0
    with torch.no_grad():
        for chunk in _batches(items, batch_size):
            batch = collate_baseline(chunk)
            pred = model(batch).argmax(dim=-1)
            correct += int((pred == batch.labels).sum())
    return correct / len(items) if items else 0.0
