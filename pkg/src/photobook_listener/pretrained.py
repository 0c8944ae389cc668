"""Adapters for pretrained encoders behind the desk-scale handle contracts.

Everything here needs model downloads and is imported lazily; the desk-scale
suite never touches it. The text backbone adapter exposes the same
embed / layer / final_norm surface as the tiny backbone so the listener's
per-layer injection and causal masking apply unchanged.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .features import PATCH_DIM, PATCH_GRID
from .gamedata import ImageRef


class DisentangledBackboneAdapter(nn.Module):
    """Pretrained disentangled-attention encoder behind the backbone handle.

    Wraps the HuggingFace DeBERTa-base encoder: ``embed`` runs the embedding
    module, ``layer`` runs one encoder layer with the causal mask folded into
    its attention mask. Relative-position embeddings are fetched once per
    forward via the encoder's own helpers.
    """

    def __init__(self, model_name: str = "microsoft/deberta-base"):
        super().__init__()
        from transformers import AutoModel

        self.inner = AutoModel.from_pretrained(model_name)
        cfg = self.inner.config
        self.hidden_size = cfg.hidden_size
        self.num_layers = cfg.num_hidden_layers
        self._rel_embeddings = None

    def embed(self, token_ids: torch.Tensor) -> torch.Tensor:
        return self.inner.embeddings(input_ids=token_ids)

    def _attention_mask(self, attn_mask: torch.Tensor,
                        batch: int) -> torch.Tensor:
        # DeBERTa consumes a (B, T, T) mask of allowed positions
        allowed = (~attn_mask).to(torch.uint8)
        return allowed.unsqueeze(0).expand(batch, -1, -1)

    def layer(self, index: int, states: torch.Tensor, attn_mask,
              key_padding_mask=None) -> torch.Tensor:
        encoder = self.inner.encoder
        mask = self._attention_mask(attn_mask, states.shape[0])
        if key_padding_mask is not None:
            keep = (~key_padding_mask).to(mask.dtype)
            mask = mask * keep[:, None, :]
        if index == 1 or self._rel_embeddings is None:
            self._rel_embeddings = encoder.get_rel_embedding()
        rel_pos = encoder.get_rel_pos(states)
        out = encoder.layer[index - 1](
            states, mask, relative_pos=rel_pos,
            rel_embeddings=self._rel_embeddings)
        return out[0] if isinstance(out, (tuple, list)) else out

    def final_norm(self, states: torch.Tensor) -> torch.Tensor:
        return states


class ClipRelevanceScorer:
    """CLIPScore-convention scorer backed by the ViT-B/32 CLIP model."""

    def __init__(self, model_name: str = "openai/clip-vit-base-patch32",
                 device: str = "cpu"):
        from transformers import CLIPModel, CLIPProcessor

        self.model = CLIPModel.from_pretrained(model_name).to(device).eval()
        self.processor = CLIPProcessor.from_pretrained(model_name)
        self.device = device
        self.version = f"clip:{model_name}"
        self._image_cache: dict[str, np.ndarray] = {}

    def _image_vector(self, image: ImageRef) -> np.ndarray:
        cached = self._image_cache.get(image.image_id)
        if cached is not None:
            return cached
        from PIL import Image

        pixels = Image.open(image.uri).convert("RGB")
        inputs = self.processor(images=pixels, return_tensors="pt").to(
            self.device)
        with torch.no_grad():
            vec = self.model.get_image_features(**inputs)[0].cpu().numpy()
        vec = vec / np.linalg.norm(vec)
        self._image_cache[image.image_id] = vec
        return vec

    def scalar(self, text: str, image: ImageRef) -> float:
        inputs = self.processor(text=[f"A photo depicts {text}"],
                                return_tensors="pt", truncation=True).to(
            self.device)
        with torch.no_grad():
            tv = self.model.get_text_features(**inputs)[0].cpu().numpy()
        tv = tv / np.linalg.norm(tv)
        return 2.5 * max(float(np.dot(tv, self._image_vector(image))), 0.0)


class SegmentationPatchEncoder:
    """Final-stage patch features from a segmentation-trained encoder."""

    def __init__(self,
                 model_name: str = "nvidia/segformer-b4-finetuned-ade-512-512",
                 device: str = "cpu"):
        from transformers import (AutoImageProcessor,
                                  SegformerForSemanticSegmentation)

        self.model = SegformerForSemanticSegmentation.from_pretrained(
            model_name).to(device).eval()
        self.processor = AutoImageProcessor.from_pretrained(model_name)
        self.device = device
        self.version = f"segformer:{model_name}"

    def patch_features(self, image: ImageRef) -> np.ndarray:
        from PIL import Image

        pixels = Image.open(image.uri).convert("RGB")
        inputs = self.processor(images=pixels, return_tensors="pt").to(
            self.device)
        with torch.no_grad():
            out = self.model(**inputs, output_hidden_states=True)
        last = out.hidden_states[-1][0]  # (C, H', W') final encoder stage
        grid = last.permute(1, 2, 0).cpu().numpy()
        if grid.shape != (PATCH_GRID, PATCH_GRID, PATCH_DIM):
            raise ValueError(f"unexpected patch grid {grid.shape}")
        return grid
