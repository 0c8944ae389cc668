"""Utterance-image relevance vectors and image feature representations.

The relevance scorer follows CLIPScore semantics: rescaled clipped cosine
between an embedded utterance and an embedded image,

    score(text, image) = 2.5 * max(cos(e_text, e_image), 0).

Scorers and patch encoders are injected handles so the desk-scale hash-based
implementations and real pretrained encoders share one contract. Rows are kept
raw (no per-utterance normalization); absolute peaks carry signal downstream.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .gamedata import ImageRef, PerspectiveInstance

PATCH_GRID = 16
PATCH_DIM = 512
RESCALE_W = 2.5


class FeatureContractError(Exception):
    pass


class RelevanceError(Exception):
    """Scoring failed for an utterance; no partial rows are ever returned."""


class RelevanceScorerHandle(Protocol):
    version: str

    def scalar(self, text: str, image: ImageRef) -> float: ...


class PatchEncoderHandle(Protocol):
    version: str

    def patch_features(self, image: ImageRef) -> np.ndarray: ...


def clipped_cosine_score(text_vec: np.ndarray, image_vec: np.ndarray,
                         w: float = RESCALE_W) -> float:
    """Reference scorer formula on already-embedded pairs."""
    tn = np.linalg.norm(text_vec)
    vn = np.linalg.norm(image_vec)
    if tn == 0.0 or vn == 0.0:
        return 0.0
    cos = float(np.dot(text_vec, image_vec) / (tn * vn))
    return w * max(cos, 0.0)


def _hash_unit_vector(key: str, dim: int, salt: str = "") -> np.ndarray:
    seed = int.from_bytes(
        hashlib.blake2b(f"{salt}:{key}".encode(), digest_size=8).digest(), "big")
    rng = np.random.default_rng(seed)
    vec = rng.standard_normal(dim)
    return vec / np.linalg.norm(vec)


def image_descriptor(image: ImageRef) -> str:
    """Content key of a synthetic image: the last segment of its uri."""
    return image.uri.rsplit("/", 1)[-1] or image.image_id


@dataclass(frozen=True)
class HashEmbeddingScorer:
    """Desk-scale scorer: bag-of-words text embedding vs. hashed image embedding.

    An image's embedding is the hash vector of its descriptor, so utterances
    mentioning the descriptor word score high against that image. Deterministic
    and dependency-free; swap in a CLIP-backed handle for full runs.
    """

    dim: int = 256
    version: str = "hash-embed-v1"

    def text_vector(self, text: str) -> np.ndarray:
        words = [w.lower() for w in text.split()]
        if not words:
            return np.zeros(self.dim)
        vecs = [_hash_unit_vector(w, self.dim, salt="word") for w in words]
        return np.mean(vecs, axis=0)

    def image_vector(self, image: ImageRef) -> np.ndarray:
        return _hash_unit_vector(image_descriptor(image).lower(), self.dim,
                                 salt="word")

    def scalar(self, text: str, image: ImageRef) -> float:
        return clipped_cosine_score(self.text_vector(text), self.image_vector(image))

    def spec(self) -> dict:
        return {"type": "hash-embed", "dim": self.dim}


def scorer_from_spec(spec: dict) -> HashEmbeddingScorer:
    if spec.get("type") != "hash-embed":
        raise ValueError(f"unknown scorer spec {spec!r}")
    return HashEmbeddingScorer(dim=spec.get("dim", 256))


def score_relevance(text: str, images: Sequence[ImageRef],
                    scorer: RelevanceScorerHandle) -> np.ndarray:
    """One utterance against the 6 context images -> an R^6 row."""
    if len(images) != 6:
        raise FeatureContractError(f"expected 6 images, got {len(images)}")
    row = np.empty(6, dtype=np.float64)
    for j, image in enumerate(images):
        try:
            row[j] = scorer.scalar(text, image)
        except Exception as exc:
            raise RelevanceError(
                f"scorer failed on image {image.image_id}: {exc}") from exc
    if not np.all(np.isfinite(row)):
        raise RelevanceError(f"non-finite relevance row for {text!r}")
    return row


@dataclass
class RelevanceMatrix:
    """Per-utterance 6-vectors, in context-image order; supports streaming append."""

    rows: list[np.ndarray] = field(default_factory=list)

    @property
    def num_utterances(self) -> int:
        return len(self.rows)

    def append_row(self, row: np.ndarray) -> None:
        row = np.asarray(row, dtype=np.float64)
        if row.shape != (6,):
            raise FeatureContractError(f"relevance row must be R^6, got {row.shape}")
        self.rows.append(row)

    def as_array(self) -> np.ndarray:
        if not self.rows:
            return np.zeros((0, 6), dtype=np.float64)
        return np.stack(self.rows)


def relevance_for_dialogue(instance: PerspectiveInstance,
                           scorer: RelevanceScorerHandle,
                           cache: "FeatureCache | None" = None) -> RelevanceMatrix:
    """Batch relevance for a whole round; identical to incremental appends."""
    matrix = RelevanceMatrix()
    images = instance.view.context_images
    for utt in instance.utterances:
        matrix.append_row(relevance_row(utt.text, images, scorer, cache))
    return matrix


def relevance_row(text: str, images: Sequence[ImageRef],
                  scorer: RelevanceScorerHandle,
                  cache: "FeatureCache | None" = None) -> np.ndarray:
    if cache is None:
        return score_relevance(text, images, scorer)
    key = relevance_cache_key(text, images, scorer.version)
    hit = cache.get(key)
    if hit is not None:
        return hit
    row = score_relevance(text, images, scorer)
    cache.put(key, row)
    return row


# ---------------------------------------------------------------------------
# Patch features and pooling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HashPatchEncoder:
    """Deterministic pseudo patch grid derived from the image descriptor."""

    version: str = "hash-patch-v1"

    def patch_features(self, image: ImageRef) -> np.ndarray:
        seed = int.from_bytes(hashlib.blake2b(
            f"patch:{image_descriptor(image)}".encode(), digest_size=8).digest(), "big")
        rng = np.random.default_rng(seed)
        base = rng.standard_normal(PATCH_DIM)
        jitter = 0.05 * rng.standard_normal((PATCH_GRID, PATCH_GRID, PATCH_DIM))
        return (base[None, None, :] + jitter).astype(np.float32)


@dataclass(frozen=True)
class PixelPatchEncoder:
    """Patch grid from real pixels: per-cell mean color projected to 512 dims.

    The projection matrix is fixed by seed, so a constant-color image yields an
    exactly constant grid.
    """

    projection_seed: int = 7
    version: str = "pixel-patch-v1"

    def patch_features(self, image: ImageRef) -> np.ndarray:
        from PIL import Image

        try:
            img = Image.open(image.uri).convert("RGB")
        except OSError as exc:
            raise IOError(f"cannot read image {image.uri!r}: {exc}") from exc
        img = img.resize((PATCH_GRID * 8, PATCH_GRID * 8))
        arr = np.asarray(img, dtype=np.float64) / 255.0
        cells = arr.reshape(PATCH_GRID, 8, PATCH_GRID, 8, 3).mean(axis=(1, 3))
        rng = np.random.default_rng(self.projection_seed)
        proj = rng.standard_normal((3, PATCH_DIM)) / np.sqrt(3)
        return (cells @ proj).astype(np.float32)


def extract_patch_features(image: ImageRef, encoder: PatchEncoderHandle,
                           cache: "FeatureCache | None" = None) -> np.ndarray:
    """16x16 grid of 512-d patch vectors for one image, cached by content."""
    key = f"patch:{encoder.version}:{image.image_id}:{_content_hash(image.uri)}"
    if cache is not None:
        hit = cache.get(key)
        if hit is not None:
            return hit
    grid = np.asarray(encoder.patch_features(image))
    if grid.shape != (PATCH_GRID, PATCH_GRID, PATCH_DIM):
        raise FeatureContractError(
            f"encoder returned {grid.shape}, expected "
            f"({PATCH_GRID}, {PATCH_GRID}, {PATCH_DIM})")
    if not np.all(np.isfinite(grid)):
        raise FeatureContractError("non-finite patch features")
    if cache is not None:
        cache.put(key, grid)
    return grid


def pool_image_features(patches: np.ndarray, downsampler=None) -> np.ndarray:
    """Pool one image's patch grid to a single 512-d vector.

    Plain mean over the 256 patches by default; when the cross-attention
    variant is active its strided grouped convolution is passed in and pooling
    becomes conv-to-8x8 followed by the mean over 64 patches.
    """
    patches = np.asarray(patches)
    if patches.shape != (PATCH_GRID, PATCH_GRID, PATCH_DIM):
        raise FeatureContractError(f"bad patch grid shape {patches.shape}")
    if downsampler is None:
        return patches.reshape(-1, PATCH_DIM).mean(axis=0)
    down = np.asarray(downsampler(patches))
    if down.shape[-1] != PATCH_DIM:
        raise FeatureContractError(f"downsampler returned shape {down.shape}")
    return down.reshape(-1, PATCH_DIM).mean(axis=0)


def image_feature_set(images: Sequence[ImageRef], encoder: PatchEncoderHandle,
                      cache: "FeatureCache | None" = None) -> np.ndarray:
    """Pooled 512-d vectors for the 6 context images, stacked (6, 512)."""
    if len(images) != 6:
        raise FeatureContractError(f"expected 6 images, got {len(images)}")
    return np.stack([
        pool_image_features(extract_patch_features(img, encoder, cache))
        for img in images])


def patch_feature_set(images: Sequence[ImageRef], encoder: PatchEncoderHandle,
                      cache: "FeatureCache | None" = None) -> np.ndarray:
    """(6, 16, 16, 512) grids for the cross-attention variant."""
    if len(images) != 6:
        raise FeatureContractError(f"expected 6 images, got {len(images)}")
    return np.stack([extract_patch_features(img, encoder, cache)
                     for img in images])


class ImageFeatureProvider(Protocol):
    dim: int
    version: str

    def image_features(self, images: Sequence[ImageRef]) -> np.ndarray: ...


@dataclass(frozen=True)
class PooledPatchFeatures:
    """Full pipeline provider: encoder patches mean-pooled to 512-d vectors."""

    encoder: PatchEncoderHandle = field(default_factory=HashPatchEncoder)
    cache: "FeatureCache | None" = None
    dim: int = PATCH_DIM

    @property
    def version(self) -> str:
        return f"pooled:{self.encoder.version}"

    def image_features(self, images: Sequence[ImageRef]) -> np.ndarray:
        return image_feature_set(images, self.encoder, self.cache)


@dataclass(frozen=True)
class HashImageFeatures:
    """Low-dimensional hashed image vectors for tiny desk-scale models."""

    dim: int = 64
    version: str = "hash-imgfeat-v1"

    def image_features(self, images: Sequence[ImageRef]) -> np.ndarray:
        if len(images) != 6:
            raise FeatureContractError(f"expected 6 images, got {len(images)}")
        return np.stack([
            _hash_unit_vector(image_descriptor(im).lower(), self.dim,
                              salt="imgfeat") for im in images])

    def spec(self) -> dict:
        return {"type": "hash-imgfeat", "dim": self.dim}


def image_features_from_spec(spec: dict):
    kind = spec.get("type")
    if kind == "hash-imgfeat":
        return HashImageFeatures(dim=spec.get("dim", 64))
    if kind == "pooled-hash-patch":
        return PooledPatchFeatures(encoder=HashPatchEncoder())
    raise ValueError(f"unknown image feature spec {spec!r}")


# ---------------------------------------------------------------------------
# Cache
# ---------------------------------------------------------------------------


def _content_hash(text: str) -> str:
    return hashlib.blake2b(text.encode("utf-8"), digest_size=12).hexdigest()


def relevance_cache_key(text: str, images: Sequence[ImageRef],
                        scorer_version: str) -> str:
    img_part = ",".join(f"{im.image_id}:{_content_hash(im.uri)}" for im in images)
    return f"rel:{scorer_version}:{_content_hash(text)}:{_content_hash(img_part)}"


class FeatureCache:
    """Flat binary sidecar (`blobs.bin`) plus a JSON index, keyed by content.

    Writes are serialized under a lock and the index is replaced atomically;
    reads are lock-free and may run concurrently.
    """

    def __init__(self, directory: str):
        self.directory = directory
        os.makedirs(directory, exist_ok=True)
        self._bin_path = os.path.join(directory, "blobs.bin")
        self._index_path = os.path.join(directory, "index.json")
        self._lock = threading.Lock()
        self._index = self._load_index()

    def _load_index(self) -> dict:
        if os.path.exists(self._index_path):
            with open(self._index_path, "r", encoding="utf-8") as fh:
                return json.load(fh)
        return {}

    def get(self, key: str) -> np.ndarray | None:
        entry = self._index.get(key)
        if entry is None:
            return None
        with open(self._bin_path, "rb") as fh:
            fh.seek(entry["offset"])
            raw = fh.read(entry["length"])
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"]))
        return arr.reshape(entry["shape"]).copy()

    def put(self, key: str, array: np.ndarray) -> None:
        array = np.ascontiguousarray(array)
        raw = array.tobytes()
        with self._lock:
            if key in self._index:
                return
            with open(self._bin_path, "ab") as fh:
                offset = fh.tell()
                fh.write(raw)
            self._index[key] = {
                "offset": offset, "length": len(raw),
                "dtype": array.dtype.str, "shape": list(array.shape)}
            tmp = self._index_path + ".tmp"
            with open(tmp, "w", encoding="utf-8") as fh:
                json.dump(self._index, fh)
            os.replace(tmp, self._index_path)

    def __len__(self) -> int:
        return len(self._index)
