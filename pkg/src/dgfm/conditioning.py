"""Genre prompts, foundation-model embedding I/O, and music feature fusion.

Foundation models never run in-process: per-frame audio embeddings and genre
text embeddings arrive through tensor files (or a seeded stub for tests and
offline runs).  Fusion combines the audio embedding (through a residual MLP
adapter) with a linear projection of the STFT features by addition.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .audio import StftFeatureMap, N_BINS
from .tensorfile import load_tensor, save_tensor

EMBED_DIM = 512


class ConditioningError(Exception):
    pass


class EmbeddingShapeError(ConditioningError):
    pass


class AlignmentError(ConditioningError):
    pass


@dataclass
class ClipAudioEmbedding:
    frames: np.ndarray  # (T, 512)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[1] != EMBED_DIM:
            raise EmbeddingShapeError(
                f"audio embedding must be (T, {EMBED_DIM}), got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ConditioningError("audio embedding contains NaN/Inf")


@dataclass
class GenreEmbedding:
    vector: np.ndarray  # (512,)

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if self.vector.shape != (EMBED_DIM,):
            raise EmbeddingShapeError(
                f"genre embedding must be ({EMBED_DIM},), got {self.vector.shape}")
        if not np.all(np.isfinite(self.vector)):
            raise ConditioningError("genre embedding contains NaN/Inf")


def build_prompt(genre: str) -> str:
    """Expand a genre label into the fixed sentence fed to the text encoder."""
    if not genre or not genre.strip():
        raise ConditioningError("genre label must be non-empty")
    return f"This is a {genre} type of music."


def load_embedding(path):
    """Load an audio (T x 512) or genre (512) embedding from a tensor file."""
    arr = load_tensor(path, check_finite=True)
    if arr.ndim == 2:
        if arr.shape[1] != EMBED_DIM:
            raise EmbeddingShapeError(
                f"{path}: trailing dim {arr.shape[1]}, expected {EMBED_DIM}")
        return ClipAudioEmbedding(arr)
    if arr.ndim == 1:
        if arr.shape[0] != EMBED_DIM:
            raise EmbeddingShapeError(
                f"{path}: length {arr.shape[0]}, expected {EMBED_DIM}")
        return GenreEmbedding(arr)
    raise EmbeddingShapeError(f"{path}: rank {arr.ndim} not supported")


def save_embedding(path, emb) -> None:
    arr = emb.frames if isinstance(emb, ClipAudioEmbedding) else emb.vector
    save_tensor(path, arr)


def stub_embedding(seed: int, n_frames: int) -> ClipAudioEmbedding:
    """Deterministic unit-norm pseudo-embedding rows; a Wav2CLIP stand-in."""
    if n_frames < 1:
        raise ConditioningError(f"n_frames must be >= 1, got {n_frames}")
    rng = np.random.Generator(np.random.PCG64(seed))
    rows = rng.standard_normal((n_frames, EMBED_DIM))
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    return ClipAudioEmbedding(rows)


def genre_stub_seed(genre: str, base_seed: int = 0) -> int:
    digest = hashlib.sha256(f"{base_seed}:{build_prompt(genre)}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def stub_genre_embedding(genre: str, base_seed: int = 0) -> GenreEmbedding:
    rows = stub_embedding(genre_stub_seed(genre, base_seed), 1)
    return GenreEmbedding(rows.frames[0])


def _xavier(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    std = np.sqrt(2.0 / (n_in + n_out))
    return rng.standard_normal((n_in, n_out)) * std


class MusicFusion:
    """adapter(audio_embedding) + linear(stft) -> fused conditioning map.

    The adapter is a residual 2-layer MLP whose second layer starts at zero,
    so fusion begins as identity-plus-projection and drifts as it trains.
    """

    def __init__(self, rng: np.random.Generator, activation: str = "gelu"):
        if activation not in ("gelu", "identity"):
            raise ConditioningError(f"unknown activation {activation!r}")
        self.activation = activation
        self.params: dict[str, Tensor] = {
            "adapter.w1": Tensor(_xavier(rng, EMBED_DIM, EMBED_DIM), requires_grad=True),
            "adapter.b1": Tensor(np.zeros(EMBED_DIM), requires_grad=True),
            "adapter.w2": Tensor(np.zeros((EMBED_DIM, EMBED_DIM)), requires_grad=True),
            "adapter.b2": Tensor(np.zeros(EMBED_DIM), requires_grad=True),
            "proj.w": Tensor(_xavier(rng, N_BINS, EMBED_DIM), requires_grad=True),
            "proj.b": Tensor(np.zeros(EMBED_DIM), requires_grad=True),
        }

    def adapter(self, x: Tensor) -> Tensor:
        p = self.params
        h = ad.matmul(x, p["adapter.w1"]) + p["adapter.b1"]
        if self.activation == "gelu":
            h = ad.gelu(h)
        return x + (ad.matmul(h, p["adapter.w2"]) + p["adapter.b2"])

    def project_stft(self, stft: Tensor) -> Tensor:
        return ad.matmul(stft, self.params["proj.w"]) + self.params["proj.b"]

    def fuse(self, w2c, stft) -> Tensor:
        """Combine a (T, 512) audio embedding with (T, 193) STFT features."""
        if isinstance(w2c, ClipAudioEmbedding):
            w2c = Tensor(w2c.frames)
        if isinstance(stft, StftFeatureMap):
            stft = Tensor(stft.frames)
        if w2c.shape[0] != stft.shape[0]:
            raise AlignmentError(
                f"frame counts differ: audio embedding {w2c.shape[0]} vs "
                f"stft {stft.shape[0]}")
        return self.adapter(w2c) + self.project_stft(stft)


class FileEmbeddingProvider:
    """Reads embeddings from tensor files next to the dataset."""

    kind = "file"

    def audio_embedding(self, path, n_frames: int) -> ClipAudioEmbedding:
        emb = load_embedding(path)
        if not isinstance(emb, ClipAudioEmbedding):
            raise EmbeddingShapeError(f"{path}: expected a rank-2 audio embedding")
        if emb.frames.shape[0] != n_frames:
            raise AlignmentError(
                f"{path}: {emb.frames.shape[0]} rows, expected {n_frames}")
        return emb

    def genre_embedding(self, path) -> GenreEmbedding:
        emb = load_embedding(path)
        if not isinstance(emb, GenreEmbedding):
            raise EmbeddingShapeError(f"{path}: expected a rank-1 genre embedding")
        return emb


class StubEmbeddingProvider:
    """Seeded deterministic embeddings for tests and checkpoint-free runs."""

    kind = "stub"

    def __init__(self, seed: int):
        self.seed = int(seed)

    def audio_embedding(self, record_seed: int, n_frames: int) -> ClipAudioEmbedding:
        return stub_embedding(self.seed ^ int(record_seed), n_frames)

    def genre_embedding(self, genre: str) -> GenreEmbedding:
        return stub_genre_embedding(genre, base_seed=self.seed)
