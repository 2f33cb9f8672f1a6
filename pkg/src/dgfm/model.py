"""The trainable model: music fusion, denoiser, null embeddings, stats.

Checkpoints are a single tensor container holding every parameter plus the
normalization statistics, schedule metadata, architecture scalars, and the
genre vocabulary (encoded in entry names).
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .conditioning import EMBED_DIM, MusicFusion
from .denoiser import DanceDenoiser, DenoiserConfig
from .diffusion import Normalizer
from .tensorfile import load_container, save_container


class ModelError(Exception):
    pass


class DGFMModel:
    def __init__(self, config: DenoiserConfig, normalizer: Normalizer,
                 genres: list[str], rng: np.random.Generator,
                 schedule_T: int = 1000, fusion_activation: str = "gelu"):
        self.config = config
        self.normalizer = normalizer
        self.genres = list(genres)
        self.schedule_T = schedule_T
        self.fusion = MusicFusion(rng, activation=fusion_activation)
        self.denoiser = DanceDenoiser(config, rng)
        self.null_music = Tensor(rng.standard_normal(EMBED_DIM) * 0.02,
                                 requires_grad=True)
        self.null_genre = Tensor(rng.standard_normal(EMBED_DIM) * 0.02,
                                 requires_grad=True)

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, p in self.fusion.params.items():
            out[f"fusion.{name}"] = p
        for name, p in self.denoiser.params.items():
            out[f"denoiser.{name}"] = p
        out["null.music"] = self.null_music
        out["null.genre"] = self.null_genre
        return out

    def param_names(self) -> dict[int, str]:
        return {id(p): name for name, p in self.params().items()}

    def save_checkpoint(self, path, extra: dict[str, np.ndarray] | None = None
                        ) -> None:
        cfg = self.config
        tensors: dict[str, np.ndarray] = {
            "meta.hidden": np.asarray(float(cfg.hidden)),
            "meta.layers": np.asarray(float(cfg.layers)),
            "meta.heads": np.asarray(float(cfg.heads)),
            "meta.mlp_ratio": np.asarray(float(cfg.mlp_ratio)),
            "meta.dropout": np.asarray(float(cfg.dropout)),
            "meta.max_frames": np.asarray(float(cfg.max_frames)),
            "meta.schedule_T": np.asarray(float(self.schedule_T)),
            "meta.fusion_gelu": np.asarray(
                1.0 if self.fusion.activation == "gelu" else 0.0),
            "norm.mean": self.normalizer.mean,
            "norm.std": self.normalizer.std,
        }
        for i, genre in enumerate(self.genres):
            tensors[f"vocab.{genre}"] = np.asarray(float(i))
        for name, p in self.params().items():
            tensors[f"param.{name}"] = p.data
        if extra:
            tensors.update(extra)
        save_container(path, tensors)

    @classmethod
    def load_checkpoint(cls, path) -> tuple["DGFMModel", dict[str, np.ndarray]]:
        tensors = load_container(path)
        try:
            config = DenoiserConfig(
                hidden=int(tensors["meta.hidden"]),
                layers=int(tensors["meta.layers"]),
                heads=int(tensors["meta.heads"]),
                mlp_ratio=int(tensors["meta.mlp_ratio"]),
                # scalars live as float32 in the file; undo the lossy trip
                dropout=round(float(tensors["meta.dropout"]), 6),
                max_frames=int(tensors["meta.max_frames"]),
            )
            normalizer = Normalizer(tensors["norm.mean"], tensors["norm.std"])
        except KeyError as exc:
            raise ModelError(f"{path}: checkpoint missing entry {exc}") from exc
        vocab = sorted(
            ((int(v), name[len("vocab."):]) for name, v in tensors.items()
             if name.startswith("vocab.")))
        genres = [g for _, g in vocab]
        activation = "gelu" if tensors.get("meta.fusion_gelu", 1.0) else "identity"
        model = cls(config, normalizer, genres,
                    rng=np.random.default_rng(0),
                    schedule_T=int(tensors["meta.schedule_T"]),
                    fusion_activation=activation)
        params = model.params()
        for name, p in params.items():
            key = f"param.{name}"
            if key not in tensors:
                raise ModelError(f"{path}: checkpoint missing parameter {name}")
            stored = tensors[key]
            if stored.shape != p.data.shape:
                raise ModelError(
                    f"{path}: parameter {name} has shape {stored.shape}, "
                    f"expected {p.data.shape}")
            p.data = np.asarray(stored, dtype=np.float64)
        extra = {name: arr for name, arr in tensors.items()
                 if not name.startswith(("param.", "meta.", "norm.", "vocab."))}
        return model, extra
