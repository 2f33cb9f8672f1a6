"""Attention-based denoising network with time-FiLM and text-FiLM conditioning.

The network maps a noisy pose window (B, k, 319), a timestep, the fused music
map (B, k, 512) and a genre vector (B, 512) to a clean pose estimate.  Each
transformer layer runs self-attention over frames, cross-attention against
the music map, and an MLP; every sub-block output is modulated by a FiLM
derived from the timestep embedding before its residual add.  A final
text-FiLM (initialized to identity) applies the genre conditioning.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .conditioning import EMBED_DIM
from .motion import POSE_DIM


class DenoiserError(Exception):
    pass


@dataclass
class DenoiserConfig:
    hidden: int = 512
    layers: int = 4
    heads: int = 8
    mlp_ratio: int = 4
    dropout: float = 0.1
    max_frames: int = 120

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise DenoiserError(
                f"hidden ({self.hidden}) must be divisible by heads ({self.heads})")


def film_apply(y: Tensor, gamma: Tensor, shift: Tensor) -> Tensor:
    """out[..., c] = gamma[c] * y[..., c] + shift[c]."""
    if gamma.shape[-1] != y.shape[-1] or shift.shape[-1] != y.shape[-1]:
        raise ad.ShapeMismatchError("film_apply", y.shape, gamma.shape,
                                    "channel counts must match")
    return ad.mul(y, gamma) + shift


def _xavier(rng, n_in, n_out):
    return rng.standard_normal((n_in, n_out)) * np.sqrt(2.0 / (n_in + n_out))


_CROSS_ALIGN = 1.75  # diagonal logit strength of the time-aligned prior


class DanceDenoiser:
    def __init__(self, config: DenoiserConfig, rng: np.random.Generator):
        self.config = config
        h = config.hidden
        p: dict[str, Tensor] = {}

        def param(name, value):
            p[name] = Tensor(value, requires_grad=True)

        param("in.w", _xavier(rng, POSE_DIM, h))
        param("in.b", np.zeros(h))
        # the music map is time-aligned with the motion frames (T = k), so
        # both streams start from one shared position table and the cross
        # attention q/k projections start identity-aligned: frame j attends
        # mostly to music row j from step 0, and training reshapes it
        pos_table = rng.standard_normal((config.max_frames, h))
        param("pos", pos_table.copy())
        music_pos = np.zeros((config.max_frames, EMBED_DIM))
        music_pos[:, :h] = pos_table
        param("pos_music", music_pos)
        param("time.w1", _xavier(rng, h, h))
        param("time.b1", np.zeros(h))
        param("time.w2", _xavier(rng, h, h))
        param("time.b2", np.zeros(h))
        for i in range(config.layers):
            for blk, kv_dim in (("sa", h), ("ca", EMBED_DIM), ("mlp", None)):
                base = f"layers.{i}.{blk}"
                if blk != "mlp":
                    if blk == "ca":
                        wq = _CROSS_ALIGN * np.eye(h) + _xavier(rng, h, h) * 0.1
                        wk = np.zeros((kv_dim, h))
                        wk[:h, :] = _CROSS_ALIGN * np.eye(h)
                        wk += _xavier(rng, kv_dim, h) * 0.1
                        param(f"{base}.wq", wq)
                        param(f"{base}.wk", wk)
                    else:
                        param(f"{base}.wq", _xavier(rng, h, h))
                        param(f"{base}.wk", _xavier(rng, kv_dim, h))
                    param(f"{base}.wv", _xavier(rng, kv_dim, h))
                    param(f"{base}.wo", _xavier(rng, h, h))
                    param(f"{base}.bo", np.zeros(h))
                else:
                    param(f"{base}.w1", _xavier(rng, h, h * config.mlp_ratio))
                    param(f"{base}.b1", np.zeros(h * config.mlp_ratio))
                    param(f"{base}.w2", _xavier(rng, h * config.mlp_ratio, h))
                    param(f"{base}.b2", np.zeros(h))
                # small random init keeps the modulation near identity while
                # still making the timestep visible from step 0
                param(f"{base}.film_g", rng.standard_normal((h, h)) * 0.01)
                param(f"{base}.film_s", rng.standard_normal((h, h)) * 0.01)
        # text-FiLM: adapter alpha then the gamma/shift projections, which
        # start exactly at identity (gamma=1, shift=0)
        param("film.alpha.w1", _xavier(rng, EMBED_DIM, h))
        param("film.alpha.b1", np.zeros(h))
        param("film.alpha.w2", _xavier(rng, h, h))
        param("film.alpha.b2", np.zeros(h))
        param("film.gamma.w", np.zeros((h, h)))
        param("film.gamma.b", np.ones(h))
        param("film.shift.w", np.zeros((h, h)))
        param("film.shift.b", np.zeros(h))
        param("out.w", _xavier(rng, h, POSE_DIM))
        param("out.b", np.zeros(POSE_DIM))
        self.params = p

    # -- sub-modules ---------------------------------------------------------

    def _time_embedding(self, t: np.ndarray) -> Tensor:
        base = ad.sinusoidal_embedding(np.asarray(t, dtype=np.float64),
                                       self.config.hidden)
        p = self.params
        e = ad.matmul(Tensor(base), p["time.w1"]) + p["time.b1"]
        return ad.matmul(ad.gelu(e), p["time.w2"]) + p["time.b2"]

    def _time_film(self, h: Tensor, e: Tensor, base: str, k: int) -> Tensor:
        p = self.params
        gamma = ad.matmul(e, p[f"{base}.film_g"])   # (B, H)
        shiftv = ad.matmul(e, p[f"{base}.film_s"])
        b, hid = gamma.shape
        gamma = ad.tile_axis(gamma.reshape(b, 1, hid), 1, k)
        shiftv = ad.tile_axis(shiftv.reshape(b, 1, hid), 1, k)
        return ad.mul(h, gamma + 1.0) + shiftv

    def _attention(self, x_q: Tensor, x_kv: Tensor, base: str,
                   dropout_mask: np.ndarray | None) -> Tensor:
        p = self.params
        heads = self.config.heads
        bsz, k, hid = x_q.shape
        t_kv = x_kv.shape[1]
        dh = hid // heads
        q = ad.matmul(x_q, p[f"{base}.wq"])
        kk = ad.matmul(x_kv, p[f"{base}.wk"])
        v = ad.matmul(x_kv, p[f"{base}.wv"])
        q = ad.transpose(q.reshape(bsz, k, heads, dh), (0, 2, 1, 3))
        kk = ad.transpose(kk.reshape(bsz, t_kv, heads, dh), (0, 2, 1, 3))
        v = ad.transpose(v.reshape(bsz, t_kv, heads, dh), (0, 2, 1, 3))
        att = ad.softmax(ad.matmul(q, ad.transpose(kk)) * (1.0 / np.sqrt(dh)))
        out = ad.matmul(att, v)
        out = ad.transpose(out, (0, 2, 1, 3)).reshape(bsz, k, hid)
        out = ad.matmul(out, p[f"{base}.wo"]) + p[f"{base}.bo"]
        if dropout_mask is not None:
            out = ad.mul(out, Tensor(dropout_mask))
        return out

    def _mlp(self, x: Tensor, base: str, dropout_mask: np.ndarray | None) -> Tensor:
        p = self.params
        hdn = ad.gelu(ad.matmul(x, p[f"{base}.w1"]) + p[f"{base}.b1"])
        if dropout_mask is not None:
            hdn = ad.mul(hdn, Tensor(dropout_mask))
        return ad.matmul(hdn, p[f"{base}.w2"]) + p[f"{base}.b2"]

    def text_film_params(self, c_e: Tensor) -> tuple[Tensor, Tensor]:
        """FiLM scale/shift derived from the genre embedding (Eq-style
        adapter -> two linear heads)."""
        p = self.params
        a = ad.matmul(c_e, p["film.alpha.w1"]) + p["film.alpha.b1"]
        a = ad.matmul(ad.gelu(a), p["film.alpha.w2"]) + p["film.alpha.b2"]
        gamma = ad.matmul(a, p["film.gamma.w"]) + p["film.gamma.b"]
        shift = ad.matmul(a, p["film.shift.w"]) + p["film.shift.b"]
        return gamma, shift

    # -- forward ---------------------------------------------------------------

    def forward(self, d_t: Tensor, t, c_m: Tensor, c_e: Tensor,
                train: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        """Predict the clean pose window.

        d_t: (B, k, 319), t: (B,) ints, c_m: (B, k, 512), c_e: (B, 512).
        """
        cfg = self.config
        if d_t.ndim != 3 or d_t.shape[2] != POSE_DIM:
            raise DenoiserError(f"d_t must be (B, k, {POSE_DIM}), got {d_t.shape}")
        bsz, k, _ = d_t.shape
        if k > cfg.max_frames:
            raise DenoiserError(f"k={k} exceeds max_frames={cfg.max_frames}")
        if c_m.shape != (bsz, k, EMBED_DIM):
            raise DenoiserError(
                f"music map must be ({bsz}, {k}, {EMBED_DIM}) to align with "
                f"the {k} motion frames, got {c_m.shape}")
        p = self.params

        def drop_mask(shape):
            if not train or cfg.dropout <= 0.0:
                return None
            if rng is None:
                raise DenoiserError("training forward with dropout needs an rng")
            keep = 1.0 - cfg.dropout
            return (rng.random(shape) < keep).astype(np.float64) / keep

        x = ad.matmul(d_t, p["in.w"]) + p["in.b"]
        x = x + p["pos"][0:k, :]
        c_m = c_m + p["pos_music"][0:k, :]
        e = self._time_embedding(t)
        for i in range(cfg.layers):
            base = f"layers.{i}"
            xn = ad.layer_norm(x)
            h = self._attention(xn, xn, f"{base}.sa",
                                drop_mask((bsz, k, cfg.hidden)))
            x = x + self._time_film(h, e, f"{base}.sa", k)
            h = self._attention(ad.layer_norm(x), c_m, f"{base}.ca",
                                drop_mask((bsz, k, cfg.hidden)))
            x = x + self._time_film(h, e, f"{base}.ca", k)
            h = self._mlp(ad.layer_norm(x), f"{base}.mlp",
                          drop_mask((bsz, k, cfg.hidden * cfg.mlp_ratio)))
            x = x + self._time_film(h, e, f"{base}.mlp", k)
        x = ad.layer_norm(x)
        gamma, shift = self.text_film_params(c_e)    # (B, H) each
        gamma = ad.tile_axis(gamma.reshape(bsz, 1, cfg.hidden), 1, k)
        shift = ad.tile_axis(shift.reshape(bsz, 1, cfg.hidden), 1, k)
        x = ad.mul(x, gamma) + shift
        return ad.matmul(x, p["out.w"]) + p["out.b"]

    def forward_single(self, d_t: np.ndarray, t: int, c_m: np.ndarray,
                       c_e: np.ndarray) -> np.ndarray:
        """Convenience non-training forward on one unbatched window."""
        out = self.forward(
            Tensor(d_t[None]), np.array([t]),
            Tensor(np.asarray(c_m)[None]), Tensor(np.asarray(c_e)[None]))
        return out.data[0]
