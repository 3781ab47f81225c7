"""Transformer velocity model: pre-norm blocks with adaptive-norm
modulation driven by the timestep/condition embedding, zero-initialized
output path, and an optional wide shallow denoising head that lets the
denoising width exceed the backbone width."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class DenoiserConfig:
    hidden: int = 64
    depth: int = 2
    heads: int = 4
    num_tokens: int = 8
    token_dim: int = 16
    cond_dim: int = 32
    ddt_head_width: int | None = None
    ddt_head_depth: int = 2

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.ddt_head_width is not None and self.ddt_head_width <= self.hidden:
            raise ValueError("ddt_head_width must exceed the backbone width")
        if self.ddt_head_depth < 1:
            raise ValueError("ddt_head_depth must be >= 1")


def _block_specs(prefix: str, width: int) -> list[tuple[str, tuple[int, ...], str]]:
    return [
        (f"{prefix}/qkv/w", (width, 3 * width), "normal"),
        (f"{prefix}/qkv/b", (3 * width,), "zero"),
        (f"{prefix}/attn_out/w", (width, width), "normal"),
        (f"{prefix}/attn_out/b", (width,), "zero"),
        (f"{prefix}/mlp1/w", (width, 4 * width), "normal"),
        (f"{prefix}/mlp1/b", (4 * width,), "zero"),
        (f"{prefix}/mlp2/w", (4 * width, width), "normal"),
        (f"{prefix}/mlp2/b", (width,), "zero"),
        (f"{prefix}/adaln/w", (width, 6 * width), "zero"),
        (f"{prefix}/adaln/b", (6 * width,), "zero"),
    ]


def param_specs(cfg: DenoiserConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """Ordered (name, shape, init-kind) list for every learned parameter."""
    h = cfg.hidden
    specs: list[tuple[str, tuple[int, ...], str]] = [
        ("denoiser/in_proj/w", (cfg.token_dim, h), "normal"),
        ("denoiser/in_proj/b", (h,), "zero"),
        ("denoiser/pos_emb/w", (cfg.num_tokens, h), "normal"),
        ("denoiser/t_mlp1/w", (h, h), "normal"),
        ("denoiser/t_mlp1/b", (h,), "zero"),
        ("denoiser/t_mlp2/w", (h, h), "normal"),
        ("denoiser/t_mlp2/b", (h,), "zero"),
        ("denoiser/cond_proj/w", (cfg.cond_dim, h), "normal"),
        ("denoiser/cond_proj/b", (h,), "zero"),
    ]
    for i in range(cfg.depth):
        specs += _block_specs(f"denoiser/block{i}", h)
    if cfg.ddt_head_width is None:
        specs += [
            ("denoiser/final_adaln/w", (h, 2 * h), "zero"),
            ("denoiser/final_adaln/b", (2 * h,), "zero"),
            ("denoiser/out_proj/w", (h, cfg.token_dim), "zero"),
            ("denoiser/out_proj/b", (cfg.token_dim,), "zero"),
        ]
    else:
        w = cfg.ddt_head_width
        specs += [
            ("denoiser/head_in/w", (h, w), "normal"),
            ("denoiser/head_in/b", (w,), "zero"),
            ("denoiser/head_cond/w", (h, w), "normal"),
            ("denoiser/head_cond/b", (w,), "zero"),
        ]
        for i in range(cfg.ddt_head_depth):
            specs += _block_specs(f"denoiser/head_block{i}", w)
        specs += [
            ("denoiser/final_adaln/w", (w, 2 * w), "zero"),
            ("denoiser/final_adaln/b", (2 * w,), "zero"),
            ("denoiser/out_proj/w", (w, cfg.token_dim), "zero"),
            ("denoiser/out_proj/b", (cfg.token_dim,), "zero"),
        ]
    return specs


def param_count(cfg: DenoiserConfig) -> int:
    """Exact learned-parameter count (seed independent)."""
    return sum(int(np.prod(shape)) for _, shape, _ in param_specs(cfg))


def backbone_widths(cfg: DenoiserConfig) -> list[int]:
    """Activation widths of the backbone path, in order, head excluded."""
    return [cfg.hidden] * (1 + cfg.depth)


def sinusoidal_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Standard sin/cos timestep features, scaled to the usual 1000-step range."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = 1000.0 * np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=-1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], 1))], axis=-1)
    return emb


class Denoiser:
    """Velocity model over token latents.

    The final projection (and every modulation branch) is zero-initialized,
    so a freshly built model predicts exactly zero velocity.
    """

    def __init__(self, cfg: DenoiserConfig, seed: int):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        for name, shape, kind in param_specs(cfg):
            if kind == "zero":
                data = np.zeros(shape)
            else:
                pseed = T.derive_seed(seed, "denoiser-init", name)
                data = 0.02 * T.seeded_normal(shape, pseed).data
            p = Tensor(data, requires_grad=True)
            self.params[name] = p

    # ------------------------------------------------------------------

    def _linear(self, x: Tensor, name: str) -> Tensor:
        return T.matmul(x, self.params[f"{name}/w"]) + self.params[f"{name}/b"]

    def _ln(self, x: Tensor) -> Tensor:
        d = x.shape[-1]
        return T.layer_norm(x, Tensor(np.ones(d)), Tensor(np.zeros(d)))

    def _attention(self, x: Tensor, prefix: str, heads: int) -> Tensor:
        b, n, w = x.shape
        dk = w // heads
        qkv = self._linear(x, f"{prefix}/qkv")
        q = T.slice_last(qkv, 0, w)
        k = T.slice_last(qkv, w, 2 * w)
        v = T.slice_last(qkv, 2 * w, 3 * w)

        def heads_first(t):
            return T.transpose(T.reshape(t, (b, n, heads, dk)), (0, 2, 1, 3))

        q, k, v = heads_first(q), heads_first(k), heads_first(v)
        att = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * Tensor(1.0 / math.sqrt(dk))
        att = T.softmax(att, axis=-1)
        out = T.matmul(att, v)
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, n, w))
        return self._linear(out, f"{prefix}/attn_out")

    def _block(self, x: Tensor, c: Tensor, prefix: str, heads: int) -> Tensor:
        b = c.shape[0]
        w = x.shape[-1]
        mod = self._linear(T.gelu(c), f"{prefix}/adaln")
        parts = [T.reshape(T.slice_last(mod, i * w, (i + 1) * w), (b, 1, w))
                 for i in range(6)]
        shift1, scale1, gate1, shift2, scale2, gate2 = parts
        h = self._ln(x) * (scale1 + Tensor(1.0)) + shift1
        x = x + gate1 * self._attention(h, prefix, heads)
        h = self._ln(x) * (scale2 + Tensor(1.0)) + shift2
        h = self._linear(T.gelu(self._linear(h, f"{prefix}/mlp1")), f"{prefix}/mlp2")
        return x + gate2 * h

    def _final(self, x: Tensor, c: Tensor) -> Tensor:
        b = c.shape[0]
        w = x.shape[-1]
        mod = self._linear(T.gelu(c), "denoiser/final_adaln")
        shift = T.reshape(T.slice_last(mod, 0, w), (b, 1, w))
        scale = T.reshape(T.slice_last(mod, w, 2 * w), (b, 1, w))
        x = self._ln(x) * (scale + Tensor(1.0)) + shift
        return self._linear(x, "denoiser/out_proj")

    def __call__(self, x_t: Tensor, t: np.ndarray,
                 cond: np.ndarray | Tensor | None = None) -> Tensor:
        cfg = self.cfg
        if not isinstance(x_t, Tensor):
            x_t = Tensor(x_t)
        b, n, d = x_t.shape
        if (n, d) != (cfg.num_tokens, cfg.token_dim):
            raise ValueError(
                f"latent shape ({n},{d}) does not match config "
                f"({cfg.num_tokens},{cfg.token_dim})")

        t_emb = Tensor(sinusoidal_embedding(t, cfg.hidden))
        c = self._linear(T.gelu(self._linear(t_emb, "denoiser/t_mlp1")),
                         "denoiser/t_mlp2")
        if cond is None:
            cond = np.zeros((b, cfg.cond_dim))
        if not isinstance(cond, Tensor):
            cond = Tensor(cond)
        c = c + self._linear(cond, "denoiser/cond_proj")

        x = self._linear(x_t, "denoiser/in_proj") + self.params["denoiser/pos_emb/w"]
        for i in range(cfg.depth):
            x = self._block(x, c, f"denoiser/block{i}", cfg.heads)

        if cfg.ddt_head_width is not None:
            x = self._linear(x, "denoiser/head_in")
            ch = self._linear(c, "denoiser/head_cond")
            head_heads = cfg.heads
            for i in range(cfg.ddt_head_depth):
                x = self._block(x, ch, f"denoiser/head_block{i}", head_heads)
            return self._final(x, ch)
        return self._final(x, c)

    # ------------------------------------------------------------------

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]):
        for name, p in self.params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()


def build(cfg: DenoiserConfig, seed: int) -> Denoiser:
    """Deterministic construction: equal (config, seed) gives identical params."""
    return Denoiser(cfg, seed)
