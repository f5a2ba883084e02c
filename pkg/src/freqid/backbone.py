"""Toy video diffusion transformer.

The latent codec is an exact space-to-depth rearrangement: a ``(T, H, W, C)``
video becomes a ``(T, H/p, W/p, p*p*C)`` grid whose channel index is
``(dy * p + dx) * C + c``. Text is encoded by a learned table and joins the
vision tokens in every self-attention layer.

The epsilon head is the zero-initialised output projection plus a
timestep-gated copy of the noisy latent, ``g(t) * x_t``. At high noise the
target is nearly ``x_t`` itself, and routing it through the token stack
leaves an error that the sampler then amplifies by ``1/sqrt(alpha_bar)``.
The gate also starts at zero, so an untrained model still predicts zero.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidArgumentError

HF_SITES = ("none", "inner", "output", "input", "pre")


def _permute(x, axes):
    if isinstance(x, torch.Tensor):
        return x.permute(*axes)
    return np.transpose(x, axes)


def patchify(video, p: int = 4):
    """``(..., T, H, W, C)`` -> ``(..., T, H/p, W/p, p*p*C)``."""
    *lead, T, H, W, C = video.shape
    if H % p or W % p:
        raise InvalidArgumentError(f"frame size {H}x{W} not divisible by patch factor {p}")
    n = len(lead)
    x = video.reshape(*lead, T, H // p, p, W // p, p, C)
    axes = list(range(n)) + [n, n + 1, n + 3, n + 2, n + 4, n + 5]
    x = _permute(x, axes)
    return x.reshape(*lead, T, H // p, W // p, p * p * C)


def unpatchify(latent, p: int = 4):
    *lead, T, h, w, D = latent.shape
    if D % (p * p):
        raise InvalidArgumentError(f"channel count {D} not divisible by p^2={p * p}")
    C = D // (p * p)
    n = len(lead)
    x = latent.reshape(*lead, T, h, w, p, p, C)
    axes = list(range(n)) + [n, n + 1, n + 3, n + 2, n + 4, n + 5]
    x = _permute(x, axes)
    return x.reshape(*lead, T, h * p, w * p, C)


@dataclass
class DiTConfig:
    depth: int = 4
    model_dim: int = 128
    heads: int = 4
    text_vocab: int = 24
    max_text_tokens: int = 8
    patch: int = 4
    input_channels: int = 48
    timestep_dim: int = 64
    frames: int = 4
    height: int = 32
    width: int = 32
    mlp_ratio: int = 4
    input_skip: bool = True

    def __post_init__(self):
        if min(self.depth, self.model_dim, self.heads, self.frames, self.patch) < 1:
            raise InvalidArgumentError("depth, model_dim, heads, frames and patch must be positive")
        if self.model_dim % self.heads:
            raise InvalidArgumentError("model_dim must be divisible by heads")
        if self.height % self.patch or self.width % self.patch:
            raise InvalidArgumentError("frame size must be divisible by the patch factor")

    @property
    def base_channels(self):
        return 3 * self.patch * self.patch

    @property
    def latent_shape(self):
        return (self.frames, self.height // self.patch, self.width // self.patch, self.base_channels)

    def to_dict(self):
        return asdict(self)


class TextEncoder(nn.Module):
    """Token table plus learned positions; row ``vocab`` is the null token."""

    def __init__(self, vocab, max_tokens, dim):
        super().__init__()
        self.vocab = vocab
        self.max_tokens = max_tokens
        self.table = nn.Embedding(vocab + 1, dim)
        nn.init.normal_(self.table.weight, std=0.02)
        self.pos = nn.Parameter(torch.randn(max_tokens, dim) * 0.02)

    @property
    def null_row(self):
        return self.table.weight[self.vocab]

    def forward(self, tokens, null=None):
        """tokens: (B, L) int64; null: optional (B,) bool selecting the null caption."""
        if tokens.shape[-1] > self.max_tokens:
            raise InvalidArgumentError(f"caption longer than {self.max_tokens} tokens")
        if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= self.vocab):
            raise InvalidArgumentError("caption token outside vocabulary")
        emb = self.table(tokens) + self.pos[: tokens.shape[-1]]
        if null is not None:
            emb = torch.where(null[:, None, None], self.null_row.expand_as(emb), emb)
        return emb

    def encode(self, caption_tokens):
        """Single caption -> (L, d); an empty caption gives one null row."""
        tokens = torch.as_tensor(np.asarray(caption_tokens, dtype=np.int64)).reshape(1, -1)
        if tokens.shape[1] == 0:
            return self.null_row[None, :]
        return self.forward(tokens)[0]

    def encode_null(self, length):
        return self.null_row[None, :].expand(max(length, 1), -1)


def timestep_embedding(t, dim, max_period=10000.0):
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None, :]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def attention(q, k, v, heads, key_mask=None):
    """Multi-head scaled dot-product attention on (B, N, d) tensors.

    ``key_mask`` is (B, M) bool with True for keys that may be attended.
    """
    B, N, d = q.shape
    M = k.shape[1]
    hd = d // heads
    q = q.reshape(B, N, heads, hd).transpose(1, 2)
    k = k.reshape(B, M, heads, hd).transpose(1, 2)
    v = v.reshape(B, M, heads, hd).transpose(1, 2)
    mask = None if key_mask is None else key_mask[:, None, None, :]
    out = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
    return out.transpose(1, 2).reshape(B, N, d)


class SelfAttention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        return self.proj(attention(q, k, v, self.heads))


class FeedForward(nn.Module):
    def __init__(self, dim, ratio=4, dropout=0.0):
        super().__init__()
        self.fc1 = nn.Linear(dim, ratio * dim)
        self.fc2 = nn.Linear(ratio * dim, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        return self.fc2(self.drop(F.gelu(self.fc1(x))))


class Block(nn.Module):
    def __init__(self, dim, heads, mlp_ratio):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, mlp_ratio)

    def forward(self, x, n_text, id_attn=None, id_tokens=None, id_mask=None, site="none"):
        def inject(h):
            if id_attn is None or id_tokens is None:
                return h
            vision = id_attn(h[:, n_text:], id_tokens, id_mask)
            return torch.cat([h[:, :n_text], vision], dim=1)

        if site == "input":
            x = inject(x)
        x = x + self.attn(self.norm1(x))
        if site == "inner":
            x = inject(x)
        x = x + self.ffn(self.norm2(x))
        if site == "output":
            x = inject(x)
        return x


class DiT(nn.Module):
    """Denoiser over latent grids; identity cross-attention modules are optional.

    ``id_attn`` holds one module per block (or a single one for the ``pre``
    site); it is supplied by the injection assembly so the core can be built
    identically for every plan.
    """

    def __init__(self, cfg: DiTConfig, hf_site="none", id_attn=None):
        super().__init__()
        if hf_site not in HF_SITES:
            raise InvalidArgumentError(f"unknown injection site {hf_site!r}")
        self.cfg = cfg
        self.hf_site = hf_site
        d = cfg.model_dim
        T, h, w, _ = cfg.latent_shape
        self.text = TextEncoder(cfg.text_vocab, cfg.max_text_tokens, d)
        self.in_proj = nn.Linear(cfg.input_channels, d)
        self.pos_time = nn.Parameter(torch.randn(T, 1, d) * 0.02)
        self.pos_space = nn.Parameter(torch.randn(1, h * w, d) * 0.02)
        self.t_embed = nn.Sequential(nn.Linear(cfg.timestep_dim, d), nn.SiLU(), nn.Linear(d, d))
        self.blocks = nn.ModuleList([Block(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth)])
        self.norm_out = nn.LayerNorm(d)
        self.out = nn.Linear(d, cfg.base_channels)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)
        # timestep-gated copy of the noisy latent into the prediction, zero at init
        self.skip_gate = nn.Linear(d, 1) if cfg.input_skip else None
        if self.skip_gate is not None:
            nn.init.zeros_(self.skip_gate.weight)
            nn.init.zeros_(self.skip_gate.bias)
        expected = {"none": 0, "pre": 1}.get(hf_site, cfg.depth)
        if id_attn is not None and len(id_attn) != expected:
            raise InvalidArgumentError(f"site {hf_site!r} needs {expected} id-attention modules")
        if id_attn is None and hf_site != "none":
            raise InvalidArgumentError(f"site {hf_site!r} needs id-attention modules")
        self.id_attn = id_attn

    def forward(self, latent, text_emb, t, id_tokens=None, id_mask=None):
        """latent: (B, T, h, w, C_in); text_emb: (B, L, d); t: (B,) -> (B, T, h, w, C_base)."""
        cfg = self.cfg
        B, T, h, w, C = latent.shape
        if (T, h, w) != cfg.latent_shape[:3] or C != cfg.input_channels:
            raise InvalidArgumentError(
                f"latent shape {(T, h, w, C)} does not match config {cfg.latent_shape[:3] + (cfg.input_channels,)}"
            )
        if text_emb.shape[0] != B or text_emb.shape[-1] != cfg.model_dim:
            raise InvalidArgumentError("text embedding batch or width mismatch")
        if id_tokens is not None and self.hf_site == "none":
            raise InvalidArgumentError("identity tokens supplied to a model without an injection site")
        pos = (self.pos_time + self.pos_space).reshape(1, T * h * w, -1)
        z = self.in_proj(latent.reshape(B, T * h * w, C)) + pos
        x = torch.cat([text_emb, z], dim=1)
        temb = self.t_embed(timestep_embedding(t, cfg.timestep_dim).to(x.dtype))
        x = x + temb[:, None, :]
        n_text = text_emb.shape[1]
        site = self.hf_site
        if site == "pre" and id_tokens is not None:
            vision = self.id_attn[0](x[:, n_text:], id_tokens, id_mask)
            x = torch.cat([x[:, :n_text], vision], dim=1)
        for i, block in enumerate(self.blocks):
            mod = self.id_attn[i] if site in ("inner", "output", "input") else None
            x = block(x, n_text, mod, id_tokens, id_mask, site)
        out = self.out(self.norm_out(x[:, n_text:])).reshape(B, T, h, w, cfg.base_channels)
        if self.skip_gate is not None:
            out = out + self.skip_gate(temb)[:, :, None, None, None] * latent[..., : cfg.base_channels]
        return out
