"""Identity encoders.

The global extractor turns a reference face plus its keypoint image into a
coarse map at latent resolution. The local extractor fuses features from two
frozen towers (an identity classifier and the image side of a caption model)
and compresses them with a Q-Former into a fixed set of identity tokens.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import FeedForward, attention
from .errors import InvalidArgumentError


def images_to_tensor(images, dtype=torch.float32):
    """(B, S, S, 3) in [0, 1] (numpy or torch) -> (B, 3, S, S) in [-1, 1]."""
    x = torch.as_tensor(np.asarray(images) if not isinstance(images, torch.Tensor) else images, dtype=dtype)
    if x.ndim == 3:
        x = x[None]
    return x.permute(0, 3, 1, 2) * 2.0 - 1.0


class GlobalFacialExtractor(nn.Module):
    def __init__(self, out_channels=8, latent_hw=(8, 8), width=32):
        super().__init__()
        self.latent_hw = tuple(latent_hw)
        self.net = nn.Sequential(
            nn.Conv2d(6, width, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(width, width, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(2 * width, out_channels, 1),
        )

    def forward(self, ref_face, kps_image):
        """Tensors (B, 3, S, S) in [-1, 1] -> (B, C_g, h, w)."""
        if ref_face.shape != kps_image.shape:
            raise InvalidArgumentError(f"reference {tuple(ref_face.shape)} and keypoint image {tuple(kps_image.shape)} differ")
        x = self.net(torch.cat([ref_face, kps_image], dim=1))
        return F.adaptive_avg_pool2d(x, self.latent_hw)


class ConvEncoder(nn.Module):
    """Strided conv stages -> pooled embedding; also exposes intermediate maps."""

    def __init__(self, widths=(16, 32, 48), embed_dim=32, n_classes=16, kernel=3):
        super().__init__()
        stages = []
        c_in = 3
        for w in widths:
            stages.append(
                nn.Sequential(
                    nn.Conv2d(c_in, w, kernel, stride=2, padding=kernel // 2),
                    nn.SiLU(),
                    nn.Conv2d(w, w, kernel, padding=kernel // 2),
                    nn.SiLU(),
                )
            )
            c_in = w
        self.stages = nn.ModuleList(stages)
        self.embed_proj = nn.Linear(c_in, embed_dim)
        self.classifier = nn.Parameter(torch.randn(n_classes, embed_dim) * 0.1)

    def feature_maps(self, x):
        maps = []
        for stage in self.stages:
            x = stage(x)
            maps.append(x)
        return maps

    def embed(self, x):
        return self.embed_proj(self.feature_maps(x)[-1].mean(dim=(2, 3)))

    def logits(self, emb, scale=16.0):
        return scale * F.normalize(emb, dim=-1) @ F.normalize(self.classifier, dim=-1).t()


class FaceTower(ConvEncoder):
    def forward(self, x):
        """-> (penultimate map, [first two stage maps])."""
        maps = self.feature_maps(x)
        return maps[-1], maps[:2]


class TwoTower(nn.Module):
    """Image/caption dual encoder; the image side's last grid is the semantic tower."""

    def __init__(self, vocab=24, widths=(16, 32, 32, 32), embed_dim=32):
        super().__init__()
        self.image = ConvEncoder(widths, embed_dim, n_classes=1)
        self.words = nn.Embedding(vocab, embed_dim)
        self.text_proj = nn.Linear(embed_dim, embed_dim)

    def grid(self, x):
        return self.image.feature_maps(x)[-1]

    def embed_image(self, x):
        return self.image.embed(x)

    def embed_text(self, tokens):
        return self.text_proj(self.words(tokens).mean(dim=1))


def encoder_spec(enc: ConvEncoder):
    """Constructor arguments that rebuild ``enc`` with matching parameter shapes."""
    first = enc.stages[0][0]
    return {
        "widths": [st[0].out_channels for st in enc.stages],
        "embed_dim": enc.embed_proj.out_features,
        "n_classes": enc.classifier.shape[0],
        "kernel": first.kernel_size[0],
    }


def tower_spec(towers: "Towers"):
    sem = encoder_spec(towers.semantic.image)
    return {
        "face": encoder_spec(towers.face),
        "semantic": {"vocab": towers.semantic.words.num_embeddings, "widths": sem["widths"], "embed_dim": sem["embed_dim"]},
    }


def towers_from_spec(spec):
    f, s = spec["face"], spec["semantic"]
    face = FaceTower(tuple(f["widths"]), f["embed_dim"], f["n_classes"], f["kernel"])
    return Towers(face, TwoTower(s["vocab"], tuple(s["widths"]), s["embed_dim"]))


@dataclass
class TowerFeatures:
    penultimate: torch.Tensor  # (B, c, h, w)
    shallow: list  # [(B, c_i, h_i, w_i)]
    semantic: torch.Tensor  # (B, c', g, g)


class Towers(nn.Module):
    """Frozen feature towers feeding the local extractor."""

    def __init__(self, face: FaceTower, semantic: TwoTower):
        super().__init__()
        self.face = face
        self.semantic = semantic
        self.requires_grad_(False)

    def forward(self, ref):
        with torch.no_grad():
            pen, shallow = self.face(ref)
            sem = self.semantic.grid(ref)
        return TowerFeatures(pen, shallow, sem)


def face_tower(tower: FaceTower, ref_face):
    return tower(images_to_tensor(ref_face))


def semantic_tower(model: TwoTower, ref_face):
    return model.grid(images_to_tensor(ref_face))


class FuseTokens(nn.Module):
    """Interpolate shallow maps to the semantic grid, concatenate, project, then drop tokens.

    Semantic-origin tokens come first, penultimate face tokens after; only the
    former are subject to DropToken.
    """

    def __init__(self, dim, shallow_channels=(16, 32), semantic_channels=32, penultimate_channels=48,
                 grid=4, penultimate_tokens=64, use_positions=True):
        super().__init__()
        self.grid = grid
        self.sem_proj = nn.Linear(sum(shallow_channels) + semantic_channels, dim)
        self.pen_proj = nn.Linear(penultimate_channels, dim)
        self.pos = nn.Parameter(torch.randn(grid * grid + penultimate_tokens, dim) * 0.02) if use_positions else None
        self.norm = nn.LayerNorm(dim)

    def forward(self, feats: TowerFeatures, drop_prob=0.0, rng=None):
        """-> (tokens (B, N, d), keep mask (B, N) bool)."""
        if not 0.0 <= drop_prob <= 1.0:
            raise InvalidArgumentError("drop probability must lie in [0, 1]")
        g = self.grid
        if feats.semantic.shape[-2:] != (g, g):
            raise InvalidArgumentError(f"semantic grid must be {g}x{g}")
        parts = [F.interpolate(m, size=(g, g), mode="bilinear", align_corners=False, antialias=True) for m in feats.shallow]
        sem = torch.cat(parts + [feats.semantic], dim=1).flatten(2).transpose(1, 2)
        pen = feats.penultimate.flatten(2).transpose(1, 2)
        tokens = torch.cat([self.sem_proj(sem), self.pen_proj(pen)], dim=1)
        if self.pos is not None:
            tokens = tokens + self.pos[: tokens.shape[1]]
        tokens = self.norm(tokens)
        B, N, _ = tokens.shape
        keep = torch.ones(B, N, dtype=torch.bool)
        if drop_prob > 0.0:
            rngs = rng if isinstance(rng, (list, tuple)) else [rng] * B
            for b in range(B):
                keep[b, : g * g] = torch.as_tensor(drop_tokens(g * g, drop_prob, rngs[b]))
        return tokens, keep


def drop_tokens(n, drop_prob, rng):
    """Bernoulli keep mask over ``n`` tokens that never drops all of them."""
    keep = rng.random(n) >= drop_prob
    if not keep.any():
        keep[int(rng.integers(0, n))] = True
    return keep


def fuse_tokens(fuser: FuseTokens, feats: TowerFeatures, drop_prob, rng):
    """Single-sample form: returns the (N_kept, d) sequence."""
    tokens, keep = fuser(feats, drop_prob, rng)
    return tokens[0][keep[0]]


class QFormerLayer(nn.Module):
    def __init__(self, dim, heads, dropout):
        super().__init__()
        self.heads = heads
        self.norm_q = nn.LayerNorm(dim)
        self.to_q = nn.Linear(dim, dim)
        self.to_k = nn.Linear(dim, dim)
        self.to_v = nn.Linear(dim, dim)
        self.to_out = nn.Linear(dim, dim)
        self.norm_ff = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, 4, dropout)

    def forward(self, q, kv, kv_mask=None):
        h = self.norm_q(q)
        q = q + self.to_out(attention(self.to_q(h), self.to_k(kv), self.to_v(kv), self.heads, kv_mask))
        return q + self.ffn(self.norm_ff(q))


class QFormer(nn.Module):
    def __init__(self, dim, n_queries=16, layers=2, heads=4, dropout=0.1):
        super().__init__()
        self.queries = nn.Parameter(torch.randn(n_queries, dim) * 0.02)
        self.layers = nn.ModuleList([QFormerLayer(dim, heads, dropout) for _ in range(layers)])

    def forward(self, kv, kv_mask=None):
        """kv: (B, N, d) or (N, d) -> (B, Nq, d) or (Nq, d)."""
        single = kv.ndim == 2
        if single:
            kv = kv[None]
            kv_mask = None if kv_mask is None else kv_mask[None]
        if kv.shape[1] == 0 or (kv_mask is not None and not bool(kv_mask.any(dim=1).all())):
            raise InvalidArgumentError("Q-Former needs at least one key/value token")
        q = self.queries[None].expand(kv.shape[0], -1, -1)
        for layer in self.layers:
            q = layer(q, kv, kv_mask)
        return q[0] if single else q


class LocalFacialExtractor(nn.Module):
    def __init__(self, dim, n_queries=16, layers=2, heads=4, dropout=0.1, grid=4,
                 shallow_channels=(16, 32), semantic_channels=32, penultimate_channels=48, penultimate_tokens=64):
        super().__init__()
        self.fuse = FuseTokens(dim, shallow_channels, semantic_channels, penultimate_channels, grid, penultimate_tokens)
        self.qformer = QFormer(dim, n_queries, layers, heads, dropout)

    def forward(self, feats: TowerFeatures, drop_prob=0.0, rng=None):
        tokens, keep = self.fuse(feats, drop_prob, rng)
        return self.qformer(tokens, keep)
