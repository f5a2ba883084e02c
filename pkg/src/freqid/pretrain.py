"""Stand-in pretraining for the frozen towers and the evaluation encoders.

* face tower: identity classifier on aligned face crops (cosine logits with an
  additive margin)
* semantic tower: image side of a caption/frame contrastive model
* metric encoders A and B: two more identity classifiers with different
  widths, kernels and seeds, used only for evaluation
"""

from __future__ import annotations

import logging
import os
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_checkpoint, load_module_state, save_checkpoint
from .errors import InvalidArgumentError
from .extractors import ConvEncoder, FaceTower, Towers, TwoTower, images_to_tensor
from .synthdata import REF_SIZE, TEXT_VOCAB, crop_align

log = logging.getLogger(__name__)


@dataclass
class TowerConfig:
    steps: int = 400
    batch_size: int = 64
    learning_rate: float = 2e-3
    margin: float = 0.2
    temperature: float = 0.1
    seed: int = 0
    face_widths: tuple = (16, 32, 48)
    metric_a_widths: tuple = (16, 32, 64)
    metric_b_widths: tuple = (12, 24, 48)
    metric_b_kernel: int = 5
    embed_dim: int = 32

    def __post_init__(self):
        if self.steps <= 0 or self.batch_size <= 0 or self.learning_rate <= 0:
            raise InvalidArgumentError("tower steps, batch size and learning rate must be positive")
        self.face_widths = tuple(self.face_widths)
        self.metric_a_widths = tuple(self.metric_a_widths)
        self.metric_b_widths = tuple(self.metric_b_widths)


@dataclass
class TowerBundle:
    face: FaceTower
    semantic: TwoTower
    metric_a: ConvEncoder
    metric_b: ConvEncoder

    def towers(self) -> Towers:
        return Towers(self.face, self.semantic)

    def modules(self):
        return {"face": self.face, "semantic": self.semantic, "metric_a": self.metric_a, "metric_b": self.metric_b}


def frame_crops(samples, labels, size=REF_SIZE):
    """Aligned crops of every frame -> ((N, S, S, 3) float32, (N,) int64)."""
    crops, ys = [], []
    for s, y in zip(samples, labels):
        for f in range(s.num_frames):
            crops.append(crop_align(s.frames[f], s.keypoints[f], size))
            ys.append(y)
    return np.stack(crops), np.asarray(ys, dtype=np.int64)


def resize_frames(frames, size=REF_SIZE):
    """(N, H, W, 3) in [0, 1] -> (N, 3, size, size) in [-1, 1]."""
    x = images_to_tensor(frames)
    if x.shape[-1] != size or x.shape[-2] != size:
        x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
    return x


def augment(x, gen):
    """Brightness jitter, pixel noise and occasional half-resolution blur on [-1, 1] tensors."""
    B = x.shape[0]
    scale = 1.0 + 0.1 * (torch.rand(B, 1, 1, 1, generator=gen) * 2 - 1)
    shift = 0.1 * (torch.rand(B, 1, 1, 1, generator=gen) * 2 - 1)
    x = x * scale + shift
    blur = torch.rand(B, generator=gen) < 0.5
    if blur.any():
        S = x.shape[-1]
        small = F.interpolate(x[blur], scale_factor=0.5, mode="bilinear", align_corners=False, antialias=True)
        x = x.clone()
        x[blur] = F.interpolate(small, size=(S, S), mode="bilinear", align_corners=False)
    x = x + 0.06 * torch.randn(x.shape, generator=gen)
    return x.clamp(-1.0, 1.0)


def train_classifier(encoder: ConvEncoder, images, labels, cfg: TowerConfig, seed):
    """Additive-margin cosine classifier; returns the final-step loss."""
    gen = torch.Generator().manual_seed(seed)
    x_all = images_to_tensor(images)
    y_all = torch.as_tensor(labels)
    opt = torch.optim.Adam(encoder.parameters(), lr=cfg.learning_rate)
    encoder.train()
    loss = torch.tensor(float("nan"))
    for _ in range(cfg.steps):
        idx = torch.randint(0, len(y_all), (cfg.batch_size,), generator=gen)
        x, y = augment(x_all[idx], gen), y_all[idx]
        cos = encoder.logits(encoder.embed(x), scale=1.0)
        cos = cos - cfg.margin * F.one_hot(y, cos.shape[1])
        loss = F.cross_entropy(16.0 * cos, y)
        opt.zero_grad()
        loss.backward()
        opt.step()
    encoder.eval()
    return float(loss.detach())


def train_two_tower(model: TwoTower, frames, captions, cfg: TowerConfig, seed):
    """Symmetric contrastive loss; identical captions in a batch count as positives."""
    gen = torch.Generator().manual_seed(seed)
    x_all = resize_frames(frames)
    c_all = torch.as_tensor(np.asarray(captions, dtype=np.int64))
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    model.train()
    loss = torch.tensor(float("nan"))
    for _ in range(cfg.steps):
        idx = torch.randint(0, len(c_all), (cfg.batch_size,), generator=gen)
        x, c = augment(x_all[idx], gen), c_all[idx]
        zi = F.normalize(model.embed_image(x), dim=-1)
        zt = F.normalize(model.embed_text(c), dim=-1)
        logits = zi @ zt.t() / cfg.temperature
        pos = (c[:, None, :] == c[None, :, :]).all(-1).float()
        target = pos / pos.sum(1, keepdim=True)
        loss = 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.t(), target.t()))
        opt.zero_grad()
        loss.backward()
        opt.step()
    model.eval()
    return float(loss.detach())


def _build(seed, fn):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return fn()


def build_bundle(cfg: TowerConfig, n_classes=16) -> TowerBundle:
    s = cfg.seed
    return TowerBundle(
        face=_build(s + 101, lambda: FaceTower(cfg.face_widths, cfg.embed_dim, n_classes)),
        semantic=_build(s + 102, lambda: TwoTower(TEXT_VOCAB, embed_dim=cfg.embed_dim)),
        metric_a=_build(s + 103, lambda: ConvEncoder(cfg.metric_a_widths, cfg.embed_dim, n_classes)),
        metric_b=_build(s + 104, lambda: ConvEncoder(cfg.metric_b_widths, cfg.embed_dim, n_classes, cfg.metric_b_kernel)),
    )


def pretrain_towers(dataset, cfg: TowerConfig | None = None) -> tuple[TowerBundle, dict]:
    """Train all four networks on a synthetic dataset; returns (bundle, final losses)."""
    cfg = cfg or TowerConfig()
    samples = dataset.samples
    if not samples:
        raise InvalidArgumentError("tower pretraining needs a nonempty dataset")
    labels = [dataset.label_of(s) for s in samples]
    n_classes = max(labels) + 1
    bundle = build_bundle(cfg, n_classes)
    crops, ys = frame_crops(samples, labels)
    frames = np.concatenate([s.frames for s in samples])
    captions = np.concatenate([np.repeat(s.caption_tokens[None], s.num_frames, 0) for s in samples])
    losses = {}
    with torch.random.fork_rng(devices=[]):
        losses["face"] = train_classifier(bundle.face, crops, ys, cfg, cfg.seed + 201)
        losses["semantic"] = train_two_tower(bundle.semantic, frames, captions, cfg, cfg.seed + 202)
        losses["metric_a"] = train_classifier(bundle.metric_a, crops, ys, cfg, cfg.seed + 203)
        losses["metric_b"] = train_classifier(bundle.metric_b, crops, ys, cfg, cfg.seed + 204)
    for m in bundle.modules().values():
        m.requires_grad_(False)
    log.info("tower pretraining losses %s", losses)
    return bundle, losses


def save_bundle(out_dir, bundle: TowerBundle, cfg: TowerConfig, n_classes=16):
    os.makedirs(out_dir, exist_ok=True)
    header = {"towers": asdict(cfg), "n_classes": n_classes}
    paths = {}
    for name, module in bundle.modules().items():
        path = os.path.join(out_dir, f"{name}.ckpt")
        save_checkpoint(path, module.state_dict(), dict(header, module=name))
        paths[name] = path
    return paths


def load_bundle(out_dir) -> TowerBundle:
    header, _ = load_checkpoint(os.path.join(out_dir, "face.ckpt"))
    cfg = TowerConfig(**header["towers"])
    bundle = build_bundle(cfg, header["n_classes"])
    for name, module in bundle.modules().items():
        _, tensors = load_checkpoint(os.path.join(out_dir, f"{name}.ckpt"))
        load_module_state(module, tensors)
        module.eval().requires_grad_(False)
    return bundle
