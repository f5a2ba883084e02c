"""Consistency training: coarse-to-fine phases, dynamic mask loss, dynamic cross-face references.

Every random draw for a sample comes from ``numpy.random.default_rng([seed,
step, index])`` so the loss sequence depends only on the configuration.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import patchify
from .checkpoint import load_checkpoint, load_module_state, save_checkpoint
from .diffusion import NoiseSchedule
from .errors import InvalidArgumentError
from .extractors import Towers, images_to_tensor, tower_spec, towers_from_spec
from .injection import Conditioning, ConditionedModel, InjectionPlan, ModelConfig, assemble
from .synthdata import align_keypoints, crop_align, render_keypoints_rgb

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    alpha: float = 0.5
    beta: float = 0.5
    zeta_sigma: float = 0.05
    null_text_ratio: float = 0.1
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    warmup_steps: int = 50
    restarts: int = 1
    total_steps: int = 2000
    coarse_fraction: float = 0.5
    batch_size: int = 8
    window: int = 4
    seed: int = 0
    max_grad_norm: float = 1.0
    divergence_grad_threshold: float = 1e3
    divergence_patience: int = 5
    use_gfe: bool = True
    use_lfe: bool = True
    use_cft: bool = True
    use_dml: bool = True
    use_dcl: bool = True
    inject_nonfinite_step: int = -1

    def __post_init__(self):
        for name in ("alpha", "beta", "null_text_ratio", "coarse_fraction"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise InvalidArgumentError(f"{name}={value} must lie in [0, 1]")
        if self.total_steps <= 0 or self.batch_size <= 0 or self.window <= 0:
            raise InvalidArgumentError("total_steps, batch_size and window must be positive")
        if self.zeta_sigma < 0 or self.learning_rate <= 0:
            raise InvalidArgumentError("zeta_sigma must be >= 0 and learning_rate > 0")

    @property
    def coarse_steps(self):
        return int(self.coarse_fraction * self.total_steps) if self.use_cft else 0

    def effective_plan(self, plan: InjectionPlan):
        return replace(
            plan,
            low_freq=plan.low_freq and self.use_gfe,
            keypoints=plan.keypoints and plan.low_freq and self.use_gfe,
            hf_site=plan.hf_site if self.use_lfe else "none",
        )


# ------------------------------------------------------------------ losses


def mask_to_latent(mask, patch=4, channels=None):
    """Trilinear resize of (..., T, H, W) masks to (..., T, H/p, W/p, C)."""
    m = torch.as_tensor(np.asarray(mask) if not isinstance(mask, torch.Tensor) else mask).float()
    single = m.ndim == 3
    if single:
        m = m[None]
    if m.ndim != 4:
        raise InvalidArgumentError("mask must be (T, H, W) or (B, T, H, W)")
    B, T, H, W = m.shape
    if H % patch or W % patch:
        raise InvalidArgumentError(f"mask size {H}x{W} not divisible by {patch}")
    out = F.interpolate(m[:, None], size=(T, H // patch, W // patch), mode="trilinear", align_corners=False)[:, 0]
    out = out.clamp(0.0, 1.0)[..., None]
    if channels is not None:
        out = out.expand(*out.shape[:-1], channels)
    return out[0] if single else out


def plain_loss(eps, eps_hat):
    sq = (eps - eps_hat) ** 2
    return sq.sum() / sq.numel()


def masked_loss(eps, eps_hat, M):
    sq = (eps - eps_hat) ** 2
    M = M.expand_as(sq)
    return (M * sq).sum() / torch.clamp(M.sum(), min=1.0)


def dynamic_mask_loss(eps, eps_hat, M, alpha, rng):
    """-> (loss, masked?) with the masked branch taken when p > alpha."""
    if not 0.0 <= alpha <= 1.0:
        raise InvalidArgumentError("alpha must lie in [0, 1]")
    p = rng.random()
    if p > alpha:
        return masked_loss(eps, eps_hat, M), True
    return plain_loss(eps, eps_hat), False


def select_reference(sample, window, beta, zeta_sigma, rng, size=64):
    """Pick and align a reference frame.

    ``window`` is (start, length). With probability ``beta`` the frame comes
    from outside the window; Gaussian noise of std ``zeta_sigma`` is added in
    both branches. Returns (ref_face, kps_image, tag).
    """
    start, length = window
    T = sample.num_frames
    inside = list(range(start, min(start + length, T)))
    outside = [f for f in range(T) if f not in inside]
    p = rng.random()
    if p <= beta:
        if outside:
            frame, tag = outside[int(rng.integers(0, len(outside)))], "cross"
        else:
            frame, tag = inside[int(rng.integers(0, len(inside)))], "cross_fallback"
    else:
        frame, tag = inside[int(rng.integers(0, len(inside)))], "in"
    kps = sample.keypoints[frame]
    ref = crop_align(sample.frames[frame], kps, size)
    kps_image = render_keypoints_rgb(align_keypoints(kps, size), size)
    if zeta_sigma > 0:
        ref = np.clip(ref + zeta_sigma * rng.standard_normal(ref.shape), 0.0, 1.0).astype(np.float32)
    return ref, kps_image, tag


# ------------------------------------------------------------------ batches


@dataclass
class Batch:
    x0: torch.Tensor
    t: torch.Tensor
    eps: torch.Tensor
    tokens: torch.Tensor
    null: torch.Tensor
    cond: Conditioning
    M: torch.Tensor
    mask_draws: list
    drop_rngs: list
    tags: list = field(default_factory=list)


def video_to_latent(frames, patch=4):
    """(..., T, H, W, 3) frames in [0, 1] -> latent in [-1, 1]."""
    x = torch.as_tensor(np.asarray(frames) if not isinstance(frames, torch.Tensor) else frames, dtype=torch.float32)
    return patchify(x * 2.0 - 1.0, patch)


def make_batch(samples, cfg: TrainConfig, step: int, schedule: NoiseSchedule, patch=4, ref_size=64):
    pick = np.random.default_rng([cfg.seed, step, 2**31])
    idx = pick.choice(len(samples), size=cfg.batch_size, replace=cfg.batch_size > len(samples))
    beta = cfg.beta if cfg.use_dcl else 0.0
    zeta = cfg.zeta_sigma if cfg.use_dcl else 0.0
    x0, eps, ts, toks, null, refs, kpss, masks, draws, drops, tags = ([] for _ in range(11))
    for i, j in enumerate(idx):
        s = samples[int(j)]
        rng = np.random.default_rng([cfg.seed, step, i])
        if s.num_frames < cfg.window:
            raise InvalidArgumentError(f"video has {s.num_frames} frames, window needs {cfg.window}")
        start = int(rng.integers(0, s.num_frames - cfg.window + 1))
        ref, kps_img, tag = select_reference(s, (start, cfg.window), beta, zeta, rng, ref_size)
        is_null = bool(rng.random() < cfg.null_text_ratio)
        t = int(rng.integers(0, schedule.num_steps))
        lat = video_to_latent(s.frames[start : start + cfg.window], patch)
        x0.append(lat)
        eps.append(torch.as_tensor(rng.standard_normal(tuple(lat.shape)), dtype=torch.float32))
        ts.append(t)
        toks.append(torch.as_tensor(s.caption_tokens.astype(np.int64)))
        null.append(is_null)
        refs.append(ref)
        kpss.append(kps_img)
        masks.append(s.mask[start : start + cfg.window])
        draws.append(np.random.default_rng([cfg.seed, step, i, 1]))
        drops.append(np.random.default_rng([cfg.seed, step, i, 2]))
        tags.append([tag] + (["null"] if is_null else []))
    x0 = torch.stack(x0)
    return Batch(
        x0=x0,
        t=torch.as_tensor(ts, dtype=torch.int64),
        eps=torch.stack(eps),
        tokens=torch.stack(toks),
        null=torch.as_tensor(null),
        cond=Conditioning(images_to_tensor(np.stack(refs)), images_to_tensor(np.stack(kpss))),
        M=mask_to_latent(np.stack(masks), patch),
        mask_draws=draws,
        drop_rngs=drops,
        tags=tags,
    )


# ------------------------------------------------------------------ training


def cosine_with_restarts(warmup, total, cycles):
    def factor(step):
        if step < warmup:
            return (step + 1) / warmup
        progress = (step - warmup) / max(1, total - warmup)
        if progress >= 1.0:
            return 0.0
        return 0.5 * (1.0 + math.cos(math.pi * ((cycles * progress) % 1.0)))

    return factor


@dataclass
class TrainState:
    model: ConditionedModel
    cfg: TrainConfig
    schedule: NoiseSchedule
    optimizer: torch.optim.Optimizer
    scheduler: torch.optim.lr_scheduler.LambdaLR
    step: int = 0
    history: list = field(default_factory=list)
    diverged: bool = False
    divergence_reason: str = ""
    high_grad_run: int = 0

    @property
    def phase(self):
        return "coarse" if self.step < self.cfg.coarse_steps else "fine"


def init_state(model: ConditionedModel, cfg: TrainConfig, schedule: NoiseSchedule) -> TrainState:
    params = [p for n, p in model.named_parameters() if not n.startswith("towers.")]
    opt = torch.optim.AdamW(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, cosine_with_restarts(cfg.warmup_steps, cfg.total_steps, cfg.restarts))
    return TrainState(model, cfg, schedule, opt, sched)


def _set_phase(state: TrainState):
    fine = state.phase == "fine"
    for p in state.model.lfe_parameters():
        p.requires_grad_(fine)
    return fine


def compute_loss(state: TrainState, batch: Batch):
    """Forward pass and per-sample dynamic loss; returns (loss, mask branch flags)."""
    model, cfg = state.model, state.cfg
    fine = _set_phase(state)
    x_t = state.schedule.q_sample(batch.x0, batch.t, batch.eps)
    drop = model.cfg.token_drop if model.training else 0.0
    pred = model(x_t, batch.t, batch.tokens, batch.null, batch.cond, use_id=fine, drop_prob=drop, rng=batch.drop_rngs)
    losses, branches = [], []
    for i in range(pred.shape[0]):
        if cfg.use_dml:
            li, masked = dynamic_mask_loss(batch.eps[i], pred[i], batch.M[i], cfg.alpha, batch.mask_draws[i])
        else:
            li, masked = plain_loss(batch.eps[i], pred[i]), False
        losses.append(li)
        branches.append(masked)
    return torch.stack(losses).mean(), branches


def train_step(state: TrainState, batch: Batch):
    """One optimizer update; sets ``state.diverged`` instead of raising."""
    cfg, model = state.cfg, state.model
    step = state.step
    model.train()
    if step == cfg.inject_nonfinite_step:
        with torch.no_grad():
            next(model.dit.parameters()).fill_(float("nan"))
    torch.manual_seed(cfg.seed * 1_000_003 + step)
    state.optimizer.zero_grad(set_to_none=True)
    loss, branches = compute_loss(state, batch)
    record = {
        "step": step,
        "phase": state.phase,
        "loss": float(loss.detach()),
        "grad_norm": None,
        "lr": state.optimizer.param_groups[0]["lr"],
        "branch_tags": [t + ["masked" if m else "plain"] for t, m in zip(batch.tags, branches)],
    }
    if not torch.isfinite(loss):
        state.diverged, state.divergence_reason = True, f"non-finite loss at step {step}"
    else:
        loss.backward()
        params = [p for p in state.optimizer.param_groups[0]["params"] if p.grad is not None]
        grad_norm = float(torch.nn.utils.clip_grad_norm_(params, cfg.max_grad_norm))
        record["grad_norm"] = grad_norm
        if not math.isfinite(grad_norm):
            state.diverged, state.divergence_reason = True, f"non-finite gradient at step {step}"
        else:
            state.high_grad_run = state.high_grad_run + 1 if grad_norm > cfg.divergence_grad_threshold else 0
            if state.high_grad_run >= cfg.divergence_patience:
                state.diverged = True
                state.divergence_reason = f"gradient norm above {cfg.divergence_grad_threshold} for {state.high_grad_run} steps"
    if not state.diverged:
        state.optimizer.step()
        state.scheduler.step()
    record["diverged"] = state.diverged
    state.history.append(record)
    state.step += 1
    return record


# ---------------------------------------------------------- checkpointing


def model_header(model: ConditionedModel, extra=None):
    header = {"model": model.cfg.to_dict(), "plan": asdict(model.plan)}
    if model.towers is not None:
        header["towers"] = tower_spec(model.towers)
    header.update(extra or {})
    return header


def save_model(path, model: ConditionedModel, extra=None):
    save_checkpoint(path, model.state_dict(), model_header(model, extra))


def load_model(path):
    from .backbone import DiTConfig

    header, tensors = load_checkpoint(path)
    mcfg = dict(header["model"])
    mcfg["dit"] = DiTConfig(**mcfg["dit"])
    towers = towers_from_spec(header["towers"]) if "towers" in header else None
    model = ConditionedModel(ModelConfig(**mcfg), InjectionPlan(**header["plan"]), towers)
    load_module_state(model, tensors)
    model.eval()
    return model, header


@dataclass
class TrainResult:
    state: TrainState
    checkpoints: dict
    log_path: str | None

    @property
    def diverged(self):
        return self.state.diverged


def run_training(cfg: TrainConfig, model_cfg: ModelConfig, plan: InjectionPlan, samples, towers: Towers | None = None,
                 schedule: NoiseSchedule | None = None, out_dir=None, tag="model", progress=None) -> TrainResult:
    if not samples:
        raise InvalidArgumentError("training needs a nonempty dataset")
    schedule = schedule or NoiseSchedule()
    model = assemble(cfg.effective_plan(plan), model_cfg, towers)
    state = init_state(model, cfg, schedule)
    checkpoints = {}
    log_path = None
    log_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, f"{tag}.log.jsonl")
        log_fh = open(log_path, "w")
    patch = model_cfg.dit.patch
    header = {"train": asdict(cfg), "schedule_steps": schedule.num_steps}
    try:
        while state.step < cfg.total_steps:
            if out_dir is not None and cfg.use_cft and state.step == cfg.coarse_steps and state.step > 0:
                path = os.path.join(out_dir, f"{tag}.phase_boundary.ckpt")
                save_model(path, model, dict(header, step=state.step))
                checkpoints["phase_boundary"] = path
            batch = make_batch(samples, cfg, state.step, schedule, patch)
            record = train_step(state, batch)
            if log_fh is not None:
                log_fh.write(json.dumps(record) + "\n")
            if progress is not None:
                progress(record)
            if state.diverged:
                log.warning("%s: training halted, %s", tag, state.divergence_reason)
                break
    finally:
        if log_fh is not None:
            log_fh.close()
    model.eval()
    if out_dir is not None:
        path = os.path.join(out_dir, f"{tag}.final.ckpt")
        save_model(path, model, dict(header, step=state.step, diverged=state.diverged))
        checkpoints["final"] = path
    return TrainResult(state, checkpoints, log_path)
