"""Frequency analysis, metric stand-ins and the ablation harnesses.

The published reference numbers (5B-parameter model, in-house data) are
carried as labelled reference columns only; desk-scale runs are not expected
to reproduce them.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F

from . import __version__
from .backbone import unpatchify
from .diffusion import NoiseSchedule, SamplerConfig, sample
from .errors import InvalidArgumentError
from .extractors import images_to_tensor
from .injection import Conditioning, ModelConfig, plan_by_name
from .synthdata import (
    REF_SIZE,
    align_keypoints,
    crop_align,
    make_script,
    random_caption,
    random_script,
    render_keypoints_rgb,
    render_video,
)

log = logging.getLogger(__name__)

AMPLITUDE_FLOOR = 1e-12
UNSTABLE = "unstable"
DEFAULT_STEP_VALUES = (25, 50, 75, 100, 125, 150, 175, 200)
REFERENCE_NOTE = "published 5B-model values; not reproducible at desk scale"

# (FaceSim-Arc, FaceSim-Cur, CLIPScore, FID)
REFERENCE_INJECTION = {
    "a": (0.05, 0.05, 34.86, 269.88),
    "b": (0.66, 0.68, 34.48, 104.34),
    "c": (0.73, 0.75, 36.77, 127.42),
    "d": (0.64, 0.68, 30.69, 177.65),
    "e": (0.62, 0.66, 33.61, 164.15),
    "f": UNSTABLE,
    "g": UNSTABLE,
}
REFERENCE_COMPONENTS = {
    "w/o GFE": (0.05, 0.05, 34.86, 269.88),
    "w/o LFE": (0.66, 0.68, 34.48, 104.34),
    "w/o CFT": (0.54, 0.58, 34.47, 144.62),
    "w/o DML": (0.62, 0.67, 34.23, 187.78),
    "w/o DCL": (0.65, 0.69, 32.21, 117.80),
    "full": (0.73, 0.75, 36.77, 127.42),
}
# (FaceSim-Arc, FaceSim-Cur, CLIPScore, FID, seconds per video lower bound)
REFERENCE_STEPS = {
    25: (0.50, 0.53, 30.43, 184.44, 50),
    50: (0.52, 0.54, 33.08, 163.68, 100),
    75: (0.43, 0.52, 31.92, 200.86, 160),
    100: (0.46, 0.55, 32.25, 212.74, 220),
    125: (0.42, 0.51, 32.38, 185.85, 270),
    150: (0.34, 0.40, 32.41, 186.56, 330),
    175: (0.35, 0.42, 29.98, 186.99, 390),
    200: (0.33, 0.39, 31.18, 166.79, 440),
}

COMPONENT_FLAGS = {
    "w/o GFE": {"use_gfe": False},
    "w/o LFE": {"use_lfe": False},
    "w/o CFT": {"use_cft": False},
    "w/o DML": {"use_dml": False},
    "w/o DCL": {"use_dcl": False},
    "full": {},
}

# ------------------------------------------------------------------ spectrum


@dataclass
class SpectrumProfile:
    radial_bins: np.ndarray  # cycles per pixel
    log_amplitude: np.ndarray
    relative: np.ndarray


def _gray(frames):
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim >= 3 and x.shape[-1] == 3:
        x = x @ np.array([0.299, 0.587, 0.114])
    return x


def fourier_spectrum(frames, region_mask=None, pad_factor=1):
    """Radially averaged log-amplitude spectrum of a masked region.

    frames: (T, H, W) or (T, H, W, 3); region_mask (T, H, W) or (H, W).
    The region is zero-padded to a square of side ``pad_factor * max(H, W)``;
    larger factors put exact nulls of the padding window on most rings, which
    swamps the ring means of log amplitude.
    Returns (centred mean log-amplitude map, SpectrumProfile). The DC
    coefficient of the mean-subtracted region is zero in exact arithmetic and
    is set to zero so rounding residue never leaks above the floor.
    """
    x = _gray(frames)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[0] == 0:
        raise InvalidArgumentError("frames must be a nonempty (T, H, W[, 3]) array")
    T, H, W = x.shape
    if region_mask is None:
        m = np.ones_like(x, dtype=bool)
    else:
        m = np.asarray(region_mask).astype(bool)
        if m.ndim == 2:
            m = np.broadcast_to(m, x.shape)
        if m.shape != x.shape:
            raise InvalidArgumentError(f"mask {m.shape} does not match frames {x.shape}")
    N = pad_factor * max(H, W)
    fy = np.fft.fftfreq(N)[:, None]
    fx = np.fft.fftfreq(N)[None, :]
    bin_index = np.rint(np.hypot(fy, fx) * N).astype(np.int64)
    n_bins = N // 2 + 1
    inside = bin_index < n_bins
    counts = np.bincount(bin_index[inside], minlength=n_bins)
    maps, profiles = [], []
    for f in range(T):
        if not m[f].any():
            raise InvalidArgumentError(f"region mask is empty in frame {f}")
        region = np.where(m[f], x[f] - x[f][m[f]].mean(), 0.0)
        padded = np.zeros((N, N))
        padded[:H, :W] = region
        spec = np.fft.fft2(padded)
        spec[0, 0] = 0.0
        logamp = np.log(np.maximum(np.abs(spec), AMPLITUDE_FLOOR))
        maps.append(np.fft.fftshift(logamp))
        profiles.append(np.bincount(bin_index[inside], weights=logamp[inside], minlength=n_bins) / counts)
    log_amp = np.mean(profiles, axis=0)
    profile = SpectrumProfile(np.arange(n_bins) / N, log_amp, log_amp - log_amp[0])
    return np.mean(maps, axis=0), profile


def band_energy(profile: SpectrumProfile, split_radius=0.25):
    """Mean relative log amplitude over bins below / at-or-above ``split_radius``."""
    r = profile.radial_bins
    if not r[0] < split_radius <= r[-1]:
        raise InvalidArgumentError(f"split radius {split_radius} outside ({r[0]}, {r[-1]}]")
    low = r < split_radius
    return float(profile.relative[low].mean()), float(profile.relative[~low].mean())


def spectrum_to_pgm(spec_map):
    """Binary portable graymap of a log-amplitude map, min-max scaled to 0..255."""
    a = np.asarray(spec_map, dtype=np.float64)
    lo, hi = a.min(), a.max()
    img = np.zeros(a.shape, dtype=np.uint8) if hi <= lo else np.round(255 * (a - lo) / (hi - lo)).astype(np.uint8)
    return f"P5\n{a.shape[1]} {a.shape[0]}\n255\n".encode() + img.tobytes()


# ------------------------------------------------------------------ metrics


def _embed(encoder, images):
    with torch.no_grad():
        return F.normalize(encoder.embed(images_to_tensor(images)), dim=-1).double().numpy()


def face_crops(frames, keypoints=None, size=REF_SIZE):
    """Aligned crops when keypoints are known, else the full frames resized."""
    frames = np.asarray(frames, dtype=np.float32)
    if keypoints is not None:
        return np.stack([crop_align(fr, kp, size) for fr, kp in zip(frames, keypoints)])
    if frames.shape[1:3] == (size, size):
        return frames
    x = torch.as_tensor(frames).permute(0, 3, 1, 2)
    return F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False).permute(0, 2, 3, 1).numpy()


def face_sim(encoder, generated_frames, ref_face, keypoints=None):
    """Mean cosine between each frame's face embedding and the reference embedding."""
    crops = face_crops(generated_frames, keypoints)
    e = _embed(encoder, crops)
    r = _embed(encoder, np.asarray(ref_face, dtype=np.float32)[None])[0]
    return float(np.clip(e @ r, -1.0, 1.0).mean())


def _sqrt_psd(a):
    w, v = np.linalg.eigh((a + a.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def fid(features_a, features_b, return_flag=False, ridge=1e-6):
    """Frechet distance between Gaussian fits of two feature sets.

    The cross term uses tr((S_a^1/2 S_b S_a^1/2)^1/2), which equals
    tr((S_a S_b)^1/2) and only needs symmetric square roots. If either
    covariance is numerically singular a ridge is added and flagged.
    """
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise InvalidArgumentError("feature sets must be (n, dim) with equal dim")
    dim = a.shape[1]
    if len(a) < dim + 1 or len(b) < dim + 1:
        raise InvalidArgumentError(f"need at least {dim + 1} samples per set")
    mu_a, mu_b = a.mean(0), b.mean(0)
    cov_a, cov_b = np.cov(a, rowvar=False).reshape(dim, dim), np.cov(b, rowvar=False).reshape(dim, dim)
    ridged = False
    for c in (cov_a, cov_b):
        w = np.linalg.eigvalsh(c)
        if w.min() <= 1e-10 * max(w.max(), 1e-300):
            ridged = True
    if ridged:
        cov_a = cov_a + ridge * np.eye(dim)
        cov_b = cov_b + ridge * np.eye(dim)
    sa = _sqrt_psd(cov_a)
    cross = np.linalg.eigvalsh((sa @ cov_b @ sa + (sa @ cov_b @ sa).T) / 2)
    value = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2 * np.sum(np.sqrt(np.clip(cross, 0, None))))
    value = max(value, 0.0)
    return (value, ridged) if return_flag else value


def clip_score(two_tower, generated_frames, caption_tokens):
    """100 * max(cos(mean frame embedding, caption embedding), 0)."""
    from .pretrain import resize_frames

    with torch.no_grad():
        img = F.normalize(two_tower.embed_image(resize_frames(np.asarray(generated_frames, dtype=np.float32))), dim=-1)
        img = F.normalize(img.mean(0), dim=-1)
        txt = F.normalize(two_tower.embed_text(torch.as_tensor(np.asarray(caption_tokens, dtype=np.int64))[None])[0], dim=-1)
    return float(100.0 * max(float(img @ txt), 0.0))


# ------------------------------------------------------------- evaluation


@dataclass
class EvalPair:
    identity_index: int
    ref_face: np.ndarray  # (S, S, 3)
    kps_image: np.ndarray  # (S, S, 3)
    caption: np.ndarray  # (L,) uint16
    target_frames: np.ndarray  # ground-truth rendering of the prompt
    target_keypoints: np.ndarray
    target_mask: np.ndarray


def build_eval_pairs(identities, n_pairs=20, frames=4, height=32, width=32, seed=1234, size=REF_SIZE, video_frames=8):
    """Held-out (reference, prompt) pairs: fresh videos and captions of known identities.

    Videos are rendered at ``video_frames`` (the training video length) and the
    target keeps the first ``frames``, matching a training window.
    """
    span = max(frames, video_frames)
    if not identities or n_pairs < 1:
        raise InvalidArgumentError("need identities and at least one pair")
    pairs = []
    for j in range(n_pairs):
        rng = np.random.default_rng([seed, 7919, j])
        i = j % len(identities)
        ident = identities[i]
        src = render_video(ident, random_script(rng, span, height, width), span, height, width)
        f = int(rng.integers(0, span))
        ref = crop_align(src.frames[f], src.keypoints[f], size)
        kps = render_keypoints_rgb(align_keypoints(src.keypoints[f], size), size)
        caption = np.asarray(random_caption(rng), dtype=np.uint16)
        target = render_video(ident, make_script(caption, span, height, width), span, height, width)
        pairs.append(EvalPair(i, ref, kps, caption, target.frames[:frames], target.keypoints[:frames], target.mask[:frames]))
    return pairs


@dataclass
class MetricReport:
    face_sim_a: float
    face_sim_b: float
    clip_score: float
    fid: float
    low_band_energy: float
    high_band_energy: float
    fid_ridge: bool = False
    n_pairs: int = 0

    def to_dict(self):
        return asdict(self)


def generate(model, pairs, sampler_cfg: SamplerConfig, schedule: NoiseSchedule, batch=20):
    """Sample one video per pair -> (P, T, H, W, 3) float32 frames in [0, 1]."""
    dit = model.cfg.dit
    T, h, w = dit.latent_shape[:3]
    out = []
    for start in range(0, len(pairs), batch):
        chunk = pairs[start : start + batch]
        tokens = torch.as_tensor(np.stack([p.caption.astype(np.int64) for p in chunk]))
        cond = Conditioning(images_to_tensor(np.stack([p.ref_face for p in chunk])),
                            images_to_tensor(np.stack([p.kps_image for p in chunk])))
        cfg = replace(sampler_cfg, seed=sampler_cfg.seed + start)
        with torch.no_grad():
            lat = sample(model.denoiser(tokens, cond), tokens, cond, cfg, schedule, (len(chunk), T, h, w, dit.base_channels))
        video = unpatchify(lat, dit.patch)
        out.append(((video.clamp(-1, 1) + 1) / 2).numpy().astype(np.float32))
    return np.concatenate(out)


def evaluate_videos(videos, pairs, bundle, split_radius=0.25) -> MetricReport:
    sims_a, sims_b, clips, lows, highs, gen_feats, real_feats = [], [], [], [], [], [], []
    for video, p in zip(videos, pairs):
        sims_a.append(face_sim(bundle.metric_a, video, p.ref_face, p.target_keypoints))
        sims_b.append(face_sim(bundle.metric_b, video, p.ref_face, p.target_keypoints))
        clips.append(clip_score(bundle.semantic, video, p.caption))
        _, prof = fourier_spectrum(video, p.target_mask)
        lo, hi = band_energy(prof, split_radius)
        lows.append(lo)
        highs.append(hi)
        gen_feats.append(_embed(bundle.metric_b, face_crops(video, p.target_keypoints)))
        real_feats.append(_embed(bundle.metric_b, face_crops(p.target_frames, p.target_keypoints)))
    value, ridged = fid(np.concatenate(gen_feats), np.concatenate(real_feats), return_flag=True)
    return MetricReport(
        face_sim_a=float(np.mean(sims_a)),
        face_sim_b=float(np.mean(sims_b)),
        clip_score=float(np.mean(clips)),
        fid=value,
        low_band_energy=float(np.mean(lows)),
        high_band_energy=float(np.mean(highs)),
        fid_ridge=ridged,
        n_pairs=len(pairs),
    )


def per_pair_bands(videos, pairs, split_radius=0.25):
    """(low, high) band energies per generated video."""
    out = []
    for video, p in zip(videos, pairs):
        _, prof = fourier_spectrum(video, p.target_mask)
        out.append(band_energy(prof, split_radius))
    return np.asarray(out)


def evaluate(model, bundle, pairs, sampler_cfg: SamplerConfig | None = None, schedule: NoiseSchedule | None = None,
             split_radius=0.25):
    """-> (MetricReport, generated videos)."""
    sampler_cfg = sampler_cfg or SamplerConfig()
    schedule = schedule or NoiseSchedule()
    videos = generate(model, pairs, sampler_cfg, schedule)
    return evaluate_videos(videos, pairs, bundle, split_radius), videos


# ---------------------------------------------------------------- reports


METRIC_COLUMNS = ("face_sim_a", "face_sim_b", "clip_score", "fid", "low_band_energy", "high_band_energy")
REFERENCE_COLUMNS = ("ref_face_sim_arc", "ref_face_sim_cur", "ref_clip_score", "ref_fid")


@dataclass
class TableReport:
    title: str
    key: str
    rows: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    version: str = __version__
    note: str = REFERENCE_NOTE

    @property
    def columns(self):
        cols = [self.key]
        for row in self.rows:
            for k in row:
                if k not in cols:
                    cols.append(k)
        return cols

    @property
    def unstable(self):
        return any(r.get("status") == UNSTABLE for r in self.rows)

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=self.columns, lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            writer.writerow({k: _cell(row.get(k, "")) for k in self.columns})
        return buf.getvalue()

    def to_jsonl(self):
        lines = [json.dumps({"kind": "header", "title": self.title, "version": self.version, "note": self.note,
                             "config": self.config}, sort_keys=True)]
        lines += [json.dumps(dict(kind="row", **row), sort_keys=True) for row in self.rows]
        return "\n".join(lines) + "\n"

    def write(self, stem):
        with open(f"{stem}.csv", "w") as fh:
            fh.write(self.to_csv())
        with open(f"{stem}.jsonl", "w") as fh:
            fh.write(self.to_jsonl())


def _cell(v):
    if isinstance(v, float):
        return f"{v:.6f}"
    return "" if v is None else v


def metric_row(report: MetricReport | None, reference=None):
    """Row cells for one run; a diverged run renders 'unstable' in every metric cell."""
    row = {}
    if report is None:
        row.update({c: UNSTABLE for c in METRIC_COLUMNS})
        row["status"] = UNSTABLE
    else:
        row.update({c: getattr(report, c) for c in METRIC_COLUMNS})
        row["status"] = "ok"
    for i, c in enumerate(REFERENCE_COLUMNS):
        if reference is None:
            row[c] = ""
        elif reference == UNSTABLE:
            row[c] = UNSTABLE
        else:
            row[c] = reference[i]
    return row


# --------------------------------------------------------------- harnesses


def _train_and_eval(name, plan, train_cfg, model_cfg, samples, bundle, pairs, sampler_cfg, schedule, out_dir):
    from .trainer import run_training

    result = run_training(train_cfg, model_cfg, plan, samples, bundle.towers(), schedule,
                          out_dir=out_dir, tag=name.replace("/", "").replace(" ", "_"))
    if result.diverged:
        log.warning("%s diverged: %s", name, result.state.divergence_reason)
        return None, result, None
    report, videos = evaluate(result.state.model, bundle, pairs, sampler_cfg, schedule)
    return report, result, videos


def _config_doc(train_cfg, model_cfg, sampler_cfg, schedule, **extra):
    doc = {"train": asdict(train_cfg), "model": model_cfg.to_dict(), "sampler": asdict(sampler_cfg),
           "schedule": {"num_steps": schedule.num_steps, "beta_start": schedule.beta_start, "beta_end": schedule.beta_end}}
    doc.update(extra)
    return doc


def run_injection_ablation(plans, train_cfg, model_cfg: ModelConfig, samples, bundle, pairs,
                           sampler_cfg: SamplerConfig | None = None, schedule: NoiseSchedule | None = None,
                           out_dir=None, fault_plans=(), keep_videos=False):
    """Train and evaluate one model per plan letter; diverged runs become 'unstable' rows."""
    sampler_cfg = sampler_cfg or SamplerConfig()
    schedule = schedule or NoiseSchedule()
    for p in plans:
        if p not in REFERENCE_INJECTION and p != "none":
            raise InvalidArgumentError(f"plan {p!r} is not one of a..g")
    report = TableReport("injection plans", "plan",
                         config=_config_doc(train_cfg, model_cfg, sampler_cfg, schedule, plans=list(plans), fault_plans=list(fault_plans)))
    videos = {}
    for p in plans:
        cfg = replace(train_cfg, inject_nonfinite_step=max(train_cfg.total_steps // 2, 0)) if p in fault_plans else train_cfg
        metrics, result, vids = _train_and_eval(f"plan_{p}", plan_by_name(p), cfg, model_cfg, samples, bundle, pairs,
                                                sampler_cfg, schedule, out_dir)
        row = {"plan": p}
        row.update(metric_row(metrics, REFERENCE_INJECTION.get(p)))
        row["steps_completed"] = result.state.step
        report.rows.append(row)
        if keep_videos:
            videos[p] = vids
    return (report, videos) if keep_videos else report


def run_component_ablation(variants, train_cfg, model_cfg: ModelConfig, samples, bundle, pairs,
                           sampler_cfg: SamplerConfig | None = None, schedule: NoiseSchedule | None = None, out_dir=None):
    """Full model (plan c) with one training component switched off per row."""
    sampler_cfg = sampler_cfg or SamplerConfig()
    schedule = schedule or NoiseSchedule()
    report = TableReport("training components", "variant",
                         config=_config_doc(train_cfg, model_cfg, sampler_cfg, schedule, variants=list(variants)))
    for v in variants:
        if v not in COMPONENT_FLAGS:
            raise InvalidArgumentError(f"unknown variant {v!r}; expected one of {sorted(COMPONENT_FLAGS)}")
        cfg = replace(train_cfg, **COMPONENT_FLAGS[v])
        metrics, result, _ = _train_and_eval(v, plan_by_name("c"), cfg, model_cfg, samples, bundle, pairs,
                                             sampler_cfg, schedule, out_dir)
        row = {"variant": v}
        row.update(metric_row(metrics, REFERENCE_COMPONENTS[v]))
        row["steps_completed"] = result.state.step
        report.rows.append(row)
    return report


def run_steps_ablation(model, bundle, pairs, t_values=DEFAULT_STEP_VALUES, sampler_cfg: SamplerConfig | None = None,
                       schedule: NoiseSchedule | None = None, clock=time.perf_counter):
    """Sampler step sweep at a fixed seed; wall-clock seconds recorded per row."""
    sampler_cfg = sampler_cfg or SamplerConfig()
    schedule = schedule or NoiseSchedule()
    t_values = list(t_values)
    if not t_values or any(t < 1 or t > schedule.num_steps for t in t_values):
        raise InvalidArgumentError(f"step values must lie in [1, {schedule.num_steps}]")
    report = TableReport("sampler steps", "steps",
                         config={"sampler": asdict(sampler_cfg), "t_values": t_values, "model": model.cfg.to_dict(),
                                 "plan": asdict(model.plan), "schedule_steps": schedule.num_steps})
    for t in t_values:
        start = clock()
        videos = generate(model, pairs, replace(sampler_cfg, steps=t), schedule)
        seconds = clock() - start
        metrics = evaluate_videos(videos, pairs, bundle)
        row = {"steps": t}
        row.update(metric_row(metrics, REFERENCE_STEPS.get(t)))
        ref = REFERENCE_STEPS.get(t)
        row["ref_seconds"] = "" if ref is None else f"{ref[4]}+"
        row["seconds"] = seconds
        report.rows.append(row)
    return report
