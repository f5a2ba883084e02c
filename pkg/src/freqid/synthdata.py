"""Procedural identity videos: sprites with a low-frequency look and a marker barcode.

Faces are ellipses whose hue, skin tone, aspect and eye spacing form the
coarse identity; eight high-contrast square patches (``marker_bits``) form the
fine identity. Scene scripts are a deterministic function of the caption, so
the geometry of any prompt is known exactly at evaluation time.

Coordinates are (x, y) with pixel centres at integer positions.
"""

from __future__ import annotations

import colorsys
import io
import struct
from dataclasses import dataclass
from typing import BinaryIO, Sequence

import numpy as np
from scipy import ndimage

from .errors import CorruptFileError, DegenerateGeometryError, InvalidArgumentError

REF_SIZE = 64
CANONICAL_EYES = ((0.35, 0.4), (0.65, 0.4))
KEYPOINT_NAMES = ("left_eye", "right_eye", "left_ear", "right_ear", "nose")

# caption vocabulary: one word per slot, slots occupy disjoint id ranges
BACKGROUNDS = 8
POSITIONS = ("left", "center", "right")
SCALES = ("wide", "medium", "close")
MOTIONS = ("still", "drift_left", "drift_right", "bob")
EXPRESSIONS = ("frown", "neutral", "smile")
WORDS = (
    [f"bg{i}" for i in range(BACKGROUNDS)]
    + list(POSITIONS)
    + list(SCALES)
    + list(MOTIONS)
    + list(EXPRESSIONS)
)
TEXT_VOCAB = len(WORDS)
CAPTION_LENGTH = 5
_OFFSETS = np.cumsum([0, BACKGROUNDS, len(POSITIONS), len(SCALES), len(MOTIONS)])
_SLOT_SIZES = (BACKGROUNDS, len(POSITIONS), len(SCALES), len(MOTIONS), len(EXPRESSIONS))

_SCALE_VALUES = (0.6, 0.7, 0.8)
_POSITION_FRACS = (0.15, 0.5, 0.85)
_EXPRESSION_VALUES = (-0.8, 0.0, 0.8)
_BG_COLORS = np.array(
    [
        [0.20, 0.30, 0.55],
        [0.55, 0.25, 0.20],
        [0.20, 0.50, 0.25],
        [0.50, 0.50, 0.50],
        [0.15, 0.15, 0.20],
        [0.60, 0.55, 0.25],
        [0.35, 0.20, 0.45],
        [0.25, 0.50, 0.55],
    ]
)


@dataclass(frozen=True)
class IdentitySpec:
    identity_id: int
    face_hue: float
    eye_spacing: float
    face_aspect: float
    skin_tone: float
    marker_bits: int

    def as_tuple(self):
        return (self.face_hue, self.eye_spacing, self.face_aspect, self.skin_tone, self.marker_bits)


@dataclass(frozen=True)
class SceneScript:
    background_id: int
    face_center: np.ndarray  # (T, 2)
    face_scale: np.ndarray  # (T,)
    expression: np.ndarray  # (T,)
    caption_tokens: tuple

    def __len__(self):
        return len(self.face_scale)


@dataclass
class VideoSample:
    frames: np.ndarray  # (T, H, W, 3) float32 in [0, 1]
    keypoints: np.ndarray  # (T, 5, 2) float32
    mask: np.ndarray  # (T, H, W) uint8
    caption_tokens: np.ndarray  # (L,) uint16
    identity: IdentitySpec

    @property
    def num_frames(self):
        return self.frames.shape[0]


def _f32(x):
    return float(np.float32(x))


def generate_identity(seed: int, identity_id: int | None = None) -> IdentitySpec:
    rng = np.random.default_rng(seed)
    if identity_id is None:
        identity_id = seed % 2**32
    return IdentitySpec(
        identity_id=int(identity_id),
        face_hue=min(_f32(rng.uniform(0.0, 1.0)), _f32(np.nextafter(np.float32(1.0), np.float32(0.0)))),
        eye_spacing=_f32(rng.uniform(0.2, 0.45)),
        face_aspect=_f32(rng.uniform(0.7, 1.3)),
        skin_tone=_f32(rng.uniform(0.0, 1.0)),
        marker_bits=int(rng.integers(0, 256)),
    )


# ---------------------------------------------------------------- captions


def encode_caption(background, position, scale, motion, expression):
    """Slot indices -> token ids."""
    slots = (background, position, scale, motion, expression)
    for value, size in zip(slots, _SLOT_SIZES):
        if not 0 <= value < size:
            raise InvalidArgumentError(f"caption slot value {value} outside [0, {size})")
    return tuple(int(off + v) for off, v in zip(_OFFSETS, slots))


def decode_caption(tokens):
    if len(tokens) != CAPTION_LENGTH:
        raise InvalidArgumentError(f"caption must have {CAPTION_LENGTH} tokens")
    slots = tuple(int(t) - int(off) for t, off in zip(tokens, _OFFSETS))
    for value, size in zip(slots, _SLOT_SIZES):
        if not 0 <= value < size:
            raise InvalidArgumentError(f"token sequence {tuple(tokens)} is not a caption")
    return slots


def caption_from_words(text):
    words = text.replace(",", " ").split()
    try:
        return tuple(WORDS.index(w) for w in words)
    except ValueError as exc:
        raise InvalidArgumentError(f"unknown word in prompt {text!r}") from exc


def caption_to_words(tokens):
    return " ".join(WORDS[int(t)] for t in tokens)


def make_script(caption_tokens, T: int, H: int, W: int) -> SceneScript:
    """Deterministic scene geometry for a caption."""
    background, position, scale_i, motion, expression_i = decode_caption(caption_tokens)
    scale = _SCALE_VALUES[scale_i]
    ry = 0.5 * scale * H
    rx_max = 0.8 * ry * 1.3
    lo, hi = rx_max + 1.0, W - 2.0 - rx_max
    cx0 = lo + _POSITION_FRACS[position] * max(hi - lo, 0.0)
    frames = np.arange(T, dtype=np.float64)
    cx = np.full(T, cx0)
    cy = np.full(T, (H - 1) / 2.0)
    step = 0.08 * W / max(T - 1, 1)
    if MOTIONS[motion] == "drift_left":
        cx = cx0 - step * frames
    elif MOTIONS[motion] == "drift_right":
        cx = cx0 + step * frames
    elif MOTIONS[motion] == "bob":
        cy = cy + 0.04 * H * np.sin(np.pi * frames / 2.0)
    cx = np.clip(cx, lo, max(hi, lo))
    ylo, yhi = ry + 1.0, H - 2.0 - ry
    cy = np.clip(cy, ylo, max(yhi, ylo))
    return SceneScript(
        background_id=background,
        face_center=np.stack([cx, cy], axis=1),
        face_scale=np.full(T, scale),
        expression=np.full(T, _EXPRESSION_VALUES[expression_i]),
        caption_tokens=tuple(caption_tokens),
    )


def random_caption(rng):
    return encode_caption(*(int(rng.integers(0, s)) for s in _SLOT_SIZES))


def random_script(rng, T, H, W):
    return make_script(random_caption(rng), T, H, W)


# --------------------------------------------------------------- rendering


def face_radii(identity: IdentitySpec, scale: float, H: int):
    ry = 0.5 * scale * H
    rx = 0.8 * ry * identity.face_aspect
    return rx, ry


def face_keypoints(identity, center, scale, H):
    rx, ry = face_radii(identity, scale, H)
    cx, cy = center
    eye_dx = (identity.eye_spacing + 0.2) * rx
    eye_y = cy - 0.2 * ry
    return np.array(
        [
            [cx - eye_dx, eye_y],
            [cx + eye_dx, eye_y],
            [cx - 0.85 * rx, cy],
            [cx + 0.85 * rx, cy],
            [cx, cy + 0.05 * ry],
        ]
    )


def ellipse_mask(center, rx, ry, H, W):
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    return ((xx - center[0]) / rx) ** 2 + ((yy - center[1]) / ry) ** 2 <= 1.0


def marker_patches(identity, center, scale, H):
    """Yield (x0, y0, side, bit) for the eight marker squares."""
    rx, ry = face_radii(identity, scale, H)
    side = max(2, int(round(0.3 * min(rx, ry))))
    cx, cy = center
    rows = (cy - 0.62 * ry, cy + 0.25 * ry)
    for k in range(8):
        row, col = divmod(k, 4)
        x0 = int(round(cx - 2 * side + col * side))
        y0 = int(round(rows[row] - side / 2.0))
        yield x0, y0, side, (identity.marker_bits >> k) & 1


def _background(bg_id, H, W):
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    theta = np.pi * bg_id / BACKGROUNDS
    wave = np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / 16.0)
    img = _BG_COLORS[bg_id][None, None, :] * (1.0 + 0.25 * wave[..., None])
    return np.clip(img, 0.0, 1.0)


def skin_rgb(identity):
    sat = 0.35 + 0.3 * identity.skin_tone
    val = 0.45 + 0.45 * identity.skin_tone
    return np.array(colorsys.hsv_to_rgb(identity.face_hue, sat, val))


def _render_frame(identity, bg, center, scale, expression, H, W):
    img = bg.copy()
    rx, ry = face_radii(identity, scale, H)
    mask = ellipse_mask(center, rx, ry, H, W)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    r2 = ((xx - center[0]) / rx) ** 2 + ((yy - center[1]) / ry) ** 2
    shade = (1.0 - 0.15 * r2)[..., None]
    img = np.where(mask[..., None], skin_rgb(identity)[None, None, :] * shade, img)

    for x0, y0, side, bit in marker_patches(identity, center, scale, H):
        patch = np.zeros((H, W), dtype=bool)
        patch[max(y0, 0) : max(y0 + side, 0), max(x0, 0) : max(x0 + side, 0)] = True
        img[patch & mask] = 0.97 if bit else 0.05

    kps = face_keypoints(identity, center, scale, H)
    for ex, ey in kps[:2]:
        img[int(round(ey)), int(round(ex))] = (0.02, 0.02, 0.05)
    cx, cy = center
    for xs in np.arange(-0.35 * rx, 0.35 * rx + 1e-9, 0.5):
        u = xs / (0.35 * rx)
        my = cy + 0.6 * ry - expression * 0.12 * ry * (u * u - 0.5)
        px, py = int(round(cx + xs)), int(round(my))
        if 0 <= py < H and 0 <= px < W and mask[py, px]:
            img[py, px] = (0.45, 0.05, 0.08)
    return img, mask, kps


def render_video(spec: IdentitySpec, script: SceneScript, T: int, H: int, W: int) -> VideoSample:
    if min(T, H, W) < 8:
        raise InvalidArgumentError("T, H and W must all be at least 8")
    if len(script) != T or script.face_center.shape != (T, 2) or len(script.expression) != T:
        raise InvalidArgumentError(f"script covers {len(script)} frames, expected {T}")
    bg = _background(script.background_id, H, W)
    frames = np.empty((T, H, W, 3), dtype=np.float32)
    masks = np.empty((T, H, W), dtype=np.uint8)
    keypoints = np.empty((T, 5, 2), dtype=np.float32)
    for t in range(T):
        img, mask, kps = _render_frame(
            spec, bg, script.face_center[t], float(script.face_scale[t]), float(script.expression[t]), H, W
        )
        frames[t] = img
        masks[t] = mask
        keypoints[t] = kps
    return VideoSample(
        frames=frames,
        keypoints=keypoints,
        mask=masks,
        caption_tokens=np.asarray(script.caption_tokens, dtype=np.uint16),
        identity=spec,
    )


# ---------------------------------------------------------- crop and align


def _eye_similarity(keypoints, size):
    """Complex scale-rotation ``a`` and offset ``b`` with src = a * dst + b."""
    e1 = complex(*map(float, keypoints[0]))
    e2 = complex(*map(float, keypoints[1]))
    if abs(e2 - e1) <= 2.0:
        raise DegenerateGeometryError(f"inter-eye distance {abs(e2 - e1):.3f} px is too small")
    c1 = complex(CANONICAL_EYES[0][0] * size, CANONICAL_EYES[0][1] * size)
    c2 = complex(CANONICAL_EYES[1][0] * size, CANONICAL_EYES[1][1] * size)
    a = (e2 - e1) / (c2 - c1)
    return a, e1 - a * c1


def align_keypoints(keypoints, size=REF_SIZE):
    """Map frame keypoints into reference-face coordinates."""
    a, b = _eye_similarity(keypoints, size)
    z = (np.asarray(keypoints[:, 0], dtype=np.float64) + 1j * np.asarray(keypoints[:, 1], dtype=np.float64) - b) / a
    return np.stack([z.real, z.imag], axis=1)


def crop_align(frame, keypoints, size: int = REF_SIZE) -> np.ndarray:
    """Similarity-warp the face so the eyes land on the canonical positions."""
    frame = np.asarray(frame)
    a, b = _eye_similarity(keypoints, size)
    v, u = np.mgrid[0:size, 0:size].astype(np.float64)
    src = a * (u + 1j * v) + b
    coords = np.stack([src.imag, src.real])
    out = np.empty((size, size, frame.shape[2]), dtype=np.float64)
    for c in range(frame.shape[2]):
        out[..., c] = ndimage.map_coordinates(frame[..., c].astype(np.float64), coords, order=1, mode="nearest")
    return np.clip(out, 0.0, 1.0).astype(np.float32)


KEYPOINT_COLORS = np.array(
    [
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
        [1.0, 1.0, 0.0],
        [1.0, 0.0, 1.0],
    ],
    dtype=np.float32,
)


def render_keypoints_rgb(keypoints, size: int = REF_SIZE, radius: int | None = None) -> np.ndarray:
    keypoints = np.asarray(keypoints, dtype=np.float64)
    if size < 16:
        raise InvalidArgumentError("keypoint image size must be at least 16")
    if keypoints.ndim != 2 or keypoints.shape[0] < 5 or keypoints.shape[1] != 2:
        raise InvalidArgumentError("need five (x, y) keypoints")
    if radius is None:
        radius = max(1, size // 32)
    img = np.zeros((size, size, 3), dtype=np.float32)
    yy, xx = np.mgrid[0:size, 0:size]
    for k in range(5):
        cx, cy = np.clip(np.round(keypoints[k]), 0, size - 1)
        disk = (xx - cx) ** 2 + (yy - cy) ** 2 <= radius * radius
        img[disk] = KEYPOINT_COLORS[k]
    return img


# ---------------------------------------------------------------- datasets


@dataclass
class Dataset:
    samples: list
    identities: list

    def __len__(self):
        return len(self.samples)

    def label_of(self, sample):
        return self.identities.index(sample.identity)


def build_dataset(
    n_identities=16, videos_per_identity=8, frames=8, height=32, width=32, seed=0
) -> Dataset:
    identities = [generate_identity((seed << 20) + i, identity_id=i) for i in range(n_identities)]
    samples = []
    for i, ident in enumerate(identities):
        for v in range(videos_per_identity):
            rng = np.random.default_rng([seed, i, v])
            script = random_script(rng, frames, height, width)
            samples.append(render_video(ident, script, frames, height, width))
    return Dataset(samples=samples, identities=identities)


MAGIC = b"CSID"
VERSION = 1


def _write_sample(fh, s: VideoSample):
    T, H, W, _ = s.frames.shape
    fh.write(struct.pack("<III", T, H, W))
    fh.write(np.ascontiguousarray(s.frames, dtype="<f4").tobytes())
    fh.write(np.ascontiguousarray(s.keypoints, dtype="<f4").tobytes())
    fh.write(np.ascontiguousarray(s.mask, dtype=np.uint8).tobytes())
    cap = np.asarray(s.caption_tokens, dtype="<u2")
    fh.write(struct.pack("<H", len(cap)))
    fh.write(cap.tobytes())
    ident = s.identity
    fh.write(
        struct.pack(
            "<IffffI",
            ident.identity_id,
            ident.face_hue,
            ident.eye_spacing,
            ident.face_aspect,
            ident.skin_tone,
            ident.marker_bits,
        )
    )


def save_dataset(samples: Sequence[VideoSample], path_or_file):
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(samples)))
    for s in samples:
        _write_sample(buf, s)
    data = buf.getvalue()
    if hasattr(path_or_file, "write"):
        path_or_file.write(data)
    else:
        with open(path_or_file, "wb") as fh:
            fh.write(data)


def _take(view, pos, n):
    if pos + n > len(view):
        raise CorruptFileError("truncated dataset file")
    return view[pos : pos + n], pos + n


def load_dataset(path_or_file) -> list:
    if hasattr(path_or_file, "read"):
        data = path_or_file.read()
    else:
        with open(path_or_file, "rb") as fh:
            data = fh.read()
    view = memoryview(data)
    head, pos = _take(view, 0, 12)
    if bytes(head[:4]) != MAGIC:
        raise CorruptFileError("bad magic, not a dataset file")
    version, count = struct.unpack("<II", head[4:])
    if version != VERSION:
        raise CorruptFileError(f"unsupported dataset version {version}")
    samples = []
    for _ in range(count):
        raw, pos = _take(view, pos, 12)
        T, H, W = struct.unpack("<III", raw)
        raw, pos = _take(view, pos, T * H * W * 3 * 4)
        frames = np.frombuffer(raw, dtype="<f4").reshape(T, H, W, 3).astype(np.float32)
        raw, pos = _take(view, pos, T * 5 * 2 * 4)
        kps = np.frombuffer(raw, dtype="<f4").reshape(T, 5, 2).astype(np.float32)
        raw, pos = _take(view, pos, T * H * W)
        mask = np.frombuffer(raw, dtype=np.uint8).reshape(T, H, W).copy()
        raw, pos = _take(view, pos, 2)
        (n_cap,) = struct.unpack("<H", raw)
        raw, pos = _take(view, pos, 2 * n_cap)
        cap = np.frombuffer(raw, dtype="<u2").astype(np.uint16)
        raw, pos = _take(view, pos, 24)
        iid, hue, spacing, aspect, tone, bits = struct.unpack("<IffffI", raw)
        ident = IdentitySpec(iid, hue, spacing, aspect, tone, bits)
        samples.append(VideoSample(frames, kps, mask, cap, ident))
    if pos != len(view):
        raise CorruptFileError("trailing bytes after last sample")
    return samples


def dataset_from_samples(samples) -> Dataset:
    identities = []
    for s in samples:
        if s.identity not in identities:
            identities.append(s.identity)
    return Dataset(samples=list(samples), identities=identities)
