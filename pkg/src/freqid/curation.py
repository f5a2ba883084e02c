"""Clip curation from pre-computed detections.

Two steps: a multi-view filter (every frame should hold a face, a head and a
person box plus usable keypoints, with a tolerance for a few bad frames, and
faces must not be too small), and per-clip identity assignment that links
face boxes over time by IoU with one forward sweep and one backward
gap-repair sweep.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from .errors import ConsistencyError, InvalidArgumentError

CATEGORIES = ("face", "head", "person")


def iou(a, b):
    """Intersection over union of (x1, y1, x2, y2) boxes; 0 if either has zero area."""
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    if area_a <= 0 or area_b <= 0:
        return 0.0
    w = min(a[2], b[2]) - max(a[0], b[0])
    h = min(a[3], b[3]) - max(a[1], b[1])
    if w <= 0 or h <= 0:
        return 0.0
    inter = w * h
    return inter / (area_a + area_b - inter)


def is_degenerate(box):
    return (box[2] - box[0]) <= 0 or (box[3] - box[1]) <= 0


@dataclass
class Detection:
    category: str
    bbox: tuple
    confidence: float = 1.0
    keypoints: list | None = None

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise InvalidArgumentError(f"unknown category {self.category!r}")
        self.bbox = tuple(float(v) for v in self.bbox)
        if len(self.bbox) != 4 or not all(math.isfinite(v) for v in self.bbox):
            raise InvalidArgumentError(f"bbox must be four finite numbers, got {self.bbox}")
        x1, y1, x2, y2 = self.bbox
        if not (x1 < x2 and y1 < y2):
            raise InvalidArgumentError(f"bbox {self.bbox} is not well ordered")
        if not 0.0 <= self.confidence <= 1.0:
            raise InvalidArgumentError(f"confidence {self.confidence} outside [0, 1]")

    @property
    def area(self):
        return (self.bbox[2] - self.bbox[0]) * (self.bbox[3] - self.bbox[1])

    def valid_keypoints(self, frame_dims):
        """Keypoints [x, y] or [x, y, score] inside the frame with a positive score."""
        if not self.keypoints:
            return 0
        H, W = frame_dims
        count = 0
        for kp in self.keypoints:
            if len(kp) < 2 or not all(math.isfinite(float(v)) for v in kp):
                continue
            x, y = float(kp[0]), float(kp[1])
            if 0 <= x < W and 0 <= y < H and (len(kp) < 3 or float(kp[2]) > 0):
                count += 1
        return count


@dataclass
class ClipDetections:
    frame_dims: tuple
    frames: list  # per frame: list of Detection

    def __post_init__(self):
        self.frame_dims = tuple(int(v) for v in self.frame_dims)
        if len(self.frame_dims) != 2 or min(self.frame_dims) <= 0:
            raise InvalidArgumentError(f"frame dims must be two positive integers, got {self.frame_dims}")

    @property
    def num_frames(self):
        return len(self.frames)

    def faces(self):
        return [[d.bbox for d in frame if d.category == "face"] for frame in self.frames]


@dataclass
class Track:
    track_id: int
    boxes: list  # per frame: bbox or None
    category: str = "face"

    def to_dict(self):
        return {"id": self.track_id, "category": self.category, "boxes": [None if b is None else list(b) for b in self.boxes]}


@dataclass
class CurationParams:
    tolerance_frames: int = 5
    min_face_area_frac: float = 0.06
    min_keypoint_count: int = 1
    iou_match_threshold: float = 0.1

    def __post_init__(self):
        if self.tolerance_frames < 0 or self.min_keypoint_count < 0:
            raise InvalidArgumentError("tolerance_frames and min_keypoint_count must be >= 0")
        for name in ("min_face_area_frac", "iou_match_threshold"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidArgumentError(f"{name}={v} must lie in [0, 1]")


@dataclass
class Verdict:
    accept: bool
    reason: str | None = None
    missing_count: int = 0
    min_face_area_frac: float | None = None


def _frame_complete(frame, dims, params):
    present = {d.category for d in frame}
    if not all(c in present for c in CATEGORIES):
        return False
    return any(d.valid_keypoints(dims) >= params.min_keypoint_count for d in frame if d.category == "face")


def multi_view_filter(clip: ClipDetections, params: CurationParams) -> Verdict:
    """Accept iff missing_count < tolerance_frames and no complete frame has its
    largest face below ``min_face_area_frac`` of the frame area."""
    if clip.num_frames == 0:
        return Verdict(False, "empty")
    H, W = clip.frame_dims
    complete = [_frame_complete(f, clip.frame_dims, params) for f in clip.frames]
    missing = complete.count(False)
    fracs = [max(d.area for d in f if d.category == "face") / (H * W) for f, ok in zip(clip.frames, complete) if ok]
    min_frac = min(fracs) if fracs else None
    if missing >= params.tolerance_frames:
        return Verdict(False, "missing_frames", missing, min_frac)
    if min_frac is None:
        return Verdict(False, "no_complete_frames", missing, None)
    if min_frac < params.min_face_area_frac:
        return Verdict(False, "small_face", missing, min_frac)
    return Verdict(True, None, missing, min_frac)


# ---------------------------------------------------------------- identity


def greedy_match(prev_boxes, cur_boxes, threshold):
    """Descending-IoU one-to-one matching above ``threshold``; ties go to lower indices.

    Returns {cur index: prev index}.
    """
    pairs = []
    for i, p in enumerate(prev_boxes):
        for j, c in enumerate(cur_boxes):
            v = iou(p, c)
            if v > threshold:
                pairs.append((-v, i, j))
    pairs.sort()
    used_prev, match = set(), {}
    for _, i, j in pairs:
        if i in used_prev or j in match:
            continue
        used_prev.add(i)
        match[j] = i
    return match


def _smallest_free(taken, m):
    for k in range(1, m + 1):
        if k not in taken:
            return k
    raise ConsistencyError("no free identifier; per-frame count exceeds the maximum")


def assign_ids(face_boxes, params: CurationParams | None = None):
    """Per-frame face boxes -> (tracks, per-frame id lists).

    Forward sweep: frame 0 boxes get 1..k; each later frame is matched to its
    predecessor, unmatched boxes take the smallest identifier not used in that
    frame. Backward sweep (last frame to first): a box that starts a segment
    is compared with boxes that end a segment two frames earlier; if they
    overlap above the threshold and the old identifier is free on all frames of
    the later segment, the segment is relabelled, which repairs one-frame gaps.
    """
    params = params or CurationParams()
    thr = params.iou_match_threshold
    frames = [list(map(tuple, f)) for f in face_boxes]
    if not frames:
        raise InvalidArgumentError("need at least one frame")
    N = len(frames)
    m = max(len(f) for f in frames)
    ids = [[0] * len(f) for f in frames]
    links = [{} for _ in range(N)]  # links[n][j] = index of matched box in frame n-1
    ids[0] = list(range(1, len(frames[0]) + 1))
    for n in range(1, N):
        match = greedy_match(frames[n - 1], frames[n], thr)
        links[n] = match
        taken = {ids[n - 1][i] for i in match.values()}
        for j, i in match.items():
            ids[n][j] = ids[n - 1][i]
        for j in range(len(frames[n])):
            if j not in match:
                ids[n][j] = _smallest_free(taken, m)
                taken.add(ids[n][j])

    # successor map: succ[n][i] = index in frame n+1 continuing box i
    succ = [{} for _ in range(N)]
    for n in range(1, N):
        for j, i in links[n].items():
            succ[n - 1][i] = j

    def chain(n, j):
        out = [(n, j)]
        while j in succ[n]:
            j = succ[n][j]
            n += 1
            out.append((n, j))
        return out

    # segments repaired later in the sweep ride along when their predecessor is relabelled
    joined = {}

    def family(n, j):
        out = []
        for k, jj in chain(n, j):
            out.append((k, jj))
            for nxt in joined.get((k, jj), []):
                out.extend(family(*nxt))
        return out

    for n in range(N - 1, 1, -1):
        starts = [j for j in range(len(frames[n])) if j not in links[n]]
        ends = [i for i in range(len(frames[n - 2])) if i not in succ[n - 2]]
        if not starts or not ends:
            continue
        match = greedy_match([frames[n - 2][i] for i in ends], [frames[n][j] for j in starts], thr)
        for sj, ei in sorted(match.items()):
            j, i = starts[sj], ends[ei]
            new_id = ids[n - 2][i]
            seg = family(n, j)
            if ids[n][j] == new_id:
                joined.setdefault(chain(n - 2, i)[-1], []).append((n, j))
                continue
            if new_id in ids[n - 1]:
                continue
            if any(new_id in ids[k][:jj] + ids[k][jj + 1 :] for k, jj in seg):
                continue
            for k, jj in seg:
                ids[k][jj] = new_id
            joined.setdefault((n - 2, i), []).append((n, j))

    for n, frame_ids in enumerate(ids):
        if len(set(frame_ids)) != len(frame_ids) or any(not 1 <= v <= m for v in frame_ids):
            raise ConsistencyError(f"invalid identifiers {frame_ids} in frame {n}")
    tracks = []
    for tid in sorted({v for f in ids for v in f}):
        boxes = []
        for n in range(N):
            hit = [frames[n][j] for j, v in enumerate(ids[n]) if v == tid]
            boxes.append(hit[0] if hit else None)
        tracks.append(Track(tid, boxes))
    return tracks, ids


# ------------------------------------------------------------------ stream


def parse_clip(record):
    dims = record["frame_dims"]
    frames = [
        [Detection(d["category"], d["bbox"], float(d.get("confidence", 1.0)), d.get("keypoints")) for d in frame]
        for frame in record["frames"]
    ]
    return ClipDetections(tuple(dims), frames)


def curate_record(record, params: CurationParams):
    clip = parse_clip(record)
    verdict = multi_view_filter(clip, params)
    out = {"clip_id": record.get("clip_id"), "verdict": "accept" if verdict.accept else "reject"}
    if verdict.reason:
        out["reason"] = verdict.reason
    faces = clip.faces()
    tracks, _ = assign_ids(faces, params) if faces else ([], [])
    m = max((len(f) for f in faces), default=0)
    if any(t.track_id > m for t in tracks):
        raise ConsistencyError("track identifier exceeds the per-clip maximum")
    out["tracks"] = [t.to_dict() for t in tracks]
    out["stats"] = {"m": m, "missing_count": verdict.missing_count, "min_face_area_frac": verdict.min_face_area_frac,
                    "frames": clip.num_frames}
    return out


def curate(lines, params: CurationParams | None = None):
    """Line-delimited JSON clips in, one JSON result per nonblank line out.

    A malformed record yields an error entry and processing continues.
    """
    params = params or CurationParams()
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        clip_id = None
        try:
            record = json.loads(line)
            if not isinstance(record, dict):
                raise InvalidArgumentError("record must be an object")
            clip_id = record.get("clip_id")
            yield curate_record(record, params)
        except (ValueError, KeyError, TypeError, IndexError) as exc:
            yield {"clip_id": clip_id, "line": lineno, "error": f"{type(exc).__name__}: {exc}"}
