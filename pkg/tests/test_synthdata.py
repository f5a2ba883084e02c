import io
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.linear_model import LogisticRegression

from freqid import synthdata as sd
from freqid.errors import CorruptFileError, DegenerateGeometryError, InvalidArgumentError


def test_identity_deterministic():
    assert sd.generate_identity(7) == sd.generate_identity(7)


def test_identity_distinct_over_seeds():
    specs = {sd.generate_identity(s).as_tuple() for s in range(100)}
    assert len(specs) >= 99


@given(st.integers(min_value=0, max_value=2**63 - 1))
@settings(max_examples=200, deadline=None)
def test_identity_ranges(seed):
    s = sd.generate_identity(seed)
    assert 0.0 <= s.face_hue < 1.0
    assert 0.2 <= s.eye_spacing <= 0.45
    assert 0.7 <= s.face_aspect <= 1.3
    assert 0.0 <= s.skin_tone <= 1.0
    assert 0 <= s.marker_bits < 256


def test_caption_round_trip():
    tokens = sd.caption_from_words("bg3 left close bob smile")
    assert sd.caption_to_words(tokens) == "bg3 left close bob smile"
    assert sd.decode_caption(tokens) == (3, 0, 2, 3, 2)
    assert all(0 <= t < sd.TEXT_VOCAB for t in tokens)


def test_script_invariants(rng):
    for _ in range(50):
        script = sd.random_script(rng, 8, 32, 32)
        assert len(script) == 8
        assert np.all((script.face_scale >= 0.3) & (script.face_scale <= 0.8))
        assert np.all(np.abs(script.expression) <= 1)


def test_static_script_gives_identical_frames():
    spec = sd.generate_identity(3)
    script = sd.make_script(sd.caption_from_words("bg1 center medium still neutral"), 8, 32, 32)
    v = sd.render_video(spec, script, 8, 32, 32)
    assert all(np.array_equal(v.frames[0], v.frames[t]) for t in range(8))


def test_mask_matches_analytic_ellipse_count():
    spec = sd.generate_identity(11)
    script = sd.make_script(sd.caption_from_words("bg2 right wide drift_left smile"), 8, 32, 32)
    v = sd.render_video(spec, script, 8, 32, 32)
    for t in range(8):
        cx, cy = script.face_center[t]
        rx, ry = sd.face_radii(spec, script.face_scale[t], 32)
        count = 0
        for y, x in itertools.product(range(32), range(32)):
            if ((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2 <= 1.0:
                count += 1
        assert int(v.mask[t].sum()) == count


def test_keypoints_inside_frame_and_mask(small_dataset):
    for s in small_dataset.samples:
        T, H, W = s.mask.shape
        for t in range(T):
            for x, y in s.keypoints[t]:
                assert 0 <= x <= W - 1 and 0 <= y <= H - 1
                assert s.mask[t, int(round(y)), int(round(x))]
        assert np.all(np.isfinite(s.frames))
        assert s.frames.min() >= 0 and s.frames.max() <= 1


def test_marker_patches_inside_face():
    spec = sd.generate_identity(5)
    for scale in (0.6, 0.7, 0.8):
        center = (15.5, 15.5)
        rx, ry = sd.face_radii(spec, scale, 32)
        mask = sd.ellipse_mask(center, rx, ry, 32, 32)
        for x0, y0, side, _ in sd.marker_patches(spec, center, scale, 32):
            assert side * side >= 4
            assert mask[y0 : y0 + side, x0 : x0 + side].mean() > 0.5


def test_render_rejects_bad_dims():
    spec = sd.generate_identity(0)
    script = sd.make_script(sd.caption_from_words("bg0 center medium still neutral"), 8, 32, 32)
    with pytest.raises(InvalidArgumentError):
        sd.render_video(spec, script, 6, 32, 32)
    with pytest.raises(InvalidArgumentError):
        sd.render_video(spec, script, 4, 32, 32)


def test_render_deterministic():
    spec = sd.generate_identity(9)
    script = sd.random_script(np.random.default_rng(2), 8, 32, 32)
    a, b = sd.render_video(spec, script, 8, 32, 32), sd.render_video(spec, script, 8, 32, 32)
    assert np.array_equal(a.frames, b.frames) and np.array_equal(a.mask, b.mask)


def test_crop_align_canonical_pose_is_window_resample():
    S = 64
    rng = np.random.default_rng(1)
    frame = rng.random((S, S, 3)).astype(np.float32)
    kps = np.zeros((5, 2))
    kps[0] = (0.35 * S, 0.4 * S)
    kps[1] = (0.65 * S, 0.4 * S)
    np.testing.assert_allclose(sd.crop_align(frame, kps, S), frame, atol=1e-6)


def _oracle_eyes_after_rotation(angle_deg):
    # rotate a frame about the face centre; eyes move with it
    H = W = 48
    spec = sd.generate_identity(21)
    center = np.array([23.5, 23.5])
    img, _, kps = sd._render_frame(spec, sd._background(0, H, W), center, 0.7, 0.0, H, W)
    th = np.deg2rad(angle_deg)
    R = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    rot_kps = (kps - center) @ R.T + center
    from scipy import ndimage

    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    src = np.stack([xx.ravel(), yy.ravel()], 1) - center
    src = src @ R + center
    rotated = np.stack(
        [ndimage.map_coordinates(img[..., c], [src[:, 1], src[:, 0]], order=1, mode="nearest").reshape(H, W) for c in range(3)],
        -1,
    )
    return rotated, rot_kps


def test_crop_align_rotated_eyes_land_on_canonical():
    S = 64
    _, kps = _oracle_eyes_after_rotation(10.0)
    aligned = sd.align_keypoints(kps, S)
    np.testing.assert_allclose(aligned[0], (0.35 * S, 0.4 * S), atol=1.0)
    np.testing.assert_allclose(aligned[1], (0.65 * S, 0.4 * S), atol=1.0)
    # closed-form check: inverse similarity maps canonical eyes to the rotated eyes
    a, b = sd._eye_similarity(kps, S)
    for k, (cx, cy) in enumerate(sd.CANONICAL_EYES):
        z = a * complex(cx * S, cy * S) + b
        assert abs(z - complex(*kps[k])) < 1e-9


def test_crop_align_rotation_consistent_appearance():
    rotated, kps = _oracle_eyes_after_rotation(10.0)
    upright, kps0 = _oracle_eyes_after_rotation(0.0)
    a = sd.crop_align(rotated, kps)
    b = sd.crop_align(upright, kps0)
    assert np.abs(a - b).mean() < 0.05


def test_crop_align_degenerate():
    kps = np.zeros((5, 2))
    kps[:2] = (10.0, 10.0)
    with pytest.raises(DegenerateGeometryError):
        sd.crop_align(np.zeros((16, 16, 3)), kps)


def test_keypoint_image_centres_and_colours():
    kps = np.array([[10, 20], [40, 20], [5, 30], [58, 30], [32, 40]], dtype=float)
    img = sd.render_keypoints_rgb(kps, 64)
    for k, (x, y) in enumerate(kps.astype(int)):
        np.testing.assert_array_equal(img[y, x], sd.KEYPOINT_COLORS[k])


def test_keypoint_image_clipping_and_origin():
    kps = np.full((5, 2), -5.0)
    img = sd.render_keypoints_rgb(kps, 64)
    assert img[0, 0].any()
    nz = np.argwhere(img.any(-1))
    assert nz.max() <= 2
    img0 = sd.render_keypoints_rgb(np.zeros((5, 2)), 64)
    assert np.argwhere(img0.any(-1)).max() <= 2
    with pytest.raises(InvalidArgumentError):
        sd.render_keypoints_rgb(np.zeros((4, 2)), 64)
    with pytest.raises(InvalidArgumentError):
        sd.render_keypoints_rgb(np.zeros((5, 2)), 8)


def _roundtrip(samples):
    buf = io.BytesIO()
    sd.save_dataset(samples, buf)
    data = buf.getvalue()
    return data, sd.load_dataset(io.BytesIO(data))


def test_dataset_round_trip_bit_exact(small_dataset):
    samples = small_dataset.samples[:10]
    _, loaded = _roundtrip(samples)
    assert len(loaded) == len(samples)
    for a, b in zip(samples, loaded):
        assert a.frames.tobytes() == b.frames.tobytes()
        assert a.keypoints.tobytes() == b.keypoints.tobytes()
        assert np.array_equal(a.mask, b.mask)
        assert np.array_equal(a.caption_tokens, b.caption_tokens)
        assert a.identity == b.identity


def test_dataset_header_and_empty():
    data, loaded = _roundtrip([])
    assert data[:4] == b"CSID" and loaded == []
    assert int.from_bytes(data[4:8], "little") == 1 and int.from_bytes(data[8:12], "little") == 0


def test_dataset_corruption(small_dataset):
    data, _ = _roundtrip(small_dataset.samples[:2])
    for bad in (data[:-7], b"XXXX" + data[4:], data[:4] + (2).to_bytes(4, "little") + data[8:], data + b"\0"):
        with pytest.raises(CorruptFileError):
            sd.load_dataset(io.BytesIO(bad))


def test_identities_linearly_separable(small_dataset):
    """Mean aligned face crop per video -> identity; train accuracy must exceed 90%."""
    X, y = [], []
    for s in small_dataset.samples:
        crops = [sd.crop_align(s.frames[t], s.keypoints[t], 32) for t in range(s.num_frames)]
        X.append(np.mean(crops, 0).ravel())
        y.append(small_dataset.label_of(s))
    clf = LogisticRegression(max_iter=2000).fit(np.array(X), y)
    assert clf.score(np.array(X), y) > 0.9
