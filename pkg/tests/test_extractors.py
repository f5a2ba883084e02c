import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.linear_model import LogisticRegression

from freqid import synthdata as sd
from freqid.errors import InvalidArgumentError
from freqid.extractors import (
    FaceTower,
    FuseTokens,
    GlobalFacialExtractor,
    QFormer,
    TowerFeatures,
    Towers,
    TwoTower,
    drop_tokens,
    face_tower,
    fuse_tokens,
    images_to_tensor,
    semantic_tower,
)
from freqid.pretrain import frame_crops, resize_frames

from fd import directional_check, randomize_


def test_gfe_shape_determinism_and_keypoint_channel():
    torch.manual_seed(0)
    gfe = GlobalFacialExtractor(8, (8, 8))
    g = torch.Generator().manual_seed(0)
    ref = torch.rand(2, 3, 64, 64, generator=g) * 2 - 1
    kps = torch.rand(2, 3, 64, 64, generator=g) * 2 - 1
    out = gfe(ref, kps)
    assert out.shape == (2, 8, 8, 8)
    assert torch.equal(out, gfe(ref, kps))
    assert (gfe(ref, -kps) - out).norm() > 0
    with pytest.raises(InvalidArgumentError):
        gfe(ref, kps[:, :, :32, :32])


def test_face_tower_contract():
    torch.manual_seed(0)
    tower = FaceTower()
    x = torch.rand(1, 3, 64, 64) * 2 - 1
    pen, shallow = tower(x)
    assert len(shallow) == 2
    for m in shallow:
        assert m.shape[-1] > pen.shape[-1] and m.shape[-2] > pen.shape[-2]
    pen2, _ = tower(x)
    assert torch.equal(pen, pen2)


def test_semantic_grid_fixed_and_deterministic():
    torch.manual_seed(0)
    tt = TwoTower()
    img = np.random.default_rng(0).random((2, 64, 64, 3)).astype(np.float32)
    a, b = semantic_tower(tt, img), semantic_tower(tt, img)
    assert a.shape[-2:] == (4, 4)
    assert torch.equal(a, b)


def _feats(B=2, seed=0, dim_scale=1.0):
    g = torch.Generator().manual_seed(seed)
    return TowerFeatures(
        penultimate=torch.randn(B, 48, 8, 8, generator=g),
        shallow=[torch.randn(B, 16, 32, 32, generator=g), torch.randn(B, 32, 16, 16, generator=g)],
        semantic=torch.randn(B, 32, 4, 4, generator=g),
    )


def test_fuse_token_counts():
    torch.manual_seed(0)
    fuse = FuseTokens(16)
    feats = _feats()
    tokens, keep = fuse(feats, 0.0)
    assert tokens.shape == (2, 16 + 64, 16) and keep.all()
    rngs = [np.random.default_rng(i) for i in range(2)]
    _, keep = fuse(feats, 1.0, rngs)
    assert (keep[:, :16].sum(1) == 1).all() and keep[:, 16:].all()
    single = fuse_tokens(fuse, _feats(B=1), 1.0, np.random.default_rng(3))
    assert single.shape == (1 + 64, 16)


def test_drop_fraction_monte_carlo():
    rng = np.random.default_rng(0)
    keep = np.concatenate([drop_tokens(100, 0.3, rng) for _ in range(100)])
    assert abs((1 - keep.mean()) - 0.3) < 0.03


def test_qformer_hand_computed_single_token():
    d = 6
    q = QFormer(d, n_queries=3, layers=1, heads=1, dropout=0.0)
    layer = q.layers[0]
    with torch.no_grad():
        for lin in (layer.to_q, layer.to_k):
            lin.weight.zero_()
            lin.bias.zero_()
        for lin in (layer.to_v, layer.to_out):
            lin.weight.copy_(torch.eye(d))
            lin.bias.zero_()
        for p in layer.ffn.parameters():
            p.zero_()
        q.queries.zero_()
    v = torch.randn(1, d)
    out = q(v)
    assert out.shape == (3, d)
    assert torch.allclose(out, v.expand(3, d), atol=1e-6)


def test_qformer_shapes_and_empty():
    torch.manual_seed(0)
    q = QFormer(8, n_queries=5, layers=2, heads=2).eval()
    for n in (1, 3, 17):
        assert q(torch.randn(n, 8)).shape == (5, 8)
    with pytest.raises(InvalidArgumentError):
        q(torch.zeros(0, 8))


@given(st.integers(0, 10_000))
@settings(max_examples=100, deadline=None)
def test_qformer_permutation_invariance(seed):
    torch.manual_seed(0)
    q = QFormer(8, n_queries=4, layers=2, heads=2).double().eval()
    g = torch.Generator().manual_seed(seed)
    kv = torch.randn(7, 8, generator=g, dtype=torch.float64)
    perm = torch.randperm(7, generator=g)
    assert torch.allclose(q(kv), q(kv[perm]), atol=1e-10)


def test_gradients_gfe_fuse_qformer():
    torch.manual_seed(0)
    gfe = randomize_(GlobalFacialExtractor(4, (2, 2), width=4).double(), 0.3)
    g = torch.Generator().manual_seed(0)
    ref = torch.randn(2, 3, 16, 16, generator=g, dtype=torch.float64)
    kps = torch.randn(2, 3, 16, 16, generator=g, dtype=torch.float64)
    assert directional_check(lambda: (gfe(ref, kps) ** 2).sum(), list(gfe.parameters())) < 1e-3

    fuse = randomize_(FuseTokens(8, shallow_channels=(3, 4), semantic_channels=5, penultimate_channels=6, grid=2,
                                 penultimate_tokens=4).double(), 0.3)
    feats = TowerFeatures(
        penultimate=torch.randn(2, 6, 2, 2, generator=g, dtype=torch.float64),
        shallow=[torch.randn(2, 3, 8, 8, generator=g, dtype=torch.float64), torch.randn(2, 4, 4, 4, generator=g, dtype=torch.float64)],
        semantic=torch.randn(2, 5, 2, 2, generator=g, dtype=torch.float64),
    )
    w = torch.randn(2, 8, 8, generator=g, dtype=torch.float64)
    assert directional_check(lambda: (fuse(feats, 0.0)[0] * w).sum(), list(fuse.parameters())) < 1e-3

    q = randomize_(QFormer(8, n_queries=3, layers=2, heads=2, dropout=0.0).double(), 0.3)
    kv = torch.randn(2, 5, 8, generator=g, dtype=torch.float64)
    wq = torch.randn(2, 3, 8, generator=g, dtype=torch.float64)
    assert directional_check(lambda: (q(kv) * wq).sum(), list(q.parameters())) < 1e-3


# ----------------------------------------------------------- pretrained


def _identity_crops(dataset, per_identity=8, seed=5):
    rng = np.random.default_rng(seed)
    crops, ys = [], []
    for i, ident in enumerate(dataset.identities):
        for _ in range(per_identity):
            v = sd.render_video(ident, sd.random_script(rng, 8, 32, 32), 8, 32, 32)
            f = int(rng.integers(0, 8))
            crops.append(sd.crop_align(v.frames[f], v.keypoints[f]))
            ys.append(i)
    return np.stack(crops), np.array(ys)


def _separation(embed, crops, ys):
    with torch.no_grad():
        e = F.normalize(embed(images_to_tensor(crops)), dim=-1).numpy()
    S = e @ e.T
    same = ys[:, None] == ys[None]
    np.fill_diagonal(same, False)
    return S[same].mean() - S[ys[:, None] != ys[None]].mean()


def test_face_tower_separates_identities(quick_bundle, small_dataset):
    crops, ys = _identity_crops(small_dataset)
    assert _separation(quick_bundle.face.embed, crops, ys) >= 0.2


def test_semantic_tower_background_probe(quick_bundle, small_dataset):
    X, y = [], []
    for s in small_dataset.samples:
        grid = quick_bundle.semantic.grid(resize_frames(s.frames[:1]))
        X.append(grid.flatten().numpy())
        y.append(sd.decode_caption(s.caption_tokens)[0])
    X, y = np.array(X), np.array(y)
    clf = LogisticRegression(max_iter=3000).fit(X[::2], y[::2])
    assert clf.score(X[1::2], y[1::2]) > 0.8


def test_identity_tokens_depend_on_marker_bits(quick_bundle):
    from dataclasses import replace

    from freqid.extractors import LocalFacialExtractor

    spec = sd.generate_identity(77)
    flipped = replace(spec, marker_bits=spec.marker_bits ^ 0b1010_0101)
    script = sd.make_script(sd.caption_from_words("bg0 center close still neutral"), 8, 32, 32)
    a = sd.render_video(spec, script, 8, 32, 32)
    b = sd.render_video(flipped, script, 8, 32, 32)
    ca = sd.crop_align(a.frames[0], a.keypoints[0])
    cb = sd.crop_align(b.frames[0], b.keypoints[0])
    torch.manual_seed(0)
    lfe = LocalFacialExtractor(32).eval()
    towers = Towers(quick_bundle.face, quick_bundle.semantic)
    fa = lfe(towers(images_to_tensor(ca)))
    fb = lfe(towers(images_to_tensor(cb)))
    assert (fa - fb).norm() > 0
    assert (fa.norm() - fb.norm()).abs() > 0
