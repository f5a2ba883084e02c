import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from freqid.backbone import DiTConfig
from freqid.diffusion import NoiseSchedule
from freqid.errors import InvalidArgumentError
from freqid.injection import PLANS, ModelConfig, assemble
from freqid.synthdata import align_keypoints, build_dataset, crop_align
from freqid.trainer import (
    TrainConfig,
    compute_loss,
    dynamic_mask_loss,
    init_state,
    load_model,
    make_batch,
    mask_to_latent,
    masked_loss,
    plain_loss,
    run_training,
    save_model,
    select_reference,
    train_step,
)

from fd import directional_check, randomize_

TOY = ModelConfig(dit=DiTConfig(depth=1, model_dim=32, heads=4, frames=2, height=16, width=16), n_queries=4)


@pytest.fixture(scope="module")
def toy_data():
    return build_dataset(n_identities=3, videos_per_identity=2, frames=8, height=16, width=16, seed=3)


def _linear_weights(n_in, n_out):
    """Resampling matrix of half-pixel-centred linear interpolation, edge clamped."""
    W = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for o in range(n_out):
        x = min(max((o + 0.5) * scale - 0.5, 0.0), n_in - 1)
        lo = int(np.floor(x))
        hi = min(lo + 1, n_in - 1)
        W[o, lo] += 1 - (x - lo)
        W[o, hi] += x - lo
    return W


def _trilinear_oracle(mask, patch):
    T, H, W = mask.shape
    out = np.einsum("at,thw->ahw", _linear_weights(T, T), mask)
    out = np.einsum("bh,ahw->abw", _linear_weights(H, H // patch), out)
    return np.einsum("cw,abw->abc", _linear_weights(W, W // patch), out)


def test_mask_to_latent_constants():
    assert torch.equal(mask_to_latent(np.ones((2, 16, 16))), torch.ones(2, 4, 4, 1))
    assert torch.equal(mask_to_latent(np.zeros((2, 16, 16)), channels=48), torch.zeros(2, 4, 4, 48))
    with pytest.raises(InvalidArgumentError):
        mask_to_latent(np.ones((2, 15, 16)))


def test_mask_to_latent_half_plane_matches_oracle():
    mask = np.zeros((3, 16, 16))
    mask[:, :, :7] = 1.0
    M = mask_to_latent(mask)[..., 0].numpy()
    assert M.min() >= 0 and M.max() <= 1
    assert np.all(np.diff(M, axis=2) <= 0)
    np.testing.assert_allclose(M, _trilinear_oracle(mask, 4), atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_mask_to_latent_random_oracle(seed):
    mask = (np.random.default_rng(seed).random((4, 8, 12)) > 0.5).astype(np.float64)
    np.testing.assert_allclose(mask_to_latent(mask)[..., 0].numpy(), _trilinear_oracle(mask, 4), atol=1e-6)


def test_masked_loss_algebra():
    g = torch.Generator().manual_seed(0)
    eps, hat = torch.randn(2, 4, 4, 48, generator=g), torch.randn(2, 4, 4, 48, generator=g)
    assert torch.equal(masked_loss(eps, hat, torch.ones(2, 4, 4, 1)), plain_loss(eps, hat))
    assert masked_loss(eps, hat, torch.zeros(2, 4, 4, 1)) == 0
    M = torch.zeros_like(eps)
    M[1, 2, 3, 7] = 1
    hat2 = hat.clone()
    hat2[1, 2, 3, 7] = eps[1, 2, 3, 7] - 2.0
    assert masked_loss(eps, hat2, M).item() == pytest.approx(4.0, abs=1e-5)
    # linear in the squared error under a fixed mask
    Mr = torch.rand(2, 4, 4, 1, generator=g)
    a = masked_loss(eps, eps + 2 * (hat - eps), Mr)
    assert a.item() == pytest.approx(4 * masked_loss(eps, hat, Mr).item(), rel=1e-5)


def test_dynamic_mask_loss_branches():
    eps, hat = torch.zeros(3), torch.ones(3)
    M = torch.tensor([1.0, 0.0, 0.0])
    rng = np.random.default_rng(0)
    assert all(not dynamic_mask_loss(eps, hat, M, 1.0, rng)[1] for _ in range(200))
    assert all(dynamic_mask_loss(eps, hat, M, 0.0, rng)[1] for _ in range(200))
    n = 10_000
    freq = sum(dynamic_mask_loss(eps, hat, M, 0.5, rng)[1] for _ in range(n)) / n
    assert abs(freq - 0.5) < 0.02
    freq = sum(dynamic_mask_loss(eps, hat, M, 0.3, rng)[1] for _ in range(n)) / n
    assert abs(freq - 0.7) < 0.02
    with pytest.raises(InvalidArgumentError):
        dynamic_mask_loss(eps, hat, M, 1.5, rng)


def test_select_reference_branches(toy_data):
    s = toy_data.samples[0]
    rng = np.random.default_rng(1)
    assert {select_reference(s, (2, 4), 0.0, 0.05, rng)[2] for _ in range(50)} == {"in"}
    assert {select_reference(s, (2, 4), 1.0, 0.05, rng)[2] for _ in range(50)} == {"cross"}
    assert select_reference(s, (0, 8), 1.0, 0.0, rng)[2] == "cross_fallback"
    n = 10_000
    freq = sum(select_reference(s, (2, 4), 0.5, 0.0, rng, size=16)[2] == "cross" for _ in range(n)) / n
    assert abs(freq - 0.5) < 0.02


def test_select_reference_without_noise_is_exact_crop(toy_data):
    s = toy_data.samples[1]
    for seed in range(10):
        ref, kps_img, tag = select_reference(s, (0, 4), 0.5, 0.0, np.random.default_rng(seed))
        frames = range(0, 4) if tag == "in" else range(4, 8)
        assert any(np.array_equal(ref, crop_align(s.frames[f], s.keypoints[f], 64)) for f in frames)
    noisy, _, _ = select_reference(s, (0, 4), 0.0, 0.05, np.random.default_rng(0))
    assert noisy.min() >= 0 and noisy.max() <= 1
    clean, _, _ = select_reference(s, (0, 4), 0.0, 0.0, np.random.default_rng(0))
    assert 0.01 < np.abs(noisy - clean).mean() < 0.06


def _cfg(**kw):
    base = dict(total_steps=12, batch_size=2, window=2, warmup_steps=2, seed=5)
    base.update(kw)
    return TrainConfig(**base)


def test_training_is_deterministic(toy_data):
    runs = [run_training(_cfg(), TOY, PLANS["c"], toy_data.samples) for _ in range(2)]
    l0 = [h["loss"] for h in runs[0].state.history]
    l1 = [h["loss"] for h in runs[1].state.history]
    assert l0 == l1 and len(l0) == 12
    for a, b in zip(runs[0].state.model.parameters(), runs[1].state.model.parameters()):
        assert torch.equal(a, b)


def test_overfits_repeated_batch(toy_data):
    cfg = _cfg(total_steps=200, batch_size=4, use_dml=False, null_text_ratio=0.0, warmup_steps=10, learning_rate=3e-3,
               restarts=1)
    sched = NoiseSchedule()
    state = init_state(assemble(PLANS["c"], TOY), cfg, sched)
    batch = make_batch(toy_data.samples, cfg, 0, sched)
    losses = [train_step(state, batch)["loss"] for _ in range(200)]
    assert losses[-1] < 0.5 * losses[0]


def test_nonfinite_weights_halt_training(toy_data, tmp_path):
    res = run_training(_cfg(total_steps=10, inject_nonfinite_step=4), TOY, PLANS["c"], toy_data.samples,
                       out_dir=str(tmp_path), tag="bad")
    assert res.diverged and res.state.step == 5
    assert "non-finite" in res.state.divergence_reason
    log = [json.loads(line) for line in open(res.log_path)]
    assert [r["diverged"] for r in log] == [False] * 4 + [True]
    assert (tmp_path / "bad.final.ckpt").exists()


def test_gradient_threshold_divergence(toy_data):
    res = run_training(_cfg(total_steps=10, divergence_grad_threshold=0.0, divergence_patience=3), TOY, PLANS["c"],
                       toy_data.samples)
    # step 0 has zero gradients everywhere except the output layer; the run stops after three large steps
    assert res.diverged and res.state.step <= 4


def test_phase_switch(toy_data, tmp_path):
    res = run_training(_cfg(total_steps=100, coarse_fraction=0.5), TOY, PLANS["c"], toy_data.samples,
                       out_dir=str(tmp_path))
    phases = [h["phase"] for h in res.state.history]
    assert phases.index("fine") == 50 and phases.count("coarse") == 50
    assert set(res.checkpoints) == {"phase_boundary", "final"}
    from freqid.checkpoint import load_checkpoint

    assert load_checkpoint(res.checkpoints["phase_boundary"])[0]["step"] == 50
    off = run_training(_cfg(total_steps=3, use_cft=False), TOY, PLANS["c"], toy_data.samples)
    assert [h["phase"] for h in off.state.history] == ["fine"] * 3


def test_lfe_gradients_by_phase(toy_data):
    cfg = _cfg(total_steps=4, coarse_fraction=0.5)
    sched = NoiseSchedule()
    model = assemble(PLANS["c"], TOY)
    state = init_state(model, cfg, sched)
    # move the zero-initialised layers off zero so gradients reach the extractors
    with torch.no_grad():
        for p in model.parameters():
            if p.ndim >= 2 and p.abs().max() == 0:
                p.normal_(0.0, 0.05)
    state.step = 0
    loss, _ = compute_loss(state, make_batch(toy_data.samples, cfg, 0, sched))
    loss.backward()
    lfe = list(model.lfe_parameters())
    assert lfe and all(p.grad is None or not p.grad.any() for p in lfe)
    model.zero_grad(set_to_none=True)
    state.step = 2
    loss, _ = compute_loss(state, make_batch(toy_data.samples, cfg, 2, sched))
    loss.backward()
    assert any(p.grad is not None and p.grad.abs().max() > 0 for p in lfe)
    assert not any(p.grad is not None for p in model.towers.parameters())


def test_checkpoint_round_trip(toy_data, tmp_path):
    res = run_training(_cfg(total_steps=5), TOY, PLANS["c"], toy_data.samples)
    path = str(tmp_path / "m.ckpt")
    save_model(path, res.state.model)
    loaded, header = load_model(path)
    assert header["plan"] == {"low_freq": True, "keypoints": True, "hf_site": "inner"}
    batch = make_batch(toy_data.samples, _cfg(), 0, NoiseSchedule())
    with torch.no_grad():
        a = res.state.model.eval()(batch.x0, batch.t, batch.tokens, batch.null, batch.cond)
        b = loaded(batch.x0, batch.t, batch.tokens, batch.null, batch.cond)
    assert torch.equal(a, b)


def test_full_objective_gradient(toy_data):
    cfg = _cfg(total_steps=4, coarse_fraction=0.0, batch_size=2)
    tiny = ModelConfig(dit=DiTConfig(depth=1, model_dim=16, heads=2, frames=2, height=16, width=16), n_queries=2,
                       token_drop=0.0)
    sched = NoiseSchedule()
    model = assemble(PLANS["c"], tiny).double()
    randomize_(model, 0.3)
    state = init_state(model, cfg, sched)
    model.eval()
    state.step = 1

    def loss_fn():
        b = make_batch(toy_data.samples, cfg, 1, sched)
        b.x0, b.eps, b.M = b.x0.double(), b.eps.double(), b.M.double()
        b.cond.ref, b.cond.kps = b.cond.ref.double(), b.cond.kps.double()
        return compute_loss(state, b)[0]

    params = [p for n, p in model.named_parameters() if p.requires_grad and not n.startswith("towers.")]
    assert directional_check(loss_fn, params, n_dirs=2) < 1e-3
