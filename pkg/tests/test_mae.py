import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deskmae.mae import (MaeConfig, MaeModel, make_mask, make_masks, mae_forward, masked_count, patchify,
                         pixel_targets, unpatchify)
from deskmae.optim import Optimizer, OptimSpec
from deskmae.vit import get_recipe

MICRO = MaeConfig(decoder_width=16, decoder_depth=1, decoder_heads=2)


def test_masked_count_examples():
    assert masked_count(196, 0.75) == 147
    assert masked_count(4, 0.5) == 2
    assert masked_count(10, 0.25) == 3  # 2.5 rounds half up
    assert masked_count(64, 0.75) == 48


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 400), st.floats(0.01, 0.99), st.integers(0, 2 ** 32 - 1))
def test_mask_plan_invariants(n, r, seed):
    k = masked_count(n, r)
    if k < 1 or k >= n:
        with pytest.raises(ValueError):
            make_mask(n, r, seed)
        return
    p = make_mask(n, r, seed)
    assert len(p.ids_mask) == k and p.keep == n - k
    assert np.array_equal(np.sort(np.concatenate([p.ids_keep, p.ids_mask])), np.arange(n))
    assert np.array_equal(p.shuffle[p.ids_restore], np.arange(n))
    assert np.array_equal(p.ids_restore[p.shuffle], np.arange(n))
    assert p.mask.sum() == k and np.all(p.mask[p.ids_mask] == 1)
    q = make_mask(n, r, seed)
    assert np.array_equal(p.shuffle, q.shuffle)


def test_mask_shuffle_is_argsort_of_uniform_noise():
    noise = np.random.default_rng(7).random(10)
    assert np.array_equal(make_mask(10, 0.5, 7).shuffle, np.argsort(noise, kind="stable"))


def test_mask_errors():
    for args in ((1, 0.5, 0), (4, 0.0, 0), (4, 1.0, 0), (4, 0.1, 0)):
        with pytest.raises(ValueError):
            make_mask(*args)


def test_patchify_hand_layout():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    p = patchify(x, 2)
    assert p.shape == (1, 4, 4)
    assert p[0].tolist() == [[0, 1, 4, 5], [2, 3, 6, 7], [8, 9, 12, 13], [10, 11, 14, 15]]


def test_patchify_band_minor_and_single_patch():
    x = np.arange(8.0).reshape(1, 2, 2, 2)
    assert patchify(x, 2)[0, 0].tolist() == [0, 4, 1, 5, 2, 6, 3, 7]
    with pytest.raises(ValueError):
        patchify(np.zeros((1, 1, 5, 5)), 2)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4))
def test_patchify_round_trip(b, c, g, p):
    x = np.random.default_rng(b * 100 + c).standard_normal((b, c, g * p, g * p))
    assert np.array_equal(unpatchify(patchify(x, p), p, c), x)


def test_norm_pix_targets_standardised():
    x = np.random.default_rng(0).random((2, 3, 8, 8)) * 5
    t = pixel_targets(x, 4, True)
    np.testing.assert_allclose(t.mean(-1), 0, atol=1e-12)
    np.testing.assert_allclose(t.var(-1), 1, atol=1e-5)


def _micro(seed=0, dtype=np.float64):
    return MaeModel.build(get_recipe("vit-micro"), MICRO, seed=seed, dtype=dtype)


def test_loss_zero_on_perfect_reconstruction():
    m = _micro()
    x = np.random.default_rng(0).standard_normal((2, 3, 16, 16))
    plan = make_masks(16, 0.75, [1, 2])
    pred, _ = mae_forward(m.encoder, m.decoder, x, plan)
    _, loss = mae_forward(m.encoder, m.decoder, x, plan, targets=pred.data.copy())
    assert loss.item() == 0.0


def test_loss_unit_residual_on_masked_patch():
    # one image, two patches, one masked: residual 1 on it gives loss 1
    r = get_recipe("vit-micro").with_(image=8, patch=4)
    m = MaeModel.build(r, MICRO, dtype=np.float64)
    x = np.random.default_rng(0).standard_normal((1, 3, 8, 8))
    plan = make_mask(4, 0.25, 0)
    pred, _ = mae_forward(m.encoder, m.decoder, x, plan)
    _, loss = mae_forward(m.encoder, m.decoder, x, plan, targets=pred.data - 1.0)
    assert loss.item() == pytest.approx(1.0, abs=1e-12)


def test_loss_ignores_visible_patch_targets():
    m = _micro()
    x = np.random.default_rng(1).standard_normal((2, 3, 16, 16))
    plan = make_masks(16, 0.75, [3, 4])
    base = pixel_targets(x, 4, True)
    _, l0 = mae_forward(m.encoder, m.decoder, x, plan, targets=base)
    bumped = base.copy()
    for i in range(2):
        bumped[i, plan.ids_keep[i]] += 100.0
    _, l1 = mae_forward(m.encoder, m.decoder, x, plan, targets=bumped)
    assert l0.item() == l1.item()


def test_grid_mismatch_rejected():
    m = _micro()
    with pytest.raises(ValueError, match="patches"):
        mae_forward(m.encoder, m.decoder, np.zeros((1, 3, 16, 16)), make_mask(9, 0.75, 0))


def test_gradients_reach_every_encoder_parameter():
    m = _micro()
    x = np.random.default_rng(2).standard_normal((2, 3, 16, 16))
    m.loss(x, make_masks(16, 0.75, [5, 6])).backward()
    for name, p in m.encoder.named_parameters():
        assert p.grad is not None and np.any(p.grad != 0), name


def test_fixed_batch_loss_decreases():
    m = _micro(dtype=np.float32)
    x = np.random.default_rng(3).random((8, 3, 16, 16)).astype(np.float32)
    plan = make_masks(16, 0.75, range(8))
    opt = Optimizer(list(m.named_parameters()), OptimSpec("adamw", base_lr=1e-3, betas=(0.9, 0.95)))
    losses = []
    for _ in range(20):
        m.zero_grad()
        loss = m.loss(x, plan)
        loss.backward()
        opt.step(1e-3)
        losses.append(loss.item())
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_decoder_scaling():
    assert MaeConfig() == MaeConfig(0.75, 512, 8, 16, True)
    assert MaeConfig.scaled_for(1024) == MaeConfig()
    s = MaeConfig.scaled_for(128)
    assert (s.decoder_width, s.decoder_depth, s.decoder_heads) == (64, 1, 2)
    with pytest.raises(ValueError):
        MaeConfig(mask_ratio=1.0)
