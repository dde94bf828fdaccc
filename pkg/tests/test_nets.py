import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cnpoison import diffusion, gradcore as gc, nets

SMALL = nets.NetConfig(image_size=8, widths=(8, 8, 16), emb_dim=16, num_classes=3, num_timesteps=50)


@pytest.fixture(scope="module")
def pair():
    return nets.build_pair(SMALL, seed=0)


def inputs(seed, n=3, size=8):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, 1, size, size)).astype(np.float32)
    t = rng.integers(1, SMALL.num_timesteps + 1, n)
    y = rng.integers(0, SMALL.num_classes, n)
    c = (rng.random((n, 1, size, size)) > 0.6).astype(np.float32)
    return z, t, y, c


def test_output_shape_matches_input(pair):
    z, t, y, c = inputs(0)
    assert pair.denoise_backbone(z, t, y).shape == z.shape
    assert pair.denoise_combined(z, t, y, c, 0.5).shape == z.shape


def test_untrained_output_finite_for_zero_input(pair):
    for t in (1, 25, 50):
        out = pair.denoise_backbone(np.zeros((1, 1, 8, 8), np.float32), t, 0)
        assert np.isfinite(out.data).all()


def test_backbone_is_deterministic(pair):
    z, t, y, _ = inputs(1)
    with gc.no_grad():
        np.testing.assert_array_equal(pair.denoise_backbone(z, t, y).data, pair.denoise_backbone(z, t, y).data)


@pytest.mark.parametrize("t", [0, 51, -3])
def test_timestep_out_of_range_rejected(pair, t):
    with pytest.raises(ValueError, match="timestep"):
        pair.denoise_backbone(np.zeros((1, 1, 8, 8)), t, 0)


@pytest.mark.parametrize("label", [-1, 3])
def test_label_out_of_range_rejected(pair, label):
    with pytest.raises(ValueError, match="label"):
        pair.denoise_backbone(np.zeros((1, 1, 8, 8)), 5, label)


def test_conditioning_size_mismatch_rejected(pair):
    z, t, y, _ = inputs(2)
    with pytest.raises(ValueError, match="conditioning map"):
        pair.control_residuals(z, t, np.zeros((3, 1, 16, 16)), y)


def test_zero_projections_start_exactly_zero(pair):
    for conv in pair.control.zero:
        assert not conv.weight.data.any() and not conv.bias.data.any()


def test_fresh_residuals_are_zero_and_site_shaped(pair):
    z, t, y, c = inputs(3)
    res = pair.control_residuals(z, t, c, y)
    assert len(res) == len(pair.injection_sites) == len(nets.INJECTION_SITES)
    emb = pair.backbone.embed(t, y)
    feats = pair.backbone.encoder.features(pair.backbone.encoder.stem(gc.Tensor(z)), emb)
    for r, f in zip(res, feats):
        assert r.shape == f.shape
        assert not r.data.any()


def test_control_encoder_starts_as_backbone_copy(pair):
    a, b = pair.backbone.encoder.state_dict(), pair.control.encoder.state_dict()
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([0.0, 0.5, 1.0]))
def test_zero_init_combined_equals_backbone(seed, scale):
    p = nets.build_pair(SMALL, seed=seed % 7)
    z, t, y, c = inputs(seed)
    with gc.no_grad():
        np.testing.assert_array_equal(p.denoise_combined(z, t, y, c, scale).data, p.denoise_backbone(z, t, y).data)


def _trained_branch(steps=2):
    p = nets.build_pair(SMALL, seed=4)
    p.backbone.set_trainable(False)
    digest = p.backbone.digest()
    opt = gc.AdamW(p.control.parameters(), lr=1e-2)
    rng = np.random.default_rng(0)
    x0 = rng.uniform(-1, 1, (4, 1, 8, 8)).astype(np.float32)
    z, t, y, c = inputs(5, n=4)
    sched = diffusion.make_schedule(SMALL.num_timesteps)
    for _ in range(steps):
        loss = diffusion.ldm_loss(p, x0, c, y, rng, sched)
        opt.zero_grad()
        loss.backward()
        opt.step()
    return p, digest


def test_training_step_wakes_residuals_and_keeps_backbone_frozen():
    p, digest = _trained_branch()
    z, t, y, c = inputs(6)
    with gc.no_grad():
        norms = [float(np.linalg.norm(r.data)) for r in p.control_residuals(z, t, c, y)]
    assert max(norms) > 0
    assert p.backbone.digest() == digest


def test_scale_zero_equals_backbone_after_training():
    p, _ = _trained_branch()
    z, t, y, c = inputs(7)
    with gc.no_grad():
        np.testing.assert_array_equal(p.denoise_combined(z, t, y, c, 0.0).data, p.denoise_backbone(z, t, y).data)


def test_output_is_continuous_in_scale():
    p, _ = _trained_branch()
    z, t, y, c = inputs(8)
    with gc.precision(np.float64), gc.no_grad():
        p.backbone.astype(np.float64)
        p.control.astype(np.float64)
        outs = {s: p.denoise_combined(z, t, y, c, s).data for s in (0.3, 0.301, 0.6, 0.601)}
        # Lipschitz constant estimated over a coarse step, checked over a fine one
        lip = np.abs(p.denoise_combined(z, t, y, c, 1.0).data - p.denoise_combined(z, t, y, c, 0.0).data).max()
    for s in (0.3, 0.6):
        assert np.abs(outs[s + 0.001] - outs[s]).max() <= 10 * lip * 1e-3 + 1e-12


def test_non_finite_scale_rejected(pair):
    z, t, y, c = inputs(9)
    with pytest.raises(ValueError, match="finite"):
        pair.denoise_combined(z, t, y, c, float("nan"))


def test_state_dict_round_trip_and_digest():
    a = nets.BackboneDenoiser(SMALL, seed=1)
    b = nets.BackboneDenoiser(SMALL, seed=2)
    assert a.digest() != b.digest()
    b.load_state_dict(a.state_dict())
    assert a.digest() == b.digest()


def test_load_state_dict_rejects_shape_mismatch():
    a = nets.BackboneDenoiser(SMALL, seed=1)
    state = a.state_dict()
    key = next(iter(state))
    state[key] = np.zeros((1, 2, 3))
    with pytest.raises(ValueError):
        a.load_state_dict(state)


def test_mismatched_configs_cannot_pair():
    other = nets.NetConfig(image_size=8, widths=(8, 8, 8), emb_dim=16, num_classes=3, num_timesteps=50)
    with pytest.raises(ValueError, match="configs differ"):
        nets.ModelPair(nets.BackboneDenoiser(SMALL), nets.ControlBranch(other))


def test_timestep_features_are_bounded_and_distinct():
    f = nets.timestep_features(np.arange(1, 251), 64)
    assert f.shape == (250, 64)
    assert np.abs(f).max() <= 1.0
    assert len({row.tobytes() for row in f}) == 250
