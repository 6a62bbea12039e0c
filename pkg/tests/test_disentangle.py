import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nerfad import autodiff as ad
from nerfad import disentangle as dis

CFG = dis.NetConfig(crop=16, n_au=8, channels=4)


@pytest.fixture(scope="module")
def nets():
    return dis.DisentangleNets(CFG, np.random.default_rng(0))


def _batch(rng, b=2, size=16):
    return rng.uniform(0, 1, (b, 3, size, size)), rng.uniform(0, 1, (b, 8))


def test_mask_and_warp_ranges(nets):
    img, au = _batch(np.random.default_rng(1), 3)
    m = dis.mask_generate(nets, img * 10 - 5, au).data
    w = dis.warp_generate(nets, img * 10 - 5, au).data
    assert m.shape == (3, 1, 16, 16) and w.shape == (3, 3, 16, 16)
    assert np.all((m >= 0) & (m <= 1)) and np.all((w >= 0) & (w <= 1))


def test_generators_deterministic(nets):
    img, au = _batch(np.random.default_rng(2))
    assert dis.mask_generate(nets, img, au).data.tobytes() == dis.mask_generate(nets, img, au).data.tobytes()
    assert dis.warp_generate(nets, img, au).data.tobytes() == dis.warp_generate(nets, img, au).data.tobytes()


def test_mask_depends_on_au(nets):
    img, au = _batch(np.random.default_rng(3))
    assert not np.allclose(dis.mask_generate(nets, img, au).data, dis.mask_generate(nets, img, 1 - au).data)


def test_resolution_mismatch(nets):
    with pytest.raises(dis.DisentangleError):
        dis.mask_generate(nets, np.zeros((1, 3, 8, 8)), np.zeros((1, 8)))
    with pytest.raises(dis.DisentangleError):
        dis.au_classify(nets, np.zeros((1, 3, 32, 32)))
    with pytest.raises(dis.DisentangleError):
        dis.critic(nets, np.zeros((1, 1, 16, 16)))


def test_au_length_mismatch(nets):
    with pytest.raises(dis.DisentangleError):
        dis.mask_generate(nets, np.zeros((1, 3, 16, 16)), np.zeros((1, 5)))


def test_crop_multiple_of_eight():
    with pytest.raises(dis.DisentangleError):
        dis.NetConfig(crop=12)


def test_mask_bias_sets_initial_level():
    n = dis.DisentangleNets(CFG, np.random.default_rng(0), mask_bias=-4.0)
    img, au = _batch(np.random.default_rng(4))
    assert dis.mask_generate(n, img, au).data.mean() < 0.2


def test_classifier_and_critic_outputs(nets):
    img, _ = _batch(np.random.default_rng(5), 4)
    p = dis.au_classify(nets, img).data
    s = dis.critic(nets, img).data
    assert p.shape == (4, 8) and np.all((p >= 0) & (p <= 1))
    assert s.shape == (4,) and np.all(np.isfinite(s))


# ---- composite ----

def test_composite_extremes():
    rng = np.random.default_rng(6)
    crop, warp = rng.random((2, 3, 4, 4)), rng.random((2, 3, 4, 4))
    np.testing.assert_array_equal(dis.composite(np.ones((2, 1, 4, 4)), crop, warp).data, crop)
    np.testing.assert_array_equal(dis.composite(np.zeros((2, 1, 4, 4)), crop, warp).data, warp)


def test_composite_half_blend():
    out = dis.composite(np.full((1, 1, 3, 3), 0.5), np.zeros((1, 3, 3, 3)), np.ones((1, 3, 3, 3))).data
    np.testing.assert_array_equal(out, 0.5)


def test_composite_mismatch():
    with pytest.raises(dis.DisentangleError):
        dis.composite(np.ones((1, 1, 4, 4)), np.ones((1, 3, 4, 4)), np.ones((1, 3, 5, 5)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_composite_same_image_reconstructs(seed):
    rng = np.random.default_rng(seed)
    a, img = rng.random((1, 1, 5, 5)), rng.random((1, 3, 5, 5))
    np.testing.assert_allclose(dis.composite(a, img, img).data, img, rtol=0, atol=1e-15)


# ---- losses ----

def test_speech_code_examples():
    z = np.zeros(2)
    assert dis.speech_code_loss(z, z, z, z).item() == 0.0
    assert dis.speech_code_loss(np.array([0.5, 0.0]), z, z, z).item() == 0.25
    a, b = np.array([0.3, 0.9]), np.array([0.6, 0.1])
    assert dis.speech_code_loss(a, b, z, z).item() == dis.speech_code_loss(b, a, z, z).item()


def test_speech_code_length_mismatch():
    with pytest.raises(dis.DisentangleError):
        dis.speech_code_loss(np.zeros(3), np.zeros(2), np.zeros(2), np.zeros(2))


class _FixedGenerator(ad.Module):
    """Stand-in generator with a constant mask and warp."""

    def __init__(self, mask, warp):
        super().__init__()
        self.m, self.w = mask, warp

    def __call__(self, image, au):
        b = ad.as_tensor(image).shape[0]
        return (ad.Tensor(np.broadcast_to(self.m, (b, 1) + self.m.shape[-2:]).copy()),
                ad.Tensor(np.broadcast_to(self.w, (b, 3) + self.w.shape[-2:]).copy()))


class _Nets:
    def __init__(self, gen):
        self.generator = gen


def test_cycle_loss_examples():
    crop = np.full((1, 3, 4, 4), 0.3)
    gen_img = np.full((1, 3, 4, 4), 0.8)
    nets = _Nets(_FixedGenerator(np.ones((4, 4)), np.zeros((4, 4))))
    assert dis.cycle_identity_loss(nets, gen_img, np.zeros((1, 8)), crop).item() == pytest.approx(0.5, abs=1e-15)
    assert dis.cycle_identity_loss(nets, crop, np.zeros((1, 8)), crop).item() == 0.0
    rng = np.random.default_rng(7)
    g, c = rng.random((1, 3, 4, 4)), rng.random((1, 3, 4, 4))
    np.testing.assert_allclose(dis.cycle_identity_loss(nets, g, np.zeros((1, 8)), c).item(), np.abs(g - c).mean())


def test_cycle_loss_blend_to_crop_is_zero():
    crop = np.full((1, 3, 4, 4), 0.3)
    nets = _Nets(_FixedGenerator(np.zeros((4, 4)), np.full((4, 4), 0.3)))
    assert dis.cycle_identity_loss(nets, np.full((1, 3, 4, 4), 0.9), np.zeros((1, 8)), crop).item() == 0.0


class _LinearCriticNets:
    def __init__(self, w):
        self.w = ad.Tensor(np.asarray(w, dtype=float))

    def critic(self, x):
        x = ad.as_tensor(x)
        return ad.tsum(ad.reshape(x, (x.shape[0], -1)) * ad.reshape(self.w, (1, -1)), axis=1)


def test_wgan_symmetric_unit_critic_is_zero():
    w = np.zeros((1, 2, 2))
    w[0, 0, 0] = 1.0
    nets = _LinearCriticNets(w)
    x = np.random.default_rng(8).random((3, 1, 2, 2))
    c, g = dis.wgan_gp_loss(nets, x, x, 10.0, np.random.default_rng(0))
    assert c.item() == 0.0
    np.testing.assert_allclose(g.item(), -nets.critic(x).data.mean())


def test_wgan_linear_penalty():
    w = np.zeros((1, 2, 2))
    w[0, 1, 1] = 2.0
    nets = _LinearCriticNets(w)
    x = np.random.default_rng(9).random((3, 1, 2, 2))
    c, _ = dis.wgan_gp_loss(nets, x, x, 10.0, np.random.default_rng(0))
    np.testing.assert_allclose(c.item(), 10.0, rtol=1e-12)


def test_wgan_lambda_zero_removes_penalty():
    w = np.full((1, 2, 2), 3.0)
    nets = _LinearCriticNets(w)
    rng = np.random.default_rng(10)
    fake, real = rng.random((3, 1, 2, 2)), rng.random((3, 1, 2, 2))
    c, _ = dis.wgan_gp_loss(nets, fake, real, 0.0, np.random.default_rng(0))
    np.testing.assert_allclose(c.item(), nets.critic(fake).data.mean() - nets.critic(real).data.mean(), rtol=0, atol=1e-14)


def test_wgan_errors():
    nets = _LinearCriticNets(np.ones((1, 2, 2)))
    with pytest.raises(dis.DisentangleError):
        dis.wgan_gp_loss(nets, np.zeros((0, 1, 2, 2)), np.zeros((0, 1, 2, 2)), 10.0, np.random.default_rng(0))
    with pytest.raises(dis.DisentangleError):
        dis.wgan_gp_loss(nets, np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 2)), -1.0, np.random.default_rng(0))


# ---- face split ----

def _split_inputs(rng):
    return rng.random((1, 4, 4)), rng.random((3, 4, 4)), rng.random((3, 8, 8)), [2, 3, 4, 4]


def test_split_zero_mask():
    m, crop, frame, rect = _split_inputs(np.random.default_rng(11))
    p = dis.split_faces(np.zeros_like(m), crop, frame, rect)
    np.testing.assert_array_equal(p.audio_face, crop)
    np.testing.assert_array_equal(p.identity_face[:, 3:7, 2:6], 0.0)


def test_split_unit_mask():
    m, crop, frame, rect = _split_inputs(np.random.default_rng(12))
    p = dis.split_faces(np.ones_like(m), crop, frame, rect)
    np.testing.assert_array_equal(p.audio_face, 0.0)
    expect = frame.copy()
    expect[:, 3:7, 2:6] = crop
    np.testing.assert_array_equal(p.identity_face, expect)


def test_split_keeps_pixels_outside_crop():
    m, crop, frame, rect = _split_inputs(np.random.default_rng(13))
    p = dis.split_faces(m, crop, frame, rect)
    outside = np.ones((8, 8), bool)
    outside[3:7, 2:6] = False
    np.testing.assert_array_equal(p.identity_face[:, outside], frame[:, outside])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_split_reconstructs_crop(seed):
    m, crop, frame, rect = _split_inputs(np.random.default_rng(seed))
    p = dis.split_faces(m, crop, frame, rect)
    np.testing.assert_allclose(p.audio_face + p.identity_face[:, 3:7, 2:6], crop, rtol=0, atol=1e-15)


def test_split_rect_out_of_bounds():
    m, crop, frame, _ = _split_inputs(np.random.default_rng(14))
    with pytest.raises(dis.DisentangleError):
        dis.split_faces(m, crop, frame, [6, 6, 4, 4])


def test_sample_targets_keeps_distractors():
    au = np.random.default_rng(15).random((5, 8))
    t = dis.sample_targets(au, 4, np.random.default_rng(0))
    np.testing.assert_array_equal(t[:, 4:], au[:, 4:])
    assert not np.allclose(t[:, :4], au[:, :4])


# ---- training ----

def test_trainer_step_reports_all_terms():
    rng = np.random.default_rng(16)
    crops, au = rng.random((6, 3, 16, 16)), rng.random((6, 8))
    cfg = dis.DisentangleTrainConfig(batch_size=2, n_critic=2, channels=2)
    tr = dis.DisentangleTrainer(crops, au, 4, cfg, np.random.default_rng(0))
    out = tr.step(np.random.default_rng(1))
    assert set(out) == set(dis.DisentangleTrainer.LOSS_TERMS)
    assert all(np.isfinite(v) for v in out.values())


def test_trainer_deterministic():
    rng = np.random.default_rng(17)
    crops, au = rng.random((6, 3, 16, 16)), rng.random((6, 8))
    cfg = dis.DisentangleTrainConfig(batch_size=2, n_critic=1, channels=2)
    runs = []
    for _ in range(2):
        tr = dis.DisentangleTrainer(crops, au, 4, cfg, np.random.default_rng(0))
        r = np.random.default_rng(1)
        runs.append([tr.step(r) for _ in range(2)])
    assert runs[0] == runs[1]
