"""Finite-difference checks for every differentiable operation, loss and network.

Each case draws one random point from ``rng`` and returns the max relative
error of its analytic gradient against central differences (h = 1e-5).
"""

from __future__ import annotations

import numpy as np

from nerfad import autodiff as ad
from nerfad import disentangle as dis
from nerfad import fusion as fus
from nerfad import nerf
from nerfad.autodiff import Tensor, grad_check

H = 1e-5
N_POINTS = 10
TOL = 1e-4
MAX_REDRAWS = 50


class KinkCrossed(Exception):
    """A finite-difference step moved some relu/leaky-relu/abs input across zero."""


class _KinkGuard:
    """Records the sign pattern of every piecewise-linear op input during a forward pass."""

    WRAPPED = ("relu", "leaky_relu", "tabs")

    def __init__(self):
        self.trace = None

    def install(self):
        self.orig = {n: getattr(ad, n) for n in self.WRAPPED}
        for n, fn in self.orig.items():
            setattr(ad, n, self._wrap(fn))

    def remove(self):
        for n, fn in self.orig.items():
            setattr(ad, n, fn)

    def _wrap(self, fn):
        def wrapped(a, *args, **kw):
            if self.trace is not None:
                self.trace.append(np.signbit(ad.as_tensor(a).data).tobytes())
            return fn(a, *args, **kw)

        return wrapped

    def signature(self, run):
        self.trace = []
        try:
            value = run()
            return value, b"".join(self.trace)
        finally:
            self.trace = None


GUARD = _KinkGuard()


def _guarded(fn):
    """Wrap a scalar function so evaluations on the other side of a kink raise."""
    base = {}

    def f(v):
        value, sig = GUARD.signature(lambda: fn(v))
        if "sig" not in base:
            base["sig"] = sig
        elif sig != base["sig"]:
            raise KinkCrossed
        return value

    return f


def input_check(build, x: np.ndarray, coords=None) -> float:
    """Gradient of scalar ``build(Tensor)`` with respect to its input."""

    def raw(v):
        return build(Tensor(v)).item()

    f = _guarded(raw)
    f(np.array(x, dtype=np.float64))

    def g(v):
        t = Tensor(v, requires_grad=True)
        return ad.grad(build(t), [t])[0].data

    return grad_check(f, g, x, H, coords)


def weighted(op):
    """Scalar probe ``sum(op(x) * R)`` with a fixed random ``R``."""

    def make(rng, x):
        out = op(Tensor(x))
        r = rng.standard_normal(out.shape)
        return lambda t: ad.tsum(op(t) * Tensor(r))

    return make


def param_check(module, loss_fn, rng, n_params: int = 2, n_coords: int = 4) -> float:
    """Gradient of ``loss_fn()`` w.r.t. random coordinates of random parameters."""
    params = dict(module.named_parameters())
    names = sorted(params)
    picked = rng.choice(len(names), size=min(n_params, len(names)), replace=False)
    grads = ad.module_grads(module, loss_fn())
    worst = 0.0
    for k in picked:
        name = names[k]
        p = params[name]
        orig = p.data.copy()
        coords = rng.choice(p.size, size=min(n_coords, p.size), replace=False)

        def raw(v, p=p):
            p.data[...] = v
            return loss_fn().item()

        f = _guarded(raw)
        try:
            f(orig.copy())
            err = grad_check(f, lambda v, n=name: grads[n], orig.copy(), H, coords)
        finally:
            p.data[...] = orig
        worst = max(worst, err)
    return worst


# ---- primitive ops --------------------------------------------------------------

def _unary(op, lo=-2.0, hi=2.0, shape=(3, 4)):
    def case(rng):
        x = rng.uniform(lo, hi, shape)
        return input_check(weighted(op)(rng, x), x)

    return case


def _binary(op, sa, sb):
    def case(rng):
        a = rng.uniform(0.5, 2.0, sa)
        b = rng.uniform(0.5, 2.0, sb)
        r = rng.standard_normal(op(Tensor(a), Tensor(b)).shape)
        ea = input_check(lambda t: ad.tsum(op(t, Tensor(b)) * Tensor(r)), a)
        eb = input_check(lambda t: ad.tsum(op(Tensor(a), t) * Tensor(r)), b)
        return max(ea, eb)

    return case


def _affine(rng):
    x, w, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2)), rng.standard_normal(2)
    r = rng.standard_normal((3, 2))
    probe = lambda x, w, b: ad.tsum(ad.affine(x, w, b) * Tensor(r))
    return max(input_check(lambda t: probe(t, w, b), x), input_check(lambda t: probe(x, t, b), w),
               input_check(lambda t: probe(x, w, t), b))


def _conv_input(op, shape):
    def case(rng):
        x = rng.standard_normal(shape)
        return input_check(weighted(op)(rng, x), x)

    return case


def _double_backward(rng):
    """Gradient penalty of a two-layer tanh critic w.r.t. its parameters."""
    critic = ad.Module()
    critic.l1 = ad.Linear(5, 6, rng)
    critic.l2 = ad.Linear(6, 1, rng)
    fn = lambda x: ad.reshape(critic.l2(ad.tanh(critic.l1(x))), (x.shape[0],))
    x = rng.standard_normal((4, 5))
    return param_check(critic, lambda: ad.gradient_penalty(fn, Tensor(x, requires_grad=True), 10.0), rng)


def _gradient_norm_input(rng):
    critic = ad.Module()
    critic.l1 = ad.Linear(3, 5, rng)
    critic.l2 = ad.Linear(5, 1, rng)
    fn = lambda x: ad.reshape(critic.l2(ad.softplus(critic.l1(x))), (x.shape[0],))
    x = rng.standard_normal((2, 3))
    return input_check(lambda t: ad.tsum(ad.input_gradient_norm(fn, t)), x)


OPS = {
    "add": _binary(lambda a, b: a + b, (3, 4), (4,)),
    "sub": _binary(lambda a, b: a - b, (3, 4), (3, 1)),
    "mul": _binary(lambda a, b: a * b, (3, 4), (3, 4)),
    "div": _binary(lambda a, b: a / b, (3, 4), (1, 4)),
    "matmul": _binary(ad.matmul, (3, 4), (4, 2)),
    "affine": _affine,
    "neg": _unary(lambda t: -t),
    "pow": _unary(lambda t: ad.power(t, 3.0), 0.2, 2.0),
    "square": _unary(ad.square),
    "exp": _unary(ad.exp),
    "log": _unary(ad.log, 0.2, 3.0),
    "sqrt": _unary(ad.sqrt, 0.2, 3.0),
    "relu": _unary(ad.relu),
    "leaky_relu": _unary(lambda t: ad.leaky_relu(t, 0.2)),
    "sigmoid": _unary(ad.sigmoid),
    "tanh": _unary(ad.tanh),
    "softplus": _unary(ad.softplus),
    "sin": _unary(ad.sin),
    "cos": _unary(ad.cos),
    "abs": _unary(ad.tabs),
    "reshape": _unary(lambda t: ad.reshape(t, (2, 6))),
    "transpose": _unary(lambda t: ad.transpose(t, (1, 0))),
    "getitem": _unary(lambda t: t[1:, ::2]),
    "concat": _unary(lambda t: ad.concat([t, ad.square(t)], axis=0)),
    "broadcast_to": _unary(lambda t: ad.broadcast_to(t, (2, 3, 4))),
    "sum": _unary(lambda t: ad.tsum(ad.square(t), axis=1)),
    "mean": _unary(lambda t: ad.mean(ad.square(t), axis=0, keepdims=True)),
    "cumsum": _unary(lambda t: ad.cumsum(t, axis=-1)),
    "mask_mul": _unary(lambda t: ad.mask_mul(t, np.tile([1.0, 0.0], (3, 2)))),
    "im2col": _conv_input(lambda t: ad.im2col(t, 3, 2, 1), (2, 6, 6, 2)),
    "col2im": _conv_input(lambda t: ad.col2im(t, (2, 6, 6, 2), 3, 2, 1), (18, 18)),
    "upsample2": _conv_input(ad.upsample2, (2, 3, 3, 2)),
    "sumpool2": _conv_input(ad.sumpool2, (2, 4, 4, 2)),
    "double_backward": _double_backward,
    "input_gradient_norm": _gradient_norm_input,
}


# ---- losses ---------------------------------------------------------------------

def _small_dnets(rng):
    return dis.DisentangleNets(dis.NetConfig(crop=16, n_au=4, channels=3), rng)


def _speech_code(rng):
    g, t, c, o = (rng.uniform(0, 1, (3, 4)) for _ in range(4))
    e1 = input_check(lambda x: dis.speech_code_loss(x, t, c, o), g)
    e2 = input_check(lambda x: dis.speech_code_loss(g, t, x, o), c)
    return max(e1, e2)


def _cycle(rng):
    nets = _small_dnets(rng)
    gen = rng.uniform(0, 1, (2, 3, 16, 16))
    crop = rng.uniform(0, 1, (2, 3, 16, 16))
    au = rng.uniform(0, 1, (2, 4))
    coords = rng.choice(gen.size, 8, replace=False)
    e1 = input_check(lambda x: dis.cycle_identity_loss(nets, x, au, crop), gen, coords)
    e2 = param_check(nets.generator, lambda: dis.cycle_identity_loss(nets, gen, au, crop), rng)
    return max(e1, e2)


def _wgan(rng):
    nets = _small_dnets(rng)
    fake = rng.uniform(0, 1, (2, 3, 16, 16))
    real = rng.uniform(0, 1, (2, 3, 16, 16))
    seed = int(rng.integers(1 << 31))
    loss = lambda: dis.wgan_gp_loss(nets, fake, real, 10.0, np.random.default_rng(seed))[0]
    e1 = param_check(nets.critic, loss, rng)
    coords = rng.choice(fake.size, 6, replace=False)
    e2 = input_check(lambda x: dis.wgan_gp_loss(nets, x, real, 0.0, np.random.default_rng(seed))[1], fake, coords)
    return max(e1, e2)


def _au_case(fn):
    def case(rng):
        x_hat = rng.uniform(0.05, 0.95, (3, 8))
        x = (rng.random((3, 8)) < 0.5).astype(float)
        w = fus.au_weights(rng.uniform(0.05, 1.0, 8))
        return input_check(lambda t: fn(t, x, w), x_hat)

    return case


def _reconstruction(rng):
    a = rng.uniform(0, 1, (2, 3, 4, 4))
    b = rng.uniform(0, 1, (2, 3, 4, 4))
    return input_check(lambda t: fus.reconstruction_loss(t, b), a)


def _photometric(rng):
    a = rng.uniform(0, 1, (5, 3))
    b = rng.uniform(0, 1, (5, 3))
    return input_check(lambda t: nerf.photometric_loss(t, b), a)


def _composite(rng):
    m = rng.uniform(0, 1, (2, 1, 4, 4))
    c = rng.uniform(0, 1, (2, 3, 4, 4))
    w = rng.uniform(0, 1, (2, 3, 4, 4))
    r = rng.standard_normal((2, 3, 4, 4))
    probe = lambda out: ad.tsum(out * Tensor(r))
    return max(
        input_check(lambda t: probe(dis.composite(t, c, w)), m),
        input_check(lambda t: probe(dis.composite(m, t, w)), c),
        input_check(lambda t: probe(dis.composite(m, c, t)), w),
    )


LOSSES = {
    "speech_code_loss": _speech_code,
    "cycle_identity_loss": _cycle,
    "wgan_gp_loss": _wgan,
    "bce_loss": _au_case(fus.bce_loss),
    "dice_loss": _au_case(fus.dice_loss),
    "au_loss": _au_case(fus.au_loss),
    "reconstruction_loss": _reconstruction,
    "photometric_loss": _photometric,
    "composite": _composite,
}


# ---- rendering ----------------------------------------------------------------------

SMALL_FIELD = nerf.FieldConfig(pos_freqs=2, dir_freqs=1, width=8, depth=2, color_width=6, id_dim=3, aud_dim=2)


def _field_eval(rng):
    field = nerf.RadianceField(SMALL_FIELD, rng)
    l = rng.uniform(-1, 1, (4, 3))
    d = rng.standard_normal((4, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    cond = rng.standard_normal(5)
    r = rng.standard_normal((4, 4))

    def probe(c):
        rgb, sigma = nerf.field_eval(field, l, d, c)
        return ad.tsum(ad.concat([rgb, ad.reshape(sigma, (4, 1))], axis=1) * Tensor(r))

    return max(input_check(probe, cond), param_check(field, lambda: probe(cond), rng))


def _volume_render(rng):
    t = np.sort(rng.uniform(0.1, 2.0, (3, 6)), axis=1)
    sigma = rng.uniform(0.0, 3.0, (3, 6))
    rgb = rng.uniform(0, 1, (3, 6, 3))
    bg = rng.uniform(0, 1, 3)
    r = rng.standard_normal((3, 3))
    probe = lambda s, c: ad.tsum(nerf.volume_render(t, s, c, bg, 2.5) * Tensor(r))
    return max(input_check(lambda s: probe(s, rgb), sigma), input_check(lambda c: probe(sigma, c), rgb))


def _render_photometric(rng):
    """Field + stratified sampling + compositing + photometric loss on a 2x2 image."""
    from nerfad.rays import CameraModel

    field = nerf.RadianceField(SMALL_FIELD, rng)
    cam = CameraModel.look_at([0, 0, 3], [0, 0, 0], [0, 1, 0], focal=2.0, width=2, height=2)
    dirs = cam.all_directions()
    cond = rng.standard_normal((4, 5))
    target = rng.uniform(0, 1, (4, 3))
    seed = int(rng.integers(1 << 31))

    def loss():
        c = nerf.render_rays(field, cam.translation, dirs, cond, 1.0, 5.0, 8, np.random.default_rng(seed),
                             np.zeros(3))
        return nerf.photometric_loss(c, target)

    return param_check(field, loss, rng, n_params=3)


RENDER = {
    "field_eval": _field_eval,
    "volume_render": _volume_render,
    "render_photometric": _render_photometric,
}


# ---- networks ------------------------------------------------------------------------

def _net_case(build):
    """``build(rng) -> (module, loss_fn, input array, input loss builder)``."""

    def case(rng):
        module, loss_fn, x, in_loss = build(rng)
        e = param_check(module, loss_fn, rng)
        coords = rng.choice(x.size, 6, replace=False)
        return max(e, input_check(in_loss, x, coords))

    return case


def _probe(shape, rng):
    r = rng.standard_normal(shape)
    return lambda out: ad.tsum(out * Tensor(r))


def _mask_gen(rng):
    nets = _small_dnets(rng)
    img, au = rng.uniform(0, 1, (2, 3, 16, 16)), rng.uniform(0, 1, (2, 4))
    p = _probe((2, 1, 16, 16), rng)
    return nets.generator, lambda: p(dis.mask_generate(nets, img, au)), img, lambda t: p(dis.mask_generate(nets, t, au))


def _warp_gen(rng):
    nets = _small_dnets(rng)
    img, au = rng.uniform(0, 1, (2, 3, 16, 16)), rng.uniform(0, 1, (2, 4))
    p = _probe((2, 3, 16, 16), rng)
    return nets.generator, lambda: p(dis.warp_generate(nets, img, au)), img, lambda t: p(dis.warp_generate(nets, t, au))


def _classifier(rng):
    nets = _small_dnets(rng)
    img = rng.uniform(0, 1, (2, 3, 16, 16))
    p = _probe((2, 4), rng)
    return nets.classifier, lambda: p(dis.au_classify(nets, img)), img, lambda t: p(dis.au_classify(nets, t))


def _critic(rng):
    nets = _small_dnets(rng)
    img = rng.uniform(0, 1, (2, 3, 16, 16))
    p = _probe((2,), rng)
    return nets.critic, lambda: p(dis.critic(nets, img)), img, lambda t: p(dis.critic(nets, t))


def _small_fnets(rng):
    return fus.FusionNets(fus.FusionConfig(crop=16, frame=16, audio_dim=4, channels=3), rng)


def _encoder(rng):
    nets = _small_fnets(rng)
    img = rng.uniform(0, 1, (2, 3, 16, 16))
    p = _probe((2, fus.FEATURE_DIM), rng)
    return nets.e_a, lambda: p(fus.encode_audio_face(nets, img)), img, lambda t: p(fus.encode_audio_face(nets, t))


def _decoder(rng):
    nets = _small_fnets(rng)
    f, a = rng.uniform(-1, 1, (2, fus.FEATURE_DIM)), rng.standard_normal((2, 4))
    p = _probe((2, 3, 16, 16), rng)
    return nets.decoder, lambda: p(fus.fuse_decode(nets, f, a)), f, lambda t: p(fus.fuse_decode(nets, t, a))


def _fusion_chain(rng):
    nets = _small_fnets(rng)
    img, a = rng.uniform(0, 1, (2, 3, 16, 16)), rng.standard_normal((2, 4))
    p = _probe((2, fus.FEATURE_DIM), rng)
    chain = lambda x: p(fus.feature_encode(nets, fus.fuse_decode(nets, fus.encode_audio_face(nets, x), a)))
    return nets, lambda: chain(img), img, chain


def _identity(rng):
    nets = _small_fnets(rng)
    img = rng.uniform(0, 1, (2, 3, 16, 16))
    p = _probe((2, fus.FEATURE_DIM), rng)
    return nets.e_id, lambda: p(fus.identity_feature(nets, img)), img, lambda t: p(fus.identity_feature(nets, t))


def _field_net(rng):
    field = nerf.RadianceField(SMALL_FIELD, rng)
    pos = rng.uniform(-1, 1, (3, 4, 3))
    d = rng.standard_normal((3, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    cond = rng.standard_normal((3, 5))
    r = rng.standard_normal((3, 4, 4))

    def probe(c):
        rgb, sigma = field(pos, d, c)
        return ad.tsum(ad.concat([rgb, ad.reshape(sigma, (3, 4, 1))], axis=2) * Tensor(r))

    return field, lambda: probe(cond), cond, probe


NETWORKS = {
    "mask_generator": _net_case(_mask_gen),
    "warp_generator": _net_case(_warp_gen),
    "au_classifier": _net_case(_classifier),
    "critic": _net_case(_critic),
    "audio_face_encoder": _net_case(_encoder),
    "fusion_decoder": _net_case(_decoder),
    "fusion_chain": _net_case(_fusion_chain),
    "identity_encoder": _net_case(_identity),
    "radiance_field": _net_case(_field_net),
}

ALL_CASES = {**OPS, **LOSSES, **RENDER, **NETWORKS}


def check_point(fn, rng) -> float:
    """Error at one random point; points whose FD stencil straddles a kink are redrawn."""
    GUARD.install()
    try:
        for _ in range(MAX_REDRAWS):
            try:
                return fn(rng)
            except KinkCrossed:
                continue
    finally:
        GUARD.remove()
    raise RuntimeError("no kink-free point found")


def run_case(name: str, n_points: int = N_POINTS, seed: int = 0) -> float:
    """Worst error of one case over ``n_points`` random points."""
    fn = ALL_CASES[name]
    return max(check_point(fn, np.random.default_rng([seed, k, len(name)])) for k in range(n_points))
