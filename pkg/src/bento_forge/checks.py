"""Registered gradient checks, grouped by module.

Each runner draws its inputs from ``seed`` and returns a report; inputs are
kept away from kinks (ReLU zero, clamp edges, pixel boundaries) so central
differences are meaningful.
"""

from __future__ import annotations

import numpy as np

from . import nn
from . import tensor as T
from .gradcheck import GradCheckReport, finite_diff_check, register, tensor_gradcheck
from .tensor import Tensor

TOL = 1e-4
CHAIN_TOL = 1e-3


def _rng(seed: int, salt: int) -> np.random.Generator:
    return np.random.default_rng([seed, salt])


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.uniform(margin, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _randomize(module: nn.Module, rng, scale=0.4):
    for p in module.parameters():
        p.data[...] = rng.normal(scale=scale, size=p.shape)


# -- tensor core ----------------------------------------------------------


@register("tensor", "elementwise_broadcast")
def _elementwise(seed: int) -> GradCheckReport:
    r = _rng(seed, 1)
    a, b, c = r.normal(size=(3, 4)), r.uniform(0.5, 2.0, size=(4,)), r.normal(size=(3, 1))
    return finite_diff_check(lambda x, y, z: (x * y - z) / y + x * 0.5, [a, b, c], TOL, points=None)


@register("tensor", "unary")
def _unary(seed: int) -> GradCheckReport:
    r = _rng(seed, 2)
    x = _away_from_zero(r, (5, 3))

    def f(t):
        pos = T.absolute(t) + 0.5
        return T.sigmoid(t) + T.tanh(t) * T.exp(t * 0.3) + T.log(pos) + T.leaky_relu(t, 0.2) + T.square(t) + T.clip(t, -2.0, 2.0)

    return finite_diff_check(f, [x], TOL, points=None)


@register("tensor", "reductions_and_shapes")
def _reductions(seed: int) -> GradCheckReport:
    r = _rng(seed, 3)
    x = r.normal(size=(2, 3, 4))

    def f(t):
        s = t.sum(axis=1) * t.mean(axis=(0, 2)).reshape(1, 3).sum()
        u = t.transpose((2, 0, 1)).reshape(4, 6)
        return T.concat([s, u[:2, :4]], axis=0) + T.stack([t[0, 0], t[1, 2]], axis=0).mean()

    return finite_diff_check(f, [x], TOL, points=None)


@register("tensor", "indexing")
def _indexing(seed: int) -> GradCheckReport:
    r = _rng(seed, 4)
    table, x = r.normal(size=(6, 3)), r.normal(size=(4, 5))
    ids = np.array([[0, 2], [2, 5]])
    return finite_diff_check(lambda t, y: T.take_rows(t, ids).sum(axis=1) * y[[0, 3, 3], 1:4].sum(), [table, x], TOL, points=None)


@register("tensor", "matmul")
def _matmul(seed: int) -> GradCheckReport:
    r = _rng(seed, 5)
    return finite_diff_check(T.matmul, [r.normal(size=(3, 4)), r.normal(size=(4, 2))], TOL, points=None)


@register("tensor", "conv2d")
def _conv(seed: int) -> GradCheckReport:
    r = _rng(seed, 6)
    x, w, b = r.normal(size=(2, 3, 6, 6)), r.normal(size=(4, 3, 4, 4)), r.normal(size=4)
    return finite_diff_check(lambda a, k, c: T.conv2d(a, k, c, stride=2, padding=1), [x, w, b], TOL, points=25)


@register("tensor", "resample_and_softmax")
def _resample(seed: int) -> GradCheckReport:
    r = _rng(seed, 7)
    x = r.normal(size=(2, 4, 4))
    return finite_diff_check(
        lambda t: T.avg_pool(T.upsample_nearest(t, 2) * T.upsample_nearest(t, 2), 2) + T.log_softmax(t, axis=-1),
        [x],
        TOL,
        points=None,
    )


# -- nn blocks ------------------------------------------------------------


@register("nn", "linear")
def _linear(seed: int) -> GradCheckReport:
    r = _rng(seed, 10)
    lin = nn.Linear(3, 4, r)
    _randomize(lin, r)
    x = Tensor(r.normal(size=(5, 3)), requires_grad=True)
    return tensor_gradcheck(lambda: T.tanh(lin(x)), [x] + lin.parameters(), TOL, points=None)


@register("nn", "conv_layer")
def _conv_layer(seed: int) -> GradCheckReport:
    r = _rng(seed, 11)
    conv = nn.Conv2d(2, 3, 3, r, padding=1)
    _randomize(conv, r)
    x = Tensor(r.normal(size=(2, 5, 5)), requires_grad=True)
    return tensor_gradcheck(lambda: T.tanh(conv(x)), [x] + conv.parameters(), TOL, points=15)


@register("nn", "channel_attention")
def _channel_attention(seed: int) -> GradCheckReport:
    r = _rng(seed, 12)
    mod = nn.ChannelAttention(4, r)
    _randomize(mod, r)
    x = Tensor(r.normal(size=(2, 4, 3, 3)), requires_grad=True)
    return tensor_gradcheck(lambda: mod(x), [x] + mod.parameters(), TOL, points=None)


@register("nn", "spatial_attention")
def _spatial_attention(seed: int) -> GradCheckReport:
    r = _rng(seed, 13)
    mod = nn.SpatialAttention(4, r)
    _randomize(mod, r)
    x = Tensor(r.normal(size=(2, 4, 3, 3)), requires_grad=True)
    return tensor_gradcheck(lambda: mod(x), [x] + mod.parameters(), TOL, points=None)


@register("nn", "text_embedding")
def _text_embedding(seed: int) -> GradCheckReport:
    r = _rng(seed, 14)
    emb = nn.TextEmbedder(8, 3, r)
    caps = [[1, 2, 2], [7], []]
    return tensor_gradcheck(lambda: T.tanh(emb.embed_batch(caps)), emb.parameters(), TOL, points=None)


@register("nn", "image_encoder")
def _image_encoder(seed: int) -> GradCheckReport:
    r = _rng(seed, 15)
    enc = nn.ImageEncoder(8, 5, r)
    _randomize(enc, r, 0.3)
    x = Tensor(r.normal(size=(2, 3, 8, 8)), requires_grad=True)
    return tensor_gradcheck(lambda: enc(x), [x] + enc.parameters(), TOL, points=12)


# -- spatial transformer --------------------------------------------------


def _random_theta(r, batch=()):
    theta = np.broadcast_to(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]), batch + (2, 3)).copy()
    return theta + r.uniform(-0.25, 0.25, size=batch + (2, 3))


@register("stn", "warp_theta_and_image")
def _warp(seed: int) -> GradCheckReport:
    from .stn import affine_grid, bilinear_sample

    r = _rng(seed, 20)
    theta, img = _random_theta(r, (2,)), r.normal(size=(2, 3, 5, 6))
    return finite_diff_check(lambda th, im: bilinear_sample(im, affine_grid(th, 4, 5)), [theta, img], TOL, points=30)


@register("stn", "boxes_to_theta")
def _boxes(seed: int) -> GradCheckReport:
    from .stn import boxes_to_theta

    r = _rng(seed, 21)
    boxes = np.concatenate([r.uniform(0.2, 0.8, (3, 2)), r.uniform(0.2, 0.9, (3, 2))], axis=1)
    return finite_diff_check(boxes_to_theta, [boxes], TOL, points=None)


@register("stn", "stn_loss")
def _stn_loss(seed: int) -> GradCheckReport:
    from .stn import affine_grid, bilinear_sample, stn_loss

    r = _rng(seed, 22)
    theta, img = _random_theta(r), r.normal(size=(4, 6, 6))
    target = r.normal(size=(4, 6, 6))
    return finite_diff_check(lambda th: stn_loss(bilinear_sample(Tensor(img), affine_grid(th, 6, 6)), target), [theta], TOL, points=None)


# -- GAN losses -----------------------------------------------------------


@register("gan", "bce_terms")
def _bce(seed: int) -> GradCheckReport:
    from .layout import gan_terms

    r = _rng(seed, 30)

    def f(real, fake):
        g, d = gan_terms(real, fake)
        return g * 0.7 + d

    return finite_diff_check(f, [r.uniform(0.05, 0.95, 4), r.uniform(0.05, 0.95, 4)], TOL, points=None)


@register("gan", "stage_adversarial")
def _stage(seed: int) -> GradCheckReport:
    from .t2i import StageConfig, T2IModels, stage_adversarial_losses

    r = _rng(seed, 31)
    models = T2IModels(r, StageConfig(resolutions=(8,), channels=(4,), text_dim=4, z_dim=2))
    _randomize(models.discriminators[0], r, 0.2)
    fake, real = r.uniform(-1, 1, (2, 3, 8, 8)), r.uniform(-1, 1, (2, 3, 8, 8))
    text, wrong = r.normal(size=(2, 4)), r.normal(size=(2, 4))

    def f(fk, tx):
        g, d = stage_adversarial_losses(fk, Tensor(real), tx, Tensor(wrong), models, 0)
        return g + d * 0.5

    return finite_diff_check(f, [fake, text], TOL, points=20)


@register("gan", "identity_and_cycle")
def _id_cycle(seed: int) -> GradCheckReport:
    from .t2i import cycle_loss, identity_loss

    r = _rng(seed, 32)
    gen, gt = r.normal(size=(3, 4, 4)), r.normal(size=(3, 4, 4))
    logits = r.normal(size=(2, 5, 7))
    target = np.array([[4, 5, 3, 0, 0], [6, 2, 2, 3, 0]])
    return finite_diff_check(lambda g, lg: identity_loss(g, gt) + cycle_loss(lg, target), [gen, logits], TOL, points=None)


# -- layout and the full composition chain --------------------------------


def _tiny_layout(seed: int, salt: int):
    from .layout import CompositionModels, LayoutConfig

    r = _rng(seed, salt)
    cfg = LayoutConfig(z_dim=4, canvas=16, hidden=6)
    models = CompositionModels(r, cfg)
    return r, models


@register("layout", "layout_discriminator_boxes")
def _layout_disc(seed: int) -> GradCheckReport:
    r, models = _tiny_layout(seed, 40)
    _randomize(models.d_layout, r, 0.5)
    cats = np.array([[0, 4, 5], [0, 2, 3]])
    boxes = r.uniform(0.2, 0.8, (2, 3, 4))
    return finite_diff_check(lambda b: models.d_layout(b, cats), [boxes], TOL, points=None)


@register("layout", "layout_generator_params")
def _layout_gen(seed: int) -> GradCheckReport:
    r, models = _tiny_layout(seed, 41)
    _randomize(models.g_layout, r, 0.3)
    cats = np.array([[0, 1]])
    noise = Tensor(r.normal(size=(1, 4)))
    return tensor_gradcheck(lambda: models.g_layout(cats, noise), models.g_layout.parameters(), TOL, points=6)


@register("layout", "composition_chain")
def _chain(seed: int) -> GradCheckReport:
    """l_total back to the composition net and layout generator parameters."""
    from .layout import bce_real, category_counts, render

    r, models = _tiny_layout(seed, 42)
    _randomize(models.g_comp, r, 0.05)
    cats = np.array([[0, 1]])
    cutouts = r.uniform(0.1, 0.9, (1, 2, 4, 16, 16))
    backgrounds = r.uniform(0.0, 1.0, (1, 3, 16, 16))
    targets = r.uniform(0.0, 1.0, (1, 2, 4, 16, 16))
    noise = Tensor(r.normal(size=(1, 4)))

    def loss():
        from .layout import warp_items

        boxes = models.g_layout(cats, noise)
        scene = render(models, cats, boxes, cutouts, backgrounds)
        l_layout = bce_real(models.d_layout(boxes, cats))
        l_image = bce_real(models.d_image(scene, category_counts(cats)))
        theta = models.g_comp(boxes, cats)
        l_stn = T.absolute(warp_items(cutouts, theta, 16, 16) - Tensor(targets)).mean()
        return l_layout + l_image + l_stn

    params = models.g_comp.parameters() + [models.g_layout.head2.weight, models.g_layout.head2.bias]
    # head2 moves every sample point at once, and bilinear sampling is only
    # piecewise smooth; a smaller step keeps perturbations inside one cell
    return tensor_gradcheck(loss, params, CHAIN_TOL, h=1e-6, points=8)
