import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bento_forge import captions as cap
from bento_forge import t2i
from bento_forge import tensor as T
from bento_forge.dataset import generate_dataset
from bento_forge.tensor import ShapeError, Tensor

TINY = t2i.StageConfig(resolutions=(4, 8), channels=(8, 4), z_dim=4, text_dim=8, d_channels=4, caption_hidden=16)


def tiny(seed=0, cfg=TINY):
    return t2i.T2IModels(np.random.default_rng(seed), cfg)


@pytest.fixture(scope="module")
def scenes():
    return generate_dataset(6, [1, 2, 3], seed=11)


def toy_batch(scenes, res=8):
    batch = t2i.T2IBatch.from_scenes(scenes)
    batch.images = t2i.downsample_to(batch.images, res)
    return batch


# -- configuration --------------------------------------------------------


def test_stage_config_defaults():
    cfg = t2i.StageConfig()
    assert cfg.num_stages == 4 and cfg.resolutions == (8, 16, 32, 64)


@pytest.mark.parametrize(
    "kw",
    [
        dict(resolutions=(), channels=()),
        dict(resolutions=(8, 24), channels=(4, 4)),
        dict(resolutions=(8, 16), channels=(4,)),
        dict(resolutions=(6, 12), channels=(4, 4)),
    ],
)
def test_stage_config_rejects(kw):
    with pytest.raises(ValueError):
        t2i.StageConfig(**kw)


def test_models_have_m_pairs():
    m = tiny()
    assert len(m.stages) + 1 == len(m.discriminators) == TINY.num_stages


# -- generation -----------------------------------------------------------


def test_generate_stages_shapes_range_and_determinism():
    m = tiny()
    emb = m.embedder.embed_batch([cap.tokenize("rice with salmon")])
    z = np.random.default_rng(0).standard_normal((1, TINY.z_dim))
    a = t2i.generate_stages(emb, z, m)
    b = t2i.generate_stages(emb, z, m)
    assert [im.shape for im in a] == [(1, 3, r, r) for r in TINY.resolutions]
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.data, y.data)
        assert np.all(np.abs(x.data) <= 1.0)


def test_generate_stages_unbatched():
    m = tiny()
    out = t2i.generate_stages(np.zeros(TINY.text_dim), np.zeros(TINY.z_dim), m)
    assert [im.shape for im in out] == [(3, r, r) for r in TINY.resolutions]


def test_noise_changes_images():
    m = tiny()
    emb = np.random.default_rng(1).standard_normal((1, TINY.text_dim))
    rng = np.random.default_rng(2)
    a = t2i.generate_stages(emb, rng.standard_normal((1, 4)), m)[-1].data
    b = t2i.generate_stages(emb, rng.standard_normal((1, 4)), m)[-1].data
    assert np.abs(a - b).sum() > 0


def test_generate_stages_config_mismatch():
    m = tiny()
    with pytest.raises(ShapeError):
        t2i.generate_stages(np.zeros((1, TINY.text_dim + 1)), np.zeros((1, 4)), m)
    with pytest.raises(ShapeError):
        t2i.generate_stages(np.zeros((1, TINY.text_dim)), np.zeros((1, 5)), m)


# -- adversarial terms ----------------------------------------------------


def _halves(monkeypatch, m):
    for d in m.discriminators:
        monkeypatch.setattr(d, "forward", lambda x, t: (Tensor(np.full(x.shape[0], 0.5)), Tensor(np.full(x.shape[0], 0.5))))


def test_stage_losses_at_half(monkeypatch):
    m = tiny()
    _halves(monkeypatch, m)
    img = np.zeros((2, 3, 4, 4))
    l_g, l_d = t2i.stage_adversarial_losses(img, img, np.zeros((2, 8)), np.zeros((2, 8)), m, 0)
    assert l_d.item() == pytest.approx(5 * math.log(2), abs=1e-12)
    assert l_g.item() == pytest.approx(2 * math.log(2), abs=1e-12)


def test_perfect_real_scores_contribute_nothing(monkeypatch):
    m = tiny()
    ones = lambda x, t: (Tensor(np.ones(x.shape[0])), Tensor(np.ones(x.shape[0])))  # noqa: E731
    monkeypatch.setattr(m.discriminators[0], "forward", ones)
    assert t2i.bce_real(m.discriminators[0](np.zeros((1, 3, 4, 4)), None)[1]).item() == pytest.approx(0.0, abs=1e-6)


def test_stage_losses_match_formula():
    m = tiny(3)
    rng = np.random.default_rng(3)
    fake, real = rng.uniform(-1, 1, (2, 2, 3, 8, 8))
    text, wrong = rng.standard_normal((2, 2, 8))
    l_g, l_d = t2i.stage_adversarial_losses(fake, real, text, wrong, m, 1)
    d = m.discriminators[1]
    ur, cr = (x.data for x in d(real, text))
    _, cw = (x.data for x in d(real, wrong))
    uf, cf = (x.data for x in d(fake, text))
    expect_d = np.mean(-np.log(ur)) + np.mean(-np.log(1 - uf)) + np.mean(-np.log(cr)) + np.mean(-np.log(1 - cw)) + np.mean(-np.log(1 - cf))
    expect_g = np.mean(-np.log(uf)) + np.mean(-np.log(cf))
    assert l_d.item() == pytest.approx(expect_d, rel=1e-12)
    assert l_g.item() == pytest.approx(expect_g, rel=1e-12)


def test_stage_losses_shape_mismatch():
    with pytest.raises(ShapeError):
        t2i.stage_adversarial_losses(np.zeros((1, 3, 4, 4)), np.zeros((1, 3, 8, 8)), np.zeros(8), np.zeros(8), tiny(), 0)


# -- identity loss --------------------------------------------------------


def test_identity_loss_examples():
    x = np.random.default_rng(0).uniform(size=(3, 8, 8))
    assert t2i.identity_loss(x, x).item() == 0.0
    assert t2i.identity_loss(x + 0.3, x).item() == pytest.approx(0.3, abs=1e-12)
    y = np.random.default_rng(1).uniform(size=(3, 8, 8))
    assert t2i.identity_loss(x, y).item() == pytest.approx(np.mean(np.abs(x - y)), rel=1e-14)
    with pytest.raises(ShapeError):
        t2i.identity_loss(x, y[:, :4])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_identity_loss_is_a_metric(seed):
    a, b, c = np.random.default_rng(seed).uniform(-1, 1, (3, 3, 4, 4))
    d = lambda p, q: t2i.identity_loss(p, q).item()  # noqa: E731
    assert d(a, a) == 0.0 and d(a, b) > 0.0
    assert d(a, b) == d(b, a)
    assert d(a, c) <= d(a, b) + d(b, c) + 1e-12


def test_downsample_is_box_filter():
    x = np.arange(16.0).reshape(1, 4, 4)
    np.testing.assert_array_equal(t2i.downsample_to(x, 2), [[[2.5, 4.5], [10.5, 12.5]]])
    with pytest.raises(ShapeError):
        t2i.downsample_to(x, 3)


# -- caption branch and cycle loss ----------------------------------------


def test_caption_targets_layout():
    inputs, targets = t2i.caption_targets([[5, 6], [7]], 4)
    np.testing.assert_array_equal(targets, [[5, 6, cap.EOS, cap.PAD], [7, cap.EOS, cap.PAD, cap.PAD]])
    np.testing.assert_array_equal(inputs, [[cap.BOS, 5, 6, cap.EOS], [cap.BOS, 7, cap.EOS, cap.PAD]])
    with pytest.raises(ShapeError):
        t2i.caption_targets([[1, 2, 3, 4]], 4)


def test_captions_fit_max_len(scenes):
    longest = max(len(cap.tokenize(c)) for s in scenes for c in s.captions)
    assert longest + 1 <= t2i.StageConfig().max_len


def test_caption_branch_shape_and_greedy_determinism():
    m = tiny()
    img = np.random.default_rng(0).uniform(-1, 1, (3, 8, 8))
    logits = t2i.caption_branch(img, m)
    assert logits.shape == (TINY.max_len, len(cap.VOCAB))
    assert t2i.greedy_decode(img, m) == t2i.greedy_decode(img, m)


def test_caption_branch_greedy_logits_agree_with_decode():
    m = tiny(4)
    img = np.random.default_rng(4).uniform(-1, 1, (3, 8, 8))
    ids = list(np.argmax(t2i.caption_branch(img, m).data, axis=-1))
    decoded = t2i.greedy_decode(img, m)[0]
    assert ids[: len(decoded)] == decoded


def test_cycle_loss_onehot_and_uniform():
    target = np.array([5, 9, cap.EOS, cap.PAD])
    logits = np.full((4, 16), -1e3)
    logits[np.arange(4), target] = 0.0
    assert t2i.cycle_loss(logits, target).item() == pytest.approx(0.0, abs=1e-9)
    assert t2i.cycle_loss(np.zeros((4, 16)), target).item() == pytest.approx(math.log(16), rel=1e-14)


def test_cycle_loss_against_oracle():
    rng = np.random.default_rng(6)
    logits = rng.standard_normal((3, 5, 11))
    target = rng.integers(4, 11, (3, 5))
    target[0, 3:] = cap.PAD
    target[2, 1:] = cap.PAD
    lp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
    nll = [-lp[b, t, target[b, t]] for b in range(3) for t in range(5) if target[b, t] != cap.PAD]
    assert t2i.cycle_loss(logits, target).item() == pytest.approx(np.mean(nll), rel=1e-12)


def test_cycle_loss_errors():
    with pytest.raises(ShapeError):
        t2i.cycle_loss(np.zeros((4, 8)), np.array([cap.PAD] * 4))
    with pytest.raises(ShapeError):
        t2i.cycle_loss(np.zeros((4, 8)), np.array([5, 5]))


def test_cycle_gradient_reaches_stage_zero():
    m = tiny(5)
    tokens = [cap.tokenize("rice with fried chicken")]
    images = t2i.generate_stages(m.embedder.embed_batch(tokens), np.ones((1, 4)), m)
    inputs, targets = t2i.caption_targets(tokens, TINY.max_len)
    T.backward(t2i.cycle_loss(t2i.caption_branch(images[-1], m, inputs), targets))
    grads = [p.grad for p in m.stage0.parameters()]
    assert any(g is not None and np.any(g != 0) for g in grads)


# -- totals ---------------------------------------------------------------


def test_total_examples():
    r = t2i.total_t2i_losses([0.5], [0.7], [0.2], 0.3)
    assert r.l_g_total == pytest.approx(1.0, abs=1e-15) and r.l_d_total == 0.7
    z = t2i.total_t2i_losses([0.0] * 4, [0.0] * 4, [0.0] * 4, 0.0)
    assert z.l_g_total == 0.0 and z.l_d_total == 0.0
    with pytest.raises(ValueError):
        t2i.total_t2i_losses([1.0, 2.0], [1.0], [1.0, 2.0], 0.0)


@given(st.lists(st.tuples(st.floats(0, 100), st.floats(0, 100), st.floats(0, 100)), min_size=4, max_size=4), st.floats(0, 100))
def test_total_matches_summation_oracle(terms, l_cycle):
    g, d, i = (list(x) for x in zip(*terms))
    r = t2i.total_t2i_losses(g, d, i, l_cycle)
    acc = 0.0
    for gm, im in zip(g, i):
        acc += gm + im
    assert r.l_g_total == acc + l_cycle
    dsum = 0.0
    for dm in d:
        dsum += dm
    assert r.l_d_total == dsum


# -- training -------------------------------------------------------------


def test_train_step_finite_and_identities(scenes):
    m = tiny()
    g, d = m.make_optimizers()
    r = t2i.train_step_t2i(toy_batch(scenes), m, g, d, np.random.default_rng(0))
    assert all(math.isfinite(v) for v in r.as_row().values())
    assert r.l_g_total == t2i.generator_total(r.l_g_m, r.l_id_m, r.l_cycle)
    assert r.l_d_total == t2i.discriminator_total(r.l_d_m)


def test_train_step_real_caption_term(scenes):
    m = tiny()
    g, d = m.make_optimizers()
    batch = toy_batch(scenes)
    inputs, targets = t2i.caption_targets(batch.tokens, m.cfg.max_len)
    with T.no_grad():
        expected = t2i.cycle_loss(t2i.caption_branch(batch.images, m, inputs), targets).item()
    r = t2i.train_step_t2i(batch, m, g, d, np.random.default_rng(0))
    assert r.l_caption == expected
    assert "l_caption" in r.as_row() and r.l_g_total == t2i.generator_total(r.l_g_m, r.l_id_m, r.l_cycle)


def test_train_step_deterministic(scenes):
    rows = []
    for _ in range(2):
        m = tiny(9)
        g, d = m.make_optimizers()
        rows.append([t2i.train_step_t2i(toy_batch(scenes), m, g, d, np.random.default_rng(k)).as_row() for k in range(3)])
    assert rows[0] == rows[1]


def test_train_step_updates_embedder_and_caption_branch(scenes):
    m = tiny()
    g, d = m.make_optimizers()
    before = {n: p.copy() for n, p in m.state_dict().items()}
    t2i.train_step_t2i(toy_batch(scenes), m, g, d, np.random.default_rng(0))
    after = m.state_dict()
    for prefix in ("embedder.", "encoder.", "decoder.", "stage0.", "disc0."):
        changed = [n for n in after if n.startswith(prefix) and not np.array_equal(after[n], before[n])]
        assert changed, prefix


def test_train_step_rejects_bad_batches(scenes):
    m = tiny()
    g, d = m.make_optimizers()
    with pytest.raises(ShapeError):
        t2i.train_step_t2i(t2i.T2IBatch.from_scenes(scenes), m, g, d, np.random.default_rng(0))
    empty = t2i.T2IBatch([], np.zeros((0, 3, 8, 8)), np.zeros(0))
    with pytest.raises(ShapeError):
        t2i.train_step_t2i(empty, m, g, d, np.random.default_rng(0))


def test_short_training_lowers_cycle_loss(scenes):
    m = tiny(1)
    g, d = m.make_optimizers(lr_g=2e-3, lr_d=2e-4)
    batch = toy_batch(scenes)
    first = t2i.train_step_t2i(batch, m, g, d, np.random.default_rng(0)).l_cycle
    for k in range(1, 40):
        last = t2i.train_step_t2i(batch, m, g, d, np.random.default_rng(k)).l_cycle
    assert last < first
