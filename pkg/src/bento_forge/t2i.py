"""Multi-stage text-to-image GAN with a caption branch closing the cycle.

Stage 0 maps (text embedding, noise) to an 8 x 8 image and hidden features.
Every later stage upsamples the previous hidden features, applies a conv
block followed by channel and spatial attention, and emits an image at
twice the resolution. Each stage has its own discriminator with an
unconditional (realism) head and a conditional (text compatibility) head.
A small conv encoder plus recurrent decoder reads the final image back into
a caption; token cross-entropy against the input caption is the cycle term.

Generator-side objective::

    l_g_total = sum_m (l_g_m + l_id_m) + l_cycle

Discriminator-side objective::

    l_d_total = sum_m l_d_m
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np

from . import captions as cap
from . import tensor as T
from .layout import bce_fake, bce_real
from .nn import ChannelAttention, Conv2d, ImageEncoder, Linear, Module, Parameter, SpatialAttention, TextEmbedder, TextEmbedding, _normal
from .optim import Adam
from .tensor import ShapeError, Tensor

if TYPE_CHECKING:
    from .dataset import Scene


@dataclass(frozen=True)
class StageConfig:
    resolutions: tuple[int, ...] = (8, 16, 32, 64)
    channels: tuple[int, ...] = (32, 16, 8, 8)
    z_dim: int = 16
    text_dim: int = 32
    d_channels: int = 16
    caption_hidden: int = 64
    max_len: int = 24

    def __post_init__(self):
        if len(self.resolutions) < 1:
            raise ValueError("need at least one stage")
        if len(self.channels) != len(self.resolutions):
            raise ValueError(f"{len(self.resolutions)} resolutions but {len(self.channels)} channel widths")
        for lo, hi in zip(self.resolutions, self.resolutions[1:]):
            if hi != 2 * lo:
                raise ValueError(f"stage resolutions must double, got {self.resolutions}")
        if self.resolutions[0] < 4 or self.resolutions[0] & (self.resolutions[0] - 1):
            raise ValueError(f"first stage resolution must be a power of two >= 4, got {self.resolutions[0]}")
        if self.resolutions[-1] % 8:
            raise ValueError("final resolution must be a multiple of 8 for the caption encoder")

    @property
    def num_stages(self) -> int:
        return len(self.resolutions)


# ---------------------------------------------------------------------------
# networks


class StageZero(Module):
    def __init__(self, cfg: StageConfig, rng: np.random.Generator):
        r, c = cfg.resolutions[0], cfg.channels[0]
        self.fc = Linear(cfg.text_dim + cfg.z_dim, c * r * r, rng)
        self.conv = Conv2d(c, c, 3, rng, padding=1)
        self.to_img = Conv2d(c, 3, 3, rng, padding=1)
        self._shape = (c, r, r)

    def forward(self, text: Tensor, noise: Tensor) -> tuple[Tensor, Tensor]:
        b = text.shape[0]
        h = T.leaky_relu(self.fc(T.concat([text, noise], axis=1)), 0.2).reshape((b,) + self._shape)
        h = T.leaky_relu(self.conv(h), 0.2)
        return h, T.tanh(self.to_img(h))


class UpStage(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        self.conv = Conv2d(c_in, c_out, 3, rng, padding=1)
        self.channel_attn = ChannelAttention(c_out, rng)
        self.spatial_attn = SpatialAttention(c_out, rng)
        self.to_img = Conv2d(c_out, 3, 3, rng, padding=1)

    def forward(self, hidden: Tensor) -> tuple[Tensor, Tensor]:
        h = T.leaky_relu(self.conv(T.upsample_nearest(hidden, 2)), 0.2)
        h = self.spatial_attn(self.channel_attn(h))
        return h, T.tanh(self.to_img(h))


class StageDiscriminator(Module):
    """Stride-2 convs down to 4 x 4, then an unconditional and a conditional head."""

    def __init__(self, resolution: int, text_dim: int, channels: int, rng: np.random.Generator):
        self.convs = []
        c_prev, r = 3, resolution
        while r > 4:
            self.convs.append(Conv2d(c_prev, channels, 4, rng, stride=2, padding=1))
            c_prev, r = channels, r // 2
        feat = c_prev * 16
        self.uncond = Linear(feat, 1, rng)
        self.cond = Linear(feat + text_dim, 1, rng)
        self._res = resolution

    def features(self, images: Tensor) -> Tensor:
        if images.ndim != 4 or images.shape[1:] != (3, self._res, self._res):
            raise ShapeError(f"stage discriminator expects N x 3 x {self._res} x {self._res}, got {images.shape}")
        h = images
        for conv in self.convs:
            h = T.leaky_relu(conv(h), 0.2)
        return h.reshape(h.shape[0], -1)

    def forward(self, images: Tensor, text: Tensor) -> tuple[Tensor, Tensor]:
        f = self.features(images)
        b = images.shape[0]
        return T.sigmoid(self.uncond(f)).reshape(b), T.sigmoid(self.cond(T.concat([f, text], axis=1))).reshape(b)


class CaptionDecoder(Module):
    """Single-layer Elman RNN over the caption vocabulary.

    The image feature initializes the hidden state and is also fed at every
    step, so the caption cannot drift away from the image after a few tokens.
    """

    def __init__(self, d_img: int, hidden: int, vocab: int, rng: np.random.Generator, emb: int = 16):
        self.init = Linear(d_img, hidden, rng, std=0.1)
        self.tok = Parameter(_normal(rng, (vocab, emb), 0.1))
        self.cell = Linear(emb + d_img + hidden, hidden, rng, std=0.1)
        self.out = Linear(hidden, vocab, rng, std=0.1)

    def step(self, h: Tensor, feat: Tensor, tokens: np.ndarray) -> tuple[Tensor, Tensor]:
        x = T.take_rows(self.tok, tokens)
        h = T.tanh(self.cell(T.concat([x, feat, h], axis=1)))
        return h, self.out(h)

    def forward(self, feat: Tensor, inputs: np.ndarray) -> Tensor:
        """Teacher-forced logits ``B x L x V`` for input tokens ``B x L``."""
        h = T.tanh(self.init(feat))
        logits = []
        for t in range(inputs.shape[1]):
            h, lg = self.step(h, feat, inputs[:, t])
            logits.append(lg)
        return T.stack(logits, axis=1)

    def greedy(self, feat: Tensor, max_len: int) -> np.ndarray:
        h = T.tanh(self.init(feat))
        tok = np.full(feat.shape[0], cap.BOS, dtype=np.int64)
        out = np.full((feat.shape[0], max_len), cap.PAD, dtype=np.int64)
        done = np.zeros(feat.shape[0], dtype=bool)
        for t in range(max_len):
            h, lg = self.step(h, feat, tok)
            tok = np.argmax(lg.data, axis=1)
            out[~done, t] = tok[~done]
            done |= tok == cap.EOS
            if done.all():
                break
        return out


class T2IModels:
    def __init__(self, rng: np.random.Generator, cfg: StageConfig | None = None, vocab_size: int = len(cap.VOCAB)):
        cfg = cfg or StageConfig()
        self.cfg = cfg
        self.embedder = TextEmbedder(vocab_size, cfg.text_dim, rng, unk_id=cap.UNK)
        self.stage0 = StageZero(cfg, rng)
        self.stages = [UpStage(cfg.channels[m - 1], cfg.channels[m], rng) for m in range(1, cfg.num_stages)]
        self.discriminators = [StageDiscriminator(r, cfg.text_dim, cfg.d_channels, rng) for r in cfg.resolutions]
        self.encoder = ImageEncoder(cfg.resolutions[-1], cfg.caption_hidden, rng, std=0.1)
        self.decoder = CaptionDecoder(cfg.caption_hidden, cfg.caption_hidden, vocab_size, rng)

    def generator_modules(self) -> dict[str, Module]:
        mods: dict[str, Module] = {"embedder": self.embedder, "stage0": self.stage0}
        mods.update({f"stage{m + 1}": s for m, s in enumerate(self.stages)})
        mods.update({"encoder": self.encoder, "decoder": self.decoder})
        return mods

    def discriminator_modules(self) -> dict[str, Module]:
        return {f"disc{m}": d for m, d in enumerate(self.discriminators)}

    def groups(self) -> dict[str, Module]:
        return {**self.generator_modules(), **self.discriminator_modules()}

    def named_parameters(self):
        for prefix, mod in self.groups().items():
            yield from mod.named_parameters(prefix + ".")

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, arrays) -> None:
        for prefix, mod in self.groups().items():
            mod.load_state_dict({k[len(prefix) + 1 :]: v for k, v in arrays.items() if k.startswith(prefix + ".")})

    def set_frozen(self, frozen: bool) -> None:
        for mod in self.groups().values():
            mod.set_frozen(frozen)

    def optimizer_param_names(self) -> tuple[list[str], list[str]]:
        g = [f"{p}.{n}" for p, mod in self.generator_modules().items() for n, _ in mod.named_parameters()]
        d = [f"{p}.{n}" for p, mod in self.discriminator_modules().items() for n, _ in mod.named_parameters()]
        return g, d

    def make_optimizers(self, lr_g: float = 2e-4, lr_d: float = 2e-4, betas=(0.5, 0.999)) -> tuple[Adam, Adam]:
        g = [p for mod in self.generator_modules().values() for p in mod.parameters()]
        d = [p for mod in self.discriminator_modules().values() for p in mod.parameters()]
        return Adam(g, lr_g, betas), Adam(d, lr_d, betas)


# ---------------------------------------------------------------------------
# forward passes and loss terms


def _as_batch_text(embedding) -> tuple[Tensor, bool]:
    if isinstance(embedding, TextEmbedding):
        embedding = embedding.vector
    embedding = T.as_tensor(embedding)
    if embedding.ndim == 1:
        return embedding.reshape(1, -1), True
    return embedding, False


def generate_stages(embedding, noise, models: T2IModels) -> list[Tensor]:
    """Images for every stage, in [-1, 1]; unbatched in, unbatched out."""
    cfg = models.cfg
    text, squeeze = _as_batch_text(embedding)
    noise = T.as_tensor(noise)
    if noise.ndim == 1:
        noise = noise.reshape(1, -1)
    if text.shape[1] != cfg.text_dim:
        raise ShapeError(f"text embedding has dimension {text.shape[1]}, models expect {cfg.text_dim}")
    if noise.shape != (text.shape[0], cfg.z_dim):
        raise ShapeError(f"noise must be {(text.shape[0], cfg.z_dim)}, got {noise.shape}")
    h, img = models.stage0(text, noise)
    images = [img]
    for stage in models.stages:
        h, img = stage(h)
        images.append(img)
    if squeeze:
        images = [im.reshape(im.shape[1:]) for im in images]
    return images


def stage_adversarial_losses(image_m, real_image_m, embedding, mismatched_embedding, models: T2IModels, m: int) -> tuple[Tensor, Tensor]:
    """``(l_g_m, l_d_m)`` for stage ``m``.

    The discriminator term sums five binary cross-entropies: real and fake
    under the unconditional head, then (real, matching text) as positive and
    (real, mismatched text) and (fake, matching text) as negatives under the
    conditional head. The generator term is the non-saturating loss of the
    fake under both heads.
    """
    disc = models.discriminators[m]
    text, _ = _as_batch_text(embedding)
    wrong, _ = _as_batch_text(mismatched_embedding)
    fake, real = T.as_tensor(image_m), T.as_tensor(real_image_m)
    if fake.ndim == 3:
        fake, real = fake.reshape((1,) + fake.shape), real.reshape((1,) + real.shape)
    if fake.shape != real.shape:
        raise ShapeError(f"stage {m}: generated {fake.shape} vs real {real.shape}")
    u_real, c_real = disc(real, text)
    _, c_wrong = disc(real, wrong)
    u_fake, c_fake = disc(fake, text)
    l_d = bce_real(u_real) + bce_fake(u_fake) + bce_real(c_real) + bce_fake(c_wrong) + bce_fake(c_fake)
    l_g = bce_real(u_fake) + bce_real(c_fake)
    return l_g, l_d


def identity_loss(generated, ground_truth) -> Tensor:
    """Mean absolute pixel difference."""
    generated, ground_truth = T.as_tensor(generated), T.as_tensor(ground_truth)
    if generated.shape != ground_truth.shape:
        raise ShapeError(f"identity loss on mismatched shapes {generated.shape} and {ground_truth.shape}")
    return T.absolute(generated - ground_truth).mean()


def downsample_to(images: np.ndarray, resolution: int) -> np.ndarray:
    """Box-filter ``... x H x W`` images down to ``resolution``."""
    h = images.shape[-1]
    if h % resolution:
        raise ShapeError(f"cannot box-downsample {h} to {resolution}")
    f = h // resolution
    lead = images.shape[:-2]
    return images.reshape(lead + (resolution, f, resolution, f)).mean(axis=(-3, -1))


def caption_targets(token_lists: Sequence[Sequence[int]], max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Teacher-forcing inputs and targets, ``B x max_len`` each.

    Targets are the caption followed by EOS, padded with PAD; inputs are
    the targets shifted right behind BOS.
    """
    b = len(token_lists)
    targets = np.full((b, max_len), cap.PAD, dtype=np.int64)
    for i, toks in enumerate(token_lists):
        seq = list(toks) + [cap.EOS]
        if len(seq) > max_len:
            raise ShapeError(f"caption of {len(toks)} tokens exceeds max_len {max_len} (EOS included)")
        targets[i, : len(seq)] = seq
    inputs = np.concatenate([np.full((b, 1), cap.BOS, dtype=np.int64), targets[:, :-1]], axis=1)
    return inputs, targets


def caption_branch(image, models: T2IModels, teacher_inputs: np.ndarray | None = None) -> Tensor:
    """Token logits for a final-stage image.

    With ``teacher_inputs`` (``B x L``) the decoder is teacher-forced;
    otherwise it is fed its own greedy choices for ``max_len`` steps.
    A single ``3 x H x W`` image yields ``max_len x vocab`` logits.
    """
    image = T.as_tensor(image)
    squeeze = image.ndim == 3
    if squeeze:
        image = image.reshape((1,) + image.shape)
    feat = models.encoder(image)
    if teacher_inputs is None:
        ids = models.decoder.greedy(feat, models.cfg.max_len)
        teacher_inputs = np.concatenate([np.full((ids.shape[0], 1), cap.BOS), ids[:, :-1]], axis=1)
    logits = models.decoder(feat, np.atleast_2d(teacher_inputs))
    return logits.reshape(logits.shape[1:]) if squeeze else logits


def greedy_decode(image, models: T2IModels) -> list[list[int]]:
    """Greedy token ids per image, truncated before EOS."""
    image = T.as_tensor(image)
    if image.ndim == 3:
        image = image.reshape((1,) + image.shape)
    with T.no_grad():
        ids = models.decoder.greedy(models.encoder(image), models.cfg.max_len)
    out = []
    for row in ids:
        row = list(row)
        out.append(row[: row.index(cap.EOS)] if cap.EOS in row else [t for t in row if t != cap.PAD])
    return out


def cycle_loss(predicted_logits, target) -> Tensor:
    """Mean token cross-entropy over non-PAD target positions.

    ``target`` is a ``L`` or ``B x L`` array of ids already laid out like
    the logits (see ``caption_targets``).
    """
    logits = T.as_tensor(predicted_logits)
    target = np.asarray(target, dtype=np.int64)
    if logits.ndim == 2:
        logits, target = logits.reshape((1,) + logits.shape), target.reshape(1, -1)
    if logits.shape[:2] != target.shape:
        raise ShapeError(f"logits {logits.shape} do not cover targets {target.shape}")
    mask = target != cap.PAD
    if not mask.any():
        raise ShapeError("cycle loss needs at least one non-padding target token")
    onehot = np.zeros(logits.shape)
    np.put_along_axis(onehot, target[..., None], 1.0, axis=-1)
    onehot *= mask[..., None] / mask.sum()
    return -(T.log_softmax(logits, axis=-1) * Tensor(onehot)).sum()


# ---------------------------------------------------------------------------
# reports and training


@dataclass
class T2ILossReport:
    l_g_m: list[float]
    l_d_m: list[float]
    l_id_m: list[float]
    l_cycle: float
    l_caption: float = 0.0
    l_id: float = field(init=False)
    l_g_total: float = field(init=False)
    l_d_total: float = field(init=False)

    def __post_init__(self):
        if not (len(self.l_g_m) == len(self.l_d_m) == len(self.l_id_m)) or not self.l_g_m:
            raise ValueError(
                f"term counts differ: {len(self.l_g_m)} generator, {len(self.l_d_m)} discriminator, {len(self.l_id_m)} identity"
            )
        self.l_g_m = [float(v) for v in self.l_g_m]
        self.l_d_m = [float(v) for v in self.l_d_m]
        self.l_id_m = [float(v) for v in self.l_id_m]
        self.l_cycle = float(self.l_cycle)
        self.l_caption = float(self.l_caption)
        self.l_id = 0.0
        for v in self.l_id_m:
            self.l_id += v
        self.l_g_total = generator_total(self.l_g_m, self.l_id_m, self.l_cycle)
        self.l_d_total = discriminator_total(self.l_d_m)

    def as_row(self) -> dict[str, float]:
        row = {f"l_g_{m}": v for m, v in enumerate(self.l_g_m)}
        row.update({f"l_id_{m}": v for m, v in enumerate(self.l_id_m)})
        row.update({f"l_d_{m}": v for m, v in enumerate(self.l_d_m)})
        row.update(l_id=self.l_id, l_cycle=self.l_cycle, l_g_total=self.l_g_total, l_d_total=self.l_d_total, l_caption=self.l_caption)
        return row


def generator_total(l_g_m: Sequence[float], l_id_m: Sequence[float], l_cycle: float) -> float:
    total = 0.0
    for g, i in zip(l_g_m, l_id_m, strict=True):
        total += g + i
    return total + l_cycle


def discriminator_total(l_d_m: Sequence[float]) -> float:
    total = 0.0
    for d in l_d_m:
        total += d
    return total


def total_t2i_losses(
    l_g_m: Sequence[float], l_d_m: Sequence[float], l_id_m: Sequence[float], l_cycle: float, l_caption: float = 0.0
) -> T2ILossReport:
    return T2ILossReport(list(l_g_m), list(l_d_m), list(l_id_m), l_cycle, l_caption)


@dataclass
class T2IBatch:
    tokens: list[list[int]]
    images: np.ndarray  # B x 3 x H x W in [-1, 1]
    types: np.ndarray  # B

    @classmethod
    def from_scenes(cls, scenes: Sequence["Scene"], rng: np.random.Generator | None = None) -> "T2IBatch":
        """One caption per scene: a random one if ``rng`` is given, else the original."""
        caps = [s.captions[int(rng.integers(len(s.captions)))] if rng is not None else s.captions[0] for s in scenes]
        imgs = np.stack([s.image() for s in scenes]) * 2.0 - 1.0
        return cls([cap.tokenize(c) for c in caps], imgs, np.array([s.type_id for s in scenes]))


def train_step_t2i(batch: T2IBatch, models: T2IModels, g_opt: Adam, d_opt: Adam, rng: np.random.Generator) -> T2ILossReport:
    """Discriminators step on the summed l_d_m, then generators on l_g_total."""
    cfg = models.cfg
    b = len(batch.tokens)
    if b == 0:
        raise ShapeError("empty training batch")
    if batch.images.shape[-1] != cfg.resolutions[-1]:
        raise ShapeError(f"batch images are {batch.images.shape[-1]}px, final stage is {cfg.resolutions[-1]}px")
    noise = Tensor(rng.standard_normal((b, cfg.z_dim)))
    text = models.embedder.embed_batch(batch.tokens)
    images = generate_stages(text, noise, models)
    reals = [Tensor(downsample_to(batch.images, r)) for r in cfg.resolutions]
    text_d = text.detach()
    wrong_d = Tensor(np.roll(text_d.data, 1, axis=0))

    d_opt.zero_grad()
    d_terms = [stage_adversarial_losses(images[m].detach(), reals[m], text_d, wrong_d, models, m)[1] for m in range(cfg.num_stages)]
    d_sum = d_terms[0]
    for t in d_terms[1:]:
        d_sum = d_sum + t
    T.backward(d_sum)
    d_opt.step()

    g_opt.zero_grad()
    g_terms, id_terms = [], []
    for m in range(cfg.num_stages):
        g_terms.append(stage_adversarial_losses(images[m], reals[m], text, wrong_d, models, m)[0])
        id_terms.append(identity_loss(images[m], reals[m]))
    inputs, targets = caption_targets(batch.tokens, cfg.max_len)
    l_cycle = cycle_loss(caption_branch(images[-1], models, inputs), targets)
    # the caption branch also reads real images, standing in for a pretrained captioner
    l_caption = cycle_loss(caption_branch(reals[-1], models, inputs), targets)
    g_sum = l_cycle + l_caption
    for g, i in zip(g_terms, id_terms):
        g_sum = g_sum + g + i
    T.backward(g_sum)
    g_opt.step()
    d_opt.zero_grad()
    return total_t2i_losses([t.item() for t in g_terms], [t.item() for t in d_terms], [t.item() for t in id_terms], l_cycle.item(), l_caption.item())


def generate_images(token_lists: Sequence[Sequence[int]], noise: np.ndarray, models: T2IModels) -> list[np.ndarray]:
    """Stage images (``B x 3 x r x r`` each) without recording a graph."""
    with T.no_grad():
        return [im.data for im in generate_stages(models.embedder.embed_batch(token_lists), Tensor(noise), models)]


def class_accuracy(scenes: Sequence["Scene"], models: T2IModels, rng: np.random.Generator) -> float:
    """Fraction of scenes whose original caption survives text -> image -> text at the type level."""
    tokens = [cap.tokenize(s.captions[0]) for s in scenes]
    finals = generate_images(tokens, rng.standard_normal((len(scenes), models.cfg.z_dim)), models)[-1]
    decoded = greedy_decode(finals, models)
    hits = [cap.caption_type(d) == s.type_id for d, s in zip(decoded, scenes)]
    return float(np.mean(hits))
