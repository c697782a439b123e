"""Layout generation and ingredient composition.

A recurrent conditional generator emits one box per item in placement
order; a recurrent discriminator scores (boxes, categories) sequences. The
composition network turns each box into a full affine transform (box
placement plus a learned residual, zero at initialization), the spatial
transformer warps the item cut-outs, and the warped layers are
alpha-composited bottom to top. A conv discriminator scores the composite.

Training minimizes, for the generator side,
``l_total = l_layout + l_image + l_stn`` (each optionally weighted), with
the discriminators updated first on their own binary cross-entropy.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import TYPE_CHECKING, Mapping, Sequence

import numpy as np

from . import tensor as T
from .boxes import LayoutBox
from .nn import Conv2d, Linear, Module, Parameter, _normal
from .optim import Adam
from .stn import affine_grid, bilinear_sample, boxes_to_theta
from .tensor import ShapeError, Tensor

if TYPE_CHECKING:
    from .dataset import Scene

LOG_EPS = 1e-7
N_CATEGORIES = 6


class FrozenModelError(RuntimeError):
    """Training was attempted on frozen models, or inference on unfrozen ones."""


# ---------------------------------------------------------------------------
# GAN loss terms


def bce_real(score: Tensor) -> Tensor:
    """-log D, with D clamped to [1e-7, 1 - 1e-7]."""
    return -T.log(T.clip(score, LOG_EPS, 1.0 - LOG_EPS)).mean()


def bce_fake(score: Tensor) -> Tensor:
    """-log(1 - D), with the same clamp."""
    return -T.log(T.clip(1.0 - score, LOG_EPS, 1.0 - LOG_EPS)).mean()


def gan_terms(d_real: Tensor, d_fake: Tensor) -> tuple[Tensor, Tensor]:
    """Non-saturating GAN terms ``(g_term, d_term)`` from discriminator scores."""
    return bce_real(d_fake), bce_real(d_real) + bce_fake(d_fake)


# ---------------------------------------------------------------------------
# networks


class LayoutGenerator(Module):
    def __init__(self, rng: np.random.Generator, z_dim: int = 64, hidden: int = 64, emb: int = 16):
        self.cat_emb = Parameter(_normal(rng, (N_CATEGORIES, emb), 1.0))
        self.init = Linear(z_dim, hidden, rng)
        self.cell = Linear(hidden + emb + 4 + z_dim, hidden, rng)
        self.head1 = Linear(hidden + emb + z_dim, hidden, rng)
        self.head2 = Linear(hidden, 4, rng)
        self._z_dim = z_dim

    def forward(self, categories: np.ndarray, noise: Tensor) -> Tensor:
        """``categories`` ``B x K`` (placement order), ``noise`` ``B x z`` -> boxes ``B x K x 4``."""
        categories = np.asarray(categories, dtype=np.int64)
        if categories.ndim != 2 or categories.shape[1] == 0:
            raise ShapeError(f"layout generator needs a non-empty B x K category array, got {categories.shape}")
        noise = T.as_tensor(noise)
        if noise.shape != (categories.shape[0], self._z_dim):
            raise ShapeError(f"noise must be {(categories.shape[0], self._z_dim)}, got {noise.shape}")
        b, k = categories.shape
        h = T.tanh(self.init(noise))
        prev = Tensor(np.zeros((b, 4)))
        boxes = []
        for step in range(k):
            e = T.take_rows(self.cat_emb, categories[:, step])
            h = T.tanh(self.cell(T.concat([h, e, prev, noise], axis=1)))
            hid = T.leaky_relu(self.head1(T.concat([h, e, noise], axis=1)), 0.2)
            prev = T.sigmoid(self.head2(hid))
            boxes.append(prev)
        return T.stack(boxes, axis=1)


class LayoutDiscriminator(Module):
    def __init__(self, rng: np.random.Generator, hidden: int = 64, emb: int = 16):
        self.cat_emb = Parameter(_normal(rng, (N_CATEGORIES, emb), 1.0))
        self.cell = Linear(hidden + emb + 4, hidden, rng)
        self.mix = Linear(hidden, hidden, rng)
        self.out = Linear(hidden, 1, rng)
        self._hidden = hidden

    def forward(self, boxes: Tensor, categories: np.ndarray) -> Tensor:
        """Realism score in (0, 1) per sequence, shape ``B``."""
        boxes = T.as_tensor(boxes)
        categories = np.asarray(categories, dtype=np.int64)
        if boxes.ndim != 3 or boxes.shape[:2] != categories.shape or boxes.shape[2] != 4:
            raise ShapeError(f"boxes {boxes.shape} do not match categories {categories.shape}")
        b, k = categories.shape
        h = Tensor(np.zeros((b, self._hidden)))
        for step in range(k):
            e = T.take_rows(self.cat_emb, categories[:, step])
            h = T.leaky_relu(self.cell(T.concat([h, e, boxes[:, step, :]], axis=1)), 0.2)
        h = T.leaky_relu(self.mix(h), 0.2)
        return T.sigmoid(self.out(h)).reshape(b)


class CompositionNet(Module):
    """Predicts a 6-dof residual added to the box placement transform."""

    def __init__(self, rng: np.random.Generator, hidden: int = 32, emb: int = 8):
        self.cat_emb = Parameter(_normal(rng, (N_CATEGORIES, emb), 1.0))
        self.fc1 = Linear(4 + emb, hidden, rng)
        self.fc2 = Linear(hidden, 6, rng)
        self.fc2.weight.data[...] = 0.0

    def forward(self, boxes: Tensor, categories: np.ndarray) -> Tensor:
        """``boxes`` ``... x 4`` with matching ``categories`` -> theta ``... x 2 x 3``."""
        boxes = T.as_tensor(boxes)
        categories = np.asarray(categories, dtype=np.int64)
        lead = boxes.shape[:-1]
        flat = boxes.reshape(-1, 4)
        e = T.take_rows(self.cat_emb, categories.reshape(-1))
        residual = self.fc2(T.leaky_relu(self.fc1(T.concat([flat, e], axis=1)), 0.2))
        return boxes_to_theta(boxes) + residual.reshape(lead + (2, 3))


class ImageDiscriminator(Module):
    """Conv discriminator over composites, conditioned on the category multiset."""

    def __init__(self, rng: np.random.Generator, resolution: int = 64, channels=(8, 16, 32, 32)):
        self.convs = []
        c_prev = 3
        for c in channels:
            self.convs.append(Conv2d(c_prev, c, 4, rng, stride=2, padding=1))
            c_prev = c
        side = resolution // 2 ** len(channels)
        if side < 1:
            raise ShapeError(f"resolution {resolution} too small for {len(channels)} downsampling blocks")
        self.fc = Linear(c_prev * side * side + N_CATEGORIES, 1, rng)
        self._res = resolution

    def forward(self, images: Tensor, category_counts: np.ndarray) -> Tensor:
        images = T.as_tensor(images)
        if images.ndim != 4 or images.shape[1:] != (3, self._res, self._res):
            raise ShapeError(f"image discriminator expects N x 3 x {self._res} x {self._res}, got {images.shape}")
        h = images * 2.0 - 1.0
        for conv in self.convs:
            h = T.leaky_relu(conv(h), 0.2)
        feat = T.concat([h.reshape(h.shape[0], -1), Tensor(category_counts)], axis=1)
        return T.sigmoid(self.fc(feat)).reshape(images.shape[0])


# ---------------------------------------------------------------------------
# compositing


def composite_scene(transformed_items, order: Sequence[int], background) -> Tensor:
    """Alpha-over compositing, first id in ``order`` at the bottom.

    ``transformed_items`` maps item id -> RGBA layer (``4 x H x W``, or a
    batched ``N x 4 x H x W``); ``background`` is the matching RGB canvas.
    """
    out = T.as_tensor(background)
    if out.shape[-3] != 3:
        raise ShapeError(f"background must be RGB, got {out.shape}")
    for item_id in order:
        layer = T.as_tensor(transformed_items[item_id])
        if layer.shape[-2:] != out.shape[-2:] or layer.shape[-3] != 4 or layer.ndim != out.ndim:
            raise ShapeError(f"item {item_id} layer {layer.shape} does not match canvas {out.shape}")
        rgb, alpha = layer[..., :3, :, :], layer[..., 3:4, :, :]
        out = rgb * alpha + out * (1.0 - alpha)
    return out


def warp_items(cutouts: np.ndarray, theta: Tensor, out_h: int, out_w: int) -> Tensor:
    """Warp ``B x K x 4 x h x w`` cut-outs with ``B x K x 2 x 3`` transforms."""
    b, k = cutouts.shape[:2]
    flat = cutouts.reshape((b * k,) + cutouts.shape[2:])
    grid = affine_grid(theta.reshape(b * k, 2, 3), out_h, out_w)
    return bilinear_sample(Tensor(flat), grid).reshape(b, k, 4, out_h, out_w)


def composite_batch(layers: Tensor, background: np.ndarray) -> Tensor:
    """Composite ``B x K x 4 x H x W`` layers already in placement order."""
    return composite_scene({k: layers[:, k] for k in range(layers.shape[1])}, range(layers.shape[1]), background)


# ---------------------------------------------------------------------------
# model bundle and reports


@dataclass
class CompositionLossReport:
    l_layout: float
    l_image: float
    l_stn: float
    l_total: float
    d_layout: float = 0.0
    d_image: float = 0.0

    COMPONENTS = ("l_layout", "l_image", "l_stn")

    def as_row(self) -> dict[str, float]:
        return {
            "l_layout": self.l_layout,
            "l_image": self.l_image,
            "l_stn": self.l_stn,
            "l_total": self.l_total,
            "d_layout": self.d_layout,
            "d_image": self.d_image,
        }


def total_composition_loss(l_layout: float, l_image: float, l_stn: float, **discriminator_terms) -> CompositionLossReport:
    """Plain sum of the three components; the total is computed here, once."""
    l_layout, l_image, l_stn = float(l_layout), float(l_image), float(l_stn)
    return CompositionLossReport(l_layout, l_image, l_stn, l_layout + l_image + l_stn, **discriminator_terms)


@dataclass
class LayoutConfig:
    z_dim: int = 64
    canvas: int = 64
    hidden: int = 64
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    w_layout: float = 1.0
    w_image: float = 1.0
    w_stn: float = 1.0
    stn_pretrain_steps: int = 0


class CompositionModels:
    """G_layout, D_layout, G_comp and D_img plus the frozen flag."""

    def __init__(self, rng: np.random.Generator, cfg: LayoutConfig | None = None):
        cfg = cfg or LayoutConfig()
        self.cfg = cfg
        self.g_layout = LayoutGenerator(rng, cfg.z_dim, cfg.hidden)
        self.d_layout = LayoutDiscriminator(rng, cfg.hidden)
        self.g_comp = CompositionNet(rng)
        self.d_image = ImageDiscriminator(rng, cfg.canvas)
        # mean placement rank per category, learned from training scenes
        self.category_rank = np.arange(N_CATEGORIES, dtype=np.float64)
        self.frozen = False

    def groups(self) -> dict[str, Module]:
        return {"g_layout": self.g_layout, "d_layout": self.d_layout, "g_comp": self.g_comp, "d_image": self.d_image}

    def named_parameters(self):
        for prefix, mod in self.groups().items():
            yield from mod.named_parameters(prefix + ".")

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.named_parameters()}
        out["meta.category_rank"] = self.category_rank
        return out

    def load_state_dict(self, arrays: Mapping[str, np.ndarray]) -> None:
        if self.frozen:
            raise FrozenModelError("cannot load weights into frozen models")
        for prefix, mod in self.groups().items():
            mod.load_state_dict({k[len(prefix) + 1 :]: v for k, v in arrays.items() if k.startswith(prefix + ".")})
        if "meta.category_rank" in arrays:
            self.category_rank = np.array(arrays["meta.category_rank"], dtype=np.float64)

    def freeze(self) -> None:
        for mod in self.groups().values():
            mod.set_frozen(True)
        self.category_rank.flags.writeable = False
        self.frozen = True

    def unfreeze(self) -> None:
        for mod in self.groups().values():
            mod.set_frozen(False)
        self.category_rank = self.category_rank.copy()
        self.frozen = False

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, arr in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def make_optimizers(self) -> tuple[Adam, Adam]:
        c = self.cfg
        g = Adam(self.g_layout.parameters() + self.g_comp.parameters(), c.lr_g, (c.beta1, c.beta2))
        d = Adam(self.d_layout.parameters() + self.d_image.parameters(), c.lr_d, (c.beta1, c.beta2))
        return g, d

    def optimizer_param_names(self) -> tuple[list[str], list[str]]:
        g = [f"g_layout.{n}" for n, _ in self.g_layout.named_parameters()] + [
            f"g_comp.{n}" for n, _ in self.g_comp.named_parameters()
        ]
        d = [f"d_layout.{n}" for n, _ in self.d_layout.named_parameters()] + [
            f"d_image.{n}" for n, _ in self.d_image.named_parameters()
        ]
        return g, d

    def fit_category_rank(self, scenes: Sequence["Scene"]) -> None:
        sums = np.zeros(N_CATEGORIES)
        counts = np.zeros(N_CATEGORIES)
        from .dataset import CATEGORY_ID

        for sc in scenes:
            order = sc.placement_order()
            for rank, item_id in enumerate(order):
                c = CATEGORY_ID[sc.item(item_id).category]
                sums[c] += rank / max(1, len(order) - 1)
                counts[c] += 1
        rank = np.arange(N_CATEGORIES, dtype=np.float64) / N_CATEGORIES
        seen = counts > 0
        rank[seen] = sums[seen] / counts[seen]
        self.category_rank = rank

    def prior_order(self, category_ids: Sequence[int]) -> list[int]:
        """Placement order (indices into ``category_ids``) from category statistics."""
        return sorted(range(len(category_ids)), key=lambda i: (self.category_rank[category_ids[i]], i))


# ---------------------------------------------------------------------------
# single-item ops


def layout_generate(item_categories: Sequence[int], order: Sequence[int], noise, models: CompositionModels) -> list[LayoutBox]:
    """One box per item, returned in placement order."""
    if len(item_categories) == 0:
        raise ShapeError("layout_generate needs at least one item")
    if sorted(order) != list(range(len(item_categories))):
        raise ShapeError(f"order {list(order)} is not a permutation of {len(item_categories)} items")
    cats = np.array([[item_categories[i] for i in order]])
    noise = T.as_tensor(noise).reshape(1, -1)
    with T.no_grad():
        boxes = models.g_layout(cats, noise).data[0]
    return [LayoutBox(*map(float, b)) for b in boxes]


def layout_discriminate(boxes: Sequence[LayoutBox], item_categories: Sequence[int], models: CompositionModels) -> float:
    if len(boxes) != len(item_categories):
        raise ShapeError(f"{len(boxes)} boxes for {len(item_categories)} categories")
    arr = np.array([[b.as_tuple() for b in boxes]])
    with T.no_grad():
        return float(models.d_layout(Tensor(arr), np.array([item_categories])).data[0])


def layout_gan_loss(real_boxes: Tensor, fake_boxes: Tensor, categories: np.ndarray, models: CompositionModels) -> tuple[Tensor, Tensor]:
    d = models.d_layout
    return gan_terms(d(real_boxes, categories), d(fake_boxes, categories))


def category_counts(categories: np.ndarray) -> np.ndarray:
    categories = np.atleast_2d(categories)
    out = np.zeros((categories.shape[0], N_CATEGORIES))
    for b, row in enumerate(categories):
        for c in row:
            out[b, c] += 1.0
    return out


def image_gan_loss(real_scene: Tensor, fake_scene: Tensor, categories: np.ndarray, models: CompositionModels) -> tuple[Tensor, Tensor]:
    real_scene, fake_scene = T.as_tensor(real_scene), T.as_tensor(fake_scene)
    if real_scene.shape != fake_scene.shape:
        raise ShapeError(f"real {real_scene.shape} and fake {fake_scene.shape} scenes differ in shape")
    counts = category_counts(categories)
    d = models.d_image
    return gan_terms(d(real_scene, counts), d(fake_scene, counts))


def compose_item(item_image, box: LayoutBox, category: int, models: CompositionModels) -> tuple[Tensor, Tensor]:
    """Refined transform and the warped item for one cut-out."""
    item_image = T.as_tensor(item_image)
    if item_image.ndim != 3 or item_image.shape[0] != 4:
        raise ShapeError(f"item image must be RGBA 4 x H x W, got {item_image.shape}")
    box.validate()
    theta = models.g_comp(Tensor(np.array(box.as_tuple())), np.array(category))
    h, w = item_image.shape[1:]
    return theta, bilinear_sample(item_image, affine_grid(theta, h, w))


# ---------------------------------------------------------------------------
# training and inference


@dataclass
class LayoutBatch:
    """Scenes of one presentation type stacked in placement order."""

    categories: np.ndarray  # B x K
    boxes: np.ndarray  # B x K x 4
    cutouts: np.ndarray  # B x K x 4 x h x w
    backgrounds: np.ndarray  # B x 3 x H x W
    images: np.ndarray  # B x 3 x H x W
    targets: np.ndarray  # B x K x 4 x H x W

    @classmethod
    def from_scenes(cls, scenes: Sequence["Scene"]) -> "LayoutBatch":
        from .dataset import CATEGORY_ID

        ks = {len(s.items) for s in scenes}
        if len(ks) != 1:
            raise ShapeError(f"a batch needs scenes with equal item counts, got {sorted(ks)}")
        cats, boxes, cuts, tgts = [], [], [], []
        for s in scenes:
            order = s.placement_order()
            targets = s.transposed_targets()
            cats.append([CATEGORY_ID[s.item(i).category] for i in order])
            boxes.append([s.item(i).bbox.as_tuple() for i in order])
            cuts.append([s.item(i).cutout for i in order])
            tgts.append([targets[i] for i in order])
        return cls(
            np.array(cats),
            np.array(boxes, dtype=np.float64),
            np.array(cuts),
            np.stack([s.background for s in scenes]),
            np.stack([s.image() for s in scenes]),
            np.array(tgts),
        )

    def take(self, idx: np.ndarray) -> "LayoutBatch":
        return LayoutBatch(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))


def render(models: CompositionModels, categories: np.ndarray, boxes: Tensor, cutouts: np.ndarray, backgrounds: np.ndarray) -> Tensor:
    theta = models.g_comp(boxes, categories)
    h, w = backgrounds.shape[-2:]
    return composite_batch(warp_items(cutouts, theta, h, w), backgrounds)


def stn_term(models: CompositionModels, batch: LayoutBatch) -> Tensor:
    theta = models.g_comp(Tensor(batch.boxes), batch.categories)
    h, w = batch.targets.shape[-2:]
    warped = warp_items(batch.cutouts, theta, h, w)
    return T.absolute(warped - Tensor(batch.targets)).mean()


def train_step_composition(
    batch: LayoutBatch,
    models: CompositionModels,
    g_opt: Adam,
    d_opt: Adam,
    rng: np.random.Generator,
) -> CompositionLossReport:
    """One alternating update: discriminators first, then generators."""
    if models.frozen:
        raise FrozenModelError("models are frozen (testing phase); unfreeze before training")
    cfg = models.cfg
    b = batch.categories.shape[0]
    noise = Tensor(rng.standard_normal((b, cfg.z_dim)))
    fake_boxes = models.g_layout(batch.categories, noise)
    fake_scene = render(models, batch.categories, fake_boxes, batch.cutouts, batch.backgrounds)
    real_boxes, real_scene = Tensor(batch.boxes), Tensor(batch.images)

    d_opt.zero_grad()
    _, d_layout = layout_gan_loss(real_boxes, fake_boxes.detach(), batch.categories, models)
    _, d_image = image_gan_loss(real_scene, fake_scene.detach(), batch.categories, models)
    T.backward(d_layout + d_image)
    d_opt.step()

    g_opt.zero_grad()
    g_layout = bce_real(models.d_layout(fake_boxes, batch.categories))
    g_image = bce_real(models.d_image(fake_scene, category_counts(batch.categories)))
    l_stn = stn_term(models, batch)
    terms = (T.scale(g_layout, cfg.w_layout), T.scale(g_image, cfg.w_image), T.scale(l_stn, cfg.w_stn))
    T.backward(terms[0] + terms[1] + terms[2])
    g_opt.step()
    d_opt.zero_grad()
    return total_composition_loss(
        *(t.item() for t in terms), d_layout=d_layout.item(), d_image=d_image.item()
    )


def pretrain_stn_step(batch: LayoutBatch, models: CompositionModels, g_opt: Adam) -> float:
    """L_STN-only update of the composition net (separate-pretraining option)."""
    if models.frozen:
        raise FrozenModelError("models are frozen")
    g_opt.zero_grad()
    loss = stn_term(models, batch)
    T.backward(loss)
    for p in g_opt.params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    g_opt.step()
    return loss.item()


def infer_composition(
    item_images: Sequence[np.ndarray],
    categories: Sequence[int],
    noise,
    models: CompositionModels,
    background: np.ndarray | None = None,
) -> tuple[list[LayoutBox], np.ndarray]:
    """Frozen-weight forward pass: boxes per input item and the composite."""
    if not models.frozen:
        raise FrozenModelError("inference requires frozen models (call freeze() first)")
    if len(item_images) != len(categories) or not categories:
        raise ShapeError("need one category per item image and at least one item")
    order = models.prior_order(list(categories))
    cats = np.array([[categories[i] for i in order]])
    h, w = (models.cfg.canvas, models.cfg.canvas)
    if background is None:
        background = np.full((3, h, w), 0.2)
    with T.no_grad():
        boxes = models.g_layout(cats, T.as_tensor(noise).reshape(1, -1))
        cutouts = np.stack([item_images[i] for i in order])[None]
        image = render(models, cats, boxes, cutouts, background[None]).data[0]
    by_item = [None] * len(categories)
    for pos, i in enumerate(order):
        by_item[i] = LayoutBox(*map(float, boxes.data[0, pos]))
    return by_item, image
