"""Training, generation and evaluation drivers shared by the CLI and tests.

Every training step draws its randomness from ``default_rng([seed, step])``,
so a run resumed from a checkpoint replays the same batches and noise. After
each checkpoint the live weights and optimizer moments are replaced by their
stored float32 form, which makes a resumed run bit-identical to an
uninterrupted one.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import captions as cap
from . import layout as L
from . import t2i
from .boxes import LayoutBox
from .checkpoint import Checkpoint, CheckpointError, checkpoint_load, checkpoint_save
from .config import RunConfig, parse_pairs
from .dataset import CATEGORY_ID, Scene
from .metrics import mean_iou
from .ordering import order_metrics, recover_scene_order

CHECKPOINT_NAME = "checkpoint.bnt"
METRICS_NAME = "metrics.csv"
LOG_NAME = "run.log"


class DataError(ValueError):
    pass


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, step])


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def config_from_checkpoint(ckpt: Checkpoint) -> RunConfig:
    return RunConfig().with_overrides(parse_pairs(ckpt.config_text.splitlines(), "checkpoint"), "checkpoint")


# ---------------------------------------------------------------------------
# model bundles: build, snapshot, restore


class _Bundle:
    """Models plus their two optimizers, with a uniform checkpoint interface."""

    pipeline = ""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.models = self._build(np.random.default_rng([cfg.seed, 0]))
        self.g_opt, self.d_opt = self._optimizers()

    def _build(self, rng):  # pragma: no cover - abstract
        raise NotImplementedError

    def _optimizers(self):  # pragma: no cover - abstract
        raise NotImplementedError

    def snapshot(self, step: int) -> Checkpoint:
        g_names, d_names = self.models.optimizer_param_names()
        arrays = dict(self.models.state_dict())
        arrays.update({f"opt.g.{k}": v for k, v in self.g_opt.state_arrays(g_names).items()})
        arrays.update({f"opt.d.{k}": v for k, v in self.d_opt.state_arrays(d_names).items()})
        arrays["opt.g.step"] = np.array([self.g_opt.state.step], dtype=np.uint64)
        arrays["opt.d.step"] = np.array([self.d_opt.state.step], dtype=np.uint64)
        return Checkpoint(arrays, step, self.cfg.hash(), self.pipeline, self.cfg.to_text())

    def restore(self, ckpt: Checkpoint, with_optimizers: bool = True) -> None:
        if ckpt.pipeline != self.pipeline:
            raise CheckpointError(f"checkpoint is for the {ckpt.pipeline!r} pipeline, not {self.pipeline!r}")
        model_arrays = {k: v for k, v in ckpt.arrays.items() if not k.startswith("opt.")}
        self.models.load_state_dict({k: np.asarray(v, dtype=np.float64) for k, v in model_arrays.items()})
        if with_optimizers:
            g_names, d_names = self.models.optimizer_param_names()
            for opt, names, tag in ((self.g_opt, g_names, "g"), (self.d_opt, d_names, "d")):
                prefix = f"opt.{tag}."
                sub = {k[len(prefix) :]: v for k, v in ckpt.arrays.items() if k.startswith(prefix)}
                opt.load_state_arrays(names, sub, int(sub["step"][0]))


class LayoutBundle(_Bundle):
    pipeline = "layout"

    def _build(self, rng):
        return L.CompositionModels(rng, self.cfg.layout_config())

    def _optimizers(self):
        return self.models.make_optimizers()


class T2IBundle(_Bundle):
    pipeline = "t2i"

    def _build(self, rng):
        return t2i.T2IModels(rng, self.cfg.stage_config())

    def _optimizers(self):
        c = self.cfg
        return self.models.make_optimizers(c.lr_g, c.t2i_lr_d, (c.beta1, c.beta2))


BUNDLES = {"layout": LayoutBundle, "t2i": T2IBundle}


# ---------------------------------------------------------------------------
# metrics log


class MetricsLog:
    """CSV with a fixed header; floats written with ``repr`` for round-tripping."""

    def __init__(self, path: Path, columns: Sequence[str]):
        self.path = path
        self.columns = ["step", *columns]

    def start(self, resume_step: int | None) -> None:
        rows = []
        if resume_step is not None and self.path.exists():
            with self.path.open(newline="") as fh:
                rows = [r for r in csv.DictReader(fh) if int(r["step"]) <= resume_step]
        with self.path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns)
            for r in rows:
                w.writerow([r[c] for c in self.columns])

    def append(self, step: int, row: dict[str, float]) -> None:
        with self.path.open("a", newline="") as fh:
            csv.writer(fh).writerow([step] + [repr(float(row[c])) for c in self.columns[1:]])


def read_metrics(path: str | Path) -> list[dict[str, float]]:
    with Path(path).open(newline="") as fh:
        return [{k: float(v) for k, v in r.items()} for r in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    bundle: _Bundle
    step: int
    checkpoint: Path
    metrics: Path
    rows: list[dict[str, float]]


def _types_present(scenes: Sequence[Scene]) -> list[int]:
    return sorted({s.type_id for s in scenes})


def _layout_step(bundle: LayoutBundle, batches: dict, types: list[int], step: int) -> dict[str, float]:
    cfg, models = bundle.cfg, bundle.models
    rng = step_rng(cfg.seed, step)
    batch = batches[types[(step - 1) % len(types)]]
    n = batch.categories.shape[0]
    sub = batch.take(np.sort(rng.choice(n, size=min(cfg.batch_size, n), replace=False)))
    if step <= cfg.stn_pretrain_steps:
        l_stn = L.pretrain_stn_step(sub, models, bundle.g_opt)
        return L.total_composition_loss(0.0, 0.0, l_stn).as_row()
    return L.train_step_composition(sub, models, bundle.g_opt, bundle.d_opt, rng).as_row()


def _t2i_step(bundle: T2IBundle, scenes: Sequence[Scene], step: int) -> dict[str, float]:
    cfg = bundle.cfg
    rng = step_rng(cfg.seed, step)
    idx = np.sort(rng.choice(len(scenes), size=min(cfg.batch_size, len(scenes)), replace=False))
    batch = t2i.T2IBatch.from_scenes([scenes[i] for i in idx], rng)
    if batch.images.shape[-1] != cfg.resolutions[-1]:
        batch.images = t2i.downsample_to(batch.images, cfg.resolutions[-1])
    return t2i.train_step_t2i(batch, bundle.models, bundle.g_opt, bundle.d_opt, rng).as_row()


def layout_columns() -> list[str]:
    return ["l_layout", "l_image", "l_stn", "l_total", "d_layout", "d_image"]


def t2i_columns(num_stages: int) -> list[str]:
    cols = [f"l_g_{m}" for m in range(num_stages)] + [f"l_id_{m}" for m in range(num_stages)]
    cols += [f"l_d_{m}" for m in range(num_stages)]
    return cols + ["l_id", "l_cycle", "l_g_total", "l_d_total", "l_caption"]


def train(
    pipeline: str,
    cfg: RunConfig,
    scenes: Sequence[Scene],
    out_dir: str | Path,
    resume: str | Path | None = None,
    force: bool = False,
    on_step: Callable[[int, dict[str, float]], None] | None = None,
) -> TrainResult:
    """Run (or continue) a training loop, writing checkpoint, metrics and run log."""
    if pipeline not in BUNDLES:
        raise ValueError(f"unknown pipeline {pipeline!r}; choose from {sorted(BUNDLES)}")
    if not scenes:
        raise DataError("training needs at least one scene")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bundle = BUNDLES[pipeline](cfg)
    start = 0
    if resume is not None:
        ckpt = checkpoint_load(resume)
        if ckpt.pipeline != pipeline:
            raise CheckpointError(f"cannot resume {pipeline} training from a {ckpt.pipeline} checkpoint")
        ckpt.check_config(cfg.hash(), force)
        bundle.restore(ckpt)
        start = ckpt.step
    for s in scenes:
        s.image()  # render once up front

    if pipeline == "layout":
        bundle.models.fit_category_rank(scenes)
        types = _types_present(scenes)
        batches = {t: L.LayoutBatch.from_scenes([s for s in scenes if s.type_id == t]) for t in types}
        columns = layout_columns()

        def step_fn(k):
            return _layout_step(bundle, batches, types, k)

    else:
        columns = t2i_columns(cfg.num_stages)

        def step_fn(k):
            return _t2i_step(bundle, scenes, k)

    log = MetricsLog(out / METRICS_NAME, columns)
    log.start(start if resume is not None else None)
    with (out / LOG_NAME).open("a" if resume is not None else "w", encoding="utf-8") as run_log:
        run_log.write(f"# pipeline = {pipeline}\n# resume_from_step = {start}\n")
        run_log.write(cfg.to_text())
        ckpt_path = out / CHECKPOINT_NAME
        rows = []
        step = start
        for step in range(start + 1, cfg.steps + 1):
            row = step_fn(step)
            log.append(step, row)
            rows.append(row)
            if on_step is not None:
                on_step(step, row)
            if step % cfg.checkpoint_every == 0 or step == cfg.steps:
                _checkpoint(bundle, step, ckpt_path)
                run_log.write(f"# checkpoint step {step}\n")
        if step == start:
            _checkpoint(bundle, step, ckpt_path)
    return TrainResult(bundle, step, ckpt_path, out / METRICS_NAME, rows)


def _checkpoint(bundle: _Bundle, step: int, path: Path) -> None:
    ckpt = bundle.snapshot(step)
    checkpoint_save(path, ckpt)
    bundle.restore(checkpoint_load(path))


def load_bundle(path: str | Path, cfg: RunConfig | None = None) -> tuple[_Bundle, Checkpoint]:
    """Models from a checkpoint; ``cfg`` defaults to the embedded config."""
    ckpt = checkpoint_load(path)
    if ckpt.pipeline not in BUNDLES:
        raise CheckpointError(f"checkpoint names unknown pipeline {ckpt.pipeline!r}")
    bundle = BUNDLES[ckpt.pipeline](cfg or config_from_checkpoint(ckpt))
    bundle.restore(ckpt, with_optimizers=False)
    return bundle, ckpt


# ---------------------------------------------------------------------------
# frozen-phase generation


def scene_categories(scene: Scene) -> list[int]:
    return [CATEGORY_ID[it.category] for it in scene.items]


def generate_layouts(
    models: L.CompositionModels, scene: Scene, samples: int, seed: int
) -> list[tuple[list[LayoutBox], np.ndarray]]:
    """``samples`` (boxes per item, composite) pairs for the scene's items."""
    cats = scene_categories(scene)
    images = [it.cutout for it in scene.items]
    out = []
    for k in range(samples):
        noise = np.random.default_rng([seed, k]).standard_normal(models.cfg.z_dim)
        out.append(L.infer_composition(images, cats, noise, models, scene.background))
    return out


def generate_from_captions(models: t2i.T2IModels, captions: Sequence[str], samples: int, seed: int) -> list[list[list[np.ndarray]]]:
    """Per caption, per sample, the stage images in [0, 1]."""
    out = []
    for caption in captions:
        tokens = cap.tokenize(caption)
        per_sample = []
        for k in range(samples):
            noise = np.random.default_rng([seed, k]).standard_normal((1, models.cfg.z_dim))
            stages = t2i.generate_images([tokens], noise, models)
            per_sample.append([(im[0] + 1.0) / 2.0 for im in stages])
        out.append(per_sample)
    return out


# ---------------------------------------------------------------------------
# evaluation


def evaluate_layout(models: L.CompositionModels, scenes: Sequence[Scene], seed: int = 0) -> dict[str, float]:
    if not scenes:
        raise DataError("evaluation needs at least one scene")
    pred, truth, l1, order_acc, recovered = [], [], [], [], []
    for i, sc in enumerate(scenes):
        order = sc.placement_order()
        cats = [CATEGORY_ID[sc.item(j).category] for j in order]
        noise = np.random.default_rng([seed, i]).standard_normal(models.cfg.z_dim)
        pred.append(L.layout_generate(cats, list(range(len(cats))), noise, models))
        gt_boxes = [sc.item(j).bbox for j in order]
        truth.append(gt_boxes)
        prior = [order[p] for p in models.prior_order(cats)]
        order_acc.append(order_metrics(prior, order).pairwise_accuracy)
        recovered.append(order_metrics(recover_scene_order(sc), order).pairwise_accuracy)
        batch = L.LayoutBatch.from_scenes([sc])
        with L.T.no_grad():
            comp = L.render(models, batch.categories, L.Tensor(batch.boxes), batch.cutouts, batch.backgrounds)
        l1.append(float(np.mean(np.abs(comp.data[0] - sc.image()))))
    return {
        "scenes": float(len(scenes)),
        "mean_iou": mean_iou(pred, truth),
        "prior_order_pairwise_accuracy": float(np.mean(order_acc)),
        "recovered_order_pairwise_accuracy": float(np.mean(recovered)),
        "composite_l1": float(np.mean(l1)),
    }


def evaluate_t2i(models: t2i.T2IModels, scenes: Sequence[Scene], seed: int = 0) -> dict[str, float]:
    if not scenes:
        raise DataError("evaluation needs at least one scene")
    cfg = models.cfg
    report = {"scenes": float(len(scenes))}
    report["class_accuracy"] = t2i.class_accuracy(scenes, models, np.random.default_rng([seed, 0]))
    tokens = [cap.tokenize(s.captions[0]) for s in scenes]
    stages = t2i.generate_images(tokens, np.random.default_rng([seed, 1]).standard_normal((len(scenes), cfg.z_dim)), models)
    real = np.stack([s.image() for s in scenes]) * 2.0 - 1.0
    for m, r in enumerate(cfg.resolutions):
        report[f"l_id_{m}"] = float(np.mean(np.abs(stages[m] - t2i.downsample_to(real, r))))
    return report


def format_report(report: dict[str, float]) -> str:
    return "".join(f"{k} = {v!r}\n" for k, v in report.items())


def parse_report(text: str) -> dict[str, float]:
    return {k: float(v) for k, v in parse_pairs(text.splitlines(), "report")}

