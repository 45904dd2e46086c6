"""Patch-based training with Adam, validation, checkpointing and the
four-configuration ablation."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .annotations import Split, split_train_val
from .autodiff.optim import AdamState, adam_step
from .autodiff.tensor import backward
from .checkpoint import save_checkpoint
from .density import DensityMap, GaussianSpec, rasterize, target_pyramid
from .errors import DivergenceError, UsageError
from .evaluation import EvalReport, emit_report, evaluate, mae_mse
from .loss import LossConfig, model_loss
from .model import ModelConfig, ModelState, forward, infer_count, init_model
from .synthcrowd import read_ppm

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "l_f", "l_d", "l_c", "grad_norm", "val_mae")


@dataclass(frozen=True)
class TrainConfig:
    crop_size: int = 224
    crops_per_image: int = 4
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 0
    batch_size: int = 4
    seed: int = 0
    loss: LossConfig = LossConfig()
    model: ModelConfig = ModelConfig()
    checkpoint_every: int = 100
    sigma: float = 4.0
    val_fraction: float = 0.10

    def __post_init__(self):
        if self.crop_size % 32 or self.crop_size <= 0:
            raise UsageError(f"crop_size must be a positive multiple of 32, got {self.crop_size}")
        if self.batch_size < 1 or self.crops_per_image < 1 or self.steps < 0 or self.checkpoint_every < 1:
            raise UsageError("batch_size, crops_per_image, checkpoint_every must be >= 1 and steps >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class Sample:
    record: object
    image: np.ndarray
    density: DensityMap | None = None


def load_corpus(records, images_dir) -> list[Sample]:
    images_dir = Path(images_dir)
    return [Sample(r, read_ppm(images_dir / f"{r.id}.ppm")) for r in records]


def image_loader(images_dir):
    images_dir = Path(images_dir)
    return lambda rec: read_ppm(images_dir / f"{rec.id}.ppm")


def sample_patch(record, image, density_full: DensityMap, crop_size: int, rng):
    """Random crop of the image and its density; returns (patch, {scale: target}).

    The target is cut from the full-resolution map before pooling, so a
    head straddling the crop border contributes only its in-window mass.
    """
    _, h, w = image.shape
    if h < crop_size or w < crop_size:
        raise ValueError(f"image {record.id} ({w}x{h}) smaller than crop {crop_size}")
    top = int(rng.integers(0, h - crop_size + 1))
    left = int(rng.integers(0, w - crop_size + 1))
    patch = image[:, top:top + crop_size, left:left + crop_size]
    crop = DensityMap(density_full.values[top:top + crop_size, left:left + crop_size], 1)
    pyramid = {i: m.values for i, m in target_pyramid(crop).items()}
    return patch, pyramid


class PatchStream:
    """Endless shuffled stream of patches, ``crops_per_image`` per image per pass."""

    def __init__(self, samples: list[Sample], config: TrainConfig, rng):
        self.samples = samples
        self.config = config
        self.rng = rng
        self._queue: list[int] = []

    def _refill(self):
        order = np.repeat(np.arange(len(self.samples)), self.config.crops_per_image)
        self._queue = list(self.rng.permutation(order))

    def next_batch(self):
        patches, targets = [], {i: [] for i in (3, 4, 5, 6)}
        for _ in range(self.config.batch_size):
            if not self._queue:
                self._refill()
            s = self.samples[self._queue.pop()]
            p, t = sample_patch(s.record, s.image, s.density, self.config.crop_size, self.rng)
            patches.append(p)
            for i in t:
                targets[i].append(t[i][None])
        return np.stack(patches), {i: np.stack(v) for i, v in targets.items()}


def batch_loss(state: ModelState, images, targets, loss_cfg: LossConfig, requires_grad=False):
    out = forward(state, images, requires_grad=requires_grad)
    return out, model_loss(out, targets, loss_cfg)


@dataclass
class TrainResult:
    state: ModelState
    best_state: ModelState
    best_val_mae: float | None
    log_rows: list = field(default_factory=list)
    header: dict = field(default_factory=dict)
    initial_terms: tuple | None = None  # (l_f, l_d, l_c) of the first batch at initial weights

    def log_lines(self) -> list[str]:
        rows = [json.dumps(self.header, sort_keys=True)]
        rows += [json.dumps(r, sort_keys=True) for r in self.log_rows]
        return rows

    def write_log(self, path) -> None:
        Path(path).write_text("\n".join(self.log_lines()) + "\n", encoding="utf-8")


def validation_mae(state: ModelState, samples: list[Sample]) -> float | None:
    if not samples:
        return None
    gt = [s.record.count for s in samples]
    pred = [infer_count(state, s.image)[0] for s in samples]
    return mae_mse(gt, pred)[0]


def prepare_samples(samples: list[Sample], config: TrainConfig) -> list[Sample]:
    spec = GaussianSpec(config.sigma)
    kept = []
    for s in samples:
        _, h, w = s.image.shape
        if h < config.crop_size or w < config.crop_size:
            log.warning("skipping %s: %dx%d smaller than crop %d", s.record.id, w, h, config.crop_size)
            continue
        if s.density is None:
            s = Sample(s.record, s.image, rasterize(s.record.points(), (w, h), spec))
        kept.append(s)
    return kept


def train(
    corpus: list[Sample],
    config: TrainConfig,
    val: list[Sample] | None = None,
    checkpoint_dir=None,
    init_state: ModelState | None = None,
) -> TrainResult:
    """Train on the non-test samples of ``corpus``.

    When ``val`` is None, ``val_fraction`` of the training images (by whole
    image) is held out first. Validation images never enter the patch stream.
    Rows are logged per step with the loss of that step's batch evaluated at
    the pre-update weights; ``val_mae`` is filled every ``checkpoint_every``
    steps and on the last step.
    """
    train_samples = [s for s in corpus if s.record.split is not Split.TEST]
    if val is None:
        train_samples = [s for s in train_samples if s.record.split is not Split.VAL] or train_samples
        if len(train_samples) < 2:
            raise UsageError(f"need at least 2 training images, got {len(train_samples)}")
        by_id = {s.record.id: s for s in train_samples}
        tr, va = split_train_val([s.record for s in train_samples], config.val_fraction, config.seed)
        val = [Sample(r, by_id[r.id].image) for r in va]
        train_samples = [Sample(r, by_id[r.id].image, by_id[r.id].density) for r in tr]
    train_samples = prepare_samples(train_samples, config)
    if len(train_samples) < 1 or (len(train_samples) < 2 and config.steps > 0):
        raise UsageError(f"need at least 2 usable training images, got {len(train_samples)}")
    val_ids = {s.record.id for s in val}
    assert not val_ids & {s.record.id for s in train_samples}

    state = init_state.copy() if init_state is not None else init_model(config.model, config.seed)
    adam = AdamState(lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    rng = np.random.default_rng([config.seed, 1])
    stream = PatchStream(train_samples, config, rng)
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    header = {
        "columns": list(LOG_COLUMNS),
        "config_digest": config.digest(),
        "n_train": len(train_samples),
        "n_val": len(val),
    }
    result = TrainResult(state, state, None, [], header)
    best_mae = math.inf

    for step in range(1, config.steps + 1):
        images, targets = stream.next_batch()
        out, terms = batch_loss(state, images, targets, config.loss, requires_grad=True)
        lf = float(terms.l_f.data)
        if not math.isfinite(lf):
            raise DivergenceError(f"non-finite L_f ({lf}) at step {step}")
        backward(terms.l_f)
        grads = {k: t.grad for k, t in out.params.items() if t.grad is not None}
        gnorm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
        adam_step(state.params, grads, adam)
        if step == 1:
            result.initial_terms = (lf, float(terms.l_d.data), float(terms.l_c.data))

        row = {"step": step, "l_f": lf, "l_d": float(terms.l_d.data), "l_c": float(terms.l_c.data),
               "grad_norm": gnorm, "val_mae": None}
        if step % config.checkpoint_every == 0 or step == config.steps:
            vm = validation_mae(state, val)
            row["val_mae"] = vm
            if vm is not None and vm < best_mae:
                best_mae = vm
                result.best_state = state.copy()
                result.best_val_mae = vm
                if ckpt_dir is not None:
                    save_checkpoint(state, ckpt_dir / "best.ckpt", step, config.digest())
            if ckpt_dir is not None:
                save_checkpoint(state, ckpt_dir / f"step{step:06d}.ckpt", step, config.digest())
            log.info("step %d  L_f %.4f  val MAE %s", step, lf, vm)
        result.log_rows.append(row)

    if result.best_val_mae is None:
        result.best_state = state
    return result


def probe_loss(state: ModelState, samples: list[Sample], config: TrainConfig, n_patches: int = 8, seed: int = 12345):
    """Mean (L_f, L_d, L_c) over a fixed set of training patches."""
    samples = prepare_samples(samples, config)
    rng = np.random.default_rng(seed)
    cfg = replace(config, batch_size=1, crops_per_image=1)
    stream = PatchStream(samples, cfg, rng)
    acc = np.zeros(3)
    for _ in range(n_patches):
        images, targets = stream.next_batch()
        _, t = batch_loss(state, images, targets, config.loss)
        acc += [float(t.l_f.data), float(t.l_d.data), float(t.l_c.data)]
    return tuple(acc / n_patches)


ABLATION_ROWS = (
    ("Base network", dict(enable_residual=False, enable_uceb=False), 0.0),
    ("Base network + R", dict(enable_residual=True, enable_uceb=False), 0.0),
    ("Base network + R + UCEB (λ_c=0)", dict(enable_residual=True, enable_uceb=True), 0.0),
    ("Base network + R + UCEB (λ_c=1)", dict(enable_residual=True, enable_uceb=True), 1.0),
)


@dataclass
class AblationRow:
    label: str
    config: TrainConfig
    report: EvalReport
    train: TrainResult


def ablation_suite(corpus: list[Sample], base: TrainConfig, test: list[Sample] | None = None) -> list[AblationRow]:
    """Train and evaluate the four ablation configurations with a shared seed
    and step budget. Evaluation uses the test split (or the given ``test``)."""
    if test is None:
        test = [s for s in corpus if s.record.split is Split.TEST]
    images = {s.record.id: s.image for s in test}
    rows = []
    for label, model_kw, lam in ABLATION_ROWS:
        cfg = replace(base, model=replace(base.model, **model_kw), loss=replace(base.loss, lambda_c=lam))
        log.info("ablation: %s", label)
        res = train(corpus, cfg)
        report = evaluate(res.state, [s.record for s in test], lambda r: images[r.id])
        rows.append(AblationRow(label, cfg, report, res))
    return rows


def ablation_table(rows: list[AblationRow]) -> str:
    from .annotations import Category

    width = max(len(r.label) for r in rows) + 2
    lines = ["Method".ljust(width) + "MAE".rjust(10) + "MSE".rjust(10), "-" * (width + 20)]
    for r in rows:
        s = r.report.buckets[Category.OVERALL]
        fmt = lambda v: "—" if v is None else f"{v:.2f}"  # noqa: E731
        lines.append(r.label.ljust(width) + fmt(s.mae).rjust(10) + fmt(s.mse).rjust(10))
    return "\n".join(lines) + "\n"


__all__ = [
    "ABLATION_ROWS", "AblationRow", "PatchStream", "Sample", "TrainConfig", "TrainResult",
    "ablation_suite", "ablation_table", "emit_report", "image_loader", "load_corpus", "probe_loss",
    "sample_patch", "train", "validation_mae",
]
