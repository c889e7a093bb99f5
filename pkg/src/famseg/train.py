"""Training loop, evaluation, inference and model persistence."""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import checkpoint
from .data import SegmentationSample, save_mask, save_palette, stack
from .decoder import predict_mask
from .metrics import ConfusionMatrix, iou, report
from .model import FAMSeg, ModelConfig, segmentation_loss
from .optim import Phase, Schedule, alternate_train
from .tensor import NumericError, Tensor, grad, no_grad

LOSSES = ("cross_entropy", "ce_plus_dice")
THREADS_ENV = "FAMSEG_NUM_THREADS"


class DivergenceError(RuntimeError):
    def __init__(self, epoch, phase, optimizer, cause):
        super().__init__(f"training diverged in epoch {epoch} (phase {phase}, {optimizer}): {cause}")
        self.epoch, self.phase, self.optimizer = epoch, phase, optimizer


class IncompatibleError(ValueError):
    """Checkpoint and data (or config) disagree."""


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: Schedule = field(default_factory=Schedule)
    seed: int = 0
    loss: str = "cross_entropy"
    shards: int = 1  # >1 sums per-shard gradients before each step
    prior_bias: bool = True  # start the classifier bias at the log class frequencies of the training masks

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")
        if self.shards < 1:
            raise ValueError("shards must be >= 1")

    @property
    def batch_size(self) -> int:
        return self.schedule.batch_size

    @property
    def num_classes(self) -> int:
        return self.model.decoder.num_classes

    def with_ablation(self, mamba: bool | None = None, fusion: bool | None = None) -> "TrainConfig":
        enc, dec = self.model.encoder, self.model.decoder
        if mamba is not None:
            enc = replace(enc, mamba=mamba)
        if fusion is not None:
            dec = replace(dec, fusion=fusion)
        return replace(self, model=replace(self.model, encoder=enc, decoder=dec))

    def to_dict(self) -> dict:
        sched = asdict(self.schedule)
        sched["phases"] = [asdict(p) for p in self.schedule.phases]
        return {"model": self.model.to_dict(), "schedule": sched, "seed": self.seed, "loss": self.loss,
                "shards": self.shards, "prior_bias": self.prior_bias}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        sched = dict(d["schedule"])
        sched["phases"] = tuple(Phase(**p) for p in sched["phases"])
        return cls(ModelConfig.from_dict(d["model"]), Schedule(**sched), d["seed"], d["loss"], d.get("shards", 1),
                   d.get("prior_bias", True))


@dataclass
class TrainResult:
    model: FAMSeg
    log: list
    best_val: float
    best_epoch: int


# gradients ---------------------------------------------------------------------


def batch_loss(model, images, masks, kind="cross_entropy") -> Tensor:
    return segmentation_loss(model(images), masks, kind)


def _pairwise_sum(parts):
    while len(parts) > 1:
        nxt = [[a + b for a, b in zip(parts[i], parts[i + 1])] for i in range(0, len(parts) - 1, 2)]
        if len(parts) % 2:
            nxt.append(parts[-1])
        parts = nxt
    return parts[0]


def loss_and_grads(model, images, masks, kind="cross_entropy", shards=1, threads=None):
    """``(loss, grads)`` for one batch.

    With ``shards > 1`` the batch is split along N, each shard's loss is
    weighted by its share of the batch and the shard gradients are summed in a
    fixed pairwise order. Plain cross-entropy is a per-pixel mean, so this
    matches the single-graph result up to summation order; the Dice term is
    a batch statistic and is only exact in single-shard mode.
    """
    params = model.parameters()
    n = len(images)
    if shards <= 1 or n < 2:
        loss = batch_loss(model, images, masks, kind)
        return float(loss.data), grad(loss, params)
    bounds = np.linspace(0, n, min(shards, n) + 1).round().astype(int)
    pieces = [(images[a:b], masks[a:b], (b - a) / n) for a, b in zip(bounds[:-1], bounds[1:])]

    def one(piece):
        x, y, w = piece
        loss = batch_loss(model, x, y, kind) * w
        return float(loss.data), grad(loss, params)

    threads = threads or int(os.environ.get(THREADS_ENV, "1"))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(one, pieces))
    else:
        results = [one(p) for p in pieces]
    return float(sum(r[0] for r in results)), _pairwise_sum([r[1] for r in results])


# evaluation ----------------------------------------------------------------------


def predict(model, images, batch_size=16) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            out.append(predict_mask(model(images[i : i + batch_size])))
    return np.concatenate(out).astype(np.uint8)


def evaluate(model, samples, batch_size=16) -> ConfusionMatrix:
    check_classes(model, samples)
    images, masks = stack(samples)
    cm = ConfusionMatrix(model.cfg.decoder.num_classes)
    return cm.accumulate(masks, predict(model, images, batch_size))


def evaluate_report(model, samples, title="evaluation") -> tuple[ConfusionMatrix, str]:
    cm = evaluate(model, samples)
    return cm, report(cm, title)


def check_classes(model, samples) -> None:
    c = model.cfg.decoder.num_classes
    for s in samples:
        top = int(s.mask.max()) if s.mask.size else 0
        if top >= c:
            raise IncompatibleError(f"data contains class {top} but the model predicts {c} classes")


def infer(model, image: np.ndarray, out_path, palette_path=None) -> np.ndarray:
    """Predict one ``(3, H, W)`` image, write the index PNG and optionally the palette PNG."""
    mask = predict(model, image[None])[0]
    c = model.cfg.decoder.num_classes
    save_mask(mask, out_path, c)
    if palette_path is not None:
        save_palette(mask, palette_path, c)
    return mask


# persistence ---------------------------------------------------------------------


def save_model(path, model: FAMSeg, train_cfg: TrainConfig | None = None, meta=None, optimizer=None) -> None:
    config = {"model": model.cfg.to_dict()}
    if train_cfg is not None:
        config["train"] = train_cfg.to_dict()
    tensors = {f"param/{k}": v for k, v in model.state_dict().items()}
    if optimizer is not None:
        tensors.update({f"optim/{k}": v for k, v in optimizer.state_arrays().items()})
    checkpoint.save(path, config, tensors, meta)


def load_model(path) -> tuple[FAMSeg, dict, dict, dict]:
    """Returns ``(model, config, meta, optimizer arrays)``."""
    config, tensors, meta = checkpoint.load(path)
    try:
        model = FAMSeg(ModelConfig.from_dict(config["model"]))
    except (KeyError, TypeError, ValueError) as e:
        raise IncompatibleError(f"{path}: cannot rebuild model from stored config: {e}") from e
    params = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
    try:
        model.load_state_dict(params)
    except (KeyError, ValueError) as e:
        raise IncompatibleError(f"{path}: {e}") from e
    optim = {k[len("optim/"):]: v for k, v in tensors.items() if k.startswith("optim/")}
    return model, config, meta, optim


# training ------------------------------------------------------------------------


def class_prior_bias(masks, num_classes, floor=1e-4) -> np.ndarray:
    """Log pixel frequency per class, so the untrained classifier already predicts the class balance."""
    counts = np.bincount(np.asarray(masks).reshape(-1), minlength=num_classes)[:num_classes]
    return np.log(np.maximum(counts / counts.sum(), floor))


def _batches(images, masks, batch_size, seed, epoch):
    order = np.random.default_rng([seed, epoch]).permutation(len(images))
    for i in range(0, len(order), batch_size):
        idx = order[i : i + batch_size]
        yield images[idx], masks[idx]


def train(cfg: TrainConfig, train_data: list[SegmentationSample], val_data: list[SegmentationSample],
          out_dir=None, resume=None, config_text: str | None = None, on_record=None) -> TrainResult:
    """Train from scratch (or from ``resume``, a checkpoint path) through every schedule phase.

    Each epoch's record (epoch, phase, optimizer, lr, train_loss, val_mIoU) is
    appended to ``out_dir/log.jsonl``. ``out_dir/last.ck`` holds the full
    training state after every epoch and ``out_dir/best.ck`` the model with
    the highest validation mIoU so far.
    """
    if not train_data or not val_data:
        raise ValueError("train and validation sets must be non-empty")
    model = FAMSeg(cfg.model, seed=cfg.seed)
    check_classes(model, train_data)
    check_classes(model, val_data)
    dtype = np.float64 if cfg.model.dtype == "float64" else np.float32
    images, masks = stack(train_data)
    images = images.astype(dtype)
    if cfg.prior_bias:
        model.decoder.classifier.bias.data[:] = class_prior_bias(masks, cfg.num_classes)
    params = model.parameters()

    start, best_val, best_epoch, log, restore = 0, -1.0, -1, [], None
    if resume is not None:
        saved, config, meta, optim = load_model(resume)
        if config.get("train") != json.loads(json.dumps(cfg.to_dict())):
            raise IncompatibleError(f"{resume}: training config differs from the checkpoint")
        model.load_state_dict(saved.state_dict())
        start, best_val, best_epoch = meta["epoch"] + 1, meta["best_val"], meta["best_epoch"]
        log = list(meta.get("log", []))

        def restore_optimizer(opt):
            # moments only carry over when the resumed epoch is still in the saved phase
            if cfg.schedule.locate(start)[0] == meta["phase"]:
                opt.load_state_arrays(optim, meta["t"])

        restore = restore_optimizer

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if resume is None:
            (out / "log.jsonl").write_text("")
            if config_text is not None:
                (out / "config.txt").write_text(config_text)

    current = {"epoch": start}

    def batches(epoch):
        current["epoch"] = epoch
        return _batches(images, masks, cfg.batch_size, cfg.seed, epoch)

    def step(batch):
        loss, grads = loss_and_grads(model, *batch, kind=cfg.loss, shards=cfg.shards)
        if not np.isfinite(loss):
            raise NumericError(f"loss is {loss}")
        return loss, grads

    def on_epoch(epoch, rec, opt):
        nonlocal best_val, best_epoch
        if not np.isfinite(rec["train_loss"]):
            raise NumericError("non-finite mean training loss")
        _, miou = iou(evaluate(model, val_data))
        rec["val_mIoU"] = miou
        if miou > best_val:
            best_val, best_epoch = miou, epoch
            if out is not None:
                save_model(out / "best.ck", model, cfg, {"epoch": epoch, "val_mIoU": miou})
        log.append(rec)
        if out is not None:
            with open(out / "log.jsonl", "a") as fh:
                fh.write(json.dumps(rec) + "\n")
            meta = {"epoch": epoch, "phase": rec["phase"], "t": opt.state.t, "best_val": best_val,
                    "best_epoch": best_epoch, "log": log}
            save_model(out / "last.ck", model, cfg, meta, optimizer=opt)
        if on_record is not None:
            on_record(rec)

    try:
        alternate_train(cfg.schedule, params, step, batches, on_epoch, start_epoch=start, restore=restore)
    except NumericError as e:
        epoch = current["epoch"]
        pi, _ = cfg.schedule.locate(epoch)
        raise DivergenceError(epoch, pi, cfg.schedule.phases[pi].optimizer, e) from e
    return TrainResult(model, log, best_val, best_epoch)
