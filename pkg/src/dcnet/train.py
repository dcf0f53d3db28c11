"""SGD training and evaluation loops, metrics CSV and per-epoch checkpoints."""

from __future__ import annotations

import csv
import io
import os
import time
from dataclasses import dataclass

import numpy as np

from . import checkpoint as ckpt_io
from .config import to_config_text
from .data import Dataset, augment, batches, epoch_multiplier, subset_small_data
from .engine import NonFiniteError, Tensor, cross_entropy, mse_loss, no_grad
from .model import ModelSpec, block_sigmas, build_autoencoder, build_model
from .srf import ScaleOverflowError

METRICS_HEADER = (
    "epoch,split,loss,accuracy,mse,nfe_block1,nfe_block2,nfe_block3,"
    "sigma_block1,sigma_block2,sigma_block3,lr,wall_seconds"
).split(",")
CHECKPOINT_NAME = "checkpoint.dcn"
METRICS_NAME = "metrics.csv"


class TrainingDiverged(RuntimeError):
    """Loss or a scale parameter blew up; the last good checkpoint is kept."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    decay_epochs: tuple[int, ...] = (40, 70)
    decay_factor: float = 0.1
    seed: int = 0
    variant: str = "dcn_ode"
    widths: tuple[int, ...] = (64, 128, 256)
    task: str = "classify"
    images_per_class: int | None = None
    epoch_multiplier: int | None = None  # None: derived from the training-set size
    train_limit: int | None = None  # use only this many training images (seeded draw)
    eval_limit: int | None = None  # evaluate on the first N test images; 0 disables
    eval_train: bool = False  # also evaluate the un-augmented training set each epoch
    augment: bool = True
    rtol: float = 1e-3
    atol: float = 1e-3
    target_train_accuracy: float | None = None  # stop early once eval_train reaches it
    data_dir: str = "data/cifar-10-batches-bin"

    def __post_init__(self):
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    def model_spec(self) -> ModelSpec:
        return ModelSpec(self.variant, tuple(self.widths), task=self.task, rtol=self.rtol, atol=self.atol)

    def total_epochs(self, n_train: int) -> int:
        mult = self.epoch_multiplier if self.epoch_multiplier is not None else epoch_multiplier(n_train)
        return self.epochs * mult


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Step schedule: lr times decay_factor for every decay epoch already reached."""
    n = sum(1 for e in cfg.decay_epochs if epoch >= e)
    return cfg.lr * cfg.decay_factor**n


def sgd_step(params, grads, buffers, lr: float, momentum: float) -> None:
    """Heavy-ball SGD in place: buf = momentum * buf + g; p -= lr * buf."""
    for p, g, buf in zip(params, grads, buffers):
        if g is None:
            continue
        buf *= momentum
        buf += g
        p.data -= p.data.dtype.type(lr) * buf


def _loss(pred: Tensor, target, task: str) -> Tensor:
    return cross_entropy(pred, target) if task == "classify" else mse_loss(pred, target)


@dataclass
class EvalResult:
    loss: float
    accuracy: float | None
    mse: float | None
    nfe: list[float]
    n: int


def evaluate(model, data: Dataset, batch: int = 128, task: str = "classify", **forward_kw) -> EvalResult:
    """Deterministic pass over ``data`` in order; NFE averaged over batches."""
    losses, correct, nfes, count = [], 0, [], 0
    with no_grad():
        for idx in batches(len(data), batch, drop_last=False):
            x = Tensor(data.images[idx])
            pred, res = model(x, **forward_kw)
            target = data.labels[idx] if task == "classify" else data.images[idx]
            losses.append(float(_loss(pred, target, task).data) * len(idx))
            if task == "classify":
                correct += int(np.sum(np.argmax(pred.data, axis=1) == data.labels[idx]))
            nfes.append([r.nfe for r in res])
            count += len(idx)
    loss = sum(losses) / count
    nfe = [float(v) for v in np.mean(np.asarray(nfes, dtype=np.float64), axis=0)] if nfes else []
    if task == "classify":
        return EvalResult(loss, correct / count, None, nfe, count)
    return EvalResult(loss, None, loss, nfe, count)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def metrics_row(epoch, split, loss=None, accuracy=None, mse=None, nfe=(), sigma=(), lr=None, wall=None) -> dict:
    row = dict.fromkeys(METRICS_HEADER, "")
    row.update(epoch=str(epoch), split=split, loss=_fmt(loss), accuracy=_fmt(accuracy), mse=_fmt(mse))
    for i in range(3):
        row[f"nfe_block{i + 1}"] = _fmt(float(nfe[i])) if i < len(nfe) else ""
        row[f"sigma_block{i + 1}"] = _fmt(sigma[i]) if i < len(sigma) else ""
    row.update(lr=_fmt(lr), wall_seconds=_fmt(wall))
    return row


def write_csv(path: str, header, rows, append: bool = False) -> None:
    exists = os.path.exists(path) and append
    with open(path, "a" if append else "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(header), lineterminator="\n")
        if not exists:
            w.writeheader()
        for r in rows:
            w.writerow(r)


def read_csv(path_or_text: str, header=None, is_text: bool = False) -> list[dict]:
    """Parse a CSV written by this tool; checks the header when one is given."""
    fh = io.StringIO(path_or_text) if is_text else open(path_or_text, newline="", encoding="utf-8")
    with fh:
        reader = csv.DictReader(fh)
        if header is not None and reader.fieldnames != list(header):
            raise ValueError(f"unexpected CSV header {reader.fieldnames}")
        return list(reader)


def _sigma_summary(model) -> list[float]:
    return [float(np.mean(s)) if s.size else None for s in block_sigmas(model)]


def prepare_training_set(train: Dataset, cfg: TrainConfig) -> Dataset:
    if cfg.images_per_class is not None:
        train = subset_small_data(train, cfg.images_per_class, cfg.seed)
    if cfg.train_limit is not None:
        rng = np.random.default_rng([cfg.seed, 1])
        train = train.take(np.sort(rng.choice(len(train), size=cfg.train_limit, replace=False)))
    return train


@dataclass
class TrainState:
    model: object
    buffers: dict
    epoch: int  # next epoch to run


def init_state(cfg: TrainConfig, encoder_params: dict | None = None) -> TrainState:
    """Fresh model and zero momentum; ``encoder_params`` seeds a reconstruction encoder."""
    if encoder_params is not None:
        model = build_autoencoder(cfg.model_spec(), cfg.seed, encoder_params)
    else:
        model = build_model(cfg.model_spec(), cfg.seed)
    buffers = {k: np.zeros_like(p.data) for k, p in model.named_parameters().items()}
    return TrainState(model, buffers, 0)


def state_to_checkpoint(state: TrainState, cfg: TrainConfig) -> ckpt_io.Checkpoint:
    return ckpt_io.Checkpoint(
        spec_text=state.model.spec.to_text(),
        params={k: p.data for k, p in state.model.named_parameters().items()},
        momentum=dict(state.buffers),
        meta={"epoch": state.epoch, "config": to_config_text(cfg), "rng": "per-epoch seeds [seed, epoch]"},
    )


def state_from_checkpoint(ck: ckpt_io.Checkpoint, cfg: TrainConfig) -> TrainState:
    state = init_state(cfg)
    diff = ckpt_io.spec_mismatch(state.model.spec.to_text(), ck.spec_text)
    if diff:
        raise ckpt_io.CheckpointError("checkpoint was written for a different model: " + "; ".join(diff))
    ckpt_io.apply_params(state.model, ck.params)
    for k in state.buffers:
        if k in ck.momentum:
            state.buffers[k] = ck.momentum[k].copy()
    state.epoch = int(ck.meta.get("epoch", 0))
    return state


def train_epoch(state: TrainState, train: Dataset, cfg: TrainConfig, epoch: int) -> dict:
    """One pass over ``train``; returns running loss/accuracy and mean NFE."""
    model = state.model
    named = model.named_parameters()
    names = list(named)
    params = [named[k] for k in names]
    bufs = [state.buffers[k] for k in names]
    rng = np.random.default_rng([cfg.seed, epoch])
    lr = lr_at(epoch, cfg)
    losses, correct, seen, nfes = [], 0, 0, []
    for idx in batches(len(train), min(cfg.batch, len(train)), rng):
        imgs = train.images[idx]
        if cfg.augment and cfg.task == "classify":
            imgs = augment(imgs, rng)
        x = Tensor(imgs)
        pred, res = model(x)
        target = train.labels[idx] if cfg.task == "classify" else imgs
        loss = _loss(pred, target, cfg.task)
        lval = float(loss.data)
        if not np.isfinite(lval):
            raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
        for p in params:
            p.grad = None
        loss.backward()
        sgd_step(params, [p.grad for p in params], bufs, lr, cfg.momentum)
        losses.append(lval * len(idx))
        if cfg.task == "classify":
            correct += int(np.sum(np.argmax(pred.data, axis=1) == train.labels[idx]))
        seen += len(idx)
        nfes.append([r.nfe for r in res])
    for p in params:
        p.grad = None
    return {
        "loss": sum(losses) / seen,
        "accuracy": correct / seen if cfg.task == "classify" else None,
        "mse": sum(losses) / seen if cfg.task == "reconstruct" else None,
        "nfe": list(np.mean(np.asarray(nfes, dtype=np.float64), axis=0)),
        "lr": lr,
    }


def train(
    cfg: TrainConfig,
    data: tuple[Dataset, Dataset],
    out_dir: str,
    resume: str | None = None,
    stop_after: int | None = None,
    log=print,
    encoder_params: dict | None = None,
) -> list[dict]:
    """Run training; writes ``metrics.csv`` and ``checkpoint.dcn`` under ``out_dir``.

    ``stop_after`` ends the run after that many epochs of this invocation
    (used to test resumption). Returns the metric rows written.
    """
    os.makedirs(out_dir, exist_ok=True)
    train_set = prepare_training_set(data[0], cfg)
    test_set = data[1]
    if cfg.eval_limit is not None:
        test_set = test_set.take(np.arange(min(cfg.eval_limit, len(test_set))))
    state = state_from_checkpoint(ckpt_io.load_checkpoint(resume), cfg) if resume else init_state(cfg, encoder_params)
    total = cfg.total_epochs(len(train_set))
    ckpt_path = os.path.join(out_dir, CHECKPOINT_NAME)
    metrics_path = os.path.join(out_dir, METRICS_NAME)
    all_rows: list[dict] = []
    ran = 0
    while state.epoch < total:
        epoch = state.epoch
        t0 = time.perf_counter()
        try:
            stats = train_epoch(state, train_set, cfg, epoch)
            sig = _sigma_summary(state.model)
        except (NonFiniteError, ScaleOverflowError, FloatingPointError) as exc:
            raise TrainingDiverged(f"epoch {epoch}: {exc}; last good checkpoint kept at {ckpt_path}") from exc
        wall = time.perf_counter() - t0
        rows = [metrics_row(epoch, "train", stats["loss"], stats["accuracy"], stats["mse"], stats["nfe"], sig, stats["lr"], wall)]
        train_eval = None
        if cfg.eval_train:
            train_eval = evaluate(state.model, train_set, cfg.batch, cfg.task)
            rows.append(metrics_row(epoch, "train_eval", train_eval.loss, train_eval.accuracy, train_eval.mse, train_eval.nfe, sig, stats["lr"], time.perf_counter() - t0))
        if len(test_set):
            ev = evaluate(state.model, test_set, cfg.batch, cfg.task)
            rows.append(metrics_row(epoch, "test", ev.loss, ev.accuracy, ev.mse, ev.nfe, sig, stats["lr"], time.perf_counter() - t0))
        state.epoch = epoch + 1
        ckpt_io.save_checkpoint(ckpt_path, state_to_checkpoint(state, cfg))
        write_csv(metrics_path, METRICS_HEADER, rows, append=(epoch > 0 or resume is not None))
        all_rows.extend(rows)
        acc = stats["accuracy"]
        log(f"epoch {epoch}: loss {stats['loss']:.4f}" + (f" acc {acc:.3f}" if acc is not None else "") + (f" train_eval acc {train_eval.accuracy:.3f}" if train_eval and train_eval.accuracy is not None else "") + f" nfe {[round(float(n), 1) for n in stats['nfe']]} ({wall:.1f}s)")
        ran += 1
        if (
            cfg.target_train_accuracy is not None
            and train_eval is not None
            and train_eval.accuracy is not None
            and train_eval.accuracy >= cfg.target_train_accuracy
        ):
            break
        if stop_after is not None and ran >= stop_after:
            break
    return all_rows


def model_from_checkpoint(path: str):
    """Rebuild the model stored in a checkpoint file, with its parameters loaded."""
    ck = ckpt_io.load_checkpoint(path)
    model = build_model(ModelSpec.from_text(ck.spec_text))
    ckpt_io.apply_params(model, ck.params)
    return model
