"""AdamW + per-epoch cosine annealing training loop with checkpointing and resume."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_into, save_checkpoint
from .losses import LossConfig, SegmentationBatch, mixed_loss, predict_labels
from .metrics import dsc
from .model import ModelVariant, SegmentationModel, build, forward
from .tensor import Tensor, backward, fresh_tape, no_grad

log = logging.getLogger(__name__)

LAST_CKPT = "last.ckpt"
BEST_CKPT = "best.ckpt"
LOG_FILE = "train.log"
SUMMARY_FILE = "run_summary.txt"


class DivergenceError(RuntimeError):
    """Loss or gradient became non-finite."""


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 4
    lr_init: float = 1e-3
    lr_min: float = 0.0
    weight_decay: float = 0.01
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    variant: ModelVariant = ModelVariant.TINY
    checkpoint_dir: str | None = None
    augment: bool = False
    grad_clip: float | None = None
    dtype: str = "float32"

    def __post_init__(self):
        self.variant = ModelVariant.parse(self.variant)
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 <= self.lr_min <= self.lr_init:
            raise ValueError(f"need 0 <= lr_min <= lr_init, got {self.lr_min}, {self.lr_init}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")


def cosine_lr(step: int, total_steps: int, lr_init: float, lr_min: float) -> float:
    if total_steps <= 0 or not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr_init - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class AdamWState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    @classmethod
    def create(cls, named_params) -> "AdamWState":
        named_params = list(named_params)
        return cls(
            {n: np.zeros_like(t.data) for n, t in named_params},
            {n: np.zeros_like(t.data) for n, t in named_params},
        )

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {f"opt.m.{k}": a for k, a in self.m.items()}
        out.update({f"opt.v.{k}": a for k, a in self.v.items()})
        out["opt.step"] = np.array([self.step], dtype=np.float64)
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k in self.m:
            self.m[k] = arrays[f"opt.m.{k}"].astype(self.m[k].dtype)
            self.v[k] = arrays[f"opt.v.{k}"].astype(self.v[k].dtype)
        self.step = int(arrays["opt.step"][0])


def adamw_step(named_params, state: AdamWState, lr: float, weight_decay: float) -> None:
    """One decoupled-weight-decay Adam update in place; parameters without a grad are skipped."""
    named_params = list(named_params)
    for name, t in named_params:
        if t.grad is not None and not np.all(np.isfinite(t.grad)):
            raise DivergenceError(f"non-finite gradient in parameter {name!r}")
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, t in named_params:
        g = t.grad
        if g is None:
            continue
        if state.m[name].shape != t.shape:
            raise ValueError(f"moment shape {state.m[name].shape} != parameter {name!r} shape {t.shape}")
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p = t.data
        p *= 1.0 - lr * weight_decay
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


def clip_grad_norm(params, max_norm: float) -> float:
    grads = [t.grad for t in params if t.grad is not None]
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if total > max_norm:
        for g in grads:
            g *= max_norm / (total + 1e-12)
    return total


def augment_batch(images: np.ndarray, masks: np.ndarray, rng: np.random.Generator):
    """Random horizontal/vertical flips and quarter turns, applied per sample."""
    images, masks = images.copy(), masks.copy()
    square = images.shape[2] == images.shape[3]
    for i in range(images.shape[0]):
        flips = rng.integers(0, 2, size=2)
        turns = int(rng.integers(0, 4)) if square else 0
        img, msk = images[i], masks[i]
        if flips[0]:
            img, msk = img[:, :, ::-1], msk[:, ::-1]
        if flips[1]:
            img, msk = img[:, ::-1], msk[::-1]
        img, msk = np.rot90(img, turns, axes=(1, 2)), np.rot90(msk, turns)
        images[i], masks[i] = img, msk
    return images, masks


def evaluate(model: SegmentationModel, data: SegmentationBatch, batch_size: int = 4) -> float:
    """Mean per-image foreground DSC of hard predictions."""
    scores = []
    with no_grad():
        for lo in range(0, len(data), batch_size):
            x = Tensor(data.images[lo:lo + batch_size].astype(model.head.weight.dtype))
            pred = predict_labels(forward(model, x).data)
            for p, t in zip(pred, data.masks[lo:lo + batch_size]):
                scores.append(dsc(p, t, data.class_count).mean)
    return float(np.mean(scores))


@dataclass
class EpochLog:
    epoch: int
    lr: float
    loss: float
    dsc: float

    def line(self) -> str:
        return f"epoch={self.epoch} lr={self.lr:.6g} loss={self.loss:.6f} dsc={self.dsc:.4f}"


@dataclass
class TrainResult:
    model: SegmentationModel
    history: list[EpochLog]
    best_dsc: float
    best_epoch: int
    final_dsc: float


def _run_state(history: list[EpochLog], best_dsc: float, best_epoch: int) -> dict[str, np.ndarray]:
    return {
        "train.epochs_done": np.array([len(history)], dtype=np.float64),
        "train.best": np.array([best_dsc, best_epoch], dtype=np.float64),
        "train.history": np.array([[h.epoch, h.lr, h.loss, h.dsc] for h in history], dtype=np.float64).reshape(-1, 4),
    }


def train(
    cfg: TrainConfig,
    data: SegmentationBatch,
    resume: "str | Path | None" = None,
    stop_after: int | None = None,
) -> TrainResult:
    """Train from scratch (or from ``resume``); ``stop_after`` ends early after that epoch."""
    if len(data) == 0:
        raise ValueError("training set is empty")
    if data.class_count != cfg.loss.class_count:
        raise ValueError(f"data has {data.class_count} classes but the loss expects {cfg.loss.class_count}")
    dtype = np.dtype(cfg.dtype)
    model = build(cfg.variant, data.images.shape[1], cfg.loss.class_count, cfg.seed, dtype)
    params = list(model.named_parameters())
    opt = AdamWState.create(params)
    history: list[EpochLog] = []
    best_dsc, best_epoch = -1.0, -1

    if resume is not None:
        extra = load_into(model, resume)
        opt.load_arrays(extra)
        hist = extra["train.history"]
        history = [EpochLog(int(r[0]), float(r[1]), float(r[2]), float(r[3])) for r in hist]
        best_dsc, best_epoch = float(extra["train.best"][0]), int(extra["train.best"][1])

    out_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        logf = open(out_dir / LOG_FILE, "a" if resume is not None else "w")
    else:
        logf = None

    n = len(data)
    start = time.perf_counter()
    try:
        for epoch in range(len(history), cfg.epochs):
            lr = cosine_lr(epoch, cfg.epochs, cfg.lr_init, cfg.lr_min)
            rng = np.random.default_rng([cfg.seed, epoch])
            order = rng.permutation(n)
            loss_sum, dsc_scores = 0.0, []
            for lo in range(0, n, cfg.batch_size):
                idx = order[lo:lo + cfg.batch_size]
                images, masks = data.images[idx], data.masks[idx]
                if cfg.augment:
                    images, masks = augment_batch(images, masks, rng)
                for _, t in params:
                    t.grad = None
                with fresh_tape():
                    try:
                        logits = forward(model, Tensor(np.ascontiguousarray(images, dtype=dtype)))
                    except FloatingPointError as exc:
                        raise DivergenceError(f"forward pass at epoch {epoch}: {exc}") from exc
                    loss = mixed_loss(logits, masks, cfg.loss)
                    if not math.isfinite(loss.item()):
                        raise DivergenceError(f"loss became {loss.item()} at epoch {epoch}")
                    backward(loss)
                if cfg.grad_clip is not None:
                    clip_grad_norm([t for _, t in params], cfg.grad_clip)
                adamw_step(params, opt, lr, cfg.weight_decay)
                loss_sum += loss.item() * len(idx)
                for p, t in zip(predict_labels(logits.data), masks):
                    dsc_scores.append(dsc(p, t, data.class_count).mean)
            entry = EpochLog(epoch, lr, loss_sum / n, float(np.mean(dsc_scores)))
            history.append(entry)
            log.info(entry.line())
            if logf is not None:
                logf.write(entry.line() + "\n")
                logf.flush()
            if entry.dsc > best_dsc:
                best_dsc, best_epoch = entry.dsc, epoch
                if out_dir is not None:
                    save_checkpoint(model, out_dir / BEST_CKPT)
            if out_dir is not None:
                save_checkpoint(model, out_dir / LAST_CKPT, {**opt.to_arrays(), **_run_state(history, best_dsc, best_epoch)})
            if stop_after is not None and epoch >= stop_after:
                break
    finally:
        if logf is not None:
            logf.close()

    final_dsc = evaluate(model, data, cfg.batch_size)
    if out_dir is not None:
        write_summary(out_dir / SUMMARY_FILE, cfg, model, history, best_dsc, best_epoch, final_dsc,
                      time.perf_counter() - start)
    return TrainResult(model, history, best_dsc, best_epoch, final_dsc)


def write_summary(path, cfg, model, history, best_dsc, best_epoch, final_dsc, seconds) -> None:
    rows = {
        "variant": cfg.variant.value,
        "epochs": cfg.epochs,
        "epochs_run": len(history),
        "batch_size": cfg.batch_size,
        "lr_init": cfg.lr_init,
        "lr_min": cfg.lr_min,
        "weight_decay": cfg.weight_decay,
        "seed": cfg.seed,
        **{f"loss_{k}": v for k, v in asdict(cfg.loss).items()},
        "params": model.num_parameters(),
        "final_loss": history[-1].loss if history else float("nan"),
        "final_train_dsc": final_dsc,
        "best_dsc": best_dsc,
        "best_epoch": best_epoch,
        "wall_seconds": round(seconds, 2),
    }
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in rows.items()))


def read_summary(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            k, _, v = line.partition("=")
            out[k] = v
    return out
