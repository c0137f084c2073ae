"""Training loop: the two-pass SMMix step, AdamW, schedule, evaluation."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt_io
from . import mixing
from .data import shuffled
from .objective import LossSwitches, total_loss
from .vit import ModelConfig, VisionTransformer, image_attention_scores

log = logging.getLogger(__name__)

MIX_MODES = ("smmix", "cutmix", "mixup_only", "none")
METRIC_FIELDS = ("step", "epoch", "mode", "l_cls", "l_fine", "l_con", "l_total", "lr", "val_top1")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: str = "adamw"
    lr: float = 1e-3
    min_lr: float = 1e-5
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    warmup_steps: int | None = None  # None: 5% of the run
    cosine_total_steps: int | None = None  # None: the whole run
    batch_size: int = 64
    epochs: int = 30
    seed: int = 0
    mix_mode: str = "smmix"
    switch_prob: float = 0.5
    delta_mode: str = "uniform"
    loss_cls: bool = True
    loss_fine: bool = True
    loss_con: bool = True
    kl_direction: str = "forward"
    label_smoothing: float = 0.0
    dtype: str = "float32"
    eval_every: int = 1
    single_thread: bool = True
    data_dir: str = ""
    out_dir: str = ""

    def __post_init__(self):
        if self.mix_mode not in MIX_MODES:
            raise ValueError(f"mix_mode must be one of {MIX_MODES}, got {self.mix_mode!r}")
        if self.mix_mode != "none" and self.batch_size < 2:
            raise ValueError("mixing needs batch_size >= 2")
        for name in ("switch_prob", "label_smoothing"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.optimizer != "adamw":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if self.delta_mode not in ("uniform", "fixed", "unit"):
            raise ValueError(f"unknown delta_mode {self.delta_mode!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def switches(self) -> LossSwitches:
        return LossSwitches(self.loss_cls, self.loss_fine, self.loss_con, self.kl_direction)

    # flat key = value view; model fields appear under their own names
    def to_flat(self) -> dict[str, Any]:
        out = dataclasses.asdict(self.model)
        out.update({f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "model"})
        return out

    @classmethod
    def from_flat(cls, values: dict[str, Any]) -> "TrainConfig":
        model_keys = {f.name for f in dataclasses.fields(ModelConfig)}
        model = {k: v for k, v in values.items() if k in model_keys}
        rest = {k: v for k, v in values.items() if k not in model_keys}
        unknown = set(rest) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(model=ModelConfig(**model), **rest)


# -- optimizer ---------------------------------------------------------

def decays(name: str, shape: tuple[int, ...]) -> bool:
    return len(shape) == 2 and name != "pos_embed"


class AdamW:
    """Adam with decoupled weight decay on matrix weights only."""

    def __init__(self, params: dict[str, ad.Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.05):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            if self.weight_decay and decays(name, p.shape):
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict[str, Any]:
        return {"kind": "adamw", "t": self.t, "lr": self.lr, "betas": list(self.betas),
                "eps": self.eps, "weight_decay": self.weight_decay}

    def load(self, state: dict[str, Any], m: dict[str, np.ndarray], v: dict[str, np.ndarray]) -> None:
        self.t = int(state["t"])
        for k in self.params:
            self.m[k] = np.array(m[k], dtype=self.params[k].dtype)
            self.v[k] = np.array(v[k], dtype=self.params[k].dtype)


def lr_at(step: int, total: int, base: float, warmup: int, min_lr: float = 0.0) -> float:
    """Linear warmup to ``base`` then cosine decay to ``min_lr`` at ``total``."""
    if warmup > 0 and step < warmup:
        return base * (step + 1) / warmup
    span = max(total - warmup, 1)
    progress = min(max(step - warmup, 0) / span, 1.0)
    return min_lr + 0.5 * (base - min_lr) * (1.0 + math.cos(math.pi * progress))


# -- one step ----------------------------------------------------------

def one_hot(labels: np.ndarray, num_classes: int, smoothing: float = 0.0) -> np.ndarray:
    y = np.full((len(labels), num_classes), smoothing / num_classes)
    y[np.arange(len(labels)), labels] += 1.0 - smoothing
    return y


@dataclass
class StepResult:
    mode: str
    losses: dict[str, float]
    forwards: int
    backwards: int
    batch: mixing.MixedBatch | None = None


def choose_mode(cfg: TrainConfig, rng: np.random.Generator) -> str:
    """Per-batch choice; region-mixing modes fall back to Mixup with switch_prob."""
    if cfg.mix_mode == "mixup_only":
        return "mixup"
    if cfg.mix_mode == "none":
        return "none"
    return "mixup" if rng.random() < cfg.switch_prob else cfg.mix_mode


def unmixed_pass(model: VisionTransformer, images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """No-grad forward over clean images: (attention score grids, probabilities)."""
    with ad.no_grad():
        out = model(images)
    alphas = image_attention_scores(out.attention[model.cfg.attn_block], model.cfg)
    return alphas, out.probs


def train_step(model: VisionTransformer, opt: AdamW | None, images: np.ndarray, labels: np.ndarray,
               cfg: TrainConfig, rng: np.random.Generator, lr: float | None = None,
               step: int = 0) -> StepResult:
    """One optimisation step. ``labels`` are class indices.

    SMMix: clean forward (no grad) -> α and Y_A/Y_B -> mix -> mixed forward ->
    backward on the total loss. ``opt=None`` leaves parameters untouched.
    """
    mcfg = model.cfg
    y = one_hot(labels, mcfg.num_classes, cfg.label_smoothing)
    mode = choose_mode(cfg, rng)
    images = images.astype(model.dtype, copy=False)
    forwards = 0
    unmixed = None
    switches = cfg.switches
    if mode == "smmix":
        alphas, unmixed = unmixed_pass(model, images)
        forwards += 1
        batch = mixing.apply_smmix(images, y, alphas, rng, mcfg.patch_size, cfg.delta_mode)
    elif mode == "cutmix":
        if switches.con:
            _, unmixed = unmixed_pass(model, images)
            forwards += 1
        batch = mixing.apply_cutmix(images, y, rng, mcfg.patch_size)
    elif mode == "mixup":
        batch = mixing.apply_mixup(images, y, rng)
    else:
        batch = mixing.no_mix(images, y)

    model.zero_grad()
    out = model(batch.images)
    forwards += 1
    losses = total_loss(batch, out.logits, out.tokens, model.classify, unmixed, switches)
    values = losses.values()
    if not all(math.isfinite(v) for v in values.values()):
        raise TrainingError(f"non-finite loss at step {step} (mode {mode}): {values}")
    ad.backward(losses.l_total)
    if opt is not None:
        opt.step(lr)
    return StepResult(mode, values, forwards, 1, batch)


# -- evaluation --------------------------------------------------------

def predict_logits(model: VisionTransformer, images: np.ndarray, batch_size: int = 250) -> np.ndarray:
    chunks = []
    with ad.no_grad():
        for i in range(0, len(images), batch_size):
            chunks.append(model(images[i:i + batch_size].astype(model.dtype, copy=False)).logits.data)
    if not chunks:
        return np.zeros((0, model.cfg.num_classes))
    return np.concatenate(chunks).astype(np.float64)


def metrics_from_logits(logits: np.ndarray, labels: np.ndarray, num_classes: int) -> dict[str, Any]:
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        return {"top1": float("nan"), "per_class": [float("nan")] * num_classes, "mean_ce": float("nan"), "n": 0}
    pred = logits.argmax(axis=1)
    correct = pred == labels
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    per_class = [float(correct[labels == c].mean()) if np.any(labels == c) else float("nan")
                 for c in range(num_classes)]
    return {
        "top1": float(correct.mean()),
        "per_class": per_class,
        "mean_ce": float(-logp[np.arange(len(labels)), labels].mean()),
        "n": int(len(labels)),
    }


def evaluate(model: VisionTransformer, images: np.ndarray, labels: np.ndarray,
             batch_size: int = 250) -> dict[str, Any]:
    """Top-1, per-class accuracy and mean cross-entropy; parameters untouched."""
    return metrics_from_logits(predict_logits(model, images, batch_size), labels, model.cfg.num_classes)


# -- trainer -----------------------------------------------------------

def _thread_limit(single: bool):
    if not single:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=1)


class Trainer:
    """Owns model, optimizer, mixing RNG and the step counter."""

    def __init__(self, cfg: TrainConfig, train_images: np.ndarray, train_labels: np.ndarray,
                 val_images: np.ndarray | None = None, val_labels: np.ndarray | None = None,
                 model: VisionTransformer | None = None):
        self.cfg = cfg
        self.train_images = train_images
        self.train_labels = np.asarray(train_labels, dtype=np.int64)
        self.val_images = val_images
        self.val_labels = None if val_labels is None else np.asarray(val_labels, dtype=np.int64)
        self.model = model or VisionTransformer.create(cfg.model, seed=cfg.seed, dtype=cfg.np_dtype)
        self.opt = AdamW(self.model.params, cfg.lr, (cfg.beta1, cfg.beta2), cfg.adam_eps, cfg.weight_decay)
        self.rng = mixing.make_rng(cfg.seed, 1)
        self.step = 0
        self.steps_per_epoch = len(self.train_images) // cfg.batch_size
        if self.steps_per_epoch < 1:
            raise ValueError(f"{len(self.train_images)} training images cannot fill a batch of {cfg.batch_size}")
        self.total_steps = self.steps_per_epoch * cfg.epochs
        self.schedule_steps = cfg.cosine_total_steps or self.total_steps
        self.warmup = cfg.warmup_steps if cfg.warmup_steps is not None else int(0.05 * self.schedule_steps)
        self.history: list[dict[str, Any]] = []

    def lr(self, step: int) -> float:
        return lr_at(step, self.schedule_steps, self.cfg.lr, self.warmup, self.cfg.min_lr)

    def batch_indices(self, step: int) -> np.ndarray:
        epoch, k = divmod(step, self.steps_per_epoch)
        order = shuffled(len(self.train_images), self.cfg.seed, epoch)
        bs = self.cfg.batch_size
        return order[k * bs:(k + 1) * bs]

    def train_one(self) -> StepResult:
        idx = self.batch_indices(self.step)
        lr = self.lr(self.step)
        res = train_step(self.model, self.opt, self.train_images[idx], self.train_labels[idx],
                         self.cfg, self.rng, lr=lr, step=self.step)
        row = {"step": self.step, "epoch": self.step // self.steps_per_epoch, "mode": res.mode,
               **res.losses, "lr": lr, "val_top1": ""}
        self.step += 1
        if self.step % self.steps_per_epoch == 0 and self.val_images is not None:
            epoch = self.step // self.steps_per_epoch
            if epoch % max(self.cfg.eval_every, 1) == 0 or self.step >= self.total_steps:
                row["val_top1"] = evaluate(self.model, self.val_images, self.val_labels)["top1"]
        self.history.append(row)
        return res

    def run(self, steps: int | None = None, metrics_path: str | Path | None = None) -> list[dict[str, Any]]:
        """Train ``steps`` more steps (default: to the end of the schedule)."""
        end = self.total_steps if steps is None else min(self.step + steps, self.total_steps)
        writer = None
        fh = None
        if metrics_path is not None:
            metrics_path = Path(metrics_path)
            new = not metrics_path.exists() or self.step == 0
            fh = open(metrics_path, "w" if new else "a", newline="")
            writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
            if new:
                writer.writeheader()
        try:
            with _thread_limit(self.cfg.single_thread):
                while self.step < end:
                    self.train_one()
                    if writer is not None:
                        writer.writerow(_format_row(self.history[-1]))
                    if self.step % self.steps_per_epoch == 0:
                        log.info("epoch %d step %d loss %.4f val_top1 %s", self.step // self.steps_per_epoch,
                                 self.step, self.history[-1]["l_total"], self.history[-1]["val_top1"])
        finally:
            if fh is not None:
                fh.close()
        return self.history

    # -- persistence ---------------------------------------------------
    def checkpoint(self) -> ckpt_io.Checkpoint:
        return ckpt_io.Checkpoint(
            model_config=self.model.cfg,
            params={k: p.data.copy() for k, p in self.model.params.items()},
            step=self.step,
            optimizer=self.opt.state(),
            adam_m={k: v.copy() for k, v in self.opt.m.items()},
            adam_v={k: v.copy() for k, v in self.opt.v.items()},
            rng_state=self.rng.bit_generator.state,
            extra={"train_config": _config_record(self.cfg)},
        )

    def save(self, path: str | Path) -> Path:
        return ckpt_io.save_checkpoint(self.checkpoint(), path)

    def restore(self, ck: ckpt_io.Checkpoint) -> None:
        if ck.model_config != self.model.cfg:
            raise ckpt_io.CheckpointShapeError("checkpoint model config differs from the trainer's")
        for k, p in self.model.params.items():
            p.data = np.array(ck.params[k], dtype=p.dtype)
            p.grad = None
        self.opt.load(ck.optimizer, ck.adam_m, ck.adam_v)
        if ck.rng_state is not None:
            self.rng.bit_generator.state = ck.rng_state
        self.step = int(ck.step)

    def load(self, path: str | Path) -> None:
        self.restore(ckpt_io.load_checkpoint(path, expect=self.model.cfg))


def _format_row(row: dict[str, Any]) -> dict[str, Any]:
    return {k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()}


def _config_record(cfg: TrainConfig) -> dict[str, Any]:
    return {k: v for k, v in cfg.to_flat().items()}


def model_from_checkpoint(path: str | Path, dtype=np.float32) -> VisionTransformer:
    ck = ckpt_io.load_checkpoint(path)
    params = {k: ad.Tensor(np.asarray(v, dtype=dtype), requires_grad=True, name=k) for k, v in ck.params.items()}
    return VisionTransformer(ck.model_config, params)
