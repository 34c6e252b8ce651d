"""Two-stage training (autoencoder, then RFN blocks with the autoencoder frozen) and the one-stage ablation."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autograd as ag
from . import networks as nw
from .autograd import Optimizer, Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, step_batches
from .errors import ConfigError, CorpusError, NumericError
from .losses import Stage1LossConfig, Stage2LossConfig, l_auto_terms, l_rfn_terms

log = logging.getLogger(__name__)

STAGES = ("auto", "rfn", "one_stage")


@dataclass
class TrainConfig:
    """Training hyper-parameters.

    Full-scale values are image_size=256, batch_size=4, epochs=2, lr=1e-4 on
    80k images. Only image_size defaults to a laptop-sized 64; desk runs of a
    few hundred steps also want a larger lr (the CLI uses 1e-3). When ``steps``
    is set it overrides ``epochs`` and training runs exactly that many batches.
    ``deterministic`` switches to plain SGD so a run can be resumed from a
    checkpoint with bit-identical losses (Adam moments are not checkpointed).
    """

    stage: str = "auto"
    image_size: int = 64
    batch_size: int = 4
    epochs: int = 2
    steps: int | None = None
    lr: float = 1e-4
    seed: int = 0
    optimizer: str = "adam"
    precision: str = "float32"
    deterministic: bool = False
    stage1: Stage1LossConfig = field(default_factory=Stage1LossConfig)
    stage2: Stage2LossConfig = field(default_factory=Stage2LossConfig)
    arch: nw.ArchitectureConfig = field(default_factory=nw.ArchitectureConfig)
    checkpoint_dir: str | None = None
    init_checkpoint: str | None = None
    start_step: int = 0
    log_every: int = 10

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.image_size <= 0 or self.image_size % 16:
            raise ConfigError(f"image_size must be a positive multiple of 16, got {self.image_size}")
        if self.batch_size <= 0 or self.epochs <= 0:
            raise ConfigError("batch_size and epochs must be positive")
        if self.steps is not None and self.steps < 0:
            raise ConfigError("steps must be nonnegative")
        if self.lr < 0:
            raise ConfigError("lr must be nonnegative")
        if self.precision not in ("float32", "float64"):
            raise ConfigError("precision must be 'float32' or 'float64'")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError("optimizer must be 'adam' or 'sgd'")
        if isinstance(self.stage1, dict):
            self.stage1 = Stage1LossConfig(**self.stage1)
        if isinstance(self.stage2, dict):
            self.stage2 = Stage2LossConfig(**self.stage2)
        if isinstance(self.arch, dict):
            self.arch = nw.ArchitectureConfig(**self.arch)

    @property
    def dtype(self):
        return np.dtype(self.precision)

    @property
    def optimizer_mode(self) -> str:
        return "sgd" if self.deterministic else self.optimizer

    def total_steps(self, n_items: int) -> int:
        if self.steps is not None:
            return self.steps
        return self.epochs * math.ceil(n_items / self.batch_size)


@dataclass
class TrainResult:
    weights: nw.ModelWeights
    history: list[dict]
    checkpoints: list[Path] = field(default_factory=list)

    def losses(self) -> np.ndarray:
        return np.array([h["loss"] for h in self.history])


def smoothed(values, window: int = 10) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    values = np.asarray(values, dtype=np.float64)
    c = np.cumsum(np.insert(values, 0, 0.0))
    idx = np.arange(1, len(values) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def history_csv(history: list[dict]) -> str:
    if not history:
        return "step,epoch,loss\n"
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(history[0].keys()), lineterminator="\n")
    writer.writeheader()
    for row in history:
        writer.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def _run(
    cfg: TrainConfig,
    dataset: Dataset,
    weights: nw.ModelWeights,
    loss_fn: Callable[[object], tuple[Tensor, dict]],
    tag: str,
) -> TrainResult:
    if len(dataset) == 0:
        raise CorpusError("dataset is empty; refusing to start training")
    opt = Optimizer(cfg.lr, cfg.optimizer_mode)
    params = weights.trainable()
    total = cfg.total_steps(len(dataset))
    history: list[dict] = []
    ckpts: list[Path] = []
    batches = list(step_batches(len(dataset), cfg.batch_size, cfg.seed, cfg.start_step + total))[cfg.start_step :]
    for i, (epoch, idx) in enumerate(batches):
        step = cfg.start_step + i
        loss, parts = loss_fn(dataset.batch(idx, cfg.dtype))
        value = loss.item()
        if not np.isfinite(value):
            raise NumericError(f"{tag}: non-finite loss {value} at step {step} (lr={cfg.lr})")
        loss.backward()
        opt.step(params)
        opt.zero_grad(params)
        history.append({"step": step, "epoch": epoch, "loss": value, **parts})
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("%s step %d epoch %d loss %.6g", tag, step, epoch, value)
        epoch_done = i == len(batches) - 1 or batches[i + 1][0] != epoch
        if cfg.checkpoint_dir and epoch_done:
            ckpts.append(save_checkpoint(weights, Path(cfg.checkpoint_dir) / f"{tag}_epoch{epoch}.rfnn",
                                         dtype=cfg.dtype))
    return TrainResult(weights, history, ckpts)


def _initial_weights(cfg: TrainConfig, weights: nw.ModelWeights | None) -> nw.ModelWeights:
    if weights is not None:
        return weights.astype(cfg.dtype)
    if cfg.init_checkpoint:
        return load_checkpoint(cfg.init_checkpoint).astype(cfg.dtype)
    return nw.init_weights(cfg.arch, cfg.seed, cfg.dtype)


def _resolve_arch(cfg: TrainConfig, w: nw.ModelWeights) -> nw.ArchitectureConfig:
    """Architecture matching the actual weight shapes; wiring options not encoded in shapes come from ``cfg``."""
    arch = nw.infer_architecture(w, cfg.arch.pad_mode)
    arch.stem_activation = cfg.arch.stem_activation
    return arch


def train_stage1(cfg: TrainConfig, dataset: Dataset, weights: nw.ModelWeights | None = None) -> TrainResult:
    """Train encoder and decoder as an autoencoder with pixel + SSIM loss."""
    if dataset.mode != "single":
        raise ConfigError("stage-1 training needs a single-image dataset")
    w = _initial_weights(cfg, weights)
    arch = _resolve_arch(cfg, w)
    w.set_trainable(nw.ModelWeights.GROUPS, False)
    w.set_trainable(("encoder", "decoder"), True)

    def loss_fn(batch):
        x = Tensor(batch)
        out = nw.reconstruct(x, w, arch)
        total, pix, ssim_term = l_auto_terms(out, x, cfg.stage1)
        return total, {"pixel": pix, "ssim": ssim_term}

    return _run(cfg, dataset, w, loss_fn, "stage1")


def _rfn_loss_fn(cfg: TrainConfig, w: nw.ModelWeights, train_encoder: bool):
    arch = _resolve_arch(cfg, w)

    def loss_fn(batch):
        ir, vi = Tensor(batch[0]), Tensor(batch[1])
        pir, rec = nw.pad_input(ir)
        pvi, _ = nw.pad_input(vi)
        if train_encoder:
            phi_ir, phi_vi = nw.encode(pir, w, arch), nw.encode(pvi, w, arch)
        else:
            with ag.no_grad():
                phi_ir, phi_vi = nw.encode(pir, w, arch), nw.encode(pvi, w, arch)
        phi_f = nw.fuse_features(phi_ir, phi_vi, w, arch)
        out = nw.unpad(nw.decode(phi_f, w, arch), rec)
        total, det, feat = l_rfn_terms(out, vi, phi_f, phi_vi, phi_ir, cfg.stage2)
        return total, {"detail": det, "feature": feat}

    return loss_fn


def train_stage2(cfg: TrainConfig, dataset: Dataset, frozen: nw.ModelWeights | None = None) -> TrainResult:
    """Train only the four RFN blocks; encoder and decoder stay bit-identical."""
    if dataset.mode != "paired":
        raise ConfigError("stage-2 training needs a paired dataset")
    if frozen is None:
        if not cfg.init_checkpoint:
            raise ConfigError("stage-2 training needs a stage-1 checkpoint")
        if not Path(cfg.init_checkpoint).is_file():
            raise ConfigError(f"stage-1 checkpoint not found: {cfg.init_checkpoint}")
    w = _initial_weights(cfg, frozen)
    w.freeze_autoencoder()
    return _run(cfg, dataset, w, _rfn_loss_fn(cfg, w, train_encoder=False), "stage2")


def train_one_stage(cfg: TrainConfig, dataset: Dataset, weights: nw.ModelWeights | None = None) -> TrainResult:
    """Ablation: encoder, RFN and decoder trained jointly under the stage-2 loss."""
    if dataset.mode != "paired":
        raise ConfigError("one-stage training needs a paired dataset")
    w = _initial_weights(cfg, weights)
    w.set_trainable(nw.ModelWeights.GROUPS, True)
    return _run(cfg, dataset, w, _rfn_loss_fn(cfg, w, train_encoder=True), "one_stage")


def load_stage1(path: str | Path, dtype="float32", pad_mode: str = "reflect"):
    w = load_checkpoint(path).astype(dtype)
    return w, nw.infer_architecture(w, pad_mode)
