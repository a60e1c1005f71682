"""Dataset assembly, the adversarial training loop and volume-level inference."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .core import DwiCase, ValidationError
from .degrade import DegradedCase
from .metrics import psnr as psnr_metric
from .srnet import (
    FeatureExtractor,
    Generator,
    GeneratorConfig,
    LossWeights,
    adversarial_losses,
    build_discriminator,
    build_generator,
    frequency_loss,
    perceptual_loss,
    pixel_loss,
    total_loss,
)
from .substrate import AdamState, adam_step, load_checkpoint, save_checkpoint


class ConfigError(ValueError):
    pass


class DivergenceError(RuntimeError):
    """A loss became non-finite during training."""


@dataclass
class TrainConfig:
    mode: str = "proposed"  # "proposed" (2-channel) | "conventional" (LR only)
    batch_size: int = 18
    lr: float = 1e-4
    lr_halving_period_epochs: int = 20
    epochs: int = 60
    split_ratio: tuple[int, int, int] = (5, 2, 3)
    train_b_values: tuple[float, ...] = (500.0,)
    eval_b_values: tuple[float, ...] = (500.0, 1000.0)
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)

    def __post_init__(self):
        if self.mode not in ("proposed", "conventional"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if any(r < 1 for r in self.split_ratio):
            raise ConfigError("split ratio components must be >= 1")
        want = 2 if self.mode == "proposed" else 1
        if self.generator.in_channels != want:
            raise ConfigError(
                f"mode {self.mode} requires in_channels={want}, got {self.generator.in_channels}"
            )

    def lr_at(self, epoch: int) -> float:
        return self.lr * 0.5 ** (epoch // self.lr_halving_period_epochs)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "lr_halving_period_epochs": self.lr_halving_period_epochs,
            "epochs": self.epochs,
            "split_ratio": list(self.split_ratio),
            "train_b_values": list(self.train_b_values),
            "eval_b_values": list(self.eval_b_values),
            "seed": self.seed,
            "loss_weights": self.loss_weights.to_dict(),
            "generator": self.generator.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        for k in ("split_ratio", "train_b_values", "eval_b_values"):
            if k in d:
                d[k] = tuple(d[k])
        if "loss_weights" in d:
            d["loss_weights"] = LossWeights.from_dict(d["loss_weights"])
        if "generator" in d:
            d["generator"] = GeneratorConfig.from_dict(d["generator"])
        return cls(**d)


def split_cases(case_ids: list, ratio=(5, 2, 3), seed: int = 0) -> dict:
    """Deterministic case-level train/val/test split by the given ratio."""
    if len(case_ids) < 3:
        raise ConfigError(f"need at least 3 cases to split, got {len(case_ids)}")
    ids = list(case_ids)
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    rng.shuffle(ids)
    total = sum(ratio)
    n = len(ids)
    n_train = round(n * ratio[0] / total)
    n_val = round(n * ratio[1] / total)
    n_train = max(1, min(n_train, n - 2))
    n_val = max(1, min(n_val, n - n_train - 1))
    return {
        "train": ids[:n_train],
        "val": ids[n_train : n_train + n_val],
        "test": ids[n_train + n_val :],
    }


def make_training_pairs(pair: DegradedCase, mode: str, b_values=(500.0,)) -> list:
    """Per-slice (input, target) pairs from a degraded case.

    input: (C, H, W) float32 — channel 0 the bilinear-upsampled LR slice, and in
    proposed mode channel 1 the HR b0 slice.  target: (1, H, W) HR DWI slice.
    """
    if mode == "proposed" and pair.hr.b0 is None:
        raise ValidationError("proposed mode needs an HR b0 reference")
    b0_data = pair.hr.b0.volume.data
    if b0_data.shape != pair.hr.dims:
        raise ValidationError("b0 grid must match the HR DWI grid")
    out = []
    for hr_dwi, up_dwi in zip(pair.hr.dwis, pair.lr_on_hr_grid.dwis):
        if hr_dwi.b_value not in b_values:
            continue
        for z in range(b0_data.shape[0]):
            chans = [up_dwi.volume.data[z]]
            if mode == "proposed":
                chans.append(b0_data[z])
            out.append(
                (
                    np.stack(chans).astype(np.float32),
                    hr_dwi.volume.data[z][None].astype(np.float32),
                )
            )
    return out


@dataclass
class EpochLog:
    epoch: int
    lr: float
    pixel: float
    freq: float
    percep: float
    adv_g: float
    adv_d: float
    val_psnr: float
    val_ssim: float

    CSV_HEADER = "epoch,lr,pixel,freq,percep,adv_g,adv_d,val_psnr,val_ssim"

    def csv_row(self) -> str:
        return (
            f"{self.epoch},{self.lr:.10g},{self.pixel:.8e},{self.freq:.8e},"
            f"{self.percep:.8e},{self.adv_g:.8e},{self.adv_d:.8e},"
            f"{self.val_psnr:.6f},{self.val_ssim:.8f}"
        )


def _stack_batch(pairs, idx):
    x = torch.from_numpy(np.stack([pairs[i][0] for i in idx]))
    y = torch.from_numpy(np.stack([pairs[i][1] for i in idx]))
    return x, y


@dataclass
class TrainResult:
    generator: Generator
    config: TrainConfig
    log: list
    best_epoch: int
    best_val_psnr: float


def train(cfg: TrainConfig, train_pairs: list, val_pairs: list,
          progress=None) -> TrainResult:
    """Alternating discriminator/generator training with the halving lr schedule.

    Deterministic given (cfg, data); the best-validation-PSNR generator state is
    restored before returning.
    """
    from .metrics import ssim as ssim_metric
    from .substrate import configure_threads

    configure_threads()
    torch.manual_seed(cfg.seed)
    gen = build_generator(cfg.generator, cfg.seed)
    disc = build_discriminator(cfg.seed + 1)
    extractor = FeatureExtractor(seed=1234)

    g_params = [p for p in gen.parameters() if p.requires_grad]
    d_params = [p for p in disc.parameters() if p.requires_grad]
    g_state = AdamState(g_params)
    d_state = AdamState(d_params)
    w = cfg.loss_weights

    logs: list[EpochLog] = []
    best = {"psnr": -math.inf, "epoch": -1, "state": None}

    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = np.arange(len(train_pairs))
        np.random.Generator(np.random.Philox(key=np.uint64(cfg.seed), counter=[0, 0, 0, epoch])).shuffle(order)
        sums = {"pixel": 0.0, "freq": 0.0, "percep": 0.0, "adv_g": 0.0, "adv_d": 0.0}
        n_batches = 0

        gen.train()
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            x, y = _stack_batch(train_pairs, idx)
            fake = gen(x)

            # discriminator step
            _, d_loss = adversarial_losses(disc, fake, y)
            for p in d_params:
                p.grad = None
            d_loss.backward()
            adam_step(d_params, [p.grad for p in d_params], d_state, lr)

            # generator step (re-score fake against the updated discriminator)
            parts = {
                "pixel": pixel_loss(fake, y),
                "freq": frequency_loss(fake, y),
                "percep": perceptual_loss(fake, y, extractor),
            }
            parts["adv"], _ = adversarial_losses(disc, fake, y)
            g_loss = total_loss(parts, w)
            if not torch.isfinite(g_loss) or not torch.isfinite(d_loss):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, batch {n_batches}"
                )
            for p in g_params:
                p.grad = None
            g_loss.backward()
            adam_step(g_params, [p.grad for p in g_params], g_state, lr)

            sums["pixel"] += parts["pixel"].item()
            sums["freq"] += parts["freq"].item()
            sums["percep"] += parts["percep"].item()
            sums["adv_g"] += parts["adv"].item()
            sums["adv_d"] += d_loss.item()
            n_batches += 1

        # validation
        gen.eval()
        val_psnrs, val_ssims = [], []
        with torch.no_grad():
            for start in range(0, len(val_pairs), cfg.batch_size):
                x, y = _stack_batch(val_pairs, list(range(start, min(start + cfg.batch_size, len(val_pairs)))))
                pred = gen(x).numpy()
                tgt = y.numpy()
                for i in range(pred.shape[0]):
                    val_psnrs.append(psnr_metric(pred[i, 0], tgt[i, 0]))
                    val_ssims.append(ssim_metric(pred[i, 0], tgt[i, 0]))
        finite = [p for p in val_psnrs if math.isfinite(p)]
        val_psnr = float(np.mean(finite)) if finite else math.inf
        val_ssim = float(np.mean(val_ssims)) if val_ssims else 1.0

        logs.append(EpochLog(
            epoch, lr,
            *(sums[k] / max(n_batches, 1) for k in ("pixel", "freq", "percep", "adv_g", "adv_d")),
            val_psnr, val_ssim,
        ))
        if val_psnr > best["psnr"]:
            best = {"psnr": val_psnr, "epoch": epoch,
                    "state": {k: v.detach().clone() for k, v in gen.state_dict().items()}}
        if progress is not None:
            progress(logs[-1])

    if best["state"] is not None:
        gen.load_state_dict(best["state"])
    gen.eval()
    return TrainResult(gen, cfg, logs, best["epoch"], best["psnr"])


def write_log_csv(logs: list, path) -> None:
    lines = [EpochLog.CSV_HEADER] + [l.csv_row() for l in logs]
    Path(path).write_text("\n".join(lines) + "\n")


def save_model(path, result: TrainResult) -> None:
    header = {
        "train_config": result.config.to_dict(),
        "seed": result.config.seed,
        "best_epoch": result.best_epoch,
        "best_val_psnr": result.best_val_psnr,
    }
    named = {name: p for name, p in result.generator.state_dict().items()}
    save_checkpoint(path, named, header)


def load_model(path) -> tuple[Generator, TrainConfig]:
    header, params = load_checkpoint(path)
    cfg = TrainConfig.from_dict(header["train_config"])
    gen = Generator(cfg.generator)
    state = {name: torch.from_numpy(arr) for name, arr in params.items()}
    gen.load_state_dict(state)
    gen.eval()
    return gen, cfg


def infer_volume(gen: Generator, pair: DegradedCase, mode: str,
                 b_values=None, batch_size: int = 18) -> DwiCase:
    """Super-resolve every (selected) DWI of a degraded case on the HR grid."""
    want = 2 if mode == "proposed" else 1
    if gen.cfg.in_channels != want:
        raise ConfigError(f"checkpoint has in_channels={gen.cfg.in_channels}, mode {mode} needs {want}")
    b0_data = pair.hr.b0.volume.data
    if mode == "proposed" and b0_data.shape != pair.hr.dims:
        raise ValidationError("b0 grid must match the HR target grid in proposed mode")
    out_dwis = []
    gen.eval()
    with torch.no_grad():
        for up_dwi, hr_dwi in zip(pair.lr_on_hr_grid.dwis, pair.hr.dwis):
            if b_values is not None and hr_dwi.b_value not in b_values:
                continue
            z = up_dwi.volume.dims[0]
            chans = [up_dwi.volume.data.astype(np.float32)]
            if mode == "proposed":
                chans.append(b0_data.astype(np.float32))
            x = torch.from_numpy(np.stack(chans, axis=1))  # (z, C, H, W)
            preds = []
            for start in range(0, z, batch_size):
                preds.append(gen(x[start : start + batch_size]).numpy()[:, 0])
            sr = np.concatenate(preds, axis=0)
            out_dwis.append(dataclasses.replace(
                hr_dwi, volume=hr_dwi.volume.with_data(sr.astype(np.float32))
            ))
    return DwiCase(pair.hr.case_id, pair.hr.b0, out_dwis, geometry=pair.hr.geometry)
