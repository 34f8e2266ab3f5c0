"""Toy denoising training: procedural patches, L1 + Adam, fixed or random top-k."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from typing import Iterable, TextIO

import numpy as np

from kgt.attention import Backend
from kgt.errors import ConfigurationError, DimensionError, DivergenceError
from kgt.model import KGTNet, forward
from kgt.numerics import Parameter, Tensor, abs, mean, no_grad, sub

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "k", "loss", "lr", "psnr_val")
PSNR_CAP = 99.0

# stream ids keep training, evaluation and noise draws independent
_TRAIN_STREAM, _EVAL_STREAM = 0, 1
_CLEAN, _NOISE = 0, 1


@dataclass(frozen=True)
class TopkSchedule:
    mode: str  # "fixed" | "random"
    values: tuple[int, ...]

    def __post_init__(self):
        if self.mode not in ("fixed", "random"):
            raise ConfigurationError(f"unknown top-k schedule mode {self.mode!r}")
        if not self.values:
            raise ConfigurationError("top-k schedule needs at least one value")
        if self.mode == "fixed" and len(self.values) != 1:
            raise ConfigurationError("a fixed schedule has exactly one k")
        if any(v < 1 for v in self.values):
            raise ConfigurationError(f"top-k values must be >= 1, got {self.values}")

    @classmethod
    def fixed(cls, k: int) -> TopkSchedule:
        return cls("fixed", (int(k),))

    @classmethod
    def random(cls, values: Iterable[int]) -> TopkSchedule:
        return cls("random", tuple(sorted({int(v) for v in values})))

    @classmethod
    def parse(cls, text: str) -> TopkSchedule:
        """``fixed:8`` or ``random:4,8,16,32``."""
        mode, _, rest = text.strip().lower().partition(":")
        try:
            values = [int(v) for v in rest.split(",") if v.strip()]
        except ValueError:
            raise ConfigurationError(f"bad top-k schedule {text!r}") from None
        if mode == "fixed":
            if len(values) != 1:
                raise ConfigurationError(f"fixed schedule needs one k: {text!r}")
            return cls.fixed(values[0])
        if mode == "random":
            return cls.random(values)
        raise ConfigurationError(f"bad top-k schedule {text!r}")

    def __str__(self):
        return f"{self.mode}:" + ",".join(map(str, self.values))


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    patch_size: int = 64
    sigma: float = 25.0
    lr: float = 2e-4
    lr_min: float = 2e-5
    seed: int = 0
    schedule: str = "random:4,8,16,32"
    backend: str = "mask"
    eval_every: int = 250
    eval_images: int = 8
    eval_k: int = 16

    def validate(self):
        problems = []
        if self.steps < 1:
            problems.append(f"steps must be >= 1 (got {self.steps})")
        if self.sigma < 0:
            problems.append(f"sigma must be >= 0 (got {self.sigma})")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1 (got {self.batch_size})")
        if self.patch_size < 8:
            problems.append(f"patch_size must be >= 8 (got {self.patch_size})")
        if self.lr < 0 or self.lr_min < 0:
            problems.append("learning rates must be >= 0")
        if problems:
            raise ConfigurationError("invalid training config: " + "; ".join(problems))
        TopkSchedule.parse(self.schedule)
        Backend.parse(self.backend)


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def synth_patch(seed: int, size: int) -> np.ndarray:
    """Procedural grayscale patch ``1 x size x size`` in [0, 1].

    A smooth ramp background, a few flat convex polygons with hard edges,
    and an oriented sinusoidal grating confined to a disc.
    """
    if size < 8:
        raise ConfigurationError(f"patch size must be >= 8, got {size}")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / (size - 1)

    img = rng.uniform(0.3, 0.7) + rng.uniform(-0.25, 0.25) * (xx - 0.5) \
        + rng.uniform(-0.25, 0.25) * (yy - 0.5)

    for _ in range(rng.integers(1, 4)):
        cx, cy = rng.uniform(0.1, 0.9, size=2)
        radius = rng.uniform(0.12, 0.4)
        n = rng.integers(3, 7)
        ang = np.sort(rng.uniform(0, 2 * np.pi, size=n))
        vx, vy = cx + radius * np.cos(ang), cy + radius * np.sin(ang)
        inside = np.ones_like(xx, dtype=bool)
        for i in range(n):
            j = (i + 1) % n
            # counter-clockwise vertices: interior is left of every edge
            inside &= (vx[j] - vx[i]) * (yy - vy[i]) - (vy[j] - vy[i]) * (xx - vx[i]) >= 0
        img = np.where(inside, rng.uniform(0.05, 0.95), img)

    if rng.random() < 0.8:
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(3.0, 12.0)  # cycles per patch
        amp = rng.uniform(0.1, 0.3)
        cx, cy = rng.uniform(0.2, 0.8, size=2)
        disc = (xx - cx) ** 2 + (yy - cy) ** 2 <= rng.uniform(0.15, 0.35) ** 2
        wave = 0.5 + amp * np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta))
                                  + rng.uniform(0, 2 * np.pi))
        img = np.where(disc, wave, img)

    return np.clip(img, 0.0, 1.0).astype(np.float32)[None]


def add_noise(x, sigma: float, seed: int) -> np.ndarray:
    """Additive white Gaussian noise with std ``sigma / 255``; not clamped."""
    if sigma < 0:
        raise ConfigurationError(f"sigma must be >= 0, got {sigma}")
    xd = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float32)
    if sigma == 0:
        return xd.copy()
    noise = np.random.default_rng(seed).standard_normal(xd.shape)
    return (xd + (sigma / 255.0) * noise).astype(np.float32)


def l1_loss(pred: Tensor, target) -> Tensor:
    target = target if isinstance(target, Tensor) else Tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"l1_loss: {pred.shape} vs {target.shape}")
    return mean(abs(sub(pred, target)))


def psnr(pred, target) -> float:
    """PSNR in dB on the [0, 1] scale; ``pred`` is clamped first; capped at 99 dB."""
    p = np.clip(np.asarray(pred.data if isinstance(pred, Tensor) else pred, np.float64), 0, 1)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, np.float64)
    mse = float(np.mean((p - t) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def sample_k(schedule: TopkSchedule, rng: np.random.Generator) -> int:
    if schedule.mode == "fixed":
        return schedule.values[0]
    return int(schedule.values[rng.integers(len(schedule.values))])


class Adam:
    def __init__(self, params: list[Parameter], betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self, lr: float):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


def cosine_lr(step: int, total: int, lr: float, lr_min: float) -> float:
    """Cosine decay from ``lr`` at step 0 to ``lr_min`` at the last step."""
    if total <= 1:
        return lr
    return lr_min + 0.5 * (lr - lr_min) * (1 + math.cos(math.pi * step / (total - 1)))


def make_pair(seed: int, stream: int, index: int, size: int, sigma: float):
    clean = synth_patch(int(_rng(seed, stream, _CLEAN, index).integers(2**63)), size)
    noisy = add_noise(clean, sigma, int(_rng(seed, stream, _NOISE, index).integers(2**63)))
    return noisy, clean


def make_batch(cfg: TrainConfig, step: int):
    pairs = [make_pair(cfg.seed, _TRAIN_STREAM, step * cfg.batch_size + i,
                       cfg.patch_size, cfg.sigma) for i in range(cfg.batch_size)]
    noisy = np.stack([p[0] for p in pairs])
    clean = np.stack([p[1] for p in pairs])
    return noisy, clean


def make_eval_set(cfg: TrainConfig, n: int | None = None):
    n = cfg.eval_images if n is None else n
    pairs = [make_pair(cfg.seed, _EVAL_STREAM, i, cfg.patch_size, cfg.sigma) for i in range(n)]
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


def train_step(net: KGTNet, batch, opt: Adam, k: int, backend, lr: float,
               step: int = 0) -> float:
    """One forward/backward/Adam update; returns the pre-update loss."""
    noisy, clean = batch
    net.zero_grad()
    try:
        loss = l1_loss(forward(net, Tensor(noisy), k, backend), clean)
    except FloatingPointError:
        raise DivergenceError(step, float("nan")) from None
    value = loss.item()
    if not math.isfinite(value):
        raise DivergenceError(step, value)
    loss.backward()
    opt.step(lr)
    return value


def evaluate(net: KGTNet, eval_set, k: int, backend="mask", chunk: int = 8) -> float:
    """Mean per-image PSNR of the network output against the clean images."""
    noisy, clean = eval_set
    scores = []
    with no_grad():
        for s in range(0, len(noisy), chunk):
            out = forward(net, Tensor(noisy[s:s + chunk]), k, backend).data
            scores += [psnr(o, c) for o, c in zip(out, clean[s:s + chunk])]
    return float(np.mean(scores))


def noisy_psnr(eval_set) -> float:
    noisy, clean = eval_set
    return float(np.mean([psnr(n, c) for n, c in zip(noisy, clean)]))


def train(net: KGTNet, cfg: TrainConfig, log_file: TextIO | None = None,
          eval_set=None) -> list[dict]:
    """Run ``cfg.steps`` updates; returns the per-step log rows."""
    cfg.validate()
    schedule = TopkSchedule.parse(cfg.schedule)
    backend = Backend.parse(cfg.backend)
    opt = Adam(net.parameters())
    k_rng = _rng(cfg.seed, 2)
    if eval_set is None and cfg.eval_every > 0:
        eval_set = make_eval_set(cfg)
    writer = None
    if log_file is not None:
        writer = csv.writer(log_file, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
    history = []
    for step in range(cfg.steps):
        k = sample_k(schedule, k_rng)
        lr = cosine_lr(step, cfg.steps, cfg.lr, cfg.lr_min)
        loss = train_step(net, make_batch(cfg, step), opt, k, backend, lr, step)
        row = {"step": step + 1, "k": k, "loss": loss, "lr": lr, "psnr_val": None}
        last = step + 1 == cfg.steps
        if eval_set is not None and cfg.eval_every > 0 and ((step + 1) % cfg.eval_every == 0 or last):
            row["psnr_val"] = evaluate(net, eval_set, cfg.eval_k, backend)
            log.info("step %d loss %.5f psnr_val %.3f", step + 1, loss, row["psnr_val"])
        history.append(row)
        if writer is not None:
            writer.writerow([row["step"], k, f"{loss:.6f}", f"{lr:.6g}",
                             "" if row["psnr_val"] is None else f"{row['psnr_val']:.4f}"])
            log_file.flush()
    return history


__all__ = [
    "Adam", "TopkSchedule", "TrainConfig", "add_noise", "cosine_lr", "evaluate",
    "l1_loss", "make_batch", "make_eval_set", "make_pair", "noisy_psnr", "psnr", "sample_k",
    "synth_patch", "train", "train_step",
]
