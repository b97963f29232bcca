"""Desk-scale Gaussian-denoising training harness.

Noise synthesis, loss, decoupled-weight-decay Adam, cosine schedule, and
a deterministic training loop.  All randomness is drawn from generators
seeded by (config seed, stream id), so identical configurations produce
bit-identical checkpoints and metrics.

Metrics CSV schema: ``iter,loss,eval_psnr,eval_ssim,lr,wall_ms`` -- one
row per evaluation event.  wall_ms is wall-clock and is the only
non-reproducible column.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import net as net_mod
from .checkpoint import save_checkpoint
from .errors import ConfigError, KbnetError
from .metrics import psnr, ssim
from .net import NetConfig, NetParams, named_params

LOSS_EPS = 1e-8


@dataclass
class TrainConfig:
    train_dir: str = ""
    eval_dir: str = ""
    sigma: float = 25.0  # noise std in 0..255 units
    patch_size: int = 64
    batch_size: int = 8
    iterations: int = 2000
    learning_rate: float = 1e-3
    lr_schedule: str = "cosine"  # {"constant", "cosine"}
    loss_kind: str = "psnr_loss"  # {"psnr_loss", "l1"}
    seed: int = 0
    eval_every: int = 500
    weight_decay: float = 0.0

    def validate(self) -> None:
        if self.sigma <= 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")
        if self.patch_size % 16:
            raise ConfigError(f"patch_size must be divisible by 16, got {self.patch_size}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.loss_kind not in ("psnr_loss", "l1"):
            raise ConfigError(f"unknown loss_kind {self.loss_kind!r}")


# ---------------------------------------------------------------------------
# Noise and loss


def add_gaussian_noise(img: np.ndarray, sigma_255: float, seed) -> np.ndarray:
    """i.i.d. Gaussian noise with std sigma/255; deliberately not clipped
    to [0, 1] so the noise distribution stays exact."""
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(img.shape).astype(img.dtype) * (
        np.asarray(sigma_255 / 255.0, dtype=img.dtype)
    )
    return img + noise


def loss_forward_backward(pred: np.ndarray, target: np.ndarray, kind: str):
    """Returns (scalar loss, grad wrt pred)."""
    d = pred - target
    count = d.size
    if kind == "l1":
        loss = float(np.mean(np.abs(d)))
        grad = np.sign(d) / count
    elif kind == "psnr_loss":
        mse = float(np.mean(d * d)) + LOSS_EPS
        loss = 10.0 * math.log10(mse)  # == -PSNR with peak 1, eps-stabilized
        grad = (20.0 / math.log(10.0)) * d / (count * mse)
    else:
        raise ConfigError(f"unknown loss kind {kind!r}")
    return loss, grad.astype(pred.dtype)


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.9
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: NetParams, weight_decay: float = 0.0) -> "AdamState":
        st = cls(weight_decay=weight_decay)
        for name, arr in named_params(params):
            st.m[name] = np.zeros_like(arr)
            st.v[name] = np.zeros_like(arr)
        return st


def adam_step(params: NetParams, grads: NetParams, state: AdamState, lr: float) -> None:
    """In-place decoupled-weight-decay Adam update with bias correction."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    grad_map = dict(named_params(grads))
    for name, p in named_params(params):
        g = grad_map[name].astype(p.dtype, copy=False)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mhat = m / bc1
        vhat = v / bc2
        if state.weight_decay:
            p *= 1.0 - lr * state.weight_decay
        p -= (lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.dtype)


def lr_at(i: int, cfg: TrainConfig, lr_min: float = 1e-6) -> float:
    if cfg.lr_schedule == "constant" or cfg.iterations <= 1:
        return cfg.learning_rate
    frac = i / (cfg.iterations - 1)
    return lr_min + 0.5 * (cfg.learning_rate - lr_min) * (1.0 + math.cos(math.pi * frac))


# ---------------------------------------------------------------------------
# Data pipeline


def load_corpus(directory: str) -> list[np.ndarray]:
    """Load every decodable image in a directory as float32 (c, h, w) in
    [0, 1], sorted by filename."""
    from .imgio import load_image

    d = Path(directory)
    if not d.is_dir():
        raise KbnetError(f"corpus directory not found: {directory}")
    images = []
    for path in sorted(d.iterdir()):
        if path.suffix.lower() in (".png", ".ppm", ".pgm"):
            images.append(load_image(path))
    if not images:
        raise KbnetError(f"no images found in corpus directory: {directory}")
    return images


def sample_batch(
    images: list[np.ndarray], patch: int, batch: int, rng: np.random.Generator
) -> np.ndarray:
    """Uniform random crops with random horizontal/vertical flips."""
    out = []
    for _ in range(batch):
        img = images[rng.integers(len(images))]
        _, h, w = img.shape
        if h < patch or w < patch:
            raise KbnetError(f"corpus image {h}x{w} smaller than patch {patch}")
        y = int(rng.integers(h - patch + 1))
        x = int(rng.integers(w - patch + 1))
        crop = img[:, y : y + patch, x : x + patch]
        if rng.integers(2):
            crop = crop[:, :, ::-1]
        if rng.integers(2):
            crop = crop[:, ::-1, :]
        out.append(np.ascontiguousarray(crop))
    return np.stack(out)


# ---------------------------------------------------------------------------
# Evaluation and the training loop


def evaluate(
    params: NetParams,
    net_cfg: NetConfig,
    eval_images: list[np.ndarray],
    sigma: float,
    seed: int,
):
    """Fixed per-image noise seeds; returns mean (psnr, ssim, noisy_psnr)."""
    psnrs, ssims, noisy_psnrs = [], [], []
    for idx, clean in enumerate(eval_images):
        x = clean[None]
        noisy = add_gaussian_noise(x, sigma, np.random.SeedSequence([seed, 3, idx]))
        padded, rec = net_mod.pad_crop(noisy)
        out, _ = net_mod.forward(padded, params, net_cfg)
        denoised = net_mod.unpad(out, rec)
        psnrs.append(psnr(denoised, x))
        ssims.append(ssim(denoised, x))
        noisy_psnrs.append(psnr(noisy, x))
    return (
        float(np.mean(psnrs)),
        float(np.mean(ssims)),
        float(np.mean(noisy_psnrs)),
    )


def train(net_cfg: NetConfig, cfg: TrainConfig, out_dir: str):
    """Run the training loop; writes metrics.csv and final.kbnt to out_dir.

    Returns (params, history) where history has the full per-iteration
    loss list, the metrics rows, and the final evaluation results.
    """
    cfg.validate()
    net_cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    train_images = load_corpus(cfg.train_dir)
    eval_images = load_corpus(cfg.eval_dir) if cfg.eval_dir else []

    params = net_mod.build(net_cfg, seed=cfg.seed)
    state = AdamState.for_params(params, weight_decay=cfg.weight_decay)
    data_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    noise_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))

    losses: list[float] = []
    rows: list[dict] = []
    csv_path = out / "metrics.csv"
    t0 = time.monotonic()

    def write_csv():
        with open(csv_path, "w") as f:
            f.write("iter,loss,eval_psnr,eval_ssim,lr,wall_ms\n")
            for r in rows:
                f.write(
                    f"{r['iter']},{r['loss']:.6f},{r['eval_psnr']},"
                    f"{r['eval_ssim']},{r['lr']:.8f},{r['wall_ms']}\n"
                )

    def log_event(i, loss, lr):
        if eval_images:
            ep, es, _ = evaluate(params, net_cfg, eval_images, cfg.sigma, cfg.seed)
            ep_s, es_s = f"{ep:.4f}", f"{es:.5f}"
        else:
            ep_s = es_s = ""
        rows.append(
            {
                "iter": i,
                "loss": loss,
                "eval_psnr": ep_s,
                "eval_ssim": es_s,
                "lr": lr,
                "wall_ms": int((time.monotonic() - t0) * 1000),
            }
        )
        write_csv()
        save_checkpoint(params, net_cfg, out / "last.kbnt")

    for i in range(cfg.iterations):
        clean = sample_batch(train_images, cfg.patch_size, cfg.batch_size, data_rng)
        noisy = clean + noise_rng.standard_normal(clean.shape).astype(
            clean.dtype
        ) * np.float32(cfg.sigma / 255.0)
        lr = lr_at(i, cfg)
        pred, cache = net_mod.forward(noisy, params, net_cfg)
        loss, grad = loss_forward_backward(pred, clean, cfg.loss_kind)
        _, grads = net_mod.backward(cache, params, net_cfg, grad)
        adam_step(params, grads, state, lr)
        losses.append(loss)
        if not np.isfinite(loss):
            raise KbnetError(f"non-finite loss at iteration {i}")
        if cfg.eval_every and (i + 1) % cfg.eval_every == 0:
            log_event(i + 1, loss, lr)

    if not rows or rows[-1]["iter"] != cfg.iterations:
        log_event(cfg.iterations, losses[-1] if losses else float("nan"),
                  lr_at(max(cfg.iterations - 1, 0), cfg))
    save_checkpoint(params, net_cfg, out / "final.kbnt")

    history = {"losses": losses, "rows": rows, "csv_path": str(csv_path)}
    return params, history
