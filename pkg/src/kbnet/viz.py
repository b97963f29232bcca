"""Fusion-coefficient visualization.

The per-pixel N-vector of fusion coefficients (taken from the final MFF
block of each encoder stage) is projected to 3 channels by a fixed-seed
random matrix, min-max normalized per channel, and upscaled to the input
resolution with nearest-neighbor interpolation.  The whole pipeline is a
pure function of (checkpoint, image, seed), so outputs are byte-identical
across runs.
"""

from __future__ import annotations

import numpy as np

from . import net as net_mod
from .errors import ConfigError
from .imgio import save_image

DEFAULT_PROJECTION_SEED = 1234


def capture_coefficient_maps(img_chw: np.ndarray, params, cfg) -> list[np.ndarray]:
    """Run the network and return one (N, h_s, w_s) coefficient map per
    encoder stage."""
    if not cfg.branch_kba:
        raise ConfigError("coefficient visualization needs the KBA branch enabled")
    padded, _ = net_mod.pad_crop(img_chw[None])
    _, cache = net_mod.forward(padded, params, cfg, capture_coeffs=True)
    return [c[0] for c in cache["coeffs"]]


def project_to_rgb(
    coeffs: np.ndarray, out_h: int, out_w: int, seed: int = DEFAULT_PROJECTION_SEED
) -> np.ndarray:
    """(N, h, w) coefficients -> (3, out_h, out_w) float RGB in [0, 1]."""
    n, h, w = coeffs.shape
    rng = np.random.default_rng(seed)
    proj = rng.standard_normal((3, n))
    rgb = np.einsum("cn,nhw->chw", proj, coeffs.astype(np.float64))
    for ch in range(3):
        lo, hi = rgb[ch].min(), rgb[ch].max()
        rgb[ch] = (rgb[ch] - lo) / (hi - lo) if hi > lo else 0.0
    fy, fx = out_h // h, out_w // w
    rgb = np.repeat(np.repeat(rgb, fy, axis=1), fx, axis=2)
    return rgb[:, :out_h, :out_w]


def write_coefficient_maps(
    img_chw: np.ndarray,
    params,
    cfg,
    out_dir,
    stage: int | None = None,
    seed: int = DEFAULT_PROJECTION_SEED,
) -> list[str]:
    from pathlib import Path

    maps = capture_coefficient_maps(img_chw, params, cfg)
    _, h, w = img_chw.shape
    ph = h + (-h) % net_mod.DOWN_FACTOR
    pw = w + (-w) % net_mod.DOWN_FACTOR
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stages = range(len(maps)) if stage is None else [stage]
    written = []
    for s in stages:
        if not 0 <= s < len(maps):
            raise ConfigError(f"stage {s} out of range (0..{len(maps) - 1})")
        rgb = project_to_rgb(maps[s], ph, pw, seed)[:, :h, :w]
        path = out / f"coeffs_stage{s}.png"
        save_image(rgb.astype(np.float32), path)
        written.append(str(path))
    return written
