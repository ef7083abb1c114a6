"""Iterative texture optimization of a pixel image.

A copy of the init image's pixels becomes the optimized parameter; every
step evaluates the texture loss (or its mask-guided variant) against the
style image's feature taps, backpropagates to the pixels, applies Adam, and
optionally clamps to [0,1]. Style-side features are extracted once per run.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ValidationError
from .imaging import bicubic_downsample, bicubic_upsample
from .texture import LossConfig, apply_masks, texture_loss

INIT_GIVEN = "given-image"
INIT_WHITE = "white"
INIT_BICUBIC = "bicubic-up"


def _parse_init_mode(mode):
    if mode == INIT_GIVEN or mode == INIT_WHITE:
        return mode, None
    if mode.startswith(INIT_BICUBIC + ":"):
        try:
            s = int(mode.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad init mode {mode!r}") from None
        if s < 2 or (s & (s - 1)) != 0:
            raise ConfigError(f"init mode scale must be a power of 2 >= 2, got {s}")
        return INIT_BICUBIC, s
    raise ConfigError(
        f"unknown init mode {mode!r} (expected {INIT_GIVEN}, {INIT_WHITE}, or {INIT_BICUBIC}:<s>)"
    )


@dataclass(frozen=True)
class TransferConfig:
    steps: int
    lr: float = 0.01
    loss_config: LossConfig = None
    masks: object = None
    clamp: bool = True
    init_mode: str = INIT_GIVEN

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"step count must be >= 1, got {self.steps}")
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        _parse_init_mode(self.init_mode)


@dataclass
class TransferReport:
    trace: list  # loss before each step's update; length == steps
    image: T.Tensor
    duration: float
    final_loss: float


def _resolve_init(init, style, config):
    mode, s = _parse_init_mode(config.init_mode)
    if mode == INIT_WHITE:
        return T.Tensor(np.ones_like(style.data))
    if init is None:
        if mode == INIT_GIVEN:
            raise ContractError("init mode 'given-image' needs an init image")
        init = style
    if mode == INIT_BICUBIC:
        return bicubic_upsample(bicubic_downsample(init, s), s)
    return init


def optimize_image(init, style, ext, config):
    """Optimize pixels toward the style image's texture statistics."""
    if style.ndim != 4 or style.shape[0] != 1:
        raise ContractError(f"style image must be [1,3,H,W], got {style.shape}")
    init = _resolve_init(init, style, config)
    if tuple(init.shape) != tuple(style.shape):
        raise ContractError(f"init shape {tuple(init.shape)} != style shape {tuple(style.shape)}")
    loss_cfg = config.loss_config or LossConfig()
    masks = config.masks
    if masks is not None and not masks.partition_ok():
        raise ValidationError("mask set does not partition the frame")

    # style taps are constant for the whole run; extract them once
    if masks is None:
        style_taps = [ext.forward_with_taps(style, loss_cfg.taps)]
        mask_arrays = [None]
    else:
        style_taps = [
            ext.forward_with_taps(m, loss_cfg.taps) for m in apply_masks(style, masks)
        ]
        mask_arrays = list(masks.masks)

    pixels = T.Tensor(init.data.astype(style.data.dtype, copy=True), requires_grad=True)
    adam = T.AdamState(lr=config.lr)
    trace = []
    start = time.perf_counter()

    def step_loss():
        total = None
        for taps_t, mask in zip(style_taps, mask_arrays):
            if mask is None:
                est = pixels
            else:
                m4 = np.broadcast_to(mask.astype(pixels.data.dtype), pixels.shape)
                est = T.mul(pixels, T.Tensor(m4))
            taps_e = ext.forward_with_taps(est, loss_cfg.taps)
            term = texture_loss(taps_e, taps_t, loss_cfg)
            total = term if total is None else T.add(total, term)
        return total

    for _ in range(config.steps):
        pixels.zero_grad()
        with T.Tape() as tape:
            loss = step_loss()
        tape.backward(loss)
        T.adam_step([pixels], [pixels.grad], adam)
        if config.clamp:
            np.clip(pixels.data, 0.0, 1.0, out=pixels.data)
        trace.append(loss.item())

    final_loss = step_loss().item()
    duration = time.perf_counter() - start
    return TransferReport(trace=trace, image=pixels.detach(), duration=duration, final_loss=final_loss)


def sr_refine(lr_image, hr_reference, scale, ext, config):
    """Single-image refinement: bicubic-upsampled lr optimized toward hr taps."""
    if lr_image.ndim != 4 or hr_reference.ndim != 4:
        raise ContractError("sr_refine expects [1,3,h,w] images")
    h, w = lr_image.shape[2:]
    if tuple(hr_reference.shape[2:]) != (h * scale, w * scale):
        raise ContractError(
            f"hr extents {tuple(hr_reference.shape[2:])} != lr extents {h}x{w} times scale {scale}"
        )
    init = bicubic_upsample(lr_image, scale)
    return optimize_image(init, hr_reference, ext, config)


def moving_average_ok(trace, window=25, tol=0.01):
    """True when the sliding-window mean never rises by more than `tol`."""
    trace = np.asarray(trace, dtype=np.float64)
    if trace.size <= window:
        return True
    kernel = np.ones(window) / window
    means = np.convolve(trace, kernel, mode="valid")
    prev = means[:-1]
    nxt = means[1:]
    return bool(np.all(nxt <= prev * (1.0 + tol) + 1e-15))


def write_trace_csv(path, values, header="step,loss"):
    """CSV trace with 1-based step numbers."""
    lines = [header]
    lines += [f"{i},{v!r}" for i, v in enumerate(values, start=1)]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
