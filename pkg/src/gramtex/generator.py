"""Feed-forward super-resolution generator and its two-phase training step.

The network runs a residual conv trunk on the low-resolution grid, upsamples
with conv + pixel-shuffle stages, and adds a bicubic upsample of the input,
so the trunk only has to learn the residual image. Training happens in two
phases: MSE pretraining, then the texture loss (optionally mask-guided).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, GeometryError, ValidationError
from .imaging import bicubic_upsample
from .texture import mse_loss, semantic_texture_loss, texture_loss
from .twf import read_tensors, write_tensors

PHASE_MSE = "mse-pretrain"
PHASE_TEXTURE = "texture"


@dataclass(frozen=True)
class GeneratorConfig:
    """Trunk depth/width and upsampling scale; kernels are all 3x3."""

    blocks: int = 10
    width: int = 64
    scale: int = 4

    def __post_init__(self):
        if self.blocks < 1:
            raise ConfigError(f"block count must be >= 1, got {self.blocks}")
        if self.width < 1:
            raise ConfigError(f"trunk width must be >= 1, got {self.width}")
        s = self.scale
        if s < 2 or (s & (s - 1)) != 0:
            raise ConfigError(f"scale must be a power of 2 >= 2, got {s}")

    @property
    def stages(self):
        return int(math.log2(self.scale))


def shallow_config(scale=4):
    """The reduced variant: 6 blocks, width 32."""
    return GeneratorConfig(blocks=6, width=32, scale=scale)


class Generator:
    """Parameterized network; all parameters are trainable float32 tensors."""

    def __init__(self, config, params=None, seed=0):
        self.config = config
        shapes = self._param_shapes(config)
        if params is None:
            params = _he_uniform_params(shapes, seed)
        self.params = {}
        for name, shape in shapes.items():
            if name not in params:
                raise ValidationError(f"missing tensor {name!r}")
            arr = params[name]
            arr = arr.data if isinstance(arr, T.Tensor) else np.asarray(arr, dtype=np.float32)
            if tuple(arr.shape) != shape:
                raise ValidationError(
                    f"mismatched tensor {name!r}: got {tuple(arr.shape)}, need {shape}"
                )
            self.params[name] = T.Tensor(arr.astype(np.float32), requires_grad=True)

    @staticmethod
    def _param_shapes(config):
        w = config.width
        shapes = {"head.weight": (w, 3, 3, 3), "head.bias": (w,)}
        for i in range(1, config.blocks + 1):
            shapes[f"block{i}.conv1.weight"] = (w, w, 3, 3)
            shapes[f"block{i}.conv1.bias"] = (w,)
            shapes[f"block{i}.conv2.weight"] = (w, w, 3, 3)
            shapes[f"block{i}.conv2.bias"] = (w,)
        for j in range(1, config.stages + 1):
            shapes[f"up{j}.weight"] = (4 * w, w, 3, 3)
            shapes[f"up{j}.bias"] = (4 * w,)
        shapes["tail.weight"] = (3, w, 3, 3)
        shapes["tail.bias"] = (3,)
        return shapes

    def parameters(self):
        return list(self.params.values())

    def parameter_count(self):
        return sum(p.size for p in self.params.values())

    def _conv(self, x, name):
        return T.conv2d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"], pad=1)

    def forward(self, lr_image):
        """[B,3,h,w] -> [B,3,h*s,w*s]; h, w must be at least 4."""
        if lr_image.ndim != 4 or lr_image.shape[1] != 3:
            raise ContractError(f"generator input must be [B,3,h,w], got {lr_image.shape}")
        h, w = lr_image.shape[2:]
        if h < 4 or w < 4:
            raise GeometryError(f"input spatial extents must be >= 4, got {h}x{w}")
        trunk = self._conv(lr_image, "head")
        for i in range(1, self.config.blocks + 1):
            t = T.relu(self._conv(trunk, f"block{i}.conv1"))
            t = self._conv(t, f"block{i}.conv2")
            trunk = T.add(trunk, t)
        for j in range(1, self.config.stages + 1):
            trunk = T.relu(T.pixel_shuffle(self._conv(trunk, f"up{j}"), 2))
        residual = self._conv(trunk, "tail")
        skip = bicubic_upsample(lr_image.data, self.config.scale)
        return T.add(residual, T.Tensor(skip))

    def save(self, path):
        cfg = self.config
        tensors = {"meta.config": np.array([cfg.blocks, cfg.width, cfg.scale], dtype=np.float32)}
        for name, p in self.params.items():
            tensors[name] = p.data
        write_tensors(path, tensors)

    @classmethod
    def load(cls, path):
        tensors = read_tensors(path)
        if "meta.config" not in tensors:
            raise ValidationError("checkpoint is missing tensor 'meta.config'")
        meta = tensors.pop("meta.config").reshape(-1)
        if meta.shape[0] != 3:
            raise ValidationError(f"meta.config must hold 3 values, got {meta.shape[0]}")
        config = GeneratorConfig(int(meta[0]), int(meta[1]), int(meta[2]))
        return cls(config, params=tensors)


def _he_uniform_params(shapes, seed):
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in shapes.items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = math.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    return params


def build_generator(config=None, seed=0):
    return Generator(config or GeneratorConfig(), seed=seed)


def parameter_count(config):
    """Closed-form parameter total for a config, without building one."""
    return sum(int(np.prod(s)) for s in Generator._param_shapes(config).values())


@dataclass
class TrainState:
    """Exclusively owned by one training loop."""

    generator: Generator
    adam: T.AdamState
    phase: str = PHASE_MSE
    step: int = 0
    history: list = field(default_factory=list)  # (step, phase, loss) rows


def make_train_state(generator, lr=5e-4):
    return TrainState(generator=generator, adam=T.AdamState(lr=lr))


def begin_texture_phase(state, lr=None):
    """Switch from MSE pretraining to the texture objective (one-way).

    Optimizer moments restart because the objective changes; the step
    counter and history continue.
    """
    if state.phase != PHASE_MSE:
        raise ContractError(f"phase can only move {PHASE_MSE} -> {PHASE_TEXTURE}")
    state.phase = PHASE_TEXTURE
    state.adam = T.AdamState(lr=state.adam.lr if lr is None else lr)
    return state


def _check_pair(lr_img, hr_img, scale):
    if lr_img.ndim != 4 or hr_img.ndim != 4:
        raise ContractError("batch entries must be [1,3,h,w] tensors")
    h, w = lr_img.shape[2:]
    if tuple(hr_img.shape[2:]) != (h * scale, w * scale):
        raise ContractError(
            f"hr extents {tuple(hr_img.shape[2:])} != lr extents {h}x{w} times scale {scale}"
        )


def train_step(state, batch, extractor=None, loss_config=None, masks=None):
    """One optimization step over a batch of (lr, hr) image pairs.

    In the MSE phase the objective is mean squared error against hr; in the
    texture phase it is the texture loss between taps of the estimate and
    taps of hr, or the mask-guided variant when `masks` holds a MaskSet per
    pair. Returns (state, loss value).
    """
    batch = list(batch)
    if not batch:
        raise ContractError("train_step needs a non-empty batch")
    scale = state.generator.config.scale
    for lr_img, hr_img in batch:
        _check_pair(lr_img, hr_img, scale)
    if masks is not None and not isinstance(masks, (list, tuple)):
        masks = [masks] * len(batch)
    if masks is not None and len(masks) != len(batch):
        raise ContractError(f"{len(masks)} mask sets for {len(batch)} batch pairs")
    if state.phase == PHASE_TEXTURE and extractor is None:
        raise ContractError("texture phase needs a feature extractor")

    params = state.generator.parameters()
    for p in params:
        p.zero_grad()
    stackable = len({(tuple(l.shape), tuple(h.shape)) for l, h in batch}) == 1

    with T.Tape() as tape:
        if state.phase == PHASE_MSE:
            if stackable:
                lr_all = T.Tensor(np.concatenate([l.data for l, _ in batch]))
                hr_all = T.Tensor(np.concatenate([h.data for _, h in batch]))
                loss = mse_loss(state.generator.forward(lr_all), hr_all)
            else:
                loss = None
                for lr_img, hr_img in batch:
                    term = mse_loss(state.generator.forward(lr_img), hr_img)
                    loss = term if loss is None else T.add(loss, term)
                loss = T.mul(loss, 1.0 / len(batch))
        elif masks is None:
            taps = loss_config.taps if loss_config is not None else _default_taps(extractor)
            if stackable:
                lr_all = T.Tensor(np.concatenate([l.data for l, _ in batch]))
                hr_all = T.Tensor(np.concatenate([h.data for _, h in batch]))
                est_taps = extractor.forward_with_taps(state.generator.forward(lr_all), taps)
                hr_taps = extractor.forward_with_taps(hr_all, taps)
                loss = texture_loss(est_taps, hr_taps, loss_config)
            else:
                loss = None
                for lr_img, hr_img in batch:
                    est_taps = extractor.forward_with_taps(state.generator.forward(lr_img), taps)
                    hr_taps = extractor.forward_with_taps(hr_img, taps)
                    term = texture_loss(est_taps, hr_taps, loss_config)
                    loss = term if loss is None else T.add(loss, term)
                loss = T.mul(loss, 1.0 / len(batch))
        else:
            loss = None
            for (lr_img, hr_img), mask_set in zip(batch, masks):
                est = state.generator.forward(lr_img)
                term = semantic_texture_loss(est, hr_img, mask_set, extractor, loss_config)
                loss = term if loss is None else T.add(loss, term)
            loss = T.mul(loss, 1.0 / len(batch))
    tape.backward(loss)
    T.adam_step(params, [p.grad for p in params], state.adam)
    state.step += 1
    value = loss.item()
    state.history.append((state.step, state.phase, value))
    return state, value


def _default_taps(extractor):
    from .extractor import DEFAULT_LOSS_TAPS

    names = set(extractor.spec.conv_names())
    if all(t in names for t in DEFAULT_LOSS_TAPS):
        return DEFAULT_LOSS_TAPS
    raise ContractError("extractor lacks the default tap layers; pass a loss config")
